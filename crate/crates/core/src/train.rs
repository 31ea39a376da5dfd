//! Two-stage training.
//!
//! Stage 1 fits the content encoder and a throwaway content-only decoder on
//! single-style data, then freezes the encoder. Stage 2 trains the style
//! encoder, a freshly initialized decoder and the statistics network with
//! alternating updates: the synthesis networks descend
//! `L1 + λ·max(0, L_MI)`, the statistics network ascends the unclipped
//! `L_MI` computed in the same forward pass.
//!
//! Random draws come from named streams of the stage seed: `init`
//! (parameter initialization), `data_order` (one shuffle per epoch),
//! `content_sample` (one draw per utterance per step, in batch order) and
//! `permutation` (`b − 1` draws per step).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::checkpoint::Checkpoint;
use crate::data::Utterance;
use crate::error::{MistError, Result};
use crate::mine::{self, DvNodes, EmaDenominator, MineEstimate};
use crate::models::{
    self, ContentEncoder, ContentEncoderIds, Decoder, DecoderIds, ModelConfig, StatisticsIds,
    StatisticsNetwork, StyleEncoder, StyleEncoderIds,
};
use crate::nn::Module;
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{self, Rng, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the MI penalty; zero gives the reconstruction-only baseline.
    pub lambda: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Learning rate of the style encoder and decoder.
    pub lr: f64,
    /// Learning rate of the statistics network.
    pub stat_lr: f64,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub pretrain_seed: u64,
    pub train_seed: u64,
    pub clip_mi: bool,
    pub ema_denominator: bool,
    /// Held-out L1 per frame element that counts as converged pretraining.
    pub pretrain_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            stat_lr: 1e-3,
            pretrain_lr: 3e-3,
            pretrain_epochs: 100,
            epochs: 200,
            pretrain_seed: 42,
            train_seed: 42,
            clip_mi: true,
            ema_denominator: false,
            pretrain_threshold: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(MistError::Config("lambda must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(MistError::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [
            ("lr", self.lr),
            ("stat_lr", self.stat_lr),
            ("pretrain_lr", self.pretrain_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(MistError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Per-step log line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub recon_loss: f64,
    pub mi_raw: f64,
    pub mi_clipped: f64,
    pub total_loss: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,recon_loss,mi_raw,mi_clipped,total_loss";

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch, m.step, m.recon_loss, m.mi_raw, m.mi_clipped, m.total_loss
        ));
    }
    out
}

/// Mean of `f` over the steps of each epoch, in epoch order.
pub fn epoch_means(rows: &[StepMetrics], f: impl Fn(&StepMetrics) -> f64) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for m in rows {
        if out.len() < m.epoch {
            out.resize(m.epoch, (0.0, 0));
        }
        let e = &mut out[m.epoch - 1];
        e.0 += f(m);
        e.1 += 1;
    }
    out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

/// Stacked batch inputs.
struct Stacked {
    tokens: Vec<usize>,
    frames: Tensor,
    offsets: Vec<usize>,
}

fn stack(utts: &[&Utterance]) -> Result<Stacked> {
    let offsets = models::offsets(utts.iter().map(|u| u.c.len()));
    let tokens = utts.iter().flat_map(|u| u.c.iter().copied()).collect();
    let d = utts.first().map_or(0, |u| u.x.dims2().1);
    let values: Vec<f64> = utts.iter().flat_map(|u| u.x.values().iter().copied()).collect();
    let frames = Tensor::new(vec![*offsets.last().unwrap(), d], values)?;
    Ok(Stacked {
        tokens,
        frames,
        offsets,
    })
}

fn shuffled(rng: &mut Rng, n: usize) -> Vec<usize> {
    rng::permutation(rng, n)
}

// ---------------------------------------------------------------------------
// Stage 1

pub struct PretrainOutcome {
    /// Frozen.
    pub content: ContentEncoder,
    /// Kept only for inspection; stage 2 never reuses it.
    pub decoder: Decoder,
    pub epoch_losses: Vec<f64>,
    pub heldout_l1: f64,
    pub converged: bool,
    pub checkpoint: Checkpoint,
}

fn single_style(utts: &[Utterance]) -> Result<()> {
    let mut styles: Vec<usize> = utts.iter().map(|u| u.s).collect();
    styles.sort_unstable();
    styles.dedup();
    if styles.len() > 1 {
        return Err(MistError::MultiStylePretrain(styles));
    }
    Ok(())
}

/// Mean absolute reconstruction error per frame element of a content-only
/// decoder on `utts`.
pub fn pretrain_l1(content: &ContentEncoder, decoder: &Decoder, utts: &[Utterance]) -> Result<f64> {
    if utts.is_empty() {
        return Err(MistError::Empty("pretrain_l1"));
    }
    let refs: Vec<&Utterance> = utts.iter().collect();
    let st = stack(&refs)?;
    let mut g = Graph::new();
    let mut frozen = content.clone();
    frozen.freeze();
    let c = frozen.bind(&mut g);
    let d = decoder.bind(&mut g, false);
    let y = c.forward(&mut g, &frozen, &st.tokens)?;
    let pred = d.forward(&mut g, y, None)?;
    let x = g.constant(&st.frames);
    let diff = g.sub(pred, x)?;
    let a = g.abs(diff);
    let l = g.mean(a)?;
    Ok(g.value(l).item())
}

/// Stage 1: jointly fits the content encoder and a content-only decoder on
/// single-style utterances with an L1 loss, then freezes the encoder.
pub fn pretrain(
    train: &[Utterance],
    heldout: &[Utterance],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    config_echo: serde_json::Value,
) -> Result<PretrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(MistError::Empty("pretrain"));
    }
    single_style(train)?;
    single_style(heldout)?;

    let mut init = rng::stream(cfg.pretrain_seed, "init");
    let mut order_rng = rng::stream(cfg.pretrain_seed, "data_order");
    let mut content = ContentEncoder::new(model_cfg, &mut init);
    let mut decoder = Decoder::pretraining(model_cfg, &mut init);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.pretrain_lr);

    let mut epoch_losses = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 1..=cfg.pretrain_epochs {
        let order = shuffled(&mut order_rng, train.len());
        let mut total = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let utts: Vec<&Utterance> = chunk.iter().map(|&i| &train[i]).collect();
            let st = stack(&utts)?;
            let mut g = Graph::new();
            let c = content.bind(&mut g);
            let d = decoder.bind(&mut g, true);
            let y = c.forward(&mut g, &content, &st.tokens)?;
            let pred = d.forward(&mut g, y, None)?;
            let x = g.constant(&st.frames);
            let diff = g.sub(pred, x)?;
            let a = g.abs(diff);
            let loss = g.mean(a)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(MistError::NonFinite {
                    epoch,
                    step: step + 1,
                    what: "pretraining L1".into(),
                });
            }
            g.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = c.ids().iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();
            grads.extend(d.ids().iter().map(|&id| g.grad(id).unwrap().to_vec()));
            let mut params = content.params_mut();
            params.extend(decoder.params_mut());
            opt.step(params, &grads)?;
            total += value;
            steps += 1;
        }
        epoch_losses.push(total / steps as f64);
    }

    content.freeze();
    let heldout_l1 = if heldout.is_empty() {
        f64::NAN
    } else {
        pretrain_l1(&content, &decoder, heldout)?
    };
    let mut checkpoint = Checkpoint::new(config_echo);
    checkpoint.add_module(&content);
    checkpoint.add_module(&decoder);
    checkpoint.add_rng("init", RngState::capture(&init));
    checkpoint.add_rng("data_order", RngState::capture(&order_rng));
    Ok(PretrainOutcome {
        content,
        decoder,
        epoch_losses,
        heldout_l1,
        converged: heldout_l1 < cfg.pretrain_threshold,
        checkpoint,
    })
}

// ---------------------------------------------------------------------------
// Stage 2

/// Random draws for one step, taken before any computation.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub indices: Vec<usize>,
    /// Sampled content position per utterance.
    pub positions: Vec<usize>,
    pub perm: Vec<usize>,
}

/// Graph nodes of one stage-2 forward pass.
pub struct StepGraph {
    pub graph: Graph,
    pub style_ids: StyleEncoderIds,
    pub decoder_ids: DecoderIds,
    pub stat_ids: StatisticsIds,
    pub recon: NodeId,
    pub dv: DvNodes,
    pub total: NodeId,
    /// `b x d_s`
    pub z: NodeId,
    pub coefficients: NodeId,
}

/// Stage-2 state: the three trained networks, their optimizers and the
/// random streams.
#[derive(Clone)]
pub struct MistTrainer<'a> {
    pub cfg: TrainConfig,
    data: &'a [Utterance],
    content: &'a ContentEncoder,
    pub style: StyleEncoder,
    pub decoder: Decoder,
    pub statistics: StatisticsNetwork,
    synth_opt: Optimizer,
    stat_opt: Optimizer,
    order_rng: Rng,
    sample_rng: Rng,
    perm_rng: Rng,
    init_rng: Rng,
    ema: Option<EmaDenominator>,
    epoch: usize,
    step: usize,
    /// When false the statistics network is neither evaluated in the loss
    /// nor updated; random draws are unchanged.
    statistics_enabled: bool,
    pub metrics: Vec<StepMetrics>,
}

impl<'a> MistTrainer<'a> {
    /// Fresh style encoder, decoder and statistics network from
    /// `cfg.train_seed`, in that order.
    pub fn new(
        data: &'a [Utterance],
        content: &'a ContentEncoder,
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        model_cfg.validate()?;
        cfg.validate()?;
        if !content.is_frozen() {
            return Err(MistError::ContentEncoderNotFrozen);
        }
        if content.output_dim() != model_cfg.content_dim || content.vocab() != model_cfg.vocab {
            return Err(MistError::Config(
                "content encoder does not match the model configuration".into(),
            ));
        }
        if data.is_empty() {
            return Err(MistError::Empty("train_mist"));
        }
        let mut init_rng = rng::stream(cfg.train_seed, "init");
        let style = StyleEncoder::new(model_cfg, &mut init_rng);
        let decoder = Decoder::new(model_cfg, &mut init_rng);
        let statistics = StatisticsNetwork::for_model(model_cfg, &mut init_rng);
        Ok(MistTrainer {
            cfg: cfg.clone(),
            data,
            content,
            style,
            decoder,
            statistics,
            synth_opt: Optimizer::new(cfg.optimizer, cfg.lr),
            stat_opt: Optimizer::new(cfg.optimizer, cfg.stat_lr),
            order_rng: rng::stream(cfg.train_seed, "data_order"),
            sample_rng: rng::stream(cfg.train_seed, "content_sample"),
            perm_rng: rng::stream(cfg.train_seed, "permutation"),
            init_rng,
            ema: cfg.ema_denominator.then(EmaDenominator::default),
            epoch: 0,
            step: 0,
            statistics_enabled: true,
            metrics: Vec::new(),
        })
    }

    pub fn disable_statistics(&mut self) {
        self.statistics_enabled = false;
    }

    pub fn content(&self) -> &ContentEncoder {
        self.content
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Draws positions and the permutation for the given utterances.
    pub fn prepare(&mut self, indices: &[usize]) -> Result<PreparedBatch> {
        let positions = indices
            .iter()
            .map(|&i| mine::sample_content_index(self.data[i].c.len(), &mut self.sample_rng))
            .collect::<Result<Vec<_>>>()?;
        let perm = rng::permutation(&mut self.perm_rng, indices.len());
        Ok(PreparedBatch {
            indices: indices.to_vec(),
            positions,
            perm,
        })
    }

    /// Records the full stage-2 forward pass for `batch`.
    pub fn forward(&self, batch: &PreparedBatch) -> Result<StepGraph> {
        let utts: Vec<&Utterance> = batch.indices.iter().map(|&i| &self.data[i]).collect();
        let st = stack(&utts)?;
        let mut g = Graph::new();
        let c_ids: ContentEncoderIds = self.content.bind(&mut g);
        let style_ids = self.style.bind(&mut g, true);
        let decoder_ids = self.decoder.bind(&mut g, true);
        let stat_ids = self.statistics.bind(&mut g, true);

        let y_all = c_ids.forward(&mut g, self.content, &st.tokens)?;
        let x = g.constant(&st.frames);
        let style = style_ids.forward(&mut g, x, &st.offsets)?;

        let rows: Vec<usize> = batch
            .positions
            .iter()
            .zip(&st.offsets)
            .map(|(p, o)| o + p)
            .collect();
        let y_sel = g.gather(y_all, &rows)?;
        let dv = mine::dv_bound(&mut g, &stat_ids, y_sel, style.z, &batch.perm)?;

        let z_rows = g.gather(style.z, &models::row_owner(&st.offsets))?;
        let pred = decoder_ids.forward(&mut g, y_all, Some(z_rows))?;
        let diff = g.sub(pred, x)?;
        let a = g.abs(diff);
        let recon = g.mean(a)?;

        let total = if self.statistics_enabled {
            let term = if self.cfg.clip_mi { dv.clipped } else { dv.raw };
            let weighted = g.scale(term, self.cfg.lambda);
            g.add(recon, weighted)?
        } else {
            recon
        };
        Ok(StepGraph {
            graph: g,
            style_ids,
            decoder_ids,
            stat_ids,
            recon,
            dv,
            total,
            z: style.z,
            coefficients: style.coefficients,
        })
    }

    /// DV bound of the current statistics network on `batch`.
    pub fn evaluate_mi(&self, batch: &PreparedBatch) -> Result<MineEstimate> {
        let sg = self.forward(batch)?;
        Ok(MineEstimate {
            raw: sg.graph.value(sg.dv.raw).item(),
            clipped: sg.graph.value(sg.dv.clipped).item(),
        })
    }

    /// Gradients of the synthesis loss w.r.t. style encoder then decoder
    /// parameters, and of the statistics objective w.r.t. `T`.
    pub fn gradients(&mut self, sg: &mut StepGraph) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let g = &mut sg.graph;
        g.backward(sg.total)?;
        let mut synth: Vec<Vec<f64>> = sg
            .style_ids
            .ids()
            .iter()
            .map(|&id| g.grad(id).unwrap().to_vec())
            .collect();
        synth.extend(sg.decoder_ids.ids().iter().map(|&id| g.grad(id).unwrap().to_vec()));

        let objective = mine::statistics_objective(g, &sg.dv, self.ema.as_mut())?;
        g.backward(objective)?;
        let stat = sg
            .stat_ids
            .ids()
            .iter()
            .map(|&id| g.grad(id).unwrap().to_vec())
            .collect();
        Ok((synth, stat))
    }

    /// One alternating update on `batch`.
    pub fn apply(&mut self, batch: &PreparedBatch) -> Result<StepMetrics> {
        self.step += 1;
        let mut sg = self.forward(batch)?;
        let g = &sg.graph;
        let metrics = StepMetrics {
            epoch: self.epoch,
            step: self.step,
            recon_loss: g.value(sg.recon).item(),
            mi_raw: g.value(sg.dv.raw).item(),
            mi_clipped: g.value(sg.dv.clipped).item(),
            total_loss: g.value(sg.total).item(),
        };
        if !metrics.total_loss.is_finite() || !metrics.mi_raw.is_finite() {
            return Err(MistError::NonFinite {
                epoch: self.epoch,
                step: self.step,
                what: format!(
                    "recon {} mi_raw {} total {}",
                    metrics.recon_loss, metrics.mi_raw, metrics.total_loss
                ),
            });
        }
        let (synth, stat) = self.gradients(&mut sg)?;
        let mut params = self.style.params_mut();
        params.extend(self.decoder.params_mut());
        self.synth_opt.step(params, &synth)?;
        if self.statistics_enabled {
            self.stat_opt.ascend(self.statistics.params_mut(), &stat)?;
        }
        self.metrics.push(metrics);
        Ok(metrics)
    }

    /// One pass over the training data in a freshly shuffled order.
    pub fn run_epoch(&mut self) -> Result<()> {
        self.epoch += 1;
        let order = shuffled(&mut self.order_rng, self.data.len());
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch = self.prepare(chunk)?;
            self.apply(&batch)?;
        }
        Ok(())
    }

    /// Runs the remaining epochs of the budget, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&MistTrainer<'a>) -> Result<()>) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn model(&self) -> SynthesisModel {
        SynthesisModel {
            content: self.content.clone(),
            style: self.style.clone(),
            decoder: self.decoder.clone(),
            statistics: self.statistics.clone(),
        }
    }

    pub fn checkpoint(&self, config_echo: serde_json::Value) -> Checkpoint {
        let mut ck = self.model().checkpoint(config_echo);
        ck.add_rng("init", RngState::capture(&self.init_rng));
        ck.add_rng("data_order", RngState::capture(&self.order_rng));
        ck.add_rng("content_sample", RngState::capture(&self.sample_rng));
        ck.add_rng("permutation", RngState::capture(&self.perm_rng));
        ck
    }
}

/// The trained synthesis model (with the statistics network it was trained
/// against).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisModel {
    pub content: ContentEncoder,
    pub style: StyleEncoder,
    pub decoder: Decoder,
    pub statistics: StatisticsNetwork,
}

impl SynthesisModel {
    /// Frames for content `c` in the style of `reference`.
    pub fn synthesize(&self, c: &[usize], reference: &Tensor) -> Result<Tensor> {
        let y = self.content.encode_content(c)?;
        let (z, _) = self.style.encode_style(reference)?;
        self.decoder.decode(&y, &z)
    }

    pub fn checkpoint(&self, config_echo: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(config_echo);
        ck.add_module(&self.content);
        ck.add_module(&self.style);
        ck.add_module(&self.decoder);
        ck.add_module(&self.statistics);
        ck
    }

    /// Rebuilds a model of shape `cfg` from a stage-2 checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::seeded(0);
        let mut content = ContentEncoder::new(cfg, &mut r);
        let mut style = StyleEncoder::new(cfg, &mut r);
        let mut decoder = Decoder::new(cfg, &mut r);
        let mut statistics = StatisticsNetwork::for_model(cfg, &mut r);
        ck.load_into(&mut content)?;
        ck.load_into(&mut style)?;
        ck.load_into(&mut decoder)?;
        ck.load_into(&mut statistics)?;
        content.freeze();
        Ok(SynthesisModel {
            content,
            style,
            decoder,
            statistics,
        })
    }
}

/// Loads the frozen content encoder from a pretraining checkpoint.
pub fn content_from_checkpoint(ck: &Checkpoint, cfg: &ModelConfig) -> Result<ContentEncoder> {
    let mut content = ContentEncoder::new(cfg, &mut rng::seeded(0));
    ck.load_into(&mut content)?;
    content.freeze();
    Ok(content)
}

pub struct TrainOutcome {
    pub model: SynthesisModel,
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: Checkpoint,
}

/// Stage 2 over the full epoch budget.
pub fn train_mist(
    data: &[Utterance],
    content: &ContentEncoder,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    config_echo: serde_json::Value,
    on_epoch: impl FnMut(&MistTrainer<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = MistTrainer::new(data, content, model_cfg, cfg)?;
    trainer.run(on_epoch)?;
    Ok(TrainOutcome {
        model: trainer.model(),
        checkpoint: trainer.checkpoint(config_echo),
        metrics: std::mem::take(&mut trainer.metrics),
    })
}
