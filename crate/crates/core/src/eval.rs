//! Leakage measurement, post-hoc MI probing and the λ / clipping studies.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{self, Dataset, EvalPair, Utterance, World};
use crate::error::{MistError, Result};
use crate::io;
use crate::mine::{self, MineBatch};
use crate::models::{ContentEncoder, ModelConfig, StatisticsNetwork};
use crate::optim::Optimizer;
use crate::rng;
use crate::train::{self, SynthesisModel, TrainConfig};

/// Anything that turns a content sequence and a reference into frames.
pub trait Synthesizer {
    fn synthesize(&self, pair: &EvalPair) -> Result<Tensor>;
}

impl Synthesizer for SynthesisModel {
    fn synthesize(&self, pair: &EvalPair) -> Result<Tensor> {
        SynthesisModel::synthesize(self, &pair.c, &pair.x_ref)
    }
}

/// Upper-bound fixture: the clean render of `c` in the reference's style.
pub struct CheatingSynthesizer<'a>(pub &'a World);

impl Synthesizer for CheatingSynthesizer<'_> {
    fn synthesize(&self, pair: &EvalPair) -> Result<Tensor> {
        self.0.render_clean(&pair.c, pair.s_ref)
    }
}

/// Degenerate fixture: all-zero frames.
pub struct ZeroSynthesizer {
    pub frame_dim: usize,
}

impl Synthesizer for ZeroSynthesizer {
    fn synthesize(&self, pair: &EvalPair) -> Result<Tensor> {
        Ok(Tensor::zeros(vec![pair.c.len(), self.frame_dim]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub per_pair_ter: Vec<f64>,
    pub mean_ter: f64,
    /// Fraction of outputs whose recognized style equals the reference's.
    pub style_match_rate: f64,
    pub config: serde_json::Value,
}

impl LeakageReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("pair,ter\n");
        for (i, t) in self.per_pair_ter.iter().enumerate() {
            out.push_str(&format!("{i},{t}\n"));
        }
        out
    }
}

pub fn evaluate_leakage(
    model: &dyn Synthesizer,
    world: &World,
    pairs: &[EvalPair],
    config: serde_json::Value,
) -> Result<LeakageReport> {
    if pairs.is_empty() {
        return Err(MistError::Empty("evaluate_leakage"));
    }
    let mut per_pair_ter = Vec::with_capacity(pairs.len());
    let mut matches = 0usize;
    for pair in pairs {
        let frames = model.synthesize(pair)?;
        if frames.dims2() != (pair.c.len(), world.frame_dim()) {
            return Err(MistError::Shape {
                op: "evaluate_leakage",
                lhs: frames.shape().to_vec(),
                rhs: vec![pair.c.len(), world.frame_dim()],
            });
        }
        let rec = world.oracle_recognize(&frames);
        per_pair_ter.push(data::token_error_rate(&rec.tokens, &pair.c)?);
        matches += usize::from(rec.style == pair.s_ref);
    }
    let n = pairs.len() as f64;
    Ok(LeakageReport {
        mean_ter: per_pair_ter.iter().sum::<f64>() / n,
        per_pair_ter,
        style_match_rate: matches as f64 / n,
        config,
    })
}

/// What plays the role of `z` in a probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    /// The frozen model's style vectors.
    Model,
    /// Standard normal noise, redrawn every batch, independent of `y`.
    IndependentNoise,
    /// The sampled content vector itself.
    Copy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            hidden: 64,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiProbeCurve {
    pub source: ProbeSource,
    /// Mean training-batch estimate per probe epoch.
    pub epochs: Vec<f64>,
}

impl MiProbeCurve {
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,mi\n");
        for (i, v) in self.epochs.iter().enumerate() {
            out.push_str(&format!("{},{v}\n", i + 1));
        }
        out
    }
}

/// Trains a fresh statistics network (output layer zeroed) against frozen
/// representations and records the mean DV estimate of every epoch.
///
/// Streams of `cfg.seed`: `probe_init`, `data_order`, `content_sample`,
/// `permutation` and `noise`.
pub fn mi_probe(
    content: &ContentEncoder,
    style: Option<&crate::models::StyleEncoder>,
    utts: &[Utterance],
    cfg: &ProbeConfig,
    source: ProbeSource,
) -> Result<MiProbeCurve> {
    if utts.is_empty() {
        return Err(MistError::Empty("mi_probe"));
    }
    let ys: Vec<Tensor> = utts
        .iter()
        .map(|u| content.encode_content(&u.c))
        .collect::<Result<_>>()?;
    let d_y = content.output_dim();
    let zs: Vec<Vec<f64>> = match source {
        ProbeSource::Model => {
            let style = style.ok_or_else(|| {
                MistError::invalid("mi_probe", "model source needs a style encoder")
            })?;
            utts.iter()
                .map(|u| style.encode_style(&u.x).map(|(z, _)| z))
                .collect::<Result<_>>()?
        }
        _ => Vec::new(),
    };
    let d_z = match source {
        ProbeSource::Model => zs[0].len(),
        ProbeSource::IndependentNoise => style.map_or(d_y, |s| s.bank.dim()),
        ProbeSource::Copy => d_y,
    };

    let mut init = rng::stream(cfg.seed, "probe_init");
    let mut order_rng = rng::stream(cfg.seed, "data_order");
    let mut sample_rng = rng::stream(cfg.seed, "content_sample");
    let mut perm_rng = rng::stream(cfg.seed, "permutation");
    let mut noise_rng = rng::stream(cfg.seed, "noise");
    let mut t = StatisticsNetwork::new(&mut init, d_y, d_z, cfg.hidden);
    // T starts at the constant zero, so the curve starts at exactly 0 nats
    // instead of at the (negative) bound of a random network.
    t.layer2.weight.values_mut().fill(0.0);
    let mut opt = Optimizer::adam(cfg.lr);

    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let order = rng::permutation(&mut order_rng, utts.len());
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut yv = Vec::with_capacity(chunk.len() * d_y);
            let mut zv = Vec::with_capacity(chunk.len() * d_z);
            for &i in chunk {
                let v = mine::sample_content_vector(&ys[i], &mut sample_rng)?;
                match source {
                    ProbeSource::Model => zv.extend_from_slice(&zs[i]),
                    ProbeSource::IndependentNoise => {
                        zv.extend((0..d_z).map(|_| rng::normal(&mut noise_rng)))
                    }
                    ProbeSource::Copy => zv.extend_from_slice(&v),
                }
                yv.extend(v);
            }
            let b = chunk.len();
            let perm = rng::permutation(&mut perm_rng, b);
            let batch = MineBatch::new(
                Tensor::new(vec![b, d_y], yv)?,
                Tensor::new(vec![b, d_z], zv)?,
                perm,
            )?;
            sum += mine::train_statistics_step(&mut t, &mut opt, &batch, None)?.raw;
            batches += 1;
        }
        curve.push(sum / batches as f64);
    }
    Ok(MiProbeCurve {
        source,
        epochs: curve,
    })
}

/// Everything one experiment needs: data, model shape and training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment<'a> {
    pub dataset: &'a Dataset,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Experiment<'_> {
    pub fn train_and_evaluate(
        &self,
        content: &ContentEncoder,
        train_cfg: &TrainConfig,
    ) -> Result<(SynthesisModel, LeakageReport, Vec<train::StepMetrics>)> {
        let echo = serde_json::json!({ "model": self.model, "train": train_cfg });
        let out = train::train_mist(
            &self.dataset.splits.train,
            content,
            &self.model,
            train_cfg,
            echo.clone(),
            |_| Ok(()),
        )?;
        let report = evaluate_leakage(
            &out.model,
            &self.dataset.world,
            &self.dataset.splits.eval_pairs,
            echo,
        )?;
        Ok((out.model, report, out.metrics))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_ter: f64,
    pub style_match_rate: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let mut out = String::from("lambda,mean_ter,style_match_rate\n");
    for r in &sorted {
        out.push_str(&format!("{},{},{}\n", r.lambda, r.mean_ter, r.style_match_rate));
    }
    out
}

/// One stage-2 run per λ, all from the same pretrained encoder and seeds.
pub fn lambda_sweep(
    exp: &Experiment<'_>,
    content: &ContentEncoder,
    lambdas: &[f64],
) -> Result<Vec<SweepRow>> {
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0)) {
        return Err(MistError::Config(format!("sweep λ must be positive, got {l}")));
    }
    let mut rows: Vec<SweepRow> = lambdas
        .iter()
        .map(|&lambda| {
            let cfg = TrainConfig {
                lambda,
                ..exp.train.clone()
            };
            let (_, report, _) = exp.train_and_evaluate(content, &cfg)?;
            Ok(SweepRow {
                lambda,
                mean_ter: report.mean_ter,
                style_match_rate: report.style_match_rate,
            })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipAblation {
    pub clipped: LeakageReport,
    pub unclipped: LeakageReport,
    pub clipped_finite: bool,
    pub unclipped_finite: bool,
}

/// Two stage-2 runs differing only in `clip_mi`, sharing `content`.
pub fn clip_ablation(exp: &Experiment<'_>, content: &ContentEncoder) -> Result<ClipAblation> {
    let arm = |clip_mi| {
        let cfg = TrainConfig {
            clip_mi,
            ..exp.train.clone()
        };
        let (_, report, metrics) = exp.train_and_evaluate(content, &cfg)?;
        let finite = metrics
            .iter()
            .all(|m| m.total_loss.is_finite() && m.mi_raw.is_finite());
        Ok::<_, MistError>((report, finite))
    };
    let (clipped, clipped_finite) = arm(true)?;
    let (unclipped, unclipped_finite) = arm(false)?;
    Ok(ClipAblation {
        clipped,
        unclipped,
        clipped_finite,
        unclipped_finite,
    })
}

/// Short stable hash of a configuration value.
pub fn config_hash(config: &serde_json::Value) -> String {
    format!("{:016x}", rng::fnv1a(&config.to_string()))
}

/// Writes `<stem>_<hash>_seed<seed>.json` and `.csv` into `dir`.
pub fn write_report<T: Serialize>(
    dir: &Path,
    stem: &str,
    config: &serde_json::Value,
    seed: u64,
    report: &T,
    csv: &str,
) -> Result<(PathBuf, PathBuf)> {
    let base = format!("{stem}_{}_seed{seed}", config_hash(config));
    let json = dir.join(format!("{base}.json"));
    let table = dir.join(format!("{base}.csv"));
    io::write_atomic(&json, &io::to_json_pretty(report)?)?;
    io::write_atomic(&table, csv)?;
    Ok((json, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;

    fn dataset() -> Dataset {
        Dataset::generate(&DatasetConfig {
            pretrain_size: 8,
            pretrain_heldout_size: 2,
            train_size: 8,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn cheating_fixture_is_perfect() {
        let ds = dataset();
        let r = evaluate_leakage(
            &CheatingSynthesizer(&ds.world),
            &ds.world,
            &ds.splits.eval_pairs,
            serde_json::Value::Null,
        )
        .unwrap();
        assert_eq!(r.per_pair_ter.len(), 100);
        assert_eq!(r.mean_ter, 0.0);
        assert_eq!(r.style_match_rate, 1.0);
    }

    #[test]
    fn zero_fixture_is_deterministic_and_bounded() {
        let ds = dataset();
        let z = ZeroSynthesizer { frame_dim: 8 };
        let a = evaluate_leakage(&z, &ds.world, &ds.splits.eval_pairs, serde_json::Value::Null).unwrap();
        let b = evaluate_leakage(&z, &ds.world, &ds.splits.eval_pairs, serde_json::Value::Null).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.mean_ter));
        // Every zero frame decodes to one token, so TER is the mismatch rate
        // against that single token.
        let tok = ds.world.oracle_recognize(&Tensor::zeros(vec![1, 8])).tokens[0];
        let n: usize = ds.splits.eval_pairs.iter().map(|p| p.c.len()).sum();
        assert!(a.mean_ter > 0.5, "{} (token {tok}, {n} positions)", a.mean_ter);
    }

    #[test]
    fn wrong_frame_dim_is_rejected() {
        let ds = dataset();
        let z = ZeroSynthesizer { frame_dim: 3 };
        assert!(evaluate_leakage(&z, &ds.world, &ds.splits.eval_pairs, serde_json::Value::Null).is_err());
    }

    #[test]
    fn sweep_csv_sorted() {
        let row = |lambda| SweepRow {
            lambda,
            mean_ter: 0.1,
            style_match_rate: 1.0,
        };
        let csv = sweep_csv(&[row(0.5), row(0.05), row(0.2)]);
        let ls: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(ls, ["0.05", "0.2", "0.5"]);
    }

    #[test]
    fn report_names_embed_hash_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = serde_json::json!({"a": 1});
        let (j, c) = write_report(dir.path(), "leakage", &cfg, 43, &cfg, "x\n").unwrap();
        let name = j.file_name().unwrap().to_string_lossy().into_owned();
        assert!(name.starts_with("leakage_") && name.ends_with("_seed43.json"), "{name}");
        assert!(name.contains(&config_hash(&cfg)));
        assert!(c.exists());
    }
}
