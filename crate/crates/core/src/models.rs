//! The content encoder, style encoder with its token bank, decoders and the
//! statistics network.
//!
//! Sequences are batched by stacking frames: a batch of utterances with
//! lengths `L_1..L_b` becomes one `(ΣL) x d` matrix plus an offsets vector
//! `[0, L_1, L_1+L_2, ..]`. Every per-position network acts row-wise on the
//! stacked matrix; only the style encoder's pooling looks across rows.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Pooling, Tensor};
use crate::error::{MistError, Result};
use crate::nn::{self, Dense, DenseIds, Module};
use crate::rng::Rng;

/// Standard deviation for codebooks and style tokens at initialization.
pub const EMBED_INIT_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Content vocabulary size V.
    pub vocab: usize,
    pub embed_dim: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    pub frame_dim: usize,
    /// Hidden width of the style encoder and decoders.
    pub hidden_dim: usize,
    pub stat_hidden: usize,
    /// Number of style tokens K.
    pub tokens: usize,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 16,
            embed_dim: 16,
            content_dim: 16,
            style_dim: 16,
            frame_dim: 8,
            hidden_dim: 32,
            stat_hidden: 64,
            tokens: 10,
            pooling: Pooling::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab", self.vocab),
            ("embed_dim", self.embed_dim),
            ("content_dim", self.content_dim),
            ("style_dim", self.style_dim),
            ("frame_dim", self.frame_dim),
            ("hidden_dim", self.hidden_dim),
            ("stat_hidden", self.stat_hidden),
            ("tokens", self.tokens),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(MistError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Row offsets for stacked sequences of the given lengths.
pub fn offsets(lengths: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut out = vec![0];
    for l in lengths {
        out.push(out.last().unwrap() + l);
    }
    out
}

/// Maps every stacked row to the index of its sequence.
pub fn row_owner(offsets: &[usize]) -> Vec<usize> {
    let mut owner = Vec::with_capacity(*offsets.last().unwrap_or(&0));
    for (s, w) in offsets.windows(2).enumerate() {
        owner.extend(std::iter::repeat_n(s, w[1] - w[0]));
    }
    owner
}

// ---------------------------------------------------------------------------
// Content encoder

/// Token codebook followed by two tanh layers, applied per position.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentEncoder {
    pub codebook: Tensor,
    pub layer1: Dense,
    pub layer2: Dense,
    frozen: bool,
}

#[derive(Clone, Debug)]
pub struct ContentEncoderIds {
    codebook: NodeId,
    layer1: DenseIds,
    layer2: DenseIds,
}

impl ContentEncoder {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let codebook = nn::normal_tensor(rng, vec![cfg.vocab, cfg.embed_dim], EMBED_INIT_STD);
        let layer1 = Dense::glorot(rng, cfg.embed_dim, cfg.content_dim);
        let layer2 = Dense::glorot(rng, cfg.content_dim, cfg.content_dim);
        ContentEncoder {
            codebook,
            layer1,
            layer2,
            frozen: false,
        }
    }

    pub fn vocab(&self) -> usize {
        self.codebook.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layer2.fan_out()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Binds parameters; a frozen encoder is always bound as constants.
    pub fn bind(&self, g: &mut Graph) -> ContentEncoderIds {
        let trainable = !self.frozen;
        ContentEncoderIds {
            codebook: nn::bind(g, &self.codebook, trainable),
            layer1: self.layer1.bind(g, trainable),
            layer2: self.layer2.bind(g, trainable),
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let vocab = self.vocab();
        match tokens.iter().find(|&&t| t >= vocab) {
            Some(&token) => Err(MistError::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }

    /// `L x d_c` content vectors for one token sequence, outside any graph.
    pub fn encode_content(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(MistError::Empty("encode_content"));
        }
        let mut g = Graph::new();
        let ids = self.bind(&mut g);
        let y = ids.forward(&mut g, self, tokens)?;
        Ok(g.value(y).clone())
    }
}

impl ContentEncoderIds {
    /// Stacked tokens to stacked content vectors.
    pub fn forward(&self, g: &mut Graph, enc: &ContentEncoder, tokens: &[usize]) -> Result<NodeId> {
        enc.check_tokens(tokens)?;
        let e = g.gather(self.codebook, tokens)?;
        let h = self.layer1.forward(g, e)?;
        let h = g.tanh(h);
        let y = self.layer2.forward(g, h)?;
        Ok(g.tanh(y))
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.codebook];
        self.layer1.push_ids(&mut out);
        self.layer2.push_ids(&mut out);
        out
    }
}

impl Module for ContentEncoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("content_encoder.codebook".to_string(), &self.codebook)];
        self.layer1.named("content_encoder.layer1", &mut out);
        self.layer2.named("content_encoder.layer2", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.codebook];
        self.layer1.push_mut(&mut out);
        self.layer2.push_mut(&mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Style encoder

/// K trainable style vectors; style vectors are convex combinations of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTokenBank {
    pub tokens: Tensor,
}

impl StyleTokenBank {
    pub fn new(rng: &mut Rng, count: usize, dim: usize) -> Self {
        StyleTokenBank {
            tokens: nn::normal_tensor(rng, vec![count, dim], EMBED_INIT_STD),
        }
    }

    pub fn count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Per-frame tanh layer, temporal pooling, coefficient logits, softmax, and a
/// coefficient-weighted sum of style tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEncoder {
    pub frame_layer: Dense,
    pub logit_layer: Dense,
    pub bank: StyleTokenBank,
    pub pooling: Pooling,
}

#[derive(Clone, Debug)]
pub struct StyleEncoderIds {
    frame_layer: DenseIds,
    logit_layer: DenseIds,
    tokens: NodeId,
    pooling: Pooling,
}

/// Style vectors and their token coefficients for a batch.
#[derive(Clone, Copy, Debug)]
pub struct StyleOutput {
    /// `b x d_s`
    pub z: NodeId,
    /// `b x K`, rows sum to one.
    pub coefficients: NodeId,
}

impl StyleEncoder {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let frame_layer = Dense::glorot(rng, cfg.frame_dim, cfg.hidden_dim);
        let logit_layer = Dense::glorot(rng, cfg.hidden_dim, cfg.tokens);
        let bank = StyleTokenBank::new(rng, cfg.tokens, cfg.style_dim);
        StyleEncoder {
            frame_layer,
            logit_layer,
            bank,
            pooling: cfg.pooling,
        }
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_layer.fan_in()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> StyleEncoderIds {
        StyleEncoderIds {
            frame_layer: self.frame_layer.bind(g, trainable),
            logit_layer: self.logit_layer.bind(g, trainable),
            tokens: nn::bind(g, &self.bank.tokens, trainable),
            pooling: self.pooling,
        }
    }

    /// Style vector `z` and coefficients `w` for one `L x d_x` frame matrix.
    pub fn encode_style(&self, frames: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let (rows, _) = frames.dims2();
        if rows == 0 || frames.numel() == 0 {
            return Err(MistError::Empty("encode_style"));
        }
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let x = g.constant(frames);
        let out = ids.forward(&mut g, x, &[0, rows])?;
        Ok((
            g.value(out.z).values().to_vec(),
            g.value(out.coefficients).values().to_vec(),
        ))
    }
}

impl StyleEncoderIds {
    pub fn forward(&self, g: &mut Graph, frames: NodeId, offsets: &[usize]) -> Result<StyleOutput> {
        let h = self.frame_layer.forward(g, frames)?;
        let h = g.tanh(h);
        let pooled = g.segment_pool(h, offsets, self.pooling)?;
        let logits = self.logit_layer.forward(g, pooled)?;
        let coefficients = g.softmax(logits)?;
        let z = g.matmul(coefficients, self.tokens)?;
        Ok(StyleOutput { z, coefficients })
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.frame_layer.push_ids(&mut out);
        self.logit_layer.push_ids(&mut out);
        out.push(self.tokens);
        out
    }
}

impl Module for StyleEncoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.frame_layer.named("style_encoder.frame_layer", &mut out);
        self.logit_layer.named("style_encoder.logit_layer", &mut out);
        out.push(("style_encoder.tokens".to_string(), &self.bank.tokens));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.frame_layer.push_mut(&mut out);
        self.logit_layer.push_mut(&mut out);
        out.push(&mut self.bank.tokens);
        out
    }
}

// ---------------------------------------------------------------------------
// Decoders

/// Two-layer per-position MLP: tanh hidden layer, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub layer1: Dense,
    pub layer2: Dense,
    /// Width of the style input; zero for the content-only pretraining decoder.
    style_dim: usize,
    prefix: &'static str,
}

#[derive(Clone, Debug)]
pub struct DecoderIds {
    layer1: DenseIds,
    layer2: DenseIds,
    style_dim: usize,
}

impl Decoder {
    /// Stage-2 decoder on `concat(y_t, z)`.
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        Decoder {
            layer1: Dense::glorot(rng, cfg.content_dim + cfg.style_dim, cfg.hidden_dim),
            layer2: Dense::glorot(rng, cfg.hidden_dim, cfg.frame_dim),
            style_dim: cfg.style_dim,
            prefix: "decoder",
        }
    }

    /// Pretraining decoder on `y_t` alone.
    pub fn pretraining(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        Decoder {
            layer1: Dense::glorot(rng, cfg.content_dim, cfg.hidden_dim),
            layer2: Dense::glorot(rng, cfg.hidden_dim, cfg.frame_dim),
            style_dim: 0,
            prefix: "pretrain_decoder",
        }
    }

    pub fn style_dim(&self) -> usize {
        self.style_dim
    }

    pub fn content_dim(&self) -> usize {
        self.layer1.fan_in() - self.style_dim
    }

    pub fn frame_dim(&self) -> usize {
        self.layer2.fan_out()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DecoderIds {
        DecoderIds {
            layer1: self.layer1.bind(g, trainable),
            layer2: self.layer2.bind(g, trainable),
            style_dim: self.style_dim,
        }
    }

    /// Frames for one `L x d_c` content matrix and one style vector.
    pub fn decode(&self, y: &Tensor, z: &[f64]) -> Result<Tensor> {
        let (rows, cols) = y.dims2();
        if cols != self.content_dim() || z.len() != self.style_dim {
            return Err(MistError::Shape {
                op: "decode",
                lhs: vec![rows, cols, z.len()],
                rhs: vec![rows, self.content_dim(), self.style_dim],
            });
        }
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let yn = g.constant(&Tensor::new(vec![rows, cols], y.values().to_vec())?);
        let zn = if self.style_dim == 0 {
            None
        } else {
            let zt = Tensor::new(vec![1, z.len()], z.to_vec())?;
            let zc = g.constant(&zt);
            Some(g.gather(zc, &vec![0; rows])?)
        };
        let out = ids.forward(&mut g, yn, zn)?;
        Ok(g.value(out).clone())
    }
}

impl DecoderIds {
    /// `y: N x d_c`; `z_rows: N x d_s` (already expanded per row) or `None`
    /// for the pretraining decoder.
    pub fn forward(&self, g: &mut Graph, y: NodeId, z_rows: Option<NodeId>) -> Result<NodeId> {
        let input = match (z_rows, self.style_dim) {
            (None, 0) => y,
            (Some(z), d) if d > 0 => g.concat(&[y, z])?,
            (z, d) => {
                return Err(MistError::invalid(
                    "decode",
                    format!("decoder expects style width {d}, style input present: {}", z.is_some()),
                ))
            }
        };
        let h = self.layer1.forward(g, input)?;
        let h = g.tanh(h);
        self.layer2.forward(g, h)
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.layer1.push_ids(&mut out);
        self.layer2.push_ids(&mut out);
        out
    }
}

impl Module for Decoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.layer1.named(&format!("{}.layer1", self.prefix), &mut out);
        self.layer2.named(&format!("{}.layer2", self.prefix), &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.layer1.push_mut(&mut out);
        self.layer2.push_mut(&mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Statistics network

/// `T(y, z)`: relu MLP on `concat(y, z)` with a scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct StatisticsNetwork {
    pub layer1: Dense,
    pub layer2: Dense,
    y_dim: usize,
}

#[derive(Clone, Debug)]
pub struct StatisticsIds {
    layer1: DenseIds,
    layer2: DenseIds,
}

impl StatisticsNetwork {
    pub fn new(rng: &mut Rng, y_dim: usize, z_dim: usize, hidden: usize) -> Self {
        StatisticsNetwork {
            layer1: Dense::glorot(rng, y_dim + z_dim, hidden),
            layer2: Dense::glorot(rng, hidden, 1),
            y_dim,
        }
    }

    pub fn for_model(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        StatisticsNetwork::new(rng, cfg.content_dim, cfg.style_dim, cfg.stat_hidden)
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn z_dim(&self) -> usize {
        self.layer1.fan_in() - self.y_dim
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> StatisticsIds {
        StatisticsIds {
            layer1: self.layer1.bind(g, trainable),
            layer2: self.layer2.bind(g, trainable),
        }
    }

    /// `T(y, z)` for a single pair.
    pub fn statistic(&self, y: &[f64], z: &[f64]) -> Result<f64> {
        if y.len() != self.y_dim || z.len() != self.z_dim() {
            return Err(MistError::Shape {
                op: "statistic",
                lhs: vec![y.len(), z.len()],
                rhs: vec![self.y_dim, self.z_dim()],
            });
        }
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let yn = g.constant(&Tensor::new(vec![1, y.len()], y.to_vec())?);
        let zn = g.constant(&Tensor::new(vec![1, z.len()], z.to_vec())?);
        let t = ids.forward(&mut g, yn, zn)?;
        Ok(g.value(t).item())
    }
}

impl StatisticsIds {
    /// `y: b x d_y`, `z: b x d_z` → `b x 1`.
    pub fn forward(&self, g: &mut Graph, y: NodeId, z: NodeId) -> Result<NodeId> {
        let input = g.concat(&[y, z])?;
        let h = self.layer1.forward(g, input)?;
        let h = g.relu(h);
        self.layer2.forward(g, h)
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.layer1.push_ids(&mut out);
        self.layer2.push_ids(&mut out);
        out
    }
}

impl Module for StatisticsNetwork {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.layer1.named("statistics.layer1", &mut out);
        self.layer2.named("statistics.layer2", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.layer1.push_mut(&mut out);
        self.layer2.push_mut(&mut out);
        out
    }
}
