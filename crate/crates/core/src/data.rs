//! Synthetic style/content task with an exact brute-force recognizer.
//!
//! Content is a token sequence; a style is a global affine map (gain and
//! offset). Frame `t` of an utterance is `g_s · R[c_t] + μ_s + σ·ε_t` with a
//! fixed rendering codebook `R`, so the oracle can invert any render by
//! exhaustive search over styles and tokens.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{MistError, Result};
use crate::io;
use crate::rng::{self, Rng};

/// Style gains are drawn uniformly from this range.
pub const GAIN_RANGE: (f64, f64) = (0.5, 2.0);
/// Token means within a style must be further apart than this many σ.
pub const SEPARATION_SIGMAS: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub vocab: usize,
    pub styles: usize,
    pub frame_dim: usize,
    pub sigma: f64,
    /// Scale applied to the standard-normal rendering codebook.
    pub codebook_scale: f64,
    /// Standard deviation of the per-style offsets μ_s.
    pub offset_std: f64,
    pub pretrain_size: usize,
    pub pretrain_heldout_size: usize,
    pub train_size: usize,
    pub eval_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 42,
            vocab: 16,
            styles: 8,
            frame_dim: 8,
            sigma: 0.05,
            codebook_scale: 1.0,
            offset_std: 1.0,
            pretrain_size: 512,
            pretrain_heldout_size: 128,
            train_size: 1024,
            eval_pairs: 100,
            min_len: 4,
            max_len: 12,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MistError::Config(m.to_string()));
        if self.vocab < 2 {
            return bad("vocab must be at least 2");
        }
        if self.styles == 0 || self.frame_dim == 0 {
            return bad("styles and frame_dim must be positive");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be finite and nonnegative");
        }
        if !(self.codebook_scale > 0.0) || !(self.offset_std >= 0.0) {
            return bad("codebook_scale must be positive and offset_std nonnegative");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        Ok(())
    }
}

/// Hidden affine style: frames are `gain · R[token] + offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub id: usize,
    pub gain: f64,
    pub offset: Vec<f64>,
}

/// Outcome of the codebook separability check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    /// Smallest distance between two token means of one style, as drawn.
    pub min_distance_drawn: f64,
    /// Same distance after any rescaling.
    pub min_distance: f64,
    pub threshold: f64,
    pub passed_as_drawn: bool,
    pub rescale_factor: f64,
    pub passed: bool,
}

/// Everything the oracle knows: codebook, styles and noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    /// `V x d_x`, row-major.
    pub codebook: Vec<Vec<f64>>,
    pub styles: Vec<StyleParams>,
    pub sigma: f64,
}

impl World {
    /// Draws the codebook and style parameters from `cfg.seed`. If token means
    /// are closer than 6σ for some style, the codebook is rescaled to restore
    /// the margin.
    pub fn generate(cfg: &DatasetConfig) -> Result<(World, Separability)> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, "world");
        let codebook: Vec<Vec<f64>> = (0..cfg.vocab)
            .map(|_| {
                (0..cfg.frame_dim)
                    .map(|_| cfg.codebook_scale * rng::normal(&mut rng))
                    .collect()
            })
            .collect();
        let styles = (0..cfg.styles)
            .map(|id| {
                let gain = rng::uniform(&mut rng, GAIN_RANGE.0, GAIN_RANGE.1);
                let offset = (0..cfg.frame_dim)
                    .map(|_| cfg.offset_std * rng::normal(&mut rng))
                    .collect();
                StyleParams { id, gain, offset }
            })
            .collect();
        let mut world = World {
            codebook,
            styles,
            sigma: cfg.sigma,
        };

        let threshold = SEPARATION_SIGMAS * cfg.sigma;
        let drawn = world.min_token_distance();
        let mut factor = 1.0;
        if drawn <= threshold {
            // 10% margin above the threshold
            factor = 1.1 * threshold / drawn;
            for row in &mut world.codebook {
                for v in row.iter_mut() {
                    *v *= factor;
                }
            }
        }
        let min_distance = world.min_token_distance();
        let sep = Separability {
            min_distance_drawn: drawn,
            min_distance,
            threshold,
            passed_as_drawn: drawn > threshold,
            rescale_factor: factor,
            passed: min_distance > threshold,
        };
        Ok((world, sep))
    }

    pub fn vocab(&self) -> usize {
        self.codebook.len()
    }

    pub fn frame_dim(&self) -> usize {
        self.codebook.first().map_or(0, Vec::len)
    }

    /// Smallest `g_s · ‖R_k − R_k'‖` over styles and token pairs.
    pub fn min_token_distance(&self) -> f64 {
        let mut min_pair = f64::INFINITY;
        for (i, a) in self.codebook.iter().enumerate() {
            for b in &self.codebook[i + 1..] {
                min_pair = min_pair.min(sq_dist(a, b).sqrt());
            }
        }
        let min_gain = self
            .styles
            .iter()
            .map(|s| s.gain)
            .fold(f64::INFINITY, f64::min);
        min_gain * min_pair
    }

    /// Noise-free mean frame of `token` in `style`.
    pub fn token_mean(&self, token: usize, style: usize) -> Vec<f64> {
        let s = &self.styles[style];
        self.codebook[token]
            .iter()
            .zip(&s.offset)
            .map(|(r, m)| s.gain * r + m)
            .collect()
    }

    fn check(&self, c: &[usize], s: usize) -> Result<()> {
        if s >= self.styles.len() {
            return Err(MistError::StyleOutOfRange {
                style: s,
                styles: self.styles.len(),
            });
        }
        let vocab = self.vocab();
        if let Some(&token) = c.iter().find(|&&t| t >= vocab) {
            return Err(MistError::TokenOutOfRange { token, vocab });
        }
        Ok(())
    }

    /// `L x d_x` frames for content `c` in style `s`, with noise drawn from `rng`.
    pub fn render(&self, c: &[usize], s: usize, rng: &mut Rng) -> Result<Tensor> {
        self.check(c, s)?;
        let mut values = Vec::with_capacity(c.len() * self.frame_dim());
        for &t in c {
            for m in self.token_mean(t, s) {
                values.push(m + self.sigma * rng::normal(rng));
            }
        }
        Tensor::new(vec![c.len(), self.frame_dim()], values)
    }

    /// Noise-free render.
    pub fn render_clean(&self, c: &[usize], s: usize) -> Result<Tensor> {
        self.check(c, s)?;
        let values = c.iter().flat_map(|&t| self.token_mean(t, s)).collect();
        Tensor::new(vec![c.len(), self.frame_dim()], values)
    }

    /// Exhaustive decode: for each style pick the nearest token mean per frame
    /// and sum squared residuals; keep the style with the smallest total.
    /// Ties go to the lowest style id, then the lowest token id.
    pub fn oracle_recognize(&self, x: &Tensor) -> Recognition {
        let (rows, _) = x.dims2();
        let mut best: Option<Recognition> = None;
        for s in 0..self.styles.len() {
            let means: Vec<Vec<f64>> = (0..self.vocab()).map(|k| self.token_mean(k, s)).collect();
            let mut tokens = Vec::with_capacity(rows);
            let mut residual = 0.0;
            for t in 0..rows {
                let frame = x.row(t);
                let mut arg = 0;
                let mut min = f64::INFINITY;
                for (k, m) in means.iter().enumerate() {
                    let d = sq_dist(frame, m);
                    if d < min {
                        min = d;
                        arg = k;
                    }
                }
                tokens.push(arg);
                residual += min;
            }
            if best.as_ref().is_none_or(|b| residual < b.residual) {
                best = Some(Recognition {
                    tokens,
                    style: s,
                    residual,
                });
            }
        }
        best.unwrap_or(Recognition {
            tokens: vec![],
            style: 0,
            residual: 0.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recognition {
    pub tokens: Vec<usize>,
    pub style: usize,
    pub residual: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of positions where `hyp` differs from `reference`.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if hyp.len() != reference.len() {
        return Err(MistError::LengthMismatch {
            hyp: hyp.len(),
            reference: reference.len(),
        });
    }
    if reference.is_empty() {
        return Ok(0.0);
    }
    let wrong = hyp.iter().zip(reference).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / reference.len() as f64)
}

/// One (content, frames, hidden style) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub c: Vec<usize>,
    pub x: Tensor,
    pub s: usize,
}

/// Unmatched evaluation pair: input content `c` and a reference rendered
/// from different content `c_ref` in style `s_ref`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub c: Vec<usize>,
    pub x_ref: Tensor,
    pub s_ref: usize,
    pub c_ref: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    c: Vec<usize>,
    x: Vec<Vec<f64>>,
    s: usize,
}

#[derive(Serialize, Deserialize)]
struct EvalPairRecord {
    c: Vec<usize>,
    x_ref: Vec<Vec<f64>>,
    s_ref: usize,
    c_ref: Vec<usize>,
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().map(<[f64]>::to_vec).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(MistError::Empty("frames"));
    }
    Tensor::from_rows(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    /// Style 0 only.
    pub pretrain: Vec<Utterance>,
    /// Style 0 only, disjoint draws from `pretrain`.
    pub pretrain_heldout: Vec<Utterance>,
    pub train: Vec<Utterance>,
    pub eval_pairs: Vec<EvalPair>,
}

fn random_content(rng: &mut Rng, cfg: &DatasetConfig) -> Vec<usize> {
    let len = cfg.min_len + rng::uniform_index(rng, cfg.max_len - cfg.min_len + 1);
    (0..len).map(|_| rng::uniform_index(rng, cfg.vocab)).collect()
}

fn utterances(
    world: &World,
    cfg: &DatasetConfig,
    split: &str,
    n: usize,
    single_style: bool,
) -> Result<Vec<Utterance>> {
    (0..n)
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, &format!("{split}/{i}"));
            let c = random_content(&mut rng, cfg);
            let s = if single_style {
                0
            } else {
                rng::uniform_index(&mut rng, cfg.styles)
            };
            let x = world.render(&c, s, &mut rng)?;
            Ok(Utterance { c, x, s })
        })
        .collect()
}

/// Builds every split. Each utterance draws from its own stream keyed by
/// `(seed, split, index)`.
pub fn make_splits(cfg: &DatasetConfig, world: &World) -> Result<Splits> {
    cfg.validate()?;
    let pretrain = utterances(world, cfg, "pretrain", cfg.pretrain_size, true)?;
    let pretrain_heldout = utterances(world, cfg, "pretrain_heldout", cfg.pretrain_heldout_size, true)?;
    let train = utterances(world, cfg, "train", cfg.train_size, false)?;
    let eval_pairs = (0..cfg.eval_pairs)
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, &format!("eval/{i}"));
            let c = random_content(&mut rng, cfg);
            let c_ref = loop {
                let candidate = random_content(&mut rng, cfg);
                if candidate != c {
                    break candidate;
                }
            };
            let s_ref = rng::uniform_index(&mut rng, cfg.styles);
            let x_ref = world.render(&c_ref, s_ref, &mut rng)?;
            Ok(EvalPair {
                c,
                x_ref,
                s_ref,
                c_ref,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Splits {
        pretrain,
        pretrain_heldout,
        train,
        eval_pairs,
    })
}

pub fn utterances_to_jsonl(utts: &[Utterance]) -> Result<String> {
    let mut out = String::new();
    for u in utts {
        let rec = UtteranceRecord {
            c: u.c.clone(),
            x: to_rows(&u.x),
            s: u.s,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn utterances_from_jsonl(text: &str) -> Result<Vec<Utterance>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let rec: UtteranceRecord = serde_json::from_str(l)?;
            if rec.c.len() != rec.x.len() {
                return Err(MistError::invalid("utterance", "token and frame counts differ"));
            }
            Ok(Utterance {
                c: rec.c,
                x: from_rows(&rec.x)?,
                s: rec.s,
            })
        })
        .collect()
}

pub fn eval_pairs_to_jsonl(pairs: &[EvalPair]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        let rec = EvalPairRecord {
            c: p.c.clone(),
            x_ref: to_rows(&p.x_ref),
            s_ref: p.s_ref,
            c_ref: p.c_ref.clone(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn eval_pairs_from_jsonl(text: &str) -> Result<Vec<EvalPair>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let rec: EvalPairRecord = serde_json::from_str(l)?;
            Ok(EvalPair {
                c: rec.c,
                x_ref: from_rows(&rec.x_ref)?,
                s_ref: rec.s_ref,
                c_ref: rec.c_ref,
            })
        })
        .collect()
}

/// On-disk dataset: the world, all splits and a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub world: World,
    pub separability: Separability,
    pub splits: Splits,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    separability: Separability,
    files: Vec<String>,
}

pub const WORLD_FILE: &str = "world.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PRETRAIN_FILE: &str = "pretrain.jsonl";
pub const PRETRAIN_HELDOUT_FILE: &str = "pretrain_heldout.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_PAIRS_FILE: &str = "eval_pairs.jsonl";

impl Dataset {
    pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
        let (world, separability) = World::generate(cfg)?;
        let splits = make_splits(cfg, &world)?;
        Ok(Dataset {
            config: cfg.clone(),
            world,
            separability,
            splits,
        })
    }

    /// Writes every file atomically into an existing directory `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let s = &self.splits;
        io::write_atomic(&dir.join(WORLD_FILE), &io::to_json_pretty(&self.world)?)?;
        io::write_atomic(&dir.join(PRETRAIN_FILE), &utterances_to_jsonl(&s.pretrain)?)?;
        io::write_atomic(
            &dir.join(PRETRAIN_HELDOUT_FILE),
            &utterances_to_jsonl(&s.pretrain_heldout)?,
        )?;
        io::write_atomic(&dir.join(TRAIN_FILE), &utterances_to_jsonl(&s.train)?)?;
        io::write_atomic(&dir.join(EVAL_PAIRS_FILE), &eval_pairs_to_jsonl(&s.eval_pairs)?)?;
        let manifest = Manifest {
            config: self.config.clone(),
            separability: self.separability.clone(),
            files: [
                WORLD_FILE,
                PRETRAIN_FILE,
                PRETRAIN_HELDOUT_FILE,
                TRAIN_FILE,
                EVAL_PAIRS_FILE,
            ]
            .map(String::from)
            .to_vec(),
        };
        io::write_atomic(&dir.join(MANIFEST_FILE), &io::to_json_pretty(&manifest)?)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: Manifest = serde_json::from_str(&io::read_to_string(&dir.join(MANIFEST_FILE))?)?;
        let world: World = serde_json::from_str(&io::read_to_string(&dir.join(WORLD_FILE))?)?;
        let read = |f: &str| io::read_to_string(&dir.join(f));
        let splits = Splits {
            pretrain: utterances_from_jsonl(&read(PRETRAIN_FILE)?)?,
            pretrain_heldout: utterances_from_jsonl(&read(PRETRAIN_HELDOUT_FILE)?)?,
            train: utterances_from_jsonl(&read(TRAIN_FILE)?)?,
            eval_pairs: eval_pairs_from_jsonl(&read(EVAL_PAIRS_FILE)?)?,
        };
        Ok(Dataset {
            config: manifest.config,
            world,
            separability: manifest.separability,
            splits,
        })
    }
}
