//! Donsker–Varadhan mutual-information lower bound with permutation marginals.
//!
//! For a batch of joint pairs `(y_i, z_i)` and a permutation `π`:
//!
//! ```text
//! raw     = mean_i T(y_i, z_i) − log( mean_i exp T(y_π(i), z_i) )
//! clipped = max(0, raw)
//! ```
//!
//! The log-mean-exp is `log_sum_exp − ln b`, which stays finite for any
//! statistic magnitude. Estimates are in nats.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{MistError, Result};
use crate::models::{StatisticsIds, StatisticsNetwork};
use crate::nn::Module;
use crate::optim::Optimizer;
use crate::rng::{self, Rng};

/// Decay of the optional moving-average denominator.
pub const EMA_DECAY: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MineEstimate {
    pub raw: f64,
    pub clipped: f64,
}

impl MineEstimate {
    pub fn from_raw(raw: f64) -> Self {
        MineEstimate {
            raw,
            clipped: raw.max(0.0),
        }
    }
}

/// Joint pairs plus the permutation that forms the marginal pairs
/// `(y_perm[i], z_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MineBatch {
    /// `b x d_y`
    pub y: Tensor,
    /// `b x d_z`
    pub z: Tensor,
    pub perm: Vec<usize>,
}

impl MineBatch {
    pub fn new(y: Tensor, z: Tensor, perm: Vec<usize>) -> Result<Self> {
        let (b, _) = y.dims2();
        if z.dims2().0 != b {
            return Err(MistError::Shape {
                op: "mine_batch",
                lhs: y.shape().to_vec(),
                rhs: z.shape().to_vec(),
            });
        }
        if b == 0 {
            return Err(MistError::Empty("mine_batch"));
        }
        if !is_permutation(&perm, b) {
            return Err(MistError::invalid("mine_batch", "perm is not a permutation of 0..b"));
        }
        Ok(MineBatch { y, z, perm })
    }

    /// Batch with a freshly drawn permutation.
    pub fn sample(y: Tensor, z: Tensor, rng: &mut Rng) -> Result<Self> {
        let perm = rng::permutation(rng, y.dims2().0);
        MineBatch::new(y, z, perm)
    }

    pub fn size(&self) -> usize {
        self.perm.len()
    }

    /// The permuted content vectors `ŷ_i = y_perm[i]`.
    pub fn permuted_y(&self) -> Vec<&[f64]> {
        self.perm.iter().map(|&i| self.y.row(i)).collect()
    }
}

pub fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return false;
        }
    }
    true
}

/// Index of a uniformly drawn row; one RNG draw.
pub fn sample_content_index(len: usize, rng: &mut Rng) -> Result<usize> {
    if len == 0 {
        return Err(MistError::Empty("sample_content_vector"));
    }
    Ok(rng::uniform_index(rng, len))
}

/// One uniformly drawn row of an `L x d_c` content matrix.
pub fn sample_content_vector(y_seq: &Tensor, rng: &mut Rng) -> Result<Vec<f64>> {
    let (rows, _) = y_seq.dims2();
    if y_seq.numel() == 0 {
        return Err(MistError::Empty("sample_content_vector"));
    }
    let u = sample_content_index(rows, rng)?;
    Ok(y_seq.row(u).to_vec())
}

/// Nodes of the DV bound inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct DvNodes {
    pub raw: NodeId,
    pub clipped: NodeId,
    /// `b x 1` statistics on joint pairs.
    pub joint: NodeId,
    /// `b x 1` statistics on permuted pairs.
    pub marginal: NodeId,
}

fn max_value(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_finite() {
        m
    } else {
        0.0
    }
}

/// Records the DV bound for `y: b x d_y`, `z: b x d_z` and permutation `perm`.
pub fn dv_bound(
    g: &mut Graph,
    t: &StatisticsIds,
    y: NodeId,
    z: NodeId,
    perm: &[usize],
) -> Result<DvNodes> {
    let b = perm.len();
    if b == 0 {
        return Err(MistError::Empty("dv_lower_bound"));
    }
    let joint = t.forward(g, y, z)?;
    let y_hat = g.gather(y, perm)?;
    let marginal = t.forward(g, y_hat, z)?;
    // Both terms are taken relative to the largest marginal statistic. The
    // bound is invariant to this offset (so it carries no gradient), and a
    // constant statistic then yields exactly zero.
    let m = max_value(g.value(marginal).values());
    let joint_rel = g.shift(joint, -m);
    let marginal_rel = g.shift(marginal, -m);
    let joint_mean = g.mean(joint_rel)?;
    let lse = g.log_sum_exp(marginal_rel, 0)?;
    let log_mean_exp = g.shift(lse, -(b as f64).ln());
    let lme = g.sum(log_mean_exp);
    let raw = g.sub(joint_mean, lme)?;
    let clipped = g.relu(raw);
    Ok(DvNodes {
        raw,
        clipped,
        joint,
        marginal,
    })
}

/// DV bound from precomputed statistics: `mean(joint) − log mean exp(marginal)`.
pub fn dv_from_statistics(joint: &[f64], marginal: &[f64]) -> Result<MineEstimate> {
    if joint.is_empty() || marginal.is_empty() {
        return Err(MistError::Empty("dv_lower_bound"));
    }
    let m = max_value(marginal);
    let mean = joint.iter().map(|v| v - m).sum::<f64>() / joint.len() as f64;
    let s: f64 = marginal.iter().map(|v| (v - m).exp()).sum();
    let lme = s.ln() - (marginal.len() as f64).ln();
    Ok(MineEstimate::from_raw(mean - lme))
}

/// Evaluates the bound of `t` on `batch` without recording gradients.
pub fn dv_lower_bound(t: &StatisticsNetwork, batch: &MineBatch) -> Result<MineEstimate> {
    let mut g = Graph::new();
    let ids = t.bind(&mut g, false);
    let y = g.constant(&batch.y);
    let z = g.constant(&batch.z);
    let nodes = dv_bound(&mut g, &ids, y, z, &batch.perm)?;
    Ok(MineEstimate {
        raw: g.value(nodes.raw).item(),
        clipped: g.value(nodes.clipped).item(),
    })
}

/// Moving average of `mean exp T` on marginal pairs. When enabled, the
/// statistics network ascends `mean T_joint − mean exp T_marginal / ema`
/// instead of the raw bound, which debiases the denominator's gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmaDenominator {
    value: Option<f64>,
}

impl EmaDenominator {
    pub fn update(&mut self, batch_mean_exp: f64) -> f64 {
        let v = match self.value {
            None => batch_mean_exp,
            Some(prev) => EMA_DECAY * prev + (1.0 - EMA_DECAY) * batch_mean_exp,
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

/// Records the statistics network's ascent objective and returns its node.
/// Without `ema` this is the raw bound itself.
pub fn statistics_objective(
    g: &mut Graph,
    dv: &DvNodes,
    ema: Option<&mut EmaDenominator>,
) -> Result<NodeId> {
    let Some(ema) = ema else {
        return Ok(dv.raw);
    };
    let e = g.exp(dv.marginal);
    let mean_exp = g.mean(e)?;
    let denom = ema.update(g.value(mean_exp).item());
    let joint_mean = g.mean(dv.joint)?;
    let scaled = g.scale(mean_exp, 1.0 / denom);
    g.sub(joint_mean, scaled)
}

/// One ascent step of `t` on `batch`; returns the bound before the step.
pub fn train_statistics_step(
    t: &mut StatisticsNetwork,
    opt: &mut Optimizer,
    batch: &MineBatch,
    ema: Option<&mut EmaDenominator>,
) -> Result<MineEstimate> {
    let mut g = Graph::new();
    let ids = t.bind(&mut g, true);
    let y = g.constant(&batch.y);
    let z = g.constant(&batch.z);
    let dv = dv_bound(&mut g, &ids, y, z, &batch.perm)?;
    let objective = statistics_objective(&mut g, &dv, ema)?;
    g.backward(objective)?;
    let grads: Vec<Vec<f64>> = ids.ids().iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();
    let est = MineEstimate {
        raw: g.value(dv.raw).item(),
        clipped: g.value(dv.clipped).item(),
    };
    opt.ascend(t.params_mut(), &grads)?;
    Ok(est)
}

/// Settings for [`estimate_gaussian_mi`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMiConfig {
    pub batch: usize,
    pub hidden: usize,
    pub lr: f64,
    /// Fresh samples used for the final evaluation of the trained network.
    pub eval_samples: usize,
    pub ema_denominator: bool,
}

impl Default for GaussianMiConfig {
    fn default() -> Self {
        GaussianMiConfig {
            batch: 256,
            hidden: 64,
            lr: 1e-3,
            eval_samples: 20_000,
            ema_denominator: false,
        }
    }
}

/// Closed-form MI of a bivariate normal with correlation `rho`, in nats.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

fn correlated_pairs(rho: f64, n: usize, rng: &mut Rng) -> (Tensor, Tensor) {
    let c = (1.0 - rho * rho).sqrt();
    let mut ys = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng::normal(rng);
        let e = rng::normal(rng);
        ys.push(a);
        zs.push(rho * a + c * e);
    }
    (
        Tensor::new(vec![n, 1], ys).expect("n x 1"),
        Tensor::new(vec![n, 1], zs).expect("n x 1"),
    )
}

/// Trains a fresh statistics network on correlated standard bivariate
/// normals for `steps` batches, then evaluates the raw bound on a large
/// fresh sample.
pub fn estimate_gaussian_mi(rho: f64, steps: usize, rng: &mut Rng) -> Result<f64> {
    estimate_gaussian_mi_with(rho, steps, rng, &GaussianMiConfig::default())
}

pub fn estimate_gaussian_mi_with(
    rho: f64,
    steps: usize,
    rng: &mut Rng,
    cfg: &GaussianMiConfig,
) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(MistError::invalid("estimate_gaussian_mi", "need |rho| < 1"));
    }
    let mut t = StatisticsNetwork::new(rng, 1, 1, cfg.hidden);
    let mut opt = Optimizer::adam(cfg.lr);
    let mut ema = cfg.ema_denominator.then(EmaDenominator::default);
    for _ in 0..steps {
        let (y, z) = correlated_pairs(rho, cfg.batch, rng);
        let batch = MineBatch::sample(y, z, rng)?;
        train_statistics_step(&mut t, &mut opt, &batch, ema.as_mut())?;
    }
    let (y, z) = correlated_pairs(rho, cfg.eval_samples, rng);
    let batch = MineBatch::sample(y, z, rng)?;
    Ok(dv_lower_bound(&t, &batch)?.raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::StatisticsNetwork;

    #[test]
    fn single_row_always_sampled() {
        let y = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut rng = rng::seeded(3);
        for _ in 0..20 {
            assert_eq!(sample_content_vector(&y, &mut rng).unwrap(), vec![1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let a = sample_content_index(9, &mut rng::seeded(11)).unwrap();
        let b = sample_content_index(9, &mut rng::seeded(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_sequence_rejected() {
        assert!(sample_content_vector(&Tensor::zeros(vec![0, 4]), &mut rng::seeded(1)).is_err());
    }

    #[test]
    fn constant_statistics_give_zero() {
        for c in [-3.0, 0.0, 0.7, 50.0] {
            let e = dv_from_statistics(&[c; 5], &[c; 5]).unwrap();
            assert_eq!(e.raw, 0.0);
            assert_eq!(e.clipped, 0.0);
        }
    }

    #[test]
    fn direct_arithmetic() {
        let e = dv_from_statistics(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(e.raw, 1.0);
        assert_eq!(e.clipped, 1.0);
    }

    #[test]
    fn graph_matches_direct_formula() {
        let mut r = rng::seeded(4);
        let t = StatisticsNetwork::new(&mut r, 3, 2, 8);
        let y = crate::nn::normal_tensor(&mut r, vec![6, 3], 1.0);
        let z = crate::nn::normal_tensor(&mut r, vec![6, 2], 1.0);
        let batch = MineBatch::sample(y.clone(), z.clone(), &mut r).unwrap();
        let est = dv_lower_bound(&t, &batch).unwrap();
        let joint: Vec<f64> = (0..6).map(|i| t.statistic(y.row(i), z.row(i)).unwrap()).collect();
        let marg: Vec<f64> = (0..6)
            .map(|i| t.statistic(y.row(batch.perm[i]), z.row(i)).unwrap())
            .collect();
        let direct = dv_from_statistics(&joint, &marg).unwrap();
        assert!((est.raw - direct.raw).abs() < 1e-12);
    }

    #[test]
    fn identity_permutation_is_nonpositive() {
        let mut r = rng::seeded(5);
        for _ in 0..20 {
            let t = StatisticsNetwork::new(&mut r, 2, 2, 16);
            let y = crate::nn::normal_tensor(&mut r, vec![8, 2], 2.0);
            let z = crate::nn::normal_tensor(&mut r, vec![8, 2], 2.0);
            let batch = MineBatch::new(y, z, (0..8).collect()).unwrap();
            let est = dv_lower_bound(&t, &batch).unwrap();
            assert!(est.raw <= 1e-12, "raw {}", est.raw);
            assert_eq!(est.clipped, est.raw.max(0.0));
        }
    }

    #[test]
    fn shift_stability() {
        let joint = [0.3, -1.0, 2.5, 0.1];
        let marg = [1.2, -0.4, 0.9, -2.0];
        let base = dv_from_statistics(&joint, &marg).unwrap().raw;
        let shift = |v: &[f64]| v.iter().map(|x| x + 1e4).collect::<Vec<_>>();
        let shifted = dv_from_statistics(&shift(&joint), &shift(&marg)).unwrap().raw;
        assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn batch_rejects_non_permutation() {
        let y = Tensor::zeros(vec![3, 1]);
        let z = Tensor::zeros(vec![3, 1]);
        assert!(MineBatch::new(y.clone(), z.clone(), vec![0, 0, 1]).is_err());
        assert!(MineBatch::new(y, z, vec![0, 1]).is_err());
    }

    #[test]
    fn permuted_rows_are_a_multiset_copy() {
        let mut r = rng::seeded(8);
        let y = crate::nn::normal_tensor(&mut r, vec![10, 2], 1.0);
        let batch = MineBatch::sample(y.clone(), Tensor::zeros(vec![10, 1]), &mut r).unwrap();
        let mut a: Vec<Vec<f64>> = batch.permuted_y().iter().map(|r| r.to_vec()).collect();
        let mut b: Vec<Vec<f64>> = y.rows().map(<[f64]>::to_vec).collect();
        a.sort_by(|p, q| p.partial_cmp(q).unwrap());
        b.sort_by(|p, q| p.partial_cmp(q).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn ema_starts_at_first_value() {
        let mut e = EmaDenominator::default();
        assert_eq!(e.update(2.0), 2.0);
        assert!((e.update(3.0) - (0.99 * 2.0 + 0.01 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn gaussian_closed_form() {
        assert!((gaussian_mi(0.9) - 0.830_366).abs() < 1e-6);
        assert!((gaussian_mi(0.5) - 0.1438).abs() < 1e-4);
        assert_eq!(gaussian_mi(0.0), 0.0);
    }
}
