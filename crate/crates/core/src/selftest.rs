//! Fast invariant suite: gradient checks per op and per network, softmax
//! and convex-hull properties, the DV bound under the identity permutation
//! and the MINE estimate on independent Gaussians.

use std::fmt;

use crate::autodiff::{Graph, NodeId, OpKind, Pooling, Tensor};
use crate::error::Result;
use crate::gradcheck::{self, GradCheckReport};
use crate::mine::{self, MineBatch};
use crate::models::{self, ContentEncoder, Decoder, ModelConfig, StatisticsNetwork, StyleEncoder};
use crate::nn::Module;
use crate::rng::{self, Rng};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} ({})", self.name, self.detail)
    }
}

fn from_report(name: String, r: Result<GradCheckReport>) -> Check {
    match r {
        Ok(rep) => {
            let worst = rep.max_rel_err();
            Check {
                name,
                passed: rep.passed(),
                detail: format!("max rel err {worst:.2e}, tol {:.0e}", rep.tol),
            }
        }
        Err(e) => Check {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn uniform(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng::uniform(rng, lo, hi)).collect();
    Tensor::new(shape, v).expect("shape matches")
}

/// Values bounded away from zero, so relu/abs kinks are never straddled.
fn off_zero(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.values_mut() {
        if rng::uniform_index(rng, 2) == 0 {
            *v = -*v;
        }
    }
    t
}

fn weighted_sum(g: &mut Graph, x: NodeId, rng_seed: u64) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let w = uniform(&mut rng::seeded(rng_seed), shape, -1.0, 1.0);
    let w = g.constant(&w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Parameters and scalar loss exercising one op kind.
fn op_case(op: OpKind, rng: &mut Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>) {
    let a34 = off_zero(rng, vec![3, 4]);
    let b34 = off_zero(rng, vec![3, 4]);
    match op {
        OpKind::MatMul => (
            vec![a34, off_zero(rng, vec![4, 2])],
            Box::new(|g, p| {
                let m = g.matmul(p[0], p[1])?;
                weighted_sum(g, m, 1)
            }),
        ),
        OpKind::Add => (
            vec![a34, b34],
            Box::new(|g, p| {
                let m = g.add(p[0], p[1])?;
                weighted_sum(g, m, 2)
            }),
        ),
        OpKind::Sub => (
            vec![a34, b34],
            Box::new(|g, p| {
                let m = g.sub(p[0], p[1])?;
                weighted_sum(g, m, 3)
            }),
        ),
        OpKind::Mul => (
            vec![a34, b34],
            Box::new(|g, p| {
                let m = g.mul(p[0], p[1])?;
                weighted_sum(g, m, 4)
            }),
        ),
        OpKind::AddBias => (
            vec![a34, off_zero(rng, vec![4])],
            Box::new(|g, p| {
                let m = g.add_bias(p[0], p[1])?;
                weighted_sum(g, m, 5)
            }),
        ),
        OpKind::Scale => (
            vec![a34],
            Box::new(|g, p| {
                let m = g.scale(p[0], -1.7);
                weighted_sum(g, m, 6)
            }),
        ),
        OpKind::Shift => (
            vec![a34],
            Box::new(|g, p| {
                let m = g.shift(p[0], 0.3);
                weighted_sum(g, m, 7)
            }),
        ),
        OpKind::Tanh => (
            vec![a34],
            Box::new(|g, p| {
                let m = g.tanh(p[0]);
                weighted_sum(g, m, 8)
            }),
        ),
        OpKind::Relu => (
            vec![a34],
            Box::new(|g, p| {
                let m = g.relu(p[0]);
                weighted_sum(g, m, 9)
            }),
        ),
        OpKind::Exp => (
            vec![a34],
            Box::new(|g, p| {
                let m = g.exp(p[0]);
                weighted_sum(g, m, 10)
            }),
        ),
        OpKind::Log => (
            vec![uniform(rng, vec![3, 4], 0.2, 2.0)],
            Box::new(|g, p| {
                let m = g.log(p[0]);
                weighted_sum(g, m, 11)
            }),
        ),
        OpKind::Abs => (
            vec![a34],
            Box::new(|g, p| {
                let m = g.abs(p[0]);
                weighted_sum(g, m, 12)
            }),
        ),
        OpKind::Softmax => (
            vec![a34],
            Box::new(|g, p| {
                let m = g.softmax(p[0])?;
                weighted_sum(g, m, 13)
            }),
        ),
        OpKind::Sum => (
            vec![a34],
            Box::new(|g, p| {
                let sq = g.mul(p[0], p[0])?;
                Ok(g.sum(sq))
            }),
        ),
        OpKind::Mean => (
            vec![a34],
            Box::new(|g, p| {
                let sq = g.mul(p[0], p[0])?;
                g.mean(sq)
            }),
        ),
        OpKind::MeanAxis => (
            vec![a34],
            Box::new(|g, p| {
                let r = g.mean_axis(p[0], 0)?;
                let c = g.mean_axis(p[0], 1)?;
                let r = weighted_sum(g, r, 14)?;
                let c = weighted_sum(g, c, 15)?;
                g.add(r, c)
            }),
        ),
        OpKind::LogSumExp => (
            vec![a34],
            Box::new(|g, p| {
                let r = g.log_sum_exp(p[0], 0)?;
                let c = g.log_sum_exp(p[0], 1)?;
                let r = weighted_sum(g, r, 16)?;
                let c = weighted_sum(g, c, 17)?;
                g.add(r, c)
            }),
        ),
        OpKind::Concat => (
            vec![off_zero(rng, vec![3, 2]), off_zero(rng, vec![3, 3])],
            Box::new(|g, p| {
                let m = g.concat(&[p[0], p[1]])?;
                weighted_sum(g, m, 18)
            }),
        ),
        OpKind::Gather => (
            vec![a34],
            Box::new(|g, p| {
                let m = g.gather(p[0], &[2, 0, 2, 1])?;
                weighted_sum(g, m, 19)
            }),
        ),
        OpKind::SegmentPool => (
            vec![off_zero(rng, vec![5, 3])],
            Box::new(|g, p| {
                let mean = g.segment_pool(p[0], &[0, 2, 5], Pooling::Mean)?;
                let max = g.segment_pool(p[0], &[0, 2, 5], Pooling::Max)?;
                let a = weighted_sum(g, mean, 20)?;
                let b = weighted_sum(g, max, 21)?;
                g.add(a, b)
            }),
        ),
    }
}

/// One central-difference check per op kind at the point drawn from `seed`.
pub fn op_gradient_checks(seed: u64, fault: Option<OpKind>) -> Vec<Check> {
    OpKind::ALL
        .iter()
        .map(|&op| {
            let mut rng = rng::stream(seed, op.name());
            let (params, build) = op_case(op, &mut rng);
            let r = gradcheck::finite_difference_check_with(
                || Graph::new().with_fault(fault),
                &params,
                GRAD_STEP,
                GRAD_TOL,
                |g, p| build(g, p),
            );
            from_report(format!("grad/op/{}/seed{seed}", op.name()), r)
        })
        .collect()
}

fn l1(g: &mut Graph, pred: NodeId, target: &Tensor) -> Result<NodeId> {
    let x = g.constant(target);
    let d = g.sub(pred, x)?;
    let a = g.abs(d);
    g.mean(a)
}

#[derive(Clone)]
struct ContentCase {
    content: ContentEncoder,
    decoder: Decoder,
    tokens: Vec<usize>,
    target: Tensor,
}

fn content_params(s: &mut ContentCase) -> Vec<&mut Tensor> {
    let mut v = s.content.params_mut();
    v.extend(s.decoder.params_mut());
    v
}

#[derive(Clone)]
struct SynthCase {
    style: StyleEncoder,
    decoder: Decoder,
    y: Tensor,
    frames: Tensor,
    offsets: Vec<usize>,
}

fn synth_params(s: &mut SynthCase) -> Vec<&mut Tensor> {
    let mut v = s.style.params_mut();
    v.extend(s.decoder.params_mut());
    v
}

#[derive(Clone)]
struct DvCase {
    style: StyleEncoder,
    statistics: StatisticsNetwork,
    y: Tensor,
    frames: Tensor,
    offsets: Vec<usize>,
    perm: Vec<usize>,
}

fn dv_params(s: &mut DvCase) -> Vec<&mut Tensor> {
    let mut v = s.style.params_mut();
    v.extend(s.statistics.params_mut());
    v
}

fn random_frames(rng: &mut Rng, lengths: &[usize], d_x: usize) -> (Tensor, Vec<usize>) {
    let offsets = models::offsets(lengths.iter().copied());
    let n = *offsets.last().unwrap();
    (uniform(rng, vec![n, d_x], -2.0, 2.0), offsets)
}

/// Gradient checks of every network under both losses at `seed`:
/// content encoder with the pretraining decoder (L1), style encoder with
/// the decoder (L1), and style encoder with the statistics network (DV).
pub fn network_gradient_checks(cfg: &ModelConfig, seed: u64, fault: Option<OpKind>) -> Vec<Check> {
    let mut rng = rng::stream(seed, "gradcheck");
    let new_graph = || Graph::new().with_fault(fault);
    let mut out = Vec::new();

    let tokens: Vec<usize> = (0..6).map(|_| rng::uniform_index(&mut rng, cfg.vocab)).collect();
    let case = ContentCase {
        content: ContentEncoder::new(cfg, &mut rng),
        decoder: Decoder::pretraining(cfg, &mut rng),
        target: uniform(&mut rng, vec![6, cfg.frame_dim], -2.0, 2.0),
        tokens,
    };
    let r = gradcheck::check_params(&case, content_params, new_graph, GRAD_STEP, GRAD_TOL, |s, g| {
        let c = s.content.bind(g);
        let d = s.decoder.bind(g, true);
        let y = c.forward(g, &s.content, &s.tokens)?;
        let pred = d.forward(g, y, None)?;
        let loss = l1(g, pred, &s.target)?;
        let mut ids = c.ids();
        ids.extend(d.ids());
        Ok((loss, ids))
    });
    out.push(from_report(format!("grad/net/content_encoder+pretrain_decoder/l1/seed{seed}"), r));

    let (frames, offsets) = random_frames(&mut rng, &[5, 7], cfg.frame_dim);
    let case = SynthCase {
        style: StyleEncoder::new(cfg, &mut rng),
        decoder: Decoder::new(cfg, &mut rng),
        y: uniform(&mut rng, vec![12, cfg.content_dim], -1.0, 1.0),
        frames,
        offsets,
    };
    let r = gradcheck::check_params(&case, synth_params, new_graph, GRAD_STEP, GRAD_TOL, |s, g| {
        let se = s.style.bind(g, true);
        let d = s.decoder.bind(g, true);
        let x = g.constant(&s.frames);
        let style = se.forward(g, x, &s.offsets)?;
        let z_rows = g.gather(style.z, &models::row_owner(&s.offsets))?;
        let y = g.constant(&s.y);
        let pred = d.forward(g, y, Some(z_rows))?;
        let loss = l1(g, pred, &s.frames)?;
        let mut ids = se.ids();
        ids.extend(d.ids());
        Ok((loss, ids))
    });
    out.push(from_report(format!("grad/net/style_encoder+decoder/l1/seed{seed}"), r));

    let b = 6;
    let (frames, offsets) = random_frames(&mut rng, &[4, 5, 6, 4, 7, 5], cfg.frame_dim);
    let mut perm = rng::permutation(&mut rng, b);
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        perm.rotate_left(1);
    }
    let case = DvCase {
        style: StyleEncoder::new(cfg, &mut rng),
        statistics: StatisticsNetwork::for_model(cfg, &mut rng),
        y: uniform(&mut rng, vec![b, cfg.content_dim], -1.0, 1.0),
        frames,
        offsets,
        perm,
    };
    let r = gradcheck::check_params(&case, dv_params, new_graph, GRAD_STEP, GRAD_TOL, |s, g| {
        let se = s.style.bind(g, true);
        let t = s.statistics.bind(g, true);
        let x = g.constant(&s.frames);
        let style = se.forward(g, x, &s.offsets)?;
        let y = g.constant(&s.y);
        let dv = mine::dv_bound(g, &t, y, style.z, &s.perm)?;
        let mut ids = se.ids();
        ids.extend(t.ids());
        Ok((dv.raw, ids))
    });
    out.push(from_report(format!("grad/net/style_encoder+statistics/dv/seed{seed}"), r));
    out
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Softmax coefficients sum to one and `z` lies in the token hull, over
/// random references.
pub fn style_invariant_checks(cfg: &ModelConfig, seed: u64) -> Vec<Check> {
    let mut rng = rng::stream(seed, "style_invariants");
    let enc = StyleEncoder::new(cfg, &mut rng);
    let tokens = &enc.bank.tokens;
    let (k, d) = tokens.dims2();
    let mut worst_sum = 0.0f64;
    let mut worst_hull = 0.0f64;
    for _ in 0..100 {
        let len = 1 + rng::uniform_index(&mut rng, 12);
        let x = uniform(&mut rng, vec![len, cfg.frame_dim], -5.0, 5.0);
        let (z, w) = enc.encode_style(&x).expect("valid reference");
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        for j in 0..d {
            let col = (0..k).map(|r| tokens.row(r)[j]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            worst_hull = worst_hull.max(lo - z[j]).max(z[j] - hi);
        }
    }
    vec![
        check(
            "softmax/coefficients_sum_to_one",
            worst_sum <= 1e-12,
            format!("max |sum - 1| {worst_sum:.2e}"),
        ),
        check(
            "style/convex_hull",
            worst_hull <= 1e-10,
            format!("max violation {:.2e}", worst_hull.max(0.0)),
        ),
    ]
}

/// With the identity permutation the DV bound is `mean T − log mean e^T`,
/// which Jensen's inequality keeps at or below zero.
pub fn jensen_check(seed: u64) -> Check {
    let mut rng = rng::stream(seed, "jensen");
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..20 {
        let t = StatisticsNetwork::new(&mut rng, 4, 3, 16);
        let y = uniform(&mut rng, vec![16, 4], -2.0, 2.0);
        let z = uniform(&mut rng, vec![16, 3], -2.0, 2.0);
        let batch = MineBatch::new(y, z, (0..16).collect()).expect("valid batch");
        worst = worst.max(mine::dv_lower_bound(&t, &batch).expect("finite").raw);
    }
    check(
        "dv/identity_permutation_nonpositive",
        worst <= 1e-12,
        format!("max estimate {worst:.3e}"),
    )
}

/// Independent Gaussians: the trained estimate stays near zero.
pub fn gaussian_zero_check(seed: u64) -> Check {
    match mine::estimate_gaussian_mi(0.0, 2000, &mut rng::stream(seed, "gaussian")) {
        Ok(v) => check("mine/gaussian_rho0", v.abs() < 0.05, format!("estimate {v:.4}")),
        Err(e) => check("mine/gaussian_rho0", false, e.to_string()),
    }
}

/// The full suite in a fixed order.
pub fn run(fault: Option<OpKind>) -> Vec<Check> {
    let cfg = ModelConfig::default();
    let mut out = op_gradient_checks(0, fault);
    for seed in 0..3 {
        out.extend(network_gradient_checks(&cfg, seed, fault));
    }
    out.extend(style_invariant_checks(&cfg, 0));
    out.push(jensen_check(0));
    out.push(gaussian_zero_check(0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_check_passes() {
        for c in op_gradient_checks(0, None) {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn faulty_rule_is_named() {
        let checks = op_gradient_checks(0, Some(OpKind::Tanh));
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["grad/op/tanh/seed0"]);
    }
}
