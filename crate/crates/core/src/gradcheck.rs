//! Central-difference gradient checking.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::Result;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_err: f64,
    /// Flat position of the worst entry.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    /// Parameters whose worst entry exceeds the tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_err > self.tol)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of a scalar function against
/// `(f(θ+h) − f(θ−h)) / 2h` for every entry of every parameter.
///
/// `build` receives a fresh graph and one differentiable leaf per entry of
/// `params`, and returns the scalar loss node. It must be deterministic.
pub fn finite_difference_check<F>(
    params: &[Tensor],
    h: f64,
    tol: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    finite_difference_check_with(Graph::new, params, h, tol, build)
}

/// As [`finite_difference_check`], with a caller-supplied graph factory
/// (used to inject faulty gradient rules).
pub fn finite_difference_check_with<G, F>(
    new_graph: G,
    params: &[Tensor],
    h: f64,
    tol: f64,
    build: F,
) -> Result<GradCheckReport>
where
    G: Fn() -> Graph,
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = new_graph();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p)).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p)).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    let mut work = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, grads) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index: pi,
            max_rel_err: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (e, &a) in grads.iter().enumerate() {
            let orig = work[pi].values()[e];
            work[pi].values_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[pi].values_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[pi].values_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(a, numeric);
            if err > check.max_rel_err || e == 0 {
                check.max_rel_err = err.max(check.max_rel_err);
                check.worst_entry = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tol,
    })
}

/// Gradient check over the parameters of arbitrary model state.
///
/// `build` binds `state` into the graph it is given and returns the loss
/// with the parameter leaves, listed in the same order as `params_mut`
/// yields the tensors. The numeric side perturbs a clone of `state`.
pub fn check_params<S, G, F>(
    state: &S,
    params_mut: fn(&mut S) -> Vec<&mut Tensor>,
    new_graph: G,
    h: f64,
    tol: f64,
    build: F,
) -> Result<GradCheckReport>
where
    S: Clone,
    G: Fn() -> Graph,
    F: Fn(&S, &mut Graph) -> Result<(NodeId, Vec<NodeId>)>,
{
    let mut g = new_graph();
    let (loss, ids) = build(state, &mut g)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();

    let eval = |s: &S| -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = build(s, &mut g)?;
        Ok(g.value(loss).item())
    };

    let mut work = state.clone();
    let mut report = Vec::with_capacity(analytic.len());
    for (pi, grads) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index: pi,
            max_rel_err: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (e, &a) in grads.iter().enumerate() {
            let orig = params_mut(&mut work)[pi].values()[e];
            params_mut(&mut work)[pi].values_mut()[e] = orig + h;
            let plus = eval(&work)?;
            params_mut(&mut work)[pi].values_mut()[e] = orig - h;
            let minus = eval(&work)?;
            params_mut(&mut work)[pi].values_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(a, numeric);
            if err > check.max_rel_err || e == 0 {
                check.max_rel_err = err.max(check.max_rel_err);
                check.worst_entry = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tol,
    })
}
