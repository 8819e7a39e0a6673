use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Relative-error thresholds for [`GradCheckReport::passes`].
pub const TOL_SINGLE: f64 = 1e-3;
pub const TOL_DOUBLE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn evaluate<F>(build: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = build(&mut g, &vars)?;
    Ok(g.forward(root)?)
}

/// Compares reverse-mode gradients against central differences at
/// `n_probe` randomly chosen parameter entries.
///
/// The relative error of a probe is `|a - n| / max(|a|, |n|, floor)` where
/// `floor = 1e-6 * max(1, |loss|)` keeps entries whose true derivative is
/// zero from being judged on round-off noise alone.
pub fn gradient_check<F>(
    build: F,
    params: &[Tensor],
    delta: f64,
    n_probe: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = build(&mut g, &vars)?;
    let loss = g.forward(root)?;
    let grads = g.backward(root)?;

    let total: usize = params.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = 1e-6 * loss.abs().max(1.0);
    let mut probes = Vec::with_capacity(n_probe);
    let mut work = params.to_vec();
    for _ in 0..n_probe.min(total.max(1)) {
        let mut flat = rng.random_range(0..total);
        let mut param = 0;
        while flat >= params[param].numel() {
            flat -= params[param].numel();
            param += 1;
        }
        let analytic = grads.get(vars[param]).map(|t| t.data[flat]).unwrap_or(0.0);
        let orig = work[param].data[flat];
        work[param].data[flat] = orig + delta;
        let plus = evaluate(&build, &work)?;
        work[param].data[flat] = orig - delta;
        let minus = evaluate(&build, &work)?;
        work[param].data[flat] = orig;
        let numeric = (plus - minus) / (2.0 * delta);
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        probes.push(Probe {
            param,
            index: flat,
            analytic,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        loss,
        probes,
        max_rel_error,
    })
}
