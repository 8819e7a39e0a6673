//! Similarity metrics, regularizers and composite registration losses.
//!
//! Every objective is built from the core graph primitives, so the same
//! expression serves evaluation and training. The `*_graph` builders append
//! nodes to a caller-owned [`Graph`]; the plain functions wrap them for
//! one-off evaluation on volumes and fields.
//!
//! All losses are minimized. Similarity enters as `1 - metric`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Region, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::Volume;
use crate::transform::{compose_graph, DisplacementField};

/// Local correlation window radius (a 5x5x5 box).
pub const DEFAULT_RADIUS: usize = 2;
/// Variance stabilizer inside the local correlation.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Lncc,
    LnccSq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    Diffusion,
    Gradicon,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub metric: Metric,
    pub radius: usize,
    pub eps: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            metric: Metric::Lncc,
            radius: DEFAULT_RADIUS,
            eps: DEFAULT_EPS,
        }
    }
}

impl SimConfig {
    pub fn with_metric(metric: Metric) -> Self {
        SimConfig {
            metric,
            ..Self::default()
        }
    }
}

/// Scalar loss terms of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim_terms: Vec<(String, f64)>,
    pub reg_term: f64,
    pub gcc_term: f64,
    pub total: f64,
    pub lambda_reg: f64,
    pub lambda_gcc: f64,
}

impl LossBreakdown {
    pub fn sim_total(&self) -> f64 {
        self.sim_terms.iter().map(|(_, v)| v).sum()
    }
}

/// Per-voxel local correlation map `cov / sqrt((varA + eps)(varB + eps))`.
fn local_cc(g: &mut Graph, a: Var, b: Var, radius: usize, eps: f64) -> Result<Var> {
    if radius == 0 {
        return Err(Error::InvalidArgument("lncc radius must be at least 1".into()));
    }
    let ab = g.mul(a, b)?;
    let aa = g.square(a);
    let bb = g.square(b);
    let mu_a = g.box_mean(a, radius);
    let mu_b = g.box_mean(b, radius);
    let m_ab = g.box_mean(ab, radius);
    let m_aa = g.box_mean(aa, radius);
    let m_bb = g.box_mean(bb, radius);
    let mu_ab = g.mul(mu_a, mu_b)?;
    let cov = g.sub(m_ab, mu_ab)?;
    let sq_a = g.square(mu_a);
    let sq_b = g.square(mu_b);
    let var_a = g.sub(m_aa, sq_a)?;
    let var_b = g.sub(m_bb, sq_b)?;
    let sd_a = g.sqrt_eps(var_a, eps);
    let sd_b = g.sqrt_eps(var_b, eps);
    let denom = g.mul(sd_a, sd_b)?;
    Ok(g.div_eps(cov, denom, 0.0)?)
}

pub fn lncc_graph(g: &mut Graph, a: Var, b: Var, radius: usize, eps: f64) -> Result<Var> {
    let cc = local_cc(g, a, b, radius, eps)?;
    Ok(g.reduce_mean(cc))
}

/// Mean of squared local correlations; blind to local contrast inversion.
pub fn lncc_sq_graph(g: &mut Graph, a: Var, b: Var, radius: usize, eps: f64) -> Result<Var> {
    let cc = local_cc(g, a, b, radius, eps)?;
    let cc2 = g.square(cc);
    Ok(g.reduce_mean(cc2))
}

pub fn sim_loss_graph(g: &mut Graph, a: Var, b: Var, cfg: &SimConfig) -> Result<Var> {
    let m = match cfg.metric {
        Metric::Lncc => lncc_graph(g, a, b, cfg.radius, cfg.eps)?,
        Metric::LnccSq => lncc_sq_graph(g, a, b, cfg.radius, cfg.eps)?,
    };
    let one = g.scalar(1.0);
    Ok(g.sub(one, m)?)
}

/// Mean over voxels, components and axes of the squared spatial derivatives
/// of `u`, using the engine's central-difference stencil.
pub fn diffusion_graph(g: &mut Graph, u: Var) -> Result<Var> {
    let mut sum = None;
    for axis in 0..3 {
        let d = g.spatial_gradient(u, axis)?;
        let d2 = g.square(d);
        let m = g.reduce_mean(d2);
        sum = Some(match sum {
            None => m,
            Some(s) => g.add(s, m)?,
        });
    }
    Ok(g.scalar_mul(sum.unwrap(), 1.0 / 3.0))
}

/// Interior mean of `||grad(Phi) - I||_F^2` for a composed displacement `c`.
fn jacobian_penalty(g: &mut Graph, c: Var) -> Result<Var> {
    let parts = [
        g.spatial_gradient(c, 0)?,
        g.spatial_gradient(c, 1)?,
        g.spatial_gradient(c, 2)?,
    ];
    let all = g.stack(&parts)?;
    let shape = g.shape(all);
    if shape[1..].iter().any(|&n| n < 3) {
        return Err(Error::InvalidArgument(format!(
            "jacobian penalty needs at least 3 voxels per axis, got {:?}",
            &shape[1..]
        )));
    }
    let inner = g.slice(all, Region::interior(shape, 1))?;
    let sq = g.square(inner);
    let m = g.reduce_mean(sq);
    // reduce_mean divides by the 9 matrix entries too.
    Ok(g.scalar_mul(m, 9.0))
}

pub fn gradicon_graph(g: &mut Graph, ab: Var, ba: Var) -> Result<Var> {
    let c = compose_graph(g, ab, ba)?;
    jacobian_penalty(g, c)
}

/// Displacement nodes of one cycle `S -> T -> S' -> T' -> S`. `s2t2` is
/// `None` when the bridge pair is pre-aligned.
#[derive(Debug, Clone, Copy)]
pub struct CycleFields {
    pub st: Var,
    pub ts2: Var,
    pub s2t2: Option<Var>,
    pub t2s: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct CycleImages {
    pub s: Var,
    pub t: Var,
    pub s2: Var,
    pub t2: Var,
}

fn compose_opt(g: &mut Graph, a: Option<Var>, b: Var) -> Result<Var> {
    match a {
        Some(a) => Ok(compose_graph(g, a, b)?),
        None => Ok(b),
    }
}

/// Penalty on the Jacobian of the full cycle composition.
pub fn gradcycon_graph(g: &mut Graph, f: &CycleFields) -> Result<Var> {
    let inner = compose_opt(g, f.s2t2, f.t2s)?;
    let mid = compose_graph(g, f.ts2, inner)?;
    let c = compose_graph(g, f.st, mid)?;
    jacobian_penalty(g, c)
}

pub const M2M_TERM_NAMES: [&str; 4] = ["sim_s", "sim_s2", "sim_t", "sim_t2"];

/// The four mono-modal cycle terms, in the order of [`M2M_TERM_NAMES`]:
///
/// * `S  o ST  o TS'` against `S'`
/// * `S' o S'T' o T'S` against `S`
/// * `T  o TS' o S'T'` against `T'`
/// * `T' o T'S o ST` against `T`
///
/// Each image is warped once through its composed field.
pub fn m2m_terms_graph(
    g: &mut Graph,
    im: &CycleImages,
    f: &CycleFields,
    cfg: &SimConfig,
) -> Result<[Var; 4]> {
    let c1 = compose_graph(g, f.st, f.ts2)?;
    let c2 = compose_opt(g, f.s2t2, f.t2s)?;
    let c3 = match f.s2t2 {
        Some(s2t2) => compose_graph(g, f.ts2, s2t2)?,
        None => f.ts2,
    };
    let c4 = compose_graph(g, f.t2s, f.st)?;
    let mut terms = [c1; 4];
    for (k, (img, field, fixed)) in [
        (im.s, c1, im.s2),
        (im.s2, c2, im.s),
        (im.t, c3, im.t2),
        (im.t2, c4, im.t),
    ]
    .into_iter()
    .enumerate()
    {
        let warped = g.warp_linear(img, field)?;
        terms[k] = sim_loss_graph(g, warped, fixed, cfg)?;
    }
    Ok(terms)
}

/// Loss nodes of one sample: named similarity terms plus optional
/// regularizer and cycle penalty, already weighted into `total`.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub sim_terms: Vec<(String, Var)>,
    pub reg: Option<Var>,
    pub gcc: Option<Var>,
    pub total: Var,
    pub lambda_reg: f64,
    pub lambda_gcc: f64,
}

impl LossNodes {
    /// Reads the evaluated terms. Call after `forward(total)`.
    pub fn breakdown(&self, g: &Graph) -> Result<LossBreakdown> {
        let read = |v: Option<Var>| -> Result<f64> {
            match v {
                Some(v) => Ok(g.value(v)?.item()),
                None => Ok(0.0),
            }
        };
        let mut sim_terms = Vec::with_capacity(self.sim_terms.len());
        for (name, v) in &self.sim_terms {
            sim_terms.push((name.clone(), g.value(*v)?.item()));
        }
        Ok(LossBreakdown {
            sim_terms,
            reg_term: read(self.reg)?,
            gcc_term: read(self.gcc)?,
            total: g.value(self.total)?.item(),
            lambda_reg: self.lambda_reg,
            lambda_gcc: self.lambda_gcc,
        })
    }
}

/// `sum(sims) + lambda_reg * reg + lambda_gcc * gcc`.
pub fn final_loss_graph(
    g: &mut Graph,
    sims: Vec<(String, Var)>,
    reg: Option<Var>,
    gcc: Option<Var>,
    lambda_reg: f64,
    lambda_gcc: f64,
) -> Result<LossNodes> {
    check_lambda(lambda_reg, "lambda_reg")?;
    check_lambda(lambda_gcc, "lambda_gcc")?;
    let mut iter = sims.iter().map(|(_, v)| *v);
    let mut total = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("final loss needs a similarity term".into()))?;
    for v in iter {
        total = g.add(total, v)?;
    }
    for (term, lambda) in [(reg, lambda_reg), (gcc, lambda_gcc)] {
        if let Some(t) = term {
            let w = g.scalar_mul(t, lambda);
            total = g.add(total, w)?;
        }
    }
    Ok(LossNodes {
        sim_terms: sims,
        reg,
        gcc,
        total,
        lambda_reg,
        lambda_gcc,
    })
}

fn check_lambda(v: f64, name: &str) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{name} must be finite and non-negative, got {v}"
        )));
    }
    Ok(())
}

/// Volume as a one-channel tensor.
pub fn volume_tensor(v: &Volume) -> Tensor {
    Tensor::new([1, v.shape[0], v.shape[1], v.shape[2]], v.data.clone())
}

fn same_grid(a: &Volume, b: &Volume) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(&a.shape, &b.shape));
    }
    Ok(())
}

fn fields_match(fields: &[&DisplacementField]) -> Result<()> {
    let s = fields[0].shape;
    for f in fields {
        if f.shape != s {
            return Err(Error::shape(&s, &f.shape));
        }
    }
    Ok(())
}

fn eval_pair(
    a: &Volume,
    b: &Volume,
    build: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<f64> {
    same_grid(a, b)?;
    let mut g = Graph::new();
    let va = g.constant(volume_tensor(a));
    let vb = g.constant(volume_tensor(b));
    let root = build(&mut g, va, vb)?;
    Ok(g.forward(root)?)
}

pub fn lncc(a: &Volume, b: &Volume, radius: usize, eps: f64) -> Result<f64> {
    eval_pair(a, b, |g, x, y| lncc_graph(g, x, y, radius, eps))
}

pub fn lncc_sq(a: &Volume, b: &Volume, radius: usize, eps: f64) -> Result<f64> {
    eval_pair(a, b, |g, x, y| lncc_sq_graph(g, x, y, radius, eps))
}

pub fn sim_loss(a: &Volume, b: &Volume, cfg: &SimConfig) -> Result<f64> {
    eval_pair(a, b, |g, x, y| sim_loss_graph(g, x, y, cfg))
}

pub fn diffusion_reg(u: &DisplacementField) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(u.to_tensor());
    let root = diffusion_graph(&mut g, v)?;
    Ok(g.forward(root)?)
}

pub fn gradicon_reg(ab: &DisplacementField, ba: &DisplacementField) -> Result<f64> {
    fields_match(&[ab, ba])?;
    let mut g = Graph::new();
    let a = g.constant(ab.to_tensor());
    let b = g.constant(ba.to_tensor());
    let root = gradicon_graph(&mut g, a, b)?;
    Ok(g.forward(root)?)
}

/// Cycle penalty on `ST o TS' o S'T' o T'S`; pass `None` for an aligned
/// bridge.
pub fn gradcycon(
    st: &DisplacementField,
    ts2: &DisplacementField,
    s2t2: Option<&DisplacementField>,
    t2s: &DisplacementField,
) -> Result<f64> {
    let mut all = vec![st, ts2, t2s];
    all.extend(s2t2);
    fields_match(&all)?;
    let mut g = Graph::new();
    let f = CycleFields {
        st: g.constant(st.to_tensor()),
        ts2: g.constant(ts2.to_tensor()),
        s2t2: s2t2.map(|u| g.constant(u.to_tensor())),
        t2s: g.constant(t2s.to_tensor()),
    };
    let root = gradcycon_graph(&mut g, &f)?;
    Ok(g.forward(root)?)
}

/// Rejects quads that break the `A, B, A, B` modality alternation.
pub fn check_alternation(s: &Volume, t: &Volume, s2: &Volume, t2: &Volume) -> Result<()> {
    if s.modality != s2.modality || t.modality != t2.modality || s.modality == t.modality {
        return Err(Error::InvalidArgument(format!(
            "cycle needs modalities (X, Y, X, Y) with X != Y, got ({}, {}, {}, {})",
            s.modality, t.modality, s2.modality, t2.modality
        )));
    }
    Ok(())
}

/// The four named mono-modal cycle terms.
#[allow(clippy::too_many_arguments)]
pub fn m2m_loss(
    s: &Volume,
    t: &Volume,
    s2: &Volume,
    t2: &Volume,
    st: &DisplacementField,
    ts2: &DisplacementField,
    s2t2: Option<&DisplacementField>,
    t2s: &DisplacementField,
    cfg: &SimConfig,
) -> Result<Vec<(String, f64)>> {
    check_alternation(s, t, s2, t2)?;
    for v in [t, s2, t2] {
        same_grid(s, v)?;
    }
    let mut all = vec![st, ts2, t2s];
    all.extend(s2t2);
    fields_match(&all)?;
    if st.shape != s.shape {
        return Err(Error::shape(&st.shape, &s.shape));
    }
    let mut g = Graph::new();
    let im = CycleImages {
        s: g.constant(volume_tensor(s)),
        t: g.constant(volume_tensor(t)),
        s2: g.constant(volume_tensor(s2)),
        t2: g.constant(volume_tensor(t2)),
    };
    let f = CycleFields {
        st: g.constant(st.to_tensor()),
        ts2: g.constant(ts2.to_tensor()),
        s2t2: s2t2.map(|u| g.constant(u.to_tensor())),
        t2s: g.constant(t2s.to_tensor()),
    };
    let terms = m2m_terms_graph(&mut g, &im, &f, cfg)?;
    let mut out = Vec::with_capacity(4);
    for (name, v) in M2M_TERM_NAMES.iter().zip(terms) {
        g.evaluate(v)?;
        out.push((name.to_string(), g.value(v)?.item()));
    }
    Ok(out)
}

/// Direct multi-modal objective: `sim(S o Phi, T) + lambda_reg * diffusion(u)`.
pub fn conventional_loss(
    s: &Volume,
    t: &Volume,
    st: &DisplacementField,
    lambda_reg: f64,
    cfg: &SimConfig,
) -> Result<LossBreakdown> {
    same_grid(s, t)?;
    if st.shape != t.shape {
        return Err(Error::shape(&st.shape, &t.shape));
    }
    let mut g = Graph::new();
    let vs = g.constant(volume_tensor(s));
    let vt = g.constant(volume_tensor(t));
    let u = g.constant(st.to_tensor());
    let warped = g.warp_linear(vs, u)?;
    let sim = sim_loss_graph(&mut g, warped, vt, cfg)?;
    let reg = diffusion_graph(&mut g, u)?;
    let nodes = final_loss_graph(&mut g, vec![("sim".into(), sim)], Some(reg), None, lambda_reg, 0.0)?;
    g.forward(nodes.total)?;
    nodes.breakdown(&g)
}

/// Combines already evaluated terms with the same arithmetic as
/// [`final_loss_graph`].
pub fn final_loss(
    sim_terms: Vec<(String, f64)>,
    reg_term: f64,
    gcc_term: f64,
    lambda_reg: f64,
    lambda_gcc: f64,
) -> Result<LossBreakdown> {
    check_lambda(lambda_reg, "lambda_reg")?;
    check_lambda(lambda_gcc, "lambda_gcc")?;
    let mut iter = sim_terms.iter().map(|(_, v)| *v);
    let mut total = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("final loss needs a similarity term".into()))?;
    for v in iter {
        total += v;
    }
    total += reg_term * lambda_reg;
    total += gcc_term * lambda_gcc;
    Ok(LossBreakdown {
        sim_terms,
        reg_term,
        gcc_term,
        total,
        lambda_reg,
        lambda_gcc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape3;
    use crate::transform::integrate_svf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(shape: Shape3, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(shape, |_, _, _| rng.random::<f64>())
    }

    fn linear_field(shape: Shape3, m: [[f64; 3]; 3]) -> DisplacementField {
        let c = shape.map(|n| (n as f64 - 1.0) / 2.0);
        DisplacementField::from_fn(shape, |x, y, z| {
            let p = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
            let mut u = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    u[i] += m[i][j] * p[j];
                }
            }
            u
        })
    }

    /// Independent sliding-window correlation: direct sums over the
    /// in-bounds part of each window.
    fn brute_cc(a: &Volume, b: &Volume, r: usize, eps: f64) -> Vec<f64> {
        let [nx, ny, nz] = a.shape;
        let r = r as isize;
        let mut out = Vec::new();
        for z in 0..nz as isize {
            for y in 0..ny as isize {
                for x in 0..nx as isize {
                    let (mut n, mut sa, mut sb, mut sab, mut saa, mut sbb) =
                        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (px, py, pz) = (x + dx, y + dy, z + dz);
                                if px < 0
                                    || py < 0
                                    || pz < 0
                                    || px >= nx as isize
                                    || py >= ny as isize
                                    || pz >= nz as isize
                                {
                                    continue;
                                }
                                let va = a.get(px as usize, py as usize, pz as usize);
                                let vb = b.get(px as usize, py as usize, pz as usize);
                                n += 1.0;
                                sa += va;
                                sb += vb;
                                sab += va * vb;
                                saa += va * va;
                                sbb += vb * vb;
                            }
                        }
                    }
                    let (ma, mb) = (sa / n, sb / n);
                    let cov = sab / n - ma * mb;
                    let va = saa / n - ma * ma;
                    let vb = sbb / n - mb * mb;
                    out.push(cov / ((va + eps) * (vb + eps)).sqrt());
                }
            }
        }
        out
    }

    #[test]
    fn lncc_self_and_inverted() {
        let a = noise([8, 8, 8], 1);
        let neg = Volume {
            data: a.data.iter().map(|v| -v).collect(),
            ..a.clone()
        };
        assert!((lncc(&a, &a, 2, 1e-5).unwrap() - 1.0).abs() < 1e-3);
        assert!((lncc(&a, &neg, 2, 1e-5).unwrap() + 1.0).abs() < 1e-3);
        assert!((lncc_sq(&a, &a, 2, 1e-5).unwrap() - 1.0).abs() < 1e-3);
        assert!((lncc_sq(&a, &neg, 2, 1e-5).unwrap() - 1.0).abs() < 1e-3);
        let cfg = SimConfig::default();
        assert!(sim_loss(&a, &a, &cfg).unwrap().abs() < 1e-3);
        assert!((sim_loss(&a, &neg, &cfg).unwrap() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn lncc_constant_is_zero() {
        let c = Volume::from_fn([8, 8, 8], |_, _, _| 0.7);
        let b = noise([8, 8, 8], 2);
        assert!(lncc(&c, &b, 2, 1e-5).unwrap().abs() < 1e-6);
    }

    #[test]
    fn lncc_matches_sliding_window_oracle() {
        let a = noise([8, 8, 8], 3);
        let b = noise([8, 8, 8], 4);
        let cc = brute_cc(&a, &b, 2, 1e-5);
        let n = cc.len() as f64;
        let mean: f64 = cc.iter().sum::<f64>() / n;
        let mean_sq: f64 = cc.iter().map(|c| c * c).sum::<f64>() / n;
        assert!((lncc(&a, &b, 2, 1e-5).unwrap() - mean).abs() < 1e-10);
        assert!((lncc_sq(&a, &b, 2, 1e-5).unwrap() - mean_sq).abs() < 1e-10);
    }

    #[test]
    fn lncc_is_symmetric_bitwise() {
        let a = noise([8, 6, 7], 5);
        let b = noise([8, 6, 7], 6);
        assert_eq!(lncc(&a, &b, 2, 1e-5).unwrap(), lncc(&b, &a, 2, 1e-5).unwrap());
        assert_eq!(lncc_sq(&a, &b, 2, 1e-5).unwrap(), lncc_sq(&b, &a, 2, 1e-5).unwrap());
    }

    #[test]
    fn lncc_rejects_bad_input() {
        let a = noise([8, 8, 8], 1);
        let b = noise([8, 8, 7], 1);
        assert!(matches!(lncc(&a, &b, 2, 1e-5), Err(Error::ShapeMismatch { .. })));
        assert!(lncc(&a, &a, 0, 1e-5).is_err());
    }

    #[test]
    fn diffusion_examples() {
        assert_eq!(diffusion_reg(&DisplacementField::identity([4, 4, 4])).unwrap(), 0.0);
        let constant = DisplacementField::from_fn([4, 4, 4], |_, _, _| [0.3, -1.0, 2.0]);
        assert_eq!(diffusion_reg(&constant).unwrap(), 0.0);
        let c = 0.7;
        let lin = DisplacementField::from_fn([4, 4, 4], |x, _, _| [c * x as f64, 0.0, 0.0]);
        assert!((diffusion_reg(&lin).unwrap() - c * c / 9.0).abs() < 1e-14);
    }

    #[test]
    fn gradicon_examples() {
        let id = DisplacementField::identity([8, 8, 8]);
        assert_eq!(gradicon_reg(&id, &id).unwrap(), 0.0);
        let fwd = DisplacementField::from_fn([8, 8, 8], |_, _, _| [1.5, -0.5, 0.25]);
        let back = fwd.scaled(-1.0);
        assert!(gradicon_reg(&fwd, &back).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gradicon_linear_matches_matrix_oracle() {
        let m = [[0.10, 0.05, -0.02], [0.03, -0.08, 0.04], [-0.06, 0.02, 0.12]];
        // Contracting toward the centre keeps every sample inside the grid.
        let n = [[-0.10, 0.04, -0.03], [0.02, -0.09, 0.05], [0.04, -0.03, -0.08]];
        let ab = linear_field([8, 8, 8], m);
        let ba = linear_field([8, 8, 8], n);
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut p = 0.0;
                for k in 0..3 {
                    let a = m[i][k] + if i == k { 1.0 } else { 0.0 };
                    let b = n[k][j] + if k == j { 1.0 } else { 0.0 };
                    p += a * b;
                }
                let d = p - if i == j { 1.0 } else { 0.0 };
                expected += d * d;
            }
        }
        assert!((gradicon_reg(&ab, &ba).unwrap() - expected).abs() < 1e-12);
    }

    fn smooth_field(shape: Shape3, seed: u64, amp: f64) -> DisplacementField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        DisplacementField::from_fn(shape, |x, y, z| {
            let (x, y, z) = (x as f64 / 4.0, y as f64 / 4.0, z as f64 / 4.0);
            [
                amp * (k[0] * (x + k[1]).sin() + k[2] * (y * z).cos()),
                amp * (k[3] * (y + k[4]).sin() + k[5] * (x * z).cos()),
                amp * (k[6] * (z + k[7]).sin() + k[8] * (x * y).cos()),
            ]
        })
    }

    #[test]
    fn gradcycon_identities() {
        let shape = [8, 8, 8];
        let id = DisplacementField::identity(shape);
        assert_eq!(gradcycon(&id, &id, Some(&id), &id).unwrap(), 0.0);
        let a = smooth_field(shape, 1, 0.8);
        let b = smooth_field(shape, 2, 0.8);
        assert_eq!(
            gradcycon(&a, &id, Some(&id), &b).unwrap().to_bits(),
            gradicon_reg(&a, &b).unwrap().to_bits()
        );
        assert_eq!(
            gradcycon(&a, &id, None, &b).unwrap().to_bits(),
            gradicon_reg(&a, &b).unwrap().to_bits()
        );
    }

    #[test]
    fn gradcycon_svf_inverse_pair_is_small() {
        let shape = [16, 16, 16];
        let v = smooth_field(shape, 3, 0.6);
        let fwd = integrate_svf(&v, 7).unwrap();
        let inv = integrate_svf(&v.scaled(-1.0), 7).unwrap();
        let id = DisplacementField::identity(shape);
        let p = gradcycon(&fwd, &id, Some(&id), &inv).unwrap();
        assert!(p <= 1e-3, "{p}");
    }

    fn tagged(v: Volume, m: &str) -> Volume {
        v.with_modality(m)
    }

    #[test]
    fn m2m_identity_cycle_is_zero() {
        let s = tagged(noise([8, 8, 8], 1), "A");
        let t = tagged(noise([8, 8, 8], 2), "B");
        let id = DisplacementField::identity([8, 8, 8]);
        let cfg = SimConfig::default();
        let terms = m2m_loss(&s, &t, &s, &t, &id, &id, Some(&id), &id, &cfg).unwrap();
        assert_eq!(terms.len(), 4);
        for (name, v) in &terms {
            assert!(v.abs() < 1e-3, "{name}: {v}");
        }
    }

    #[test]
    fn m2m_rejects_broken_alternation() {
        let s = tagged(noise([8, 8, 8], 1), "A");
        let t = tagged(noise([8, 8, 8], 2), "B");
        let id = DisplacementField::identity([8, 8, 8]);
        let cfg = SimConfig::default();
        assert!(m2m_loss(&s, &t, &t, &s, &id, &id, None, &id, &cfg).is_err());
        assert!(m2m_loss(&s, &s, &s, &s, &id, &id, None, &id, &cfg).is_err());
    }

    #[test]
    fn m2m_translation_cycle_first_term_vanishes_inside() {
        // S' is S shifted by t: S'(x) = S(x - t). The cycle ST = id,
        // TS' = +t maps S onto S' away from the faces.
        let shape = [16, 16, 16];
        let base = noise(shape, 9);
        let s2 = Volume::from_fn(shape, |x, y, z| base.get(x.saturating_sub(1), y, z));
        let s = base.with_modality("A");
        let s2 = s2.with_modality("A");
        let t = tagged(noise(shape, 10), "B");
        let id = DisplacementField::identity(shape);
        let shift = DisplacementField::from_fn(shape, |_, _, _| [-1.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let im = CycleImages {
            s: g.constant(volume_tensor(&s)),
            t: g.constant(volume_tensor(&t)),
            s2: g.constant(volume_tensor(&s2)),
            t2: g.constant(volume_tensor(&t)),
        };
        let f = CycleFields {
            st: g.constant(id.to_tensor()),
            ts2: g.constant(shift.to_tensor()),
            s2t2: Some(g.constant(id.to_tensor())),
            t2s: g.constant(shift.scaled(-1.0).to_tensor()),
        };
        let c1 = compose_graph(&mut g, f.st, f.ts2).unwrap();
        let warped = g.warp_linear(im.s, c1).unwrap();
        g.evaluate(warped).unwrap();
        let w = g.value(warped).unwrap().data.clone();
        for z in 0..16 {
            for y in 0..16 {
                for x in 1..16 {
                    let i = x + 16 * (y + 16 * z);
                    assert!((w[i] - s2.data[i]).abs() < 1e-12);
                }
            }
        }
        let terms = m2m_loss(&s, &t, &s2, &t, &id, &shift, Some(&id), &shift.scaled(-1.0), &SimConfig::default())
            .unwrap();
        assert!(terms[0].1 < 0.05, "{}", terms[0].1);
    }

    #[test]
    fn conventional_and_final_examples() {
        let s = noise([8, 8, 8], 4);
        let id = DisplacementField::identity([8, 8, 8]);
        let cfg = SimConfig::default();
        let b = conventional_loss(&s, &s, &id, 0.0, &cfg).unwrap();
        assert!(b.total.abs() < 1e-3);

        let u = smooth_field([8, 8, 8], 5, 0.5);
        let t = noise([8, 8, 8], 6);
        let one = conventional_loss(&s, &t, &u, 1.5, &cfg).unwrap();
        let two = conventional_loss(&s, &t, &u, 3.0, &cfg).unwrap();
        let r1 = one.total - one.sim_total();
        let r2 = two.total - two.sim_total();
        assert!((r2 - 2.0 * r1).abs() < 1e-12);

        let f = final_loss(vec![("sim".into(), 1.0)], 0.2, 0.3, 0.5, 0.1).unwrap();
        assert!((f.total - 1.13).abs() < 1e-12);
        let f0 = final_loss(vec![("sim".into(), 1.0)], 0.2, 0.3, 0.5, 0.0).unwrap();
        assert!((f0.total - 1.1).abs() < 1e-12);
        assert!(final_loss(vec![], 0.0, 0.0, 0.5, 0.1).is_err());
        assert!(final_loss(vec![("s".into(), 1.0)], 0.0, 0.0, -1.0, 0.1).is_err());
    }

    #[test]
    fn final_graph_matches_scalar_arithmetic() {
        let mut g = Graph::new();
        let sims: Vec<(String, Var)> = [0.4, 0.3, 0.2, 0.1]
            .iter()
            .enumerate()
            .map(|(i, &v)| (format!("t{i}"), g.scalar(v)))
            .collect();
        let reg = g.scalar(0.2);
        let gcc = g.scalar(0.3);
        let nodes = final_loss_graph(&mut g, sims, Some(reg), Some(gcc), 0.5, 0.1).unwrap();
        g.forward(nodes.total).unwrap();
        let b = nodes.breakdown(&g).unwrap();
        let direct = final_loss(b.sim_terms.clone(), 0.2, 0.3, 0.5, 0.1).unwrap();
        assert!((b.total - direct.total).abs() < 1e-10);
        assert!((b.total - 1.13).abs() < 1e-10);
    }

    fn ramp_blobs(shape: Shape3) -> Volume {
        Volume::from_fn(shape, |x, y, z| {
            let (x, y, z) = (x as f64, y as f64, z as f64);
            let blob = |cx: f64, cy: f64, cz: f64, r: f64| {
                (-((x - cx).powi(2) + (y - cy).powi(2) + (z - cz).powi(2)) / (r * r)).exp()
            };
            0.03 * x + blob(5.0, 6.0, 8.0, 2.5) + 0.7 * blob(10.0, 9.0, 6.0, 3.0)
                - 0.5 * blob(8.0, 4.0, 11.0, 2.0)
        })
    }

    fn shifted(v: &Volume, dx: f64) -> Volume {
        let u = DisplacementField::from_fn(v.shape, |_, _, _| [dx, 0.0, 0.0]);
        crate::transform::warp_image(v, &u, crate::transform::Interp::Linear).unwrap()
    }

    #[test]
    fn sim_loss_grows_with_misalignment() {
        let img = ramp_blobs([16, 16, 16]);
        let cfg = SimConfig::default();
        let l1 = sim_loss(&img, &shifted(&img, 1.0), &cfg).unwrap();
        let l2 = sim_loss(&img, &shifted(&img, 2.0), &cfg).unwrap();
        assert!(l2 > l1, "{l2} <= {l1}");
    }

    #[test]
    fn sim_loss_argmin_is_true_shift() {
        let img = ramp_blobs([16, 16, 16]);
        let target = shifted(&img, 2.0);
        for metric in [Metric::Lncc, Metric::LnccSq] {
            let cfg = SimConfig::with_metric(metric);
            let losses: Vec<f64> = (-8..=8)
                .map(|k| sim_loss(&shifted(&img, k as f64 * 0.5), &target, &cfg).unwrap())
                .collect();
            let best = losses
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(best, 12, "{metric:?}: {losses:?}");
        }
    }
}
