//! Helpers shared by the integration tests.

#![allow(dead_code)]

pub mod oracle;

use cyclereg::autodiff::{gradient_check, GradCheckReport, Graph, Tensor, Var};
use cyclereg::objectives::{
    diffusion_graph, final_loss_graph, gradcycon_graph, gradicon_graph, m2m_terms_graph,
    sim_loss_graph, CycleFields, CycleImages, Metric, SimConfig, M2M_TERM_NAMES,
};
use cyclereg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_SHAPE: [usize; 3] = [8, 8, 8];
pub const GRAD_PROBES: usize = 120;
/// Large enough that round-off stays below the tolerance for derivatives near
/// the floor, small enough to rarely straddle a trilinear cell boundary.
pub const GRAD_DELTA: f64 = 3e-5;

/// Sum of a few random low-frequency cosines per channel, scaled to `amp`.
pub fn smooth_tensor(seed: u64, channels: usize, shape: [usize; 3], amp: f64, offset: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nx, ny, nz] = shape;
    let mut data = Vec::with_capacity(channels * nx * ny * nz);
    for _ in 0..channels {
        let waves: Vec<([f64; 3], f64, f64)> = (0..4)
            .map(|_| {
                let k = [
                    rng.random_range(0.2..0.9),
                    rng.random_range(0.2..0.9),
                    rng.random_range(0.2..0.9),
                ];
                (k, rng.random_range(0.0..6.3), rng.random_range(-1.0..1.0))
            })
            .collect();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as f64, y as f64, z as f64];
                    let v: f64 = waves
                        .iter()
                        .map(|(k, ph, a)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).cos())
                        .sum();
                    data.push(offset + amp * v / 4.0);
                }
            }
        }
    }
    Tensor::new([channels, nx, ny, nz], data)
}

pub fn image(seed: u64) -> Tensor {
    smooth_tensor(seed, 1, GRAD_SHAPE, 0.5, 0.5)
}

pub fn field(seed: u64) -> Tensor {
    smooth_tensor(seed, 3, GRAD_SHAPE, 1.2, 0.0)
}

fn check<F>(build: F, params: &[Tensor], seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradient_check(build, params, GRAD_DELTA, GRAD_PROBES, seed)
}

fn cycle(v: &[Var], aligned: bool) -> (CycleImages, CycleFields) {
    let im = CycleImages {
        s: v[0],
        t: v[1],
        s2: v[2],
        t2: v[3],
    };
    let f = CycleFields {
        st: v[4],
        ts2: v[5],
        s2t2: if aligned { None } else { Some(v[7]) },
        t2s: v[6],
    };
    (im, f)
}

fn cycle_params(seed: u64) -> Vec<Tensor> {
    let mut p: Vec<Tensor> = (0..4).map(|k| image(seed + k)).collect();
    p.extend((4..8).map(|k| field(seed + k)));
    p
}

/// Gradient checks of every differentiable objective at 8^3, by name.
pub fn objective_gradient_checks() -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::new();
    for (name, metric) in [("sim_loss/lncc", Metric::Lncc), ("sim_loss/lncc_sq", Metric::LnccSq)] {
        let cfg = SimConfig::with_metric(metric);
        let r = check(
            |g, v| {
                let w = g.warp_linear(v[0], v[2])?;
                Ok(sim_loss_graph(g, w, v[1], &cfg)?)
            },
            &[image(1), image(2), field(3)],
            10,
        )?;
        out.push((name, r));
    }
    out.push((
        "diffusion_reg",
        check(|g, v| diffusion_graph(g, v[0]), &[field(4)], 11)?,
    ));
    out.push((
        "gradicon_reg",
        check(|g, v| gradicon_graph(g, v[0], v[1]), &[field(5), field(6)], 12)?,
    ));
    for (name, aligned) in [("gradcycon", false), ("gradcycon/aligned", true)] {
        let r = check(
            |g, v| {
                let (_, f) = cycle(v, aligned);
                gradcycon_graph(g, &f)
            },
            &cycle_params(20),
            13,
        )?;
        out.push((name, r));
    }
    let cfg = SimConfig::default();
    out.push((
        "m2m_loss",
        check(
            |g, v| {
                let (im, f) = cycle(v, false);
                let t = m2m_terms_graph(g, &im, &f, &cfg)?;
                let a = g.add(t[0], t[1])?;
                let b = g.add(t[2], t[3])?;
                Ok(g.add(a, b)?)
            },
            &cycle_params(30),
            14,
        )?,
    ));
    out.push((
        "final_loss",
        check(
            |g, v| {
                let (im, f) = cycle(v, false);
                let t = m2m_terms_graph(g, &im, &f, &cfg)?;
                let sims = M2M_TERM_NAMES
                    .iter()
                    .zip(t)
                    .map(|(n, v)| (n.to_string(), v))
                    .collect();
                let reg = diffusion_graph(g, v[4])?;
                let gcc = gradcycon_graph(g, &f)?;
                Ok(final_loss_graph(g, sims, Some(reg), Some(gcc), 0.5, 0.1)?.total)
            },
            &cycle_params(40),
            15,
        )?,
    ));
    Ok(out)
}
