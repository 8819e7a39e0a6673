//! Bias-corrected Adam with per-parameter step counts.
//!
//! Parameters absent from a gradient map are left alone and their step count
//! does not advance, which keeps field-bank updates sparse. After each update
//! the parameter and both moments are rounded to float32 so that a
//! checkpointed run resumes bit-identically.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::to_f32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Number of updates applied to this parameter.
    pub t: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    /// Flattens the state into checkpoint blobs `m/<name>`, `v/<name>` and
    /// `t/<name>`.
    pub fn to_blobs(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, mo) in &self.moments {
            out.insert(format!("m/{name}"), mo.m.clone());
            out.insert(format!("v/{name}"), mo.v.clone());
            out.insert(format!("t/{name}"), Tensor::scalar(mo.t as f64));
        }
        out
    }

    pub fn from_blobs(blobs: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (key, t) in blobs {
            let Some(name) = key.strip_prefix("t/") else {
                continue;
            };
            let fetch = |p: &str| {
                blobs.get(&format!("{p}/{name}")).cloned().ok_or_else(|| {
                    Error::InvalidArgument(format!("optimizer state for `{name}` lacks `{p}`"))
                })
            };
            let (m, v) = (fetch("m")?, fetch("v")?);
            if m.shape != v.shape {
                return Err(Error::shape(&m.shape, &v.shape));
            }
            moments.insert(
                name.to_string(),
                Moments {
                    m,
                    v,
                    t: t.item() as u64,
                },
            );
        }
        Ok(AdamState { moments })
    }
}

/// One Adam update of every parameter named in `grads`.
///
/// All gradients are checked before anything is modified; a non-finite entry
/// fails with the parameter name.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape != g.shape {
            return Err(Error::shape(&p.shape, &g.shape));
        }
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let mo = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(g.shape),
            v: Tensor::zeros(g.shape),
            t: 0,
        });
        mo.t += 1;
        let t = mo.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..g.data.len() {
            let gi = g.data[i];
            let m = cfg.beta1 * mo.m.data[i] + (1.0 - cfg.beta1) * gi;
            let v = cfg.beta2 * mo.v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let step = cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            p.data[i] = to_f32(p.data[i] - step);
            mo.m.data[i] = to_f32(m);
            mo.v.data[i] = to_f32(v);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::new([1, 1, 1, 1], vec![v]))])
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = one(0.75);
        let mut s = AdamState::default();
        adam_step(&mut p, &one(0.0), &mut s, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(p, one(0.75));
        assert_eq!(s.moments["w"].t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let lr = 1e-3;
        for g in [3.0, -0.02, 250.0] {
            let mut p = one(0.5);
            let mut s = AdamState::default();
            adam_step(&mut p, &one(g), &mut s, &AdamConfig::with_lr(lr)).unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
            let expected = -lr * g.signum();
            let got = p["w"].data[0] - 0.5;
            // Parameters are stored as float32.
            assert!((got - expected).abs() <= 1e-6 * lr + 1e-7, "{g}: {got} vs {expected}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one(0.5);
        p.insert("b".into(), Tensor::scalar(1.0));
        let mut grads = one(f64::NAN);
        grads.insert("b".into(), Tensor::scalar(1.0));
        let mut s = AdamState::default();
        let err = adam_step(&mut p, &grads, &mut s, &AdamConfig::with_lr(0.1)).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        // Nothing was touched, including the finite parameter.
        assert_eq!(p["b"].data[0], 1.0);
        assert!(s.moments.is_empty());
    }

    #[test]
    fn sparse_counts_and_determinism() {
        let run = || {
            let mut p = one(0.5);
            p.insert("b".into(), Tensor::scalar(1.0));
            let mut s = AdamState::default();
            let cfg = AdamConfig::with_lr(0.01);
            for k in 0..5 {
                let mut g = one(0.3 * k as f64 - 0.4);
                if k % 2 == 0 {
                    g.insert("b".into(), Tensor::scalar(-1.0));
                }
                adam_step(&mut p, &g, &mut s, &cfg).unwrap();
            }
            (p, s)
        };
        let (p, s) = run();
        assert_eq!(s.moments["w"].t, 5);
        assert_eq!(s.moments["b"].t, 3);
        assert_eq!((p.clone(), s.clone()), run());
        assert_eq!(AdamState::from_blobs(&s.to_blobs()).unwrap(), s);
    }
}
