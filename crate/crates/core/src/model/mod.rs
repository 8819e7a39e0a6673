//! Displacement predictors.
//!
//! Two backends share one contract: given a (source, target) pair, produce a
//! displacement node on the target grid.
//!
//! * `amortized`: a small convolutional encoder-decoder over the stacked
//!   (source, target) images. Swapping the inputs predicts the reverse edge.
//! * `field_bank`: one free displacement field per ordered pair id.
//!
//! Parameter values are kept float32-representable so that checkpoints
//! round-trip exactly.

mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{Shape3, Volume};
use crate::objectives::volume_tensor;
use crate::transform::DisplacementField;

pub use checkpoint::{load_checkpoint, read_descriptor, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Encoder-decoder layout.
///
/// Level `l` runs at `1 / (input_pool * 2^l)` of the image resolution with
/// `channels[l]` features. The decoder climbs back to `head_level`, where a
/// zero-initialized convolution emits three displacement channels that are
/// then upsampled linearly to the image grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub input_pool: usize,
    pub head_level: usize,
    pub leaky_slope: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            channels: vec![8, 16, 32],
            kernel: 3,
            input_pool: 2,
            head_level: 1,
            leaky_slope: 0.2,
        }
    }
}

pub const INPUT_CHANNELS: usize = 2;

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("architecture: {m}")));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channels must be non-empty and positive, got {:?}", self.channels));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if !self.input_pool.is_power_of_two() {
            return bad(format!("input_pool must be a power of two, got {}", self.input_pool));
        }
        if self.head_level >= self.channels.len() {
            return bad(format!(
                "head_level {} must be below the level count {}",
                self.head_level,
                self.channels.len()
            ));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky_slope must be non-negative, got {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Image extent must be divisible by this on every axis.
    pub fn grid_multiple(&self) -> usize {
        self.input_pool << (self.channels.len() - 1)
    }

    /// Upsampling factor from the head's grid to the image grid.
    pub fn head_factor(&self) -> usize {
        self.input_pool << self.head_level
    }

    /// `(name, shape)` of every parameter in creation order.
    pub fn param_shapes(&self) -> Vec<(String, [usize; 4])> {
        let k = self.kernel;
        let conv = |prefix: &str, cin: usize, cout: usize| {
            vec![
                (format!("{prefix}.weight"), [cout * cin, k, k, k]),
                (format!("{prefix}.bias"), [cout, 1, 1, 1]),
            ]
        };
        let c = &self.channels;
        let mut out = Vec::new();
        let mut cin = INPUT_CHANNELS;
        for (l, &cout) in c.iter().enumerate() {
            out.extend(conv(&format!("enc{l}"), cin, cout));
            cin = cout;
        }
        for l in (self.head_level..c.len() - 1).rev() {
            out.extend(conv(&format!("dec{l}"), cin + c[l], c[l]));
            cin = c[l];
        }
        out.extend(conv("head", cin, 3));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// What a checkpoint must agree on before its payload is read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum Descriptor {
    Amortized(ArchSpec),
    FieldBank { shape: Shape3 },
}

impl Descriptor {
    pub fn validate(&self) -> Result<()> {
        match self {
            Descriptor::Amortized(a) => a.validate(),
            Descriptor::FieldBank { shape } if shape.contains(&0) => Err(Error::InvalidArgument(
                format!("field bank shape must be positive, got {shape:?}"),
            )),
            Descriptor::FieldBank { .. } => Ok(()),
        }
    }

    pub fn backend_name(&self) -> &'static str {
        match self {
            Descriptor::Amortized(_) => "amortized",
            Descriptor::FieldBank { .. } => "field_bank",
        }
    }
}

/// Identifies one image of the dataset, e.g. `s003:A`.
pub fn image_key(subject: &str, modality: &str) -> String {
    format!("{subject}:{modality}")
}

/// Ordered pair id used by the field bank.
pub fn pair_id(source: &str, target: &str) -> String {
    format!("{source}->{target}")
}

const BANK_PREFIX: &str = "bank/";

/// Rounds to the nearest float32.
#[inline]
pub fn to_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// An image node plus its dataset key.
#[derive(Debug, Clone, Copy)]
pub struct Endpoint<'a> {
    pub image: Var,
    pub key: &'a str,
}

/// Graph leaves created for the parameters used in one graph.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub descriptor: Descriptor,
    pub params: BTreeMap<String, Tensor>,
}

impl Model {
    /// Seeded He-normal convolutions, zero biases and a zero head, so a fresh
    /// model predicts the identity. A field bank starts empty.
    pub fn init(descriptor: Descriptor, seed: u64) -> Result<Model> {
        descriptor.validate()?;
        let mut params = BTreeMap::new();
        if let Descriptor::Amortized(arch) = &descriptor {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k3 = arch.kernel.pow(3);
            for (name, shape) in arch.param_shapes() {
                let mut t = Tensor::zeros(shape);
                if name.ends_with(".weight") && !name.starts_with("head") {
                    let cout = arch_cout(&name, arch);
                    let cin = shape[0] / cout;
                    let std = (2.0 / (cin * k3) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    for v in &mut t.data {
                        *v = to_f32(normal.sample(&mut rng));
                    }
                }
                params.insert(name, t);
            }
        }
        Ok(Model { descriptor, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    fn arch(&self) -> Result<&ArchSpec> {
        match &self.descriptor {
            Descriptor::Amortized(a) => Ok(a),
            Descriptor::FieldBank { .. } => Err(Error::InvalidArgument(
                "operation needs the amortized backend".into(),
            )),
        }
    }

    fn bind(&self, g: &mut Graph, b: &mut Bindings, name: &str) -> Result<Var> {
        if let Some(&v) = b.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))?;
        let v = g.param(t.clone());
        b.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&self, g: &mut Graph, b: &mut Bindings, prefix: &str, x: Var) -> Result<Var> {
        let w = self.bind(g, b, &format!("{prefix}.weight"))?;
        let bias = self.bind(g, b, &format!("{prefix}.bias"))?;
        Ok(g.conv3d(x, w, bias)?)
    }

    /// Displacement node for the pair `source -> target` (pull-back of the
    /// source onto the target grid).
    pub fn predict_graph(
        &self,
        g: &mut Graph,
        b: &mut Bindings,
        source: Endpoint,
        target: Endpoint,
    ) -> Result<Var> {
        match &self.descriptor {
            Descriptor::FieldBank { .. } => {
                let id = pair_id(source.key, target.key);
                let name = format!("{BANK_PREFIX}{id}");
                if !self.params.contains_key(&name) {
                    return Err(Error::UnknownPair(id));
                }
                self.bind(g, b, &name)
            }
            Descriptor::Amortized(arch) => {
                self.predict_amortized(g, b, arch, source.image, target.image)
            }
        }
    }

    fn predict_amortized(
        &self,
        g: &mut Graph,
        b: &mut Bindings,
        arch: &ArchSpec,
        source: Var,
        target: Var,
    ) -> Result<Var> {
        let (ss, st) = (g.shape(source), g.shape(target));
        if ss != st || ss[0] != 1 {
            return Err(Error::shape(&ss, &st));
        }
        let m = arch.grid_multiple();
        if ss[1..].iter().any(|n| n % m != 0) {
            return Err(Error::InvalidArgument(format!(
                "image extent {:?} must be a multiple of {m} for this architecture",
                &ss[1..]
            )));
        }
        let mut x = g.stack(&[source, target])?;
        let mut pool = arch.input_pool;
        while pool > 1 {
            x = g.avg_pool2(x)?;
            pool /= 2;
        }
        let levels = arch.channels.len();
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            if l > 0 {
                x = g.avg_pool2(x)?;
            }
            let y = self.conv(g, b, &format!("enc{l}"), x)?;
            x = g.leaky_relu(y, arch.leaky_slope);
            skips.push(x);
        }
        for l in (arch.head_level..levels - 1).rev() {
            let up = g.upsample_linear(x, 2)?;
            let cat = g.stack(&[up, skips[l]])?;
            let y = self.conv(g, b, &format!("dec{l}"), cat)?;
            x = g.leaky_relu(y, arch.leaky_slope);
        }
        let u = self.conv(g, b, "head", x)?;
        let f = arch.head_factor();
        if f == 1 {
            Ok(u)
        } else {
            Ok(g.upsample_linear(u, f)?)
        }
    }

    /// Amortized prediction outside of training.
    pub fn predict_field(&self, source: &Volume, target: &Volume) -> Result<DisplacementField> {
        self.arch()?;
        if source.shape != target.shape {
            return Err(Error::shape(&source.shape, &target.shape));
        }
        let mut g = Graph::new();
        let s = g.constant(volume_tensor(source));
        let t = g.constant(volume_tensor(target));
        let mut b = Bindings::new();
        let u = self.predict_graph(
            &mut g,
            &mut b,
            Endpoint { image: s, key: "" },
            Endpoint { image: t, key: "" },
        )?;
        g.evaluate(u)?;
        DisplacementField::from_tensor(g.value(u)?)
    }

    /// Adds a zero field for `id` unless it already exists.
    pub fn bank_register(&mut self, id: &str) -> Result<()> {
        let shape = match &self.descriptor {
            Descriptor::FieldBank { shape } => *shape,
            _ => return Err(Error::InvalidArgument("not a field bank".into())),
        };
        self.params
            .entry(format!("{BANK_PREFIX}{id}"))
            .or_insert_with(|| Tensor::zeros([3, shape[0], shape[1], shape[2]]));
        Ok(())
    }

    pub fn bank_contains(&self, id: &str) -> bool {
        self.params.contains_key(&format!("{BANK_PREFIX}{id}"))
    }

    pub fn bank_get(&self, id: &str) -> Result<DisplacementField> {
        let t = self
            .params
            .get(&format!("{BANK_PREFIX}{id}"))
            .ok_or_else(|| Error::UnknownPair(id.to_string()))?;
        DisplacementField::from_tensor(t)
    }

    pub fn bank_update(&mut self, id: &str, field: &DisplacementField) -> Result<()> {
        let t = self
            .params
            .get_mut(&format!("{BANK_PREFIX}{id}"))
            .ok_or_else(|| Error::UnknownPair(id.to_string()))?;
        if t.spatial() != field.shape {
            return Err(Error::shape(&t.spatial(), &field.shape));
        }
        t.data = field.data.iter().map(|&v| to_f32(v)).collect();
        Ok(())
    }

    /// Registered pair ids, sorted.
    pub fn bank_ids(&self) -> Vec<&str> {
        self.params
            .keys()
            .filter_map(|k| k.strip_prefix(BANK_PREFIX))
            .collect()
    }

    /// Field for `source -> target` from whichever backend is active.
    pub fn field_for(
        &self,
        source: &Volume,
        source_key: &str,
        target: &Volume,
        target_key: &str,
    ) -> Result<DisplacementField> {
        match &self.descriptor {
            Descriptor::Amortized(_) => self.predict_field(source, target),
            Descriptor::FieldBank { .. } => self.bank_get(&pair_id(source_key, target_key)),
        }
    }
}

fn arch_cout(name: &str, arch: &ArchSpec) -> usize {
    let layer = name.trim_end_matches(".weight");
    if layer == "head" {
        return 3;
    }
    let l: usize = layer[3..].parse().expect("layer index");
    arch.channels[l]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(shape: Shape3, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(shape, |_, _, _| rng.random::<f64>())
    }

    fn small_arch() -> ArchSpec {
        ArchSpec {
            channels: vec![4, 6, 8],
            kernel: 3,
            input_pool: 1,
            head_level: 0,
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn init_is_seeded() {
        let d = Descriptor::Amortized(ArchSpec::default());
        assert_eq!(Model::init(d.clone(), 7).unwrap(), Model::init(d.clone(), 7).unwrap());
        assert_ne!(Model::init(d.clone(), 7).unwrap(), Model::init(d, 8).unwrap());
    }

    #[test]
    fn param_count_matches_shape_arithmetic() {
        // Encoder 2->8, 8->16, 16->32; decoder (32+16)->16; head 16->3.
        let expected = (8 * 2 * 27 + 8)
            + (16 * 8 * 27 + 16)
            + (32 * 16 * 27 + 32)
            + (16 * 48 * 27 + 16)
            + (3 * 16 * 27 + 3);
        let m = Model::init(Descriptor::Amortized(ArchSpec::default()), 0).unwrap();
        assert_eq!(m.param_count(), expected);
        assert_eq!(ArchSpec::default().param_count(), expected);
    }

    #[test]
    fn fresh_model_predicts_zero() {
        for arch in [ArchSpec::default(), small_arch()] {
            let m = Model::init(Descriptor::Amortized(arch), 3).unwrap();
            let u = m.predict_field(&noise([16, 16, 16], 1), &noise([16, 16, 16], 2)).unwrap();
            assert_eq!(u.shape, [16, 16, 16]);
            assert_eq!(u.data.len(), 3 * 16 * 16 * 16);
            assert!(u.is_zero());
        }
    }

    #[test]
    fn prediction_checks_grid() {
        let m = Model::init(Descriptor::Amortized(ArchSpec::default()), 3).unwrap();
        assert!(m.predict_field(&noise([12, 16, 16], 1), &noise([12, 16, 16], 2)).is_err());
        assert!(m.predict_field(&noise([16, 16, 16], 1), &noise([8, 16, 16], 2)).is_err());
    }

    #[test]
    fn invalid_descriptors_rejected() {
        let mut a = ArchSpec::default();
        a.kernel = 2;
        assert!(Model::init(Descriptor::Amortized(a), 0).is_err());
        let mut a = ArchSpec::default();
        a.head_level = 3;
        assert!(Model::init(Descriptor::Amortized(a), 0).is_err());
        assert!(Model::init(Descriptor::FieldBank { shape: [0, 4, 4] }, 0).is_err());
    }

    #[test]
    fn bank_basics() {
        let mut m = Model::init(Descriptor::FieldBank { shape: [4, 4, 4] }, 0).unwrap();
        assert!(matches!(m.bank_get("a->b"), Err(Error::UnknownPair(_))));
        m.bank_register("a->b").unwrap();
        assert!(m.bank_get("a->b").unwrap().is_zero());
        let f = DisplacementField::from_fn([4, 4, 4], |x, _, _| [x as f64 * 0.25, 0.0, 0.0]);
        m.bank_update("a->b", &f).unwrap();
        assert_eq!(m.bank_get("a->b").unwrap(), f);
        assert!(m.bank_update("c->d", &f).is_err());
        assert_eq!(m.bank_ids(), vec!["a->b"]);
    }
}
