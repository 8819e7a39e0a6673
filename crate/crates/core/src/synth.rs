//! Procedural bi-modal subjects with ground-truth correspondence.
//!
//! A shared template anatomy (nested smooth blobs) is deformed per subject by
//! a random diffeomorphism `psi_i = exp(v_i)`. Each subject is rendered in two
//! modalities: `A` with monotone class intensities and `B` with a permuted,
//! partly degenerate profile. The two modalities of one subject are aligned
//! by construction, and the ground-truth field taking subject `i` onto
//! subject `j` is `psi_i^-1 o psi_j`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::gaussian_smooth;
use crate::error::{Error, Result};
use crate::eval::{self, EvalSummary};
use crate::grid::{coords, normalize_intensity, voxel_count, LabelVolume, Shape3, Volume};
use crate::io::{load_labels, load_volume, save_labels, save_volume};
use crate::model::to_f32;
use crate::transform::{
    compose, integrate_svf, load_field, save_field, warp_image, DisplacementField,
    Interp,
};

pub const MANIFEST_VERSION: u32 = 1;
pub const MODALITY_A: &str = "A";
pub const MODALITY_B: &str = "B";

/// Shape statistics of the generated anatomy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnatomyStyle {
    /// Fraction of the volume taken by the outermost structure.
    pub outer_fraction: f64,
    /// Fraction of each structure taken by the next one inside it.
    pub nested_fraction: f64,
    /// Width of the boundary perturbation noise, in voxels.
    pub sigma: f64,
    /// Weight of the boundary noise against the radial falloff.
    pub roughness: f64,
    /// Maximum centre offset of inner structures, as a fraction of the grid.
    pub offset: f64,
}

impl Default for AnatomyStyle {
    fn default() -> Self {
        AnatomyStyle {
            outer_fraction: 0.55,
            nested_fraction: 0.55,
            sigma: 5.0,
            roughness: 0.1,
            offset: 0.3,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_ANATOMY: u64 = 1;
const TAG_WARP: u64 = 2;
const TAG_RENDER_A: u64 = 3;
const TAG_RENDER_B: u64 = 4;
const TAG_PAIRS: u64 = 5;

/// Gaussian-smoothed white noise rescaled to unit standard deviation.
///
/// The noise is drawn on a grid padded by the kernel radius and cropped, so
/// the statistics near the faces match the interior.
fn smooth_noise(rng: &mut ChaCha8Rng, shape: Shape3, sigma: f64) -> Vec<f64> {
    let pad = (3.0 * sigma).ceil() as usize;
    let big = shape.map(|n| n + 2 * pad);
    let mut full: Vec<f64> = (0..voxel_count(big)).map(|_| rng.sample(StandardNormal)).collect();
    gaussian_smooth(&mut full, big, sigma);
    let v: Vec<f64> = (0..voxel_count(shape))
        .map(|i| {
            let [x, y, z] = coords(shape, i);
            full[(x + pad) + big[0] * ((y + pad) + big[1] * (z + pad))]
        })
        .collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    v.iter().map(|x| (x - mean) / sd.max(1e-12)).collect()
}

/// Nested level-set anatomy. Structure `k` is the set where `levels[k - 1]`
/// is non-negative, and each level is bounded above by the one before it, so
/// structures stay nested under any monotone resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Anatomy {
    pub shape: Shape3,
    pub levels: Vec<Vec<f64>>,
}

impl Anatomy {
    pub fn n_classes(&self) -> u16 {
        self.levels.len() as u16 + 1
    }

    fn classify(&self, levels: &[&[f64]]) -> Result<LabelVolume> {
        let n = voxel_count(self.shape);
        let labels = (0..n)
            .map(|i| levels.iter().take_while(|l| l[i] >= 0.0).count() as u16)
            .collect();
        LabelVolume::new(self.shape, labels, self.n_classes())
    }

    /// Labels on the template grid.
    pub fn labels(&self) -> Result<LabelVolume> {
        let levels: Vec<&[f64]> = self.levels.iter().map(|l| l.as_slice()).collect();
        self.classify(&levels)
    }

    /// Labels of the anatomy pulled back through `field`. Levels are
    /// resampled linearly before thresholding, so boundaries keep sub-voxel
    /// position instead of snapping to the template grid.
    pub fn warped_labels(&self, field: &DisplacementField) -> Result<LabelVolume> {
        let warped = self
            .levels
            .iter()
            .map(|l| {
                let v = Volume::new(self.shape, [1.0; 3], l.clone(), "")?;
                Ok(warp_image(&v, field, Interp::Linear)?.data)
            })
            .collect::<Result<Vec<_>>>()?;
        let levels: Vec<&[f64]> = warped.iter().map(|l| l.as_slice()).collect();
        self.classify(&levels)
    }
}

/// Background plus `n_structs` nested smooth blobs; a voxel takes the
/// innermost structure containing it.
pub fn gen_anatomy(seed: u64, shape: Shape3, n_structs: usize) -> Result<LabelVolume> {
    gen_anatomy_levels(seed, shape, n_structs, &AnatomyStyle::default())?.labels()
}

pub fn gen_anatomy_levels(
    seed: u64,
    shape: Shape3,
    n_structs: usize,
    style: &AnatomyStyle,
) -> Result<Anatomy> {
    if n_structs < 3 {
        return Err(Error::InvalidArgument(format!(
            "anatomy needs at least 3 structures, got {n_structs}"
        )));
    }
    if shape.iter().any(|&n| n < 16) {
        return Err(Error::InvalidArgument(format!(
            "anatomy grid must be at least 16 per axis, got {shape:?}"
        )));
    }
    if n_structs >= u16::MAX as usize {
        return Err(Error::InvalidArgument("too many structures".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_ANATOMY, 0));
    let n = voxel_count(shape);
    let half = shape.map(|s| (s as f64 - 1.0) / 2.0);
    // Keep the outer structure two voxels clear of the faces.
    let mut parent: Vec<f64> = (0..n)
        .map(|i| {
            let c = coords(shape, i);
            let inside = (0..3).all(|a| c[a] >= 2 && c[a] + 2 < shape[a]);
            if inside { f64::INFINITY } else { -1.0 }
        })
        .collect();
    let mut levels = Vec::with_capacity(n_structs);
    let mut size = ((style.outer_fraction * n as f64).round() as usize).max(1);
    for k in 1..=n_structs {
        let noise = smooth_noise(&mut rng, shape, style.sigma);
        // Inner structures drift off-centre so neighbours are not concentric.
        let offset: [f64; 3] = if k == 1 {
            [0.0; 3]
        } else {
            std::array::from_fn(|a| rng.random_range(-style.offset..=style.offset) * shape[a] as f64)
        };
        let score: Vec<f64> = (0..n)
            .map(|i| {
                let c = coords(shape, i);
                let r2: f64 = (0..3)
                    .map(|a| ((c[a] as f64 - half[a] - offset[a]) / half[a]).powi(2))
                    .sum();
                style.roughness * noise[i] - r2
            })
            .collect();
        let mut inside: Vec<f64> = (0..n).filter(|&i| parent[i] >= 0.0).map(|i| score[i]).collect();
        if inside.is_empty() {
            break;
        }
        inside.sort_by(|a, b| b.total_cmp(a));
        let take = size.min(inside.len());
        // Threshold halfway between the last voxel in and the first voxel out.
        let threshold = match inside.get(take) {
            Some(&out) => 0.5 * (inside[take - 1] + out),
            None => inside[take - 1] - 1e-3,
        };
        let level: Vec<f64> = (0..n).map(|i| (score[i] - threshold).min(parent[i])).collect();
        parent = level.clone();
        levels.push(level);
        size = ((style.nested_fraction * size as f64).round() as usize).max(1);
    }
    let anatomy = Anatomy { shape, levels };
    let counts = anatomy.labels()?.class_counts();
    if anatomy.levels.len() < n_structs || counts.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "anatomy came out with an empty class for seed {seed}"
        )));
    }
    Ok(anatomy)
}

/// Monotone class means for modality `A`.
pub fn default_profile_a(n_classes: usize) -> Vec<f64> {
    let d = (n_classes.max(2) - 1) as f64;
    (0..n_classes).map(|k| k as f64 / d).collect()
}

/// Non-monotone class means for modality `B`: the outer two boundaries
/// invert their contrast and the two innermost classes of the default
/// five-class anatomy are indistinguishable.
pub fn default_profile_b(n_classes: usize) -> Vec<f64> {
    const BASE: [f64; 5] = [0.55, 0.15, 0.9, 0.3, 0.3];
    const EXTRA: [f64; 3] = [0.7, 0.1, 0.45];
    (0..n_classes)
        .map(|k| if k < 5 { BASE[k] } else { EXTRA[(k - 5) % 3] })
        .collect()
}

/// `profile[class] * bias + noise`, then normalized to `[0, 1]`.
pub fn render_modality(
    labels: &LabelVolume,
    profile: &[f64],
    noise_sd: f64,
    bias_amplitude: f64,
    seed: u64,
) -> Result<Volume> {
    if profile.len() != labels.n_classes as usize {
        return Err(Error::InvalidArgument(format!(
            "profile has {} entries for {} classes",
            profile.len(),
            labels.n_classes
        )));
    }
    if !(noise_sd >= 0.0 && bias_amplitude >= 0.0) {
        return Err(Error::InvalidArgument(
            "noise_sd and bias_amplitude must be non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias = if bias_amplitude > 0.0 {
        smooth_noise(&mut rng, labels.shape, 6.0)
    } else {
        vec![0.0; labels.data.len()]
    };
    let data = labels
        .data
        .iter()
        .zip(&bias)
        .map(|(&c, &b)| {
            let noise: f64 = if noise_sd > 0.0 {
                noise_sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            profile[c as usize] * (1.0 + bias_amplitude * b.clamp(-2.0, 2.0) / 2.0) + noise
        })
        .collect();
    let vol = Volume::new(labels.shape, [1.0; 3], data, "")?;
    normalize_intensity(&vol, 100.0)
}

/// Grid extent: a cube side or explicit `[nx, ny, nz]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSize {
    Cube(usize),
    Dims(Shape3),
}

impl GridSize {
    pub fn dims(self) -> Shape3 {
        match self {
            GridSize::Cube(n) => [n; 3],
            GridSize::Dims(d) => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub shape: GridSize,
    /// Millimetres per voxel, written to file headers only.
    pub spacing: f64,
    pub n_structs: usize,
    pub seed: u64,
    /// Peak velocity magnitude of a subject warp, in voxels.
    pub warp_magnitude: f64,
    /// Gaussian width of the velocity field, in voxels.
    pub warp_smoothness: f64,
    pub svf_steps: u32,
    pub noise_sd: f64,
    pub bias_amplitude: f64,
    pub clip_percentile: f64,
    pub profile_a: Option<Vec<f64>>,
    pub profile_b: Option<Vec<f64>>,
    pub n_eval_pairs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 16,
            n_test: 4,
            shape: GridSize::Cube(32),
            spacing: 1.5,
            n_structs: 4,
            seed: 0,
            warp_magnitude: 5.0,
            warp_smoothness: 6.0,
            svf_steps: 7,
            noise_sd: 0.04,
            bias_amplitude: 0.1,
            clip_percentile: 99.9,
            profile_a: None,
            profile_b: None,
            n_eval_pairs: 20,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("data: {m}")));
        if self.n_train < 2 || self.n_test < 2 {
            return bad(format!(
                "n_train and n_test must be at least 2, got {} and {}",
                self.n_train, self.n_test
            ));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return bad(format!("spacing must be positive, got {}", self.spacing));
        }
        if !(self.warp_magnitude >= 0.0 && self.warp_smoothness > 0.0) {
            return bad("warp_magnitude must be >= 0 and warp_smoothness > 0".into());
        }
        if self.svf_steps == 0 || self.svf_steps > 20 {
            return bad(format!("svf_steps must lie in 1..=20, got {}", self.svf_steps));
        }
        if !(self.clip_percentile > 0.0 && self.clip_percentile <= 100.0) {
            return bad(format!("clip_percentile must lie in (0, 100], got {}", self.clip_percentile));
        }
        if self.n_eval_pairs == 0 {
            return bad("n_eval_pairs must be positive".into());
        }
        let n_classes = self.n_structs + 1;
        for (name, p) in [("profile_a", &self.profile_a), ("profile_b", &self.profile_b)] {
            if let Some(p) = p {
                if p.len() != n_classes {
                    return bad(format!("{name} needs {n_classes} entries, got {}", p.len()));
                }
            }
        }
        Ok(())
    }

    pub fn profiles(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_structs + 1;
        (
            self.profile_a.clone().unwrap_or_else(|| default_profile_a(n)),
            self.profile_b.clone().unwrap_or_else(|| default_profile_b(n)),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One subject's images and labels, as used for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    pub split: Split,
    pub a: Volume,
    pub b: Volume,
    pub labels: LabelVolume,
}

impl SubjectData {
    pub fn volume(&self, modality: &str) -> Option<&Volume> {
        match modality {
            MODALITY_A => Some(&self.a),
            MODALITY_B => Some(&self.b),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub data: SubjectData,
    /// `psi`: template -> subject pull-back.
    pub warp: DisplacementField,
    pub warp_inv: DisplacementField,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub template: LabelVolume,
    pub subjects: Vec<Subject>,
}

pub fn subject_id(index: usize) -> String {
    format!("s{index:03}")
}

fn random_velocity(seed: u64, shape: Shape3, cfg: &SynthConfig) -> DisplacementField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comps: Vec<Vec<f64>> = (0..3)
        .map(|_| smooth_noise(&mut rng, shape, cfg.warp_smoothness))
        .collect();
    let n = voxel_count(shape);
    let peak = (0..n)
        .map(|i| (0..3).map(|c| comps[c][i].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let k = if peak > 0.0 { cfg.warp_magnitude / peak } else { 0.0 };
    DisplacementField::from_fn(shape, |x, y, z| {
        let i = x + shape[0] * (y + shape[1] * z);
        [k * comps[0][i], k * comps[1][i], k * comps[2][i]]
    })
}

fn quantize(mut v: Volume) -> Volume {
    v.data.iter_mut().for_each(|x| *x = to_f32(*x));
    v
}

fn make_subject(
    cfg: &SynthConfig,
    anatomy: &Anatomy,
    template: &LabelVolume,
    index: usize,
    split: Split,
) -> Result<Subject> {
    let shape = template.shape;
    let seed = derive_seed(cfg.seed, TAG_WARP, index as u64);
    let v = random_velocity(seed, shape, cfg);
    let warp = integrate_svf(&v, cfg.svf_steps)?;
    let warp_inv = integrate_svf(&v.scaled(-1.0), cfg.svf_steps)?;
    let labels = anatomy.warped_labels(&warp)?;
    let (pa, pb) = cfg.profiles();
    let render = |profile: &[f64], tag: u64, modality: &str| -> Result<Volume> {
        let rendered = render_modality(
            template,
            profile,
            cfg.noise_sd,
            cfg.bias_amplitude,
            derive_seed(cfg.seed, tag, index as u64),
        )?;
        let warped = warp_image(&rendered, &warp, Interp::Linear)?;
        let norm = normalize_intensity(&warped, cfg.clip_percentile)?;
        // Stored as float32 on disk; keep the in-memory copy identical.
        Ok(quantize(norm)
            .with_modality(modality)
            .with_spacing([cfg.spacing; 3]))
    };
    let a = render(&pa, TAG_RENDER_A, MODALITY_A)?;
    let b = render(&pb, TAG_RENDER_B, MODALITY_B)?;
    Ok(Subject {
        data: SubjectData {
            id: subject_id(index),
            split,
            a,
            b,
            labels,
        },
        warp,
        warp_inv,
        seed,
    })
}

/// Builds the whole dataset in memory.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let shape = cfg.shape.dims();
    let anatomy = gen_anatomy_levels(cfg.seed, shape, cfg.n_structs, &AnatomyStyle::default())?;
    let template = anatomy.labels()?;
    let mut subjects = Vec::with_capacity(cfg.n_train + cfg.n_test);
    for i in 0..cfg.n_train + cfg.n_test {
        let split = if i < cfg.n_train { Split::Train } else { Split::Test };
        subjects.push(make_subject(cfg, &anatomy, &template, i, split)?);
    }
    Ok(Dataset {
        config: cfg.clone(),
        template,
        subjects,
    })
}

/// Ground-truth field registering subject `source` onto subject `target`.
pub fn gt_pair_field(source: &Subject, target: &Subject) -> Result<DisplacementField> {
    compose(&source.warp_inv, &target.warp)
}

/// Ordered (source, target) subject pair: source in modality `A`, target in
/// modality `B`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub source: String,
    pub target: String,
}

/// All ordered cross-subject pairs of `ids`, or a seeded subset of `limit`.
pub fn select_pairs(ids: &[String], limit: usize, seed: u64) -> Vec<EvalPair> {
    let mut pairs = Vec::new();
    for s in ids {
        for t in ids {
            if s != t {
                pairs.push(EvalPair {
                    source: s.clone(),
                    target: t.clone(),
                });
            }
        }
    }
    if pairs.len() > limit {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_PAIRS, 0));
        pairs.shuffle(&mut rng);
        pairs.truncate(limit);
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Modality tag -> volume path.
    pub volumes: BTreeMap<String, String>,
    pub labels: String,
    pub warp: String,
    pub warp_inv: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub grid_shape: Shape3,
    pub spacing: [f64; 3],
    pub n_classes: u16,
    pub config: SynthConfig,
    pub template_labels: String,
    pub entries: Vec<ManifestEntry>,
    pub eval_pairs: Vec<EvalPair>,
    /// Metrics of the identity transform over `eval_pairs`.
    pub initial_metrics: EvalSummary,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    /// Reads a manifest given its path or the dataset directory.
    pub fn load(path: impl AsRef<Path>) -> Result<(Manifest, PathBuf)> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(MANIFEST_FILE);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path,
                reason: format!("unsupported manifest version {}", m.version),
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, root))
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.clone())
            .collect()
    }

    /// Loads images and labels of every subject in `split` (all when `None`).
    pub fn load_subjects(&self, root: &Path, split: Option<Split>) -> Result<Vec<SubjectData>> {
        let mut out = Vec::new();
        for e in &self.entries {
            if split.is_some_and(|s| s != e.split) {
                continue;
            }
            let vol = |m: &str| -> Result<Volume> {
                let rel = e.volumes.get(m).ok_or_else(|| {
                    Error::Config(format!("manifest entry {} has no modality {m}", e.id))
                })?;
                Ok(load_volume(root.join(rel))?.with_modality(m))
            };
            let data = SubjectData {
                id: e.id.clone(),
                split: e.split,
                a: vol(MODALITY_A)?,
                b: vol(MODALITY_B)?,
                labels: load_labels(root.join(&e.labels))?,
            };
            if data.a.shape != self.grid_shape || data.b.shape != self.grid_shape {
                return Err(Error::shape(&data.a.shape, &self.grid_shape));
            }
            out.push(data);
        }
        Ok(out)
    }

    pub fn load_warps(&self, root: &Path, id: &str) -> Result<(DisplacementField, DisplacementField)> {
        let e = self
            .entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Config(format!("subject {id} not in manifest")))?;
        Ok((load_field(root.join(&e.warp))?, load_field(root.join(&e.warp_inv))?))
    }
}

/// Generates the dataset and writes it under `out_dir`:
///
/// ```text
/// manifest.json
/// template_labels.nii.gz
/// subjects/<id>_A.nii.gz, <id>_B.nii.gz, <id>_labels.nii.gz,
///          <id>_warp.nii.gz, <id>_warp_inv.nii.gz
/// ```
///
/// An existing manifest is only replaced when `overwrite` is set.
pub fn gen_dataset(cfg: &SynthConfig, out_dir: &Path, overwrite: bool) -> Result<Manifest> {
    cfg.validate()?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !overwrite {
        return Err(Error::Config(format!(
            "{} already exists; pass the overwrite flag to replace it",
            manifest_path.display()
        )));
    }
    match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
            ))
        }
        _ => {}
    }
    let sub_dir = out_dir.join("subjects");
    fs::create_dir_all(&sub_dir).map_err(|e| Error::io(&sub_dir, e))?;

    let ds = generate(cfg)?;
    let template_rel = "template_labels.nii.gz".to_string();
    save_labels(&ds.template, out_dir.join(&template_rel))?;
    let mut entries = Vec::new();
    for s in &ds.subjects {
        let id = &s.data.id;
        let rel = |suffix: &str| format!("subjects/{id}_{suffix}.nii.gz");
        let mut volumes = BTreeMap::new();
        for (m, v) in [(MODALITY_A, &s.data.a), (MODALITY_B, &s.data.b)] {
            let r = rel(m);
            save_volume(v, out_dir.join(&r))?;
            volumes.insert(m.to_string(), r);
        }
        let entry = ManifestEntry {
            id: id.clone(),
            split: s.data.split,
            volumes,
            labels: rel("labels"),
            warp: rel("warp"),
            warp_inv: rel("warp_inv"),
            seed: s.seed,
        };
        save_labels(&s.data.labels, out_dir.join(&entry.labels))?;
        save_field(&s.warp, out_dir.join(&entry.warp))?;
        save_field(&s.warp_inv, out_dir.join(&entry.warp_inv))?;
        entries.push(entry);
    }

    let test: Vec<&SubjectData> = ds
        .subjects
        .iter()
        .map(|s| &s.data)
        .filter(|d| d.split == Split::Test)
        .collect();
    let ids: Vec<String> = test.iter().map(|d| d.id.clone()).collect();
    let eval_pairs = select_pairs(&ids, cfg.n_eval_pairs, cfg.seed);
    let initial_metrics = eval::identity_metrics(&test, &eval_pairs)?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        grid_shape: ds.template.shape,
        spacing: [cfg.spacing; 3],
        n_classes: ds.template.n_classes,
        config: cfg.clone(),
        template_labels: template_rel,
        entries,
        eval_pairs,
        initial_metrics,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}
