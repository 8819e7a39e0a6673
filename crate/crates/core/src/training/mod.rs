//! Quad sampling, optimization and the training loop for the three regimes:
//!
//! * `baseline`: one multi-modal pair per sample, similarity taken across
//!   modalities plus a smoothness term;
//! * `m2m`: a source/target pair plus a bridge pair closing the cycle
//!   `S -> T -> S' -> T' -> S`, scored only by mono-modal similarity;
//! * `m2m_semi`: like `m2m`, but some bridges are pre-aligned (`S'` and `T'`
//!   from one subject), which removes one predicted field from the cycle.

mod adam;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphError, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalSummary};
use crate::model::{
    image_key, load_checkpoint, pair_id, save_checkpoint, ArchSpec, Bindings, Checkpoint,
    Descriptor, Endpoint, Model,
};
use crate::objectives::{
    diffusion_graph, final_loss_graph, gradcycon_graph, gradicon_graph, m2m_terms_graph,
    sim_loss_graph, volume_tensor, CycleFields, CycleImages, LossBreakdown, LossNodes, Metric,
    RegKind, SimConfig, M2M_TERM_NAMES,
};
use crate::synth::{derive_seed, select_pairs, EvalPair, Manifest, Split, SubjectData, MODALITY_A, MODALITY_B};

pub use adam::{adam_step, AdamConfig, AdamState, Moments};

const TAG_INIT: u64 = 101;
const TAG_STEP: u64 = 102;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Baseline,
    M2m,
    M2mSemi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Amortized,
    FieldBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub metric: Metric,
    pub reg_kind: RegKind,
    /// `None` resolves to 0.5, or 1.5 for the baseline regime.
    pub lambda_reg: Option<f64>,
    /// Weight of the cycle Jacobian penalty; 0 drops the term entirely.
    pub lambda_gcc: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub eval_interval: usize,
    /// Probability that a bridge pair is pre-aligned (`m2m_semi` only).
    pub bridge_aligned_ratio: f64,
    /// Fixed-subset mode: when non-empty, aligned bridges are drawn from
    /// these training subjects only.
    pub aligned_subjects: Vec<String>,
    pub seed: u64,
    pub backend: Backend,
    pub model: ArchSpec,
    /// Dataset manifest, or the directory holding it.
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Continue from the checkpoint in `out_dir` when one exists.
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::M2m,
            metric: Metric::Lncc,
            reg_kind: RegKind::Diffusion,
            lambda_reg: None,
            lambda_gcc: 0.1,
            lr: 1e-2,
            batch_size: 2,
            iterations: 2000,
            eval_interval: 100,
            bridge_aligned_ratio: 0.0,
            aligned_subjects: Vec::new(),
            seed: 0,
            backend: Backend::Amortized,
            model: ArchSpec::default(),
            manifest: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/train"),
            resume: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lambda_reg(&self) -> f64 {
        self.lambda_reg.unwrap_or(match self.regime {
            Regime::Baseline => 1.5,
            _ => 0.5,
        })
    }

    /// Whether samples carry the cycle Jacobian penalty.
    pub fn uses_gcc(&self) -> bool {
        self.regime != Regime::Baseline && self.lambda_gcc > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        for (name, v) in [("lambda_reg", self.lambda_reg()), ("lambda_gcc", self.lambda_gcc)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.bridge_aligned_ratio) {
            return bad(format!(
                "bridge_aligned_ratio must lie in [0, 1], got {}",
                self.bridge_aligned_ratio
            ));
        }
        if self.regime != Regime::M2mSemi
            && (self.bridge_aligned_ratio != 0.0 || !self.aligned_subjects.is_empty())
        {
            return bad("bridge_aligned_ratio and aligned_subjects apply to m2m_semi only".into());
        }
        if self.backend == Backend::Amortized {
            self.model.validate()?;
        }
        Ok(())
    }

    /// Everything that must match for a checkpoint to be resumed. Paths are
    /// left out so that checkpoints depend only on the experiment.
    fn resume_key(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.iterations = 0;
        c.resume = false;
        c.manifest = PathBuf::new();
        c.out_dir = PathBuf::new();
        serde_json::to_value(c).unwrap_or_default()
    }
}

/// A bridge pair `(S', T')`. Indices refer to the training subject list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bridge {
    pub source: usize,
    pub target: usize,
    pub aligned: bool,
}

/// `S` and `S'` are modality `A`, `T` and `T'` modality `B`. The baseline
/// regime carries no bridge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadSample {
    pub source: usize,
    pub target: usize,
    pub bridge: Option<Bridge>,
}

impl QuadSample {
    /// Subject ids in the order `S, T, S', T'`.
    pub fn ids<'a>(&self, subjects: &'a [SubjectData]) -> Vec<&'a str> {
        let mut out = vec![subjects[self.source].id.as_str(), subjects[self.target].id.as_str()];
        if let Some(b) = self.bridge {
            out.push(&subjects[b.source].id);
            out.push(&subjects[b.target].id);
        }
        out
    }

    /// Distinctness rules: `S != T`; an aligned bridge is one subject apart
    /// from `S` and `T`; otherwise all four subjects differ.
    pub fn is_valid(&self) -> bool {
        if self.source == self.target {
            return false;
        }
        match self.bridge {
            None => true,
            Some(b) if b.aligned => {
                b.source == b.target && b.source != self.source && b.source != self.target
            }
            Some(b) => {
                let ids = [self.source, self.target, b.source, b.target];
                (0..4).all(|i| (i + 1..4).all(|j| ids[i] != ids[j]))
            }
        }
    }
}

/// Draws one sample. Every regime consumes the same random stream, so with
/// a ratio of 0 the semi-supervised sampler reproduces the unsupervised one.
///
/// `aligned_pool` restricts aligned bridge subjects when non-empty.
pub fn sample_quad(
    n_subjects: usize,
    rng: &mut impl Rng,
    regime: Regime,
    bridge_aligned_ratio: f64,
    aligned_pool: &[usize],
) -> Result<QuadSample> {
    let need = if regime == Regime::Baseline { 2 } else { 4 };
    if n_subjects < need {
        return Err(Error::Config(format!(
            "{regime:?} sampling needs at least {need} training subjects, got {n_subjects}"
        )));
    }
    let coin: f64 = rng.random();
    if regime == Regime::Baseline {
        let idx = sample(rng, n_subjects, 2);
        return Ok(QuadSample {
            source: idx.index(0),
            target: idx.index(1),
            bridge: None,
        });
    }
    let aligned = regime == Regime::M2mSemi && coin < bridge_aligned_ratio;
    if aligned && !aligned_pool.is_empty() {
        let b = aligned_pool[rng.random_range(0..aligned_pool.len())];
        // Two distinct subjects from everything except `b`.
        let idx = sample(rng, n_subjects - 1, 2);
        let skip = |i: usize| if i >= b { i + 1 } else { i };
        return Ok(QuadSample {
            source: skip(idx.index(0)),
            target: skip(idx.index(1)),
            bridge: Some(Bridge {
                source: b,
                target: b,
                aligned: true,
            }),
        });
    }
    let idx = sample(rng, n_subjects, 4);
    let bridge = if aligned {
        Bridge {
            source: idx.index(2),
            target: idx.index(2),
            aligned: true,
        }
    } else {
        Bridge {
            source: idx.index(2),
            target: idx.index(3),
            aligned: false,
        }
    };
    Ok(QuadSample {
        source: idx.index(0),
        target: idx.index(1),
        bridge: Some(bridge),
    })
}

/// Work done by one step, summed over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepCounters {
    pub predicted_fields: usize,
    pub gcc_terms: usize,
    pub bridge_terms: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Per-term means over the batch.
    pub loss: LossBreakdown,
    pub counters: StepCounters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct ImageRef {
    subject: usize,
    modality: &'static str,
}

type Edge = (ImageRef, ImageRef);

fn a(subject: usize) -> ImageRef {
    ImageRef {
        subject,
        modality: MODALITY_A,
    }
}

fn b(subject: usize) -> ImageRef {
    ImageRef {
        subject,
        modality: MODALITY_B,
    }
}

/// Holds the model, optimizer state and training subjects.
#[derive(Debug)]
pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    subjects: &'d [SubjectData],
    aligned_pool: Vec<usize>,
    sim: SimConfig,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, subjects: &'d [SubjectData], model: Model) -> Result<Self> {
        config.validate()?;
        let shape = subjects
            .first()
            .ok_or_else(|| Error::Config("no training subjects".into()))?
            .a
            .shape;
        if subjects.iter().any(|s| s.a.shape != shape || s.b.shape != shape) {
            return Err(Error::Config("training volumes do not share one grid".into()));
        }
        let aligned_pool = config
            .aligned_subjects
            .iter()
            .map(|id| {
                subjects
                    .iter()
                    .position(|s| &s.id == id)
                    .ok_or_else(|| Error::Config(format!("aligned subject {id} is not a training subject")))
            })
            .collect::<Result<Vec<_>>>()?;
        let sim = SimConfig::with_metric(config.metric);
        Ok(Trainer {
            config,
            model,
            adam: AdamState::default(),
            subjects,
            aligned_pool,
            sim,
        })
    }

    pub fn subjects(&self) -> &[SubjectData] {
        self.subjects
    }

    /// The batch for `step`, drawn from a stream that depends only on the
    /// seed and the step index.
    pub fn sample_batch(&self, step: u64) -> Result<Vec<QuadSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, TAG_STEP, step));
        (0..self.config.batch_size)
            .map(|_| {
                sample_quad(
                    self.subjects.len(),
                    &mut rng,
                    self.config.regime,
                    self.config.bridge_aligned_ratio,
                    &self.aligned_pool,
                )
            })
            .collect()
    }

    /// Predicted edges of one sample, in prediction order.
    fn edges(&self, q: &QuadSample) -> Vec<Edge> {
        let (s, t) = (a(q.source), b(q.target));
        let gradicon = self.config.reg_kind == RegKind::Gradicon;
        let mut out = vec![(s, t)];
        if let Some(br) = q.bridge {
            let (s2, t2) = (a(br.source), b(br.target));
            out.push((t, s2));
            if !br.aligned {
                out.push((s2, t2));
            }
            out.push((t2, s));
            if gradicon && !br.aligned {
                out.push((t2, s2));
            }
        }
        if gradicon {
            out.push((t, s));
        }
        out
    }

    fn key(&self, r: ImageRef) -> String {
        image_key(&self.subjects[r.subject].id, r.modality)
    }

    fn image(&self, r: ImageRef) -> Tensor {
        let s = &self.subjects[r.subject];
        volume_tensor(if r.modality == MODALITY_A { &s.a } else { &s.b })
    }

    fn register_edges(&mut self, edges: &[Edge]) -> Result<()> {
        if matches!(self.model.descriptor, Descriptor::FieldBank { .. }) {
            for &(src, tgt) in edges {
                let id = pair_id(&self.key(src), &self.key(tgt));
                self.model.bank_register(&id)?;
            }
        }
        Ok(())
    }

    /// Loss graph of one sample.
    fn build(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        q: &QuadSample,
        edges: &[Edge],
        counters: &mut StepCounters,
    ) -> Result<LossNodes> {
        let mut images: BTreeMap<ImageRef, Var> = BTreeMap::new();
        let mut fields: BTreeMap<Edge, Var> = BTreeMap::new();
        for &(src, tgt) in edges {
            for r in [src, tgt] {
                if !images.contains_key(&r) {
                    let v = g.constant(self.image(r));
                    images.insert(r, v);
                }
            }
            let (ks, kt) = (self.key(src), self.key(tgt));
            let u = self.model.predict_graph(
                g,
                binds,
                Endpoint {
                    image: images[&src],
                    key: &ks,
                },
                Endpoint {
                    image: images[&tgt],
                    key: &kt,
                },
            )?;
            counters.predicted_fields += 1;
            fields.insert((src, tgt), u);
        }
        let (s, t) = (a(q.source), b(q.target));
        let st = fields[&(s, t)];
        let gradicon = self.config.reg_kind == RegKind::Gradicon;

        let Some(br) = q.bridge else {
            let moved = g.warp_linear(images[&s], st)?;
            let sim = sim_loss_graph(g, moved, images[&t], &self.sim)?;
            let reg = if gradicon {
                gradicon_graph(g, st, fields[&(t, s)])?
            } else {
                diffusion_graph(g, st)?
            };
            return final_loss_graph(
                g,
                vec![("sim".to_string(), sim)],
                Some(reg),
                None,
                self.config.lambda_reg(),
                0.0,
            );
        };

        let (s2, t2) = (a(br.source), b(br.target));
        let cycle = CycleFields {
            st,
            ts2: fields[&(t, s2)],
            s2t2: (!br.aligned).then(|| fields[&(s2, t2)]),
            t2s: fields[&(t2, s)],
        };
        let imgs = CycleImages {
            s: images[&s],
            t: images[&t],
            s2: images[&s2],
            t2: images[&t2],
        };
        let terms = m2m_terms_graph(g, &imgs, &cycle, &self.sim)?;
        counters.bridge_terms += terms.len();
        let sims = M2M_TERM_NAMES
            .iter()
            .zip(terms)
            .map(|(n, v)| (n.to_string(), v))
            .collect();

        let mut regs = Vec::new();
        if gradicon {
            regs.push(gradicon_graph(g, st, fields[&(t, s)])?);
            if let Some(s2t2) = cycle.s2t2 {
                regs.push(gradicon_graph(g, s2t2, fields[&(t2, s2)])?);
            }
        } else {
            for u in [Some(cycle.st), Some(cycle.ts2), cycle.s2t2, Some(cycle.t2s)]
                .into_iter()
                .flatten()
            {
                regs.push(diffusion_graph(g, u)?);
            }
        }
        let mut reg = regs[0];
        for &r in &regs[1..] {
            reg = g.add(reg, r)?;
        }
        let reg = g.scalar_mul(reg, 1.0 / regs.len() as f64);

        let gcc = if self.config.uses_gcc() {
            counters.gcc_terms += 1;
            Some(gradcycon_graph(g, &cycle)?)
        } else {
            None
        };
        final_loss_graph(g, sims, Some(reg), gcc, self.config.lambda_reg(), self.config.lambda_gcc)
    }

    /// Forward and backward over the batch, then one optimizer update with
    /// gradients averaged over the batch.
    pub fn step(&mut self, quads: &[QuadSample]) -> Result<StepReport> {
        if quads.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut counters = StepCounters::default();
        let mut grad_sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut parts = Vec::with_capacity(quads.len());
        for q in quads {
            if !q.is_valid() {
                return Err(Error::InvalidArgument(format!("invalid sample {q:?}")));
            }
            let edges = self.edges(q);
            self.register_edges(&edges)?;
            let mut g = Graph::new();
            let mut binds = Bindings::new();
            let nodes = self.build(&mut g, &mut binds, q, &edges, &mut counters)?;
            forward_terms(&mut g, &nodes)?;
            let bd = nodes.breakdown(&g)?;
            check_finite(&bd)?;
            let mut grads = g.backward(nodes.total)?;
            for (name, v) in binds.iter() {
                if let Some(gr) = grads.take(v) {
                    match grad_sum.get_mut(name) {
                        Some(acc) => acc.add_assign(&gr),
                        None => {
                            grad_sum.insert(name.to_string(), gr);
                        }
                    }
                }
            }
            parts.push(bd);
        }
        let k = 1.0 / quads.len() as f64;
        for gr in grad_sum.values_mut() {
            gr.data.iter_mut().for_each(|v| *v *= k);
        }
        adam_step(
            &mut self.model.params,
            &grad_sum,
            &mut self.adam,
            &AdamConfig::with_lr(self.config.lr),
        )?;
        Ok(StepReport {
            loss: mean_breakdown(&parts),
            counters,
        })
    }

    /// Loss of one sample without updating anything.
    pub fn loss(&mut self, q: &QuadSample) -> Result<LossBreakdown> {
        let edges = self.edges(q);
        self.register_edges(&edges)?;
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let nodes = self.build(&mut g, &mut binds, q, &edges, &mut StepCounters::default())?;
        forward_terms(&mut g, &nodes)?;
        nodes.breakdown(&g)
    }
}

/// Evaluates the loss term by term so a non-finite value is reported
/// against the first term that reaches it.
fn forward_terms(g: &mut Graph, nodes: &LossNodes) -> Result<()> {
    let order = nodes
        .sim_terms
        .iter()
        .map(|(n, v)| (n.as_str(), *v))
        .chain(nodes.reg.map(|v| ("reg", v)))
        .chain(nodes.gcc.map(|v| ("gcc", v)))
        .chain([("total", nodes.total)]);
    for (name, v) in order {
        g.evaluate(v).map_err(|e| match e {
            GraphError::NonFinite { .. } => Error::NonFinite(format!("loss term `{name}` ({e})")),
            other => other.into(),
        })?;
    }
    Ok(())
}

fn check_finite(bd: &LossBreakdown) -> Result<()> {
    for (name, v) in bd
        .sim_terms
        .iter()
        .map(|(n, v)| (n.as_str(), *v))
        .chain([("reg", bd.reg_term), ("gcc", bd.gcc_term), ("total", bd.total)])
    {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term `{name}`")));
        }
    }
    Ok(())
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let k = 1.0 / parts.len() as f64;
    let mean = |f: &dyn Fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() * k;
    LossBreakdown {
        sim_terms: parts[0]
            .sim_terms
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), mean(&|p| p.sim_terms[i].1)))
            .collect(),
        reg_term: mean(&|p| p.reg_term),
        gcc_term: mean(&|p| p.gcc_term),
        total: mean(&|p| p.total),
        lambda_reg: parts[0].lambda_reg,
        lambda_gcc: parts[0].lambda_gcc,
    }
}

/// One row of the metrics CSV. Loss columns are means over the steps since
/// the previous row, and NaN on the step-0 row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_sim: f64,
    pub loss_reg: f64,
    pub loss_gcc: f64,
    pub eval_dsc: f64,
    pub eval_negjac: f64,
    pub eval_lncc_mm: f64,
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn append_metrics(path: &Path, row: &MetricsRow) -> Result<()> {
    let file = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.serialize(row).map_err(|e| csv_error(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Subjects and pairs scored at every evaluation.
///
/// The amortized backend is scored on the test split. A field bank only
/// holds fields for pairs it has trained on, so it is scored on training
/// pairs instead.
pub struct EvalSet {
    pub subjects: Vec<SubjectData>,
    pub pairs: Vec<EvalPair>,
}

impl EvalSet {
    pub fn evaluate(&self, model: &Model) -> Result<EvalSummary> {
        let refs: Vec<&SubjectData> = self.subjects.iter().collect();
        evaluate_model(model, &refs, &self.pairs)
    }
}

fn bank_eval_pairs(manifest: &Manifest) -> Vec<EvalPair> {
    let ids = manifest.ids(Split::Train);
    select_pairs(&ids, manifest.config.n_eval_pairs, manifest.config.seed)
}

/// Pairs a trained model of `backend` is scored on: the cached test pairs
/// for amortized models, a seeded subset of training pairs for a field bank.
pub fn eval_set(manifest: &Manifest, root: &Path, backend: Backend) -> Result<EvalSet> {
    Ok(match backend {
        Backend::Amortized => EvalSet {
            subjects: manifest.load_subjects(root, Some(Split::Test))?,
            pairs: manifest.eval_pairs.clone(),
        },
        Backend::FieldBank => EvalSet {
            subjects: manifest.load_subjects(root, Some(Split::Train))?,
            pairs: bank_eval_pairs(manifest),
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub model: Model,
    pub metrics_csv: PathBuf,
    pub checkpoint: PathBuf,
    /// Steps run by this invocation (excluding resumed ones).
    pub steps_run: usize,
}

fn save_state(
    path: &Path,
    trainer: &Trainer,
    step: usize,
    resume_key: &serde_json::Value,
) -> Result<()> {
    let ckpt = Checkpoint {
        model: trainer.model.clone(),
        meta: serde_json::json!({ "step": step, "config": resume_key }),
        state: trainer.adam.to_blobs(),
    };
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("ckpt.tmp");
    save_checkpoint(&ckpt, &tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs training as configured, writing `metrics.csv` and `checkpoint.ckpt`
/// under `out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (manifest, root) = Manifest::load(&cfg.manifest)?;
    let train_subjects = manifest.load_subjects(&root, Some(Split::Train))?;
    let descriptor = match cfg.backend {
        Backend::Amortized => Descriptor::Amortized(cfg.model.clone()),
        Backend::FieldBank => Descriptor::FieldBank {
            shape: manifest.grid_shape,
        },
    };
    let eval_set = match cfg.backend {
        Backend::Amortized => eval_set(&manifest, &root, cfg.backend)?,
        Backend::FieldBank => EvalSet {
            subjects: train_subjects.clone(),
            pairs: bank_eval_pairs(&manifest),
        },
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let csv_path = cfg.out_dir.join(METRICS_FILE);
    let ckpt_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let resume_key = cfg.resume_key();

    let model = Model::init(descriptor.clone(), derive_seed(cfg.seed, TAG_INIT, 0))?;
    let mut trainer = Trainer::new(cfg.clone(), &train_subjects, model)?;
    if cfg.backend == Backend::FieldBank {
        for p in &eval_set.pairs {
            trainer
                .model
                .bank_register(&pair_id(&image_key(&p.source, MODALITY_A), &image_key(&p.target, MODALITY_B)))?;
        }
    }

    let mut start = 0;
    if cfg.resume && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path, Some(&descriptor))?;
        if ckpt.meta.get("config") != Some(&resume_key) {
            return Err(Error::Config(format!(
                "{} was written by a different configuration",
                ckpt_path.display()
            )));
        }
        start = ckpt.meta.get("step").and_then(|s| s.as_u64()).unwrap_or(0) as usize;
        trainer.model = ckpt.model;
        trainer.adam = AdamState::from_blobs(&ckpt.state)?;
        let rows: Vec<MetricsRow> = read_metrics(&csv_path)?
            .into_iter()
            .filter(|r| r.step <= start)
            .collect();
        write_metrics(&csv_path, &rows)?;
    } else {
        let e = eval_set.evaluate(&trainer.model)?;
        let row = MetricsRow {
            step: 0,
            loss_total: f64::NAN,
            loss_sim: f64::NAN,
            loss_reg: f64::NAN,
            loss_gcc: f64::NAN,
            eval_dsc: e.dsc,
            eval_negjac: e.negjac,
            eval_lncc_mm: e.lncc_mm,
        };
        write_metrics(&csv_path, &[row])?;
        save_state(&ckpt_path, &trainer, 0, &resume_key)?;
    }

    let mut acc = [0.0f64; 4];
    let mut n_acc = 0usize;
    for step in start + 1..=cfg.iterations {
        let batch = trainer.sample_batch(step as u64)?;
        let rep = trainer.step(&batch)?;
        acc[0] += rep.loss.total;
        acc[1] += rep.loss.sim_total();
        acc[2] += rep.loss.reg_term;
        acc[3] += rep.loss.gcc_term;
        n_acc += 1;
        if step % cfg.eval_interval == 0 || step == cfg.iterations {
            let e = eval_set.evaluate(&trainer.model)?;
            let k = 1.0 / n_acc as f64;
            append_metrics(
                &csv_path,
                &MetricsRow {
                    step,
                    loss_total: acc[0] * k,
                    loss_sim: acc[1] * k,
                    loss_reg: acc[2] * k,
                    loss_gcc: acc[3] * k,
                    eval_dsc: e.dsc,
                    eval_negjac: e.negjac,
                    eval_lncc_mm: e.lncc_mm,
                },
            )?;
            save_state(&ckpt_path, &trainer, step, &resume_key)?;
            acc = [0.0; 4];
            n_acc = 0;
        }
    }
    Ok(TrainOutcome {
        rows: read_metrics(&csv_path)?,
        model: trainer.model,
        metrics_csv: csv_path,
        checkpoint: ckpt_path,
        steps_run: cfg.iterations.saturating_sub(start),
    })
}
