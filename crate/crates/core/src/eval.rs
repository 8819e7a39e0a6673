//! Registration quality metrics and training diagnostics.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelVolume;
use crate::model::{image_key, Model};
use crate::objectives::{lncc, DEFAULT_EPS, DEFAULT_RADIUS};
use crate::synth::{EvalPair, SubjectData, MODALITY_A, MODALITY_B};
use crate::transform::{warp_image, warp_labels, DisplacementField, Interp};

pub use crate::transform::neg_jacobian_fraction;

/// Dice per class (index = class id; background and classes empty in both
/// volumes are `None`) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Dice {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn dsc(a: &LabelVolume, b: &LabelVolume, n_classes: u16) -> Result<Dice> {
    if a.shape != b.shape {
        return Err(Error::shape(&a.shape, &b.shape));
    }
    let n = n_classes as usize;
    let mut inter = vec![0usize; n];
    let mut size_a = vec![0usize; n];
    let mut size_b = vec![0usize; n];
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x as usize, y as usize);
        if x >= n || y >= n {
            return Err(Error::InvalidArgument(format!(
                "label {} outside {n_classes} classes",
                x.max(y)
            )));
        }
        size_a[x] += 1;
        size_b[y] += 1;
        if x == y {
            inter[x] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|k| {
            let denom = size_a[k] + size_b[k];
            (k > 0 && denom > 0).then(|| 2.0 * inter[k] as f64 / denom as f64)
        })
        .collect();
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if included.is_empty() {
        1.0
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    Ok(Dice { per_class, mean })
}

/// Metrics of one registered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMetrics {
    pub dice: Dice,
    pub negjac: f64,
    pub lncc_mm: f64,
}

/// Warps the source labels (nearest) and source image (linear) by `field`
/// and compares them with the target.
pub fn pair_metrics(
    source: &SubjectData,
    target: &SubjectData,
    field: &DisplacementField,
) -> Result<PairMetrics> {
    let labels = warp_labels(&source.labels, field)?;
    let dice = dsc(&labels, &target.labels, target.labels.n_classes)?;
    let moved = warp_image(&source.a, field, Interp::Linear)?;
    let lncc_mm = lncc(&moved, &target.b, DEFAULT_RADIUS, DEFAULT_EPS)?;
    Ok(PairMetrics {
        dice,
        negjac: neg_jacobian_fraction(field),
        lncc_mm,
    })
}

/// Averages over evaluated pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dsc: f64,
    pub per_class_dsc: Vec<Option<f64>>,
    pub negjac: f64,
    pub lncc_mm: f64,
    pub n_pairs: usize,
}

pub fn summarize(pairs: &[PairMetrics]) -> Result<EvalSummary> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to summarize".into()));
    }
    let n = pairs.len() as f64;
    let n_classes = pairs[0].dice.per_class.len();
    let per_class_dsc = (0..n_classes)
        .map(|k| {
            let v: Vec<f64> = pairs.iter().filter_map(|p| p.dice.per_class[k]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    Ok(EvalSummary {
        dsc: pairs.iter().map(|p| p.dice.mean).sum::<f64>() / n,
        per_class_dsc,
        negjac: pairs.iter().map(|p| p.negjac).sum::<f64>() / n,
        lncc_mm: pairs.iter().map(|p| p.lncc_mm).sum::<f64>() / n,
        n_pairs: pairs.len(),
    })
}

fn lookup<'a>(
    subjects: &HashMap<&str, &'a SubjectData>,
    id: &str,
) -> Result<&'a SubjectData> {
    subjects
        .get(id)
        .copied()
        .ok_or_else(|| Error::Config(format!("evaluation subject {id} has no loaded data")))
}

fn evaluate_with(
    subjects: &[&SubjectData],
    pairs: &[EvalPair],
    mut field: impl FnMut(&SubjectData, &SubjectData) -> Result<DisplacementField>,
) -> Result<EvalSummary> {
    let by_id: HashMap<&str, &SubjectData> = subjects.iter().map(|s| (s.id.as_str(), *s)).collect();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let s = lookup(&by_id, &p.source)?;
        let t = lookup(&by_id, &p.target)?;
        let u = field(s, t)?;
        out.push(pair_metrics(s, t, &u)?);
    }
    summarize(&out)
}

/// Metrics of the identity transform, as cached in dataset manifests.
pub fn identity_metrics(subjects: &[&SubjectData], pairs: &[EvalPair]) -> Result<EvalSummary> {
    evaluate_with(subjects, pairs, |_, t| Ok(DisplacementField::identity(t.a.shape)))
}

/// Registers every pair (source in modality `A`, target in modality `B`)
/// with `model` and averages the metrics.
pub fn evaluate_model(
    model: &Model,
    subjects: &[&SubjectData],
    pairs: &[EvalPair],
) -> Result<EvalSummary> {
    evaluate_with(subjects, pairs, |s, t| {
        model.field_for(
            &s.a,
            &image_key(&s.id, MODALITY_A),
            &t.b,
            &image_key(&t.id, MODALITY_B),
        )
    })
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation. `None` when the inputs are shorter than two,
/// differ in length, or either is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagRow {
    pub step: u64,
    pub lncc_mm: f64,
    pub dsc: f64,
    pub delta_dsc_vs_initial: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagSummary {
    pub n_rows: usize,
    /// Spearman correlation between eval LNCC and eval DSC over steps.
    pub spearman_lncc_dsc: f64,
    /// Spearman correlation between eval LNCC and the step index.
    pub spearman_lncc_step: f64,
    /// Either correlation was undefined (constant column) and reported as 0.
    pub degenerate: bool,
    pub initial_dsc: f64,
    pub final_dsc: f64,
    pub delta_dsc: f64,
    pub initial_lncc_mm: f64,
    pub final_lncc_mm: f64,
    pub delta_lncc_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diag {
    pub rows: Vec<DiagRow>,
    pub summary: DiagSummary,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a training metrics CSV and derives the similarity-vs-overlap curve.
pub fn diag_curves(metrics_csv: impl AsRef<Path>) -> Result<Diag> {
    let path = metrics_csv.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| malformed(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| malformed(path, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| malformed(path, format!("missing column `{name}`")))
    };
    let (c_step, c_lncc, c_dsc) = (col("step")?, col("eval_lncc_mm")?, col("eval_dsc")?);
    let mut steps = Vec::new();
    let mut lnccs = Vec::new();
    let mut dscs = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| malformed(path, e.to_string()))?;
        let field = |c: usize| -> Result<&str> {
            rec.get(c)
                .ok_or_else(|| malformed(path, format!("row {} is short", line + 1)))
        };
        let step: u64 = field(c_step)?
            .parse()
            .map_err(|_| malformed(path, format!("row {}: bad step", line + 1)))?;
        let num = |c: usize, what: &str| -> Result<f64> {
            let v: f64 = field(c)?
                .parse()
                .map_err(|_| malformed(path, format!("row {}: bad {what}", line + 1)))?;
            if !v.is_finite() {
                return Err(malformed(path, format!("row {}: non-finite {what}", line + 1)));
            }
            Ok(v)
        };
        lnccs.push(num(c_lncc, "eval_lncc_mm")?);
        dscs.push(num(c_dsc, "eval_dsc")?);
        steps.push(step);
    }
    if steps.is_empty() {
        return Err(malformed(path, "no data rows"));
    }
    let initial_dsc = dscs[0];
    let rows = steps
        .iter()
        .zip(&lnccs)
        .zip(&dscs)
        .map(|((&step, &lncc_mm), &dsc)| DiagRow {
            step,
            lncc_mm,
            dsc,
            delta_dsc_vs_initial: dsc - initial_dsc,
        })
        .collect();
    let step_f: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    let rho_dsc = spearman(&lnccs, &dscs);
    let rho_step = spearman(&lnccs, &step_f);
    let last = steps.len() - 1;
    let summary = DiagSummary {
        n_rows: steps.len(),
        spearman_lncc_dsc: rho_dsc.unwrap_or(0.0),
        spearman_lncc_step: rho_step.unwrap_or(0.0),
        degenerate: rho_dsc.is_none() || rho_step.is_none(),
        initial_dsc,
        final_dsc: dscs[last],
        delta_dsc: dscs[last] - initial_dsc,
        initial_lncc_mm: lnccs[0],
        final_lncc_mm: lnccs[last],
        delta_lncc_mm: lnccs[last] - lnccs[0],
    };
    Ok(Diag { rows, summary })
}

/// Writes `<stem>.csv` (`step,lncc_mm,dsc,delta_dsc_vs_initial`) and
/// `<stem>.json` under `out_dir`.
pub fn write_diag(diag: &Diag, out_dir: &Path, stem: &str) -> Result<()> {
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| malformed(&csv_path, e.to_string()))?;
    for r in &diag.rows {
        w.serialize(r).map_err(|e| malformed(&csv_path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = out_dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&diag.summary)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}
