//! AUROC scoring, seed aggregation and report tables.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cam::{compute_cam_pair, difference_salience, normalize_unit, SalienceMap};
use crate::datasets::LabeledSample;
use crate::error::{invalid, Error, Result};
use crate::nn::{CamNet, ModelArch};
use crate::saliency_io::{make_edge_map, resize_to_grid};
use crate::training::Checkpoint;

/// Label of the row pooling every subset.
pub const OVERALL: &str = "overall";

/// Scores of one checkpoint on one test set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunResult {
    pub seed: u64,
    pub sample_ids: Vec<String>,
    /// Probability of class 1.
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    pub subsets: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    seed: u64,
    sample_id: String,
    label: usize,
    subset: String,
    score: f64,
}

impl RunResult {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.scores.len();
        if self.sample_ids.len() != n || self.labels.len() != n || self.subsets.len() != n {
            return Err(invalid!("run result lists have different lengths"));
        }
        if let Some(s) = self.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(invalid!("score {s} outside [0, 1]"));
        }
        if let Some(l) = self.labels.iter().find(|l| **l > 1) {
            return Err(invalid!("label {l} is not binary"));
        }
        Ok(())
    }

    pub fn auroc(&self) -> Result<f64> {
        auroc(&self.scores, &self.labels)
    }

    /// AUROC restricted to one subset tag.
    pub fn subset_auroc(&self, subset: &str) -> Result<f64> {
        let (scores, labels): (Vec<f64>, Vec<usize>) = self
            .subsets
            .iter()
            .zip(self.scores.iter().zip(&self.labels))
            .filter(|(s, _)| s.as_str() == subset)
            .map(|(_, (score, label))| (*score, *label))
            .unzip();
        if scores.is_empty() {
            return Err(invalid!("no samples in subset {subset}"));
        }
        auroc(&scores, &labels).map_err(|e| invalid!("subset {subset}: {e}"))
    }

    pub fn subset_tags(&self) -> BTreeSet<String> {
        self.subsets.iter().cloned().collect()
    }

    /// Writes one `seed,sample_id,label,subset,score` row per sample.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for i in 0..self.len() {
            w.serialize(ScoreRow {
                seed: self.seed,
                sample_id: self.sample_ids[i].clone(),
                label: self.labels[i],
                subset: self.subsets[i].clone(),
                score: self.scores[i],
            })
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut out = RunResult::default();
        for row in r.deserialize::<ScoreRow>() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            out.seed = row.seed;
            out.sample_ids.push(row.sample_id);
            out.labels.push(row.label);
            out.subsets.push(row.subset);
            out.scores.push(row.score);
        }
        out.validate()?;
        Ok(out)
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from midranks in O(n log n).
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid!("scores contain NaN"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(invalid!("labels must be 0 or 1"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid!(
            "AUROC needs both classes, got {n_pos} positive and {n_neg} negative"
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Scores every sample with the checkpoint's class-1 probability.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    expected_arch: ModelArch,
    dataset: &[LabeledSample],
) -> Result<RunResult> {
    if checkpoint.manifest.arch != expected_arch || checkpoint.model.arch() != expected_arch {
        return Err(invalid!(
            "checkpoint is a {} model but {} was expected",
            checkpoint.manifest.arch,
            expected_arch
        ));
    }
    let mut out = RunResult {
        seed: checkpoint.manifest.seed,
        ..RunResult::default()
    };
    for s in dataset {
        let output = checkpoint
            .model
            .predict(&s.image)
            .map_err(|e| invalid!("sample {}: {e}", s.sample_id))?;
        out.sample_ids.push(s.sample_id.clone());
        out.scores.push(output.probabilities[1]);
        out.labels.push(s.label);
        out.subsets.push(s.subset.clone());
    }
    Ok(out)
}

/// Mean and population standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

impl fmt::Display for AggregateCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

pub fn aggregate(values: &[f64]) -> Result<AggregateCell> {
    if values.is_empty() {
        return Err(invalid!("cannot aggregate an empty list"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("cannot aggregate non-finite values"));
    }
    // Deviations from the first value keep identical inputs exact.
    let n = values.len() as f64;
    let origin = values[0];
    let shift = values.iter().map(|v| v - origin).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|v| (v - origin - shift).powi(2))
        .sum::<f64>()
        / n;
    Ok(AggregateCell {
        mean: origin + shift,
        std: var.sqrt(),
        n_seeds: values.len(),
    })
}

/// All seeds of one method on one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRuns {
    pub method: String,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub subset: String,
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    pub auroc: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

/// One cell per (subset, method) plus an `overall` row per method that
/// pools the samples of every subset.
///
/// `filter` restricts the subset rows; naming a tag no run contains is an
/// error.
pub fn subset_report(
    dataset: &str,
    results: &[MethodRuns],
    filter: Option<&[String]>,
) -> Result<Report> {
    let mut tags = BTreeSet::new();
    for m in results {
        if m.runs.is_empty() {
            return Err(invalid!("method {} has no runs", m.method));
        }
        for r in &m.runs {
            r.validate()?;
            tags.extend(r.subset_tags());
        }
    }
    let selected: Vec<String> = match filter {
        Some(wanted) => {
            for w in wanted {
                if !tags.contains(w) {
                    return Err(invalid!("unknown subset tag {w}"));
                }
            }
            wanted.to_vec()
        }
        None => tags.into_iter().collect(),
    };

    let mut rows = Vec::new();
    let mut push = |subset: &str, method: &str, cell: AggregateCell| {
        rows.push(ReportRow {
            dataset: dataset.to_string(),
            subset: subset.to_string(),
            method: method.to_string(),
            mean: cell.mean,
            std: cell.std,
            n_seeds: cell.n_seeds,
            auroc: cell.to_string(),
        })
    };
    for subset in &selected {
        for m in results {
            let values = m
                .runs
                .iter()
                .map(|r| r.subset_auroc(subset))
                .collect::<Result<Vec<_>>>()?;
            push(subset, &m.method, aggregate(&values)?);
        }
    }
    for m in results {
        let values = m
            .runs
            .iter()
            .map(RunResult::auroc)
            .collect::<Result<Vec<_>>>()?;
        push(OVERALL, &m.method, aggregate(&values)?);
    }
    Ok(Report { rows })
}

impl Report {
    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
    }

    /// Looks up the cell of `(dataset, subset, method)`.
    pub fn cell(&self, dataset: &str, subset: &str, method: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.subset == subset && r.method == method)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for Report {
    /// Fixed-width table with columns Dataset, Subset, Method, AUROC.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let header = ["Dataset", "Subset", "Method", "AUROC"];
        let cells: Vec<[&str; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.dataset.as_str(),
                    r.subset.as_str(),
                    r.method.as_str(),
                    r.auroc.as_str(),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for c in &cells {
            for (w, s) in widths.iter_mut().zip(c) {
                *w = (*w).max(s.chars().count());
            }
        }
        let line = |f: &mut fmt::Formatter<'_>, c: [&str; 4]| {
            writeln!(
                f,
                "{:<w0$}  {:<w1$}  {:<w2$}  {}",
                c[0],
                c[1],
                c[2],
                c[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2]
            )
        };
        line(f, header)?;
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(f, [&rule[0], &rule[1], &rule[2], &rule[3]])?;
        for c in cells {
            line(f, c)?;
        }
        Ok(())
    }
}

/// Pearson correlation of two normalized maps over their cells; 0 when either
/// map is constant.
pub fn cam_alignment(cam: &SalienceMap, reference: &SalienceMap) -> Result<f64> {
    if cam.dim() != reference.dim() {
        return Err(invalid!(
            "map dimensions differ: {:?} vs {:?}; resize the reference first",
            cam.dim(),
            reference.dim()
        ));
    }
    if !cam.is_normalized() || !reference.is_normalized() {
        return Err(invalid!("cam_alignment compares normalized maps"));
    }
    let a = cam.values();
    let b = reference.values();
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean alignment of the true-class CAM and the Difference Salience map with
/// the edge map and with the ground-truth mask, over class-1 samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoolingAudit {
    pub samples: usize,
    pub true_vs_edge: f64,
    pub difference_vs_edge: f64,
    pub true_vs_mask: f64,
    pub difference_vs_mask: f64,
}

impl FoolingAudit {
    /// The true-class CAM follows the edge map more closely, and the
    /// difference map follows the mask more closely.
    pub fn difference_recovers_mask(&self) -> bool {
        self.true_vs_edge > self.difference_vs_edge && self.difference_vs_mask > self.true_vs_mask
    }
}

pub fn fooling_audit(
    model: &CamNet,
    dataset: &[LabeledSample],
    band_fraction: f64,
) -> Result<FoolingAudit> {
    let mut sums = [0.0; 4];
    let mut count = 0usize;
    for s in dataset.iter().filter(|s| s.label == 1) {
        let mask = s
            .human_map
            .as_ref()
            .ok_or_else(|| invalid!("sample {} has no ground-truth mask", s.sample_id))?;
        let output = model.predict(&s.image)?;
        let (t, f) = compute_cam_pair(&output, 1)?;
        let (gh, gw) = t.dim();
        let d = difference_salience(&t, &f)?;
        let t = normalize_unit(&t)?;
        let (h, w) = s.image_size();
        let edge = resize_to_grid(&make_edge_map(h, w, band_fraction)?, gh, gw)?;
        let mask = resize_to_grid(mask, gh, gw)?;
        sums[0] += cam_alignment(&t, &edge)?;
        sums[1] += cam_alignment(&d, &edge)?;
        sums[2] += cam_alignment(&t, &mask)?;
        sums[3] += cam_alignment(&d, &mask)?;
        count += 1;
    }
    if count == 0 {
        return Err(invalid!("no class-1 samples to audit"));
    }
    let n = count as f64;
    Ok(FoolingAudit {
        samples: count,
        true_vs_edge: sums[0] / n,
        difference_vs_edge: sums[1] / n,
        true_vs_mask: sums[2] / n,
        difference_vs_mask: sums[3] / n,
    })
}
