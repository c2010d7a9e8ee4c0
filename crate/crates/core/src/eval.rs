//! Nearest-class prediction and the generalized zero-shot metric suite.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{DataAccess, SplitSpec};
use crate::error::{Error, Result};
use crate::nets::{images_to_batch, ModelBundle};
use crate::spaces::EmbeddingTable;

/// Images embedded per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

/// Scores of test images (rows) against candidate classes (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Array2<f64>,
    pub class_ids: Vec<usize>,
    pub labels: Vec<usize>,
}

impl ScoreMatrix {
    pub fn new(scores: Array2<f64>, class_ids: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        if scores.ncols() != class_ids.len() {
            return Err(Error::shape("score matrix columns", class_ids.len(), scores.ncols()));
        }
        if scores.nrows() != labels.len() {
            return Err(Error::shape("score matrix rows", labels.len(), scores.nrows()));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: "score".into(),
                step: 0,
                detail: "score matrix has non-finite entries".into(),
            });
        }
        Ok(ScoreMatrix {
            scores,
            class_ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows whose ground truth satisfies `keep`.
    pub fn select_rows(&self, keep: impl Fn(usize) -> bool) -> ScoreMatrix {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        ScoreMatrix {
            scores: self.scores.select(ndarray::Axis(0), &rows),
            class_ids: self.class_ids.clone(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Only the listed candidate columns, in the given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<ScoreMatrix> {
        let cols = classes
            .iter()
            .map(|c| {
                self.class_ids
                    .iter()
                    .position(|x| x == c)
                    .ok_or_else(|| Error::InvalidInput(format!("class {c} is not a candidate")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreMatrix {
            scores: self.scores.select(ndarray::Axis(1), &cols),
            class_ids: classes.to_vec(),
            labels: self.labels.clone(),
        })
    }
}

/// Dot products between image embeddings and candidate class embeddings.
pub fn score(embeddings: ArrayView2<f64>, candidates: &EmbeddingTable, labels: &[usize]) -> Result<ScoreMatrix> {
    if embeddings.ncols() != candidates.dim() {
        return Err(Error::shape("score", candidates.dim(), embeddings.ncols()));
    }
    ScoreMatrix::new(
        embeddings.dot(&candidates.vectors.t()),
        candidates.class_ids.clone(),
        labels.to_vec(),
    )
}

fn argmax_row(row: impl Iterator<Item = f64>, class_ids: &[usize]) -> usize {
    let mut best: Option<(f64, usize)> = None;
    for (v, &c) in row.zip(class_ids) {
        best = match best {
            Some((bv, bc)) if bv > v || (bv == v && bc < c) => Some((bv, bc)),
            _ => Some((v, c)),
        };
    }
    best.map(|(_, c)| c).expect("non-empty candidate set")
}

/// Highest-scoring class per row; ties go to the smallest class id.
pub fn predict(scores: &ScoreMatrix) -> Result<Vec<usize>> {
    if scores.class_ids.is_empty() {
        return Err(Error::InvalidInput("prediction needs at least one candidate".into()));
    }
    Ok(scores
        .scores
        .rows()
        .into_iter()
        .map(|r| argmax_row(r.iter().copied(), &scores.class_ids))
        .collect())
}

/// Prediction after subtracting `gamma_cal` from every seen-class column.
pub fn predict_calibrated(scores: &ScoreMatrix, seen_classes: &[usize], gamma_cal: f64) -> Result<Vec<usize>> {
    let seen: BTreeSet<usize> = seen_classes.iter().copied().collect();
    if scores.class_ids.iter().all(|c| seen.contains(c)) {
        return Err(Error::InvalidInput(
            "calibrated stacking needs unseen classes among the candidates".into(),
        ));
    }
    let bias: Vec<f64> = scores
        .class_ids
        .iter()
        .map(|c| if seen.contains(c) { gamma_cal } else { 0.0 })
        .collect();
    Ok(scores
        .scores
        .rows()
        .into_iter()
        .map(|r| argmax_row(r.iter().zip(&bias).map(|(v, b)| v - b), &scores.class_ids))
        .collect())
}

/// Mean over ground-truth classes of the fraction of that class's images
/// predicted correctly.
pub fn per_class_top1(predictions: &[usize], ground_truth: &[usize]) -> Result<f64> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::shape("per_class_top1", ground_truth.len(), predictions.len()));
    }
    if ground_truth.is_empty() {
        return Err(Error::InvalidInput("per-class accuracy of an empty test set".into()));
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in predictions.iter().zip(ground_truth) {
        let e = tally.entry(t).or_default();
        e.1 += 1;
        if p == t {
            e.0 += 1;
        }
    }
    Ok(tally.values().map(|&(c, n)| c as f64 / n as f64).sum::<f64>() / tally.len() as f64)
}

/// Per-class accuracy restricted to the listed classes, each of which must
/// own at least one image.
pub fn per_class_top1_over(predictions: &[usize], ground_truth: &[usize], classes: &[usize]) -> Result<f64> {
    for c in classes {
        if !ground_truth.contains(c) {
            return Err(Error::InvalidInput(format!("class {c} has no test images")));
        }
    }
    let keep: Vec<usize> = (0..ground_truth.len()).filter(|&i| classes.contains(&ground_truth[i])).collect();
    per_class_top1(
        &keep.iter().map(|&i| predictions[i]).collect::<Vec<_>>(),
        &keep.iter().map(|&i| ground_truth[i]).collect::<Vec<_>>(),
    )
}

/// `2ab / (a + b)`, defined as 0 when both are 0.
pub fn harmonic_mean(acc_st: f64, acc_ut: f64) -> f64 {
    if acc_st + acc_ut == 0.0 {
        0.0
    } else {
        2.0 * acc_st * acc_ut / (acc_st + acc_ut)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Setting {
    /// Unseen test images, unseen candidates.
    UU,
    /// Unseen test images, all candidates.
    UT,
    /// Seen test images, all candidates.
    ST,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::UU, Setting::UT, Setting::ST];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::UU => "U->U",
            Setting::UT => "U->T",
            Setting::ST => "S->T",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace("->", "").replace('2', "").as_str() {
            "UU" => Ok(Setting::UU),
            "UT" => Ok(Setting::UT),
            "ST" => Ok(Setting::ST),
            _ => Err(Error::Config(format!("unknown setting {s:?}"))),
        }
    }
}

/// Embeds the listed images chunk by chunk.
pub fn embed_images<D: DataAccess>(bundle: &ModelBundle, data: &D, ids: &[usize]) -> Result<Array2<f64>> {
    let d = bundle.config.d;
    let mut out = Array2::zeros((ids.len(), d));
    for (k, chunk) in ids.chunks(EVAL_CHUNK).enumerate() {
        let batch = images_to_batch(chunk.iter().map(|&id| data.image(id)));
        let e = bundle.embed(batch.view())?;
        let start = k * EVAL_CHUNK;
        out.slice_mut(s![start..start + chunk.len(), ..]).assign(&e);
    }
    Ok(out)
}

/// Scores the listed images against `classes`.
pub fn score_images<D: DataAccess>(
    bundle: &ModelBundle,
    data: &D,
    ids: &[usize],
    classes: &[usize],
) -> Result<ScoreMatrix> {
    let table = EmbeddingTable::from_rows(classes, |c| data.class_attributes(c))?;
    let emb = embed_images(bundle, data, ids)?;
    let labels: Vec<usize> = ids.iter().map(|&id| data.label(id)).collect();
    score(emb.view(), &table, &labels)
}

fn image_set(splits: &SplitSpec, setting: Setting) -> (&[usize], &'static str) {
    match setting {
        Setting::UU | Setting::UT => (&splits.unseen_test_ids, "unseen-test"),
        Setting::ST => (&splits.seen_test_ids, "seen-test"),
    }
}

/// Candidate classes of a setting: unseen only for U->U, all otherwise.
pub fn candidate_set(splits: &SplitSpec, setting: Setting) -> Vec<usize> {
    match setting {
        Setting::UU => {
            let mut c = splits.unseen_classes.clone();
            c.sort_unstable();
            c
        }
        Setting::UT | Setting::ST => splits.all_classes(),
    }
}

/// Per-class top-1 accuracy of `bundle` in one setting.
pub fn evaluate<D: DataAccess>(bundle: &ModelBundle, data: &D, splits: &SplitSpec, setting: Setting) -> Result<f64> {
    let (ids, what) = image_set(splits, setting);
    if ids.is_empty() {
        return Err(Error::InvalidInput(format!("{setting} needs a non-empty {what} split")));
    }
    let scores = score_images(bundle, data, ids, &candidate_set(splits, setting))?;
    per_class_top1(&predict(&scores)?, &scores.labels)
}

/// One point of the seen-unseen accuracy curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SucPoint {
    pub gamma: f64,
    pub acc_ut: f64,
    pub acc_st: f64,
}

/// `count` evenly spaced calibration factors over `[-s, s]`, where `s`
/// slightly exceeds the spread of `scores` so that both extremes force
/// every prediction to one side.
pub fn default_gamma_grid(scores: &ScoreMatrix, count: usize) -> Vec<f64> {
    let (lo, hi) = scores
        .scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let spread = if lo.is_finite() { hi - lo } else { 0.0 };
    let s = 1.01 * spread + 1e-9;
    linspace(-s, s, count)
}

pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Sweeps `gamma_grid` over the stacked scores of seen-test and unseen-test
/// images; `acc_ut` averages over unseen ground-truth classes, `acc_st`
/// over seen ones.
pub fn suc_curve(scores: &ScoreMatrix, seen_classes: &[usize], gamma_grid: &[f64]) -> Result<Vec<SucPoint>> {
    if gamma_grid.is_empty() {
        return Err(Error::InvalidInput("empty calibration grid".into()));
    }
    let seen: BTreeSet<usize> = seen_classes.iter().copied().collect();
    let unseen_rows: Vec<usize> = (0..scores.len()).filter(|&i| !seen.contains(&scores.labels[i])).collect();
    let seen_rows: Vec<usize> = (0..scores.len()).filter(|&i| seen.contains(&scores.labels[i])).collect();
    if unseen_rows.is_empty() || seen_rows.is_empty() {
        return Err(Error::InvalidInput("SUC needs both seen and unseen test images".into()));
    }
    let acc = |pred: &[usize], rows: &[usize]| {
        per_class_top1(
            &rows.iter().map(|&i| pred[i]).collect::<Vec<_>>(),
            &rows.iter().map(|&i| scores.labels[i]).collect::<Vec<_>>(),
        )
    };
    gamma_grid
        .iter()
        .map(|&gamma| {
            let pred = predict_calibrated(scores, seen_classes, gamma)?;
            Ok(SucPoint {
                gamma,
                acc_ut: acc(&pred, &unseen_rows)?,
                acc_st: acc(&pred, &seen_rows)?,
            })
        })
        .collect()
}

/// Trapezoidal area under the curve of `acc_st` against `acc_ut`, after
/// sorting by `acc_ut` and dropping repeated points.
pub fn ausuc(curve: &[SucPoint]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::InvalidInput("AUSUC needs at least 2 curve points".into()));
    }
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.acc_ut, p.acc_st)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup();
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_uu: f64,
    pub acc_ut: f64,
    pub acc_st: f64,
    pub h: f64,
    pub suc: Vec<SucPoint>,
    pub ausuc: f64,
    /// Mean squared pixel error on unseen-test images; absent without a decoder.
    pub recon_mse: Option<f64>,
}

/// The three settings, H, the calibration sweep and AUSUC. `gamma_grid`
/// defaults to [`default_gamma_grid`] with 201 points.
pub fn evaluate_all<D: DataAccess>(
    bundle: &ModelBundle,
    data: &D,
    splits: &SplitSpec,
    gamma_grid: Option<&[f64]>,
) -> Result<MetricsReport> {
    if splits.unseen_test_ids.is_empty() || splits.seen_test_ids.is_empty() {
        return Err(Error::InvalidInput(
            "evaluation needs non-empty seen-test and unseen-test splits".into(),
        ));
    }
    let ids: Vec<usize> = splits
        .seen_test_ids
        .iter()
        .chain(&splits.unseen_test_ids)
        .copied()
        .collect();
    let all = score_images(bundle, data, &ids, &splits.all_classes())?;
    let seen: BTreeSet<usize> = splits.seen_classes.iter().copied().collect();
    let unseen_part = all.select_rows(|l| !seen.contains(&l));
    let seen_part = all.select_rows(|l| seen.contains(&l));

    let uu = unseen_part.select_classes(&candidate_set(splits, Setting::UU))?;
    let acc_uu = per_class_top1(&predict(&uu)?, &uu.labels)?;
    let acc_ut = per_class_top1(&predict(&unseen_part)?, &unseen_part.labels)?;
    let acc_st = per_class_top1(&predict(&seen_part)?, &seen_part.labels)?;

    let grid = match gamma_grid {
        Some(g) => g.to_vec(),
        None => default_gamma_grid(&all, 201),
    };
    let suc = suc_curve(&all, &splits.seen_classes, &grid)?;
    let area = if suc.len() >= 2 { ausuc(&suc)? } else { 0.0 };
    Ok(MetricsReport {
        acc_uu,
        acc_ut,
        acc_st,
        h: harmonic_mean(acc_st, acc_ut),
        suc,
        ausuc: area,
        recon_mse: None,
    })
}

/// Writes `metrics.csv`, `suc.csv` and `ausuc.txt` into `dir`.
pub fn write_metrics(report: &MetricsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    let csv_err = |e: csv::Error| Error::io(&path, e.into());
    w.write_record(["setting", "accuracy"]).map_err(csv_err)?;
    let mut rows = vec![
        (Setting::UU.as_str(), report.acc_uu),
        (Setting::UT.as_str(), report.acc_ut),
        (Setting::ST.as_str(), report.acc_st),
        ("H", report.h),
    ];
    if let Some(mse) = report.recon_mse {
        rows.push(("recon_mse", mse));
    }
    for (name, v) in rows {
        w.write_record([name.to_string(), v.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("suc.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    let csv_err = |e: csv::Error| Error::io(&path, e.into());
    w.write_record(["gamma", "acc_UT", "acc_ST"]).map_err(csv_err)?;
    for p in &report.suc {
        w.write_record([p.gamma.to_string(), p.acc_ut.to_string(), p.acc_st.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("ausuc.txt");
    std::fs::write(&path, format!("{}\n", report.ausuc)).map_err(|e| Error::io(&path, e))
}
