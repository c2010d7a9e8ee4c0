//! Alternative reconstruction wirings and the cls-only baseline, run on
//! identical data, splits and seeds, with reconstruction-error and
//! metric comparisons.

use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{write_ppm, DataAccess, Image, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate_all, MetricsReport};
use crate::nets::{images_to_batch, ModelBundle, NetConfig, Variant};
use crate::trainer::{train, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub variant: Variant,
    pub net: NetConfig,
    pub train: TrainConfig,
}

/// Magnitudes of the merge-layer weights reading each branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeWeights {
    /// Frobenius norm of the columns fed by the classified branch.
    pub cls: f64,
    /// Frobenius norm of the columns fed by the reconstruction branch.
    pub rec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: MetricsReport,
    pub recon_mse: Option<f64>,
    pub merge_weights: Option<MergeWeights>,
}

/// Trains one variant and evaluates the bundle with the best validation
/// score.
pub fn run_variant<D: DataAccess>(
    spec: &AblationSpec,
    data: &D,
    splits: &SplitSpec,
) -> Result<(ModelBundle, TrainReport, AblationRow)> {
    let (state, mut report) = train(data, splits, &spec.net, spec.variant, &spec.train)?;
    let bundle = report.best_bundle.take().unwrap_or(state.bundle);
    let row = evaluate_variant(&bundle, data, splits)?;
    Ok((bundle, report, row))
}

pub fn evaluate_variant<D: DataAccess>(bundle: &ModelBundle, data: &D, splits: &SplitSpec) -> Result<AblationRow> {
    let mut metrics = evaluate_all(bundle, data, splits, None)?;
    let recon_mse = recon_mse(bundle, data, &splits.unseen_test_ids)?;
    metrics.recon_mse = recon_mse;
    Ok(AblationRow {
        variant: bundle.variant,
        metrics,
        recon_mse,
        merge_weights: (bundle.variant == Variant::SplitBranch)
            .then(|| splitbranch_merge_weights(bundle))
            .transpose()?,
    })
}

/// Mean over `ids` of the squared pixel error divided by the number of
/// pixel channels; `None` for a bundle without a decoder.
pub fn recon_mse<D: DataAccess>(bundle: &ModelBundle, data: &D, ids: &[usize]) -> Result<Option<f64>> {
    if !bundle.variant.has_decoder() {
        return Ok(None);
    }
    if ids.is_empty() {
        return Err(Error::InvalidInput("reconstruction error of an empty image set".into()));
    }
    let mut total = 0.0;
    for chunk in ids.chunks(256) {
        let x = images_to_batch(chunk.iter().map(|&id| data.image(id)));
        let r = bundle.reconstruct(x.view())?.expect("decoder present");
        total += pixel_mse(r.view(), x.view()) * chunk.len() as f64;
    }
    Ok(Some(total / ids.len() as f64))
}

/// Mean over rows and columns of the squared difference.
pub fn pixel_mse(recon: ndarray::ArrayView2<f64>, target: ndarray::ArrayView2<f64>) -> f64 {
    (&recon - &target).iter().map(|v| v * v).sum::<f64>() / recon.len().max(1) as f64
}

/// Reconstruction error of every bundle on the same images; entries are
/// `None` for bundles without a decoder.
pub fn compare_reconstruction<D: DataAccess>(
    bundles: &[&ModelBundle],
    data: &D,
    ids: &[usize],
) -> Result<Vec<(Variant, Option<f64>)>> {
    bundles
        .iter()
        .map(|b| Ok((b.variant, recon_mse(b, data, ids)?)))
        .collect()
}

/// Norms of the merge-layer weight columns reading the classified and the
/// reconstruction branch.
pub fn splitbranch_merge_weights(bundle: &ModelBundle) -> Result<MergeWeights> {
    let br = bundle.branches.as_ref().ok_or_else(|| {
        Error::InvalidInput(format!("{} bundle has no split branches", bundle.variant))
    })?;
    let crate::nets::Layer::Dense { weight, .. } = &br.merge.layers[0] else {
        return Err(Error::InvalidInput("merge layer is not affine".into()));
    };
    let d = bundle.config.d;
    let norm = |w: ndarray::ArrayView2<f64>| w.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(MergeWeights {
        cls: norm(weight.slice(s![.., ..d])),
        rec: norm(weight.slice(s![.., d..])),
    })
}

pub fn write_ablation_report(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let err = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["variant", "acc_UU", "acc_UT", "acc_ST", "H", "recon_mse"])
        .map_err(err)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.variant.to_string(),
            m.acc_uu.to_string(),
            m.acc_ut.to_string(),
            m.acc_st.to_string(),
            m.h.to_string(),
            r.recon_mse.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Lays images out on a grid with a one-pixel white border: each row shows
/// `per_row` originals followed by their reconstructions when present.
pub fn contact_sheet(originals: &[Image], reconstructions: Option<&[Image]>, per_row: usize) -> Result<Image> {
    let Some(first) = originals.first() else {
        return Err(Error::InvalidInput("contact sheet of no images".into()));
    };
    let (h, w, c) = first.shape();
    let per_row = per_row.max(1);
    let rows_of_images = originals.len().div_ceil(per_row);
    let bands = if reconstructions.is_some() { 2 } else { 1 };
    let sheet_h = rows_of_images * bands * (h + 1) + 1;
    let sheet_w = per_row * (w + 1) + 1;
    let mut pixels = vec![1.0; sheet_h * sheet_w * c];
    let mut paste = |img: &Image, top: usize, left: usize| {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    pixels[((top + y) * sheet_w + left + x) * c + ch] = img.get(y, x, ch);
                }
            }
        }
    };
    for (i, img) in originals.iter().enumerate() {
        if img.shape() != (h, w, c) {
            return Err(Error::shape("contact sheet", format!("{:?}", (h, w, c)), format!("{:?}", img.shape())));
        }
        let (row, col) = (i / per_row, i % per_row);
        let left = 1 + col * (w + 1);
        let top = 1 + row * bands * (h + 1);
        paste(img, top, left);
        if let Some(rec) = reconstructions {
            paste(&rec[i], top + h + 1, left);
        }
    }
    Image::new(sheet_h, sheet_w, c, pixels)
}

/// Writes a sheet of up to `count` images from `ids` and their
/// reconstructions by `bundle`.
pub fn write_reconstruction_sheet<D: DataAccess>(
    bundle: &ModelBundle,
    data: &D,
    ids: &[usize],
    count: usize,
    path: &Path,
) -> Result<()> {
    let ids = &ids[..count.min(ids.len())];
    let originals: Vec<Image> = ids.iter().map(|&id| data.image(id).clone()).collect();
    let x = images_to_batch(originals.iter());
    let recon = match bundle.reconstruct(x.view())? {
        Some(r) => Some(rows_to_images(&r, data.image_shape())?),
        None => None,
    };
    let sheet = contact_sheet(&originals, recon.as_deref(), 8)?;
    write_ppm(&sheet, path)
}

fn rows_to_images(rows: &Array2<f64>, shape: (usize, usize, usize)) -> Result<Vec<Image>> {
    let (h, w, c) = shape;
    rows.rows()
        .into_iter()
        .map(|r| Image::from_chw(h, w, c, &r.to_vec()))
        .collect()
}

/// Unseen-test reconstruction error of the full model for each `alpha`.
pub fn sweep_alpha<D: DataAccess>(
    data: &D,
    splits: &SplitSpec,
    net: &NetConfig,
    cfg: &TrainConfig,
    alphas: &[f64],
) -> Result<Vec<(f64, f64, ModelBundle)>> {
    alphas
        .iter()
        .map(|&alpha| {
            let mut cfg = cfg.clone();
            cfg.hyper.alpha = alpha;
            let (state, mut report) = train(data, splits, net, Variant::SpAen, &cfg)?;
            let bundle = report.best_bundle.take().unwrap_or(state.bundle);
            let mse = recon_mse(&bundle, data, &splits.unseen_test_ids)?.expect("full model has a decoder");
            Ok((alpha, mse, bundle))
        })
        .collect()
}
