//! Zero-shot tasks on refined features: view fusion, classification,
//! per-point segmentation and their metrics.

use std::collections::HashSet;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::FeatureField;
use crate::linalg;

/// Class embeddings, one unit row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    values: Array2<f64>,
    names: Vec<String>,
}

impl TextFeatures {
    /// Rows are normalised; zero rows and duplicate names are rejected.
    pub fn new(mut values: Array2<f64>, names: Vec<String>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::InvalidParameter("text matrix has no classes".into()));
        }
        if names.len() != values.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} class names for {} text rows",
                names.len(),
                values.nrows()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::InvalidParameter(format!("duplicate class name {dup:?}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("text matrix contains non-finite values".into()));
        }
        if linalg::normalize_rows(&mut values).iter().any(|ok| !ok) {
            return Err(Error::InvalidParameter("text matrix contains a zero row".into()));
        }
        Ok(Self { values, names })
    }

    /// Classes named `class0`, `class1`, ...
    pub fn unnamed(values: Array2<f64>) -> Result<Self> {
        let names = (0..values.nrows()).map(|c| format!("class{c}")).collect();
        Self::new(values, names)
    }

    pub fn n_classes(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Features observed from one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewProjection {
    pub indices: Vec<usize>,
    /// One row per entry of `indices`.
    pub features: Array2<f64>,
    pub weights: Vec<f64>,
}

/// Weighted mean of the view features landing on each point; points seen by
/// no view get zero rows and are marked invalid.
pub fn fuse_views(views: &[ViewProjection], n: usize) -> Result<FeatureField> {
    let dim = views
        .first()
        .ok_or_else(|| Error::InvalidParameter("fusion needs at least one view".into()))?
        .features
        .ncols();
    let mut acc = Array2::<f64>::zeros((n, dim));
    let mut mass = vec![0.0; n];
    for (v, view) in views.iter().enumerate() {
        let k = view.indices.len();
        if view.features.nrows() != k || view.weights.len() != k || view.features.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "view {v}: {k} indices, {}x{} features, {} weights (expected width {dim})",
                view.features.nrows(),
                view.features.ncols(),
                view.weights.len()
            )));
        }
        for (r, (&i, &w)) in view.indices.iter().zip(&view.weights).enumerate() {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, n });
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidParameter(format!("view {v}: weight {w} must be finite and >= 0")));
            }
            acc.row_mut(i).scaled_add(w, &view.features.row(r));
            mass[i] += w;
        }
    }
    for (mut row, m) in acc.rows_mut().into_iter().zip(&mass) {
        if *m > 0.0 {
            row /= *m;
        }
    }
    FeatureField::new(acc)
}

/// Predicted class with the score of every class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub class: usize,
    pub scores: Vec<f64>,
}

fn argmax_lowest(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (j, s) in scores.into_iter().enumerate() {
        if s > best.0 {
            best = (s, j);
        }
    }
    best.1
}

fn check_width(features: usize, text: &TextFeatures) -> Result<()> {
    if features != text.dim() {
        return Err(Error::DimensionMismatch(format!(
            "features are {features} wide, text rows {}",
            text.dim()
        )));
    }
    Ok(())
}

/// Max-pools the valid rows into one global feature (optionally averaged
/// with auxiliary global features) and scores it against every class.
pub fn classify(features: &FeatureField, text: &TextFeatures, aux: Option<&Array2<f64>>) -> Result<Classification> {
    check_width(features.dim(), text)?;
    let mut global = Array1::from_elem(features.dim(), f64::NEG_INFINITY);
    let mut any = false;
    for (row, _) in features.values().outer_iter().zip(features.valid()).filter(|(_, v)| **v) {
        global.zip_mut_with(&row, |g, x| *g = g.max(*x));
        any = true;
    }
    if !any {
        return Err(Error::NoValidRows);
    }
    linalg::normalize_row(global.view_mut());
    if let Some(aux) = aux.filter(|a| a.nrows() > 0) {
        if aux.ncols() != features.dim() {
            return Err(Error::DimensionMismatch(format!(
                "auxiliary features are {} wide, expected {}",
                aux.ncols(),
                features.dim()
            )));
        }
        global = (&global + &aux.sum_axis(Axis(0))) / (aux.nrows() + 1) as f64;
        linalg::normalize_row(global.view_mut());
    }
    let scores = text.values().dot(&global).to_vec();
    Ok(Classification {
        class: argmax_lowest(scores.iter().copied()),
        scores,
    })
}

/// Per-point best class; invalid rows get the unlabeled index `C`.
pub fn segment(features: &FeatureField, text: &TextFeatures) -> Result<Vec<usize>> {
    check_width(features.dim(), text)?;
    let c = text.n_classes();
    Ok((0..features.len())
        .into_par_iter()
        .map(|i| {
            if features.is_valid(i) {
                argmax_lowest(text.values().dot(&features.row(i)))
            } else {
                c
            }
        })
        .collect())
}

/// Per-class IoU (`None` for classes absent from both) and their mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentationScore {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Mean IoU over classes present in the ground truth or the prediction.
/// Ground-truth labels `>= n_classes` are unlabeled and skipped.
pub fn miou(pred: &[usize], gt: &[usize], n_classes: usize) -> Result<SegmentationScore> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if g >= n_classes {
            continue;
        }
        if p == g {
            inter[g] += 1;
            union[g] += 1;
        } else {
            union[g] += 1;
            if p < n_classes {
                union[p] += 1;
            }
        }
    }
    let per_class_iou: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::NoValidRows);
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(SegmentationScore { per_class_iou, miou })
}

/// Fraction of exact matches.
pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::NoValidRows);
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}
