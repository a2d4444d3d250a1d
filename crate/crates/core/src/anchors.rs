//! Visual/geometric anchors: joint-kernel Mean-Shift from the superpoint
//! features, greedy non-maximum suppression, and anchor banks.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::NmsMode;
use crate::error::{Error, Result};
use crate::features::FeatureField;
use crate::linalg;

/// Anchor prototypes with their Mean-Shift densities.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub c_v: Array2<f64>,
    pub c_g: Array2<f64>,
    pub density: Vec<f64>,
}

impl AnchorSet {
    pub fn new(c_v: Array2<f64>, c_g: Array2<f64>, density: Vec<f64>) -> Result<Self> {
        let l = c_v.nrows();
        if l == 0 {
            return Err(Error::InvalidParameter("anchor set is empty".into()));
        }
        if c_g.nrows() != l || density.len() != l {
            return Err(Error::DimensionMismatch(format!(
                "anchor set rows: visual {l}, geometric {}, density {}",
                c_g.nrows(),
                density.len()
            )));
        }
        if density.iter().any(|d| !(d.is_finite() && *d >= 0.0))
            || c_v.iter().chain(c_g.iter()).any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter("anchor values must be finite, densities nonnegative".into()));
        }
        Ok(Self { c_v, c_g, density })
    }

    pub fn len(&self) -> usize {
        self.c_v.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bandwidths {
    pub delta_v: f64,
    pub delta_g: f64,
}

const BANDWIDTH_MIN: f64 = 1e-4;
const SHIFT_TOL: f64 = 1e-6;

/// Mean over rows of the cosine similarity to the `rank`-th most similar
/// other row, clamped to `[1e-4, 1]`.
pub fn estimate_bandwidth(features: &Array2<f64>, rank: usize) -> Result<f64> {
    let n = features.nrows();
    if rank == 0 || n <= rank {
        return Err(Error::NotEnoughPoints { k: rank, available: n.saturating_sub(1), n });
    }
    let mut unit = features.clone();
    linalg::normalize_rows(&mut unit);
    let sims = unit.dot(&unit.t());
    let kth: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sims[[i, j]]).collect();
            row.select_nth_unstable_by(rank - 1, |a, b| b.total_cmp(a));
            row[rank - 1]
        })
        .collect();
    let mean = kth.iter().sum::<f64>() / n as f64;
    Ok(mean.clamp(BANDWIDTH_MIN, 1.0))
}

/// [`estimate_bandwidth`] on at most `max_rows` evenly strided rows.
pub fn estimate_bandwidth_sampled(features: &Array2<f64>, rank: usize, max_rows: usize) -> Result<f64> {
    let n = features.nrows();
    if max_rows == 0 || n <= max_rows {
        return estimate_bandwidth(features, rank);
    }
    let rows: Vec<usize> = (0..max_rows).map(|k| k * n / max_rows).collect();
    estimate_bandwidth(&features.select(Axis(0), &rows), rank)
}

/// Output of [`meanshift`].
#[derive(Debug, Clone)]
pub struct ShiftResult {
    pub c_v: Array2<f64>,
    pub c_g: Array2<f64>,
    /// `(1/N) sum_i exp(e_ij - E)` with `E = 1/dv^2 + 1/dg^2` the largest
    /// attainable exponent, so values lie in `[0, 1]`.
    pub density: Vec<f64>,
    pub iterations: usize,
}

/// Joint-kernel Mean-Shift over the valid rows of `vlm` / `geo`.
///
/// Kernel exponent `e_ij = cos(f_i, cv_j)/dv^2 + cos(g_i, cg_j)/dg^2`.
pub fn meanshift(
    vlm: &FeatureField,
    geo: &FeatureField,
    init_v: &Array2<f64>,
    init_g: &Array2<f64>,
    bw: Bandwidths,
    iters: usize,
) -> Result<ShiftResult> {
    if vlm.len() != geo.len() || init_v.nrows() != init_g.nrows() {
        return Err(Error::DimensionMismatch("mean-shift row counts differ".into()));
    }
    if init_v.ncols() != vlm.dim() || init_g.ncols() != geo.dim() {
        return Err(Error::DimensionMismatch("centroid width differs from feature width".into()));
    }
    if !(bw.delta_v > 0.0 && bw.delta_g > 0.0) {
        return Err(Error::InvalidParameter("bandwidths must be positive".into()));
    }
    let rows: Vec<usize> = (0..vlm.len()).filter(|&i| vlm.is_valid(i) && geo.is_valid(i)).collect();
    if rows.is_empty() {
        return Err(Error::NoValidRows);
    }
    let f = vlm.values().select(Axis(0), &rows);
    let g = geo.values().select(Axis(0), &rows);
    let (iv, ig) = (1.0 / (bw.delta_v * bw.delta_v), 1.0 / (bw.delta_g * bw.delta_g));
    let top = iv + ig;
    let n = rows.len() as f64;

    let mut c_v = init_v.clone();
    let mut c_g = init_g.clone();
    linalg::normalize_rows(&mut c_v);
    linalg::normalize_rows(&mut c_g);
    // centroids that moved less than the tolerance stop being updated
    let mut active: Vec<usize> = (0..c_v.nrows()).collect();
    let mut iterations = 0;
    while iterations < iters && !active.is_empty() {
        let av = c_v.select(Axis(0), &active);
        let ag = c_g.select(Axis(0), &active);
        let mut w = f.dot(&av.t()) * iv;
        w.scaled_add(ig, &g.dot(&ag.t()));
        w.axis_iter_mut(Axis(1)).into_par_iter().for_each(|mut col| {
            let peak = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            col.mapv_inplace(|x| (x - peak).exp());
            let total: f64 = col.sum();
            col.mapv_inplace(|x| x / total);
        });
        let mut next_v = w.t().dot(&f);
        let mut next_g = w.t().dot(&g);
        linalg::normalize_rows(&mut next_v);
        linalg::normalize_rows(&mut next_g);
        let mut still = Vec::with_capacity(active.len());
        for (k, &j) in active.iter().enumerate() {
            let moved = row_shift(c_v.row(j), next_v.row(k)).max(row_shift(c_g.row(j), next_g.row(k)));
            c_v.row_mut(j).assign(&next_v.row(k));
            c_g.row_mut(j).assign(&next_g.row(k));
            if moved >= SHIFT_TOL {
                still.push(j);
            }
        }
        active = still;
        iterations += 1;
    }
    let mut e = f.dot(&c_v.t()) * iv;
    e.scaled_add(ig, &g.dot(&c_g.t()));
    let density = e
        .axis_iter(Axis(1))
        .map(|col| col.iter().map(|x| (x - top).exp()).sum::<f64>() / n)
        .collect();
    Ok(ShiftResult { c_v, c_g, density, iterations })
}

fn row_shift(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Greedy suppression by density (ties to the lowest index). A candidate is
/// dropped when its similarity to a kept anchor exceeds half the bandwidth in
/// both spaces (or in either space, per `mode`).
pub fn nms_centroids(
    c_v: &Array2<f64>,
    c_g: &Array2<f64>,
    density: &[f64],
    thresholds: Bandwidths,
    mode: NmsMode,
) -> Result<AnchorSet> {
    let m = c_v.nrows();
    if m == 0 || c_g.nrows() != m || density.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "nms inputs: visual {m}, geometric {}, density {}",
            c_g.nrows(),
            density.len()
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| density[b].total_cmp(&density[a]).then(a.cmp(&b)));
    let (tv, tg) = (thresholds.delta_v / 2.0, thresholds.delta_g / 2.0);
    let mut kept: Vec<usize> = Vec::new();
    for &j in &order {
        let suppressed = kept.iter().any(|&k| {
            let sv = linalg::cosine(c_v.row(j), c_v.row(k)) > tv;
            let sg = linalg::cosine(c_g.row(j), c_g.row(k)) > tg;
            match mode {
                NmsMode::Both => sv && sg,
                NmsMode::Either => sv || sg,
            }
        });
        if !suppressed {
            kept.push(j);
        }
    }
    AnchorSet::new(
        c_v.select(Axis(0), &kept),
        c_g.select(Axis(0), &kept),
        kept.iter().map(|&k| density[k]).collect(),
    )
}

/// NMS thresholds from the centroids themselves; the rank is capped at
/// `count - 1` so small sets still get a threshold.
pub fn centroid_thresholds(c_v: &Array2<f64>, c_g: &Array2<f64>, rank: usize, max_rows: usize) -> Result<Bandwidths> {
    let m = c_v.nrows();
    if m < 2 {
        return Ok(Bandwidths { delta_v: 1.0, delta_g: 1.0 });
    }
    let r = rank.min(m - 1).max(1);
    Ok(Bandwidths {
        delta_v: estimate_bandwidth_sampled(c_v, r, max_rows)?,
        delta_g: estimate_bandwidth_sampled(c_g, r, max_rows)?,
    })
}

/// Joint score `(f . cv_j)(g . cg_j)` of one point against every anchor.
fn joint_scores(anchors: &AnchorSet, f: ndarray::ArrayView1<f64>, g: ndarray::ArrayView1<f64>) -> Array1<f64> {
    anchors.c_v.dot(&f) * anchors.c_g.dot(&g)
}

fn argmax_lowest(scores: &Array1<f64>) -> usize {
    let mut best = 0;
    for (j, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = j;
        }
    }
    best
}

/// Index of the best anchor for every point.
pub fn assign_points(anchors: &AnchorSet, vlm: &FeatureField, geo: &FeatureField) -> Result<Vec<usize>> {
    if vlm.len() != geo.len() {
        return Err(Error::DimensionMismatch("visual and geometric row counts differ".into()));
    }
    if anchors.c_v.ncols() != vlm.dim() || anchors.c_g.ncols() != geo.dim() {
        return Err(Error::DimensionMismatch(format!(
            "anchors are {}+{} wide, features {}+{}",
            anchors.c_v.ncols(),
            anchors.c_g.ncols(),
            vlm.dim(),
            geo.dim()
        )));
    }
    Ok((0..vlm.len())
        .into_par_iter()
        .map(|i| argmax_lowest(&joint_scores(anchors, vlm.row(i), geo.row(i))))
        .collect())
}

/// Concatenates anchor sets and suppresses again with thresholds estimated
/// on the concatenated rows.
///
/// The rank is capped at `sets.len() - 1`, the number of counterparts an
/// anchor can have in the other sets; a single set is returned as is.
pub fn build_anchor_bank(sets: &[AnchorSet], rank: usize, mode: NmsMode) -> Result<AnchorSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::InvalidParameter("anchor bank needs at least one set".into()))?;
    let (bv, bg) = (first.c_v.ncols(), first.c_g.ncols());
    if sets.iter().any(|s| s.c_v.ncols() != bv || s.c_g.ncols() != bg) {
        return Err(Error::DimensionMismatch("anchor sets have different widths".into()));
    }
    let views_v: Vec<_> = sets.iter().map(|s| s.c_v.view()).collect();
    let views_g: Vec<_> = sets.iter().map(|s| s.c_g.view()).collect();
    let c_v = ndarray::concatenate(Axis(0), &views_v).expect("equal widths");
    let c_g = ndarray::concatenate(Axis(0), &views_g).expect("equal widths");
    let density: Vec<f64> = sets.iter().flat_map(|s| s.density.iter().copied()).collect();
    let rank = rank.min(sets.len() - 1);
    if rank == 0 {
        return Ok(first.clone());
    }
    let th = centroid_thresholds(&c_v, &c_g, rank, 0)?;
    nms_centroids(&c_v, &c_g, &density, th, mode)
}

/// Anchors from refined superpoint seeds: point bandwidths drive the
/// Mean-Shift kernel, centroid bandwidths the suppression.
#[allow(clippy::too_many_arguments)]
pub fn anchors_from_seeds(
    vlm: &FeatureField,
    geo: &FeatureField,
    seeds_f: &Array2<f64>,
    seeds_g: &Array2<f64>,
    iters: usize,
    rank: usize,
    max_rows: usize,
    mode: NmsMode,
) -> Result<(AnchorSet, Bandwidths, ShiftResult)> {
    let rows: Vec<usize> = (0..vlm.len()).filter(|&i| vlm.is_valid(i) && geo.is_valid(i)).collect();
    let bw = Bandwidths {
        delta_v: estimate_bandwidth_sampled(&vlm.values().select(Axis(0), &rows), rank, max_rows)?,
        delta_g: estimate_bandwidth_sampled(&geo.values().select(Axis(0), &rows), rank, max_rows)?,
    };
    let shift = meanshift(vlm, geo, seeds_f, seeds_g, bw, iters)?;
    let th = centroid_thresholds(&shift.c_v, &shift.c_g, rank, max_rows)?;
    let set = nms_centroids(&shift.c_v, &shift.c_g, &shift.density, th, mode)?;
    Ok((set, bw, shift))
}
