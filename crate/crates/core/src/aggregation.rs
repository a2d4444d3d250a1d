//! Aggregation cascade: local patches, superpoint pooling, masked global
//! mixing, superpoint-to-point transfer and anchor projection, plus the
//! end-to-end driver.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::anchors::{self, AnchorSet, Bandwidths};
use crate::cloud::{self, NeighborIndex, PointCloud};
use crate::config::{CoordKernel, PipelineConfig};
use crate::error::{Error, Result};
use crate::features::FeatureField;
use crate::linalg;
use crate::superpoints::{self, RefineReport, SuperpointState};
use crate::transport::{row_stochastic_deviation, sh_normalize, softmax_rows, CouplingMatrix};

/// `softmax_rows(SH(a) * SH(b) * mask)`; masked entries become 0 before the
/// softmax, not -inf.
pub fn mixing_weights(a: &Array2<f64>, b: &Array2<f64>, mask: Option<&Array2<bool>>, sh_iters: usize) -> Array2<f64> {
    let mut prod = sh_normalize(a, sh_iters) * sh_normalize(b, sh_iters);
    if let Some(mask) = mask {
        prod.zip_mut_with(mask, |x, keep| {
            if !keep {
                *x = 0.0;
            }
        });
    }
    softmax_rows(&prod)
}

/// `(f + w f) / 2` per row, renormalised.
fn half_mix(f: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let mut out = (f + &w.dot(f)) * 0.5;
    linalg::normalize_rows(&mut out);
    out
}

fn check_field(name: &str, field: &FeatureField, n: usize) -> Result<()> {
    if field.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{name} has {} rows, cloud has {n} points",
            field.len()
        )));
    }
    Ok(())
}

/// Result of a mixing stage with its worst row-sum error.
#[derive(Debug, Clone)]
pub struct Mixed<T> {
    pub value: T,
    pub max_row_deviation: f64,
}

/// Per-seed K2 patches mixed by joint geometric/visual affinity.
///
/// Points in several patches get the mean of their patch outputs; points in
/// none, and invalid rows, are left untouched.
pub fn local_aggregate(
    seeds_p: &[[f64; 3]],
    index: &NeighborIndex,
    geo: &FeatureField,
    vlm: &FeatureField,
    k2: usize,
    sh_iters: usize,
) -> Result<Mixed<FeatureField>> {
    let n = index.len();
    check_field("geometric field", geo, n)?;
    check_field("visual field", vlm, n)?;
    let (sd, sb) = ((geo.dim() as f64).sqrt(), (vlm.dim() as f64).sqrt());
    let patches: Vec<(Vec<usize>, Array2<f64>, f64)> = seeds_p
        .par_iter()
        .map(|p| -> Result<_> {
            let members: Vec<usize> = index
                .knn_indices(p, k2, false)?
                .into_iter()
                .filter(|&i| vlm.is_valid(i))
                .collect();
            if members.is_empty() {
                return Ok((members, Array2::zeros((0, vlm.dim())), 0.0));
            }
            let g = geo.values().select(Axis(0), &members);
            let f = vlm.values().select(Axis(0), &members);
            let w = mixing_weights(&linalg::scaled_gram(&g, &g, sd), &linalg::scaled_gram(&f, &f, sb), None, sh_iters);
            let dev = row_stochastic_deviation(&w);
            Ok((members, half_mix(&f, &w), dev))
        })
        .collect::<Result<_>>()?;

    let mut sum = Array2::<f64>::zeros((n, vlm.dim()));
    let mut count = vec![0usize; n];
    let mut max_dev = 0.0f64;
    for (members, out, dev) in &patches {
        max_dev = max_dev.max(*dev);
        for (r, &i) in members.iter().enumerate() {
            sum.row_mut(i).scaled_add(1.0, &out.row(r));
            count[i] += 1;
        }
    }
    let mut values = vlm.values().clone();
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(sum.axis_iter(Axis(0)))
        .zip(&count)
        .for_each(|((mut row, s), &c)| {
            if c > 0 {
                row.assign(&s);
                linalg::normalize_row(row);
            }
        });
    Ok(Mixed {
        value: FeatureField::new(values)?,
        max_row_deviation: max_dev,
    })
}

/// Plan-weighted mean of point features per seed, renormalised; seeds whose
/// column has no mass keep `seeds_f`.
pub fn pool_to_superpoints(plan: &CouplingMatrix, seeds_f: &Array2<f64>, refined: &FeatureField) -> Result<Array2<f64>> {
    if plan.n_cols() != seeds_f.nrows() || plan.n_rows() != refined.len() || seeds_f.ncols() != refined.dim() {
        return Err(Error::DimensionMismatch(format!(
            "plan is {}x{}, seeds {}x{}, features {}x{}",
            plan.n_rows(),
            plan.n_cols(),
            seeds_f.nrows(),
            seeds_f.ncols(),
            refined.len(),
            refined.dim()
        )));
    }
    let mut out = seeds_f.clone();
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(plan.columns())
        .for_each(|(mut row, col)| {
            let mass: f64 = col.iter().map(|(_, w)| w).sum();
            if !(mass > 0.0) {
                return;
            }
            let mut acc = Array1::<f64>::zeros(row.len());
            for &(i, w) in col {
                acc.scaled_add(w / mass, &refined.row(i));
            }
            if linalg::normalize_row(acc.view_mut()) {
                row.assign(&acc);
            }
        });
    Ok(out)
}

/// Superpoint mixing restricted to pairs closer than `d_c`.
pub fn global_aggregate(
    seeds_f: &Array2<f64>,
    seeds_g: &Array2<f64>,
    seeds_p: &[[f64; 3]],
    d_c: f64,
    sh_iters: usize,
) -> Result<Mixed<Array2<f64>>> {
    let m = seeds_f.nrows();
    if seeds_g.nrows() != m || seeds_p.len() != m {
        return Err(Error::DimensionMismatch("superpoint arrays differ in length".into()));
    }
    let mask = Array2::from_shape_fn((m, m), |(i, j)| i == j || cloud::dist(&seeds_p[i], &seeds_p[j]) < d_c);
    let sg = linalg::scaled_gram(seeds_g, seeds_g, (seeds_g.ncols() as f64).sqrt());
    let sv = linalg::scaled_gram(seeds_f, seeds_f, (seeds_f.ncols() as f64).sqrt());
    let w = mixing_weights(&sg, &sv, Some(&mask), sh_iters);
    Ok(Mixed {
        max_row_deviation: row_stochastic_deviation(&w),
        value: half_mix(seeds_f, &w),
    })
}

const CHUNK: usize = 256;

/// SH of `exp(s)` for an implicit `n x m` similarity, kept as factors:
/// entry `(i, j) = exp(s_ij - shift_i) * row_i * col_j`.
#[derive(Debug, Clone)]
pub struct ShFactors {
    shift: Vec<f64>,
    row: Vec<f64>,
    col: Vec<f64>,
}

impl ShFactors {
    pub fn compute<S>(n: usize, m: usize, s: S, iters: usize) -> Self
    where
        S: Fn(usize, usize) -> f64 + Sync,
    {
        let mut f = Self {
            shift: vec![0.0; n],
            row: vec![1.0; n],
            col: vec![1.0; m],
        };
        if iters == 0 {
            return f;
        }
        f.shift = (0..n)
            .into_par_iter()
            .map(|i| (0..m).map(|j| s(i, j)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for _ in 0..iters {
            let (shift, col) = (&f.shift, &f.col);
            f.row = (0..n)
                .into_par_iter()
                .map(|i| {
                    let t: f64 = (0..m).map(|j| (s(i, j) - shift[i]).exp() * col[j]).sum();
                    if t > 0.0 {
                        1.0 / t
                    } else {
                        1.0
                    }
                })
                .collect();
            let partial: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
                .into_par_iter()
                .map(|c| {
                    let mut acc = vec![0.0; m];
                    for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                        for (j, a) in acc.iter_mut().enumerate() {
                            *a += f.entry(&s, i, j);
                        }
                    }
                    acc
                })
                .collect();
            let mut sums = vec![0.0; m];
            for p in &partial {
                for (a, b) in sums.iter_mut().zip(p) {
                    *a += b;
                }
            }
            for (c, t) in f.col.iter_mut().zip(&sums) {
                if *t > 0.0 {
                    *c /= t;
                }
            }
        }
        f
    }

    pub fn entry<S: Fn(usize, usize) -> f64>(&self, s: &S, i: usize, j: usize) -> f64 {
        (s(i, j) - self.shift[i]).exp() * self.row[i] * self.col[j]
    }
}

/// Coordinate affinity between points and seeds for the chosen kernel.
fn coord_similarity<'a>(
    cloud: &'a PointCloud,
    seeds_p: &'a [[f64; 3]],
    d_c: f64,
    kernel: CoordKernel,
) -> impl Fn(usize, usize) -> f64 + Sync + 'a {
    let lse: Vec<f64> = match kernel {
        CoordKernel::Tanh => Vec::new(),
        CoordKernel::Softmax => (0..cloud.len())
            .into_par_iter()
            .map(|i| {
                let p = cloud.point(i);
                let z: Vec<f64> = seeds_p.iter().map(|q| d_c - cloud::dist(&p, q)).collect();
                let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                top + z.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
            })
            .collect(),
    };
    move |i, j| {
        let z = d_c - cloud::dist(&cloud.point(i), &seeds_p[j]);
        match kernel {
            CoordKernel::Tanh => z.tanh(),
            CoordKernel::Softmax => (z - lse[i]).exp(),
        }
    }
}

/// Transfers superpoint features back to every point:
/// `f_i <- (f_i + sum_j W_ij fbar_j) / 2`; invalid rows take `W fbar` alone.
#[allow(clippy::too_many_arguments)]
pub fn superpoint_to_point(
    cloud: &PointCloud,
    vlm: &FeatureField,
    seeds_p: &[[f64; 3]],
    seeds_f: &Array2<f64>,
    d_c: f64,
    sh_iters: usize,
    kernel: CoordKernel,
) -> Result<Mixed<FeatureField>> {
    let (n, m) = (cloud.len(), seeds_p.len());
    check_field("visual field", vlm, n)?;
    if seeds_f.nrows() != m || seeds_f.ncols() != vlm.dim() || m == 0 {
        return Err(Error::DimensionMismatch("superpoint features do not match seeds or field width".into()));
    }
    let sc = coord_similarity(cloud, seeds_p, d_c, kernel);
    let sb = (vlm.dim() as f64).sqrt();
    let sv = |i: usize, j: usize| linalg::dot(vlm.row(i), seeds_f.row(j)) / sb;
    if n * m <= DENSE_LIMIT {
        let dc = dense(n, m, &sc);
        let dv = dense(n, m, &sv);
        mix_to_points(vlm, seeds_f, |i, j| dc[[i, j]], |i, j| dv[[i, j]], sh_iters)
    } else {
        mix_to_points(vlm, seeds_f, sc, sv, sh_iters)
    }
}

/// Similarities at most this many entries are evaluated once and kept.
const DENSE_LIMIT: usize = 1 << 22;

fn dense<S: Fn(usize, usize) -> f64 + Sync>(n: usize, m: usize, s: &S) -> Array2<f64> {
    let mut out = Array2::zeros((n, m));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| row.iter_mut().enumerate().for_each(|(j, x)| *x = s(i, j)));
    out
}

fn mix_to_points<C, V>(vlm: &FeatureField, seeds_f: &Array2<f64>, sc: C, sv: V, sh_iters: usize) -> Result<Mixed<FeatureField>>
where
    C: Fn(usize, usize) -> f64 + Sync,
    V: Fn(usize, usize) -> f64 + Sync,
{
    let (n, m) = (vlm.len(), seeds_f.nrows());
    let fc = ShFactors::compute(n, m, &sc, sh_iters);
    let fv = ShFactors::compute(n, m, &sv, sh_iters);
    let mut values = Array2::<f64>::zeros((n, vlm.dim()));
    let devs: Vec<f64> = values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map(|(i, mut out)| {
            let z: Vec<f64> = (0..m).map(|j| fc.entry(&sc, i, j) * fv.entry(&sv, i, j)).collect();
            let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
            let total: f64 = e.iter().sum();
            let mut row_sum = 0.0;
            for (j, ej) in e.iter().enumerate() {
                let w = ej / total;
                row_sum += w;
                out.scaled_add(w, &seeds_f.row(j));
            }
            if vlm.is_valid(i) {
                out.zip_mut_with(&vlm.row(i), |o, f| *o = 0.5 * (*o + f));
            }
            linalg::normalize_row(out);
            (row_sum - 1.0).abs()
        })
        .collect();
    Ok(Mixed {
        value: FeatureField::new(values)?,
        max_row_deviation: devs.into_iter().fold(0.0, f64::max),
    })
}

/// Best anchor per point by joint score, ties to the lowest index.
fn best_anchor(anchors: &AnchorSet, f: ArrayView1<f64>, g: ArrayView1<f64>) -> usize {
    let scores = anchors.c_v.dot(&f) * anchors.c_g.dot(&g);
    let mut best = 0;
    for (j, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = j;
        }
    }
    best
}

/// `normalize((1 - blend) f_i + blend cv_j*)` with `j*` the best anchor.
pub fn anchor_project(vlm: &FeatureField, geo: &FeatureField, anchors: &AnchorSet, blend: f64) -> Result<FeatureField> {
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::InvalidParameter(format!("blend must lie in [0, 1], got {blend}")));
    }
    if geo.len() != vlm.len() || anchors.c_v.ncols() != vlm.dim() || anchors.c_g.ncols() != geo.dim() {
        return Err(Error::DimensionMismatch(format!(
            "anchors are {}+{} wide, features {}+{} over {} and {} rows",
            anchors.c_v.ncols(),
            anchors.c_g.ncols(),
            vlm.dim(),
            geo.dim(),
            vlm.len(),
            geo.len()
        )));
    }
    if blend == 0.0 {
        return Ok(vlm.clone());
    }
    let mut values = vlm.values().clone();
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let j = best_anchor(anchors, vlm.row(i), geo.row(i));
            row *= 1.0 - blend;
            row.scaled_add(blend, &anchors.c_v.row(j));
            linalg::normalize_row(row);
        });
    FeatureField::new(values)
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimings {
    pub superpoints_ms: f64,
    pub anchors_ms: f64,
    pub local_ms: f64,
    pub global_ms: f64,
    pub superpoint_to_point_ms: f64,
    pub projection_ms: f64,
}

/// Diagnostics of one [`run_pipeline`] call.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PipelineReport {
    pub n_points: usize,
    pub n_superpoints: usize,
    /// Points outside every seed neighbourhood of the final plan.
    pub uncovered_points: usize,
    pub n_anchors: usize,
    pub external_anchors: bool,
    pub d_c: f64,
    pub d_g: f64,
    pub point_bandwidths: Option<Bandwidths>,
    pub meanshift_iterations: Option<usize>,
    pub refine: RefineReport,
    pub final_row_residual: f64,
    pub final_col_residual: f64,
    /// Largest row-sum error of each mixing matrix family.
    pub local_row_deviation: f64,
    pub global_row_deviation: f64,
    pub point_row_deviation: f64,
    /// Largest `| |row| - 1 |` over valid rows of each stage output.
    pub local_unit_deviation: f64,
    pub pooled_unit_deviation: f64,
    pub global_unit_deviation: f64,
    pub point_unit_deviation: f64,
    pub output_unit_deviation: f64,
    pub timings: StageTimings,
}

/// Everything produced by [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub features: FeatureField,
    pub state: SuperpointState,
    pub anchors: AnchorSet,
    pub report: PipelineReport,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Superpoints, anchors, `agg_passes` rounds of local/pool/global, transfer
/// to points, then anchor projection.
pub fn run_pipeline(
    cloud: &PointCloud,
    vlm: &FeatureField,
    geo: &FeatureField,
    config: &PipelineConfig,
    external_anchors: Option<&AnchorSet>,
) -> Result<PipelineOutput> {
    let n = cloud.len();
    check_field("visual field", vlm, n)?;
    check_field("geometric field", geo, n)?;
    if let Some(a) = external_anchors {
        if a.c_v.ncols() != vlm.dim() || a.c_g.ncols() != geo.dim() {
            return Err(Error::DimensionMismatch(format!(
                "anchors are {}+{} wide, features {}+{}",
                a.c_v.ncols(),
                a.c_g.ncols(),
                vlm.dim(),
                geo.dim()
            )));
        }
    }
    config.validate(n)?;
    if config.n_super < 2 {
        return Err(Error::InvalidParameter("the pipeline needs n_super >= 2".into()));
    }
    let mut report = PipelineReport {
        n_points: n,
        n_superpoints: config.n_super,
        external_anchors: external_anchors.is_some(),
        ..Default::default()
    };

    let t = Instant::now();
    let index = NeighborIndex::build(cloud)?;
    let seeds = superpoints::init_seeds(cloud, geo, vlm, config.n_super, config.fps_start)?;
    let (mut state, refine_report) = superpoints::refine(seeds, cloud, &index, geo, vlm, config)?;
    report.refine = refine_report;
    // the final plan is always taken against the final seeds
    let (assignment, _) = superpoints::assign_round(&mut state, cloud, &index, geo, vlm, config, None)?;
    report.uncovered_points = assignment.uncovered.len();
    report.final_row_residual = assignment.row_residual;
    report.final_col_residual = assignment.col_residual;
    let plan = assignment.plan;
    state.plan = Some(plan.clone());
    let scales = superpoints::scale_constants(&state)?;
    report.d_c = scales.d_c;
    report.d_g = scales.d_g;
    report.timings.superpoints_ms = ms(t);

    let t = Instant::now();
    let anchor_set = match external_anchors {
        Some(a) => a.clone(),
        None => {
            let (set, bw, shift) = anchors::anchors_from_seeds(
                vlm,
                geo,
                &state.seeds_f,
                &state.seeds_g,
                config.ms_iters,
                config.bandwidth_rank,
                config.bandwidth_max_rows,
                config.nms_mode,
            )?;
            report.point_bandwidths = Some(bw);
            report.meanshift_iterations = Some(shift.iterations);
            set
        }
    };
    report.n_anchors = anchor_set.len();
    report.timings.anchors_ms = ms(t);

    let mut points = vlm.clone();
    let mut seeds_f = state.seeds_f.clone();
    for _ in 0..config.agg_passes {
        let t = Instant::now();
        let local = local_aggregate(&state.seeds_p, &index, geo, &points, config.k2, config.sh_iters)?;
        report.local_row_deviation = report.local_row_deviation.max(local.max_row_deviation);
        report.local_unit_deviation = report.local_unit_deviation.max(local.value.unit_norm_deviation());
        points = local.value;
        report.timings.local_ms += ms(t);

        let t = Instant::now();
        seeds_f = pool_to_superpoints(&plan, &seeds_f, &points)?;
        let all = vec![true; seeds_f.nrows()];
        report.pooled_unit_deviation = report.pooled_unit_deviation.max(linalg::unit_norm_deviation(&seeds_f, &all));
        let global = global_aggregate(&seeds_f, &state.seeds_g, &state.seeds_p, scales.d_c, config.sh_iters)?;
        report.global_row_deviation = report.global_row_deviation.max(global.max_row_deviation);
        seeds_f = global.value;
        report.global_unit_deviation = report.global_unit_deviation.max(linalg::unit_norm_deviation(&seeds_f, &all));
        report.timings.global_ms += ms(t);
    }

    let t = Instant::now();
    let transfer = superpoint_to_point(
        cloud,
        &points,
        &state.seeds_p,
        &seeds_f,
        scales.d_c,
        config.sh_iters,
        config.coord_kernel,
    )?;
    report.point_row_deviation = transfer.max_row_deviation;
    report.point_unit_deviation = transfer.value.unit_norm_deviation();
    report.timings.superpoint_to_point_ms = ms(t);

    let t = Instant::now();
    let features = anchor_project(&transfer.value, geo, &anchor_set, config.blend)?;
    report.output_unit_deviation = features.unit_norm_deviation();
    report.timings.projection_ms = ms(t);

    Ok(PipelineOutput {
        features,
        state,
        anchors: anchor_set,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::random_unit_rows;
    use ndarray::array;

    // Step-by-step reference implementations, written without the helpers above.
    fn sh_ref(s: &Array2<f64>, iters: usize) -> Array2<f64> {
        let (n, m) = s.dim();
        let mut k = s.mapv(f64::exp);
        for _ in 0..iters {
            for i in 0..n {
                let t: f64 = (0..m).map(|j| k[[i, j]]).sum();
                for j in 0..m {
                    k[[i, j]] /= t;
                }
            }
            for j in 0..m {
                let t: f64 = (0..n).map(|i| k[[i, j]]).sum();
                for i in 0..n {
                    k[[i, j]] /= t;
                }
            }
        }
        k
    }

    fn softmax_ref(z: &Array2<f64>) -> Array2<f64> {
        let mut w = z.mapv(f64::exp);
        for mut r in w.rows_mut() {
            let t = r.sum();
            r /= t;
        }
        w
    }

    fn normalize_ref(mut m: Array2<f64>) -> Array2<f64> {
        for mut r in m.rows_mut() {
            let t = r.dot(&r).sqrt();
            if t > 0.0 {
                r /= t;
            }
        }
        m
    }

    fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).mapv(f64::abs).fold(0.0, |x, y| x.max(*y))
    }

    fn line_cloud(xs: &[f32]) -> PointCloud {
        PointCloud::new(xs.iter().map(|&x| [x, 0.0, 0.0]).collect()).unwrap()
    }

    #[test]
    fn local_constant_field_is_fixed() {
        let cloud = line_cloud(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let index = NeighborIndex::build(&cloud).unwrap();
        let vlm = FeatureField::new(Array2::from_elem((5, 3), 2.0)).unwrap();
        let geo = FeatureField::new(random_unit_rows(5, 4, 1)).unwrap();
        let out = local_aggregate(&[[0.0; 3], [4.0, 0.0, 0.0]], &index, &geo, &vlm, 3, 5).unwrap();
        assert!(max_abs(out.value.values(), vlm.values()) < 1e-12);
        assert!(out.max_row_deviation < 1e-12);
        let vlm = FeatureField::new(random_unit_rows(5, 3, 2)).unwrap();
        let one = local_aggregate(&[[0.0; 3], [4.0, 0.0, 0.0]], &index, &geo, &vlm, 1, 5).unwrap();
        assert!(max_abs(one.value.values(), vlm.values()) < 1e-15);
    }

    #[test]
    fn local_three_point_patch_matches_trace() {
        let cloud = line_cloud(&[0.0, 1.0, 2.0, 50.0]);
        let index = NeighborIndex::build(&cloud).unwrap();
        let g = array![[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [1.0, 0.0]];
        let f = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.6, 0.0, 0.8], [0.0, 0.0, 1.0]];
        let geo = FeatureField::new(g.clone()).unwrap();
        let vlm = FeatureField::new(f.clone()).unwrap();
        let out = local_aggregate(&[[1.0, 0.0, 0.0]], &index, &geo, &vlm, 3, 5).unwrap();
        let gp = g.slice(ndarray::s![0..3, ..]).to_owned();
        let fp = f.slice(ndarray::s![0..3, ..]).to_owned();
        let sg = gp.dot(&gp.t()) / 2f64.sqrt();
        let sv = fp.dot(&fp.t()) / 3f64.sqrt();
        let w = softmax_ref(&(sh_ref(&sg, 5) * sh_ref(&sv, 5)));
        let expect = normalize_ref((&fp + &w.dot(&fp)) * 0.5);
        assert!(max_abs(&out.value.values().slice(ndarray::s![0..3, ..]).to_owned(), &expect) < 1e-10);
        assert_eq!(out.value.row(3), vlm.row(3));
    }

    #[test]
    fn local_averages_overlapping_patches() {
        let cloud = line_cloud(&[0.0, 1.0, 2.0]);
        let index = NeighborIndex::build(&cloud).unwrap();
        let geo = FeatureField::new(random_unit_rows(3, 2, 5)).unwrap();
        let vlm = FeatureField::new(random_unit_rows(3, 3, 6)).unwrap();
        let left = local_aggregate(&[[0.0; 3]], &index, &geo, &vlm, 2, 5).unwrap().value;
        let right = local_aggregate(&[[2.0, 0.0, 0.0]], &index, &geo, &vlm, 2, 5).unwrap().value;
        let both = local_aggregate(&[[0.0; 3], [2.0, 0.0, 0.0]], &index, &geo, &vlm, 2, 5).unwrap().value;
        let mut mid = &left.row(1) + &right.row(1);
        mid /= mid.dot(&mid).sqrt();
        assert!((&both.row(1) - &mid).mapv(f64::abs).sum() < 1e-12);
        assert_eq!(both.row(0), left.row(0));
        assert_eq!(both.row(2), right.row(2));
    }

    #[test]
    fn pooling_examples() {
        let refined = FeatureField::new(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let seeds = array![[0.0, 1.0], [1.0, 0.0], [0.6, 0.8]];
        let plan = CouplingMatrix::from_columns(3, vec![vec![(0, 0.5), (1, 0.5)], vec![(2, 0.3)], vec![]]);
        let out = pool_to_superpoints(&plan, &seeds, &refined).unwrap();
        assert_eq!(out, array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
    }

    #[test]
    fn pooling_matches_dense_product() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (n, m) = (30, 6);
        let refined = FeatureField::new(random_unit_rows(n, 5, 9)).unwrap();
        let columns: Vec<Vec<(usize, f64)>> = (0..m)
            .map(|_| (0..n).filter_map(|i| if rng.random_bool(0.3) { Some((i, rng.random::<f64>())) } else { None }).collect())
            .collect();
        let plan = CouplingMatrix::from_columns(n, columns);
        let dense = plan.to_dense();
        let mut expect = dense.t().dot(refined.values());
        for (j, mut r) in expect.rows_mut().into_iter().enumerate() {
            r /= dense.column(j).sum();
        }
        let expect = normalize_ref(expect);
        let got = pool_to_superpoints(&plan, &Array2::zeros((m, 5)), &refined).unwrap();
        assert!(max_abs(&got, &expect) < 1e-10);
    }

    #[test]
    fn global_examples() {
        let f = Array2::from_elem((4, 3), 1.0 / 3f64.sqrt());
        let g = random_unit_rows(4, 2, 1);
        let p = [[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0], [5.5, 0.0, 0.0]];
        let out = global_aggregate(&f, &g, &p, 1.5, 5).unwrap();
        assert!(max_abs(&out.value, &f) < 1e-12);
        let single = global_aggregate(&f.slice(ndarray::s![0..1, ..]).to_owned(), &g.slice(ndarray::s![0..1, ..]).to_owned(), &p[..1], 1.0, 5).unwrap();
        assert!(max_abs(&single.value, &f.slice(ndarray::s![0..1, ..]).to_owned()) < 1e-12);

        // identity mask: off-diagonal entries are 0 inside the softmax
        let f2 = array![[1.0, 0.0], [0.6, 0.8]];
        let g2 = array![[1.0, 0.0], [0.0, 1.0]];
        let p2 = [[0.0; 3], [10.0, 0.0, 0.0]];
        let out = global_aggregate(&f2, &g2, &p2, 1.0, 5).unwrap();
        let prod = sh_ref(&(g2.dot(&g2.t()) / 2f64.sqrt()), 5) * sh_ref(&(f2.dot(&f2.t()) / 2f64.sqrt()), 5);
        let masked = array![[prod[[0, 0]], 0.0], [0.0, prod[[1, 1]]]];
        let w = softmax_ref(&masked);
        assert!(w[[0, 1]] > 0.0);
        let expect = normalize_ref((&f2 + &w.dot(&f2)) * 0.5);
        assert!(max_abs(&out.value, &expect) < 1e-10);
    }

    #[test]
    fn streamed_sh_matches_dense() {
        let s = random_unit_rows(300, 7, 4) * 3.0;
        for iters in [0, 1, 5] {
            let dense = sh_ref(&s, iters);
            let f = ShFactors::compute(300, 7, |i, j| s[[i, j]], iters);
            let streamed = Array2::from_shape_fn((300, 7), |(i, j)| f.entry(&|a, b| s[[a, b]], i, j));
            assert!(max_abs(&dense, &streamed) < 1e-12, "iters {iters}");
        }
    }

    #[test]
    fn transfer_single_seed() {
        let cloud = line_cloud(&[0.0, 3.0]);
        let vlm = FeatureField::new(array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let fbar = array![[0.0, 1.0]];
        let out = superpoint_to_point(&cloud, &vlm, &[[0.0; 3]], &fbar, 1.0, 5, CoordKernel::Tanh).unwrap();
        let h = 0.5f64.sqrt();
        assert!((out.value.row(0)[0] - h).abs() < 1e-15 && (out.value.row(0)[1] - h).abs() < 1e-15);
        assert_eq!(out.value.row(1).to_vec(), vec![0.0, 1.0]);
        assert!(out.value.is_valid(1));
    }

    #[test]
    fn transfer_four_points_two_seeds_matches_trace() {
        let coords = [[0.0f32, 0.0, 0.0], [0.5, 0.2, 0.0], [2.0, 0.0, 0.1], [2.6, -0.3, 0.0]];
        let cloud = PointCloud::new(coords.to_vec()).unwrap();
        let f = normalize_ref(array![[1.0, 0.2, 0.0], [0.3, 1.0, 0.1], [0.0, 0.4, 1.0], [0.5, 0.5, 0.5]]);
        let vlm = FeatureField::new(f.clone()).unwrap();
        let seeds = [[0.2, 0.1, 0.0], [2.3, -0.1, 0.05]];
        let fbar = normalize_ref(array![[1.0, 0.5, 0.0], [0.0, 0.3, 1.0]]);
        let d_c = 1.7;
        for kernel in [CoordKernel::Tanh, CoordKernel::Softmax] {
            let out = superpoint_to_point(&cloud, &vlm, &seeds, &fbar, d_c, 5, kernel).unwrap();
            let mut z = Array2::<f64>::zeros((4, 2));
            for i in 0..4 {
                for j in 0..2 {
                    let p = coords[i].map(f64::from);
                    let d = ((p[0] - seeds[j][0]).powi(2) + (p[1] - seeds[j][1]).powi(2) + (p[2] - seeds[j][2]).powi(2)).sqrt();
                    z[[i, j]] = d_c - d;
                }
            }
            let sc = match kernel {
                CoordKernel::Tanh => z.mapv(f64::tanh),
                CoordKernel::Softmax => softmax_ref(&z),
            };
            let sv = f.dot(&fbar.t()) / 3f64.sqrt();
            let w = softmax_ref(&(sh_ref(&sc, 5) * sh_ref(&sv, 5)));
            let expect = normalize_ref((&f + &w.dot(&fbar)) * 0.5);
            assert!(max_abs(out.value.values(), &expect) < 1e-10, "{kernel:?}");
            assert!(out.max_row_deviation < 1e-12);
        }
    }

    #[test]
    fn transfer_moves_toward_shared_seed_feature() {
        let cloud = PointCloud::new(random_unit_rows(40, 3, 7).mapv(|v| v as f32).outer_iter().map(|r| [r[0], r[1], r[2]]).collect()).unwrap();
        let vlm = FeatureField::new(random_unit_rows(40, 6, 8)).unwrap();
        let shared = random_unit_rows(1, 6, 9);
        let fbar = ndarray::concatenate(Axis(0), &[shared.view(); 5]).unwrap();
        let seeds: Vec<[f64; 3]> = (0..5).map(|k| cloud.point(k * 7)).collect();
        let out = superpoint_to_point(&cloud, &vlm, &seeds, &fbar, 0.7, 5, CoordKernel::Tanh).unwrap();
        for i in 0..40 {
            let before = linalg::cosine(vlm.row(i), shared.row(0));
            let after = linalg::cosine(out.value.row(i), shared.row(0));
            assert!(after >= before - 1e-9);
        }
    }

    #[test]
    fn projection_examples() {
        let vlm = FeatureField::new(random_unit_rows(20, 4, 1)).unwrap();
        let geo = FeatureField::new(random_unit_rows(20, 3, 2)).unwrap();
        let anchors = AnchorSet::new(random_unit_rows(3, 4, 3), random_unit_rows(3, 3, 4), vec![1.0; 3]).unwrap();
        assert_eq!(anchor_project(&vlm, &geo, &anchors, 0.0).unwrap(), vlm);
        let hard = anchor_project(&vlm, &geo, &anchors, 1.0).unwrap();
        for i in 0..20 {
            let scores: Vec<f64> = (0..3)
                .map(|j| vlm.row(i).dot(&anchors.c_v.row(j)) * geo.row(i).dot(&anchors.c_g.row(j)))
                .collect();
            let mut best = 0;
            for j in 1..3 {
                if scores[j] > scores[best] {
                    best = j;
                }
            }
            assert!((&hard.row(i) - &anchors.c_v.row(best)).mapv(f64::abs).sum() < 1e-12);
        }
        let pair_v = FeatureField::new(anchors.c_v.slice(ndarray::s![2..3, ..]).to_owned()).unwrap();
        let pair_g = FeatureField::new(anchors.c_g.slice(ndarray::s![2..3, ..]).to_owned()).unwrap();
        let out = anchor_project(&pair_v, &pair_g, &anchors, 1.0).unwrap();
        assert!((&out.row(0) - &anchors.c_v.row(2)).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn mismatched_rows_fail_before_compute() {
        let cloud = line_cloud(&[0.0, 1.0, 2.0]);
        let vlm = FeatureField::new(random_unit_rows(3, 4, 1)).unwrap();
        let geo = FeatureField::new(random_unit_rows(2, 4, 1)).unwrap();
        let cfg = PipelineConfig { n_super: 2, k1: 2, k2: 2, ..Default::default() };
        let err = run_pipeline(&cloud, &vlm, &geo, &cfg, None).unwrap_err();
        assert_eq!(err.code(), "dimension_mismatch");
    }
}
