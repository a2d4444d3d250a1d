//! Superpoints: FPS seeds refined by optimal transport over a joint
//! coordinate / geometric cost restricted to each seed's K1 neighbourhood.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::cloud::{self, NeighborIndex, PointCloud};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::features::FeatureField;
use crate::linalg;
use crate::transport::{sinkhorn_sparse, CouplingMatrix, Marginals};

/// Working set of the superpoint iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointState {
    pub seeds_p: Vec<[f64; 3]>,
    pub seeds_g: Array2<f64>,
    pub seeds_f: Array2<f64>,
    /// Per-seed neighbourhood affinity in `[0, 1]`.
    pub mu: Vec<f64>,
    /// Last transport plan (points x seeds), set by [`refine`].
    pub plan: Option<CouplingMatrix>,
    /// K1 nearest points of each seed, matching the support of `plan`.
    pub neighbor_lists: Vec<Vec<usize>>,
    /// Seeds whose column carried no mass in an update.
    pub stalled: Vec<usize>,
}

impl SuperpointState {
    pub fn len(&self) -> usize {
        self.seeds_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds_p.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleConstants {
    /// Mean distance from each seed to its nearest other seed (coordinates).
    pub d_c: f64,
    /// Same in geometric-feature space.
    pub d_g: f64,
}

/// Transport plan plus coverage and convergence information.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub plan: CouplingMatrix,
    pub row_residual: f64,
    pub col_residual: f64,
    /// Points in no seed neighbourhood; they carry no mass.
    pub uncovered: Vec<usize>,
}

/// Seeds at the FPS indices of `cloud`.
pub fn init_seeds(
    cloud: &PointCloud,
    geo: &FeatureField,
    vlm: &FeatureField,
    n_super: usize,
    start: usize,
) -> Result<SuperpointState> {
    check_rows(cloud, geo, vlm)?;
    let idx = cloud::fps_sample(cloud, n_super, start)?;
    Ok(SuperpointState {
        seeds_p: idx.iter().map(|&i| cloud.point(i)).collect(),
        seeds_g: geo.values().select(Axis(0), &idx),
        seeds_f: vlm.values().select(Axis(0), &idx),
        mu: Vec::new(),
        plan: None,
        neighbor_lists: Vec::new(),
        stalled: Vec::new(),
    })
}

fn check_rows(cloud: &PointCloud, geo: &FeatureField, vlm: &FeatureField) -> Result<()> {
    if geo.len() != cloud.len() || vlm.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!(
            "cloud has {} points, geometric field {} rows, visual field {} rows",
            cloud.len(),
            geo.len(),
            vlm.len()
        )));
    }
    Ok(())
}

/// K1 nearest points (self-inclusive) of every seed.
pub fn seed_neighborhoods(state: &SuperpointState, index: &NeighborIndex, k1: usize) -> Result<Vec<Vec<usize>>> {
    if k1 == 0 || k1 > index.len() {
        return Err(Error::NotEnoughPoints {
            k: k1,
            available: index.len(),
            n: index.len(),
        });
    }
    state
        .seeds_p
        .par_iter()
        .map(|p| index.knn_indices(p, k1, false))
        .collect()
}

/// `mu_j = 1/(2K) * sum_k (1 + cos(f_k, fbar_j))` over the seed's neighbourhood.
pub fn compute_mu(state: &SuperpointState, vlm: &FeatureField) -> Vec<f64> {
    state
        .neighbor_lists
        .iter()
        .enumerate()
        .map(|(j, nbrs)| {
            if nbrs.is_empty() {
                return 0.0;
            }
            let seed = state.seeds_f.row(j);
            let total: f64 = nbrs
                .iter()
                .map(|&k| 1.0 + linalg::cosine(vlm.row(k), seed))
                .sum();
            (total / (2.0 * nbrs.len() as f64)).clamp(0.0, 1.0)
        })
        .collect()
}

const GEO_SCALE_FLOOR: f64 = 1e-9;

/// Mean nearest-other-seed distance in coordinate and geometric space.
/// A geometric spread below `1e-9` (relative to the descriptor norm) is
/// reported as 0.
pub fn scale_constants(state: &SuperpointState) -> Result<ScaleConstants> {
    let m = state.len();
    if m < 2 {
        return Err(Error::InvalidParameter(format!(
            "scale constants need at least 2 superpoints, got {m}"
        )));
    }
    let nearest = |dist: &dyn Fn(usize, usize) -> f64| -> f64 {
        let total: f64 = (0..m)
            .map(|j| {
                (0..m)
                    .filter(|&k| k != j)
                    .map(|k| dist(j, k))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / m as f64
    };
    let d_c = nearest(&|a, b| cloud::dist(&state.seeds_p[a], &state.seeds_p[b]));
    let g = &state.seeds_g;
    let d_g = nearest(&|a, b| {
        g.row(a)
            .iter()
            .zip(g.row(b).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    });
    if !(d_c > 0.0) {
        return Err(Error::InvalidParameter("superpoints coincide: D_c = 0".into()));
    }
    // averaging identical descriptors leaves rounding-level spread
    let g_norm = g.outer_iter().map(|r| linalg::norm(r)).fold(0.0, f64::max);
    let d_g = if d_g <= GEO_SCALE_FLOOR * g_norm.max(1.0) { 0.0 } else { d_g };
    Ok(ScaleConstants { d_c, d_g })
}

/// Transport cost between point `i` and seed `j`. A zero geometric scale
/// (all seed descriptors identical) drops the geometric term.
fn pair_cost(state: &SuperpointState, cloud: &PointCloud, geo: &FeatureField, scales: &ScaleConstants, i: usize, j: usize) -> f64 {
    let mut c = cloud::dist(&cloud.point(i), &state.seeds_p[j]) / scales.d_c.sqrt();
    if scales.d_g > 0.0 {
        let dg = geo
            .row(i)
            .iter()
            .zip(state.seeds_g.row(j).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        c += dg / scales.d_g.sqrt();
    }
    c
}

/// Soft point-to-seed affiliation over the neighbourhood support.
///
/// Column marginals follow `mu`, row marginals are uniform over covered points.
pub fn ot_assign(
    state: &SuperpointState,
    cloud: &PointCloud,
    geo: &FeatureField,
    scales: &ScaleConstants,
    eps: f64,
    iters: usize,
) -> Result<Assignment> {
    let n = cloud.len();
    if state.neighbor_lists.len() != state.len() || state.mu.len() != state.len() {
        return Err(Error::InvalidParameter(
            "neighbourhoods and mu must be computed before assignment".into(),
        ));
    }
    if !state.mu.iter().any(|m| *m > 0.0) {
        return Err(Error::ZeroAffinity);
    }
    let mut local = vec![usize::MAX; n];
    for nbrs in &state.neighbor_lists {
        for &i in nbrs {
            local[i] = 0;
        }
    }
    let mut covered = Vec::new();
    let mut uncovered = Vec::new();
    for (i, slot) in local.iter_mut().enumerate() {
        if *slot == 0 {
            *slot = covered.len();
            covered.push(i);
        } else {
            uncovered.push(i);
        }
    }
    let cost_columns: Vec<Vec<(usize, f64)>> = state
        .neighbor_lists
        .par_iter()
        .enumerate()
        .map(|(j, nbrs)| {
            nbrs.iter()
                .map(|&i| (local[i], pair_cost(state, cloud, geo, scales, i, j)))
                .collect()
        })
        .collect();
    let marg = Marginals::new(vec![1.0; covered.len()], state.mu.clone())?;
    let sol = sinkhorn_sparse(covered.len(), &cost_columns, &marg, eps, iters)?;
    let columns = sol
        .plan
        .columns()
        .iter()
        .map(|col| col.iter().map(|&(r, v)| (covered[r], v)).collect())
        .collect();
    Ok(Assignment {
        plan: CouplingMatrix::from_columns(n, columns),
        row_residual: sol.row_residual,
        col_residual: sol.col_residual,
        uncovered,
    })
}

/// Plan-weighted averages of member coordinates and features.
///
/// Visual seed features are renormalised; seeds whose column carries no mass
/// keep their values and are listed in `stalled`.
pub fn update_seeds(
    state: &SuperpointState,
    cloud: &PointCloud,
    geo: &FeatureField,
    vlm: &FeatureField,
    plan: &CouplingMatrix,
) -> SuperpointState {
    let mut next = state.clone();
    next.stalled.clear();
    for (j, col) in plan.columns().iter().enumerate() {
        let mass: f64 = col.iter().map(|(_, w)| w).sum();
        if !(mass > 0.0) {
            next.stalled.push(j);
            continue;
        }
        let mut p = [0.0; 3];
        let mut g = ndarray::Array1::<f64>::zeros(geo.dim());
        let mut f = ndarray::Array1::<f64>::zeros(vlm.dim());
        for &(i, w) in col {
            let q = cloud.point(i);
            for a in 0..3 {
                p[a] += w * q[a];
            }
            g.scaled_add(w, &geo.row(i));
            f.scaled_add(w, &vlm.row(i));
        }
        next.seeds_p[j] = p.map(|v| v / mass);
        next.seeds_g.row_mut(j).assign(&(g / mass));
        let mut f = f / mass;
        linalg::normalize_row(f.view_mut());
        next.seeds_f.row_mut(j).assign(&f);
    }
    next.plan = Some(plan.clone());
    next
}

/// Per-round diagnostics of [`refine`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct RefineReport {
    pub row_residuals: Vec<f64>,
    pub col_residuals: Vec<f64>,
    pub uncovered: Vec<usize>,
    pub stalled: Vec<usize>,
}

/// One assignment against the current seeds without moving them.
pub fn assign_round(
    state: &mut SuperpointState,
    cloud: &PointCloud,
    index: &NeighborIndex,
    geo: &FeatureField,
    vlm: &FeatureField,
    config: &PipelineConfig,
    scales: Option<ScaleConstants>,
) -> Result<(Assignment, ScaleConstants)> {
    state.neighbor_lists = seed_neighborhoods(state, index, config.k1)?;
    state.mu = compute_mu(state, vlm);
    let scales = match scales {
        Some(s) => s,
        None => scale_constants(state)?,
    };
    let assignment = ot_assign(state, cloud, geo, &scales, config.ot_eps, config.ot_iters)?;
    Ok((assignment, scales))
}

/// `config.gamma_iters` rounds of {neighbourhoods, mu, scales, transport, update}.
pub fn refine(
    state: SuperpointState,
    cloud: &PointCloud,
    index: &NeighborIndex,
    geo: &FeatureField,
    vlm: &FeatureField,
    config: &PipelineConfig,
) -> Result<(SuperpointState, RefineReport)> {
    check_rows(cloud, geo, vlm)?;
    let mut state = state;
    let mut report = RefineReport::default();
    let mut fixed_scales = None;
    for _ in 0..config.gamma_iters {
        let reuse = if config.recompute_scales { None } else { fixed_scales };
        let (assignment, scales) = assign_round(&mut state, cloud, index, geo, vlm, config, reuse)?;
        fixed_scales.get_or_insert(scales);
        report.row_residuals.push(assignment.row_residual);
        report.col_residuals.push(assignment.col_residual);
        report.uncovered.push(assignment.uncovered.len());
        state = update_seeds(&state, cloud, geo, vlm, &assignment.plan);
        report.stalled.push(state.stalled.len());
    }
    Ok((state, report))
}
