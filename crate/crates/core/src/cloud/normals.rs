use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use super::{NeighborIndex, PointCloud};
use crate::error::{Error, Result};

/// Per-point unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    pub normals: Vec<[f64; 3]>,
}

impl NormalField {
    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }
}

/// Flip `n` so its largest-magnitude component is positive (first such
/// component on exact ties).
pub fn orient_largest_positive(n: [f64; 3]) -> [f64; 3] {
    let mut axis = 0;
    for a in 1..3 {
        if n[a].abs() > n[axis].abs() {
            axis = a;
        }
    }
    if n[axis] < 0.0 {
        [-n[0], -n[1], -n[2]]
    } else {
        n
    }
}

/// Least-variance direction of a point set, or `None` when every point
/// coincides. The sign is left as the eigen-solver returned it.
pub fn fit_normal(points: &[[f64; 3]]) -> Option<[f64; 3]> {
    if points.is_empty() {
        return None;
    }
    let inv = 1.0 / points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a] * inv;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in points {
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        for r in 0..3 {
            for s in 0..3 {
                cov[(r, s)] += d[r] * d[s];
            }
        }
    }
    if cov.iter().all(|v| *v == 0.0) {
        return None;
    }
    let eig = SymmetricEigen::new(cov);
    let mut smallest = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[smallest] {
            smallest = i;
        }
    }
    let v = eig.eigenvectors.column(smallest);
    let norm = v.norm();
    if !(norm > 0.0) {
        return None;
    }
    Some([v[0] / norm, v[1] / norm, v[2] / norm])
}

/// Normals from the `k` nearest points (self-inclusive), oriented by
/// [`orient_largest_positive`].
pub fn estimate_normals(cloud: &PointCloud, index: &NeighborIndex, k: usize) -> Result<NormalField> {
    if k < 3 {
        return Err(Error::InvalidParameter(format!("normal estimation needs k >= 3, got {k}")));
    }
    if k > cloud.len() {
        return Err(Error::NotEnoughPoints {
            k,
            available: cloud.len(),
            n: cloud.len(),
        });
    }
    let normals = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let p = cloud.point(i);
            let nbrs = index.knn(&p, k, false)?;
            let pts: Vec<[f64; 3]> = nbrs.iter().map(|nb| index.point(nb.index)).collect();
            fit_normal(&pts)
                .map(orient_largest_positive)
                .ok_or(Error::DegenerateNeighborhood { index: i })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NormalField { normals })
}
