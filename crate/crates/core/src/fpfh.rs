//! Fast Point Feature Histograms computed on a farthest-point reference subset
//! and lifted back to every point.

use std::f64::consts::PI;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::cloud::{self, fit_normal, orient_largest_positive, NeighborIndex, PointCloud};
use crate::error::{Error, Result};
use crate::features::FeatureField;

/// Bins per angle.
pub const BINS: usize = 11;
/// Descriptor length (three concatenated angle histograms).
pub const FPFH_DIM: usize = 3 * BINS;

const MIN_NEIGHBORS: usize = 3;
const WEIGHT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FpfhParams {
    /// Reference points drawn by FPS.
    pub m_ref: usize,
    /// Neighbours for normal estimation.
    pub k3: usize,
    /// Neighbours for the histogram.
    pub k4: usize,
    /// Normal radius.
    pub r1: f64,
    /// Histogram radius.
    pub r2: f64,
}

impl FpfhParams {
    pub fn validate(&self) -> Result<()> {
        if self.m_ref < 3 || self.m_ref < self.k3 {
            return Err(Error::InvalidParameter(format!(
                "m_ref = {} must be >= 3 and >= k3 = {}",
                self.m_ref, self.k3
            )));
        }
        if self.k3 < MIN_NEIGHBORS || self.k4 < 1 {
            return Err(Error::InvalidParameter(format!(
                "k3 = {} must be >= 3 and k4 = {} >= 1",
                self.k3, self.k4
            )));
        }
        if !(self.r1 > 0.0) || !(self.r2 >= self.r1) || !self.r2.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "radii must satisfy r2 >= r1 > 0, got r1 = {}, r2 = {}",
                self.r1, self.r2
            )));
        }
        Ok(())
    }
}

#[inline]
fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
fn bin(x: f64, lo: f64, hi: f64) -> usize {
    let t = ((x - lo) / (hi - lo) * BINS as f64).floor();
    (t.max(0.0) as usize).min(BINS - 1)
}

/// Darboux-frame angles `(alpha, phi, theta)` for the pair source -> target,
/// or `None` when the pair is degenerate.
pub fn darboux_angles(ps: &[f64; 3], ns: &[f64; 3], pt: &[f64; 3], nt: &[f64; 3]) -> Option<(f64, f64, f64)> {
    let d = sub(pt, ps);
    let dlen = dot3(&d, &d).sqrt();
    if dlen == 0.0 {
        return None;
    }
    let u = *ns;
    let v = cross(&d, &u);
    let vlen = dot3(&v, &v).sqrt();
    if vlen == 0.0 {
        return None;
    }
    let v = [v[0] / vlen, v[1] / vlen, v[2] / vlen];
    let w = cross(&u, &v);
    let alpha = dot3(&v, nt);
    let phi = dot3(&u, &d) / dlen;
    let theta = dot3(&w, nt).atan2(dot3(&u, nt));
    Some((alpha, phi, theta))
}

/// Simplified point feature histogram of `point` against `neighbors`.
///
/// Each of the three 11-bin angle histograms carries mass 1/3, so the whole
/// descriptor sums to one.
pub fn compute_spfh(
    point: usize,
    neighbors: &[usize],
    points: &[[f64; 3]],
    normals: &[[f64; 3]],
) -> Result<[f64; FPFH_DIM]> {
    let mut hist = [0.0; FPFH_DIM];
    let mut pairs = 0usize;
    let (ps, ns) = (&points[point], &normals[point]);
    for &t in neighbors {
        let Some((alpha, phi, theta)) = darboux_angles(ps, ns, &points[t], &normals[t]) else {
            continue;
        };
        hist[bin(alpha, -1.0, 1.0)] += 1.0;
        hist[BINS + bin(phi, -1.0, 1.0)] += 1.0;
        hist[2 * BINS + bin(theta, -PI, PI)] += 1.0;
        pairs += 1;
    }
    if pairs == 0 {
        return Err(Error::NoValidPairs { index: point });
    }
    let scale = 1.0 / (3.0 * pairs as f64);
    hist.iter_mut().for_each(|h| *h *= scale);
    Ok(hist)
}

/// Connected components of the reference graph given by `neighbors`.
fn components(neighbors: &[Vec<usize>]) -> Vec<usize> {
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut parent: Vec<usize> = (0..neighbors.len()).collect();
    for (a, nbrs) in neighbors.iter().enumerate() {
        for &b in nbrs {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    (0..neighbors.len()).map(|x| find(&mut parent, x)).collect()
}

/// Normals at the reference points, each oriented away from the centroid of
/// its connected component in the histogram-neighbourhood graph.
///
/// Component centroids move with the cloud under rigid motion, so the
/// orientation does too, and disjoint copies of a shape orient identically.
/// Normals (nearly) orthogonal to the centroid offset fall back to
/// [`orient_largest_positive`].
fn reference_normals(
    refs: &[[f64; 3]],
    ref_ids: &[usize],
    ref_index: &NeighborIndex,
    spfh_neighbors: &[Vec<usize>],
    params: &FpfhParams,
) -> Result<Vec<[f64; 3]>> {
    let comp = components(spfh_neighbors);
    let mut centroid = vec![[0.0f64; 3]; refs.len()];
    let mut count = vec![0usize; refs.len()];
    for (r, p) in refs.iter().enumerate() {
        count[comp[r]] += 1;
        for a in 0..3 {
            centroid[comp[r]][a] += p[a];
        }
    }
    for (c, n) in centroid.iter_mut().zip(&count) {
        if *n > 0 {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
    }
    let mut spread = vec![0.0f64; refs.len()];
    for (r, p) in refs.iter().enumerate() {
        let c = comp[r];
        spread[c] = spread[c].max(cloud::dist(p, &centroid[c]));
    }
    refs.par_iter()
        .enumerate()
        .map(|(r, p)| {
            let nbrs = ref_index.knn_within(p, params.k3, params.r1, false);
            if nbrs.len() < MIN_NEIGHBORS {
                return Err(Error::SparseNeighborhood {
                    index: ref_ids[r],
                    radius: params.r1,
                    found: nbrs.len(),
                    needed: MIN_NEIGHBORS,
                });
            }
            let pts: Vec<[f64; 3]> = nbrs.iter().map(|nb| refs[nb.index]).collect();
            let n = fit_normal(&pts).ok_or(Error::DegenerateNeighborhood { index: ref_ids[r] })?;
            let c = comp[r];
            let tol = 1e-6 * spread[c].max(f64::MIN_POSITIVE);
            let side = dot3(&n, &sub(p, &centroid[c]));
            Ok(if side > tol {
                n
            } else if side < -tol {
                [-n[0], -n[1], -n[2]]
            } else {
                orient_largest_positive(n)
            })
        })
        .collect()
}

/// FPFH descriptors for every point of `cloud`, rows L2-normalised.
///
/// Histograms are computed at `m_ref` FPS reference points; each point then
/// takes the histogram of its nearest reference point plus the
/// inverse-distance weighted histograms of that reference point's neighbours.
pub fn compute_fpfh(cloud: &PointCloud, params: &FpfhParams) -> Result<FeatureField> {
    params.validate()?;
    let n = cloud.len();
    if n < params.m_ref {
        return Err(Error::SampleCount {
            requested: params.m_ref,
            n,
        });
    }
    let ref_ids = cloud::fps_sample(cloud, params.m_ref, 0)?;
    let refs: Vec<[f64; 3]> = ref_ids.iter().map(|&i| cloud.point(i)).collect();
    let ref_index = NeighborIndex::from_points(refs.clone())?;
    let spfh_neighbors: Vec<Vec<usize>> = refs
        .par_iter()
        .enumerate()
        .map(|(r, p)| {
            let with_self = ref_index.knn_within(p, params.k4 + 1, params.r2, false);
            if with_self.len() < MIN_NEIGHBORS {
                return Err(Error::SparseNeighborhood {
                    index: ref_ids[r],
                    radius: params.r2,
                    found: with_self.len(),
                    needed: MIN_NEIGHBORS,
                });
            }
            Ok(with_self
                .into_iter()
                .filter(|nb| nb.dist2 != 0.0)
                .take(params.k4)
                .map(|nb| nb.index)
                .collect())
        })
        .collect::<Result<_>>()?;
    let normals = reference_normals(&refs, &ref_ids, &ref_index, &spfh_neighbors, params)?;

    let spfh: Vec<[f64; FPFH_DIM]> = (0..refs.len())
        .into_par_iter()
        .map(|r| {
            compute_spfh(r, &spfh_neighbors[r], &refs, &normals).map_err(|_| Error::NoValidPairs {
                index: ref_ids[r],
            })
        })
        .collect::<Result<_>>()?;

    let rows: Vec<[f64; FPFH_DIM]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = cloud.point(i);
            let nearest = ref_index.knn(&p, 1, false)?[0].index;
            let mut row = spfh[nearest];
            let nbrs = &spfh_neighbors[nearest];
            let inv_k = 1.0 / nbrs.len() as f64;
            for &k in nbrs {
                let w = cloud::dist(&p, &refs[k]).max(WEIGHT_FLOOR);
                let scale = inv_k / w;
                for (acc, h) in row.iter_mut().zip(&spfh[k]) {
                    *acc += scale * h;
                }
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((n, FPFH_DIM), flat).expect("row-major FPFH buffer");
    FeatureField::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coplanar_pairs_land_in_zero_bins() {
        let points = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-0.5, 0.3, 0.0]];
        let normals = vec![[0.0, 0.0, 1.0]; 4];
        let h = compute_spfh(0, &[1, 2, 3], &points, &normals).unwrap();
        let zero_bins = [bin(0.0, -1.0, 1.0), BINS + bin(0.0, -1.0, 1.0), 2 * BINS + bin(0.0, -PI, PI)];
        assert_eq!(zero_bins, [5, 16, 27]);
        for (b, v) in h.iter().enumerate() {
            let want = if zero_bins.contains(&b) { 1.0 / 3.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-15, "bin {b}");
        }
    }

    #[test]
    fn single_neighbour_sets_three_bins() {
        let points = vec![[0.0, 0.0, 0.0], [0.3, -0.2, 0.5]];
        let normals = vec![[0.0, 0.6, 0.8], [0.48, 0.6, 0.64]];
        let h = compute_spfh(0, &[1], &points, &normals).unwrap();
        let nonzero: Vec<usize> = (0..FPFH_DIM).filter(|&b| h[b] != 0.0).collect();
        assert_eq!(nonzero.len(), 3);
        assert!(nonzero[0] < BINS && nonzero[1] >= BINS && nonzero[1] < 2 * BINS && nonzero[2] >= 2 * BINS);
        for b in nonzero {
            assert!((h[b] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn histogram_mass_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<[f64; 3]> = (0..20).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let normals: Vec<[f64; 3]> = (0..20)
            .map(|_| {
                let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let l = dot3(&v, &v).sqrt();
                [v[0] / l, v[1] / l, v[2] / l]
            })
            .collect();
        let h = compute_spfh(0, &(1..20).collect::<Vec<_>>(), &points, &normals).unwrap();
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for part in h.chunks(BINS) {
            assert!((part.iter().sum::<f64>() - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_pairs_are_skipped_then_error() {
        let points = vec![[0.0; 3], [0.0; 3], [0.0, 0.0, 1.0]];
        let normals = vec![[0.0, 0.0, 1.0]; 3];
        // coincident pair and a displacement parallel to the normal
        assert!(matches!(compute_spfh(0, &[1, 2], &points, &normals), Err(Error::NoValidPairs { index: 0 })));
    }

    #[test]
    fn params_validation() {
        let ok = FpfhParams { m_ref: 512, k3: 32, k4: 100, r1: 0.04, r2: 0.08 };
        assert!(ok.validate().is_ok());
        assert!(FpfhParams { r2: 0.01, ..ok }.validate().is_err());
        assert!(FpfhParams { m_ref: 16, ..ok }.validate().is_err());
        assert!(FpfhParams { k3: 2, ..ok }.validate().is_err());
    }

    #[test]
    fn sparse_reference_neighbourhood_is_reported() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0]]).unwrap();
        let params = FpfhParams { m_ref: 4, k3: 3, k4: 3, r1: 1.5, r2: 1.5 };
        let err = compute_fpfh(&cloud, &params).unwrap_err();
        assert!(matches!(err, Error::SparseNeighborhood { needed: 3, .. }), "{err:?}");
    }

    #[test]
    fn too_few_points_for_reference_set() {
        let cloud = PointCloud::new(vec![[0.0; 3]; 3]).unwrap();
        let params = FpfhParams { m_ref: 4, k3: 3, k4: 3, r1: 1.0, r2: 1.0 };
        assert!(matches!(compute_fpfh(&cloud, &params), Err(Error::SampleCount { .. })));
    }
}
