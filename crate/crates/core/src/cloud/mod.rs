//! Point-cloud container and the geometric services built on it.

mod fps;
mod index;
mod normals;

pub use fps::{fps_sample, fps_sample_with_distances};
pub use index::{Neighbor, NeighborIndex};
pub use normals::{estimate_normals, fit_normal, orient_largest_positive, NormalField};

use crate::error::{Error, Result};

/// Coordinates with optional per-point integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f32; 3]>,
    labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f32; 3]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(index) = coords
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::NonFiniteCoordinate { index });
        }
        Ok(Self {
            coords,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.coords.len() {
            return Err(Error::LabelLength {
                labels: labels.len(),
                points: self.coords.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f32; 3]] {
        &self.coords
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Point `i` widened to double precision.
    #[inline]
    pub fn point(&self, i: usize) -> [f64; 3] {
        let p = self.coords[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    pub fn points_f64(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in 0..self.len() {
            let p = self.point(i);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// New cloud holding the rows at `indices`, labels carried along.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut coords = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, n });
            }
            coords.push(self.coords[i]);
        }
        let mut out = PointCloud::new(coords)?;
        if let Some(labels) = &self.labels {
            out.labels = Some(indices.iter().map(|&i| labels[i]).collect());
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub(crate) fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    dist2(a, b).sqrt()
}
