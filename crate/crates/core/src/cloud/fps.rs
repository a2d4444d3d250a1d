use rayon::prelude::*;

use super::{dist2, PointCloud};
use crate::error::{Error, Result};

/// Farthest point sampling from `start`.
pub fn fps_sample(cloud: &PointCloud, count: usize, start: usize) -> Result<Vec<usize>> {
    fps_sample_with_distances(cloud, count, start).map(|(idx, _)| idx)
}

/// Farthest point sampling that also reports, for each selection after the
/// first, its distance to the nearest previously selected point.
///
/// Ties in the max-min distance resolve to the smallest index.
pub fn fps_sample_with_distances(
    cloud: &PointCloud,
    count: usize,
    start: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = cloud.len();
    if count == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    if count > n {
        return Err(Error::SampleCount { requested: count, n });
    }
    if start >= n {
        return Err(Error::IndexOutOfRange { index: start, n });
    }
    let points = cloud.points_f64();
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut selected = Vec::with_capacity(count);
    let mut step_dists = Vec::with_capacity(count.saturating_sub(1));
    let mut taken = vec![false; n];
    let mut current = start;
    selected.push(current);
    taken[current] = true;
    while selected.len() < count {
        let c = points[current];
        min_d2
            .par_iter_mut()
            .zip(points.par_iter())
            .for_each(|(m, p)| *m = m.min(dist2(&c, p)));
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, &d2) in min_d2.iter().enumerate() {
            if !taken[i] && d2 > best_d2 {
                best = i;
                best_d2 = d2;
            }
        }
        current = best;
        taken[current] = true;
        selected.push(current);
        step_dists.push(best_d2.sqrt());
    }
    Ok((selected, step_dists))
}
