//! Seeded synthetic scenes with known labels and prototype features.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::cloud::PointCloud;
use crate::error::Result;
use crate::features::FeatureField;

/// Rotation matrix plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidMotion {
    /// Uniformly distributed rotation (random unit quaternion) and a
    /// translation with components in `[-shift, shift]`.
    pub fn random(rng: &mut impl Rng, shift: f64) -> Self {
        let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let tau = std::f64::consts::TAU;
        let x = (1.0 - u1).sqrt() * (tau * u2).sin();
        let y = (1.0 - u1).sqrt() * (tau * u2).cos();
        let z = u1.sqrt() * (tau * u3).sin();
        let w = u1.sqrt() * (tau * u3).cos();
        let rotation = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ];
        let translation = [
            rng.random_range(-shift..=shift),
            rng.random_range(-shift..=shift),
            rng.random_range(-shift..=shift),
        ];
        Self { rotation, translation }
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotate(p);
        [
            q[0] + self.translation[0],
            q[1] + self.translation[1],
            q[2] + self.translation[2],
        ]
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> Result<PointCloud> {
        let coords = (0..cloud.len())
            .map(|i| self.apply(cloud.point(i)).map(|c| c as f32))
            .collect();
        let out = PointCloud::new(coords)?;
        match cloud.labels() {
            Some(l) => out.with_labels(l.to_vec()),
            None => Ok(out),
        }
    }
}

/// Plane-plus-sphere scene with per-class prototype features.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Labelled cloud: 0 = plane, 1 = sphere.
    pub cloud: PointCloud,
    pub labels: Vec<u32>,
    /// One unit prototype per class, shape `2 x dim`.
    pub prototypes: Array2<f64>,
    /// Prototype of each point plus Gaussian noise, rows normalised.
    pub features: FeatureField,
}

impl Scene {
    /// Mean cosine between each valid row of `features` and its point's prototype.
    pub fn mean_prototype_cosine(&self, features: &FeatureField) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &l) in self.labels.iter().enumerate() {
            if features.is_valid(i) {
                total += crate::linalg::cosine(features.row(i), self.prototypes.row(l as usize));
                count += 1;
            }
        }
        total / count.max(1) as f64
    }
}

/// `n` points split evenly between a unit-square plane at z = 0 and a sphere
/// of radius 0.25 centred 0.5 above it; features are the class prototype plus
/// i.i.d. `N(0, sigma^2)` noise per component.
pub fn plane_and_sphere(n: usize, dim: usize, sigma: f64, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_plane = n / 2;
    let mut coords = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_plane {
        let x: f64 = rng.random_range(-0.5..0.5);
        let y: f64 = rng.random_range(-0.5..0.5);
        coords.push([x as f32, y as f32, 0.0]);
        labels.push(0);
    }
    for _ in n_plane..n {
        let v = unit_gaussian(&mut rng, 3);
        coords.push([
            (0.25 * v[0]) as f32,
            (0.25 * v[1]) as f32,
            (0.5 + 0.25 * v[2]) as f32,
        ]);
        labels.push(1);
    }
    let cloud = PointCloud::new(coords)?.with_labels(labels.clone())?;

    let mut prototypes = Array2::zeros((2, dim));
    for c in 0..2 {
        let v = unit_gaussian(&mut rng, dim);
        prototypes.row_mut(c).assign(&ndarray::Array1::from(v));
    }
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let raw = Array2::from_shape_fn((n, dim), |(i, k)| {
        prototypes[[labels[i] as usize, k]] + noise.sample(&mut rng)
    });
    let features = FeatureField::new(raw)?;
    Ok(Scene {
        cloud,
        labels,
        prototypes,
        features,
    })
}

/// Smooth bumpy surface patch; good for descriptor tests.
pub fn bumpy_surface(n: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(-0.5..0.5);
            let y: f64 = rng.random_range(-0.5..0.5);
            let z = 0.15 * (4.0 * x).sin() * (3.0 * y).cos() + 0.1 * x * y;
            [x as f32, y as f32, z as f32]
        })
        .collect();
    PointCloud::new(coords)
}

/// Random unit rows, `n x dim`.
pub fn random_unit_rows(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((n, dim));
    for i in 0..n {
        let v = unit_gaussian(&mut rng, dim);
        out.row_mut(i).assign(&ndarray::Array1::from(v));
    }
    out
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
