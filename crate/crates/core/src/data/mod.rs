//! Point clouds, datasets, synthetic primitives, OFF meshes and the PCD1 container.

mod container;
mod off;
mod primitives;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use container::{read_dataset, read_dataset_file, write_dataset, write_dataset_file, PCD_MAGIC};
pub use off::{load_off_dir, parse_off, sample_mesh, OffDataset, OffError, TriMesh};
pub use primitives::{generate_primitives, sample_primitive_surface, Primitive};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::real::Real;

/// One labelled cloud of 3-D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub label: usize,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                c[d] += p[d] as f64;
            }
        }
        let n = self.points.len().max(1) as f64;
        c.map(|v| v / n)
    }

    /// Largest distance of a point from the origin.
    pub fn max_radius(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Centers a cloud on its centroid and scales it into the unit ball.
pub fn normalize(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let centered: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [0, 1, 2].map(|d| p[d] as f64 - c[d]))
        .collect();
    let r = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    let s = if r > 0.0 { 1.0 / r } else { 1.0 };
    PointCloud {
        points: centered.iter().map(|p| p.map(|v| (v * s) as f32)).collect(),
        label: cloud.label,
    }
}

/// Adds `clamp(N(0, sigma²), -clip, clip)` to every coordinate.
pub fn jitter(cloud: &PointCloud, sigma: f64, clip: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| p.map(|v| jitter_value(v, sigma, clip, &mut rng)))
            .collect(),
        label: cloud.label,
    }
}

/// In-place [`jitter`] of a batch tensor.
pub fn jitter_tensor<T: Real, R: Rng + ?Sized>(x: &mut Tensor<T>, sigma: f64, clip: f64, rng: &mut R) {
    for v in x.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += T::of((sigma * z).clamp(-clip, clip));
    }
}

fn jitter_value<R: Rng + ?Sized>(v: f32, sigma: f64, clip: f64, rng: &mut R) -> f32 {
    if sigma == 0.0 {
        return v;
    }
    let z: f64 = StandardNormal.sample(rng);
    let mut out = (v as f64 + (sigma * z).clamp(-clip, clip)) as f32;
    // Rounding to f32 may overshoot the clip by a fraction of an ulp.
    while (out as f64 - v as f64).abs() > clip {
        out = if out > v { out.next_down() } else { out.next_up() };
    }
    out
}

/// Labelled clouds sharing one point count.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub num_classes: usize,
    pub points: usize,
}

impl Dataset {
    pub fn new(clouds: Vec<PointCloud>, num_classes: usize, points: usize) -> Result<Self> {
        for (i, c) in clouds.iter().enumerate() {
            if c.points.len() != points {
                return Err(Error::shape(format!("cloud {i} has {} points, expected {points}", c.points.len())));
            }
            if c.label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: c.label,
                    classes: num_classes,
                });
            }
            if c.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::format("point cloud", format!("cloud {i} has non-finite coordinates")));
            }
        }
        Ok(Dataset {
            clouds,
            num_classes,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clouds.iter().map(|c| c.label).collect()
    }

    /// `batch × points × 3` tensor and labels for the given cloud indices.
    pub fn batch<T: Real>(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(idx.len() * self.points * 3);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let c = self
                .clouds
                .get(i)
                .ok_or_else(|| Error::shape(format!("cloud index {i} out of {}", self.len())))?;
            data.extend(c.points.iter().flatten().map(|&v| T::of(v as f64)));
            labels.push(c.label);
        }
        Ok((Tensor::from_vec(&[idx.len(), self.points, 3], data)?, labels))
    }

    /// Shuffles with `seed` and splits off the first `train_fraction` as the training set.
    pub fn split(mut self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.clouds.shuffle(&mut rng);
        let cut = ((self.clouds.len() as f64) * train_fraction.clamp(0.0, 1.0)).round() as usize;
        let test = self.clouds.split_off(cut);
        (
            Dataset {
                clouds: self.clouds,
                num_classes: self.num_classes,
                points: self.points,
            },
            Dataset {
                clouds: test,
                num_classes: self.num_classes,
                points: self.points,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud {
            points: (0..n).map(|_| [0; 3].map(|_| rng.random_range(-3.0f32..5.0))).collect(),
            label: 0,
        }
    }

    #[test]
    fn normalize_centers_and_scales() {
        let c = normalize(&random_cloud(1, 500));
        assert!(c.centroid().iter().all(|v| v.abs() < 1e-6));
        assert!((c.max_radius() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_is_idempotent() {
        let a = normalize(&random_cloud(2, 300));
        let b = normalize(&a);
        for (p, q) in a.points.iter().zip(&b.points) {
            for d in 0..3 {
                assert!((p[d] - q[d]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn jitter_zero_sigma_is_identity() {
        let c = random_cloud(3, 50);
        assert_eq!(jitter(&c, 0.0, 0.05, 9), c);
    }

    #[test]
    fn jitter_respects_clip() {
        let c = random_cloud(4, 2000);
        let j = jitter(&c, 0.5, 0.01, 10);
        let mut moved = 0;
        for (p, q) in c.points.iter().zip(&j.points) {
            for d in 0..3 {
                let disp = (q[d] as f64 - p[d] as f64).abs();
                assert!(disp <= 0.01, "{disp}");
                moved += (disp > 0.0) as usize;
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn dataset_validation() {
        let c = random_cloud(5, 10);
        assert!(Dataset::new(vec![c.clone()], 1, 10).is_ok());
        assert!(matches!(Dataset::new(vec![c.clone()], 1, 11), Err(Error::Shape(_))));
        let mut bad = c;
        bad.label = 3;
        assert!(matches!(Dataset::new(vec![bad], 2, 10), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn split_is_deterministic_and_complete() {
        let clouds: Vec<_> = (0..50).map(|i| PointCloud { label: i % 5, ..random_cloud(i as u64, 4) }).collect();
        let d = Dataset::new(clouds, 5, 4).unwrap();
        let (a, b) = d.clone().split(0.8, 3);
        let (a2, b2) = d.clone().split(0.8, 3);
        assert_eq!((a.len(), b.len()), (40, 10));
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn batch_layout() {
        let c = PointCloud {
            points: vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
            label: 1,
        };
        let d = Dataset::new(vec![c], 2, 2).unwrap();
        let (x, l) = d.batch::<f64>(&[0, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 3]);
        assert_eq!(&x.data()[..6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(l, vec![1, 1]);
        assert!(d.batch::<f32>(&[1]).is_err());
    }
}
