//! Synthetic classification set of 3-D surface primitives.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{normalize, Dataset, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
}

impl Primitive {
    pub const ALL: [Primitive; 5] = [
        Primitive::Sphere,
        Primitive::Cube,
        Primitive::Cylinder,
        Primitive::Cone,
        Primitive::Torus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Cube => "cube",
            Primitive::Cylinder => "cylinder",
            Primitive::Cone => "cone",
            Primitive::Torus => "torus",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown primitive {s:?} (expected one of sphere, cube, cylinder, cone, torus)")))
    }
}

// Canonical dimensions.
const CYL_RADIUS: f64 = 0.5;
const CYL_HALF_HEIGHT: f64 = 1.0;
const CONE_RADIUS: f64 = 1.0;
const CONE_HEIGHT: f64 = 2.0;
const TORUS_MAJOR: f64 = 1.0;
const TORUS_MINOR: f64 = 0.35;

fn disk<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let t = 2.0 * PI * rng.random::<f64>();
    (r * t.cos(), r * t.sin())
}

/// Area-uniform samples on the canonical, unrotated surface of `shape`.
///
/// Sphere: unit radius. Cube: `[-1, 1]³`. Cylinder: radius 0.5, `z ∈ [-1, 1]`, capped.
/// Cone: base radius 1 at `z = -1`, apex at `z = 1`, capped. Torus: radii 1 and 0.35 about
/// the z axis.
pub fn sample_primitive_surface<R: Rng + ?Sized>(shape: Primitive, n: usize, rng: &mut R) -> Vec<[f64; 3]> {
    (0..n).map(|_| sample_one(shape, rng)).collect()
}

fn sample_one<R: Rng + ?Sized>(shape: Primitive, rng: &mut R) -> [f64; 3] {
    match shape {
        Primitive::Sphere => loop {
            let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if r > 1e-12 {
                break v.map(|c| c / r);
            }
        },
        Primitive::Cube => {
            let face = rng.random_range(0..6);
            let (a, b) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, a, b],
                1 => [a, s, b],
                _ => [a, b, s],
            }
        }
        Primitive::Cylinder => {
            let side = 2.0 * PI * CYL_RADIUS * 2.0 * CYL_HALF_HEIGHT;
            let cap = PI * CYL_RADIUS * CYL_RADIUS;
            let u = rng.random::<f64>() * (side + 2.0 * cap);
            if u < side {
                let t = 2.0 * PI * rng.random::<f64>();
                let z = rng.random_range(-CYL_HALF_HEIGHT..=CYL_HALF_HEIGHT);
                [CYL_RADIUS * t.cos(), CYL_RADIUS * t.sin(), z]
            } else {
                let (x, y) = disk(CYL_RADIUS, rng);
                let z = if u < side + cap { CYL_HALF_HEIGHT } else { -CYL_HALF_HEIGHT };
                [x, y, z]
            }
        }
        Primitive::Cone => {
            let slant = (CONE_RADIUS * CONE_RADIUS + CONE_HEIGHT * CONE_HEIGHT).sqrt();
            let side = PI * CONE_RADIUS * slant;
            let base = PI * CONE_RADIUS * CONE_RADIUS;
            let z0 = -CONE_HEIGHT / 2.0;
            if rng.random::<f64>() * (side + base) < side {
                // Distance from the apex grows like sqrt(u) for area uniformity.
                let f = rng.random::<f64>().sqrt();
                let t = 2.0 * PI * rng.random::<f64>();
                let r = CONE_RADIUS * f;
                [r * t.cos(), r * t.sin(), z0 + CONE_HEIGHT * (1.0 - f)]
            } else {
                let (x, y) = disk(CONE_RADIUS, rng);
                [x, y, z0]
            }
        }
        Primitive::Torus => {
            // Accept the tube angle with probability proportional to the local ring length.
            let theta = loop {
                let t = 2.0 * PI * rng.random::<f64>();
                let accept = (TORUS_MAJOR + TORUS_MINOR * t.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                if rng.random::<f64>() <= accept {
                    break t;
                }
            };
            let phi = 2.0 * PI * rng.random::<f64>();
            let ring = TORUS_MAJOR + TORUS_MINOR * theta.cos();
            [ring * phi.cos(), ring * phi.sin(), TORUS_MINOR * theta.sin()]
        }
    }
}

/// Uniformly random rotation matrix from a unit quaternion.
fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let v: [f64; 4] = [0; 4].map(|_| StandardNormal.sample(rng));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            break v.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// `per_class` clouds of each listed primitive, each randomly rotated, scaled by a factor in
/// `[0.8, 1.2]` and normalized. Labels follow the order of `classes`; clouds are grouped by
/// class.
pub fn generate_primitives(classes: &[Primitive], per_class: usize, points: usize, seed: u64) -> Result<Dataset> {
    if classes.is_empty() {
        return Err(Error::Config("no primitive classes requested".into()));
    }
    if points == 0 {
        return Err(Error::Config("points per cloud must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clouds = Vec::with_capacity(classes.len() * per_class);
    for (label, &shape) in classes.iter().enumerate() {
        for _ in 0..per_class {
            let rot = random_rotation(&mut rng);
            let scale = rng.random_range(0.8..=1.2);
            let pts = sample_primitive_surface(shape, points, &mut rng)
                .into_iter()
                .map(|p| rot.map(|row| ((row[0] * p[0] + row[1] * p[1] + row[2] * p[2]) * scale) as f32))
                .collect();
            clouds.push(normalize(&PointCloud { points: pts, label }));
        }
    }
    Dataset::new(clouds, classes.len(), points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in Primitive::ALL {
            assert_eq!(p.name().parse::<Primitive>().unwrap(), p);
        }
        assert!(matches!("pyramid".parse::<Primitive>(), Err(Error::Config(_))));
    }

    #[test]
    fn sphere_samples_have_unit_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in sample_primitive_surface(Primitive::Sphere, 2000, &mut rng) {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cube_faces_share_points_evenly() {
        let n = 6000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 6];
        for p in sample_primitive_surface(Primitive::Cube, n, &mut rng) {
            let axis = (0..3).max_by(|&a, &b| p[a].abs().total_cmp(&p[b].abs())).unwrap();
            assert!((p[axis].abs() - 1.0).abs() < 1e-12);
            counts[2 * axis + (p[axis] < 0.0) as usize] += 1;
        }
        let mean = n as f64 / 6.0;
        let sd = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn surfaces_lie_on_their_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in sample_primitive_surface(Primitive::Torus, 1000, &mut rng) {
            let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - TORUS_MAJOR;
            assert!(((ring * ring + p[2] * p[2]).sqrt() - TORUS_MINOR).abs() < 1e-9);
        }
        for p in sample_primitive_surface(Primitive::Cylinder, 1000, &mut rng) {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - CYL_RADIUS).abs() < 1e-9 || (p[2].abs() - CYL_HALF_HEIGHT).abs() < 1e-12);
        }
        for p in sample_primitive_surface(Primitive::Cone, 1000, &mut rng) {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let on_side = (r - CONE_RADIUS * (1.0 - p[2]) / CONE_HEIGHT).abs() < 1e-9;
            assert!(on_side || (p[2] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic_and_normalized() {
        let a = generate_primitives(&Primitive::ALL, 3, 64, 11).unwrap();
        let b = generate_primitives(&Primitive::ALL, 3, 64, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert_eq!(a.num_classes, 5);
        for c in &a.clouds {
            assert!(c.centroid().iter().all(|v| v.abs() < 1e-6));
            assert!((c.max_radius() - 1.0).abs() < 1e-6);
        }
        assert_ne!(a, generate_primitives(&Primitive::ALL, 3, 64, 12).unwrap());
    }

    #[test]
    fn empty_class_set_is_rejected() {
        assert!(matches!(generate_primitives(&[], 3, 10, 0), Err(Error::Config(_))));
    }
}
