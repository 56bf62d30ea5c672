//! Object shapes: canonical-pose point clouds with a keypoint subset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::Vec3;
use crate::types::ObjectPose;

pub const DEFAULT_POINTS: usize = 256;
pub const DEFAULT_KEYPOINTS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectShape {
    pub points: Vec<Vec3>,
    /// Indices into `points`.
    pub keypoints: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Box { half_extents: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
    SphereShell { radius: f64 },
}

impl Primitive {
    /// Draws a primitive with desk-scale dimensions (10–25 cm).
    pub fn random(rng: &mut impl Rng) -> Self {
        match rng.random_range(0..3) {
            0 => Primitive::Box {
                half_extents: [
                    rng.random_range(0.06..0.14),
                    rng.random_range(0.06..0.14),
                    rng.random_range(0.06..0.14),
                ],
            },
            1 => Primitive::Cylinder {
                radius: rng.random_range(0.05..0.10),
                half_height: rng.random_range(0.07..0.15),
            },
            _ => Primitive::SphereShell {
                radius: rng.random_range(0.07..0.13),
            },
        }
    }
}

impl ObjectShape {
    pub fn new(points: Vec<Vec3>, keypoints: Vec<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointCloud("object shape"));
        }
        if let Some(&k) = keypoints.iter().find(|&&k| k >= points.len()) {
            return Err(Error::Index {
                index: k as i64,
                valid: format!("0..{}", points.len()),
            });
        }
        Ok(Self { points, keypoints })
    }

    /// Samples `n` surface points of the primitive and picks `k` keypoints by
    /// farthest-point sampling.
    pub fn sample(primitive: Primitive, n: usize, k: usize, seed: u64) -> Result<Self> {
        if n == 0 || k == 0 || k > n {
            return Err(Error::InvalidValue(format!(
                "need 0 < keypoints <= points, got {k} of {n}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec3> = (0..n).map(|_| sample_surface(primitive, &mut rng)).collect();
        let keypoints = farthest_point_sampling(&points, k);
        Self::new(points, keypoints)
    }

    pub fn default_box(seed: u64) -> Self {
        Self::sample(
            Primitive::Box {
                half_extents: [0.1, 0.1, 0.1],
            },
            DEFAULT_POINTS,
            DEFAULT_KEYPOINTS,
            seed,
        )
        .expect("valid default box")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn posed(&self, pose: &ObjectPose) -> Vec<Vec3> {
        self.points.iter().map(|p| pose.apply(p)).collect()
    }

    pub fn posed_keypoints(&self, pose: &ObjectPose) -> Vec<Vec3> {
        self.keypoints.iter().map(|&k| pose.apply(&self.points[k])).collect()
    }
}

fn sample_surface(primitive: Primitive, rng: &mut impl Rng) -> Vec3 {
    match primitive {
        Primitive::Box { half_extents: h } => {
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 0;
            while axis < 2 && pick >= areas[axis] {
                pick -= areas[axis];
                axis += 1;
            }
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut p = Vec3::new(
                rng.random_range(-h[0]..h[0]),
                rng.random_range(-h[1]..h[1]),
                rng.random_range(-h[2]..h[2]),
            );
            p[axis] = sign * h[axis];
            p
        }
        Primitive::Cylinder {
            radius,
            half_height,
        } => {
            let side = 2.0 * radius * 2.0 * half_height;
            let caps = radius * radius;
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            if rng.random_range(0.0..side + caps) < side {
                Vec3::new(
                    radius * theta.cos(),
                    rng.random_range(-half_height..half_height),
                    radius * theta.sin(),
                )
            } else {
                let r = radius * rng.random::<f64>().sqrt();
                let y = if rng.random_bool(0.5) { half_height } else { -half_height };
                Vec3::new(r * theta.cos(), y, r * theta.sin())
            }
        }
        Primitive::SphereShell { radius } => {
            let z: f64 = rng.random_range(-1.0..1.0);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            Vec3::new(r * theta.cos(), z, r * theta.sin()) * radius
        }
    }
}

fn farthest_point_sampling(points: &[Vec3], k: usize) -> Vec<usize> {
    let mut chosen = vec![0];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[0]).norm()).collect();
    while chosen.len() < k {
        let (next, _) = dist
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm());
        }
    }
    chosen
}
