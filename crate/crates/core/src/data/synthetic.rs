use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetTask, Split};
use crate::error::{IbtError, Result};
use crate::geometry::PointCloud;
use crate::layers::derive_seed;

/// Analytic surfaces with labeled regions.
///
/// | family   | parts                                   |
/// |----------|-----------------------------------------|
/// | sphere   | upper / lower hemisphere                |
/// | cube     | faces normal to x / y / z               |
/// | cylinder | side / top cap / bottom cap             |
/// | torus    | inner / outer half of the tube          |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Sphere, Family::Cube, Family::Cylinder, Family::Torus];

    pub fn num_parts(self) -> usize {
        match self {
            Family::Sphere | Family::Torus => 2,
            Family::Cube | Family::Cylinder => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Sphere => "sphere",
            Family::Cube => "cube",
            Family::Cylinder => "cylinder",
            Family::Torus => "torus",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = IbtError;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| IbtError::Config(format!("unknown shape family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub families: Vec<Family>,
    pub per_class: usize,
    pub points: usize,
    /// Gaussian coordinate noise added after labeling.
    pub noise: f64,
    /// Relative spread of the shape parameters (aspect ratios) per cloud.
    pub jitter: f64,
    /// Apply a uniformly random rotation to every cloud.
    pub rotate: bool,
    pub task: DatasetTask,
    pub split: Split,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(families: Vec<Family>, per_class: usize, points: usize, seed: u64) -> Self {
        SyntheticSpec {
            families,
            per_class,
            points,
            noise: 0.01,
            jitter: 0.15,
            rotate: false,
            task: DatasetTask::Classification,
            split: Split::Train,
            seed,
        }
    }
}

/// Deterministic in `spec`: each cloud draws from its own generator keyed by
/// the seed, split and index.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.families.is_empty() {
        return Err(IbtError::Config("synthetic dataset needs at least one shape family".into()));
    }
    if spec.points == 0 {
        return Err(IbtError::Config("synthetic clouds need at least one point".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(IbtError::Config(format!("noise must be a finite σ ≥ 0, got {}", spec.noise)));
    }
    if !(0.0..1.0).contains(&spec.jitter) {
        return Err(IbtError::Config(format!("jitter must lie in [0, 1), got {}", spec.jitter)));
    }
    let mut part_ranges = Vec::with_capacity(spec.families.len());
    let mut offset = 0;
    for f in &spec.families {
        part_ranges.push(offset..offset + f.num_parts());
        offset += f.num_parts();
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| IbtError::Config(e.to_string()))?;

    let mut clouds = Vec::with_capacity(spec.families.len() * spec.per_class);
    for i in 0..spec.per_class {
        for (class, &family) in spec.families.iter().enumerate() {
            let name = format!("{}_{}_{i:04}", spec.split, family);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &name));
            let (mut coords, parts) = sample_family(family, spec.points, spec.jitter, &mut rng);
            if spec.rotate {
                let r = random_rotation(&mut rng);
                coords.iter_mut().for_each(|p| *p = rotate(&r, p));
            }
            if spec.noise > 0.0 {
                for p in &mut coords {
                    p.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                }
            }
            let mut cloud = PointCloud::new(coords, name)?.with_category(class);
            if spec.task == DatasetTask::PartSegmentation {
                let base = part_ranges[class].start;
                cloud = cloud.with_labels(parts.iter().map(|p| base + p).collect())?;
            }
            clouds.push(cloud);
        }
    }
    let ds = Dataset {
        clouds,
        class_names: spec.families.iter().map(|f| f.name().to_string()).collect(),
        split: spec.split,
        task: spec.task,
        part_ranges: if spec.task == DatasetTask::PartSegmentation { part_ranges } else { Vec::new() },
    };
    ds.validate()?;
    Ok(ds)
}

fn spread(rng: &mut ChaCha8Rng, jitter: f64) -> f64 {
    if jitter == 0.0 {
        1.0
    } else {
        1.0 + rng.random_range(-jitter..jitter)
    }
}

/// Points on the surface with their family-local part index.
pub(crate) fn sample_family(family: Family, n: usize, jitter: f64, rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, Vec<usize>) {
    let mut coords = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(n);
    match family {
        Family::Sphere => {
            for _ in 0..n {
                let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
                let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(f64::MIN_POSITIVE);
                let p = [v[0] / r, v[1] / r, v[2] / r];
                parts.push(usize::from(p[2] < 0.0));
                coords.push(p);
            }
        }
        Family::Cube => {
            let h: [f64; 3] = std::array::from_fn(|_| 0.6 * spread(rng, jitter));
            // Face pair normal to axis a has area 2 * (4 h_b h_c).
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let total: f64 = areas.iter().sum();
            for _ in 0..n {
                let mut u = rng.random_range(0.0..total);
                let mut axis = 0;
                while axis < 2 && u >= areas[axis] {
                    u -= areas[axis];
                    axis += 1;
                }
                let mut p: [f64; 3] = std::array::from_fn(|a| rng.random_range(-h[a]..h[a]));
                p[axis] = if rng.random_bool(0.5) { h[axis] } else { -h[axis] };
                coords.push(p);
                parts.push(axis);
            }
        }
        Family::Cylinder => {
            let r = 0.6 * spread(rng, jitter);
            let half = 0.7 * spread(rng, jitter);
            let side = 2.0 * PI * r * 2.0 * half;
            let cap = PI * r * r;
            for _ in 0..n {
                let t = rng.random_range(0.0..2.0 * PI);
                let u = rng.random_range(0.0..side + 2.0 * cap);
                if u < side {
                    coords.push([r * t.cos(), r * t.sin(), rng.random_range(-half..half)]);
                    parts.push(0);
                } else {
                    let rho = r * rng.random::<f64>().sqrt();
                    let top = u < side + cap;
                    coords.push([rho * t.cos(), rho * t.sin(), if top { half } else { -half }]);
                    parts.push(if top { 1 } else { 2 });
                }
            }
        }
        Family::Torus => {
            let major = 0.7 * spread(rng, jitter);
            let minor = 0.3 * spread(rng, jitter);
            while coords.len() < n {
                let theta = rng.random_range(0.0..2.0 * PI);
                // Area element is proportional to R + r cos(theta).
                if rng.random_range(0.0..major + minor) > major + minor * theta.cos() {
                    continue;
                }
                let phi = rng.random_range(0.0..2.0 * PI);
                let ring = major + minor * theta.cos();
                coords.push([ring * phi.cos(), ring * phi.sin(), minor * theta.sin()]);
                parts.push(usize::from(theta.cos() >= 0.0));
            }
        }
    }
    (coords, parts)
}

type Mat3 = [[f64; 3]; 3];

/// Uniform rotation from a random unit quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    let mut q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    q.iter_mut().for_each(|v| *v /= n);
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(r: &Mat3, p: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_family_list_is_config_error() {
        let spec = SyntheticSpec::new(vec![], 2, 16, 0);
        assert!(matches!(gen_synthetic(&spec), Err(IbtError::Config(_))));
    }

    #[test]
    fn rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_rotation(&mut rng);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn part_ranges_are_contiguous() {
        let mut spec = SyntheticSpec::new(Family::ALL.to_vec(), 1, 64, 3);
        spec.task = DatasetTask::PartSegmentation;
        let ds = gen_synthetic(&spec).unwrap();
        assert_eq!(ds.part_ranges, vec![0..2, 2..5, 5..8, 8..10]);
        assert_eq!(ds.num_parts(), 10);
    }
}
