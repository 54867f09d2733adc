use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{norm, Curvature};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub curvature: f64,
    pub samples: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryCheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl GeometryCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Uniform point in the ball of radius `fraction / sqrt(c)`.
fn ball_point(rng: &mut ChaCha8Rng, d: usize, c: Curvature, fraction: f64) -> Vec<f64> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut v: Vec<f64> = (0..d).map(|_| unit.sample(rng)).collect();
    let n = norm(&v);
    let r = fraction * c.radius() * rng.random::<f64>().powf(1.0 / d as f64);
    v.iter_mut().for_each(|x| *x *= r / n);
    v
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Gyrogroup identities and exp/log round trips on random in-ball points.
///
/// Per curvature: left identity `0 (+) a = a`, left inverse `(-a) (+) a = 0`,
/// norm symmetry `||(-a) (+) b|| = ||(-b) (+) a||`, and round trips through the
/// maps at the origin and at random basepoints with `||x|| sqrt(c) <= 0.9`.
pub fn geometry_check(curvatures: &[Curvature], pairs: usize, dim: usize, seed: u64) -> GeometryCheckReport {
    let mut checks = Vec::new();
    for &c in curvatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ c.value().to_bits());
        let mut worst = [0.0f64; 6];
        let zero = vec![0.0; dim];
        for _ in 0..pairs {
            let a = ball_point(&mut rng, dim, c, 0.9);
            let b = ball_point(&mut rng, dim, c, 0.9);
            let na: Vec<f64> = a.iter().map(|v| -v).collect();
            let nb: Vec<f64> = b.iter().map(|v| -v).collect();

            worst[0] = worst[0].max(max_abs_diff(&c.mobius_add(&zero, &a), &a));
            worst[1] = worst[1].max(norm(&c.mobius_add(&na, &a)));
            worst[2] = worst[2].max((norm(&c.mobius_add(&na, &b)) - norm(&c.mobius_add(&nb, &a))).abs());

            let v = c.log0(&a);
            worst[3] = worst[3].max(max_abs_diff(&c.exp0(&v), &a)).max(max_abs_diff(&c.log0(&c.exp0(&v)), &v));

            let u = c.log_map(&a, &b);
            let back = c.exp_map(&a, &u);
            worst[4] = worst[4].max(max_abs_diff(&back, &b));
            worst[5] = worst[5].max(max_abs_diff(&c.log_map(&a, &back), &u));
        }
        let names = [
            ("left identity", 1e-12),
            ("left inverse", 1e-12),
            ("norm symmetry", 1e-10),
            ("exp/log round trip at origin", 1e-9),
            ("exp(log) at basepoint", 1e-9),
            ("log(exp) at basepoint", 1e-9),
        ];
        for ((name, tolerance), max_residual) in names.into_iter().zip(worst) {
            checks.push(CheckResult {
                name: name.to_string(),
                curvature: c.value(),
                samples: pairs,
                max_residual,
                tolerance,
                passed: max_residual < tolerance,
            });
        }
    }
    GeometryCheckReport { seed, checks }
}
