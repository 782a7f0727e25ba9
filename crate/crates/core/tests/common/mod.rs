#![allow(dead_code)]

use agespace::discretize::SpatialMesh;
use agespace::evolution::AgeGrid;
use agespace::model::{parse_model, ModelSpec};

pub fn load(src: &str) -> (ModelSpec, SpatialMesh, AgeGrid) {
    let m = parse_model(src).expect("test model parses");
    let mesh = SpatialMesh::for_model(&m).unwrap();
    let grid = AgeGrid::for_model(&m).unwrap();
    (m, mesh, grid)
}

pub fn load_file(name: &str) -> (ModelSpec, SpatialMesh, AgeGrid) {
    let path = format!("{}/../../models/{name}", env!("CARGO_MANIFEST_DIR"));
    load(&std::fs::read_to_string(path).expect("model file exists"))
}

pub fn model_path(name: &str) -> String {
    format!("{}/../../models/{name}", env!("CARGO_MANIFEST_DIR"))
}

/// One node of a transport-free model: the lagged implicit recursion
/// `u_{k+1} = u_k / (1 + da mu(u_k, a_{k+1}))` and the trapezoid sum
/// `F(B) = sum_k w_k beta(u_k) u_k`.
pub struct ScalarOracle {
    pub a_max: f64,
    pub na: usize,
    pub mu: fn(f64, f64) -> f64,
    pub beta: Box<dyn Fn(f64) -> f64>,
}

impl ScalarOracle {
    pub fn trajectory(&self, b: f64) -> Vec<f64> {
        let da = self.a_max / self.na as f64;
        let mut u = vec![b];
        for k in 0..self.na {
            let a = (k + 1) as f64 * da;
            let prev = u[k];
            u.push(prev / (1.0 + da * (self.mu)(prev, a)));
        }
        u
    }

    pub fn birth(&self, b: f64) -> f64 {
        let da = self.a_max / self.na as f64;
        self.trajectory(b)
            .iter()
            .enumerate()
            .map(|(k, &u)| {
                let w = if k == 0 || k == self.na { 0.5 * da } else { da };
                w * (self.beta)(u) * u
            })
            .sum()
    }

    /// Positive root of `B = n F(B)` by bisection on `[lo, hi]`.
    pub fn solve(&self, n: f64, lo: f64, hi: f64) -> f64 {
        let f = |b: f64| n * self.birth(b) - b;
        let (mut lo, mut hi) = (lo, hi);
        assert!(f(lo) > 0.0 && f(hi) < 0.0, "oracle bracket does not straddle the root");
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// `F(B) / B` as `B -> 0`, the scalar reproduction number.
    pub fn r0(&self) -> f64 {
        self.birth(1e-200) / 1e-200
    }
}

pub fn sup_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
