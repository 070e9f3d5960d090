use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EnvState;

pub const LATENT_DIM: usize = 16;
pub const RAW_FEATURES: usize = 9;
const PROJECTION_SEED: u64 = 0x5eed_f00d_cafe_0001;
const PROJECTION_SCALE: f64 = 0.25;

/// Encoded observation of one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Latent(pub Vec<f64>);

impl Latent {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn distance(&self, other: &Latent) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

/// Raw state features, each roughly in [-1, 1]:
/// agent xy, object xy, goal xy (mapped 2p-1), gripper, holding (+/-1),
/// contact phase (+/-1).
pub fn raw_features(s: &EnvState) -> [f64; RAW_FEATURES] {
    let m = |v: f64| 2.0 * v - 1.0;
    let flag = |b: bool| if b { 1.0 } else { -1.0 };
    [
        m(s.agent[0]),
        m(s.agent[1]),
        m(s.object[0]),
        m(s.object[1]),
        m(s.goal[0]),
        m(s.goal[1]),
        s.gripper,
        flag(s.holding),
        flag(s.phase == super::Phase::Contact),
    ]
}

/// The fixed 16x9 projection, drawn once and checked for full column rank.
pub fn projection() -> &'static [[f64; RAW_FEATURES]; LATENT_DIM] {
    static P: OnceLock<[[f64; RAW_FEATURES]; LATENT_DIM]> = OnceLock::new();
    P.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        let normal = Normal::new(0.0, PROJECTION_SCALE).unwrap();
        let mut p = [[0.0; RAW_FEATURES]; LATENT_DIM];
        for row in p.iter_mut() {
            for v in row.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        let rows: Vec<Vec<f64>> = p.iter().map(|r| r.to_vec()).collect();
        assert_eq!(column_rank(&rows, 1e-9), RAW_FEATURES, "projection lost rank");
        p
    })
}

/// Column rank by Gram-Schmidt on the columns.
pub fn column_rank(m: &[Vec<f64>], tol: f64) -> usize {
    let cols = m.first().map_or(0, Vec::len);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in 0..cols {
        let mut v: Vec<f64> = m.iter().map(|r| r[c]).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > tol {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis.len()
}

/// `tanh(P · raw_features(state))`
pub fn encode_latent(s: &EnvState) -> Latent {
    let f = raw_features(s);
    let p = projection();
    Latent(p.iter().map(|row| row.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>().tanh()).collect())
}
