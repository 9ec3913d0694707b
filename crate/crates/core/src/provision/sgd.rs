//! Low-rank matrix factorization by stochastic gradient descent.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdParams {
    pub rank: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop once the training loss changes by less than this between epochs.
    pub tolerance: f64,
    pub l2: f64,
    /// Factors start uniform in [-init_scale, init_scale].
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for SgdParams {
    fn default() -> Self {
        SgdParams {
            rank: 4,
            learning_rate: 0.01,
            epochs: 2000,
            tolerance: 1e-6,
            l2: 1e-4,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub epochs_run: usize,
    pub train_loss: f64,
}

impl Factors {
    pub fn predict(&self, row: usize, col: usize) -> f64 {
        dot(&self.u[row], &self.v[col])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn loss(u: &[Vec<f64>], v: &[Vec<f64>], cells: &[(usize, usize, f64)]) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    cells
        .iter()
        .map(|&(r, c, x)| (x - dot(&u[r], &v[c])).powi(2))
        .sum::<f64>()
        / cells.len() as f64
}

/// Fits `R ≈ U·Vᵀ` on the observed `(row, col, value)` cells with squared
/// loss and L2 regularization.
pub fn factorize(rows: usize, cols: usize, cells: &[(usize, usize, f64)], params: &SgdParams) -> Factors {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let s = params.init_scale;
    let mut init = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..params.rank).map(|_| rng.gen_range(-s..=s)).collect())
            .collect()
    };
    let mut u = init(rows);
    let mut v = init(cols);
    let mut order: Vec<usize> = (0..cells.len()).collect();
    let mut prev = loss(&u, &v, cells);
    let mut epochs_run = 0;
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (r, c, x) = cells[i];
            let err = x - dot(&u[r], &v[c]);
            for k in 0..params.rank {
                let (uk, vk) = (u[r][k], v[c][k]);
                u[r][k] += params.learning_rate * (err * vk - params.l2 * uk);
                v[c][k] += params.learning_rate * (err * uk - params.l2 * vk);
            }
        }
        epochs_run += 1;
        let l = loss(&u, &v, cells);
        if (prev - l).abs() < params.tolerance {
            prev = l;
            break;
        }
        prev = l;
    }
    Factors {
        u,
        v,
        epochs_run,
        train_loss: prev,
    }
}
