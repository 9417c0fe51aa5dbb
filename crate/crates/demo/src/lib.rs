//! Browser demo of the prior and semantic-alignment pieces of `ocn-core`.
//!
//! Three operations are exported to JavaScript:
//! - [`smooth_prior`]: Laplacian smoothing of one object's verb counts;
//! - [`adjacency_heatmap`]: the verb adjacency at a chosen temperature;
//! - [`fit_alignment`]: gradient descent of the co-occurrence alignment loss.
//!
//! The same functions are plain Rust and are tested natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use ocn_core::params::ParamStore;
use ocn_core::priors::laplacian_smooth;
use ocn_core::tensor::Matrix;
use ocn_core::vsm::{adjacency_values, fit_skl, project_embeddings, VsmParams};

pub const VERBS: [&str; 6] = ["ride", "feed", "hold", "pet", "eat", "cut"];

const EMBED_DIM: usize = 12;
const DIM: usize = 8;

/// Demo co-occurrence target: ride/feed/pet go together, hold/eat/cut go
/// together, with a little mass across the groups.
pub fn target_matrix() -> Matrix {
    let group = |v: usize| usize::from(matches!(v, 2 | 4 | 5));
    let m = Matrix::from_fn(VERBS.len(), VERBS.len(), |i, j| {
        if i == j {
            0.0
        } else if group(i) == group(j) {
            1.0
        } else {
            0.08
        }
    });
    let s = m.sum();
    m.scale(1.0 / s)
}

/// Seeded random word vectors, one row per verb.
pub fn embeddings(seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(VERBS.len(), EMBED_DIM, |_, _| rng.random_range(-1.0..1.0))
}

#[wasm_bindgen]
pub fn verb_names() -> Vec<String> {
    VERBS.iter().map(|s| s.to_string()).collect()
}

/// Row-major entries of the demo co-occurrence target.
#[wasm_bindgen]
pub fn target_heatmap() -> Vec<f64> {
    target_matrix().into_data()
}

pub fn smoothed_row(counts: &[f64], beta: f64) -> Result<Vec<f64>, String> {
    if counts.is_empty() || counts.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
        return Err("counts must be finite and non-negative".into());
    }
    let total: f64 = counts.iter().sum();
    let row: Vec<f64> = if total > 0.0 { counts.iter().map(|c| c / total).collect() } else { vec![1.0 / counts.len() as f64; counts.len()] };
    let smoothed = laplacian_smooth(&Matrix::row_vector(&row), beta).map_err(|e| e.to_string())?;
    Ok(smoothed.into_data())
}

/// Normalizes verb counts to a distribution and smooths it with `beta`.
#[wasm_bindgen]
pub fn smooth_prior(counts: &[f64], beta: f64) -> Result<Vec<f64>, JsValue> {
    smoothed_row(counts, beta).map_err(|e| JsValue::from_str(&e))
}

pub fn adjacency_grid(seed: u64, tau: f64) -> Result<Vec<f64>, String> {
    adjacency_values(&embeddings(seed), tau).map(Matrix::into_data).map_err(|e| e.to_string())
}

/// Row-major adjacency of the raw seeded word vectors at temperature `tau`.
#[wasm_bindgen]
pub fn adjacency_heatmap(seed: u64, tau: f64) -> Result<Vec<f64>, JsValue> {
    adjacency_grid(seed, tau).map_err(|e| JsValue::from_str(&e))
}

/// Outcome of [`fit_alignment`].
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct AlignmentRun {
    trace: Vec<f64>,
    adjacency: Vec<f64>,
}

#[wasm_bindgen]
impl AlignmentRun {
    /// Loss before each step, then the final loss.
    pub fn trace(&self) -> Vec<f64> {
        self.trace.clone()
    }

    /// Row-major adjacency after the last step.
    pub fn adjacency(&self) -> Vec<f64> {
        self.adjacency.clone()
    }
}

pub fn run_alignment(seed: u64, tau: f64, lr: f64, steps: usize) -> Result<AlignmentRun, String> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(format!("learning rate must be positive, got {lr}"));
    }
    let p = embeddings(seed);
    let target = target_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut store = ParamStore::new();
    let params = VsmParams::init(&mut store, "vsm", EMBED_DIM, DIM, &mut rng);
    let trace = fit_skl(&mut store, &params, &p, &target, tau, lr, steps).map_err(|e| e.to_string())?;
    let projected = project_embeddings(&store, &params, &p).map_err(|e| e.to_string())?;
    let adjacency = adjacency_values(&projected, tau).map_err(|e| e.to_string())?;
    Ok(AlignmentRun { trace, adjacency: adjacency.into_data() })
}

/// Fits the semantic projections so the adjacency of the projected verbs
/// matches the demo co-occurrence target.
#[wasm_bindgen]
pub fn fit_alignment(seed: u64, tau: f64, lr: f64, steps: usize) -> Result<AlignmentRun, JsValue> {
    run_alignment(seed, tau, lr, steps).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_limits() {
        let counts = [6.0, 3.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(smoothed_row(&counts, 0.0).unwrap(), vec![0.6, 0.3, 0.1, 0.0, 0.0, 0.0]);
        let flat = smoothed_row(&counts, 1e12).unwrap();
        assert!(flat.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-9));
        let mid = smoothed_row(&counts, 0.1).unwrap();
        assert!((mid.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((mid[3] - 0.1 / 6.0 / 1.1).abs() < 1e-15);
        assert_eq!(smoothed_row(&[0.0, 0.0], 0.1).unwrap(), vec![0.5, 0.5]);
        assert!(smoothed_row(&[1.0, -1.0], 0.1).is_err());
        assert!(smoothed_row(&[1.0], -0.5).is_err());
    }

    #[test]
    fn heatmap_is_one_distribution() {
        for tau in [0.05, 0.5, 5.0] {
            let a = adjacency_grid(1, tau).unwrap();
            assert_eq!(a.len(), 36);
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((0..6).all(|i| a[i * 6 + i] == 0.0));
        }
        let sharp = adjacency_grid(1, 0.05).unwrap();
        let soft = adjacency_grid(1, 5.0).unwrap();
        let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
        assert!(max(&sharp) > max(&soft));
        assert!(adjacency_grid(1, 0.0).is_err());
    }

    #[test]
    fn target_is_symmetric_distribution() {
        let t = target_matrix();
        assert!((t.sum() - 1.0).abs() < 1e-12);
        assert_eq!(t, t.transpose());
    }

    #[test]
    fn alignment_descends() {
        let run = run_alignment(0, 0.05, 1e-2, 400).unwrap();
        let trace = run.trace();
        assert_eq!(trace.len(), 401);
        assert!(trace[400] < 0.1 * trace[0], "{} -> {}", trace[0], trace[400]);
        assert_eq!(run.adjacency().len(), 36);
        assert!(run_alignment(0, 0.05, 0.0, 10).is_err());
    }
}
