//! Entropy-regularised optimal transport of a batch onto OOD clusters with
//! equal-mass constraints, solved by Sinkhorn-Knopp scaling.
//!
//! For OOD-head logits `L` (M clusters × B samples) the solver maximises
//! `Σ_ij Y_ij L_ij + ε H(Y)` over non-negative `Y` whose rows sum to `1/M`
//! and whose columns sum to `1/B`. The optimum has the form
//! `Y = diag(a) exp(L/ε) diag(b)`, reached by alternating row and column
//! normalisation.

use ndarray::{Array2, Axis};

use crate::error::{validation, Result};

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_SK_ITERS: usize = 3;

/// Below this ε the iteration runs on log-potentials.
const LOG_DOMAIN_EPSILON: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct SinkhornProblem {
    /// M × B, one column per sample.
    pub logits: Array2<f64>,
    pub epsilon: f64,
    pub n_iter: usize,
}

impl SinkhornProblem {
    pub fn new(logits: Array2<f64>) -> Self {
        SinkhornProblem {
            logits,
            epsilon: DEFAULT_EPSILON,
            n_iter: DEFAULT_SK_ITERS,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_iters(mut self, n_iter: usize) -> Self {
        self.n_iter = n_iter;
        self
    }
}

#[derive(Debug, Clone)]
pub struct PseudoLabelMatrix {
    /// M × B transport plan.
    pub y_hat: Array2<f64>,
    /// M × B, each column rescaled to sum to 1: the soft label of sample j.
    pub targets: Array2<f64>,
}

impl PseudoLabelMatrix {
    /// `Σ_ij Y_ij L_ij + ε H(Y)`.
    pub fn objective(&self, logits: &Array2<f64>, epsilon: f64) -> f64 {
        (&self.y_hat * logits).sum() + epsilon * entropy(&self.y_hat)
    }

    /// Argmax cluster per sample, lowest index on ties.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.targets
            .axis_iter(Axis(1))
            .map(|col| {
                col.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

/// `-Σ y log y` with `0 log 0 = 0`.
pub fn entropy(y: &Array2<f64>) -> f64 {
    -y.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Solve for the pseudo-label plan.
///
/// The kernel is first column-normalised (a per-sample softmax of `L/ε`,
/// scaled by `1/B`), then `n_iter` rounds of row and column normalisation
/// follow. Starting with a column step makes the result exactly invariant to
/// adding a constant to any column of `L`.
pub fn sinkhorn_pseudo_labels(problem: &SinkhornProblem) -> Result<PseudoLabelMatrix> {
    let (m, b) = problem.logits.dim();
    if m == 0 || b == 0 {
        return Err(validation!("logits must be non-empty, got {m}x{b}"));
    }
    if !(problem.epsilon > 0.0 && problem.epsilon.is_finite()) {
        return Err(validation!("epsilon must be positive, got {}", problem.epsilon));
    }
    if problem.logits.iter().any(|v| !v.is_finite()) {
        return Err(validation!("logits contain non-finite values"));
    }
    let y_hat = if problem.epsilon <= LOG_DOMAIN_EPSILON {
        log_domain(problem)
    } else {
        scaling_domain(problem)
    };
    let mut targets = y_hat.clone();
    for mut col in targets.axis_iter_mut(Axis(1)) {
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    Ok(PseudoLabelMatrix { y_hat, targets })
}

fn scaling_domain(p: &SinkhornProblem) -> Array2<f64> {
    let (m, b) = p.logits.dim();
    let max = p.logits.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let mut q = p.logits.mapv(|v| ((v - max) / p.epsilon).exp());
    normalize_cols(&mut q, b);
    for _ in 0..p.n_iter {
        for mut row in q.axis_iter_mut(Axis(0)) {
            let s = row.sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / (s * m as f64));
            }
        }
        normalize_cols(&mut q, b);
    }
    q
}

fn normalize_cols(q: &mut Array2<f64>, b: usize) {
    for mut col in q.axis_iter_mut(Axis(1)) {
        let s = col.sum();
        if s > 0.0 {
            col.mapv_inplace(|v| v / (s * b as f64));
        }
    }
}

fn logsumexp<'a>(xs: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_domain(p: &SinkhornProblem) -> Array2<f64> {
    let (m, b) = p.logits.dim();
    let (ln_m, ln_b) = ((m as f64).ln(), (b as f64).ln());
    let mut lq = p.logits.mapv(|v| v / p.epsilon);
    let col_step = |lq: &mut Array2<f64>| {
        for mut col in lq.axis_iter_mut(Axis(1)) {
            let z = logsumexp(col.iter()) + ln_b;
            col.mapv_inplace(|v| v - z);
        }
    };
    col_step(&mut lq);
    for _ in 0..p.n_iter {
        for mut row in lq.axis_iter_mut(Axis(0)) {
            let z = logsumexp(row.iter()) + ln_m;
            row.mapv_inplace(|v| v - z);
        }
        col_step(&mut lq);
    }
    lq.mapv(f64::exp)
}
