//! Conditioning and gradient sign-coherence experiments.
//!
//! * Gradient descent on a least-squares objective converges at a rate set by
//!   the eigenvalue spread of `sum_i x_i x_i^T`; [`linreg_gd_race`] races a
//!   whitened design against an ill-conditioned one with the same targets.
//! * For `y = W x`, the per-sample gradient of row `w_j` is `dl/dy_j * x^T`.
//!   When `x` comes out of a ReLU every entry is non-negative, so each row's
//!   update has a single sign. [`sign_coherence`] measures how often that
//!   happens.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{softmax_cross_entropy, Dense, DropoutMode, DropoutSpec, IcLayer, Layer, Mode, Relu};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAX_DIM: usize = 64;
const JACOBI_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const SINGULAR_RATIO: f64 = 1e-12;

/// Eigenvalues (ascending) of a symmetric `d x d` matrix by cyclic Jacobi
/// rotations. Sweeps stop once the off-diagonal Frobenius norm falls below
/// `1e-12` times the Frobenius norm of the input.
pub fn symmetric_eigenvalues(matrix: &Tensor) -> Result<Vec<f64>> {
    let d = match matrix.shape() {
        [r, c] if r == c => *r,
        s => return Err(Error::Shape(format!("expected a square matrix, got {s:?}"))),
    };
    if d > MAX_DIM {
        return Err(Error::Parameter(format!("dimension {d} exceeds the Jacobi cap of {MAX_DIM}")));
    }
    let mut a = matrix.data().to_vec();
    for i in 0..d {
        for j in 0..i {
            let (x, y) = (a[i * d + j], a[j * d + i]);
            if (x - y).abs() > 1e-9 * (x.abs() + y.abs()).max(1.0) {
                return Err(Error::Parameter("matrix is not symmetric".into()));
            }
        }
    }
    let total: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += a[i * d + j] * a[i * d + j];
                }
            }
        }
        s.sqrt()
    };
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off(&a) <= JACOBI_TOLERANCE * total {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    Ok(eig)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionNumber {
    /// `lambda_max / lambda_min`, or infinity when singular.
    pub kappa: f64,
    pub singular: bool,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

/// Condition number of the Gram matrix `X^T X` of an `n x d` design.
pub fn hessian_condition(x: &Tensor) -> Result<ConditionNumber> {
    let (n, d) = match x.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::Shape(format!("expected n x d design, got {s:?}"))),
    };
    if n < d {
        return Err(Error::Precondition(format!("need n >= d, got n = {n}, d = {d}")));
    }
    let eig = symmetric_eigenvalues(&x.t_matmul(x)?)?;
    let (lambda_min, lambda_max) = (eig[0], eig[d - 1]);
    let singular = lambda_min <= SINGULAR_RATIO * lambda_max;
    Ok(ConditionNumber {
        kappa: if singular { f64::INFINITY } else { lambda_max / lambda_min },
        singular,
        lambda_min,
        lambda_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LrRule {
    /// Step `1 / lambda_max` of the loss Hessian.
    InverseMaxEigenvalue,
    /// Step `s / lambda_max`.
    Scaled(f64),
}

impl LrRule {
    fn factor(self) -> f64 {
        match self {
            LrRule::InverseMaxEigenvalue => 1.0,
            LrRule::Scaled(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditioningReport {
    pub label: String,
    pub kappa: f64,
    pub iterations_to_tol: usize,
    pub final_loss: f64,
    pub learning_rate: f64,
}

pub const DEFAULT_MAX_ITERATIONS: usize = 1_000_000;
const DIVERGENCE_STREAK: usize = 10;

fn mse(x: &Tensor, y: &Tensor, a: &Tensor) -> Result<(f64, Tensor)> {
    let residual = y.sub(&x.matmul_t(a)?)?;
    let n = x.shape()[0] as f64;
    let loss = residual.data().iter().map(|r| r * r).sum::<f64>() / n;
    Ok((loss, residual))
}

/// Full-batch gradient descent on `(1/n) sum_i ||y_i - A x_i||^2` from `a0`
/// until the loss is at most `tol`. `X` is `n x d`, `Y` is `n x m`, `A` is
/// `m x d`. The iteration count is the number of updates taken.
pub fn gd_least_squares(
    label: &str,
    x: &Tensor,
    y: &Tensor,
    a0: &Tensor,
    lr_rule: LrRule,
    tol: f64,
    max_iterations: usize,
) -> Result<ConditioningReport> {
    let cond = hessian_condition(x)?;
    let n = x.shape()[0] as f64;
    // Hessian of the objective in A is (2/n) X^T X (per output row).
    let lr = lr_rule.factor() * n / (2.0 * cond.lambda_max);
    let mut a = a0.clone();
    let (mut loss, mut residual) = mse(x, y, &a)?;
    let mut streak = 0;
    let mut iterations = 0;
    while loss > tol {
        if iterations == max_iterations {
            return Err(Error::NotConverged(max_iterations));
        }
        // grad = -(2/n) R^T X
        let grad = residual.t_matmul(x)?.scale(-2.0 / n);
        a = a.sub(&grad.scale(lr))?;
        iterations += 1;
        let (next, r) = mse(x, y, &a)?;
        streak = if next > loss { streak + 1 } else { 0 };
        if streak >= DIVERGENCE_STREAK || !next.is_finite() {
            return Err(Error::Divergence(format!(
                "{label}: loss rose for {DIVERGENCE_STREAK} consecutive steps (kappa {:.3e}, lr {lr:.3e}, step factor {})",
                cond.kappa,
                lr_rule.factor()
            )));
        }
        loss = next;
        residual = r;
    }
    Ok(ConditioningReport {
        label: label.to_string(),
        kappa: cond.kappa,
        iterations_to_tol: iterations,
        final_loss: loss,
        learning_rate: lr,
    })
}

/// `n x d` matrix with orthonormal columns (modified Gram-Schmidt on a
/// Gaussian draw).
fn orthonormal_columns(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for q in &cols {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Tensor::<f64>::from_fn(&[n, d], |i| cols[i % d][i / d])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RaceReport {
    pub dim: usize,
    pub kappa_target: f64,
    pub tol: f64,
    pub whitened: ConditioningReport,
    pub correlated: ConditioningReport,
}

/// Least-squares design pair sharing one column space: a whitened design
/// with `X^T X = n I` and a mixed design whose Gram matrix has eigenvalues
/// log-spaced over `[n, n * kappa]`, plus targets realizable by both.
pub fn race_designs(rng: &mut Rng, d: usize, kappa_target: f64) -> Result<(Tensor, Tensor, Tensor)> {
    if d == 0 || d > MAX_DIM {
        return Err(Error::Parameter(format!("dimension must lie in 1..={MAX_DIM}, got {d}")));
    }
    if !(kappa_target >= 1.0) || !kappa_target.is_finite() {
        return Err(Error::Parameter(format!("kappa_target must be >= 1, got {kappa_target}")));
    }
    let n = 4 * d;
    let white = orthonormal_columns(rng, n, d).scale((n as f64).sqrt());
    let rotation = orthonormal_columns(rng, d, d);
    let lambdas: Vec<f64> = (0..d)
        .map(|i| if d == 1 { 1.0 } else { kappa_target.powf(i as f64 / (d - 1) as f64) })
        .collect();
    // mix = diag(sqrt(lambda)) R^T, so mix^T mix = R diag(lambda) R^T
    let mix = Tensor::<f64>::from_fn(&[d, d], |k| {
        let (i, j) = (k / d, k % d);
        lambdas[i].sqrt() * rotation.data()[j * d + i]
    });
    let correlated = white.matmul(&mix)?;
    let outputs = 2;
    let b = Tensor::<f64>::from_fn(&[outputs, d], |_| rng.normal());
    let b = b.scale(1.0 / b.norm());
    let targets = white.matmul_t(&b)?;
    Ok((white, correlated, targets))
}

pub fn linreg_gd_race(rng: &mut Rng, d: usize, kappa_target: f64, tol: f64, lr_rule: LrRule) -> Result<RaceReport> {
    let (white, correlated, targets) = race_designs(rng, d, kappa_target)?;
    let a0 = Tensor::zeros(&[targets.shape()[1], d]);
    let w = gd_least_squares("whitened", &white, &targets, &a0, lr_rule, tol, DEFAULT_MAX_ITERATIONS)?;
    let c = gd_least_squares("correlated", &correlated, &targets, &a0, lr_rule, tol, DEFAULT_MAX_ITERATIONS)?;
    Ok(RaceReport {
        dim: d,
        kappa_target,
        tol,
        whitened: w,
        correlated: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignCoherenceReport {
    /// Share of measured rows whose nonzero entries all have one sign.
    pub coherent_fraction: f64,
    /// Rows with at least one nonzero entry.
    pub n_rows_measured: usize,
}

/// Classifies every row of a per-sample `m x n` weight gradient. Exact zeros
/// are ignored; rows with no nonzero entry are not measured.
pub fn sign_coherence(per_sample_grads: &Tensor) -> Result<SignCoherenceReport> {
    sign_coherence_many(std::slice::from_ref(per_sample_grads))
}

/// Pools the row classification over several per-sample gradients.
pub fn sign_coherence_many(grads: &[Tensor]) -> Result<SignCoherenceReport> {
    let mut measured = 0usize;
    let mut coherent = 0usize;
    for g in grads {
        let cols = match g.shape() {
            [_, c] => *c,
            s => return Err(Error::Shape(format!("expected an m x n gradient, got {s:?}"))),
        };
        for row in g.data().chunks(cols) {
            let pos = row.iter().any(|&v| v > 0.0);
            let neg = row.iter().any(|&v| v < 0.0);
            if pos || neg {
                measured += 1;
                if !(pos && neg) {
                    coherent += 1;
                }
            }
        }
    }
    if measured == 0 {
        return Err(Error::EmptyMeasurement("every gradient entry is zero".into()));
    }
    Ok(SignCoherenceReport {
        coherent_fraction: coherent as f64 / measured as f64,
        n_rows_measured: measured,
    })
}

/// What feeds the probed dense layer in [`dense_input_coherence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FeedKind {
    Relu,
    /// BatchNorm then raw-gate Dropout.
    Ic,
}

/// Builds `trials` random two-layer nets `feed -> Dense(n_in, n_out) -> ReLU
/// -> Dense(n_out, classes)`, runs one training-mode batch with random labels
/// and measures the sign coherence of the first dense layer's per-sample
/// weight gradients.
pub fn dense_input_coherence(
    rng: &mut Rng,
    feed: FeedKind,
    trials: usize,
    n_in: usize,
    n_out: usize,
    p_keep: f64,
) -> Result<SignCoherenceReport> {
    const BATCH: usize = 16;
    const CLASSES: usize = 3;
    let spec = DropoutSpec::new(p_keep, DropoutMode::Theorem)?;
    let mut grads = Vec::with_capacity(trials * BATCH);
    for _ in 0..trials {
        let shift: Vec<f64> = (0..n_in).map(|_| rng.normal()).collect();
        let x = Tensor::<f64>::from_fn(&[BATCH, n_in], |i| shift[i % n_in] + rng.normal());
        let labels: Vec<usize> = (0..BATCH).map(|_| rng.index(CLASSES)).collect();
        let mut dense = Dense::<f64>::new(rng, n_in, n_out)?;
        let mut act = Relu::new();
        let mut head = Dense::<f64>::new(rng, n_out, CLASSES)?;
        let fed = match feed {
            FeedKind::Relu => Relu::new().forward(&x, Mode::Train, rng)?,
            FeedKind::Ic => IcLayer::<f64>::new(n_in, spec).forward(&x, Mode::Train, rng)?,
        };
        let h = dense.forward(&fed, Mode::Train, rng)?;
        let h = Layer::<f64>::forward(&mut act, &h, Mode::Train, rng)?;
        let logits = head.forward(&h, Mode::Train, rng)?;
        let (_, g) = softmax_cross_entropy(&logits, &labels)?;
        let g = head.backward(&g)?;
        let g = Layer::<f64>::backward(&mut act, &g)?;
        grads.extend(dense.per_sample_weight_grads(&g)?);
    }
    sign_coherence_many(&grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymmetricCoherence {
    pub n: usize,
    pub trials: usize,
    pub measured: f64,
    /// `2 * (1/2)^n`.
    pub expected: f64,
    /// Binomial standard deviation of `measured` at `expected`.
    pub sigma: f64,
}

/// Per-row coherence of `delta * x^T` for `x` with `n` independent standard
/// normal (sign-symmetric) coordinates.
pub fn symmetric_row_coherence(rng: &mut Rng, n: usize, trials: usize) -> Result<SymmetricCoherence> {
    if n == 0 || trials == 0 {
        return Err(Error::Parameter("need n >= 1 and trials >= 1".into()));
    }
    let mut rows = Vec::with_capacity(trials);
    for _ in 0..trials {
        let delta = rng.normal();
        rows.push(Tensor::<f64>::from_fn(&[1, n], |_| delta * rng.normal()));
    }
    let report = sign_coherence_many(&rows)?;
    let expected = 2.0 * 0.5f64.powi(n as i32);
    Ok(SymmetricCoherence {
        n,
        trials,
        measured: report.coherent_fraction,
        expected,
        sigma: (expected * (1.0 - expected) / trials as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let m = Tensor::<f64>::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = symmetric_eigenvalues(&m).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn whitened_design_is_perfectly_conditioned() {
        let mut rng = Rng::new(1);
        let x = orthonormal_columns(&mut rng, 20, 5).scale(20f64.sqrt());
        let k = hessian_condition(&x).unwrap();
        assert!((k.kappa - 1.0).abs() < 1e-8);
    }

    #[test]
    fn duplicate_column_is_singular() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::from_fn(&[10, 3], |i| if i % 3 == 2 { 0.0 } else { rng.normal() });
        let x = Tensor::<f64>::from_fn(&[10, 3], |i| {
            let (r, c) = (i / 3, i % 3);
            if c == 2 { x.at(&[r, 0]) } else { x.at(&[r, c]) }
        });
        let k = hessian_condition(&x).unwrap();
        assert!(k.singular && k.kappa.is_infinite());
    }

    #[test]
    fn planted_spectrum() {
        let mut rng = Rng::new(3);
        let (_, correlated, _) = race_designs(&mut rng, 2, 100.0).unwrap();
        let k = hessian_condition(&correlated).unwrap();
        assert!((k.kappa - 100.0).abs() < 1e-6, "{k:?}");
    }

    #[test]
    fn too_few_rows() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(hessian_condition(&x), Err(Error::Precondition(_))));
    }

    #[test]
    fn race_at_unit_kappa_is_a_tie() {
        let mut rng = Rng::new(4);
        let r = linreg_gd_race(&mut rng, 8, 1.0, 1e-8, LrRule::InverseMaxEigenvalue).unwrap();
        assert!(r.whitened.iterations_to_tol.abs_diff(r.correlated.iterations_to_tol) <= 1);
    }

    #[test]
    fn exact_start_takes_no_steps() {
        let mut rng = Rng::new(5);
        let (white, _, targets) = race_designs(&mut rng, 4, 10.0).unwrap();
        // targets = white * B^T; recover B by least squares: B = (Y^T X) / n
        let b = targets.t_matmul(&white).unwrap().scale(1.0 / 16.0);
        let r = gd_least_squares("exact", &white, &targets, &b, LrRule::InverseMaxEigenvalue, 1e-8, 10).unwrap();
        assert_eq!(r.iterations_to_tol, 0);
    }

    #[test]
    fn oversized_step_diverges() {
        let mut rng = Rng::new(6);
        let (_, correlated, targets) = race_designs(&mut rng, 4, 10.0).unwrap();
        let a0 = Tensor::zeros(&[2, 4]);
        let err = gd_least_squares("bad", &correlated, &targets, &a0, LrRule::Scaled(2.5), 1e-8, 10_000).unwrap_err();
        assert!(matches!(err, Error::Divergence(ref m) if m.contains("bad")));
    }

    #[test]
    fn coherence_examples() {
        let relu_fed = Tensor::<f64>::from_rows(&[vec![0.5, 0.0, 2.0], vec![-1.0, 0.0, -0.1]]).unwrap();
        assert_eq!(sign_coherence(&relu_fed).unwrap().coherent_fraction, 1.0);
        let mixed = Tensor::<f64>::from_rows(&[vec![0.5, -1.0], vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let r = sign_coherence(&mixed).unwrap();
        assert_eq!(r.n_rows_measured, 2);
        assert_eq!(r.coherent_fraction, 0.5);
        let single = Tensor::<f64>::from_rows(&[vec![-3.0], vec![2.0]]).unwrap();
        assert_eq!(sign_coherence(&single).unwrap().coherent_fraction, 1.0);
        assert!(matches!(sign_coherence(&Tensor::zeros(&[2, 2])), Err(Error::EmptyMeasurement(_))));
    }

    #[test]
    fn relu_feed_is_fully_coherent() {
        let mut rng = Rng::new(7);
        let r = dense_input_coherence(&mut rng, FeedKind::Relu, 10, 6, 5, 0.95).unwrap();
        assert_eq!(r.coherent_fraction, 1.0);
        let ic = dense_input_coherence(&mut rng, FeedKind::Ic, 10, 6, 5, 0.95).unwrap();
        assert!(ic.coherent_fraction < 0.5, "{ic:?}");
    }
}
