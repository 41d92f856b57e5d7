//! Exact and empirical information measures for gated variables.
//!
//! All logarithms are base 2, so every quantity is in bits.
//!
//! A gate `g ~ Bernoulli(p)` applied to a variable `x` that never takes the
//! value 0 yields `x_hat = g * x`. For two such variables with independent
//! gates the pushforward of the joint is known in closed form, which makes
//! the gated mutual information and entropy exactly computable:
//!
//! * `I(x_hat; y_hat) = p^2 I(x; y)`
//! * `H(x_hat) = p H(x) + H_b(p)`, with `H_b` the Bernoulli entropy.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::Rng;

const MASS_TOLERANCE: f64 = 1e-12;

fn validate_pmf(pmf: &[f64]) -> Result<()> {
    if pmf.is_empty() {
        return Err(Error::Distribution("empty pmf".into()));
    }
    if let Some(bad) = pmf.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::Distribution(format!("invalid probability {bad}")));
    }
    let total: f64 = pmf.iter().sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::Distribution(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy(pmf: &[f64]) -> Result<f64> {
    validate_pmf(pmf)?;
    Ok(entropy_unchecked(pmf))
}

fn entropy_unchecked(pmf: &[f64]) -> f64 {
    -pmf.iter().filter(|&&p| p > 0.0).map(|&p| p * p.log2()).sum::<f64>()
}

/// Entropy of a Bernoulli(p) variable in bits.
pub fn bernoulli_entropy(p: f64) -> f64 {
    entropy_unchecked(&[p, 1.0 - p])
}

/// Joint pmf over a finite grid of real value pairs, stored row-major with
/// rows indexed by `support_x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointPmf {
    support_x: Vec<f64>,
    support_y: Vec<f64>,
    probs: Vec<f64>,
}

impl JointPmf {
    pub fn new(support_x: Vec<f64>, support_y: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != support_x.len() * support_y.len() {
            return Err(Error::Distribution(format!(
                "{} probabilities for a {}x{} support",
                probs.len(),
                support_x.len(),
                support_y.len()
            )));
        }
        for s in [&support_x, &support_y] {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Distribution("support values must be finite".into()));
            }
            for (i, a) in s.iter().enumerate() {
                if s[..i].contains(a) {
                    return Err(Error::Distribution(format!("duplicate support value {a}")));
                }
            }
        }
        validate_pmf(&probs)?;
        Ok(Self {
            support_x,
            support_y,
            probs,
        })
    }

    pub fn support_x(&self) -> &[f64] {
        &self.support_x
    }

    pub fn support_y(&self) -> &[f64] {
        &self.support_y
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.support_y.len() + j]
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        self.probs.chunks(self.support_y.len()).map(|row| row.iter().sum()).collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let ny = self.support_y.len();
        (0..ny)
            .map(|j| (0..self.support_x.len()).map(|i| self.probs[i * ny + j]).sum())
            .collect()
    }

    /// Draws `n` i.i.d. pairs by inverse-CDF sampling over the flattened grid.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut cdf = Vec::with_capacity(self.probs.len());
        let mut acc = 0.0;
        for p in &self.probs {
            acc += p;
            cdf.push(acc);
        }
        let ny = self.support_y.len();
        let last = self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        (0..n)
            .map(|_| {
                let u = rng.uniform() * acc;
                let cell = cdf.partition_point(|&c| c <= u).min(last);
                (self.support_x[cell / ny], self.support_y[cell % ny])
            })
            .unzip()
    }
}

/// Mutual information in bits. Cells with zero mass contribute nothing.
pub fn mutual_information(joint: &JointPmf) -> f64 {
    let px = joint.marginal_x();
    let py = joint.marginal_y();
    let ny = py.len();
    let mut mi = 0.0;
    for (i, &pxi) in px.iter().enumerate() {
        for (j, &pyj) in py.iter().enumerate() {
            let pxy = joint.probs[i * ny + j];
            if pxy > 0.0 {
                mi += pxy * (pxy / (pxi * pyj)).log2();
            }
        }
    }
    // Rounding can leave a product distribution a few ulps below zero.
    mi.max(0.0)
}

/// Mutual information of a raw row-major `rows x cols` pmf matrix.
pub fn mutual_information_matrix(rows: usize, cols: usize, probs: &[f64]) -> Result<f64> {
    let sx = (1..=rows).map(|v| v as f64).collect();
    let sy = (1..=cols).map(|v| v as f64).collect();
    Ok(mutual_information(&JointPmf::new(sx, sy, probs.to_vec())?))
}

/// Joint distribution of two variables that never take the value 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteJoint(JointPmf);

impl DiscreteJoint {
    pub fn new(support_x: Vec<f64>, support_y: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support_x.iter().chain(&support_y).any(|&v| v == 0.0) {
            return Err(Error::Precondition(
                "support contains 0; gated joints need variables that are never exactly zero".into(),
            ));
        }
        Ok(Self(JointPmf::new(support_x, support_y, probs)?))
    }

    /// Random joint with `nx x ny` distinct nonzero support values and
    /// strictly positive, heterogeneous cell masses.
    pub fn random(rng: &mut Rng, nx: usize, ny: usize) -> Self {
        let mut support = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                    sign * (i as f64 + 1.0 + 0.5 * rng.uniform())
                })
                .collect()
        };
        let sx = support(nx);
        let sy = support(ny);
        let raw: Vec<f64> = (0..nx * ny).map(|_| 1e-3 + rng.uniform().powi(3)).collect();
        let total: f64 = raw.iter().sum();
        let probs = raw.iter().map(|p| p / total).collect();
        Self::new(sx, sy, probs).expect("random joint is valid by construction")
    }

    pub fn joint(&self) -> &JointPmf {
        &self.0
    }
}

impl AsRef<JointPmf> for DiscreteJoint {
    fn as_ref(&self) -> &JointPmf {
        &self.0
    }
}

/// Joint of `(g1 x, g2 y)`; index 0 of each support is the value 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GatedJoint(JointPmf);

impl GatedJoint {
    pub fn joint(&self) -> &JointPmf {
        &self.0
    }
}

impl AsRef<JointPmf> for GatedJoint {
    fn as_ref(&self) -> &JointPmf {
        &self.0
    }
}

fn check_p_keep(p_keep: f64) -> Result<()> {
    if p_keep > 0.0 && p_keep <= 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("p_keep must lie in (0, 1], got {p_keep}")))
    }
}

/// Exact pushforward of `(x, y) -> (g1 x, g2 y)` with independent
/// `Bernoulli(p_keep)` gates.
pub fn apply_gates(joint: &DiscreteJoint, p_keep: f64) -> Result<GatedJoint> {
    check_p_keep(p_keep)?;
    let j = &joint.0;
    let p = p_keep;
    let q = 1.0 - p;
    let px = j.marginal_x();
    let py = j.marginal_y();
    let (nx, ny) = (px.len(), py.len());
    let mut probs = vec![0.0; (nx + 1) * (ny + 1)];
    let cols = ny + 1;
    probs[0] = q * q;
    for (b, &m) in py.iter().enumerate() {
        probs[b + 1] = p * q * m;
    }
    for (a, &m) in px.iter().enumerate() {
        probs[(a + 1) * cols] = p * q * m;
        for b in 0..ny {
            probs[(a + 1) * cols + b + 1] = p * p * j.prob(a, b);
        }
    }
    let sx = std::iter::once(0.0).chain(j.support_x.iter().copied()).collect();
    let sy = std::iter::once(0.0).chain(j.support_y.iter().copied()).collect();
    Ok(GatedJoint(JointPmf::new(sx, sy, probs)?))
}

pub const THEOREM_TOLERANCE: f64 = 1e-10;

/// Residuals of the gated mutual-information and entropy identities for one
/// joint. `mi_ratio` is absent when the ungated variables are independent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem1Report {
    pub p_keep: f64,
    pub mi_orig: f64,
    pub mi_gated: f64,
    pub mi_ratio: Option<f64>,
    pub mi_residual: f64,
    pub entropy_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn verify_theorem1(joint: &DiscreteJoint, p_keep: f64) -> Result<Theorem1Report> {
    let gated = apply_gates(joint, p_keep)?;
    let mi_orig = mutual_information(&joint.0);
    let mi_gated = mutual_information(&gated.0);
    let mi_residual = (mi_gated - p_keep * p_keep * mi_orig).abs();
    let eps = bernoulli_entropy(p_keep);
    let residual = |gated_marginal: Vec<f64>, marginal: Vec<f64>| {
        (entropy_unchecked(&gated_marginal) - p_keep * entropy_unchecked(&marginal) - eps).abs()
    };
    let entropy_residual = residual(gated.0.marginal_x(), joint.0.marginal_x())
        .max(residual(gated.0.marginal_y(), joint.0.marginal_y()));
    let mi_ratio = (mi_orig > 0.0).then(|| mi_gated / mi_orig);
    Ok(Theorem1Report {
        p_keep,
        mi_orig,
        mi_gated,
        mi_ratio,
        mi_residual,
        entropy_residual,
        tolerance: THEOREM_TOLERANCE,
        pass: mi_residual <= THEOREM_TOLERANCE && entropy_residual <= THEOREM_TOLERANCE,
    })
}

/// Runs [`verify_theorem1`] on `trials` random joints (alternating 3x3 and
/// 5x5 supports) for every keep probability.
pub fn theorem1_sweep(rng: &mut Rng, trials: usize, p_values: &[f64]) -> Result<Vec<Theorem1Report>> {
    let mut out = Vec::with_capacity(trials * p_values.len());
    for t in 0..trials {
        let size = if t % 2 == 0 { 3 } else { 5 };
        let joint = DiscreteJoint::random(rng, size, size);
        for &p in p_values {
            out.push(verify_theorem1(&joint, p)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub p_keep: f64,
    pub c_planted: f64,
    /// Sample correlation of the ungated pair.
    pub c_before: f64,
    /// Sample correlation of the gated pair, `E[x_hat y_hat] / (sigma_x sigma_y)`.
    pub c_after: f64,
    /// `p_keep * c_planted`.
    pub predicted: f64,
    pub residual: f64,
    /// Monte-Carlo standard error of `c_after` from batch means.
    pub std_error: f64,
    pub n_samples: usize,
}

const MIN_CORRELATION_SAMPLES: usize = 10_000;
const CORRELATION_BATCHES: usize = 100;

/// Samples standardized pairs with planted correlation `c`, gates both with
/// independent raw Bernoulli gates and measures the gated correlation.
///
/// Moments are uncentred, since the pairs are zero mean by construction; the
/// gated scales are the measured `sqrt(E[x_hat^2])` (expected value `p_keep`).
pub fn correlation_scaling_check(rng: &mut Rng, p_keep: f64, c: f64, n_samples: usize) -> Result<CorrelationReport> {
    check_p_keep(p_keep)?;
    if !(-1.0..=1.0).contains(&c) {
        return Err(Error::Parameter(format!("correlation must lie in [-1, 1], got {c}")));
    }
    if n_samples < MIN_CORRELATION_SAMPLES {
        return Err(Error::Parameter(format!(
            "need at least {MIN_CORRELATION_SAMPLES} samples, got {n_samples}"
        )));
    }
    let s = (1.0 - c * c).sqrt();
    let per_batch = n_samples / CORRELATION_BATCHES;
    #[derive(Default, Clone, Copy)]
    struct Moments {
        xy: f64,
        xx: f64,
        yy: f64,
        gxy: f64,
        gxx: f64,
        gyy: f64,
    }
    impl Moments {
        fn gated_corr(&self) -> f64 {
            self.gxy / (self.gxx * self.gyy).sqrt()
        }
    }
    let mut total = Moments::default();
    let mut batch_corrs = Vec::with_capacity(CORRELATION_BATCHES);
    let mut batch = Moments::default();
    for k in 0..n_samples {
        let z1 = rng.normal();
        let z2 = rng.normal();
        let x = z1;
        let y = c * z1 + s * z2;
        let gx = if p_keep == 1.0 || rng.bernoulli(p_keep) { x } else { 0.0 };
        let gy = if p_keep == 1.0 || rng.bernoulli(p_keep) { y } else { 0.0 };
        batch.xy += x * y;
        batch.xx += x * x;
        batch.yy += y * y;
        batch.gxy += gx * gy;
        batch.gxx += gx * gx;
        batch.gyy += gy * gy;
        if (k + 1) % per_batch == 0 || k + 1 == n_samples {
            if batch_corrs.len() < CORRELATION_BATCHES {
                batch_corrs.push(batch.gated_corr());
            }
            total.xy += batch.xy;
            total.xx += batch.xx;
            total.yy += batch.yy;
            total.gxy += batch.gxy;
            total.gxx += batch.gxx;
            total.gyy += batch.gyy;
            batch = Moments::default();
        }
    }
    let c_before = total.xy / (total.xx * total.yy).sqrt();
    let c_after = total.gated_corr();
    let k = batch_corrs.len() as f64;
    let mean = batch_corrs.iter().sum::<f64>() / k;
    let var = batch_corrs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let predicted = p_keep * c;
    Ok(CorrelationReport {
        p_keep,
        c_planted: c,
        c_before,
        c_after,
        predicted,
        residual: (c_after - predicted).abs(),
        std_error: (var / k).sqrt(),
        n_samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmpiricalMi {
    pub bits: f64,
    /// Set when either input is constant, in which case `bits` is 0.
    pub degenerate: bool,
}

const MIN_EMPIRICAL_SAMPLES: usize = 1000;

/// Plug-in mutual information from an equal-width 2-D histogram over the
/// observed range of each input.
pub fn empirical_mi(a: &[f64], b: &[f64], n_bins: usize) -> Result<EmpiricalMi> {
    if a.len() != b.len() {
        return Err(Error::Parameter(format!(
            "sample counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < MIN_EMPIRICAL_SAMPLES {
        return Err(Error::Parameter(format!(
            "need at least {MIN_EMPIRICAL_SAMPLES} samples, got {}",
            a.len()
        )));
    }
    if n_bins < 2 {
        return Err(Error::Parameter("need at least 2 bins".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Parameter("samples must be finite".into()));
    }
    let range = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    };
    let (alo, ahi) = range(a);
    let (blo, bhi) = range(b);
    if alo == ahi || blo == bhi {
        return Ok(EmpiricalMi {
            bits: 0.0,
            degenerate: true,
        });
    }
    let bin = |v: f64, lo: f64, hi: f64| (((v - lo) / (hi - lo) * n_bins as f64) as usize).min(n_bins - 1);
    let mut counts = vec![0u64; n_bins * n_bins];
    for (&x, &y) in a.iter().zip(b) {
        counts[bin(x, alo, ahi) * n_bins + bin(y, blo, bhi)] += 1;
    }
    let n = a.len() as f64;
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let joint = JointPmf {
        support_x: (0..n_bins).map(|v| v as f64).collect(),
        support_y: (0..n_bins).map(|v| v as f64).collect(),
        probs,
    };
    Ok(EmpiricalMi {
        bits: mutual_information(&joint),
        degenerate: false,
    })
}
