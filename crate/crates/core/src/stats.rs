//! Correlation, significance, and similarity utilities.
//!
//! Covers the analysis toolbox used around forgetting matrices: Pearson and
//! Spearman correlation (with average ranks on ties), the mean pairwise row
//! correlation of an association matrix, paired t-tests with exact two-sided
//! p-values via the regularized incomplete beta function, and seeded random
//! projections for comparing high-dimensional gradients by inner product.

use ndarray::ArrayView1;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::AssociationMatrix;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("non-finite input at position {0}")]
    NonFinite(usize),
    #[error("zero variance in `{0}`")]
    ZeroVariance(&'static str),
    #[error("zero variance in matrix row {0}")]
    ZeroVarianceRow(usize),
    #[error("paired differences are all zero")]
    ZeroDifferences,
    #[error("matrix must be fully observed for row correlations")]
    NotFullyObserved,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("projection dimensions must be at least 1")]
    EmptyProjection,
}

/// Which correlation coefficient to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    Pearson,
    Spearman,
}

/// Pearson and Spearman coefficients for one pair of vectors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    pub n: usize,
}

fn validate_pair(x: &[f64], y: &[f64]) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(StatsError::TooFewSamples {
            needed: 2,
            got: x.len(),
        });
    }
    for (i, v) in x.iter().chain(y.iter()).enumerate() {
        if !v.is_finite() {
            return Err(StatsError::NonFinite(i % x.len()));
        }
    }
    Ok(())
}

/// Product-moment correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    validate_pair(x, y)?;
    pearson_unchecked(x, y)
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 {
        return Err(StatsError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(StatsError::ZeroVariance("y"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks with ties replaced by the average of the ranks they span (1-based).
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).expect("inputs validated finite"));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // Positions start..end (0-based) share the average of ranks
        // start+1 ..= end (1-based).
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

/// Rank correlation: Pearson on average-ranked data.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    validate_pair(x, y)?;
    pearson_unchecked(&average_ranks(x), &average_ranks(y))
}

pub fn correlation_report(x: &[f64], y: &[f64]) -> Result<CorrelationReport, StatsError> {
    Ok(CorrelationReport {
        pearson: pearson(x, y)?,
        spearman: spearman(x, y)?,
        n: x.len(),
    })
}

/// Mean correlation between the forgetting rows of distinct tasks.
///
/// Averages ρ(Z_p, Z_q) over all ordered pairs p ≠ q; since ρ is symmetric
/// this equals the unordered-pair mean. High values mean tasks forget the
/// same examples.
pub fn avg_row_correlation(
    m: &AssociationMatrix,
    kind: CorrelationKind,
) -> Result<f64, StatsError> {
    if m.num_tasks() < 2 {
        return Err(StatsError::TooFewSamples {
            needed: 2,
            got: m.num_tasks(),
        });
    }
    if !m.is_fully_observed() {
        return Err(StatsError::NotFullyObserved);
    }
    let rows: Vec<Vec<f64>> = (0..m.num_tasks())
        .map(|i| {
            let row: Vec<f64> = m.row(i).to_vec();
            match kind {
                CorrelationKind::Pearson => row,
                CorrelationKind::Spearman => average_ranks(&row),
            }
        })
        .collect();
    let mt = m.num_tasks();
    let mut total = 0.0;
    for p in 0..mt {
        for q in (p + 1)..mt {
            let rho = pearson_unchecked(&rows[p], &rows[q]).map_err(|e| match e {
                StatsError::ZeroVariance("x") => StatsError::ZeroVarianceRow(p),
                StatsError::ZeroVariance(_) => StatsError::ZeroVarianceRow(q),
                other => other,
            })?;
            total += 2.0 * rho;
        }
    }
    Ok(total / (mt * (mt - 1)) as f64)
}

/// Result of a paired t-test.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub p_two_sided: f64,
    pub dof: f64,
}

/// Paired t-test on the differences `a_i − b_i`.
///
/// Positive `t` means `a` is larger on average. The two-sided p-value comes
/// from the Student-t distribution with `n − 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult, StatsError> {
    validate_pair(a, b)?;
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Err(StatsError::ZeroDifferences);
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(StatsError::ZeroVariance("differences"));
    }
    let t = mean / (var / n as f64).sqrt();
    let dof = (n - 1) as f64;
    Ok(TTestResult {
        t,
        p_two_sided: students_t_two_sided_p(t, dof),
        dof,
    })
}

/// Two-sided tail probability of the Student-t distribution:
/// `P(|T| ≥ |t|) = I_{ν/(ν+t²)}(ν/2, 1/2)`.
pub fn students_t_two_sided_p(t: f64, dof: f64) -> f64 {
    let x = dof / (dof + t * t);
    regularized_incomplete_beta(0.5 * dof, 0.5, x)
}

// Lanczos approximation (g = 7, 9 terms); relative error below 1e-13 on the
// positive real axis.
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1−x) = π/sin(πx).
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta function `I_x(a, b)` for `a, b > 0`,
/// evaluated by a modified-Lentz continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "shape parameters must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
        + a * x.ln()
        + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // Even step.
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// A seeded Gaussian random projection from `original_dim` down to
/// `projected_dim`. Entries are i.i.d. N(0, 1) scaled by 1/√d, streamed from
/// the seed on every use, so the matrix is never stored and any two calls
/// with the same (dims, seed) agree bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionMatrix {
    original_dim: usize,
    projected_dim: usize,
    seed: u64,
}

impl ProjectionMatrix {
    pub fn new(original_dim: usize, projected_dim: usize, seed: u64) -> Result<Self, StatsError> {
        if original_dim == 0 || projected_dim == 0 {
            return Err(StatsError::EmptyProjection);
        }
        Ok(Self {
            original_dim,
            projected_dim,
            seed,
        })
    }

    pub fn original_dim(&self) -> usize {
        self.original_dim
    }

    pub fn projected_dim(&self) -> usize {
        self.projected_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Projects `v` to `projected_dim` dimensions, approximately preserving
    /// inner products between vectors projected with the same matrix.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>, StatsError> {
        if v.len() != self.original_dim {
            return Err(StatsError::DimensionMismatch {
                expected: self.original_dim,
                got: v.len(),
            });
        }
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        let scale = 1.0 / (self.projected_dim as f64).sqrt();
        let mut out = vec![0.0; self.projected_dim];
        for &vi in v {
            for o in out.iter_mut() {
                let p: f64 = StandardNormal.sample(&mut rng);
                *o += vi * p * scale;
            }
        }
        Ok(out)
    }
}

pub fn project(v: &[f64], p: &ProjectionMatrix) -> Result<Vec<f64>, StatsError> {
    p.project(v)
}

fn dot_checked(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(ArrayView1::from(a).dot(&ArrayView1::from(b)))
}

/// First-order forgetting estimate: inner product of an example's loss
/// gradient with the weight change caused by fine-tuning.
pub fn grad_weight_product(grad: &[f64], weight_delta: &[f64]) -> Result<f64, StatsError> {
    dot_checked(grad, weight_delta)
}

/// Gradient-gradient similarity, negated so that positive values mean the
/// two examples pull the weights in conflicting directions.
pub fn grad_grad_product(g1: &[f64], g2: &[f64]) -> Result<f64, StatsError> {
    Ok(-dot_checked(g1, g2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::MatrixKind;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn pearson_on_identical_and_negated_vectors() {
        let x = [1.0, 2.0, 5.0, 7.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(pearson(&x, &x).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson(&x, &neg).unwrap(), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spearman(&x, &neg).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn spearman_hand_computed_example() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        assert_abs_diff_eq!(spearman(&x, &y).unwrap(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 30.0]), vec![
            1.0, 2.5, 2.5, 4.0
        ]);
        // All-tied input yields equal ranks (and zero variance downstream).
        assert_eq!(average_ranks(&[5.0, 5.0]), vec![1.5, 1.5]);
    }

    #[test]
    fn correlation_errors() {
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0]),
            Err(StatsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            pearson(&[1.0], &[1.0]),
            Err(StatsError::TooFewSamples { .. })
        ));
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(StatsError::ZeroVariance("x"))
        ));
        assert!(matches!(
            pearson(&[1.0, f64::NAN], &[1.0, 2.0]),
            Err(StatsError::NonFinite(_))
        ));
    }

    fn matrix_from(values: ndarray::Array2<f64>) -> AssociationMatrix {
        let (m, n) = values.dim();
        AssociationMatrix::new(
            values,
            MatrixKind::Continuous,
            (0..m).map(|i| format!("t{i}")).collect(),
            (0..n).map(|j| format!("x{j}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn row_correlation_on_affinely_related_rows_is_one() {
        let m = matrix_from(array![
            [1.0, 2.0, 3.0],
            [2.0, 4.0, 6.0],
            [11.0, 12.0, 13.0]
        ]);
        assert_abs_diff_eq!(
            avg_row_correlation(&m, CorrelationKind::Pearson).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn row_correlation_of_two_anticorrelated_rows() {
        let m = matrix_from(array![[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]);
        assert_abs_diff_eq!(
            avg_row_correlation(&m, CorrelationKind::Pearson).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            avg_row_correlation(&m, CorrelationKind::Spearman).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn row_correlation_rejects_constant_row() {
        let m = matrix_from(array![[1.0, 1.0], [1.0, 2.0]]);
        assert!(matches!(
            avg_row_correlation(&m, CorrelationKind::Pearson),
            Err(StatsError::ZeroVarianceRow(0))
        ));
    }

    #[test]
    fn paired_t_matches_hand_computation() {
        // Differences [1, 2, 3]: t = 2 / (1/√3) = 2√3.
        let a = [2.0, 4.0, 6.0];
        let b = [1.0, 2.0, 3.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert_abs_diff_eq!(r.t, 2.0 * 3.0f64.sqrt(), epsilon = 1e-12);
        // ν = 2, x = 2/(2+12) = 1/7, I_{1/7}(1, 1/2) = 1 − √(6/7).
        let expected_p = 1.0 - (6.0f64 / 7.0).sqrt();
        assert_abs_diff_eq!(r.p_two_sided, expected_p, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_two_sided, 0.0742, epsilon = 5e-5);
    }

    #[test]
    fn paired_t_rejects_degenerate_differences() {
        assert!(matches!(
            paired_t_test(&[1.0, 2.0], &[1.0, 2.0]),
            Err(StatsError::ZeroDifferences)
        ));
        assert!(matches!(
            paired_t_test(&[2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0]),
            Err(StatsError::ZeroVariance("differences"))
        ));
    }

    /// Independent route to I_x(a, 1/2) for half-integer a: the beta-function
    /// prefactor comes from exact Γ recurrences off Γ(1) = 1 and Γ(½) = √π,
    /// and the series is the hypergeometric expansion
    /// I_x(a,b) = x^a (1−x)^b / (a·B(a,b)) · Σ_n ((a+b)_n / (a+1)_n) x^n.
    fn series_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
        fn ln_gamma_exact(mut z: f64) -> f64 {
            let mut acc = 0.0;
            while z > 1.25 {
                z -= 1.0;
                acc += z.ln();
            }
            if (z - 1.0).abs() < 1e-12 {
                acc
            } else {
                assert!((z - 0.5).abs() < 1e-12, "only integer/half-integer inputs");
                acc + std::f64::consts::PI.sqrt().ln()
            }
        }
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        if x > (a + 1.0) / (a + b + 2.0) {
            return 1.0 - series_incomplete_beta(b, a, 1.0 - x);
        }
        let ln_b = ln_gamma_exact(a) + ln_gamma_exact(b) - ln_gamma_exact(a + b);
        let front = (a * x.ln() + b * (1.0 - x).ln() - ln_b).exp() / a;
        let mut term = 1.0;
        let mut sum = 1.0;
        for n in 0..10_000 {
            let n = n as f64;
            term *= x * (a + b + n) / (a + 1.0 + n);
            sum += term;
            if term.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        front * sum
    }

    #[test]
    fn p_values_match_series_oracle_to_1e10() {
        let dofs = [1.0, 2.0, 3.0, 5.0, 10.0, 30.0, 99.0];
        let ts = [0.1, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0];
        for &dof in &dofs {
            for &t in &ts {
                let p = students_t_two_sided_p(t, dof);
                let x = dof / (dof + t * t);
                let oracle = series_incomplete_beta(0.5 * dof, 0.5, x);
                let rel = (p - oracle).abs() / oracle.abs();
                assert!(
                    rel < 1e-10,
                    "dof={dof} t={t}: impl={p:.15e} oracle={oracle:.15e} rel={rel:.2e}"
                );
            }
        }
    }

    #[test]
    fn p_value_limits() {
        assert_abs_diff_eq!(students_t_two_sided_p(0.0, 5.0), 1.0, epsilon = 1e-14);
        assert!(students_t_two_sided_p(50.0, 5.0) < 1e-7);
    }

    #[test]
    fn known_t_table_entries() {
        // Two-sided critical values: P(|T| ≥ 2.776) = 0.05 at ν = 4,
        // P(|T| ≥ 2.262) = 0.05 at ν = 9 (standard t-table).
        assert_abs_diff_eq!(
            students_t_two_sided_p(2.776, 4.0),
            0.05,
            epsilon = 2e-4
        );
        assert_abs_diff_eq!(
            students_t_two_sided_p(2.262, 9.0),
            0.05,
            epsilon = 2e-4
        );
    }

    #[test]
    fn projection_is_deterministic_and_validates_dims() {
        let p = ProjectionMatrix::new(100, 16, 42).unwrap();
        let v: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let a = p.project(&v).unwrap();
        let b = p.project(&v).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert!(matches!(
            p.project(&v[..50]),
            Err(StatsError::DimensionMismatch { .. })
        ));
        assert!(ProjectionMatrix::new(0, 4, 0).is_err());
    }

    #[test]
    fn gradient_products_and_sign_convention() {
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        assert_eq!(grad_weight_product(&e1, &e2).unwrap(), 0.0);
        assert_eq!(grad_weight_product(&e1, &[2.0, 7.0]).unwrap(), 2.0);
        assert_eq!(grad_grad_product(&e1, &[3.0, 0.0]).unwrap(), -3.0);
        assert!(grad_grad_product(&e1, &[1.0]).is_err());
    }

    #[test]
    fn projection_preserves_inner_products_on_average() {
        use rand::SeedableRng;
        let (big_d, small_d, pairs) = (2000, 512, 40);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let proj = ProjectionMatrix::new(big_d, small_d, 123).unwrap();
        let mut total_err = 0.0;
        for _ in 0..pairs {
            let mut u: Vec<f64> = (0..big_d).map(|_| rng.random::<f64>() - 0.5).collect();
            let mut v: Vec<f64> = (0..big_d).map(|_| rng.random::<f64>() - 0.5).collect();
            let nu = ArrayView1::from(&u[..]).dot(&ArrayView1::from(&u[..])).sqrt();
            let nv = ArrayView1::from(&v[..]).dot(&ArrayView1::from(&v[..])).sqrt();
            u.iter_mut().for_each(|x| *x /= nu);
            v.iter_mut().for_each(|x| *x /= nv);
            let exact = ArrayView1::from(&u[..]).dot(&ArrayView1::from(&v[..]));
            let pu = proj.project(&u).unwrap();
            let pv = proj.project(&v).unwrap();
            let approx_ip = ArrayView1::from(&pu[..]).dot(&ArrayView1::from(&pv[..]));
            total_err += (approx_ip - exact).abs();
        }
        let mae = total_err / pairs as f64;
        assert!(
            mae < 3.0 / (small_d as f64).sqrt(),
            "mean absolute error {mae} too large"
        );
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            xy in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..30),
            scale in 0.1f64..10.0,
            shift in -50.0f64..50.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
            let base = match pearson(&x, &y) {
                Ok(r) => r,
                Err(_) => return Ok(()), // degenerate draw (zero variance)
            };
            let pos: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
            let neg: Vec<f64> = x.iter().map(|v| -scale * v + shift).collect();
            prop_assert!((pearson(&pos, &y).unwrap() - base).abs() < 1e-8);
            prop_assert!((pearson(&neg, &y).unwrap() + base).abs() < 1e-8);
        }

        #[test]
        fn spearman_monotone_invariance(
            xy in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
            let base = match spearman(&x, &y) {
                Ok(r) => r,
                Err(_) => return Ok(()),
            };
            // Strictly increasing transform of x: ranks unchanged.
            let tx: Vec<f64> = x.iter().map(|v| v.exp() + v * 3.0).collect();
            prop_assert!((spearman(&tx, &y).unwrap() - base).abs() < 1e-10);
        }

        #[test]
        fn t_test_antisymmetry(
            ab in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..20),
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = ab.into_iter().unzip();
            let (fwd, rev) = match (paired_t_test(&a, &b), paired_t_test(&b, &a)) {
                (Ok(f), Ok(r)) => (f, r),
                _ => return Ok(()),
            };
            prop_assert!((fwd.t + rev.t).abs() < 1e-10);
            prop_assert!((fwd.p_two_sided - rev.p_two_sided).abs() < 1e-12);
        }

        #[test]
        fn row_correlation_bounded(
            seed in 0u64..500,
            m in 2usize..6,
            n in 2usize..12,
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let values = ndarray::Array2::from_shape_fn(
                (m, n), |_| rng.random_range(-10.0..10.0));
            let mat = matrix_from(values);
            for kind in [CorrelationKind::Pearson, CorrelationKind::Spearman] {
                if let Ok(r) = avg_row_correlation(&mat, kind) {
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
                }
            }
        }
    }
}
