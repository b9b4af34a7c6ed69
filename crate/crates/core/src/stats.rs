//! The paired one-tailed t-test used to decide whether one model's
//! per-image scores beat another's, built on a regularized incomplete
//! beta function (Lanczos log-gamma + Lentz continued fraction).

use crate::error::{Error, Result};

/// Significance level for all tests in the lab.
pub const ALPHA: f64 = 0.05;

/// Outcome of a paired one-tailed t-test.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    /// One-tailed p-value for the alternative "B > A".
    pub p: f64,
    /// `p < ALPHA`.
    pub significant: bool,
}

/// Paired one-tailed t-test of H1: `mean(b - a) > 0`.
///
/// `a` and `b` are paired observations (same cases, two conditions). The
/// statistic uses the sample standard deviation of the differences;
/// all-equal differences have no spread to test against and are reported
/// as a degenerate-variance error.
pub fn paired_t_one_tailed(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 pairs, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Validation("samples must be finite".into()));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = b.iter().zip(a).map(|(&bi, &ai)| bi - ai).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::DegenerateVariance(
            "all paired differences are identical".into(),
        ));
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let df = a.len() - 1;
    let p = t_upper_tail(t, df)?;
    Ok(TTestResult {
        t,
        df,
        p,
        significant: p < ALPHA,
    })
}

/// P(T >= t) for Student's t with `df` degrees of freedom.
pub fn t_upper_tail(t: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::Validation("degrees of freedom must be positive".into()));
    }
    if !t.is_finite() {
        return Err(Error::Validation(format!("t must be finite, got {t}")));
    }
    let v = df as f64;
    let x = v / (v + t * t);
    // I_x(v/2, 1/2) is the two-tailed probability of |T| >= |t|.
    let two_tailed = incomplete_beta(v / 2.0, 0.5, x)?;
    Ok(if t >= 0.0 {
        0.5 * two_tailed
    } else {
        1.0 - 0.5 * two_tailed
    })
}

/// Regularized incomplete beta function I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || !(b > 0.0) {
        return Err(Error::Validation(format!(
            "beta parameters must be positive, got a={a}, b={b}"
        )));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Validation(format!("x must lie in [0, 1], got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The continued fraction converges fast on x < (a+1)/(a+b+2); use the
    // symmetry I_x(a,b) = 1 - I_{1-x}(b,a) on the other side.
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_cf(b, a, 1.0 - x)? / b)
    }
}

/// Lentz's continued fraction for the incomplete beta.
fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-16;
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
            return Ok(h);
        }
    }
    Err(Error::Validation(format!(
        "incomplete beta did not converge for a={a}, b={b}, x={x}"
    )))
}

/// Lanczos approximation of ln(Gamma(x)) for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula keeps the approximation accurate below 0.5.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = G[0];
    for (i, &g) in G.iter().enumerate().skip(1) {
        acc += g / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}
