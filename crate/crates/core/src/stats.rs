//! Paired-experiment statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const CF_TOL: f64 = 1e-12;
const CF_MAX_ITER: usize = 300;
const TINY: f64 = 1e-300;

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
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
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
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
        if (del - 1.0).abs() < CF_TOL {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail `2 P(T > |t|)` of Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> Result<f64> {
    if !(df >= 1.0) {
        return Err(Error::InvalidDf(df));
    }
    if t.is_nan() {
        return Ok(f64::NAN);
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    let x = df / (df + t * t);
    Ok(regularized_incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Mean and (n - 1)-denominator standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One-sample t-test of paired differences against zero, two-sided.
pub fn paired_t_test(diffs: &[f64]) -> Result<TTest> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let (mean, sd) = mean_std(diffs);
    if sd == 0.0 || diffs.iter().all(|d| *d == diffs[0]) {
        return Err(Error::ZeroVariance);
    }
    let t = mean / (sd / (n as f64).sqrt());
    let df = n - 1;
    Ok(TTest {
        t,
        p: student_t_sf(t, df as f64)?,
        df,
    })
}

/// Test-set errors of one window's two forecasters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub mse_real: f64,
    pub mse_aug: f64,
    pub dataset_id: String,
}

impl PairedSample {
    /// Positive when augmentation lowered the error.
    pub fn improvement(&self) -> f64 {
        self.mse_real - self.mse_aug
    }
}

/// One row of the improvement table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub group: String,
    pub n: usize,
    pub mean_improvement: f64,
    pub se: f64,
    pub t: Option<f64>,
    pub p: Option<f64>,
    /// Set when every difference is identical and the test is undefined.
    pub degenerate: bool,
}

impl AggregateReport {
    pub const CSV_HEADER: &'static str = "group,n,mean_improvement,se,t,p";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.group,
            self.n,
            self.mean_improvement,
            self.se,
            opt(self.t),
            opt(self.p)
        )
    }
}

pub fn aggregate(pairs: &[PairedSample], label: &str) -> Result<AggregateReport> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    if let Some(bad) = pairs
        .iter()
        .find(|p| !(p.mse_real >= 0.0 && p.mse_aug >= 0.0) || !p.mse_real.is_finite() || !p.mse_aug.is_finite())
    {
        return Err(Error::InvalidSpec(format!("pair {} has invalid errors", bad.dataset_id)));
    }
    let diffs: Vec<f64> = pairs.iter().map(PairedSample::improvement).collect();
    let (mean, sd) = mean_std(&diffs);
    let se = sd / (n as f64).sqrt();
    let (t, p, degenerate) = match paired_t_test(&diffs) {
        Ok(tt) => (Some(tt.t), Some(tt.p), false),
        Err(Error::ZeroVariance) => (None, None, true),
        Err(e) => return Err(e),
    };
    Ok(AggregateReport {
        group: label.to_string(),
        n,
        mean_improvement: mean,
        se,
        t,
        p,
        degenerate,
    })
}
