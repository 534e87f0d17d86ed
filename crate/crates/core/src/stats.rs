//! Two-group comparison of inter-disc distances.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("a group needs at least {need} values, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("pooled variance is zero")]
    ZeroPooledVariance,
    #[error("standard error is zero")]
    ZeroStandardError,
    #[error("sample contains a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub values: Vec<f64>,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub sigma: f64,
}

impl GroupSample {
    pub fn new(values: Vec<f64>) -> Result<Self, StatsError> {
        if values.len() < 2 {
            return Err(StatsError::InsufficientSamples {
                need: 2,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(Self {
            values,
            n,
            mean,
            sigma: var.sqrt(),
        })
    }

    fn var_over_n(&self) -> f64 {
        self.sigma * self.sigma / self.n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchT {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
}

pub fn welch_t(g1: &GroupSample, g2: &GroupSample) -> Result<WelchT, StatsError> {
    let (a, b) = (g1.var_over_n(), g2.var_over_n());
    let se2 = a + b;
    if se2 <= 0.0 {
        return Err(StatsError::ZeroStandardError);
    }
    let t = (g1.mean - g2.mean) / se2.sqrt();
    let df = se2 * se2 / (a * a / (g1.n - 1) as f64 + b * b / (g2.n - 1) as f64);
    Ok(WelchT { t, df })
}

/// Two-sided p-value of a t statistic, `I_{df/(df+t²)}(df/2, 1/2)`.
pub fn p_value(t: f64, df: f64) -> f64 {
    assert!(df > 0.0, "degrees of freedom must be positive");
    if t == 0.0 {
        return 1.0;
    }
    if !t.is_finite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// `t / √(n1 + n2)`.
pub fn effect_size_from_t(t: f64, n1: usize, n2: usize) -> f64 {
    assert!(n1 + n2 > 0);
    t / ((n1 + n2) as f64).sqrt()
}

/// The usual conversion `t · √(1/n1 + 1/n2)`; not used in reports.
pub fn conventional_d_from_t(t: f64, n1: usize, n2: usize) -> f64 {
    t * (1.0 / n1 as f64 + 1.0 / n2 as f64).sqrt()
}

pub fn cohens_d(g1: &GroupSample, g2: &GroupSample) -> Result<f64, StatsError> {
    let pooled = ((g1.n - 1) as f64 * g1.sigma.powi(2) + (g2.n - 1) as f64 * g2.sigma.powi(2))
        / (g1.n + g2.n - 2) as f64;
    if pooled <= 0.0 {
        return Err(StatsError::ZeroPooledVariance);
    }
    Ok((g1.mean - g2.mean) / pooled.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub t_score: f64,
    pub df: f64,
    pub p_value: f64,
    pub effect_size: f64,
    pub cohens_d: f64,
}

pub fn compare(g1: &GroupSample, g2: &GroupSample) -> Result<TestReport, StatsError> {
    let w = welch_t(g1, g2)?;
    Ok(TestReport {
        t_score: w.t,
        df: w.df,
        p_value: p_value(w.t, w.df),
        effect_size: effect_size_from_t(w.t, g1.n, g2.n),
        cohens_d: cohens_d(g1, g2)?,
    })
}

/// p-values under 1e-6 print as a band.
pub fn format_p(p: f64) -> String {
    if p < 1e-6 {
        "<1e-06".to_string()
    } else if p < 1e-3 {
        format!("{p:.3e}")
    } else {
        format!("{p:.4}")
    }
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (h - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

/// Tukey box: interpolated quartiles, whiskers at the most extreme values
/// within 1.5·IQR of the box.
pub fn box_stats(values: &[f64]) -> Result<BoxStats, StatsError> {
    if values.is_empty() {
        return Err(StatsError::InsufficientSamples { need: 1, got: 0 });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p| quantile(&s, p).expect("non-empty");
    let (q1, median, q3) = (q(0.25), q(0.5), q(0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = || s.iter().copied().filter(|&v| v >= lo_fence && v <= hi_fence);
    Ok(BoxStats {
        n: s.len(),
        median,
        q1,
        q3,
        iqr,
        whisker_low: inside().fold(f64::INFINITY, f64::min),
        whisker_high: inside().fold(f64::NEG_INFINITY, f64::max),
        outliers: s
            .iter()
            .copied()
            .filter(|&v| v < lo_fence || v > hi_fence)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(v: &[f64]) -> GroupSample {
        GroupSample::new(v.to_vec()).unwrap()
    }

    /// Student-t density integrated from |t| to a far cutoff with composite
    /// Simpson's rule, plus the analytic tail beyond it.
    fn p_by_simpson(t: f64, df: f64) -> f64 {
        let ln_c = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
            - statrs::function::gamma::ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let f = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        let (a, b, n) = (t.abs(), 2000.0, 200_000);
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        // Tail beyond b ≈ ∫ c·df^{(df+1)/2}·x^{−(df+1)} dx.
        let tail = (ln_c + (df + 1.0) / 2.0 * df.ln()).exp() * b.powf(-df) / df;
        2.0 * (s * h / 3.0 + tail)
    }

    #[test]
    fn welch_by_hand() {
        let a = g(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = g(&[3.0, 4.0, 5.0, 6.0, 7.0]);
        let w = welch_t(&a, &b).unwrap();
        assert!((w.t + 2.0).abs() < 1e-12);
        assert!((w.df - 8.0).abs() < 1e-12);
        assert_eq!(welch_t(&a, &a).unwrap().t, 0.0);
        assert_eq!(welch_t(&b, &a).unwrap().t, 2.0);
    }

    #[test]
    fn p_value_matches_numerical_integration() {
        let p = p_value(2.0, 8.0);
        let oracle = p_by_simpson(2.0, 8.0);
        assert!((p - oracle).abs() < 1e-7, "{p} vs {oracle}");
        assert!((p - 0.0805).abs() < 5e-5);
        assert_eq!(p_value(0.0, 3.0), 1.0);
        for &(t, df) in &[(0.5, 3.0), (1.3, 20.0), (3.1, 5.5)] {
            assert!((p_value(t, df) - p_by_simpson(t, df)).abs() < 1e-7);
        }
    }

    #[test]
    fn large_t_is_in_the_tiny_p_band() {
        let p = p_value(30.5, 1200.0);
        assert!(p < 1e-6);
        assert_eq!(format_p(p), "<1e-06");
        assert_eq!(format_p(0.0805), "0.0805");
    }

    #[test]
    fn effect_size_arithmetic() {
        assert_eq!(effect_size_from_t(0.0, 3, 4), 0.0);
        assert_eq!(effect_size_from_t(10.0, 50, 50), 1.0);
        let n = (135.7408f64 / 1.9015).powi(2);
        let d = 135.7408 / n.sqrt();
        assert!((d - 1.9015).abs() < 1e-12);
        assert!((conventional_d_from_t(10.0, 50, 50) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cohens_d_cases() {
        let a = g(&[1.0, 3.0]);
        assert_eq!(cohens_d(&a, &a).unwrap(), 0.0);
        // Both groups have SD √2; the means differ by √2.
        let s = 2f64.sqrt();
        let b = g(&[1.0 + s, 3.0 + s]);
        assert!((cohens_d(&b, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            cohens_d(&g(&[2.0, 2.0]), &g(&[5.0, 5.0])),
            Err(StatsError::ZeroPooledVariance)
        );
        assert!(GroupSample::new(vec![1.0]).is_err());
    }

    #[test]
    fn box_stats_by_hand() {
        let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        assert_eq!((b.median, b.q1, b.q3), (4.0, 2.5, 5.5));
        assert_eq!((b.whisker_low, b.whisker_high), (1.0, 7.0));
        assert!(b.outliers.is_empty());
        let one = box_stats(&[3.5]).unwrap();
        assert_eq!(
            [one.median, one.q1, one.q3, one.whisker_low, one.whisker_high],
            [3.5; 5]
        );
        let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!(b.whisker_high, 4.0);
    }

    fn group() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 3..30)
    }

    proptest! {
        #[test]
        fn swap_antisymmetry(a in group(), b in group()) {
            let (ga, gb) = (g(&a), g(&b));
            let (ab, ba) = (compare(&ga, &gb).unwrap(), compare(&gb, &ga).unwrap());
            prop_assert!((ab.t_score + ba.t_score).abs() <= 1e-12 * ab.t_score.abs().max(1.0));
            prop_assert!((ab.cohens_d + ba.cohens_d).abs() <= 1e-12 * ab.cohens_d.abs().max(1.0));
            prop_assert!((ab.effect_size + ba.effect_size).abs() <= 1e-12 * ab.effect_size.abs().max(1.0));
            prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
        }

        #[test]
        fn shift_and_scale_invariance(a in group(), b in group(), c in -1e3f64..1e3, s in 0.01f64..100.0) {
            let base = compare(&g(&a), &g(&b)).unwrap();
            for f in [|v: f64, c: f64, _s: f64| v + c, |v: f64, _c: f64, s: f64| v * s] {
                let a2: Vec<_> = a.iter().map(|&v| f(v, c, s)).collect();
                let b2: Vec<_> = b.iter().map(|&v| f(v, c, s)).collect();
                let r = compare(&g(&a2), &g(&b2)).unwrap();
                let close = |x: f64, y: f64| (x - y).abs() <= 1e-6 * x.abs().max(1.0);
                prop_assert!(close(r.t_score, base.t_score), "{} {}", r.t_score, base.t_score);
                prop_assert!(close(r.effect_size, base.effect_size));
                prop_assert!(close(r.cohens_d, base.cohens_d));
            }
        }

        #[test]
        fn p_decreases_with_abs_t(t in 0.0f64..40.0, dt in 0.01f64..5.0, df in 1.0f64..500.0) {
            prop_assert!(p_value(t + dt, df) <= p_value(t, df));
            prop_assert_eq!(p_value(-t, df), p_value(t, df));
        }

        #[test]
        fn cohens_d_is_twice_effect_size_on_balanced_equal_variance(a in group(), c in -50.0f64..50.0) {
            // A reflected copy has the same n and the same SD.
            let b: Vec<f64> = a.iter().map(|&v| c - v).collect();
            let (ga, gb) = (g(&a), g(&b));
            prop_assume!(ga.sigma > 1e-6 && (ga.mean - gb.mean).abs() > 1e-6);
            let r = compare(&ga, &gb).unwrap();
            prop_assert!((r.cohens_d - 2.0 * r.effect_size).abs() < 1e-9 * r.cohens_d.abs().max(1.0));
        }
    }
}
