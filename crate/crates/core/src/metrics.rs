//! Probabilistic and point forecast scores, and residual autocorrelation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Closed-form CRPS of `N(mu, sigma²)` at `y`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::NonpositiveSigma(sigma));
    }
    let x = (y - mu) / sigma;
    let v = sigma * (x * (2.0 * std_normal_cdf(x) - 1.0) + 2.0 * std_normal_pdf(x) - FRAC_1_SQRT_PI);
    Ok(v.max(0.0))
}

/// Sample estimator `E|Y − y| − ½E|Y − Y′|`, averaging the second term over all ordered pairs.
pub fn crps_empirical(samples: &[f64], y: f64) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { have: n, need: 2 });
    }
    let first = samples.iter().map(|s| (s - y).abs()).sum::<f64>() / n as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Σ_ij |x_i − x_j| = 2 Σ_i (2i − n + 1) x_(i)
    let pair_sum: f64 = sorted.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - n as f64 + 1.0) * x).sum::<f64>() * 2.0;
    let second = pair_sum / (n * n) as f64;
    Ok((first - 0.5 * second).max(0.0))
}

/// Total CRPS divided by the total absolute observation.
pub fn aggregate_crps(crps: &[f64], observations: &[f64]) -> Result<f64> {
    if crps.len() != observations.len() {
        return Err(Error::LengthMismatch { left: crps.len(), right: observations.len() });
    }
    normalized(crps.iter().sum(), observations.iter().map(|o| o.abs()).sum())
}

fn normalized(num: f64, den: f64) -> Result<f64> {
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(num / den)
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("quantile level {rho} outside (0, 1)")))
    }
}

/// Quantile loss `2(ẑ − z)((1 − ρ)·1[ẑ > z] − ρ·1[ẑ ≤ z])`.
pub fn quantile_loss(observed: f64, predicted: f64, rho: f64) -> f64 {
    let diff = predicted - observed;
    if predicted > observed {
        2.0 * diff * (1.0 - rho)
    } else {
        -2.0 * diff * rho
    }
}

/// Summed quantile loss normalized by the total absolute observation.
pub fn rho_risk(observations: &[f64], quantiles: &[f64], rho: f64) -> Result<f64> {
    check_rho(rho)?;
    if observations.len() != quantiles.len() {
        return Err(Error::LengthMismatch { left: observations.len(), right: quantiles.len() });
    }
    let loss = observations.iter().zip(quantiles).map(|(&z, &q)| quantile_loss(z, q, rho)).sum();
    normalized(loss, observations.iter().map(|o| o.abs()).sum())
}

pub fn mse(observations: &[f64], predictions: &[f64]) -> Result<f64> {
    if observations.len() != predictions.len() {
        return Err(Error::LengthMismatch { left: observations.len(), right: predictions.len() });
    }
    if observations.is_empty() {
        return Err(Error::ZeroDenominator);
    }
    let sse: f64 = observations.iter().zip(predictions).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / observations.len() as f64)
}

/// Type-7 (linear interpolation) quantile of an ascending-sorted sample.
pub fn quantile_sorted(sorted: &[f64], rho: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * rho;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(samples: &[f64], rho: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, rho)
}

/// Sample autocorrelation at lags `0..=max_lag` and the 95% white-noise band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acf {
    pub values: Vec<f64>,
    pub band: f64,
    pub n: usize,
}

pub fn acf(residuals: &[f64], max_lag: usize) -> Result<Acf> {
    acf_pooled(&[residuals], max_lag)
}

/// Autocorrelation pooled over several segments: products never straddle a
/// segment boundary and the mean is taken over all points.
pub fn acf_pooled<S: AsRef<[f64]>>(segments: &[S], max_lag: usize) -> Result<Acf> {
    let n: usize = segments.iter().map(|s| s.as_ref().len()).sum();
    if max_lag == 0 || segments.iter().any(|s| s.as_ref().len() <= max_lag) {
        let have = segments.iter().map(|s| s.as_ref().len()).min().unwrap_or(0);
        return Err(Error::SeriesTooShort { series: "residuals".into(), have, need: max_lag.max(1) + 1 });
    }
    let mean = segments.iter().flat_map(|s| s.as_ref().iter()).sum::<f64>() / n as f64;
    let den: f64 = segments.iter().flat_map(|s| s.as_ref().iter()).map(|e| (e - mean) * (e - mean)).sum();
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let values = (0..=max_lag)
        .map(|k| {
            let num: f64 = segments
                .iter()
                .map(|s| {
                    let s = s.as_ref();
                    s.iter().zip(&s[k..]).map(|(a, b)| (a - mean) * (b - mean)).sum::<f64>()
                })
                .sum();
            num / den
        })
        .collect();
    Ok(Acf { values, band: 1.96 / (n as f64).sqrt(), n })
}

/// Mean and sample standard deviation of a forecast sample.
pub fn fit_gaussian(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Spread below which a fitted Gaussian is treated as a point mass.
const MIN_FIT_STD: f64 = 1e-12;

/// Headline scores of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// CRPS of a Gaussian fitted to each step's samples.
    pub crps: f64,
    /// Direct sample CRPS estimator.
    pub crps_empirical: f64,
    #[serde(rename = "risk_0.5")]
    pub risk_05: f64,
    #[serde(rename = "risk_0.9")]
    pub risk_09: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub scores: Scores,
    pub per_series: BTreeMap<String, Scores>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Default)]
struct Sums {
    crps: f64,
    crps_empirical: f64,
    risk_05: f64,
    risk_09: f64,
    sse: f64,
    abs_obs: f64,
    count: usize,
}

impl Sums {
    fn add(&mut self, o: &Sums) {
        self.crps += o.crps;
        self.crps_empirical += o.crps_empirical;
        self.risk_05 += o.risk_05;
        self.risk_09 += o.risk_09;
        self.sse += o.sse;
        self.abs_obs += o.abs_obs;
        self.count += o.count;
    }

    fn scores(&self) -> Result<Scores> {
        if self.count == 0 {
            return Err(Error::ZeroDenominator);
        }
        Ok(Scores {
            crps: normalized(self.crps, self.abs_obs)?,
            crps_empirical: normalized(self.crps_empirical, self.abs_obs)?,
            risk_05: normalized(self.risk_05, self.abs_obs)?,
            risk_09: normalized(self.risk_09, self.abs_obs)?,
            mse: self.sse / self.count as f64,
        })
    }
}

/// Accumulates per-point scores in original units, normalizing only at the end.
#[derive(Debug, Clone)]
pub struct EvalAccumulator {
    ids: Vec<String>,
    sums: Vec<Sums>,
}

impl EvalAccumulator {
    pub fn new(ids: Vec<String>) -> Self {
        let sums = vec![Sums::default(); ids.len()];
        Self { ids, sums }
    }

    /// Scores one observed value against a forecast sample.
    pub fn add_samples(&mut self, series: usize, observed: f64, samples: &[f64]) -> Result<()> {
        let (mean, std) = fit_gaussian(samples);
        let crps = if std > MIN_FIT_STD { crps_gaussian(mean, std, observed)? } else { (observed - mean).abs() };
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let s = Sums {
            crps,
            crps_empirical: crps_empirical(samples, observed)?,
            risk_05: quantile_loss(observed, quantile_sorted(&sorted, 0.5), 0.5),
            risk_09: quantile_loss(observed, quantile_sorted(&sorted, 0.9), 0.9),
            sse: (observed - mean) * (observed - mean),
            abs_obs: observed.abs(),
            count: 1,
        };
        self.sums[series].add(&s);
        Ok(())
    }

    /// Scores a deterministic forecast, whose CRPS is the absolute error.
    pub fn add_point(&mut self, series: usize, observed: f64, forecast: f64) {
        let err = (observed - forecast).abs();
        let s = Sums {
            crps: err,
            crps_empirical: err,
            risk_05: quantile_loss(observed, forecast, 0.5),
            risk_09: quantile_loss(observed, forecast, 0.9),
            sse: err * err,
            abs_obs: observed.abs(),
            count: 1,
        };
        self.sums[series].add(&s);
    }

    pub fn finish(self, metadata: BTreeMap<String, serde_json::Value>) -> Result<EvalReport> {
        let mut total = Sums::default();
        let mut per_series = BTreeMap::new();
        for (id, s) in self.ids.into_iter().zip(&self.sums) {
            total.add(s);
            if s.count > 0 {
                per_series.insert(id, s.scores()?);
            }
        }
        Ok(EvalReport { scores: total.scores()?, per_series, metadata })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn gaussian_crps_values() {
        let c = crps_gaussian(0.0, 1.0, 0.0).unwrap();
        assert!((c - 0.233695).abs() < 1e-6);
        // 2φ(0) − 1/√π
        let oracle = 2.0 / (2.0 * std::f64::consts::PI).sqrt() - 1.0 / std::f64::consts::PI.sqrt();
        assert!((c - oracle).abs() < 1e-15);
        assert!((crps_gaussian(0.0, 2.0, 0.0).unwrap() - 0.467390).abs() < 1e-6);
        assert!((crps_gaussian(0.0, 1e-8, 1.0).unwrap() - 1.0).abs() < 1e-6);
        assert!(matches!(crps_gaussian(0.0, 0.0, 1.0), Err(Error::NonpositiveSigma(_))));
    }

    #[test]
    fn gaussian_crps_matches_numerical_integral() {
        // ∫ (F(x) − 1[x ≥ y])² dx by the trapezoid rule, split at the jump
        for &(mu, sigma, y) in &[(0.3, 0.7, 1.1), (-2.0, 1.5, 0.0), (5.0, 0.2, 4.9)] {
            let trapezoid = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| {
                let n = 200_000;
                let h = (b - a) / n as f64;
                (0..n).map(|i| 0.5 * h * (f(a + i as f64 * h) + f(a + (i + 1) as f64 * h))).sum::<f64>()
            };
            let cdf = |x: f64| std_normal_cdf((x - mu) / sigma);
            let integral = trapezoid(mu - 12.0 * sigma - 2.0, y, &|x| cdf(x).powi(2))
                + trapezoid(y, mu + 12.0 * sigma + 2.0, &|x| (1.0 - cdf(x)).powi(2));
            assert!((integral - crps_gaussian(mu, sigma, y).unwrap()).abs() < 1e-5);
        }
    }

    #[test]
    fn empirical_crps_values() {
        assert_eq!(crps_empirical(&[2.0, 2.0, 2.0], 2.0).unwrap(), 0.0);
        assert!((crps_empirical(&[0.0, 1.0], 0.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(crps_empirical(&[1.0], 0.0), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn empirical_crps_matches_pairwise_oracle() {
        let x: [f64; 7] = [0.3, -1.2, 4.0, 2.2, 0.3, 7.5, -0.4];
        let y: f64 = 1.7;
        let n = x.len() as f64;
        let first: f64 = x.iter().map(|v| (v - y).abs()).sum::<f64>() / n;
        let second: f64 = x.iter().flat_map(|a| x.iter().map(move |b| (a - b).abs())).sum::<f64>() / (n * n);
        assert!((crps_empirical(&x, y).unwrap() - (first - 0.5 * second)).abs() < 1e-13);
    }

    #[test]
    fn empirical_converges_to_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Normal::new(0.0, 1.0).unwrap();
        let s: Vec<f64> = (0..100_000).map(|_| d.sample(&mut rng)).collect();
        assert!((crps_empirical(&s, 0.0).unwrap() - 0.233695).abs() < 1e-2);
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate_crps(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(aggregate_crps(&[1.0, 1.0], &[2.0, 2.0]).unwrap(), 0.5);
        assert!(matches!(aggregate_crps(&[1.0], &[0.0]), Err(Error::ZeroDenominator)));
        assert!(aggregate_crps(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn aggregate_is_scale_invariant() {
        let obs = [3.0, 5.0, 2.5];
        let mus = [2.0, 5.5, 3.0];
        let c = 7.3;
        let base: Vec<f64> = obs.iter().zip(&mus).map(|(y, m)| crps_gaussian(*m, 0.8, *y).unwrap()).collect();
        let scaled: Vec<f64> = obs.iter().zip(&mus).map(|(y, m)| crps_gaussian(c * m, c * 0.8, c * y).unwrap()).collect();
        let sobs: Vec<f64> = obs.iter().map(|o| o * c).collect();
        let a = aggregate_crps(&base, &obs).unwrap();
        let b = aggregate_crps(&scaled, &sobs).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rho_risk_examples() {
        assert_eq!(rho_risk(&[1.0, 2.0], &[1.0, 2.0], 0.5).unwrap(), 0.0);
        assert!((rho_risk(&[10.0], &[12.0], 0.5).unwrap() - 0.2).abs() < 1e-15);
        assert!((rho_risk(&[100.0], &[90.0], 0.9).unwrap() - 0.18).abs() < 1e-15);
        assert_eq!(quantile_loss(100.0, 90.0, 0.9), 18.0);
        assert!(rho_risk(&[1.0], &[1.0], 1.0).is_err());
        assert!(matches!(rho_risk(&[0.0], &[1.0], 0.5), Err(Error::ZeroDenominator)));
    }

    #[test]
    fn median_risk_is_scaled_absolute_error() {
        let z = [3.0, 7.0, 1.0, 4.0];
        let q = [2.0, 9.0, 1.0, 4.5];
        let sum_z: f64 = z.iter().sum();
        let expected = 2.0 / sum_z * z.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() * 0.5;
        assert!((rho_risk(&z, &q, 0.5).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 2.5);
        assert_eq!(mse(&[2.0, 1.0], &[4.0, 2.0]).unwrap(), 2.5);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn quantile_type7() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
        assert!((quantile_sorted(&s, 0.9) - 3.7).abs() < 1e-15);
        assert_eq!(quantile(&[5.0], 0.3), 5.0);
    }

    #[test]
    fn acf_examples() {
        let x: Vec<f64> = (0..50).map(|i| ((i * 7919) % 31) as f64).collect();
        let a = acf(&x, 5).unwrap();
        assert_eq!(a.values[0], 1.0);
        assert!((a.band - 1.96 / 50f64.sqrt()).abs() < 1e-15);
        assert!(matches!(acf(&x[..3], 5), Err(Error::SeriesTooShort { .. })));
        assert!(acf(&[1.0, 1.0, 1.0], 1).is_err());
        let alt: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!((acf(&alt, 1).unwrap().values[1] + 0.99).abs() < 1e-12);
    }

    #[test]
    fn ar1_and_white_noise_acf() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Normal::new(0.0, 1.0).unwrap();
        let mut e = 0.0;
        let ar: Vec<f64> = (0..10_000)
            .map(|_| {
                e = 0.8 * e + 0.6 * d.sample(&mut rng);
                e
            })
            .collect();
        let r = acf(&ar, 1).unwrap().values[1];
        assert!((0.76..=0.84).contains(&r));

        let mut outside = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let w: Vec<f64> = (0..1000).map(|_| d.sample(&mut rng)).collect();
            let a = acf(&w, 24).unwrap();
            outside += a.values[1..].iter().filter(|v| v.abs() > a.band).count();
        }
        assert!((outside as f64) / (20.0 * 24.0) <= 0.10);
    }

    #[test]
    fn pooled_acf_ignores_boundaries() {
        let a = [1.0, 2.0, 3.0];
        let b = [-3.0, -2.0, -1.0];
        let pooled = acf_pooled(&[&a[..], &b[..]], 1).unwrap();
        // mean 0, products (1·2 + 2·3) + (6 + 2), squares 28
        assert!((pooled.values[1] - 16.0 / 28.0).abs() < 1e-15);
        assert_eq!(pooled.n, 6);
    }

    #[test]
    fn accumulator_scores() {
        let mut acc = EvalAccumulator::new(vec!["a".into(), "b".into()]);
        acc.add_point(0, 10.0, 12.0);
        acc.add_point(1, 100.0, 90.0);
        let r = acc.finish(BTreeMap::new()).unwrap();
        assert!((r.scores.crps - 12.0 / 110.0).abs() < 1e-15);
        assert!((r.scores.risk_05 - 12.0 / 110.0).abs() < 1e-15);
        assert!((r.scores.risk_09 - (0.4 + 18.0) / 110.0).abs() < 1e-15);
        assert_eq!(r.scores.mse, 52.0);
        assert!((r.per_series["a"].crps - 0.2).abs() < 1e-15);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["crps", "risk_0.5", "risk_0.9", "mse"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn accumulator_sample_route() {
        let mut acc = EvalAccumulator::new(vec!["a".into()]);
        let samples: Vec<f64> = (0..101).map(|i| 4.0 + (i as f64 - 50.0) / 25.0).collect();
        acc.add_samples(0, 4.5, &samples).unwrap();
        let r = acc.finish(BTreeMap::new()).unwrap();
        let (m, s) = fit_gaussian(&samples);
        assert!((r.scores.crps - crps_gaussian(m, s, 4.5).unwrap() / 4.5).abs() < 1e-12);
        assert!((r.scores.crps_empirical - crps_empirical(&samples, 4.5).unwrap() / 4.5).abs() < 1e-12);
        assert!((r.scores.mse - 0.25).abs() < 1e-12);
    }
}
