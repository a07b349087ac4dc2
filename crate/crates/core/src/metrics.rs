//! Point and probabilistic accuracy metrics, and Gaussian quantile helpers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::pinball;

/// Mean absolute percentage error, in percent.
pub fn mape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    mape_with_epsilon(y, y_hat, 0.0)
}

/// MAPE where targets with `|y| <= epsilon` are replaced by `epsilon` in the
/// denominator. With `epsilon == 0` zero targets are rejected.
pub fn mape_with_epsilon(y: &[f64], y_hat: &[f64], epsilon: f64) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::mismatch(y.len(), y_hat.len(), "forecast length"));
    }
    if y.is_empty() {
        return Err(Error::InvalidParameter("empty target".into()));
    }
    let mut total = 0.0;
    for (i, (&a, &f)) in y.iter().zip(y_hat).enumerate() {
        let denom = a.abs().max(epsilon);
        if denom == 0.0 {
            return Err(Error::ZeroTarget(i));
        }
        total += (a - f).abs() / denom;
    }
    Ok(100.0 * total / y.len() as f64)
}

/// Type-7 sample quantile (linear interpolation between order statistics).
pub fn sample_quantile(sorted: &[f64], tau: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * tau;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Unconditional quantiles of a training series, used as the trivial
/// predictor in [`likelihood_ratio`].
pub fn trivial_quantiles(train: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::InvalidParameter("empty training series".into()));
    }
    if let Some(&t) = taus.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::InvalidQuantile(t));
    }
    let mut sorted = train.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(taus.iter().map(|&t| sample_quantile(&sorted, t)).collect())
}

/// Summed pinball loss of `forecasts[k][i]` (target `k`, level `taus[i]`).
pub fn pinball_total(y: &[f64], forecasts: &[Vec<f64>], taus: &[f64]) -> Result<f64> {
    if y.len() != forecasts.len() {
        return Err(Error::mismatch(y.len(), forecasts.len(), "quantile forecast count"));
    }
    let mut total = 0.0;
    for (&yk, q) in y.iter().zip(forecasts) {
        if q.len() != taus.len() {
            return Err(Error::mismatch(taus.len(), q.len(), "quantile grid"));
        }
        for (&qi, &tau) in q.iter().zip(taus) {
            total += pinball(yk, qi, tau);
        }
    }
    Ok(total)
}

/// Summed pinball loss of the model over that of the trivial quantiles;
/// values below 1 beat the trivial predictor.
pub fn likelihood_ratio(y: &[f64], forecasts: &[Vec<f64>], trivial: &[f64], taus: &[f64]) -> Result<f64> {
    let num = pinball_total(y, forecasts, taus)?;
    let triv: Vec<Vec<f64>> = vec![trivial.to_vec(); y.len()];
    let den = pinball_total(y, &triv, taus)?;
    if !(den > 0.0) {
        return Err(Error::ZeroDenominator("trivial predictor has zero pinball loss".into()));
    }
    Ok(num / den)
}

/// `E|X - x| - E|X - X'| / 2` under the empirical distribution of `samples`.
pub fn crps_from_samples(samples: &[f64], x: f64) -> f64 {
    let n = samples.len();
    if n == 0 {
        return f64::NAN;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let first: f64 = s.iter().map(|v| (v - x).abs()).sum::<f64>() / n as f64;
    // sum_{i,j} |s_i - s_j| = 2 sum_i (2i - n + 1) s_(i) for sorted s
    let pair: f64 = s
        .iter()
        .enumerate()
        .map(|(i, &v)| (2.0 * i as f64 - n as f64 + 1.0) * v)
        .sum::<f64>()
        * 2.0
        / (n * n) as f64;
    first - 0.5 * pair
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Inverse error function on (-1, 1).
pub fn erf_inv(y: f64) -> f64 {
    if y.is_nan() || y <= -1.0 || y >= 1.0 {
        return match y {
            1.0 => f64::INFINITY,
            -1.0 => f64::NEG_INFINITY,
            _ => f64::NAN,
        };
    }
    if y == 0.0 {
        return 0.0;
    }
    // Giles' single-precision approximation as a starting point
    let w = -((1.0 - y) * (1.0 + y)).ln();
    let mut x = if w < 5.0 {
        let w = w - 2.5;
        let mut p = 2.810_226_36e-08;
        for c in [
            3.432_739_39e-07,
            -3.523_387_7e-06,
            -4.391_506_54e-06,
            0.000_218_580_87,
            -0.001_253_725_03,
            -0.004_177_681_64,
            0.246_640_727,
            1.501_409_41,
        ] {
            p = c + p * w;
        }
        p * y
    } else {
        let w = w.sqrt() - 3.0;
        let mut p = -0.000_200_214_257;
        for c in [
            0.000_100_950_558,
            0.001_349_343_22,
            -0.003_673_428_44,
            0.005_739_507_73,
            -0.007_622_461_3,
            0.009_438_870_47,
            1.001_674_06,
            2.832_976_82,
        ] {
            p = c + p * w;
        }
        p * y
    };
    let two_over_sqrt_pi = std::f64::consts::FRAC_2_SQRT_PI;
    for _ in 0..50 {
        let f = erf(x) - y;
        let step = f / (two_over_sqrt_pi * (-x * x).exp());
        x -= step;
        if step.abs() <= 1e-12 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// A normal distribution `N(mu, sigma^2)` queried by quantile level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianQuantileOracle {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianQuantileOracle {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(Error::InvalidParameter(format!("gaussian N({mu}, {sigma}^2)")));
        }
        Ok(GaussianQuantileOracle { mu, sigma })
    }

    pub fn quantile(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidQuantile(tau));
        }
        Ok(self.mu + self.sigma * std::f64::consts::SQRT_2 * erf_inv(2.0 * tau - 1.0))
    }

    /// Distribution of the sum of two independent variables.
    pub fn independent_sum(&self, other: &GaussianQuantileOracle) -> GaussianQuantileOracle {
        GaussianQuantileOracle {
            mu: self.mu + other.mu,
            sigma: self.sigma.hypot(other.sigma),
        }
    }
}

pub fn gaussian_quantile(oracle: &GaussianQuantileOracle, tau: f64) -> Result<f64> {
    oracle.quantile(tau)
}

/// Quantiles of `Y = X1 + X2` for independent Gaussians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdditivityCheck {
    /// `Q_Y(tau)`.
    pub lhs: f64,
    /// `Q_X1(tau) + Q_X2(tau)`.
    pub rhs: f64,
    pub additive: bool,
    /// `(Q_Y - mu_Y)^2 - sum_k (Q_Xk - mu_k)^2`.
    pub spread_residual: f64,
}

pub fn check_quantile_additivity(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64, tau: f64) -> Result<AdditivityCheck> {
    let x1 = GaussianQuantileOracle::new(mu1, sigma1)?;
    let x2 = GaussianQuantileOracle::new(mu2, sigma2)?;
    let y = x1.independent_sum(&x2);
    let (q1, q2, qy) = (x1.quantile(tau)?, x2.quantile(tau)?, y.quantile(tau)?);
    let rhs = q1 + q2;
    let scale = qy.abs().max(rhs.abs()).max(1.0);
    let spread_residual = (qy - y.mu).powi(2) - (q1 - mu1).powi(2) - (q2 - mu2).powi(2);
    Ok(AdditivityCheck {
        lhs: qy,
        rhs,
        additive: (qy - rhs).abs() <= 1e-12 * scale,
        spread_residual,
    })
}

/// Metrics of one method at one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: String,
    pub level: usize,
    pub method: String,
    pub mape: f64,
    pub lr: Option<f64>,
    pub crps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub horizon: usize,
    pub seed: u64,
    pub config_hash: String,
    pub nodes: Vec<NodeMetrics>,
    /// Reconciliation error of each method's center forecasts, averaged over
    /// evaluation origins.
    pub reconciliation_error: BTreeMap<String, f64>,
}

type MetricFn = fn(&NodeMetrics) -> Option<f64>;

const METRICS: [(&str, MetricFn); 3] = [("mape", |m| Some(m.mape)), ("lr", |m| m.lr), ("crps", |m| m.crps)];

impl EvaluationReport {
    /// Arithmetic mean of a metric over the nodes of one level.
    pub fn level_mean(&self, method: &str, level: usize, metric: impl Fn(&NodeMetrics) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self
            .nodes
            .iter()
            .filter(|m| m.method == method && m.level == level)
            .filter_map(&metric)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn methods(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for m in &self.nodes {
            if !seen.contains(&m.method) {
                seen.push(m.method.clone());
            }
        }
        seen
    }

    /// Flat `node,level,method,metric,value` rows: one per node metric, then
    /// level means (node `mean`), then reconciliation errors (node `*`).
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["node", "level", "method", "metric", "value"])?;
        for m in &self.nodes {
            let level = m.level.to_string();
            for (name, metric) in METRICS {
                if let Some(v) = metric(m) {
                    w.write_record([m.node.as_str(), &level, &m.method, name, &v.to_string()])?;
                }
            }
        }
        let depth = self.nodes.iter().map(|m| m.level).max().unwrap_or(0);
        for method in self.methods() {
            for level in 1..=depth {
                for (name, metric) in METRICS {
                    if let Some(v) = self.level_mean(&method, level, metric) {
                        w.write_record(["mean", &level.to_string(), method.as_str(), name, &v.to_string()])?;
                    }
                }
            }
        }
        for (method, v) in &self.reconciliation_error {
            w.write_record(["*", "*", method.as_str(), "reconciliation_error", &v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[5.0, 7.0], &[5.0, 7.0]).unwrap(), 0.0);
        assert!((mape(&[100.0], &[90.0]).unwrap() - 10.0).abs() < 1e-12);
        assert!(matches!(mape(&[0.0, 1.0], &[1.0, 1.0]), Err(Error::ZeroTarget(0))));
        assert!((mape_with_epsilon(&[0.0], &[0.5], 1.0).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn lr_examples() {
        let taus = [0.05, 0.5, 0.95];
        let y = [1.0, 2.0, 3.0];
        let triv = trivial_quantiles(&[0.0, 1.0, 2.0, 3.0, 4.0], &taus).unwrap();
        let same = vec![triv.clone(); 3];
        assert!((likelihood_ratio(&y, &same, &triv, &taus).unwrap() - 1.0).abs() < 1e-15);
        let exact: Vec<Vec<f64>> = y.iter().map(|&v| vec![v; 3]).collect();
        assert!(likelihood_ratio(&y, &exact, &triv, &taus).unwrap() < 1.0);
        assert!(matches!(
            likelihood_ratio(&[1.0], &[vec![1.0; 3]], &[1.0; 3], &taus),
            Err(Error::ZeroDenominator(_))
        ));
    }

    #[test]
    fn type7_quantiles() {
        let q = trivial_quantiles(&[4.0, 1.0, 3.0, 2.0], &[0.25, 0.5, 0.9]).unwrap();
        assert_eq!(q, vec![1.75, 2.5, 3.7]);
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps_from_samples(&[3.0], 3.0), 0.0);
        assert!((crps_from_samples(&[0.0, 2.0], 1.0) - 0.5).abs() < 1e-15);
        assert!((crps_from_samples(&[0.0, 2.0], 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_examples() {
        let g = GaussianQuantileOracle::new(4.0, 2.0).unwrap();
        assert_eq!(g.quantile(0.5).unwrap(), 4.0);
        let s = GaussianQuantileOracle::new(1.0, 1.0)
            .unwrap()
            .independent_sum(&GaussianQuantileOracle::new(2.0, 3.0).unwrap());
        assert!((s.quantile(0.5).unwrap() - 3.0).abs() < 1e-15);
        let z = GaussianQuantileOracle::new(0.0, 1.0).unwrap();
        assert!((z.quantile(0.975).unwrap() - 1.959964).abs() < 1e-5);
        assert!(z.quantile(1.0).is_err());
        assert!(GaussianQuantileOracle::new(0.0, 0.0).is_err());
    }

    #[test]
    fn non_additivity() {
        let c = check_quantile_additivity(0.0, 1.0, 0.0, 1.0, 0.9).unwrap();
        assert!(!c.additive);
        let k = std::f64::consts::SQRT_2 * erf_inv(0.8);
        assert!((c.rhs - 2.0 * k).abs() < 1e-12);
        assert!((c.lhs - std::f64::consts::SQRT_2 * k).abs() < 1e-12);
        assert!(c.spread_residual.abs() < 1e-12);
        assert!(check_quantile_additivity(1.0, 1.0, 2.0, 1.0, 0.5).unwrap().additive);
    }

    #[test]
    fn erf_inv_round_trip() {
        for i in 1..200 {
            let y = -1.0 + i as f64 / 100.0;
            let x = erf_inv(y);
            assert!((erf(x) - y).abs() < 1e-14, "{y}");
        }
        assert!((erf_inv(1.0 - 1e-12) - 5.042).abs() < 1e-3);
    }

    #[test]
    fn report_rows_include_level_means() {
        let node = |id: &str, level, mape| NodeMetrics {
            node: id.into(),
            level,
            method: "base".into(),
            mape,
            lr: None,
            crps: Some(1.0),
        };
        let report = EvaluationReport {
            horizon: 2,
            seed: 1,
            config_hash: "abc".into(),
            nodes: vec![node("T", 1, 4.0), node("A", 2, 1.0), node("B", 2, 3.0)],
            reconciliation_error: BTreeMap::from([("base".to_string(), 0.5)]),
        };
        assert_eq!(report.level_mean("base", 2, |m| Some(m.mape)), Some(2.0));
        let mut out = Vec::new();
        report.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("node,level,method,metric,value\nT,1,base,mape,4\n"));
        assert!(text.contains("mean,2,base,mape,2\n"));
        assert!(text.contains("mean,1,base,crps,1\n"));
        assert!(!text.contains(",lr,"));
        assert!(text.ends_with("*,*,base,reconciliation_error,0.5\n"));
    }
}
