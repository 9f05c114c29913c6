//! Post-hoc recalibration of count intervals: standardized residuals on a
//! validation set, their empirical CDF, an isotonic fit by pool-adjacent-
//! violators, and piecewise-linear quantile inversion.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// Smallest predictive standard deviation used when standardizing.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualRecord {
    pub gt_count: f64,
    pub pred_count: f64,
    pub pred_std: f64,
}

impl ResidualRecord {
    pub fn new(gt_count: f64, pred_count: f64, pred_std: f64) -> Self {
        Self {
            gt_count,
            pred_count,
            pred_std,
        }
    }
}

/// `(C - C_mean) / sigma` per record, with `sigma` floored at [`SIGMA_FLOOR`].
pub fn standardized_residuals(records: &[ResidualRecord]) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            if r.pred_std.is_nan() || r.pred_std < 0.0 {
                return Err(invalid(format!(
                    "predictive std must be non-negative, got {}",
                    r.pred_std
                )));
            }
            let sigma = if r.pred_std < SIGMA_FLOOR {
                log::warn!(
                    "predictive std {} below floor, using {SIGMA_FLOOR}",
                    r.pred_std
                );
                SIGMA_FLOOR
            } else {
                r.pred_std
            };
            Ok((r.gt_count - r.pred_count) / sigma)
        })
        .collect()
}

/// Pairs `(z_n, P(z_n))` sorted by `z`, where `P(z)` is the fraction of
/// residuals `<= z`.
pub fn empirical_cdf(z_values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if z_values.is_empty() {
        return Err(invalid("empirical_cdf: no residuals"));
    }
    if z_values.iter().any(|z| !z.is_finite()) {
        return Err(invalid("empirical_cdf: non-finite residual"));
    }
    let mut sorted = z_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted
        .iter()
        .map(|&z| {
            let at_most = sorted.partition_point(|&x| x <= z);
            (z, at_most as f64 / n)
        })
        .collect())
}

/// Weighted least-squares non-decreasing fit (pool-adjacent-violators).
pub fn pava(values: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), weights.len());
    // (weighted mean, total weight, number of points)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, n2) = blocks[blocks.len() - 1];
            let (m1, w1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let w = w1 + w2;
            *blocks.last_mut().unwrap() = ((m1 * w1 + m2 * w2) / w, w, n1 + n2);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, n)| std::iter::repeat_n(m, n))
        .collect()
}

/// Monotone map from standardized residual to calibrated quantile.
#[derive(Clone, Debug, PartialEq)]
pub struct RecalibrationMap {
    knots: Vec<(f64, f64)>,
}

impl RecalibrationMap {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(invalid("recalibration map needs at least one knot"));
        }
        for w in knots.windows(2) {
            if !(w[0].0 < w[1].0) || w[0].1 > w[1].1 {
                return Err(invalid(
                    "recalibration knots must be increasing in z and non-decreasing in quantile",
                ));
            }
        }
        if knots
            .iter()
            .any(|&(z, q)| !z.is_finite() || !(0.0..=1.0).contains(&q))
        {
            return Err(invalid(
                "recalibration knots must be finite with quantiles in [0, 1]",
            ));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// Calibrated quantile at `z`, piecewise linear and flat beyond the ends.
    pub fn evaluate(&self, z: f64) -> f64 {
        let k = &self.knots;
        let i = k.partition_point(|&(kz, _)| kz < z);
        if i == 0 {
            return k[0].1;
        }
        if i == k.len() {
            return k[k.len() - 1].1;
        }
        let (z1, q1) = k[i];
        if z == z1 {
            return q1;
        }
        let (z0, q0) = k[i - 1];
        q0 + (z - z0) / (z1 - z0) * (q1 - q0)
    }

    /// Smallest `z` whose calibrated quantile reaches `p`, interpolating
    /// linearly between knots; clamped to the outermost knots.
    pub fn invert_quantile(&self, p: f64) -> Result<f64> {
        let k = &self.knots;
        if k.len() < 2 {
            return Err(invalid("quantile inversion needs at least two knots"));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(invalid(format!("quantile level {p} outside (0, 1)")));
        }
        let i = k.partition_point(|&(_, q)| q < p);
        if i == 0 {
            return Ok(k[0].0);
        }
        if i == k.len() {
            return Ok(k[k.len() - 1].0);
        }
        let (z1, q1) = k[i];
        if q1 == p {
            return Ok(z1);
        }
        let (z0, q0) = k[i - 1];
        Ok(z0 + (p - q0) / (q1 - q0) * (z1 - z0))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("z,quantile\n");
        for (z, q) in &self.knots {
            let _ = writeln!(out, "{z},{q}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["z", "quantile"] {
            return Err(Error::Format(format!(
                "expected header z,quantile, got {headers:?}"
            )));
        }
        let mut knots = Vec::new();
        for rec in reader.deserialize::<(f64, f64)>() {
            knots.push(rec?);
        }
        Self::new(knots).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Isotonic fit of `targets` over sorted `z`. Equal-`z` groups are averaged
/// first and enter the fit with their multiplicity as weight.
pub fn fit_isotonic(pairs: &[(f64, f64)]) -> Result<RecalibrationMap> {
    if pairs.is_empty() {
        return Err(invalid("fit_isotonic: no data"));
    }
    if pairs.windows(2).any(|w| w[0].0 > w[1].0) {
        return Err(invalid("fit_isotonic: pairs must be sorted by z"));
    }
    let mut zs = Vec::new();
    let mut means = Vec::new();
    let mut weights = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        let z = pairs[i].0;
        let j = i + pairs[i..].iter().take_while(|p| p.0 == z).count();
        let group = &pairs[i..j];
        zs.push(z);
        means.push(group.iter().map(|p| p.1).sum::<f64>() / group.len() as f64);
        weights.push(group.len() as f64);
        i = j;
    }
    let fitted = pava(&means, &weights);
    Ok(RecalibrationMap {
        knots: zs.into_iter().zip(fitted).collect(),
    })
}

/// Standardize, take the empirical CDF and fit the isotonic map.
pub fn recalibrate(records: &[ResidualRecord]) -> Result<RecalibrationMap> {
    let z = standardized_residuals(records)?;
    let pairs = empirical_cdf(&z)?;
    fit_isotonic(&pairs)
}
