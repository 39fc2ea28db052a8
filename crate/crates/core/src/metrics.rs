//! Evaluation metrics: relative error, squared error, mean squared error,
//! and a histogram estimate of the Kullback-Leibler divergence.

use serde::{Deserialize, Serialize};

use crate::domain::Field;
use crate::error::{invalid, Error, Result};
use crate::gan::UqSampleSet;

/// Default histogram resolution for [`kl_divergence`].
pub const DEFAULT_BINS: usize = 20;

fn same_grid(pred: &Field, truth: &Field) -> Result<()> {
    if pred.grid() != truth.grid() {
        return Err(invalid("prediction and truth are on different grids"));
    }
    Ok(())
}

/// `sqrt(sum (s - s_hat)^2) / sqrt(sum s_hat^2)` over flat value lists.
pub fn rel_error_values(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(invalid("prediction and truth differ in length"));
    }
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("relative error against an all-zero truth".into()));
    }
    Ok(num.sqrt() / den.sqrt())
}

/// `rel_error(pred, truth)`.
pub fn rel_error(pred: &Field, truth: &Field) -> Result<f64> {
    same_grid(pred, truth)?;
    rel_error_values(
        pred.values().as_slice().expect("standard layout"),
        truth.values().as_slice().expect("standard layout"),
    )
}

/// Pointwise `(s - s_hat)^2`.
pub fn squared_error_map(pred: &Field, truth: &Field) -> Result<Field> {
    same_grid(pred, truth)?;
    let diff = pred.values() - truth.values();
    Field::new(*truth.grid(), diff.mapv(|d| d * d))
}

/// Mean squared difference over flat value lists.
pub fn mse_values(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(invalid("prediction and truth must be non-empty and equally long"));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / truth.len() as f64)
}

/// Mean of [`squared_error_map`].
pub fn mse(pred: &Field, truth: &Field) -> Result<f64> {
    let se = squared_error_map(pred, truth)?;
    Ok(se.values().sum() / se.values().len() as f64)
}

/// `sum P ln(P / Q)` for two discrete distributions on the same support.
pub fn kl_distributions(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(invalid("distributions must be non-empty and share a support"));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi < 0.0 || qi < 0.0 {
            return Err(invalid("probabilities must be non-negative"));
        }
        if pi > 0.0 {
            if qi == 0.0 {
                return Err(Error::UndefinedMetric("P has mass where Q has none".into()));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// Add-one smoothed histogram of `samples` with `n_bins` equal bins on
/// `[lo, hi]`.
fn smoothed_histogram(samples: &[f64], lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
    let mut counts = vec![1.0; n_bins];
    let width = hi - lo;
    for &s in samples {
        let b = if width > 0.0 { (((s - lo) / width) * n_bins as f64).floor() as usize } else { 0 };
        counts[b.min(n_bins - 1)] += 1.0;
    }
    let total = samples.len() as f64 + n_bins as f64;
    counts.iter().map(|c| c / total).collect()
}

/// `kl_divergence(samples_p, samples_q, n_bins)`: shared bins over the
/// union range, one pseudo-count per bin.
pub fn kl_divergence(samples_p: &[f64], samples_q: &[f64], n_bins: usize) -> Result<f64> {
    if samples_p.is_empty() || samples_q.is_empty() {
        return Err(invalid("KL needs non-empty sample sets"));
    }
    if n_bins < 2 {
        return Err(invalid("KL needs at least two bins"));
    }
    if samples_p.iter().chain(samples_q).any(|v| !v.is_finite()) {
        return Err(invalid("KL samples must be finite"));
    }
    let (lo, hi) = samples_p
        .iter()
        .chain(samples_q)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let p = smoothed_histogram(samples_p, lo, hi, n_bins);
    let q = smoothed_histogram(samples_q, lo, hi, n_bins);
    kl_distributions(&p, &q)
}

/// How KL is aggregated over the domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    /// One histogram over all points and draws.
    #[default]
    Pooled,
    /// Mean of per-point KLs between draws at each point.
    PerPoint,
}

/// Scalar metrics plus squared-error maps (exported separately as CSV).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub re_rho: f64,
    pub re_u: Option<f64>,
    pub mse_rho: f64,
    pub mse_u: Option<f64>,
    pub kl_rho: f64,
    pub kl_u: Option<f64>,
    #[serde(skip)]
    pub se_rho: Option<Field>,
    #[serde(skip)]
    pub se_u: Option<Field>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn flat(f: &Field) -> &[f64] {
    f.values().as_slice().expect("standard layout")
}

/// Metrics of deterministic predictions; KL compares the pooled value
/// distributions of the two fields.
pub fn field_metrics(
    pred_rho: &Field,
    truth_rho: &Field,
    pred_u: Option<&Field>,
    truth_u: Option<&Field>,
    n_bins: usize,
) -> Result<MetricReport> {
    let mut report = MetricReport {
        re_rho: rel_error(pred_rho, truth_rho)?,
        re_u: None,
        mse_rho: mse(pred_rho, truth_rho)?,
        mse_u: None,
        kl_rho: kl_divergence(flat(pred_rho), flat(truth_rho), n_bins)?,
        kl_u: None,
        se_rho: Some(squared_error_map(pred_rho, truth_rho)?),
        se_u: None,
    };
    if let (Some(p), Some(t)) = (pred_u, truth_u) {
        report.re_u = Some(rel_error(p, t)?);
        report.mse_u = Some(mse(p, t)?);
        report.kl_u = Some(kl_divergence(flat(p), flat(t), n_bins)?);
        report.se_u = Some(squared_error_map(p, t)?);
    }
    Ok(report)
}

/// Reference for [`uq_metrics`]: either truth draws on the same points or
/// deterministic truth fields.
pub enum UqTruth<'a> {
    Samples(&'a UqSampleSet),
    Fields { rho: &'a Field, u: Option<&'a Field> },
}

fn kl_component(
    pred: &ndarray::Array2<f64>,
    truth: Option<&ndarray::Array2<f64>>,
    truth_field: Option<&Field>,
    n_bins: usize,
    mode: KlMode,
) -> Result<f64> {
    let truth_rows = |k: usize| -> Vec<f64> {
        match (truth, truth_field) {
            (Some(t), _) => t.row(k).to_vec(),
            (None, Some(f)) => vec![flat(f)[k]],
            _ => unreachable!("truth source required"),
        }
    };
    match mode {
        KlMode::Pooled => {
            let p: Vec<f64> = pred.iter().copied().collect();
            let q: Vec<f64> = match (truth, truth_field) {
                (Some(t), _) => t.iter().copied().collect(),
                (None, Some(f)) => flat(f).to_vec(),
                _ => unreachable!("truth source required"),
            };
            kl_divergence(&p, &q, n_bins)
        }
        KlMode::PerPoint => {
            let mut acc = 0.0;
            for k in 0..pred.nrows() {
                acc += kl_divergence(&pred.row(k).to_vec(), &truth_rows(k), n_bins)?;
            }
            Ok(acc / pred.nrows() as f64)
        }
    }
}

/// `uq_metrics(samples, truth)`: RE/SE/MSE on mean fields, KL on sample
/// histograms.
pub fn uq_metrics(samples: &UqSampleSet, truth: UqTruth<'_>, n_bins: usize, mode: KlMode) -> Result<MetricReport> {
    let mean_rho = samples.mean_rho()?;
    let mean_u = samples.mean_u()?;
    match truth {
        UqTruth::Samples(t) => {
            if t.grid != samples.grid || t.points != samples.points {
                return Err(invalid("prediction and truth samples are on different points"));
            }
            let truth_rho = t.mean_rho()?;
            let truth_u = t.mean_u()?;
            let mut r = field_metrics(&mean_rho, &truth_rho, mean_u.as_ref(), truth_u.as_ref(), n_bins)?;
            r.kl_rho = kl_component(&samples.rho, Some(&t.rho), None, n_bins, mode)?;
            r.kl_u = match (&samples.u, &t.u) {
                (Some(p), Some(q)) => Some(kl_component(p, Some(q), None, n_bins, mode)?),
                _ => None,
            };
            Ok(r)
        }
        UqTruth::Fields { rho, u } => {
            let rho = samples.restrict(rho)?;
            let u = u.map(|f| samples.restrict(f)).transpose()?;
            let mut r = field_metrics(&mean_rho, &rho, mean_u.as_ref(), u.as_ref(), n_bins)?;
            r.kl_rho = kl_component(&samples.rho, None, Some(&rho), n_bins, mode)?;
            r.kl_u = match (&samples.u, &u) {
                (Some(p), Some(f)) => Some(kl_component(p, None, Some(f), n_bins, mode)?),
                _ => None,
            };
            Ok(r)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Grid;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn field(values: &[f64]) -> Field {
        let grid = Grid::new(1.0, 1.0, values.len() / 2, 2).unwrap();
        Field::new(grid, Array2::from_shape_vec((values.len() / 2, 2), values.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn relative_error_examples() {
        let t = field(&[0.3, 0.1, 0.7, 0.2]);
        assert_eq!(rel_error(&t, &t).unwrap(), 0.0);
        let doubled = field(&[0.6, 0.2, 1.4, 0.4]);
        assert!((rel_error(&doubled, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!((rel_error_values(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(rel_error_values(&[1.0], &[0.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn squared_error_examples() {
        let t = field(&[0.3, 0.1, 0.7, 0.2]);
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        assert!(squared_error_map(&t, &t).unwrap().values().iter().all(|&v| v == 0.0));
        let shifted = field(&[0.55, 0.35, 0.95, 0.45]);
        assert!((mse(&shifted, &t).unwrap() - 0.0625).abs() < 1e-12);
        assert!((mse(&field(&[1.0, 0.0, 0.0, 0.0]), &field(&[0.0, 2.0, 0.0, 0.0])).unwrap() - 1.25).abs() < 1e-12);
        assert_eq!(mse_values(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 2.5);
    }

    #[test]
    fn kl_examples() {
        let s = [0.1, 0.4, 0.4, 0.9, 1.3];
        assert_eq!(kl_divergence(&s, &s, DEFAULT_BINS).unwrap(), 0.0);
        let forward = kl_distributions(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((forward - (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln())).abs() < 1e-12);
        assert!((forward - 0.143841036225890).abs() < 1e-12);
        let reverse = kl_distributions(&[0.25, 0.75], &[0.5, 0.5]).unwrap();
        assert!((reverse - (0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln())).abs() < 1e-12);
        assert!((reverse - forward).abs() > 1e-3);
        assert!(kl_divergence(&[], &s, 20).is_err());
        assert!(kl_divergence(&s, &s, 1).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(p in prop::collection::vec(-5.0f64..5.0, 1..60), q in prop::collection::vec(-5.0f64..5.0, 1..60), bins in 2usize..30) {
            prop_assert!(kl_divergence(&p, &q, bins).unwrap() >= 0.0);
        }

        #[test]
        fn relative_error_is_homogeneous(v in prop::collection::vec(-3.0f64..3.0, 8), w in prop::collection::vec(0.1f64..3.0, 8), c in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0]) {
            let a = rel_error_values(&v, &w).unwrap();
            let cv: Vec<f64> = v.iter().map(|x| c * x).collect();
            let cw: Vec<f64> = w.iter().map(|x| c * x).collect();
            let b = rel_error_values(&cv, &cw).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn mse_is_mean_of_map(v in prop::collection::vec(-3.0f64..3.0, 8), w in prop::collection::vec(-3.0f64..3.0, 8)) {
            let (a, b) = (field(&v), field(&w));
            let map = squared_error_map(&a, &b).unwrap();
            prop_assert_eq!(mse(&a, &b).unwrap(), map.values().sum() / 8.0);
        }
    }
}
