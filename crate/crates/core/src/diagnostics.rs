//! Evaluation helpers: ENU error statistics, histograms, Gaussian mixture
//! fits of residuals and outlier detection scores.

use crate::geo::{self, Enu};
use crate::graph::WeightSet;
use crate::obs_model::{EpochState, SignalLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

/// Variance floor for mixture components (m²).
pub const GMM_VARIANCE_FLOOR: f64 = 1e-6;
pub const GMM_TOLERANCE: f64 = 1e-8;
pub const GMM_MAX_ITERATIONS: usize = 500;
pub const DEFAULT_BINS: usize = 20;
pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error("no overlapping epochs between solution and truth")]
    NoOverlap,
    #[error("empty input")]
    Empty,
    #[error("need at least {needed} distinct samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("all samples identical ({value}); mixture collapses to the variance floor")]
    Degenerate { value: f64 },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("value {value} at index {index} outside [{lo}, {hi}]")]
    OutOfRange { index: usize, value: f64, lo: f64, hi: f64 },
    #[error("baseline mean must be positive, got {0}")]
    BaselineNotPositive(f64),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] geo::GeoError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochError {
    pub t: f64,
    pub enu: Enu,
    pub err_2d: f64,
    pub err_3d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), max: values.iter().cloned().fold(0.0, f64::max) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub epochs: Vec<EpochError>,
    pub horizontal: Aggregate,
    pub spatial: Aggregate,
    /// Solution epochs with no truth epoch within tolerance.
    pub unmatched: usize,
}

impl ErrorReport {
    pub fn from_epochs(epochs: Vec<EpochError>, unmatched: usize) -> Self {
        let h: Vec<f64> = epochs.iter().map(|e| e.err_2d).collect();
        let s: Vec<f64> = epochs.iter().map(|e| e.err_3d).collect();
        Self { horizontal: Aggregate::of(&h), spatial: Aggregate::of(&s), epochs, unmatched }
    }

    /// 2D and 3D mean improvement of this report over `baseline` (%).
    pub fn improvement_over(&self, baseline: &ErrorReport) -> Result<(f64, f64), DiagError> {
        Ok((
            improvement_pct(baseline.horizontal.mean, self.horizontal.mean)?,
            improvement_pct(baseline.spatial.mean, self.spatial.mean)?,
        ))
    }
}

/// `(baseline - method) / baseline * 100`.
pub fn improvement_pct(baseline_mean: f64, method_mean: f64) -> Result<f64, DiagError> {
    if !(baseline_mean > 0.0 && baseline_mean.is_finite()) {
        return Err(DiagError::BaselineNotPositive(baseline_mean));
    }
    Ok((baseline_mean - method_mean) / baseline_mean * 100.0)
}

/// ENU errors with solution epochs matched to the nearest truth epoch within
/// half the truth sampling period.
pub fn enu_error_stats(solution: &[EpochState], truth: &[EpochState]) -> Result<ErrorReport, DiagError> {
    let period = truth
        .windows(2)
        .map(|w| w[1].t - w[0].t)
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let tolerance = if period.is_finite() { 0.5 * period } else { 0.5 };
    enu_error_stats_with_tolerance(solution, truth, tolerance)
}

pub fn enu_error_stats_with_tolerance(
    solution: &[EpochState],
    truth: &[EpochState],
    tolerance: f64,
) -> Result<ErrorReport, DiagError> {
    let mut epochs = Vec::with_capacity(solution.len());
    let mut unmatched = 0;
    for s in solution {
        let idx = truth.partition_point(|x| x.t < s.t);
        let nearest = [idx.checked_sub(1), Some(idx)]
            .into_iter()
            .flatten()
            .filter(|&i| i < truth.len())
            .min_by(|&a, &b| (truth[a].t - s.t).abs().total_cmp(&(truth[b].t - s.t).abs()));
        match nearest {
            Some(i) if (truth[i].t - s.t).abs() <= tolerance => {
                let enu = geo::ecef_to_enu(&s.pos, &truth[i].pos)?;
                epochs.push(EpochError { t: s.t, enu, err_2d: enu.horizontal_norm(), err_3d: enu.norm() });
            }
            _ => unmatched += 1,
        }
    }
    if epochs.is_empty() {
        return Err(DiagError::NoOverlap);
    }
    Ok(ErrorReport::from_epochs(epochs, unmatched))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` uniform edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Uniform histogram over `[lo, hi]`; the upper edge belongs to the last bin.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram, DiagError> {
    if values.is_empty() {
        return Err(DiagError::Empty);
    }
    if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(DiagError::Invalid(format!("need bins > 0 and lo < hi, got {bins} bins over [{lo}, {hi}]")));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() {
            return Err(DiagError::NonFinite { index });
        }
        if value < lo || value > hi {
            return Err(DiagError::OutOfRange { index, value, lo, hi });
        }
        let b = (((value - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
    Ok(Histogram { edges, counts })
}

/// Histogram over the data range (a unit-wide range around constant data).
pub fn residual_histogram(values: &[f64], bins: usize) -> Result<Histogram, DiagError> {
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(DiagError::NonFinite { index });
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Err(DiagError::Empty);
    }
    if hi > lo {
        histogram(values, bins, lo, hi)
    } else {
        histogram(values, bins, lo - 0.5, hi + 0.5)
    }
}

pub fn weight_histogram(weights: &[f64], bins: usize) -> Result<Histogram, DiagError> {
    histogram(weights, bins, 0.0, 1.0)
}

/// Weights of each satellite in epoch order, for per-satellite traces.
pub fn weight_traces(weights: &WeightSet) -> BTreeMap<u32, Vec<(usize, f64)>> {
    let mut out: BTreeMap<u32, Vec<(usize, f64)>> = BTreeMap::new();
    for (&(epoch, sat), &w) in weights.keys().iter().zip(weights.values()) {
        out.entry(sat).or_default().push((epoch, w));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    /// Sorted by mean.
    pub components: Vec<GmmComponent>,
    pub log_likelihood: f64,
    /// Total log-likelihood after initialization and after every EM step.
    pub log_likelihood_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn log_normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / variance + variance.ln() + (2.0 * std::f64::consts::PI).ln())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// E-step: responsibilities (row per sample) and total log-likelihood.
fn responsibilities(samples: &[f64], comps: &[GmmComponent], resp: &mut [f64]) -> f64 {
    let k = comps.len();
    let mut scratch = vec![0.0; k];
    let mut total = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        for (j, c) in comps.iter().enumerate() {
            scratch[j] = c.weight.ln() + log_normal_pdf(x, c.mean, c.variance);
        }
        let lse = log_sum_exp(&scratch);
        total += lse;
        for j in 0..k {
            resp[i * k + j] = (scratch[j] - lse).exp();
        }
    }
    total
}

/// One-dimensional Gaussian mixture fit by EM.
///
/// Means are seeded k-means++ style from `seed`, variances start at the
/// sample variance and weights at `1/K`. Iteration stops when the mean
/// per-sample log-likelihood changes by less than [`GMM_TOLERANCE`] or after
/// [`GMM_MAX_ITERATIONS`] steps.
pub fn gmm_fit(samples: &[f64], k: usize, seed: u64) -> Result<GmmFit, DiagError> {
    if k == 0 {
        return Err(DiagError::Invalid("need at least one component".into()));
    }
    if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
        return Err(DiagError::NonFinite { index });
    }
    if samples.len() < k {
        return Err(DiagError::TooFewSamples { needed: k, got: samples.len() });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() == 1 {
        return Err(DiagError::Degenerate { value: sorted[0] });
    }
    if sorted.len() < k {
        return Err(DiagError::TooFewSamples { needed: k, got: sorted.len() });
    }

    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let variance = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).max(GMM_VARIANCE_FLOOR);

    // k-means++ seeding over distinct values
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![sorted[rng.random_range(0..sorted.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = sorted
            .iter()
            .map(|x| centers.iter().map(|c| (x - c).powi(2)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let mut pick = rng.random_range(0.0..total);
        let mut chosen = sorted.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            if pick < *d {
                chosen = i;
                break;
            }
            pick -= d;
        }
        if d2[chosen] == 0.0 {
            chosen = d2.iter().position(|d| *d > 0.0).expect("more distinct values than centers");
        }
        centers.push(sorted[chosen]);
    }
    let mut comps: Vec<GmmComponent> =
        centers.iter().map(|&m| GmmComponent { weight: 1.0 / k as f64, mean: m, variance }).collect();

    let mut resp = vec![0.0; samples.len() * k];
    let mut ll = responsibilities(samples, &comps, &mut resp);
    let mut history = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < GMM_MAX_ITERATIONS {
        iterations += 1;
        for (j, c) in comps.iter_mut().enumerate() {
            let nk: f64 = (0..samples.len()).map(|i| resp[i * k + j]).sum();
            if nk <= f64::MIN_POSITIVE {
                // empty component: keep its parameters, give it no mass
                c.weight = f64::MIN_POSITIVE;
                continue;
            }
            let m = samples.iter().enumerate().map(|(i, x)| resp[i * k + j] * x).sum::<f64>() / nk;
            let v = samples.iter().enumerate().map(|(i, x)| resp[i * k + j] * (x - m).powi(2)).sum::<f64>() / nk;
            *c = GmmComponent { weight: nk / n, mean: m, variance: v.max(GMM_VARIANCE_FLOOR) };
        }
        let norm: f64 = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= norm;
        }
        let next = responsibilities(samples, &comps, &mut resp);
        history.push(next);
        let change = (next - ll).abs() / n;
        ll = next;
        if change < GMM_TOLERANCE {
            converged = true;
            break;
        }
    }
    comps.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    Ok(GmmFit { components: comps, log_likelihood: ll, log_likelihood_history: history, iterations, converged })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScore {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

/// Precision and recall of `predicted` against `actual` outlier flags.
/// Precision is 1 when nothing is predicted, recall is 1 when nothing is
/// actually an outlier.
pub fn detection_score(predicted: &[bool], actual: &[bool]) -> Result<DetectionScore, DiagError> {
    if predicted.len() != actual.len() {
        return Err(DiagError::Length(predicted.len(), actual.len()));
    }
    if predicted.is_empty() {
        return Err(DiagError::Empty);
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fneg) as f64 };
    Ok(DetectionScore { precision, recall, true_positives: tp, false_positives: fp, false_negatives: fneg, true_negatives: tn })
}

/// Outlier prediction `weight < threshold` scored against NLOS/multipath labels.
pub fn outlier_detection_score(weights: &[f64], labels: &[SignalLabel], threshold: f64) -> Result<DetectionScore, DiagError> {
    if labels.is_empty() {
        return Err(DiagError::Empty);
    }
    if labels.iter().any(|l| *l == SignalLabel::Unknown) {
        return Err(DiagError::Invalid("unlabeled measurement".into()));
    }
    let predicted: Vec<bool> = weights.iter().map(|w| *w < threshold).collect();
    let actual: Vec<bool> = labels.iter().map(|l| l.is_outlier()).collect();
    detection_score(&predicted, &actual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::Geodetic;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand_distr::{Distribution, Normal};

    fn track(offset: Enu) -> (Vec<EpochState>, Vec<EpochState>) {
        let origin = geo::geodetic_to_ecef(&Geodetic::from_degrees(22.3, 114.2, 5.0)).unwrap();
        let mut truth = Vec::new();
        let mut sol = Vec::new();
        for k in 0..20 {
            let local = Enu::new(k as f64 * 3.0, 1.0, 0.0);
            let p = geo::enu_to_ecef(&local, &origin).unwrap();
            let q = geo::enu_to_ecef(&offset, &p).unwrap();
            truth.push(EpochState::at(k as f64, p, 0.0));
            sol.push(EpochState::at(k as f64, q, 0.0));
        }
        (sol, truth)
    }

    #[test]
    fn constant_offset_stats() {
        let (sol, truth) = track(Enu::new(3.0, 4.0, 0.0));
        let r = enu_error_stats(&sol, &truth).unwrap();
        assert_relative_eq!(r.horizontal.mean, 5.0, epsilon = 1e-6);
        assert!(r.horizontal.std < 1e-6);
        assert_relative_eq!(r.horizontal.max, 5.0, epsilon = 1e-6);
        assert_eq!(r.unmatched, 0);
        let (sol, truth) = track(Enu::new(0.0, 0.0, 0.0));
        let r = enu_error_stats(&sol, &truth).unwrap();
        assert!(r.spatial.max < 1e-8);
    }

    #[test]
    fn alignment_by_nearest_timestamp() {
        let (mut sol, truth) = track(Enu::new(1.0, 0.0, 0.0));
        for s in &mut sol {
            s.t += 0.3;
        }
        sol[19].t = 40.0;
        let r = enu_error_stats(&sol, &truth).unwrap();
        assert_eq!(r.epochs.len(), 19);
        assert_eq!(r.unmatched, 1);
        for s in &mut sol {
            s.t += 100.0;
        }
        assert_eq!(enu_error_stats(&sol, &truth), Err(DiagError::NoOverlap));
    }

    #[test]
    fn aggregates_recompute_from_table() {
        let (mut sol, truth) = track(Enu::default());
        for (k, s) in sol.iter_mut().enumerate() {
            s.pos += Vector3::new(k as f64 * 0.1, -0.2, 0.05 * k as f64);
        }
        let r = enu_error_stats(&sol, &truth).unwrap();
        let h: Vec<f64> = r.epochs.iter().map(|e| e.err_2d).collect();
        let mean = h.iter().sum::<f64>() / h.len() as f64;
        assert!((mean - r.horizontal.mean).abs() < 1e-12);
        assert!(r.horizontal.max >= r.horizontal.mean && r.horizontal.mean >= 0.0);
    }

    #[test]
    fn improvement_examples() {
        assert_relative_eq!((improvement_pct(9.45, 6.65).unwrap() * 100.0).round() / 100.0, 29.63);
        assert_relative_eq!((improvement_pct(20.32, 14.72).unwrap() * 100.0).round() / 100.0, 27.56);
        assert!(improvement_pct(0.0, 1.0).is_err());
    }

    #[test]
    fn histogram_conserves_and_edges() {
        let h = weight_histogram(&[1.0; 7], DEFAULT_BINS).unwrap();
        assert_eq!(h.counts[19], 7);
        assert_eq!(h.edges.len(), 21);
        assert_eq!(h.edges[20], 1.0);
        let vals: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.618).fract()).collect();
        assert_eq!(weight_histogram(&vals, 13).unwrap().total(), 1000);
        assert!(weight_histogram(&[], 20).is_err());
        assert!(weight_histogram(&[1.5], 20).is_err());
        let r = residual_histogram(&[2.0, 2.0], 4).unwrap();
        assert_eq!(r.total(), 2);
    }

    #[test]
    fn gmm_single_gaussian_matches_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Normal::new(3.0, 2.0).unwrap();
        let x: Vec<f64> = (0..2000).map(|_| d.sample(&mut rng)).collect();
        let fit = gmm_fit(&x, 1, 0).unwrap();
        let mean = x.iter().sum::<f64>() / 2000.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2000.0;
        assert!((fit.components[0].mean - mean).abs() < 1e-6);
        assert!((fit.components[0].variance - var).abs() < 1e-6);
        assert_eq!(fit.components[0].weight, 1.0);
    }

    #[test]
    fn gmm_errors() {
        assert!(matches!(gmm_fit(&[1.0, 2.0], 3, 0), Err(DiagError::TooFewSamples { .. })));
        assert!(matches!(gmm_fit(&[1.0; 10], 3, 0), Err(DiagError::Degenerate { .. })));
        assert!(matches!(gmm_fit(&[1.0, 1.0, 2.0, 2.0], 3, 0), Err(DiagError::TooFewSamples { .. })));
    }

    #[test]
    fn gmm_three_components_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Normal::new(-0.3, 0.8).unwrap();
        let b = Normal::new(-3.8, 2.0).unwrap();
        let c = Normal::new(25.0, 10.0).unwrap();
        let x: Vec<f64> = (0..3000)
            .map(|i| match i % 10 {
                0..=6 => a.sample(&mut rng),
                7 | 8 => b.sample(&mut rng),
                _ => c.sample(&mut rng),
            })
            .collect();
        let fit = gmm_fit(&x, 3, 1).unwrap();
        let s: f64 = fit.components.iter().map(|c| c.weight).sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(fit.components.iter().all(|c| c.variance >= GMM_VARIANCE_FLOOR));
        for w in fit.log_likelihood_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
    }

    #[test]
    fn detection_conventions() {
        let labels = [SignalLabel::Los, SignalLabel::Nlos, SignalLabel::Multipath, SignalLabel::Los];
        let s = outlier_detection_score(&[1.0, 0.1, 0.2, 0.9], &labels, 0.4).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 1.0));
        let s = outlier_detection_score(&[1.0; 4], &labels, 0.4).unwrap();
        assert_eq!(s.recall, 0.0);
        assert_eq!(s.precision, 1.0);
        assert!(outlier_detection_score(&[], &[], 0.4).is_err());
        assert!(outlier_detection_score(&[1.0], &[SignalLabel::Unknown], 0.4).is_err());
    }
}
