//! Iterative truth discovery over a prediction matrix.
//!
//! Each round first aggregates every query as the weighted mean of the
//! provider vectors, then re-weights providers by
//! `w_i = -ln(L_i / sum_k L_k)` where `L_i` is provider `i`'s total
//! normalized squared loss against the current aggregates. Providers that
//! sit closer to the consensus end up with larger weights. The loop runs a
//! fixed number of rounds starting from unit weights.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::PredictionMatrix;

/// Minimum number of providers the aggregation is defined for.
pub const MIN_PROVIDERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TdError {
    #[error("truth discovery needs at least {MIN_PROVIDERS} providers, got {0}")]
    TooFewProviders(usize),
    #[error("all provider weights are zero")]
    DegenerateWeights,
    #[error("weights must be finite and non-negative")]
    InvalidWeights,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid truth discovery config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdConfig {
    /// Number of aggregate/re-weight rounds.
    pub iterations: usize,
    /// Lower clamp applied to per-provider losses before taking the log.
    pub loss_floor: f64,
}

impl Default for TdConfig {
    fn default() -> Self {
        TdConfig {
            iterations: 10,
            loss_floor: 1e-12,
        }
    }
}

impl TdConfig {
    pub fn validate(&self) -> Result<(), TdError> {
        if self.iterations < 1 {
            return Err(TdError::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.loss_floor > 0.0 && self.loss_floor.is_finite()) {
            return Err(TdError::InvalidConfig("loss_floor must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEstimate {
    /// One aggregated confidence vector per query.
    pub truths: Vec<Vec<f64>>,
    /// One weight per provider, in matrix order.
    pub weights: Vec<f64>,
    pub iterations_run: usize,
}

/// Weighted mean of the provider vectors for every query.
pub fn aggregate_step(matrix: &PredictionMatrix, weights: &[f64]) -> Result<Vec<Vec<f64>>, TdError> {
    let m = matrix.num_providers();
    if m < MIN_PROVIDERS {
        return Err(TdError::TooFewProviders(m));
    }
    if weights.len() != m {
        return Err(TdError::LengthMismatch(weights.len(), m));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(TdError::InvalidWeights);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(TdError::DegenerateWeights);
    }
    let c = matrix.space().len();
    let truths = (0..matrix.num_queries())
        .map(|j| {
            let mut acc = vec![0.0; c];
            for (i, &w) in weights.iter().enumerate() {
                for (a, v) in acc.iter_mut().zip(matrix.values(i, j)) {
                    *a += w * v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= total);
            acc
        })
        .collect();
    Ok(truths)
}

/// `(1/c) * sum_k (truth_k - pred_k)^2`.
pub fn normalized_squared_loss(truth: &[f64], pred: &[f64]) -> Result<f64, TdError> {
    if truth.len() != pred.len() {
        return Err(TdError::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok(sq / truth.len() as f64)
}

/// Maps per-provider total losses to weights.
///
/// Returns `previous` unchanged when every loss is at or below the floor,
/// i.e. all providers already agree with the aggregate.
pub fn weights_from_losses(losses: &[f64], previous: &[f64], loss_floor: f64) -> Vec<f64> {
    if losses.iter().all(|&l| l <= loss_floor) {
        return previous.to_vec();
    }
    let clamped: Vec<f64> = losses.iter().map(|&l| l.max(loss_floor)).collect();
    let total: f64 = clamped.iter().sum();
    clamped.iter().map(|l| -(l / total).ln()).collect()
}

pub fn update_weights(
    matrix: &PredictionMatrix,
    truths: &[Vec<f64>],
    previous: &[f64],
    cfg: &TdConfig,
) -> Result<Vec<f64>, TdError> {
    if truths.len() != matrix.num_queries() {
        return Err(TdError::LengthMismatch(truths.len(), matrix.num_queries()));
    }
    let losses = (0..matrix.num_providers())
        .map(|i| {
            truths
                .iter()
                .enumerate()
                .map(|(j, t)| normalized_squared_loss(t, matrix.values(i, j)))
                .sum::<Result<f64, _>>()
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(weights_from_losses(&losses, previous, cfg.loss_floor))
}

pub fn run_truth_discovery(matrix: &PredictionMatrix, cfg: &TdConfig) -> Result<TruthEstimate, TdError> {
    cfg.validate()?;
    let m = matrix.num_providers();
    if m < MIN_PROVIDERS {
        return Err(TdError::TooFewProviders(m));
    }
    let mut weights = vec![1.0; m];
    let mut truths = Vec::new();
    for _ in 0..cfg.iterations {
        truths = aggregate_step(matrix, &weights)?;
        weights = update_weights(matrix, &truths, &weights, cfg)?;
    }
    Ok(TruthEstimate {
        truths,
        weights,
        iterations_run: cfg.iterations,
    })
}

/// Equal-weight mean of the provider vectors, the baseline TD is compared to.
pub fn average_predictions(matrix: &PredictionMatrix) -> Vec<Vec<f64>> {
    let m = matrix.num_providers().max(1) as f64;
    let c = matrix.space().len();
    (0..matrix.num_queries())
        .map(|j| {
            let mut acc = vec![0.0; c];
            for i in 0..matrix.num_providers() {
                for (a, v) in acc.iter_mut().zip(matrix.values(i, j)) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= m);
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{argmax, encode_measurement, Format, LabelSpace, PredictionVector};
    use crate::id::id;
    use proptest::prelude::*;

    fn matrix(format: Format, rows: &[&[&[f64]]]) -> PredictionMatrix {
        let c = rows[0][0].len();
        let space = LabelSpace::numbered(c).unwrap();
        let providers = (0..rows.len()).map(|i| id(&format!("p{i}"))).collect();
        let queries = (0..rows[0].len()).map(|j| id(&format!("q{j}"))).collect();
        let grid = rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|v| PredictionVector::new(format, v.to_vec()).unwrap())
                    .collect()
            })
            .collect();
        PredictionMatrix::new(providers, queries, format, space, grid).unwrap()
    }

    /// Straight-line rerun of the two update equations, no shared helpers.
    fn reference(rows: &[Vec<Vec<f64>>], iters: usize, floor: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let m = rows.len();
        let n = rows[0].len();
        let c = rows[0][0].len();
        let mut w = vec![1.0; m];
        let mut out = vec![vec![0.0; c]; n];
        for _ in 0..iters {
            let ws: f64 = w.iter().sum();
            for j in 0..n {
                for k in 0..c {
                    let mut s = 0.0;
                    for i in 0..m {
                        s += w[i] * rows[i][j][k];
                    }
                    out[j][k] = s / ws;
                }
            }
            let mut loss = vec![0.0; m];
            for i in 0..m {
                for j in 0..n {
                    let mut d = 0.0;
                    for k in 0..c {
                        d += (out[j][k] - rows[i][j][k]).powi(2);
                    }
                    loss[i] += d / c as f64;
                }
            }
            if loss.iter().all(|&l| l <= floor) {
                continue;
            }
            let cl: Vec<f64> = loss.iter().map(|l| l.max(floor)).collect();
            let tot: f64 = cl.iter().sum();
            for i in 0..m {
                w[i] = -(cl[i] / tot).ln();
            }
        }
        (out, w)
    }

    const THREE_MEASUREMENTS: [&[f64]; 3] = [
        &[0.02, 0.49, 0.01, 0.48],
        &[0.92, 0.02, 0.01, 0.05],
        &[0.93, 0.02, 0.03, 0.02],
    ];
    const THREE_RANKINGS: [&[f64]; 3] = [&[2.0, 4.0, 1.0, 3.0], &[4.0, 2.0, 1.0, 3.0], &[4.0, 2.0, 3.0, 1.0]];

    #[test]
    fn aggregate_identical_vectors() {
        let m = matrix(Format::Measurement, &[&[&[0.2, 0.8]], &[&[0.2, 0.8]], &[&[0.2, 0.8]]]);
        let t = aggregate_step(&m, &[1.0, 1.0, 1.0]).unwrap();
        assert!((t[0][0] - 0.2).abs() < 1e-15 && (t[0][1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn aggregate_three_measurement_rows() {
        let rows: Vec<&[&[f64]]> = THREE_MEASUREMENTS.iter().map(std::slice::from_ref).collect();
        let m = matrix(Format::Measurement, &rows);
        let t = aggregate_step(&m, &[1.0, 1.0, 1.0]).unwrap();
        // per-entry means: 1.87/3, 0.53/3, 0.05/3, 0.55/3
        let want = [1.87 / 3.0, 0.53 / 3.0, 0.05 / 3.0, 0.55 / 3.0];
        for (g, w) in t[0].iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        assert!((t[0][0] - 0.623).abs() < 5e-4);
        assert!((t[0][1] - 0.177).abs() < 5e-4);
        assert!((t[0][2] - 0.017).abs() < 5e-4);
        assert!((t[0][3] - 0.183).abs() < 5e-4);
    }

    #[test]
    fn aggregate_rejects_two_providers_and_zero_weights() {
        let two = matrix(Format::Measurement, &[&[&[0.5, 0.5]], &[&[0.5, 0.5]]]);
        assert_eq!(aggregate_step(&two, &[1.0, 1.0]), Err(TdError::TooFewProviders(2)));
        let three = matrix(Format::Measurement, &[&[&[0.5, 0.5]], &[&[0.5, 0.5]], &[&[1.0, 0.0]]]);
        assert_eq!(aggregate_step(&three, &[0.0; 3]), Err(TdError::DegenerateWeights));
        assert_eq!(aggregate_step(&three, &[1.0, -1.0, 1.0]), Err(TdError::InvalidWeights));
    }

    #[test]
    fn loss_examples() {
        assert_eq!(normalized_squared_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(normalized_squared_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(
            normalized_squared_loss(&[0.0; 3], &[0.0; 4]),
            Err(TdError::LengthMismatch(3, 4))
        );
    }

    #[test]
    fn weights_from_loss_ratios() {
        let w = weights_from_losses(&[1.0, 1.0, 2.0], &[1.0; 3], 1e-12);
        assert!((w[0] - 4f64.ln()).abs() < 1e-12);
        assert!((w[1] - 4f64.ln()).abs() < 1e-12);
        assert!((w[2] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weights_skip_when_everyone_at_truth() {
        let prev = [0.3, 0.5, 0.7];
        assert_eq!(weights_from_losses(&[0.0, 0.0, 0.0], &prev, 1e-12), prev.to_vec());
    }

    #[test]
    fn weights_clamp_zero_loss() {
        let w = weights_from_losses(&[0.0, 1.0, 1.0], &[1.0; 3], 1e-12);
        let want = -(1e-12f64 / (2.0 + 1e-12)).ln();
        assert!(w[0].is_finite());
        assert!((w[0] - want).abs() < 1e-9);
        assert!((w[0] - (-(1e-12f64 / 2.0).ln())).abs() < 1e-9);
    }

    #[test]
    fn three_measurements_converge_to_distressed() {
        let rows: Vec<&[&[f64]]> = THREE_MEASUREMENTS.iter().map(std::slice::from_ref).collect();
        let m = matrix(Format::Measurement, &rows);
        let est = run_truth_discovery(&m, &TdConfig::default()).unwrap();
        let raw: Vec<Vec<Vec<f64>>> = THREE_MEASUREMENTS.iter().map(|r| vec![r.to_vec()]).collect();
        let (want, ww) = reference(&raw, 10, 1e-12);
        for (g, w) in est.truths[0].iter().zip(&want[0]) {
            assert!((g - w).abs() < 1e-12);
        }
        for (g, w) in est.weights.iter().zip(&ww) {
            assert!((g - w).abs() < 1e-9);
        }
        assert_eq!(argmax(&est.truths[0]), 0);
        assert!(est.weights[1] > est.weights[0] && est.weights[2] > est.weights[0]);
        assert_eq!(est.iterations_run, 10);
    }

    #[test]
    fn three_rankings_converge_to_distressed() {
        let rows: Vec<&[&[f64]]> = THREE_RANKINGS.iter().map(std::slice::from_ref).collect();
        let m = matrix(Format::Rank, &rows);
        let est = run_truth_discovery(&m, &TdConfig::default()).unwrap();
        let raw: Vec<Vec<Vec<f64>>> = THREE_RANKINGS.iter().map(|r| vec![r.to_vec()]).collect();
        let (want, _) = reference(&raw, 10, 1e-12);
        for (g, w) in est.truths[0].iter().zip(&want[0]) {
            assert!((g - w).abs() < 1e-12);
        }
        assert_eq!(argmax(&est.truths[0]), 0);
    }

    #[test]
    fn identical_providers_are_a_fixed_point() {
        let v: &[f64] = &[0.1, 0.6, 0.3];
        let m = matrix(Format::Measurement, &[&[v, v], &[v, v], &[v, v]]);
        let est = run_truth_discovery(&m, &TdConfig::default()).unwrap();
        for t in &est.truths {
            for (a, b) in t.iter().zip(v) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert!(est.weights.iter().all(|&w| w == est.weights[0]));
    }

    fn arb_dist(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, c).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    fn arb_grid() -> impl Strategy<Value = Vec<Vec<Vec<f64>>>> {
        (3usize..6, 1usize..5, 2usize..6).prop_flat_map(|(m, n, c)| {
            prop::collection::vec(prop::collection::vec(arb_dist(c), n), m)
        })
    }

    fn grid_matrix(rows: &[Vec<Vec<f64>>]) -> PredictionMatrix {
        let c = rows[0][0].len();
        let space = LabelSpace::numbered(c).unwrap();
        let grid = rows
            .iter()
            .map(|r| r.iter().map(|v| encode_measurement(v, &space).unwrap()).collect())
            .collect();
        PredictionMatrix::new(
            (0..rows.len()).map(|i| id(&format!("p{i}"))).collect(),
            (0..rows[0].len()).map(|j| id(&format!("q{j}"))).collect(),
            Format::Measurement,
            space,
            grid,
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn truths_stay_inside_provider_envelope(rows in arb_grid()) {
            let m = grid_matrix(&rows);
            let est = run_truth_discovery(&m, &TdConfig::default()).unwrap();
            for (j, t) in est.truths.iter().enumerate() {
                for (k, x) in t.iter().enumerate() {
                    let lo = (0..rows.len()).map(|i| m.values(i, j)[k]).fold(f64::INFINITY, f64::min);
                    let hi = (0..rows.len()).map(|i| m.values(i, j)[k]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
                }
            }
            prop_assert!(est.weights.iter().all(|w| w.is_finite() && *w >= 0.0));
        }

        #[test]
        fn deterministic(rows in arb_grid()) {
            let m = grid_matrix(&rows);
            let a = run_truth_discovery(&m, &TdConfig::default()).unwrap();
            let b = run_truth_discovery(&m, &TdConfig::default()).unwrap();
            prop_assert_eq!(
                a.truths.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.truths.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(
                a.weights.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.weights.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn closer_provider_gets_larger_weight(rows in arb_grid()) {
            let m = grid_matrix(&rows);
            let cfg = TdConfig::default();
            let est = run_truth_discovery(&m, &cfg).unwrap();
            // the last update used the returned truths
            let per_query: Vec<Vec<f64>> = (0..m.num_providers())
                .map(|i| (0..m.num_queries())
                    .map(|j| normalized_squared_loss(&est.truths[j], m.values(i, j)).unwrap())
                    .collect())
                .collect();
            for a in 0..m.num_providers() {
                for b in 0..m.num_providers() {
                    if per_query[a].iter().zip(&per_query[b]).all(|(x, y)| x < y) {
                        prop_assert!(est.weights[a] >= est.weights[b]);
                    }
                }
            }
        }

        #[test]
        fn matches_reference_3x2(rows in prop::collection::vec(prop::collection::vec(arb_dist(3), 2), 3)) {
            let m = grid_matrix(&rows);
            let est = run_truth_discovery(&m, &TdConfig::default()).unwrap();
            let (want, _) = reference(&rows, 10, 1e-12);
            for (g, w) in est.truths.iter().flatten().zip(want.iter().flatten()) {
                prop_assert!((g - w).abs() <= 1e-9);
            }
        }
    }
}
