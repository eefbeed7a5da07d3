//! Fixtures shared by the benchmarks.

use predpool_core::experiment::query_ids;
use predpool_core::incentive::{MechanismParams, Strategy, DEFAULT_KL_FLOOR, DEFAULT_THETA};
use predpool_core::providers_sim::{build_population, draw_base_accuracies, generate_ground_truth, provider_predictions, Case, DEFAULT_CONCENTRATION};
use predpool_core::{Format, Id, LabelSpace, PredictionMatrix};

/// Prediction matrix of `m` case A providers over `n` queries.
pub fn matrix(m: usize, n: usize, c: usize, format: Format, seed: u64) -> PredictionMatrix {
    let truth = generate_ground_truth(n, c, DEFAULT_CONCENTRATION, seed);
    let acc = draw_base_accuracies(m, 0.55, 0.85, seed);
    let profiles = build_population(m, Case::A, &acc, seed).expect("m >= 3");
    let rows = profiles
        .iter()
        .map(|p| provider_predictions(p, &truth, c, format, DEFAULT_CONCENTRATION).expect("truthful"))
        .collect();
    let ids: Vec<Id> = profiles.iter().map(|p| p.id.clone()).collect();
    PredictionMatrix::new(ids, query_ids(n), format, LabelSpace::numbered(c).expect("c >= 2"), rows).expect("complete matrix")
}

pub fn strategies(matrix: &PredictionMatrix) -> Vec<Vec<Strategy>> {
    (0..matrix.num_providers())
        .map(|i| matrix.row(i).iter().map(Strategy::from_prediction).collect())
        .collect()
}

pub fn params(m: usize, n: usize) -> MechanismParams {
    MechanismParams {
        theta: DEFAULT_THETA,
        alpha: vec![0.5; m],
        c1: 1.0,
        c2: 1.0,
        d0: 0.01,
        budget: 100_000.0,
        n_queries: n,
        m_providers: m,
        kl_floor: DEFAULT_KL_FLOOR,
    }
}
