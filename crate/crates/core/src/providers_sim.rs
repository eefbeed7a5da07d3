//! Synthetic provider populations.
//!
//! A truthful provider with base accuracy `a` puts `concentration` of its
//! mass on the true label with probability `a`, and on a uniformly chosen
//! wrong label otherwise; the remaining mass is spread evenly. Perturbed
//! providers replace every prediction with noise.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::formats::{argmax, one_hot, rank_from_order, ranked_order, Format, PredictionVector};
use crate::id::Id;
use crate::seeding::{derive_seed, keyed_rng, stream};
use crate::truth_discovery::MIN_PROVIDERS;

pub const DEFAULT_CONCENTRATION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("need at least {MIN_PROVIDERS} providers, got {0}")]
    TooFewProviders(usize),
    #[error("expected {expected} base accuracies, got {got}")]
    AccuracyCount { expected: usize, got: usize },
    #[error("base accuracy {0} outside [0, 1]")]
    BadAccuracy(f64),
    #[error("concentration {0} outside (0, 1]")]
    BadConcentration(f64),
    #[error("unknown case {0:?}, expected A, B or C")]
    UnknownCase(String),
}

/// Perturbation scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Case {
    /// Nobody perturbed.
    A,
    /// `floor(m/2)` providers perturbed.
    B,
    /// `floor(m/2) + 1` providers perturbed.
    C,
}

impl Case {
    pub const ALL: [Case; 3] = [Case::A, Case::B, Case::C];

    pub fn perturbed_count(self, m: usize) -> usize {
        match self {
            Case::A => 0,
            Case::B => m / 2,
            Case::C => m / 2 + 1,
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Case::A => "A",
            Case::B => "B",
            Case::C => "C",
        })
    }
}

impl FromStr for Case {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Case::A),
            "B" | "b" => Ok(Case::B),
            "C" | "c" => Ok(Case::C),
            other => Err(SimError::UnknownCase(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Behavior {
    Truthful { base_accuracy: f64 },
    Perturbed,
    Aborting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderProfile {
    pub id: Id,
    pub behavior: Behavior,
    pub seed: u64,
}

/// Simulation-only oracle: the true label and posterior of every query.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub labels: Vec<usize>,
    pub distributions: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `concentration` on `intended`, the rest spread evenly.
pub fn sharpened(intended: usize, c: usize, concentration: f64) -> Vec<f64> {
    let rest = (1.0 - concentration) / (c - 1) as f64;
    let mut v = vec![rest; c];
    v[intended] = concentration;
    v
}

pub fn generate_ground_truth(n: usize, c: usize, concentration: f64, seed: u64) -> GroundTruth {
    let mut rng = keyed_rng(&[seed, stream::GROUND_TRUTH]);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let distributions = labels.iter().map(|&l| sharpened(l, c, concentration)).collect();
    GroundTruth {
        labels,
        distributions,
    }
}

fn format_distribution(dist: &[f64], format: Format) -> PredictionVector {
    match format {
        Format::Measurement => PredictionVector::new(Format::Measurement, dist.to_vec())
            .expect("sharpened distribution is valid"),
        Format::Rank => rank_from_order(&ranked_order(dist)),
        Format::Abstract => one_hot(argmax(dist), dist.len()),
    }
}

/// Like [`format_distribution`], but labels with equal probability are
/// ranked in random order instead of by index.
fn format_with_random_ties(dist: &[f64], format: Format, rng: &mut ChaCha8Rng) -> PredictionVector {
    if format != Format::Rank {
        return format_distribution(dist, format);
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.shuffle(rng);
    // stable sort keeps the shuffled order within ties
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]));
    rank_from_order(&order)
}

pub fn synth_truthful_prediction(
    true_label: usize,
    c: usize,
    base_accuracy: f64,
    concentration: f64,
    format: Format,
    rng: &mut ChaCha8Rng,
) -> PredictionVector {
    let correct = rng.random::<f64>() < base_accuracy;
    let intended = if correct {
        true_label
    } else {
        let k = rng.random_range(0..c - 1);
        if k >= true_label {
            k + 1
        } else {
            k
        }
    };
    format_with_random_ties(&sharpened(intended, c, concentration), format, rng)
}

/// Replaces `p` with noise of the same format.
pub fn perturb_prediction(p: &PredictionVector, rng: &mut ChaCha8Rng) -> PredictionVector {
    let c = p.len();
    match p.format() {
        Format::Measurement => {
            let draws: Vec<f64> = (0..c).map(|_| rng.random_range(f64::MIN_POSITIVE..1.0)).collect();
            let sum: f64 = draws.iter().sum();
            let mut values: Vec<f64> = draws.iter().map(|d| d / sum).collect();
            // push the rounding residue into the largest entry
            let residue = 1.0 - values.iter().sum::<f64>();
            let top = argmax(&values);
            values[top] += residue;
            PredictionVector::new(Format::Measurement, values).expect("normalized noise")
        }
        Format::Rank => {
            let mut order: Vec<usize> = (0..c).collect();
            order.shuffle(rng);
            rank_from_order(&order)
        }
        Format::Abstract => one_hot(rng.random_range(0..c), c),
    }
}

pub fn provider_id(i: usize, m: usize) -> Id {
    let width = m.saturating_sub(1).to_string().len();
    Id::new(format!("p{i:0width$}")).expect("provider id")
}

/// Providers `p0..p{m-1}`; the lowest ids are the perturbed ones.
pub fn build_population(
    m: usize,
    case: Case,
    base_accuracies: &[f64],
    seed: u64,
) -> Result<Vec<ProviderProfile>, SimError> {
    if m < MIN_PROVIDERS {
        return Err(SimError::TooFewProviders(m));
    }
    if base_accuracies.len() != m {
        return Err(SimError::AccuracyCount {
            expected: m,
            got: base_accuracies.len(),
        });
    }
    if let Some(&a) = base_accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(SimError::BadAccuracy(a));
    }
    let perturbed = case.perturbed_count(m);
    Ok((0..m)
        .map(|i| ProviderProfile {
            id: provider_id(i, m),
            behavior: if i < perturbed {
                Behavior::Perturbed
            } else {
                Behavior::Truthful {
                    base_accuracy: base_accuracies[i],
                }
            },
            seed: derive_seed(&[seed, stream::POPULATION, i as u64]),
        })
        .collect())
}

/// Marks the `count` highest-id truthful providers as aborting.
pub fn with_aborting(mut profiles: Vec<ProviderProfile>, count: usize) -> Vec<ProviderProfile> {
    profiles
        .iter_mut()
        .rev()
        .filter(|p| matches!(p.behavior, Behavior::Truthful { .. }))
        .take(count)
        .for_each(|p| p.behavior = Behavior::Aborting);
    profiles
}

pub fn draw_base_accuracies(m: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = keyed_rng(&[seed, stream::POPULATION, u64::MAX]);
    (0..m)
        .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
        .collect()
}

/// The predictions one provider would send for every query; `None` for
/// aborting providers.
pub fn provider_predictions(
    profile: &ProviderProfile,
    truth: &GroundTruth,
    c: usize,
    format: Format,
    concentration: f64,
) -> Option<Vec<PredictionVector>> {
    let draw = |j: usize, tag: u64| keyed_rng(&[profile.seed, tag, format as u64, j as u64]);
    match profile.behavior {
        Behavior::Aborting => None,
        Behavior::Truthful { base_accuracy } => Some(
            truth
                .labels
                .iter()
                .enumerate()
                .map(|(j, &l)| {
                    synth_truthful_prediction(l, c, base_accuracy, concentration, format, &mut draw(j, stream::PREDICTION))
                })
                .collect(),
        ),
        Behavior::Perturbed => Some(
            truth
                .distributions
                .iter()
                .enumerate()
                .map(|(j, d)| {
                    perturb_prediction(&format_distribution(d, format), &mut draw(j, stream::PERTURBATION))
                })
                .collect(),
        ),
    }
}
