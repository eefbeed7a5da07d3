//! Prediction data model.
//!
//! Providers answer in one of three formats: a single top-1 label
//! (`Abstract`), a full ranked label list (`Rank`) or a probability vector
//! (`Measurement`). All three are carried as a length-`c` vector of
//! confidence values indexed by the task's [`LabelSpace`]:
//!
//! | format        | values                                   |
//! |---------------|------------------------------------------|
//! | `Abstract`    | one-hot, `1` at the chosen label         |
//! | `Rank`        | permutation of `1..=c`, `c` = top-ranked |
//! | `Measurement` | non-negative, sums to 1                  |

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::Id;

/// Accepted deviation of an incoming probability vector's sum from 1.
pub const INPUT_SUM_TOLERANCE: f64 = 1e-6;
/// Deviation allowed on vectors already stored.
pub const STORED_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("label {0:?} is not in the label space")]
    UnknownLabel(String),
    #[error("ranked list is not a permutation of the label space")]
    NotAPermutation,
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("vector does not satisfy the {format} invariants: {reason}")]
    InvalidVector { format: Format, reason: String },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("label space needs at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("unknown format {0:?}")]
    UnknownFormat(String),
    #[error("prediction matrix is incomplete or inconsistent: {0}")]
    BadMatrix(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Abstract,
    Rank,
    Measurement,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Abstract, Format::Rank, Format::Measurement];

    pub fn as_str(self) -> &'static str {
        match self {
            Format::Abstract => "abstract",
            Format::Rank => "rank",
            Format::Measurement => "measurement",
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Format {
    type Err = FormatError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "abstract" => Ok(Format::Abstract),
            "rank" => Ok(Format::Rank),
            "measurement" => Ok(Format::Measurement),
            other => Err(FormatError::UnknownFormat(other.to_string())),
        }
    }
}

/// Ordered set of class labels. The order binds vector indices to labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Id>", into = "Vec<Id>")]
pub struct LabelSpace {
    labels: Vec<Id>,
    index: HashMap<Id, usize>,
}

impl LabelSpace {
    pub fn new(labels: Vec<Id>) -> Result<Self, FormatError> {
        if labels.len() < 2 {
            return Err(FormatError::TooFewLabels(labels.len()));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(FormatError::DuplicateLabel(l.to_string()));
            }
        }
        Ok(LabelSpace { labels, index })
    }

    /// `c` labels named `l0`, `l1`, ...
    pub fn numbered(c: usize) -> Result<Self, FormatError> {
        let labels = (0..c)
            .map(|i| Id::new(format!("l{i}")).expect("numbered label"))
            .collect();
        LabelSpace::new(labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Id] {
        &self.labels
    }

    pub fn label(&self, idx: usize) -> &Id {
        &self.labels[idx]
    }

    pub fn index_of(&self, label: &str) -> Result<usize, FormatError> {
        Id::new(label)
            .ok()
            .and_then(|l| self.index.get(&l).copied())
            .ok_or_else(|| FormatError::UnknownLabel(label.to_string()))
    }
}

impl TryFrom<Vec<Id>> for LabelSpace {
    type Error = FormatError;
    fn try_from(v: Vec<Id>) -> Result<Self, Self::Error> {
        LabelSpace::new(v)
    }
}

impl From<LabelSpace> for Vec<Id> {
    fn from(s: LabelSpace) -> Vec<Id> {
        s.labels
    }
}

/// A provider's answer to one query, in canonical vector form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPrediction", into = "RawPrediction")]
pub struct PredictionVector {
    format: Format,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrediction {
    format: Format,
    values: Vec<f64>,
}

impl TryFrom<RawPrediction> for PredictionVector {
    type Error = FormatError;
    fn try_from(r: RawPrediction) -> Result<Self, Self::Error> {
        PredictionVector::new(r.format, r.values)
    }
}

impl From<PredictionVector> for RawPrediction {
    fn from(p: PredictionVector) -> Self {
        RawPrediction {
            format: p.format,
            values: p.values,
        }
    }
}

impl PredictionVector {
    /// Validates `values` against the invariants of `format`.
    pub fn new(format: Format, values: Vec<f64>) -> Result<Self, FormatError> {
        let bad = |reason: &str| FormatError::InvalidVector {
            format,
            reason: reason.to_string(),
        };
        if values.len() < 2 {
            return Err(bad("fewer than 2 entries"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite entry"));
        }
        match format {
            Format::Abstract => {
                let ones = values.iter().filter(|&&v| v == 1.0).count();
                let zeros = values.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != values.len() {
                    return Err(bad("expected exactly one 1 and zeros elsewhere"));
                }
            }
            Format::Rank => {
                if !is_rank_permutation(&values) {
                    return Err(bad("expected a permutation of 1..=c"));
                }
            }
            Format::Measurement => {
                if values.iter().any(|&v| v < 0.0) {
                    return Err(bad("negative entry"));
                }
                let sum: f64 = values.iter().sum();
                if (sum - 1.0).abs() > STORED_SUM_TOLERANCE {
                    return Err(bad("entries do not sum to 1"));
                }
            }
        }
        Ok(PredictionVector { format, values })
    }

    pub fn format(&self) -> Format {
        self.format
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn is_rank_permutation(values: &[f64]) -> bool {
    let c = values.len();
    let mut seen = vec![false; c];
    for &v in values {
        if v.fract() != 0.0 || v < 1.0 || v > c as f64 {
            return false;
        }
        let k = v as usize - 1;
        if seen[k] {
            return false;
        }
        seen[k] = true;
    }
    true
}

pub fn encode_abstract(label: &str, space: &LabelSpace) -> Result<PredictionVector, FormatError> {
    let idx = space.index_of(label)?;
    Ok(one_hot(idx, space.len()))
}

pub(crate) fn one_hot(idx: usize, c: usize) -> PredictionVector {
    let mut values = vec![0.0; c];
    values[idx] = 1.0;
    PredictionVector {
        format: Format::Abstract,
        values,
    }
}

/// Encodes a ranked list (best first). The top label gets `c`, the last gets 1.
pub fn encode_rank<S: AsRef<str>>(
    ranked: &[S],
    space: &LabelSpace,
) -> Result<PredictionVector, FormatError> {
    let c = space.len();
    if ranked.len() != c {
        return Err(FormatError::NotAPermutation);
    }
    let mut values = vec![0.0; c];
    for (pos, label) in ranked.iter().enumerate() {
        let idx = space
            .index_of(label.as_ref())
            .map_err(|_| FormatError::NotAPermutation)?;
        if values[idx] != 0.0 {
            return Err(FormatError::NotAPermutation);
        }
        values[idx] = (c - pos) as f64;
    }
    Ok(PredictionVector {
        format: Format::Rank,
        values,
    })
}

/// Encodes a rank vector from label indices ordered best first.
pub(crate) fn rank_from_order(order: &[usize]) -> PredictionVector {
    let c = order.len();
    let mut values = vec![0.0; c];
    for (pos, &idx) in order.iter().enumerate() {
        values[idx] = (c - pos) as f64;
    }
    PredictionVector {
        format: Format::Rank,
        values,
    }
}

pub fn encode_measurement(
    probs: &[f64],
    space: &LabelSpace,
) -> Result<PredictionVector, FormatError> {
    if probs.len() != space.len() {
        return Err(FormatError::LengthMismatch {
            expected: space.len(),
            got: probs.len(),
        });
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(FormatError::InvalidDistribution(
            "negative or non-finite entry".into(),
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > INPUT_SUM_TOLERANCE {
        return Err(FormatError::InvalidDistribution(format!(
            "entries sum to {sum}"
        )));
    }
    let values = if (sum - 1.0).abs() > STORED_SUM_TOLERANCE {
        probs.iter().map(|p| p / sum).collect()
    } else {
        probs.to_vec()
    };
    Ok(PredictionVector {
        format: Format::Measurement,
        values,
    })
}

/// Probability vector view of any prediction. Rank values are divided by
/// `c(c+1)/2`.
pub fn to_distribution(p: &PredictionVector) -> Vec<f64> {
    match p.format {
        Format::Abstract | Format::Measurement => p.values.clone(),
        Format::Rank => {
            let c = p.values.len() as f64;
            let total = c * (c + 1.0) / 2.0;
            p.values.iter().map(|v| v / total).collect()
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn decode_top1<'a>(p: &PredictionVector, space: &'a LabelSpace) -> &'a Id {
    space.label(argmax(&p.values))
}

/// Label indices sorted by descending confidence, ties by ascending index.
pub fn ranked_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Complete `m x n` grid of predictions sharing one format and label space.
/// Providers that aborted are not part of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    providers: Vec<Id>,
    queries: Vec<Id>,
    format: Format,
    space: LabelSpace,
    rows: Vec<Vec<PredictionVector>>,
}

impl PredictionMatrix {
    pub fn new(
        providers: Vec<Id>,
        queries: Vec<Id>,
        format: Format,
        space: LabelSpace,
        rows: Vec<Vec<PredictionVector>>,
    ) -> Result<Self, FormatError> {
        if rows.len() != providers.len() {
            return Err(FormatError::BadMatrix(format!(
                "{} providers but {} rows",
                providers.len(),
                rows.len()
            )));
        }
        for (p, row) in providers.iter().zip(&rows) {
            if row.len() != queries.len() {
                return Err(FormatError::BadMatrix(format!(
                    "provider {p} answered {} of {} queries",
                    row.len(),
                    queries.len()
                )));
            }
            for v in row {
                if v.format != format {
                    return Err(FormatError::BadMatrix(format!(
                        "provider {p} sent {} instead of {format}",
                        v.format
                    )));
                }
                if v.len() != space.len() {
                    return Err(FormatError::LengthMismatch {
                        expected: space.len(),
                        got: v.len(),
                    });
                }
            }
        }
        Ok(PredictionMatrix {
            providers,
            queries,
            format,
            space,
            rows,
        })
    }

    pub fn providers(&self) -> &[Id] {
        &self.providers
    }

    pub fn queries(&self) -> &[Id] {
        &self.queries
    }

    pub fn format(&self) -> Format {
        self.format
    }

    pub fn space(&self) -> &LabelSpace {
        &self.space
    }

    pub fn num_providers(&self) -> usize {
        self.providers.len()
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn row(&self, provider: usize) -> &[PredictionVector] {
        &self.rows[provider]
    }

    pub fn get(&self, provider: usize, query: usize) -> &PredictionVector {
        &self.rows[provider][query]
    }

    pub fn values(&self, provider: usize, query: usize) -> &[f64] {
        &self.rows[provider][query].values
    }
}
