//! Aggregator task sessions.
//!
//! A session collects one authenticated submission per expected provider
//! until every provider has answered or the logical deadline passes, then
//! scores, aggregates and seals the result in a single step. Individual
//! submissions never leave the session except through its transcript.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::crypto::{auth_tag, open, seal, sha256_hex, verify_tag};
use crate::formats::{FormatError, LabelSpace, PredictionMatrix, PredictionVector};
use crate::formats::Format;
use crate::id::Id;
use crate::incentive::{score_task, IncentiveError, MechanismParams, ScoreReport, Strategy};
use crate::ledger::{Ledger, Phase, Settlement};
use crate::truth_discovery::{run_truth_discovery, TdConfig, TdError, MIN_PROVIDERS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: Id,
    pub queries: Vec<Id>,
    pub space: LabelSpace,
    pub format: Format,
    pub params: MechanismParams,
    pub td: TdConfig,
    /// Logical tick at which collection closes.
    pub deadline: u64,
    /// Seed of the peer draws.
    pub peer_seed: u64,
}

impl TaskSpec {
    /// Hash the ledger request binds to.
    pub fn metadata_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionState {
    Collecting,
    Aggregating,
    Done,
    Failed,
}

/// A provider's signed answer to every query of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub task_id: Id,
    pub provider_id: Id,
    pub nonce: String,
    pub predictions: Vec<PredictionVector>,
    pub auth_tag: String,
}

impl Submission {
    /// Quantizes the predictions to the canonical grid and tags them.
    pub fn signed(task_id: &Id, provider_id: &Id, nonce: &str, predictions: &[PredictionVector], key: &[u8]) -> Self {
        let predictions: Vec<PredictionVector> = predictions.iter().map(canonical::quantize).collect();
        let tag = auth_tag(
            key,
            &canonical::submission(task_id.as_str(), provider_id.as_str(), nonce, &predictions),
        );
        Submission {
            task_id: task_id.clone(),
            provider_id: provider_id.clone(),
            nonce: nonce.to_string(),
            predictions,
            auth_tag: tag,
        }
    }

    pub fn signed_bytes(&self) -> String {
        canonical::submission(
            self.task_id.as_str(),
            self.provider_id.as_str(),
            &self.nonce,
            &self.predictions,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubmitError {
    #[error("collection is closed")]
    Closed,
    #[error("provider {0} is not expected for this task")]
    UnknownProvider(Id),
    #[error("authenticity tag does not verify")]
    BadAuthTag,
    #[error("provider {0} already submitted")]
    Duplicate(Id),
    #[error("invalid predictions: {0}")]
    InvalidPredictions(String),
}

impl SubmitError {
    /// Reason string used on the wire.
    pub fn reason(&self) -> &'static str {
        match self {
            SubmitError::Closed => "closed",
            SubmitError::UnknownProvider(_) => "unknown_provider",
            SubmitError::BadAuthTag => "bad_auth_tag",
            SubmitError::Duplicate(_) => "duplicate",
            SubmitError::InvalidPredictions(_) => "invalid_predictions",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServingError {
    #[error("need at least {MIN_PROVIDERS} providers, got {0}")]
    TooFewProviders(usize),
    #[error("ledger phase is {0:?}, expected Requested")]
    LedgerNotReady(Phase),
    #[error("ledger request does not match this task spec")]
    MetadataMismatch,
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("provider {0} is not expected for this task")]
    UnknownProvider(Id),
    #[error("collection is closed")]
    Closed,
    #[error("collection still open: deadline not reached and submissions missing")]
    NotReady,
    #[error("only {0} providers submitted, need {MIN_PROVIDERS}")]
    TooFewSubmitters(usize),
    #[error(transparent)]
    Scoring(#[from] IncentiveError),
    #[error(transparent)]
    Aggregation(#[from] TdError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SealedResult {
    pub task_id: Id,
    /// Aggregated predictions encrypted to the user's token.
    pub envelope: Vec<u8>,
    /// SHA-256 of the canonical aggregated predictions.
    pub digest: String,
    pub scores: Vec<ScoreReport>,
    /// Aggregator tag over `(task, digest, scores)`.
    pub tag: String,
}

impl SealedResult {
    pub fn settlement(&self) -> Settlement {
        Settlement {
            reports: self.scores.clone(),
            digest: self.digest.clone(),
            tag: self.tag.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finalized {
    pub result: SealedResult,
    pub aborted: Vec<Id>,
    pub submitters: Vec<Id>,
    /// Final truth-discovery weight per submitter.
    pub weights: Vec<f64>,
}

/// Audit record of everything a session accepted and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TranscriptEntry {
    Open {
        spec: TaskSpec,
        providers: Vec<Id>,
    },
    Submission {
        task_id: Id,
        provider_id: Id,
        tick: u64,
        predictions: Vec<PredictionVector>,
    },
    Finalize {
        task_id: Id,
        digest: String,
        aborted: Vec<Id>,
        scores: String,
        tag: String,
    },
    Failed {
        task_id: Id,
        submitters: Vec<Id>,
    },
    Close,
}

impl crate::journal::Closing for TranscriptEntry {
    fn is_close(&self) -> bool {
        matches!(self, TranscriptEntry::Close)
    }
}

#[derive(Debug, Clone)]
pub struct TaskSession {
    spec: TaskSpec,
    expected: Vec<Id>,
    keys: BTreeMap<Id, Vec<u8>>,
    aggregator_key: Vec<u8>,
    user_token: String,
    nonces: BTreeMap<Id, String>,
    challenges_issued: u64,
    received: BTreeMap<Id, Vec<PredictionVector>>,
    tick: u64,
    state: SessionState,
    transcript: Vec<TranscriptEntry>,
}

fn validate_spec(spec: &TaskSpec, m: usize) -> Result<(), ServingError> {
    let bad = |s: String| Err(ServingError::InvalidSpec(s));
    spec.params.validate()?;
    spec.td.validate()?;
    if spec.queries.is_empty() {
        return bad("no queries".into());
    }
    let mut qs = spec.queries.clone();
    qs.sort();
    qs.dedup();
    if qs.len() != spec.queries.len() {
        return bad("duplicate query ids".into());
    }
    if spec.params.n_queries != spec.queries.len() {
        return bad(format!("params.n_queries {} but {} queries", spec.params.n_queries, spec.queries.len()));
    }
    if spec.params.m_providers != m {
        return bad(format!("params.m_providers {} but {m} providers", spec.params.m_providers));
    }
    Ok(())
}

/// Opens a session for `providers`, each with its channel key. The ledger
/// must already hold the escrow in phase Requested for this exact spec.
pub fn open_task(
    spec: TaskSpec,
    providers: Vec<(Id, Vec<u8>)>,
    aggregator_key: &[u8],
    user_token: &str,
    ledger: &Ledger,
) -> Result<TaskSession, ServingError> {
    if providers.len() < MIN_PROVIDERS {
        return Err(ServingError::TooFewProviders(providers.len()));
    }
    let phase = ledger.phase(&spec.task_id);
    if phase != Phase::Requested {
        return Err(ServingError::LedgerNotReady(phase));
    }
    let escrow = ledger.escrow(&spec.task_id).expect("requested task has escrow");
    if escrow.metadata.as_deref() != Some(spec.metadata_hash().as_str()) {
        return Err(ServingError::MetadataMismatch);
    }
    validate_spec(&spec, providers.len())?;
    let expected: Vec<Id> = providers.iter().map(|(p, _)| p.clone()).collect();
    let keys: BTreeMap<Id, Vec<u8>> = providers.into_iter().collect();
    if keys.len() != expected.len() {
        return Err(ServingError::InvalidSpec("duplicate provider ids".into()));
    }
    if expected.iter().any(|p| !escrow.provider_deposits.contains_key(p)) || escrow.provider_deposits.len() != expected.len() {
        return Err(ServingError::InvalidSpec("providers differ from the escrowed set".into()));
    }
    let transcript = vec![TranscriptEntry::Open {
        spec: spec.clone(),
        providers: expected.clone(),
    }];
    Ok(TaskSession {
        spec,
        expected,
        keys,
        aggregator_key: aggregator_key.to_vec(),
        user_token: user_token.to_string(),
        nonces: BTreeMap::new(),
        challenges_issued: 0,
        received: BTreeMap::new(),
        tick: 0,
        state: SessionState::Collecting,
        transcript,
    })
}

impl TaskSession {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn task_id(&self) -> &Id {
        &self.spec.task_id
    }

    pub fn expected(&self) -> &[Id] {
        &self.expected
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn submitted(&self) -> Vec<Id> {
        self.received.keys().cloned().collect()
    }

    pub fn all_submitted(&self) -> bool {
        self.received.len() == self.expected.len()
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    fn collecting(&self) -> bool {
        self.state == SessionState::Collecting && self.tick < self.spec.deadline
    }

    pub fn advance(&mut self, ticks: u64) {
        self.tick = self.tick.saturating_add(ticks);
    }

    pub fn deadline_passed(&self) -> bool {
        self.tick >= self.spec.deadline
    }

    /// Issues a fresh nonce the provider's next submission must carry.
    pub fn issue_challenge(&mut self, provider: &Id) -> Result<String, ServingError> {
        if !self.collecting() {
            return Err(ServingError::Closed);
        }
        if !self.keys.contains_key(provider) {
            return Err(ServingError::UnknownProvider(provider.clone()));
        }
        self.challenges_issued += 1;
        let tag = auth_tag(
            &self.aggregator_key,
            &format!("challenge\n{}\n{}\n{}", self.spec.task_id, provider, self.challenges_issued),
        );
        let nonce = tag[..32].to_string();
        self.nonces.insert(provider.clone(), nonce.clone());
        Ok(nonce)
    }

    pub fn submit(&mut self, s: &Submission) -> Result<(), SubmitError> {
        if !self.collecting() {
            return Err(SubmitError::Closed);
        }
        let Some(key) = self.keys.get(&s.provider_id) else {
            return Err(SubmitError::UnknownProvider(s.provider_id.clone()));
        };
        let nonce_ok = self.nonces.get(&s.provider_id).is_some_and(|n| *n == s.nonce);
        if s.task_id != self.spec.task_id || !nonce_ok || !verify_tag(key, &s.signed_bytes(), &s.auth_tag) {
            return Err(SubmitError::BadAuthTag);
        }
        if self.received.contains_key(&s.provider_id) {
            return Err(SubmitError::Duplicate(s.provider_id.clone()));
        }
        if s.predictions.len() != self.spec.queries.len() {
            return Err(SubmitError::InvalidPredictions(format!(
                "{} predictions for {} queries",
                s.predictions.len(),
                self.spec.queries.len()
            )));
        }
        if let Some(v) = s
            .predictions
            .iter()
            .find(|v| v.format() != self.spec.format || v.len() != self.spec.space.len())
        {
            return Err(SubmitError::InvalidPredictions(format!(
                "expected {} over {} labels, got {} over {}",
                self.spec.format,
                self.spec.space.len(),
                v.format(),
                v.len()
            )));
        }
        self.received.insert(s.provider_id.clone(), s.predictions.clone());
        self.transcript.push(TranscriptEntry::Submission {
            task_id: self.spec.task_id.clone(),
            provider_id: s.provider_id.clone(),
            tick: self.tick,
            predictions: s.predictions.clone(),
        });
        Ok(())
    }

    /// Scores, aggregates and seals. Providers that never submitted are
    /// aborted. With fewer than three submitters the session fails and the
    /// caller should refund the escrow.
    pub fn finalize(&mut self) -> Result<Finalized, ServingError> {
        if self.state != SessionState::Collecting {
            return Err(ServingError::Closed);
        }
        if !self.deadline_passed() && !self.all_submitted() {
            return Err(ServingError::NotReady);
        }
        self.state = SessionState::Aggregating;
        if self.received.len() < MIN_PROVIDERS {
            self.state = SessionState::Failed;
            self.transcript.push(TranscriptEntry::Failed {
                task_id: self.spec.task_id.clone(),
                submitters: self.submitted(),
            });
            return Err(ServingError::TooFewSubmitters(self.received.len()));
        }
        match aggregate(&self.spec, &self.expected, &self.received, &self.aggregator_key, &self.user_token) {
            Ok(f) => {
                self.state = SessionState::Done;
                self.transcript.push(TranscriptEntry::Finalize {
                    task_id: self.spec.task_id.clone(),
                    digest: f.result.digest.clone(),
                    aborted: f.aborted.clone(),
                    scores: scores_digest(&f.result.scores),
                    tag: f.result.tag.clone(),
                });
                Ok(f)
            }
            Err(e) => {
                self.state = SessionState::Failed;
                Err(e)
            }
        }
    }
}

pub fn scores_digest(scores: &[ScoreReport]) -> String {
    sha256_hex(canonical::result("", "", scores).as_bytes())
}

/// Scores and aggregated predictions of a task, before sealing.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub scores: Vec<ScoreReport>,
    pub truths: Vec<Vec<f64>>,
    /// Canonical aggregated predictions; `digest` is its SHA-256.
    pub plaintext: String,
    pub digest: String,
    pub submitters: Vec<Id>,
    pub aborted: Vec<Id>,
    pub weights: Vec<f64>,
}

/// Scores over all expected providers, truth discovery over the
/// submitters.
pub fn compute_outcome(
    spec: &TaskSpec,
    expected: &[Id],
    received: &BTreeMap<Id, Vec<PredictionVector>>,
) -> Result<Outcome, ServingError> {
    let n = spec.queries.len();
    let strategies: Vec<Vec<Strategy>> = expected
        .iter()
        .map(|p| match received.get(p) {
            Some(row) => row.iter().map(Strategy::from_prediction).collect(),
            None => vec![Strategy::Abort; n],
        })
        .collect();
    let scores = score_task(expected, &spec.queries, &strategies, &spec.params, spec.peer_seed)?;
    let submitters: Vec<Id> = expected.iter().filter(|p| received.contains_key(*p)).cloned().collect();
    let aborted: Vec<Id> = expected.iter().filter(|p| !received.contains_key(*p)).cloned().collect();
    let rows = submitters.iter().map(|p| received[p].clone()).collect();
    let matrix = PredictionMatrix::new(
        submitters.clone(),
        spec.queries.clone(),
        spec.format,
        spec.space.clone(),
        rows,
    )?;
    let estimate = run_truth_discovery(&matrix, &spec.td)?;
    let plaintext = canonical::aggregates(spec.task_id.as_str(), &spec.queries, &estimate.truths);
    let digest = sha256_hex(plaintext.as_bytes());
    Ok(Outcome {
        scores,
        truths: estimate.truths,
        plaintext,
        digest,
        submitters,
        aborted,
        weights: estimate.weights,
    })
}

pub fn result_tag(aggregator_key: &[u8], task_id: &Id, digest: &str, scores: &[ScoreReport]) -> String {
    auth_tag(aggregator_key, &canonical::result(task_id.as_str(), digest, scores))
}

/// Computes the outcome and seals it to the user's token.
pub fn aggregate(
    spec: &TaskSpec,
    expected: &[Id],
    received: &BTreeMap<Id, Vec<PredictionVector>>,
    aggregator_key: &[u8],
    user_token: &str,
) -> Result<Finalized, ServingError> {
    let o = compute_outcome(spec, expected, received)?;
    let envelope = seal(user_token, &o.digest, o.plaintext.as_bytes());
    let tag = result_tag(aggregator_key, &spec.task_id, &o.digest, &o.scores);
    Ok(Finalized {
        result: SealedResult {
            task_id: spec.task_id.clone(),
            envelope,
            digest: o.digest,
            scores: o.scores,
            tag,
        },
        aborted: o.aborted,
        submitters: o.submitters,
        weights: o.weights,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReleaseError {
    #[error("result is not settled on the ledger")]
    NotSettled,
    #[error("token does not open the envelope")]
    WrongToken,
    #[error("opened predictions do not match the settled digest")]
    DigestMismatch,
    #[error("malformed envelope contents: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub query: Id,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedPredictions {
    pub task_id: Id,
    pub aggregates: Vec<AggregateRecord>,
}

/// Opens the sealed result, but only once the ledger settled this digest.
pub fn release(result: &SealedResult, user_token: &str, ledger: &Ledger) -> Result<AggregatedPredictions, ReleaseError> {
    if ledger.phase(&result.task_id) != Phase::Settled
        || ledger.released_digest(&result.task_id) != Some(result.digest.as_str())
    {
        return Err(ReleaseError::NotSettled);
    }
    let plain = open(user_token, &result.digest, &result.envelope).ok_or(ReleaseError::WrongToken)?;
    if sha256_hex(&plain) != result.digest {
        return Err(ReleaseError::DigestMismatch);
    }
    let text = String::from_utf8(plain).map_err(|e| ReleaseError::Malformed(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| ReleaseError::Malformed(e.to_string()))
}
