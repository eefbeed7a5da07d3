//! End-to-end experiment harness: configuration, simulated runs, the
//! equilibrium report and artifact replay.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::canonical;
use crate::crypto::{derive_key, sha256_hex};
use crate::formats::{argmax, Format, LabelSpace, PredictionMatrix, PredictionVector};
use crate::id::Id;
use crate::incentive::{
    check_bne_constraints, enumerate_strategy_cases, utility, MechanismParams, ScoreReport, StrategyCase,
    DEFAULT_KL_FLOOR, MAX_TOTAL,
};
use crate::journal::{read_chain, Chain, CorruptJournal};
use crate::ledger::{replay_journal, to_micros, Ledger, LedgerError, LedgerOp, Micros, Phase, MICROS_PER_UNIT};
use crate::providers_sim::{
    build_population, draw_base_accuracies, generate_ground_truth, provider_predictions, with_aborting, Behavior,
    Case, GroundTruth, ProviderProfile, SimError,
};
use crate::seeding::{derive_seed, stream};
use crate::serving::{
    compute_outcome, open_task, release, result_tag, scores_digest, ReleaseError, ServingError, Submission,
    SubmitError, TaskSpec, TranscriptEntry,
};
use crate::truth_discovery::{average_predictions, TdConfig};

pub const USER_ACCOUNT: &str = "user";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {0:?} given twice")]
    DuplicateKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Accuracies {
    Fixed(Vec<f64>),
    /// Drawn uniformly per provider from `[lo, hi)`.
    Range(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatChoice {
    All,
    One(Format),
}

impl FormatChoice {
    pub fn formats(self) -> Vec<Format> {
        match self {
            FormatChoice::All => Format::ALL.to_vec(),
            FormatChoice::One(f) => vec![f],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub m: usize,
    pub n: usize,
    pub c: usize,
    pub format: FormatChoice,
    pub case: Case,
    pub base_accuracies: Accuracies,
    pub theta: f64,
    /// Truth-discovery rounds.
    pub epsilon_iters: usize,
    /// One value for every provider, or one per provider.
    pub alpha: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
    pub d0: f64,
    pub budget: f64,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// Truthful providers that never submit.
    pub aborting: usize,
    pub concentration: f64,
    pub secret: String,
    pub user_token: String,
    pub host: String,
    pub port: u16,
    /// Logical ticks before collection closes.
    pub deadline: u64,
    /// Wall-clock milliseconds per tick in `serve`.
    pub tick_ms: u64,
    /// Provider the `provider` command plays.
    pub provider: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            m: 6,
            n: 1000,
            c: 10,
            format: FormatChoice::All,
            case: Case::A,
            base_accuracies: Accuracies::Range(0.55, 0.85),
            theta: 0.5,
            epsilon_iters: 10,
            alpha: vec![0.5],
            c1: 1.0,
            c2: 1.0,
            d0: 0.01,
            budget: 100_000.0,
            seed: None,
            output_dir: None,
            aborting: 0,
            concentration: 0.9,
            secret: "predpool-dev-secret".into(),
            user_token: "user-token".into(),
            host: "127.0.0.1".into(),
            port: 7878,
            deadline: 100,
            tick_ms: 100,
            provider: None,
        }
    }
}

pub const CONFIG_KEYS: [&str; 24] = [
    "m",
    "n",
    "c",
    "format",
    "case",
    "base_accuracies",
    "theta",
    "epsilon_iters",
    "alpha",
    "c1",
    "c2",
    "d0",
    "budget",
    "seed",
    "output_dir",
    "aborting",
    "concentration",
    "secret",
    "user_token",
    "host",
    "port",
    "deadline",
    "tick_ms",
    "provider",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                reason: "expected key = value".into(),
            });
        };
        let key = k.trim().replace('-', "_");
        if out.iter().any(|(seen, _)| *seen == key) {
            return Err(ConfigError::DuplicateKey(key));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value.split(',').map(|x| num(key, x.trim())).collect()
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.replace('-', "_");
        let bad = |reason: &str| ConfigError::BadValue {
            key: key.clone(),
            value: value.into(),
            reason: reason.into(),
        };
        match key.as_str() {
            "m" => self.m = num(&key, value)?,
            "n" => self.n = num(&key, value)?,
            "c" => self.c = num(&key, value)?,
            "format" => {
                self.format = if value == "all" {
                    FormatChoice::All
                } else {
                    FormatChoice::One(value.parse().map_err(|_| bad("expected abstract, rank, measurement or all"))?)
                }
            }
            "case" => self.case = value.parse().map_err(|_| bad("expected A, B or C"))?,
            "base_accuracies" => {
                self.base_accuracies = match value.split_once("..") {
                    Some((lo, hi)) => Accuracies::Range(num(&key, lo.trim())?, num(&key, hi.trim())?),
                    None => Accuracies::Fixed(list(&key, value)?),
                }
            }
            "theta" => self.theta = num(&key, value)?,
            "epsilon_iters" => self.epsilon_iters = num(&key, value)?,
            "alpha" => self.alpha = list(&key, value)?,
            "c1" => self.c1 = num(&key, value)?,
            "c2" => self.c2 = num(&key, value)?,
            "d0" => self.d0 = num(&key, value)?,
            "budget" => self.budget = num(&key, value)?,
            "seed" => self.seed = Some(num(&key, value)?),
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            "aborting" => self.aborting = num(&key, value)?,
            "concentration" => self.concentration = num(&key, value)?,
            "secret" => self.secret = value.to_string(),
            "user_token" => self.user_token = value.to_string(),
            "host" => self.host = value.to_string(),
            "port" => self.port = num(&key, value)?,
            "deadline" => self.deadline = num(&key, value)?,
            "tick_ms" => self.tick_ms = num(&key, value)?,
            "provider" => self.provider = Some(value.to_string()),
            _ => return Err(ConfigError::UnknownKey(key)),
        }
        Ok(())
    }

    /// File values first, then overrides; the result is validated.
    pub fn from_sources(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        if let Some(text) = file {
            for (k, v) in parse_config(text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
                path: p.display().to_string(),
                reason: e.to_string(),
            })?),
            None => None,
        };
        Self::from_sources(text.as_deref(), overrides)
    }

    pub fn alphas(&self) -> Vec<f64> {
        if self.alpha.len() == 1 {
            vec![self.alpha[0]; self.m]
        } else {
            self.alpha.clone()
        }
    }

    pub fn mechanism_params(&self) -> MechanismParams {
        MechanismParams {
            theta: self.theta,
            alpha: self.alphas(),
            c1: self.c1,
            c2: self.c2,
            d0: self.d0,
            budget: self.budget,
            n_queries: self.n,
            m_providers: self.m,
            kl_floor: DEFAULT_KL_FLOOR,
        }
    }

    pub fn td_config(&self) -> TdConfig {
        TdConfig {
            iterations: self.epsilon_iters,
            ..TdConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |s: String| Err(ConfigError::Invalid(s));
        if self.m < crate::truth_discovery::MIN_PROVIDERS {
            return bad(format!("m must be at least 3, got {}", self.m));
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.c < 2 {
            return bad("c must be at least 2".into());
        }
        if self.alpha.len() != 1 && self.alpha.len() != self.m {
            return bad(format!("alpha needs 1 or {} values, got {}", self.m, self.alpha.len()));
        }
        match &self.base_accuracies {
            Accuracies::Fixed(v) if v.len() != self.m => {
                return bad(format!("base_accuracies needs {} values, got {}", self.m, v.len()))
            }
            Accuracies::Fixed(v) if v.iter().any(|a| !(0.0..=1.0).contains(a)) => {
                return bad("base accuracies must lie in [0, 1]".into())
            }
            Accuracies::Range(lo, hi) if !(0.0 <= *lo && lo <= hi && *hi <= 1.0) => {
                return bad("base accuracy range must satisfy 0 <= lo <= hi <= 1".into())
            }
            _ => {}
        }
        if !(self.concentration > 1.0 / self.c as f64 && self.concentration <= 1.0) {
            return bad("concentration must lie in (1/c, 1]".into());
        }
        if self.epsilon_iters == 0 {
            return bad("epsilon_iters must be positive".into());
        }
        let truthful = self.m - self.case.perturbed_count(self.m);
        if self.aborting > truthful {
            return bad(format!("aborting {} exceeds the {truthful} truthful providers", self.aborting));
        }
        if self.deadline == 0 {
            return bad("deadline must be positive".into());
        }
        for (name, x) in [("d0", self.d0), ("budget", self.budget)] {
            let whole = (x * MICROS_PER_UNIT as f64).round();
            if !x.is_finite() || x < 0.0 || (x * MICROS_PER_UNIT as f64 - whole).abs() > 1e-6 * whole.max(1.0) {
                return bad(format!("{name} must be a non-negative multiple of 1e-6"));
            }
        }
        if self.user_token.is_empty() || self.secret.is_empty() {
            return bad("secret and user_token must be non-empty".into());
        }
        self.mechanism_params()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    fn seed_or_zero(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Serving(#[from] ServingError),
    #[error("submission rejected: {0}")]
    Submit(#[from] SubmitError),
    #[error(transparent)]
    Release(#[from] ReleaseError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn aggregator_key(cfg: &ExperimentConfig) -> Vec<u8> {
    derive_key(&cfg.secret, "aggregator")
}

pub fn provider_key(cfg: &ExperimentConfig, provider: &Id) -> Vec<u8> {
    derive_key(&cfg.secret, &format!("provider:{provider}"))
}

pub fn query_ids(n: usize) -> Vec<Id> {
    let width = n.saturating_sub(1).to_string().len();
    (0..n)
        .map(|j| Id::new(format!("q{j:0width$}")).expect("query id"))
        .collect()
}

pub fn task_id(format: Format) -> Id {
    Id::new(format!("task-{format}")).expect("task id")
}

/// Everything a run derives from `(config, seed)` before any provider acts.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub truth: GroundTruth,
    pub accuracies: Vec<f64>,
    pub profiles: Vec<ProviderProfile>,
}

pub fn scenario(cfg: &ExperimentConfig) -> Result<Scenario, ExperimentError> {
    let seed = cfg.seed_or_zero();
    let truth = generate_ground_truth(cfg.n, cfg.c, cfg.concentration, seed);
    let accuracies = match &cfg.base_accuracies {
        Accuracies::Fixed(v) => v.clone(),
        Accuracies::Range(lo, hi) => draw_base_accuracies(cfg.m, *lo, *hi, seed),
    };
    let profiles = with_aborting(build_population(cfg.m, cfg.case, &accuracies, seed)?, cfg.aborting);
    Ok(Scenario {
        truth,
        accuracies,
        profiles,
    })
}

pub fn task_spec(cfg: &ExperimentConfig, format: Format) -> TaskSpec {
    TaskSpec {
        task_id: task_id(format),
        queries: query_ids(cfg.n),
        space: LabelSpace::numbered(cfg.c).expect("c >= 2"),
        format,
        params: cfg.mechanism_params(),
        td: cfg.td_config(),
        deadline: cfg.deadline,
        peer_seed: derive_seed(&[cfg.seed_or_zero(), stream::PEER, format as u64]),
    }
}

/// Mints every account and escrows one task per format.
pub fn fund_and_request(cfg: &ExperimentConfig, ledger: &mut Ledger, profiles: &[ProviderProfile]) -> Result<(), ExperimentError> {
    let formats = cfg.format.formats();
    let budget = to_micros(cfg.budget)?;
    let d0 = to_micros(cfg.d0)?;
    let user = Id::new(USER_ACCOUNT).expect("user id");
    ledger.mint(&user, budget * formats.len() as u64)?;
    for p in profiles {
        ledger.mint(&p.id, d0 * cfg.n as u64 * formats.len() as u64)?;
    }
    let ids: Vec<Id> = profiles.iter().map(|p| p.id.clone()).collect();
    for &f in &formats {
        let spec = task_spec(cfg, f);
        ledger.deposit(&spec.task_id, &user, budget, &ids, d0, cfg.n as u64)?;
        ledger.request(&spec.task_id, &spec.metadata_hash())?;
    }
    Ok(())
}

pub fn top1_accuracy(labels: &[usize], vectors: &[Vec<f64>]) -> f64 {
    let hits = labels
        .iter()
        .zip(vectors)
        .filter(|(l, v)| argmax(v) == **l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

fn behavior_name(b: Behavior) -> &'static str {
    match b {
        Behavior::Truthful { .. } => "truthful",
        Behavior::Perturbed => "perturbed",
        Behavior::Aborting => "aborting",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderRow {
    pub id: Id,
    pub behavior: Behavior,
    /// Top-1 accuracy of the submitted predictions; `None` if it never
    /// submitted.
    pub accuracy: Option<f64>,
    /// Mean utility per query.
    pub mean_utility: f64,
    pub credited: Micros,
    pub user_funded: Micros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormatRun {
    pub format: Format,
    pub task_id: Id,
    pub failed: bool,
    pub averaging_accuracy: f64,
    pub mean_provider_accuracy: f64,
    pub td_accuracy: Option<f64>,
    pub providers: Vec<ProviderRow>,
    pub scores: Vec<ScoreReport>,
    pub digest: Option<String>,
    /// Largest per-query sum of user-funded payments.
    pub max_query_user_funded: Micros,
    pub budget: Micros,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub seed: u64,
    pub case: Case,
    pub runs: Vec<FormatRun>,
    pub accuracy_csv: String,
    pub providers_csv: String,
    pub scores_csv: String,
    pub journal: String,
    pub transcript: String,
    pub money_before: u128,
    pub money_after: u128,
}

impl SimulationOutput {
    pub fn transcript_digest(&self) -> String {
        sha256_hex(self.transcript.as_bytes())
    }

    pub fn journal_digest(&self) -> String {
        sha256_hex(self.journal.as_bytes())
    }

    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("accuracy.csv"), &self.accuracy_csv)?;
        std::fs::write(dir.join("providers.csv"), &self.providers_csv)?;
        std::fs::write(dir.join("scores.csv"), &self.scores_csv)?;
        std::fs::write(dir.join("journal.jsonl"), &self.journal)?;
        std::fs::write(dir.join("transcript.jsonl"), &self.transcript)?;
        Ok(())
    }
}

/// Population, submissions, finalize, settle and release for every
/// configured format.
pub fn simulate(cfg: &ExperimentConfig) -> Result<SimulationOutput, ExperimentError> {
    cfg.validate()?;
    let sc = scenario(cfg)?;
    let agg_key = aggregator_key(cfg);
    let mut ledger = Ledger::new(&agg_key);
    fund_and_request(cfg, &mut ledger, &sc.profiles)?;
    let money_before = ledger.total_money();
    let mut transcript: Chain<TranscriptEntry> = Chain::new();
    let mut runs = Vec::new();
    for format in cfg.format.formats() {
        runs.push(run_format(cfg, &sc, format, &mut ledger, &mut transcript, &agg_key)?);
    }
    let money_after = ledger.total_money();
    ledger.close()?;
    transcript.append(TranscriptEntry::Close);
    let seed = cfg.seed_or_zero();
    Ok(SimulationOutput {
        seed,
        case: cfg.case,
        accuracy_csv: accuracy_csv(seed, cfg, &runs),
        providers_csv: providers_csv(seed, cfg.case, &runs),
        scores_csv: scores_csv(&runs),
        runs,
        journal: ledger.journal_jsonl(),
        transcript: transcript.to_jsonl(),
        money_before,
        money_after,
    })
}

fn run_format(
    cfg: &ExperimentConfig,
    sc: &Scenario,
    format: Format,
    ledger: &mut Ledger,
    transcript: &mut Chain<TranscriptEntry>,
    agg_key: &[u8],
) -> Result<FormatRun, ExperimentError> {
    let spec = task_spec(cfg, format);
    let keys: Vec<(Id, Vec<u8>)> = sc
        .profiles
        .iter()
        .map(|p| (p.id.clone(), provider_key(cfg, &p.id)))
        .collect();
    let mut session = open_task(spec.clone(), keys.clone(), agg_key, &cfg.user_token, ledger)?;
    let mut submitted: BTreeMap<Id, Vec<PredictionVector>> = BTreeMap::new();
    for (p, (_, key)) in sc.profiles.iter().zip(&keys) {
        let Some(preds) = provider_predictions(p, &sc.truth, cfg.c, format, cfg.concentration) else {
            continue;
        };
        let nonce = session.issue_challenge(&p.id)?;
        let sub = Submission::signed(&spec.task_id, &p.id, &nonce, &preds, key);
        session.submit(&sub)?;
        submitted.insert(p.id.clone(), sub.predictions);
    }
    session.advance(spec.deadline);
    let finalized = session.finalize();
    for e in session.transcript() {
        transcript.append(e.clone());
    }

    let accuracy_of = |id: &Id| {
        submitted.get(id).map(|row| {
            let vs: Vec<Vec<f64>> = row.iter().map(|v| v.values().to_vec()).collect();
            top1_accuracy(&sc.truth.labels, &vs)
        })
    };
    let individual: Vec<f64> = sc.profiles.iter().filter_map(|p| accuracy_of(&p.id)).collect();
    let mean_provider_accuracy = individual.iter().sum::<f64>() / individual.len().max(1) as f64;
    let averaging_accuracy = if submitted.is_empty() {
        0.0
    } else {
        let ids: Vec<Id> = submitted.keys().cloned().collect();
        let rows = submitted.values().cloned().collect();
        let matrix = PredictionMatrix::new(ids, spec.queries.clone(), format, spec.space.clone(), rows)
            .map_err(ServingError::from)?;
        top1_accuracy(&sc.truth.labels, &average_predictions(&matrix))
    };
    let budget = to_micros(cfg.budget)?;

    let f = match finalized {
        Ok(f) => f,
        Err(ServingError::TooFewSubmitters(_)) => {
            ledger.refund(&spec.task_id)?;
            let providers = sc
                .profiles
                .iter()
                .map(|p| ProviderRow {
                    id: p.id.clone(),
                    behavior: p.behavior,
                    accuracy: accuracy_of(&p.id),
                    mean_utility: 0.0,
                    credited: 0,
                    user_funded: 0,
                })
                .collect();
            return Ok(FormatRun {
                format,
                task_id: spec.task_id,
                failed: true,
                averaging_accuracy,
                mean_provider_accuracy,
                td_accuracy: None,
                providers,
                scores: Vec::new(),
                digest: None,
                max_query_user_funded: 0,
                budget,
            });
        }
        Err(e) => return Err(e.into()),
    };
    let payout = ledger.settle(&spec.task_id, &f.result.settlement())?;
    let released = release(&f.result, &cfg.user_token, ledger)?;
    let truths: Vec<Vec<f64>> = released.aggregates.into_iter().map(|a| a.values).collect();
    let td_accuracy = top1_accuracy(&sc.truth.labels, &truths);

    let params = &spec.params;
    let mut utilities: BTreeMap<&Id, f64> = BTreeMap::new();
    for r in &f.result.scores {
        let u = if r.is_abort() {
            // the whole deposit is lost
            -params.d0 * cfg.n as f64
        } else {
            utility(r.payment, r.deposit_refunded, r.total, params)
        };
        *utilities.entry(&r.provider).or_default() += u;
    }
    let providers = sc
        .profiles
        .iter()
        .map(|p| ProviderRow {
            id: p.id.clone(),
            behavior: p.behavior,
            accuracy: accuracy_of(&p.id),
            mean_utility: utilities.get(&p.id).copied().unwrap_or(0.0) / cfg.n as f64,
            credited: payout.providers.get(&p.id).copied().unwrap_or(0),
            user_funded: payout.user_funded.get(&p.id).copied().unwrap_or(0),
        })
        .collect();
    Ok(FormatRun {
        format,
        task_id: spec.task_id,
        failed: false,
        averaging_accuracy,
        mean_provider_accuracy,
        td_accuracy: Some(td_accuracy),
        providers,
        scores: f.result.scores.clone(),
        digest: Some(f.result.digest.clone()),
        max_query_user_funded: payout.per_query.values().copied().max().unwrap_or(0),
        budget,
    })
}

fn fixed(x: f64) -> String {
    format!("{x:.6}")
}

fn accuracy_csv(seed: u64, cfg: &ExperimentConfig, runs: &[FormatRun]) -> String {
    let mut out = String::from(
        "seed,case,format,m,n,c,averaging_accuracy,mean_provider_accuracy,td_accuracy,provider_accuracies\n",
    );
    for r in runs {
        let per: Vec<String> = r
            .providers
            .iter()
            .map(|p| p.accuracy.map(fixed).unwrap_or_default())
            .collect();
        let _ = writeln!(
            out,
            "{seed},{},{},{},{},{},{},{},{},{}",
            cfg.case,
            r.format,
            cfg.m,
            cfg.n,
            cfg.c,
            fixed(r.averaging_accuracy),
            fixed(r.mean_provider_accuracy),
            r.td_accuracy.map(fixed).unwrap_or_default(),
            per.join(";")
        );
    }
    out
}

fn providers_csv(seed: u64, case: Case, runs: &[FormatRun]) -> String {
    let mut out = String::from("seed,case,format,provider,behavior,accuracy,mean_utility,credited_micros,user_funded_micros\n");
    for r in runs {
        for p in &r.providers {
            let _ = writeln!(
                out,
                "{seed},{case},{},{},{},{},{},{},{}",
                r.format,
                p.id,
                behavior_name(p.behavior),
                p.accuracy.map(fixed).unwrap_or_default(),
                fixed(p.mean_utility),
                p.credited,
                p.user_funded
            );
        }
    }
    out
}

fn scores_csv(runs: &[FormatRun]) -> String {
    let mut out = String::from("task,provider,query,peer,score_i,score_p,total,payment,deposit_refunded\n");
    for r in runs {
        for s in &r.scores {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.task_id,
                s.provider,
                s.query.as_ref().map(Id::as_str).unwrap_or("*"),
                s.peer.as_ref().map(Id::as_str).unwrap_or(""),
                canonical::number(s.score_i),
                canonical::number(s.score_p),
                canonical::number(s.total),
                canonical::number(s.payment),
                s.deposit_refunded
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BneReport {
    pub ok: bool,
    pub lines: Vec<String>,
}

/// Checks the equilibrium constraints at score 3 and the utilities of the
/// three strategy classes for every distinct alpha.
pub fn verify_bne(cfg: &ExperimentConfig) -> BneReport {
    let params = cfg.mechanism_params();
    let mut lines = Vec::new();
    let check = match check_bne_constraints(&params, MAX_TOTAL) {
        Ok(c) => c,
        Err(e) => {
            return BneReport {
                ok: false,
                lines: vec![format!("FAIL {e}")],
            }
        }
    };
    let mut ok = check.ok;
    for v in &check.violated {
        lines.push(format!("FAIL {v}"));
    }
    if check.ok {
        lines.push("PASS constraints (1)-(3) hold at score 3 for every provider".into());
    }
    let mut seen: Vec<f64> = Vec::new();
    for (i, &a) in params.alpha.iter().enumerate() {
        if seen.contains(&a) {
            continue;
        }
        seen.push(a);
        let cases = enumerate_strategy_cases(&params, i);
        for c in &cases {
            lines.push(format!(
                "alpha={} case {}: payment {} utility {}",
                a,
                c.case.label(),
                canonical::number(c.payment),
                canonical::number(c.utility)
            ));
        }
        let truthful = cases
            .iter()
            .find(|c| c.case == StrategyCase::Truthful)
            .map(|c| c.utility)
            .unwrap_or(f64::NEG_INFINITY);
        let dominant = cases
            .iter()
            .filter(|c| c.case != StrategyCase::Truthful)
            .all(|c| truthful > c.utility);
        if dominant {
            lines.push(format!("PASS alpha={a}: truthful strictly dominates"));
        } else {
            lines.push(format!("FAIL alpha={a}: truthful does not strictly dominate"));
            ok = false;
        }
    }
    lines.push(if ok { "verdict: PASS".into() } else { "verdict: FAIL".into() });
    BneReport { ok, lines }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Artifact {
    Journal,
    Transcript,
}

impl std::fmt::Display for Artifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Artifact::Journal => "journal",
            Artifact::Transcript => "transcript",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{artifact}: {source}")]
pub struct ReplayError {
    pub artifact: Artifact,
    pub source: CorruptJournal,
}

impl ReplayError {
    fn transcript(index: usize, reason: impl Into<String>) -> Self {
        ReplayError {
            artifact: Artifact::Transcript,
            source: CorruptJournal {
                index,
                reason: reason.into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub tasks: usize,
    pub submissions: usize,
    pub state_digest: String,
    pub balances: BTreeMap<Id, Micros>,
}

struct ReplayTask {
    spec: TaskSpec,
    providers: Vec<Id>,
    received: BTreeMap<Id, Vec<PredictionVector>>,
    done: bool,
}

/// Re-executes the ledger journal, recomputes every aggregation in the
/// transcript and checks both against each other.
pub fn replay(journal: &str, transcript: &str) -> Result<ReplayReport, ReplayError> {
    let ledger = replay_journal(journal).map_err(|source| ReplayError {
        artifact: Artifact::Journal,
        source,
    })?;
    let entries: Vec<TranscriptEntry> = read_chain(transcript).map_err(|source| ReplayError {
        artifact: Artifact::Transcript,
        source,
    })?;
    let settled_tags: BTreeMap<&Id, &str> = ledger
        .journal()
        .records()
        .iter()
        .filter_map(|r| match &r.body.op {
            LedgerOp::Settle { task, settlement } => Some((task, settlement.tag.as_str())),
            _ => None,
        })
        .collect();
    let mut tasks: BTreeMap<Id, ReplayTask> = BTreeMap::new();
    let mut submissions = 0;
    for (i, e) in entries.iter().enumerate() {
        match e {
            TranscriptEntry::Open { spec, providers } => {
                if tasks.contains_key(&spec.task_id) {
                    return Err(ReplayError::transcript(i, "task opened twice"));
                }
                let bound = ledger.escrow(&spec.task_id).and_then(|e| e.metadata.clone());
                if bound.as_deref() != Some(spec.metadata_hash().as_str()) {
                    return Err(ReplayError::transcript(i, "task spec differs from the ledger request"));
                }
                tasks.insert(
                    spec.task_id.clone(),
                    ReplayTask {
                        spec: spec.clone(),
                        providers: providers.clone(),
                        received: BTreeMap::new(),
                        done: false,
                    },
                );
            }
            TranscriptEntry::Submission {
                task_id,
                provider_id,
                predictions,
                ..
            } => {
                let t = tasks
                    .get_mut(task_id)
                    .filter(|t| !t.done)
                    .ok_or_else(|| ReplayError::transcript(i, "submission outside an open task"))?;
                if !t.providers.contains(provider_id) || t.received.contains_key(provider_id) {
                    return Err(ReplayError::transcript(i, "unexpected or duplicate submission"));
                }
                t.received.insert(provider_id.clone(), predictions.clone());
                submissions += 1;
            }
            TranscriptEntry::Finalize {
                task_id,
                digest,
                aborted,
                scores,
                tag,
            } => {
                let t = tasks
                    .get_mut(task_id)
                    .filter(|t| !t.done)
                    .ok_or_else(|| ReplayError::transcript(i, "finalize outside an open task"))?;
                t.done = true;
                let o = compute_outcome(&t.spec, &t.providers, &t.received)
                    .map_err(|e| ReplayError::transcript(i, format!("aggregation fails on replay: {e}")))?;
                if &o.digest != digest || &o.aborted != aborted || &scores_digest(&o.scores) != scores {
                    return Err(ReplayError::transcript(i, "recomputed result differs"));
                }
                if result_tag(ledger.verify_key(), task_id, digest, &o.scores) != *tag {
                    return Err(ReplayError::transcript(i, "result tag differs"));
                }
                if ledger.released_digest(task_id) != Some(digest.as_str())
                    || settled_tags.get(task_id).copied() != Some(tag.as_str())
                {
                    return Err(ReplayError::transcript(i, "ledger settled a different result"));
                }
            }
            TranscriptEntry::Failed { task_id, submitters } => {
                let t = tasks
                    .get_mut(task_id)
                    .filter(|t| !t.done)
                    .ok_or_else(|| ReplayError::transcript(i, "failure outside an open task"))?;
                t.done = true;
                let got: Vec<Id> = t.received.keys().cloned().collect();
                if &got != submitters || ledger.phase(task_id) != Phase::Refunded {
                    return Err(ReplayError::transcript(i, "failed task not refunded as recorded"));
                }
            }
            TranscriptEntry::Close => {
                if let Some((id, _)) = tasks.iter().find(|(_, t)| !t.done) {
                    return Err(ReplayError::transcript(i, format!("task {id} never finished")));
                }
            }
        }
    }
    Ok(ReplayReport {
        tasks: tasks.len(),
        submissions,
        state_digest: ledger.state_digest(),
        balances: ledger.balances().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::from_sources(Some("m = 4\nn = 30\nc = 4\nbudget = 1000\n"), &[]).unwrap();
        c.seed = Some(3);
        c
    }

    #[test]
    fn config_parsing() {
        let pairs = parse_config("# comment\nm = 5\n\nformat = rank # trailing\n").unwrap();
        assert_eq!(pairs, vec![("m".into(), "5".into()), ("format".into(), "rank".into())]);
        assert!(matches!(parse_config("m 5"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(parse_config("m=1\nm=2"), Err(ConfigError::DuplicateKey(_))));
        assert!(matches!(
            ExperimentConfig::from_sources(Some("bogus = 1"), &[]),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_sources(Some("m = 2"), &[]),
            Err(ConfigError::Invalid(_))
        ));
        let cfg = ExperimentConfig::from_sources(
            Some("m = 5\nbase_accuracies = 0.6..0.7\n"),
            &[("m".into(), "3".into()), ("base-accuracies".into(), "0.5,0.6,0.7".into())],
        )
        .unwrap();
        assert_eq!(cfg.m, 3);
        assert_eq!(cfg.base_accuracies, Accuracies::Fixed(vec![0.5, 0.6, 0.7]));
        assert!(ExperimentConfig::from_sources(None, &[("c1".into(), "-1".into())]).is_err());
    }

    #[test]
    fn simulate_is_deterministic_and_conserves_money() {
        let cfg = small();
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a.accuracy_csv, b.accuracy_csv);
        assert_eq!(a.transcript, b.transcript);
        assert_eq!(a.journal, b.journal);
        assert_eq!(a.money_before, a.money_after);
        assert_eq!(a.runs.len(), 3);
        assert_eq!(a.accuracy_csv.lines().count(), 4);
    }

    #[test]
    fn replay_accepts_untouched_artifacts() {
        let out = simulate(&small()).unwrap();
        let r = replay(&out.journal, &out.transcript).unwrap();
        assert_eq!(r.tasks, 3);
        assert_eq!(r.submissions, 12);
    }

    #[test]
    fn aborting_provider_forfeits() {
        let mut cfg = small();
        cfg.aborting = 1;
        let out = simulate(&cfg).unwrap();
        for run in &out.runs {
            let last = run.providers.last().unwrap();
            assert_eq!(last.behavior, Behavior::Aborting);
            assert_eq!(last.credited, 0);
            assert!((last.mean_utility + cfg.d0).abs() < 1e-12);
        }
        replay(&out.journal, &out.transcript).unwrap();
    }

    #[test]
    fn sub_quorum_refunds() {
        let mut cfg = small();
        cfg.aborting = 2;
        let out = simulate(&cfg).unwrap();
        assert!(out.runs.iter().all(|r| r.failed));
        assert_eq!(out.money_before, out.money_after);
        replay(&out.journal, &out.transcript).unwrap();
    }

    #[test]
    fn bne_report_examples() {
        let base = [("alpha", "0.5"), ("c1", "1"), ("c2", "1"), ("budget", "100"), ("n", "2"), ("m", "5"), ("d0", "0.1")];
        let with = |alpha: &str| {
            let mut o: Vec<(String, String)> = base.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
            o[0].1 = alpha.into();
            let mut cfg = ExperimentConfig::default();
            for (k, v) in &o {
                cfg.set(k, v).unwrap();
            }
            verify_bne(&cfg)
        };
        let r = with("0.5");
        assert!(r.ok, "{:?}", r.lines);
        assert!(r.lines.iter().any(|l| l.contains("(b) truthful") && l.contains("utility 0.500000000")));
        assert!(r.lines.iter().any(|l| l.contains("(a) mismatched") && l.contains("utility -1.000000000")));
        assert!(r.lines.iter().any(|l| l.contains("(c) abort") && l.contains("utility -0.100000000")));
        let r = with("0.2");
        assert!(!r.ok);
        assert!(r.lines.iter().any(|l| l.starts_with("FAIL constraint (2)")));
        let r = with("2");
        assert!(!r.ok);
        assert!(r.lines.iter().any(|l| l.starts_with("FAIL constraint (3)")));
    }
}
