//! Peer-prediction pricing.
//!
//! Each reporting provider `i` is compared with a randomly drawn peer `r`
//! on every query:
//!
//! * `score_I = -1` when both claim the same ordered label list but the
//!   KL divergence `D(v_i || v_r)` exceeds `theta`, else `0`;
//! * `score_P = (1/c) * sum_k [2 - (1 - v_i(l_rk))^2 - sum_{l != l_rk} v_i(l)^2]`
//!   where `l_rk` is the `k`-th label of the peer's list;
//! * payment `alpha_i * (score_I + score_P + 1)^2`, plus the per-query
//!   deposit `d0` back when the provider did not abort.
//!
//! Providers bear cost `c1 * total + c2`, so utility is
//! `payment - cost - d0`, or `-d0` after an abort.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{ranked_order, to_distribution, Format, PredictionVector};
use crate::id::Id;
use crate::seeding::{keyed_rng, stream};

/// The largest attainable `score_I + score_P + 1`.
pub const MAX_TOTAL: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IncentiveError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("strategy is an abort")]
    AbortedStrategy,
    #[error("score {0} outside [0, 3]")]
    OutOfRange(f64),
    #[error("invalid mechanism parameters: {0}")]
    InvalidParams(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("provider {0} mixes reports and aborts")]
    MixedAbort(String),
    #[error("no peer available: need at least 2 reporting providers")]
    NoPeer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams {
    /// KL threshold above which matching label lists are penalized.
    pub theta: f64,
    /// Payment scale per provider, in provider order.
    pub alpha: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
    /// Deposit per query.
    pub d0: f64,
    pub budget: f64,
    pub n_queries: usize,
    pub m_providers: usize,
    /// Probabilities are floored at this value before taking KL.
    pub kl_floor: f64,
}

pub const DEFAULT_THETA: f64 = 0.5;
pub const DEFAULT_KL_FLOOR: f64 = 1e-9;

impl MechanismParams {
    pub fn validate(&self) -> Result<(), IncentiveError> {
        let bad = |m: &str| Err(IncentiveError::InvalidParams(m.to_string()));
        let finite = [self.theta, self.c1, self.c2, self.d0, self.budget, self.kl_floor];
        if finite.iter().any(|x| !x.is_finite()) {
            return bad("non-finite parameter");
        }
        if self.theta <= 0.0 {
            return bad("theta must be > 0");
        }
        if self.c1 <= 0.0 || self.c2 <= 0.0 {
            return bad("c1 and c2 must be > 0");
        }
        if self.budget <= 0.0 {
            return bad("budget must be > 0");
        }
        if self.c1 + self.c2 >= self.budget {
            return bad("c1 + c2 must be smaller than the budget");
        }
        if self.d0 < 0.0 {
            return bad("d0 must be >= 0");
        }
        if self.n_queries == 0 || self.m_providers == 0 {
            return bad("n and m must be positive");
        }
        if self.alpha.len() != self.m_providers {
            return bad("need one alpha per provider");
        }
        if self.alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return bad("alpha must be > 0");
        }
        if !(self.kl_floor > 0.0 && self.kl_floor < 1e-3) {
            return bad("kl_floor must be in (0, 1e-3)");
        }
        Ok(())
    }
}

/// A provider's move for one query: a claimed label order plus a
/// probability vector over the label space, or an abort.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    Report {
        /// Label indices in claimed order.
        order: Vec<usize>,
        /// Probability per label index (public order).
        probs: Vec<f64>,
    },
    Abort,
}

impl Strategy {
    pub fn report(order: Vec<usize>, probs: Vec<f64>) -> Result<Self, IncentiveError> {
        let c = probs.len();
        if order.len() != c {
            return Err(IncentiveError::LengthMismatch(order.len(), c));
        }
        let mut seen = vec![false; c];
        for &l in &order {
            if l >= c || std::mem::replace(&mut seen[l], true) {
                return Err(IncentiveError::InvalidStrategy(
                    "label order is not a permutation".into(),
                ));
            }
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0)
            || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(IncentiveError::InvalidStrategy(
                "probabilities must be non-negative and sum to 1".into(),
            ));
        }
        Ok(Strategy::Report { order, probs })
    }

    /// Rank predictions claim their ranked order; the other formats claim the
    /// public label order. Probabilities come from [`to_distribution`].
    pub fn from_prediction(p: &PredictionVector) -> Self {
        let probs = to_distribution(p);
        let order = match p.format() {
            Format::Rank => ranked_order(p.values()),
            Format::Abstract | Format::Measurement => (0..probs.len()).collect(),
        };
        Strategy::Report { order, probs }
    }

    pub fn is_abort(&self) -> bool {
        matches!(self, Strategy::Abort)
    }

    fn parts(&self) -> Result<(&[usize], &[f64]), IncentiveError> {
        match self {
            Strategy::Report { order, probs } => Ok((order, probs)),
            Strategy::Abort => Err(IncentiveError::AbortedStrategy),
        }
    }
}

fn floored(p: &[f64], floor: f64) -> Vec<f64> {
    let v: Vec<f64> = p.iter().map(|x| x.max(floor)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// `D(p || q)` after flooring both inputs at `floor` and renormalizing.
pub fn kl_divergence(p: &[f64], q: &[f64], floor: f64) -> Result<f64, IncentiveError> {
    if p.len() != q.len() {
        return Err(IncentiveError::LengthMismatch(p.len(), q.len()));
    }
    let p = floored(p, floor);
    let q = floored(q, floor);
    let d: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    Ok(d.max(0.0))
}

pub fn score_indicator(
    s_i: &Strategy,
    s_r: &Strategy,
    theta: f64,
    kl_floor: f64,
) -> Result<f64, IncentiveError> {
    let (order_i, v_i) = s_i.parts()?;
    let (order_r, v_r) = s_r.parts()?;
    if order_i == order_r && kl_divergence(v_i, v_r, kl_floor)? > theta {
        Ok(-1.0)
    } else {
        Ok(0.0)
    }
}

pub fn score_quadratic(s_i: &Strategy, s_r: &Strategy) -> Result<f64, IncentiveError> {
    let (_, v_i) = s_i.parts()?;
    let (order_r, _) = s_r.parts()?;
    if v_i.len() != order_r.len() {
        return Err(IncentiveError::LengthMismatch(v_i.len(), order_r.len()));
    }
    let c = v_i.len() as f64;
    let sum_sq: f64 = v_i.iter().map(|x| x * x).sum();
    let total: f64 = order_r
        .iter()
        .map(|&l| {
            let hit = v_i[l];
            2.0 - (1.0 - hit).powi(2) - (sum_sq - hit * hit)
        })
        .sum();
    // the exact value lies in [0, 2]; clamp away rounding residue
    Ok((total / c).clamp(0.0, 2.0))
}

pub fn payment_for_total(total: f64, alpha: f64, d0: f64) -> f64 {
    alpha * total * total + d0
}

/// Returns `(payment, deposit_refunded)` for provider index `provider`.
pub fn payment(
    s_i: &Strategy,
    s_r: &Strategy,
    params: &MechanismParams,
    provider: usize,
) -> Result<(f64, bool), IncentiveError> {
    if s_i.is_abort() {
        return Ok((0.0, false));
    }
    let alpha = *params
        .alpha
        .get(provider)
        .ok_or_else(|| IncentiveError::InvalidParams(format!("no alpha for provider {provider}")))?;
    let total = score_indicator(s_i, s_r, params.theta, params.kl_floor)?
        + score_quadratic(s_i, s_r)?
        + 1.0;
    Ok((payment_for_total(total, alpha, params.d0), true))
}

pub fn cost(total: f64, params: &MechanismParams) -> Result<f64, IncentiveError> {
    if !(0.0..=MAX_TOTAL).contains(&total) {
        return Err(IncentiveError::OutOfRange(total));
    }
    Ok(params.c1 * total + params.c2)
}

pub fn utility(payment: f64, deposit_refunded: bool, total: f64, params: &MechanismParams) -> f64 {
    if deposit_refunded {
        payment - (params.c1 * total + params.c2) - params.d0
    } else {
        -params.d0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BneConstraint {
    /// (1) `alpha >= c1 / (2 * score)`
    MarginalCost,
    /// (2) `alpha >= (c1 * score + c2) / score^2`
    Participation,
    /// (3) `alpha <= B / (n * m) / score^2`
    Budget,
}

impl BneConstraint {
    pub fn number(self) -> u8 {
        match self {
            BneConstraint::MarginalCost => 1,
            BneConstraint::Participation => 2,
            BneConstraint::Budget => 3,
        }
    }

    pub fn formula(self) -> &'static str {
        match self {
            BneConstraint::MarginalCost => "alpha >= c1 / (2 * score)",
            BneConstraint::Participation => "alpha >= (c1 * score + c2) / score^2",
            BneConstraint::Budget => "alpha <= B / (n * m) * 1 / score^2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BneViolation {
    pub provider: usize,
    pub constraint: BneConstraint,
    pub alpha: f64,
    pub bound: f64,
}

impl fmt::Display for BneViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.constraint {
            BneConstraint::Budget => ">",
            _ => "<",
        };
        write!(
            f,
            "constraint ({}) {} violated for provider {}: alpha = {} {op} {}",
            self.constraint.number(),
            self.constraint.formula(),
            self.provider,
            self.alpha,
            self.bound
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BneCheck {
    pub ok: bool,
    pub violated: Vec<BneViolation>,
}

/// Evaluates the three equilibrium constraints on every provider's alpha at
/// total score `score` (3 at the truthful equilibrium).
pub fn check_bne_constraints(params: &MechanismParams, score: f64) -> Result<BneCheck, IncentiveError> {
    if !(score > 0.0 && score <= MAX_TOTAL) {
        return Err(IncentiveError::OutOfRange(score));
    }
    let sq = score * score;
    let b1 = params.c1 / (2.0 * score);
    let b2 = (params.c1 * score + params.c2) / sq;
    let b3 = params.budget / (params.n_queries as f64 * params.m_providers as f64) / sq;
    let mut violated = Vec::new();
    for (provider, &alpha) in params.alpha.iter().enumerate() {
        let mut push = |constraint, bound| {
            violated.push(BneViolation {
                provider,
                constraint,
                alpha,
                bound,
            })
        };
        if alpha < b1 {
            push(BneConstraint::MarginalCost, b1);
        }
        if alpha < b2 {
            push(BneConstraint::Participation, b2);
        }
        if alpha > b3 {
            push(BneConstraint::Budget, b3);
        }
    }
    Ok(BneCheck {
        ok: violated.is_empty(),
        violated,
    })
}

/// The three strategy classes a provider can pick against a truthful peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyCase {
    /// Claims a label list different from the peer's; total score 0.
    MismatchedLabels,
    /// Same labels, divergence within theta; total score 3.
    Truthful,
    Abort,
}

impl StrategyCase {
    pub const ALL: [StrategyCase; 3] = [
        StrategyCase::MismatchedLabels,
        StrategyCase::Truthful,
        StrategyCase::Abort,
    ];

    pub fn label(self) -> &'static str {
        match self {
            StrategyCase::MismatchedLabels => "(a) mismatched labels",
            StrategyCase::Truthful => "(b) truthful",
            StrategyCase::Abort => "(c) abort",
        }
    }

    pub fn total(self) -> Option<f64> {
        match self {
            StrategyCase::MismatchedLabels => Some(0.0),
            StrategyCase::Truthful => Some(MAX_TOTAL),
            StrategyCase::Abort => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseUtility {
    pub case: StrategyCase,
    pub payment: f64,
    pub utility: f64,
}

pub fn enumerate_strategy_cases(params: &MechanismParams, provider: usize) -> Vec<CaseUtility> {
    let alpha = params.alpha[provider];
    StrategyCase::ALL
        .iter()
        .map(|&case| match case.total() {
            Some(total) => {
                let pay = payment_for_total(total, alpha, params.d0);
                CaseUtility {
                    case,
                    payment: pay,
                    utility: utility(pay, true, total, params),
                }
            }
            None => CaseUtility {
                case,
                payment: 0.0,
                utility: utility(0.0, false, 0.0, params),
            },
        })
        .collect()
}

/// Scores of one provider on one query. Aborted providers get a single
/// report with no query and no peer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub provider: Id,
    pub query: Option<Id>,
    pub peer: Option<Id>,
    pub score_i: f64,
    pub score_p: f64,
    pub total: f64,
    pub payment: f64,
    pub deposit_refunded: bool,
}

impl ScoreReport {
    pub fn is_abort(&self) -> bool {
        self.query.is_none()
    }
}

/// Draws the peer of `provider` for `query` among `reporters` (excluding
/// itself) from a generator keyed by `(seed, provider, query)`.
pub fn draw_peer(seed: u64, provider: usize, query: usize, reporters: &[usize]) -> Option<usize> {
    let others: Vec<usize> = reporters.iter().copied().filter(|&r| r != provider).collect();
    if others.is_empty() {
        return None;
    }
    let mut rng = keyed_rng(&[seed, stream::PEER, provider as u64, query as u64]);
    Some(others[rng.random_range(0..others.len())])
}

/// Scores every provider on every query against a seeded random peer.
///
/// `strategies[i]` holds provider `i`'s strategy per query; a provider must
/// either report on every query or abort on every query.
pub fn score_task(
    providers: &[Id],
    queries: &[Id],
    strategies: &[Vec<Strategy>],
    params: &MechanismParams,
    seed: u64,
) -> Result<Vec<ScoreReport>, IncentiveError> {
    params.validate()?;
    if strategies.len() != providers.len() {
        return Err(IncentiveError::LengthMismatch(strategies.len(), providers.len()));
    }
    if params.alpha.len() != providers.len() {
        return Err(IncentiveError::LengthMismatch(params.alpha.len(), providers.len()));
    }
    let mut reporters = Vec::new();
    for (i, row) in strategies.iter().enumerate() {
        if row.len() != queries.len() {
            return Err(IncentiveError::LengthMismatch(row.len(), queries.len()));
        }
        let aborts = row.iter().filter(|s| s.is_abort()).count();
        if aborts == 0 {
            reporters.push(i);
        } else if aborts != row.len() {
            return Err(IncentiveError::MixedAbort(providers[i].to_string()));
        }
    }
    if reporters.len() < 2 {
        return Err(IncentiveError::NoPeer);
    }
    let mut reports = Vec::with_capacity(reporters.len() * queries.len() + providers.len());
    for (i, row) in strategies.iter().enumerate() {
        if !reporters.contains(&i) {
            reports.push(ScoreReport {
                provider: providers[i].clone(),
                query: None,
                peer: None,
                score_i: 0.0,
                score_p: 0.0,
                total: 0.0,
                payment: 0.0,
                deposit_refunded: false,
            });
            continue;
        }
        for (j, s_i) in row.iter().enumerate() {
            let r = draw_peer(seed, i, j, &reporters).ok_or(IncentiveError::NoPeer)?;
            let s_r = &strategies[r][j];
            let score_i = score_indicator(s_i, s_r, params.theta, params.kl_floor)?;
            let score_p = score_quadratic(s_i, s_r)?;
            let total = score_i + score_p + 1.0;
            reports.push(ScoreReport {
                provider: providers[i].clone(),
                query: Some(queries[j].clone()),
                peer: Some(providers[r].clone()),
                score_i,
                score_p,
                total,
                payment: payment_for_total(total, params.alpha[i], params.d0),
                deposit_refunded: true,
            });
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{encode_measurement, LabelSpace};
    use crate::id::id;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Just};
    use proptest::strategy::Strategy as PropStrategy;

    fn params(alpha: f64) -> MechanismParams {
        MechanismParams {
            theta: DEFAULT_THETA,
            alpha: vec![alpha; 5],
            c1: 1.0,
            c2: 1.0,
            d0: 0.25,
            budget: 100.0,
            n_queries: 2,
            m_providers: 5,
            kl_floor: DEFAULT_KL_FLOOR,
        }
    }

    fn public(probs: &[f64]) -> Strategy {
        Strategy::report((0..probs.len()).collect(), probs.to_vec()).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5], 1e-9).unwrap(), 0.0);
        // floored: p' = (1, e)/(1+e), q' = (e, 1)/(1+e), e = 1e-9
        let e = 1e-9f64;
        let want = (1.0 / (1.0 + e)) * (1.0 / e).ln() + (e / (1.0 + e)) * e.ln();
        let got = kl_divergence(&[1.0, 0.0], &[0.0, 1.0], e).unwrap();
        assert!((got - want).abs() < 1e-9);
        assert!((got - 20.72).abs() < 0.01);
        assert_eq!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0, 0.0], e),
            Err(IncentiveError::LengthMismatch(2, 3))
        );
    }

    #[test]
    fn indicator_examples() {
        let a = public(&[0.3, 0.7]);
        assert_eq!(score_indicator(&a, &a, 0.5, 1e-9).unwrap(), 0.0);
        let x = public(&[1.0, 0.0]);
        let y = public(&[0.0, 1.0]);
        assert_eq!(score_indicator(&x, &y, 0.5, 1e-9).unwrap(), -1.0);
        let swapped = Strategy::report(vec![1, 0], vec![0.0, 1.0]).unwrap();
        assert_eq!(score_indicator(&x, &swapped, 0.5, 1e-9).unwrap(), 0.0);
        assert_eq!(
            score_indicator(&Strategy::Abort, &x, 0.5, 1e-9),
            Err(IncentiveError::AbortedStrategy)
        );
    }

    fn term(v: &[f64], l: usize) -> f64 {
        2.0 - (1.0 - v[l]).powi(2) - (0..v.len()).filter(|&k| k != l).map(|k| v[k] * v[k]).sum::<f64>()
    }

    #[test]
    fn quadratic_terms_and_uniform_value() {
        assert_eq!(term(&[0.0, 1.0, 0.0], 1), 2.0);
        assert_eq!(term(&[0.0, 1.0, 0.0], 0), 0.0);
        // each term: 2 - 0.75^2 - 3 * 0.25^2 = 1.25
        let u = public(&[0.25; 4]);
        let r = Strategy::report(vec![2, 0, 3, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((score_quadratic(&u, &r).unwrap() - 1.25).abs() < 1e-15);
        assert!((score_quadratic(&u, &u).unwrap() - 1.25).abs() < 1e-15);
        assert_eq!(score_quadratic(&Strategy::Abort, &u), Err(IncentiveError::AbortedStrategy));
    }

    #[test]
    fn payment_examples() {
        let p = params(0.5);
        let x = public(&[0.5, 0.5]);
        assert_eq!(payment(&Strategy::Abort, &x, &p, 0).unwrap(), (0.0, false));
        assert_eq!(utility(0.0, false, 0.0, &p), -p.d0);
        assert_eq!(payment_for_total(3.0, 0.5, p.d0), 9.0 * 0.5 + p.d0);
        assert_eq!(payment_for_total(0.0, 0.5, p.d0), p.d0);
        assert_eq!(utility(p.d0, true, 0.0, &p), -p.c2);
        let (pay, refunded) = payment(&x, &x, &p, 0).unwrap();
        assert!(refunded);
        // score_I = 0, score_P = 1 + 2/c - |v|^2 = 1.5
        assert!((pay - (0.5 * 2.5f64.powi(2) + p.d0)).abs() < 1e-12);
    }

    #[test]
    fn cost_and_utility() {
        let mut p = params(0.5);
        assert_eq!(cost(0.0, &p).unwrap(), p.c2);
        assert_eq!(cost(3.0, &p).unwrap(), 4.0);
        assert_eq!(cost(5.0, &p), Err(IncentiveError::OutOfRange(5.0)));
        p.d0 = 1.0;
        let pay = payment_for_total(3.0, 0.5, p.d0);
        assert!((utility(pay, true, 3.0, &p) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bne_constraint_examples() {
        let ok = check_bne_constraints(&params(0.5), 3.0).unwrap();
        assert!(ok.ok, "{:?}", ok.violated);
        let low = check_bne_constraints(&params(0.2), 3.0).unwrap();
        assert!(!low.ok);
        assert!(low.violated.iter().all(|v| v.constraint == BneConstraint::Participation));
        assert!((low.violated[0].bound - 4.0 / 9.0).abs() < 1e-12);
        let high = check_bne_constraints(&params(2.0), 3.0).unwrap();
        assert!(high.violated.iter().all(|v| v.constraint == BneConstraint::Budget));
        assert!((high.violated[0].bound - 100.0 / 90.0).abs() < 1e-12);
        assert!(high.violated[0].to_string().contains("constraint (3)"));
        assert!(check_bne_constraints(&params(0.5), 0.0).is_err());
    }

    #[test]
    fn strategy_cases_match_closed_forms() {
        let p = params(0.5);
        let cases = enumerate_strategy_cases(&p, 0);
        let want = [-p.c2, 9.0 * 0.5 - 3.0 * p.c1 - p.c2, -p.d0];
        for (c, w) in cases.iter().zip(want) {
            assert!((c.utility - w).abs() < 1e-12, "{:?}", c);
        }
    }

    #[test]
    fn params_validation() {
        assert!(params(0.5).validate().is_ok());
        let mut p = params(0.5);
        p.c1 = 60.0;
        p.c2 = 50.0;
        assert!(p.validate().is_err());
        let mut p = params(0.5);
        p.alpha.pop();
        assert!(p.validate().is_err());
        let mut p = params(0.5);
        p.theta = 0.0;
        assert!(p.validate().is_err());
    }

    fn task_fixture(m: usize) -> (Vec<Id>, Vec<Id>, MechanismParams) {
        let providers = (0..m).map(|i| id(&format!("p{i}"))).collect();
        let queries = (0..2).map(|j| id(&format!("q{j}"))).collect();
        let mut p = params(0.5);
        p.m_providers = m;
        p.alpha = vec![0.5; m];
        (providers, queries, p)
    }

    #[test]
    fn identical_truthful_reports_score_equally() {
        let (providers, queries, p) = task_fixture(3);
        let space = LabelSpace::numbered(4).unwrap();
        let v = encode_measurement(&[0.7, 0.1, 0.1, 0.1], &space).unwrap();
        let s = Strategy::from_prediction(&v);
        let strategies = vec![vec![s.clone(), s.clone()]; 3];
        let reports = score_task(&providers, &queries, &strategies, &p, 7).unwrap();
        assert_eq!(reports.len(), 6);
        // score_P = 1 + 2/c - |v|^2
        let sp = 1.0 + 0.5 - (0.49 + 3.0 * 0.01);
        for r in &reports {
            assert_eq!(r.score_i, 0.0);
            assert!((r.score_p - sp).abs() < 1e-12);
            assert!((r.total - (1.0 + sp)).abs() < 1e-12);
            assert!((0.0..=3.0).contains(&r.total));
            assert!((r.payment - (0.5 * r.total * r.total + p.d0)).abs() < 1e-12);
            assert_ne!(r.peer.as_ref(), Some(&r.provider));
        }
    }

    #[test]
    fn single_provider_has_no_peer() {
        let (providers, queries, p) = task_fixture(1);
        let s = public(&[0.5, 0.5]);
        let err = score_task(&providers, &queries, &[vec![s.clone(), s]], &p, 1);
        assert_eq!(err, Err(IncentiveError::NoPeer));
    }

    #[test]
    fn seeded_peers_are_reproducible_and_aborts_collapse() {
        let (providers, queries, p) = task_fixture(5);
        let s = public(&[0.6, 0.4]);
        let mut strategies = vec![vec![s.clone(), s.clone()]; 5];
        strategies[3] = vec![Strategy::Abort, Strategy::Abort];
        let a = score_task(&providers, &queries, &strategies, &p, 42).unwrap();
        let b = score_task(&providers, &queries, &strategies, &p, 42).unwrap();
        assert_eq!(a, b);
        let aborts: Vec<_> = a.iter().filter(|r| r.is_abort()).collect();
        assert_eq!(aborts.len(), 1);
        assert_eq!(aborts[0].provider.as_str(), "p3");
        assert!(!aborts[0].deposit_refunded && aborts[0].payment == 0.0);
        assert!(a.iter().all(|r| r.peer.as_ref().map(|x| x.as_str()) != Some("p3")));
        strategies[2][1] = Strategy::Abort;
        assert_eq!(
            score_task(&providers, &queries, &strategies, &p, 42),
            Err(IncentiveError::MixedAbort("p2".into()))
        );
    }

    #[test]
    fn rank_predictions_claim_their_order() {
        let r = PredictionVector::new(Format::Rank, vec![2.0, 4.0, 1.0, 3.0]).unwrap();
        match Strategy::from_prediction(&r) {
            Strategy::Report { order, probs } => {
                assert_eq!(order, vec![1, 3, 0, 2]);
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            Strategy::Abort => unreachable!(),
        }
    }

    /// Grid search over label permutations and distributions (step 0.1,
    /// c = 3) for the report that maximizes the total score against a fixed
    /// truthful peer.
    fn best_alternative(peer: &Strategy, theta: f64) -> (Vec<usize>, Vec<f64>, f64) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut best = (vec![], vec![], f64::NEG_INFINITY);
        for perm in perms {
            for a in 0..=10 {
                for b in 0..=(10 - a) {
                    let v = vec![a as f64 / 10.0, b as f64 / 10.0, (10 - a - b) as f64 / 10.0];
                    let s = Strategy::report(perm.to_vec(), v.clone()).unwrap();
                    let t = score_indicator(&s, peer, theta, DEFAULT_KL_FLOOR).unwrap()
                        + score_quadratic(&s, peer).unwrap()
                        + 1.0;
                    if t > best.2 + 1e-12 {
                        best = (perm.to_vec(), v, t);
                    }
                }
            }
        }
        best
    }

    #[test]
    #[ignore = "fails: the quadratic term rewards flatter reports that stay within the KL threshold"]
    fn truthful_report_maximizes_total_on_grid() {
        let peer = Strategy::report(vec![0, 1, 2], vec![0.8, 0.1, 0.1]).unwrap();
        let (order, probs, _) = best_alternative(&peer, DEFAULT_THETA);
        assert_eq!(order, vec![0, 1, 2]);
        assert_eq!(probs, vec![0.8, 0.1, 0.1]);
    }

    #[test]
    fn quadratic_term_ignores_peer_order() {
        // averaging over every k makes score_P = 1 + 2/c - |v_i|^2
        let v = [0.8, 0.1, 0.1];
        let me = public(&v);
        let a = Strategy::report(vec![0, 1, 2], vec![0.8, 0.1, 0.1]).unwrap();
        let b = Strategy::report(vec![2, 0, 1], vec![0.1, 0.1, 0.8]).unwrap();
        let want = 1.0 + 2.0 / 3.0 - v.iter().map(|x| x * x).sum::<f64>();
        assert!((score_quadratic(&me, &a).unwrap() - want).abs() < 1e-12);
        assert!((score_quadratic(&me, &b).unwrap() - want).abs() < 1e-12);
        // so a flatter report inside the threshold beats repeating the peer
        let (_, probs, best) = best_alternative(&a, DEFAULT_THETA);
        assert_ne!(probs, v.to_vec());
        assert!(best > 1.0 + want);
    }

    fn arb_dist() -> impl PropStrategy<Value = Vec<f64>> {
        (2usize..8).prop_flat_map(|c| {
            prop::collection::vec(0.0f64..1.0, c).prop_filter_map("zero mass", |v| {
                let s: f64 = v.iter().sum();
                (s > 1e-6).then(|| v.into_iter().map(|x| x / s).collect())
            })
        })
    }

    fn arb_pair() -> impl PropStrategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>, Vec<usize>)> {
        arb_dist().prop_flat_map(|p| {
            let c = p.len();
            (
                Just(p),
                prop::collection::vec(0.0f64..1.0, c).prop_map(|v| {
                    let s: f64 = v.iter().sum::<f64>() + 1e-9;
                    let mut out: Vec<f64> = v.into_iter().map(|x| x / s).collect();
                    let rest = 1.0 - out.iter().sum::<f64>();
                    out[0] += rest;
                    out
                }),
                Just((0..c).collect::<Vec<_>>()).prop_shuffle(),
                Just((0..c).collect::<Vec<_>>()).prop_shuffle(),
            )
        })
    }

    proptest! {
        #[test]
        fn scores_stay_in_range((p, q, oi, or) in arb_pair()) {
            let si = Strategy::report(oi, p).unwrap();
            let sr = Strategy::report(or, q).unwrap();
            let a = score_indicator(&si, &sr, DEFAULT_THETA, DEFAULT_KL_FLOOR).unwrap();
            let b = score_quadratic(&si, &sr).unwrap();
            prop_assert!(a == 0.0 || a == -1.0);
            prop_assert!((0.0..=2.0).contains(&b));
            prop_assert!((0.0..=3.0).contains(&(a + b + 1.0)));
        }

        #[test]
        fn kl_nonnegative_and_zero_on_identity(p in arb_dist()) {
            prop_assert_eq!(kl_divergence(&p, &p, DEFAULT_KL_FLOOR).unwrap(), 0.0);
            let mut q = p.clone();
            q.rotate_left(1);
            let d = kl_divergence(&p, &q, DEFAULT_KL_FLOOR).unwrap();
            prop_assert!(d >= 0.0);
            let pf = floored(&p, DEFAULT_KL_FLOOR);
            let qf = floored(&q, DEFAULT_KL_FLOOR);
            if pf.iter().zip(&qf).any(|(a, b)| (a - b).abs() > 1e-6) {
                prop_assert!(d > 0.0);
            }
        }

        #[test]
        fn budget_feasible_when_constraint_three_holds(
            m in 2usize..8, n in 1usize..50, budget in 10.0f64..1e4, frac in 0.01f64..1.0,
            totals in prop::collection::vec(0.0f64..=3.0, 8),
        ) {
            let cap = budget / (n as f64 * m as f64) / 9.0;
            let alpha = cap * frac;
            let p = MechanismParams {
                theta: 0.5, alpha: vec![alpha; m], c1: 0.1, c2: 0.1, d0: 1.0, budget,
                n_queries: n, m_providers: m, kl_floor: DEFAULT_KL_FLOOR,
            };
            prop_assert!(check_bne_constraints(&p, 3.0).unwrap().violated.iter()
                .all(|v| v.constraint != BneConstraint::Budget));
            let user_funded: f64 = totals[..m].iter()
                .map(|t| payment_for_total(*t, alpha, p.d0) - p.d0).sum();
            prop_assert!(user_funded <= budget / n as f64 * (1.0 + 1e-12));
        }

        #[test]
        fn truthful_utility_is_rational_and_dominant(c1 in 0.01f64..5.0, c2 in 0.01f64..5.0, d0 in 0.01f64..5.0, slack in 0.0f64..3.0) {
            let alpha = (3.0 * c1 + c2) / 9.0 + slack;
            let p = MechanismParams {
                theta: 0.5, alpha: vec![alpha], c1, c2, d0, budget: 1e9,
                n_queries: 1, m_providers: 1, kl_floor: DEFAULT_KL_FLOOR,
            };
            let check = check_bne_constraints(&p, 3.0).unwrap();
            prop_assert!(check.ok);
            let cases = enumerate_strategy_cases(&p, 0);
            prop_assert!(cases[1].utility >= -1e-12);
            prop_assert!(cases[1].utility > cases[0].utility);
            prop_assert!(cases[1].utility > cases[2].utility);
        }
    }
}
