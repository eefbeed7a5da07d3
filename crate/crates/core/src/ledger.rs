//! Escrow ledger for prediction tasks.
//!
//! Money is held in integer micro-units. A task moves through
//! `Open -> Deposited -> Requested -> Settled`, or to `Refunded` when the
//! aggregation fails. Every successful transition is appended to a
//! hash-chained journal together with a digest of the resulting state, so a
//! journal can be replayed and checked independently.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::crypto::{sha256_hex, verify_tag};
use crate::incentive::ScoreReport;
use crate::id::Id;
use crate::journal::{read_chain, Chain, Closing, CorruptJournal};

pub type Micros = u64;

pub const MICROS_PER_UNIT: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("insufficient funds in account {0}")]
    InsufficientFunds(Id),
    #[error("task {task} is in phase {phase:?}, operation needs {expected}")]
    WrongPhase {
        task: Id,
        phase: Phase,
        expected: &'static str,
    },
    #[error("result authenticity tag does not verify")]
    BadAuthTag,
    #[error("user-funded payments {paid} exceed the per-query budget on query {query}")]
    BudgetExceeded { query: Id, paid: Micros },
    #[error("invalid settlement: {0}")]
    InvalidReports(String),
    #[error("invalid amount: {0}")]
    InvalidAmount(String),
    #[error("ledger journal is closed")]
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Open,
    Deposited,
    Requested,
    Settled,
    Refunded,
}

/// Escrow record of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Escrow {
    pub user: Id,
    pub phase: Phase,
    pub n_queries: u64,
    pub deposit_per_query: Micros,
    /// Budget still held in escrow.
    pub user_budget: Micros,
    /// Deposits still held in escrow.
    pub provider_deposits: BTreeMap<Id, Micros>,
    pub metadata: Option<String>,
    pub released_digest: Option<String>,
}

impl Escrow {
    fn held(&self) -> Micros {
        self.user_budget + self.provider_deposits.values().sum::<Micros>()
    }
}

/// A settlement request: the aggregator's scores, the digest of the sealed
/// result they belong to, and the aggregator's tag over both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settlement {
    pub reports: Vec<ScoreReport>,
    pub digest: String,
    pub tag: String,
}

/// What a committed settlement moved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payout {
    /// Credited to each provider, refunded deposit included.
    pub providers: BTreeMap<Id, Micros>,
    /// User-funded payments per provider.
    pub user_funded: BTreeMap<Id, Micros>,
    /// Sum of user-funded payments per query.
    pub per_query: BTreeMap<Id, Micros>,
    pub forfeited: Micros,
    pub returned_to_user: Micros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LedgerOp {
    Init {
        verify_key: String,
    },
    Mint {
        account: Id,
        amount: Micros,
    },
    Deposit {
        task: Id,
        user: Id,
        budget: Micros,
        providers: Vec<Id>,
        d0: Micros,
        n: u64,
    },
    Request {
        task: Id,
        metadata: String,
    },
    Settle {
        task: Id,
        settlement: Settlement,
    },
    Refund {
        task: Id,
    },
    Close,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub op: LedgerOp,
    pub state: String,
}

impl Closing for JournalEntry {
    fn is_close(&self) -> bool {
        matches!(self.op, LedgerOp::Close)
    }
}

pub fn to_micros(amount: f64) -> Result<Micros, LedgerError> {
    if !(amount.is_finite() && amount >= 0.0) || amount * MICROS_PER_UNIT as f64 >= u64::MAX as f64 {
        return Err(LedgerError::InvalidAmount(format!("{amount}")));
    }
    Ok((amount * MICROS_PER_UNIT as f64).round_ties_even() as Micros)
}

/// Floors `amount` to micro-units, tolerating a few ulps of rounding below
/// an exact boundary.
pub fn floor_micros(amount: f64) -> Result<Micros, LedgerError> {
    if !(amount.is_finite() && amount >= 0.0) || amount * MICROS_PER_UNIT as f64 >= u64::MAX as f64 {
        return Err(LedgerError::InvalidAmount(format!("{amount}")));
    }
    Ok((amount * MICROS_PER_UNIT as f64 * (1.0 + 4.0 * f64::EPSILON)).floor() as Micros)
}

pub fn from_micros(m: Micros) -> f64 {
    m as f64 / MICROS_PER_UNIT as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct State<'a> {
    balances: &'a BTreeMap<Id, Micros>,
    tasks: &'a BTreeMap<Id, Escrow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    verify_key: Vec<u8>,
    balances: BTreeMap<Id, Micros>,
    tasks: BTreeMap<Id, Escrow>,
    journal: Chain<JournalEntry>,
    closed: bool,
}

impl Ledger {
    /// `verify_key` checks the aggregator's tag on settlements.
    pub fn new(verify_key: &[u8]) -> Self {
        let mut l = Ledger {
            verify_key: verify_key.to_vec(),
            balances: BTreeMap::new(),
            tasks: BTreeMap::new(),
            journal: Chain::new(),
            closed: false,
        };
        l.record(LedgerOp::Init {
            verify_key: hex::encode(verify_key),
        });
        l
    }

    fn record(&mut self, op: LedgerOp) {
        let state = self.state_digest();
        self.journal.append(JournalEntry { op, state });
    }

    fn ensure_open(&self) -> Result<(), LedgerError> {
        if self.closed {
            Err(LedgerError::Closed)
        } else {
            Ok(())
        }
    }

    pub fn verify_key(&self) -> &[u8] {
        &self.verify_key
    }

    pub fn balance(&self, account: &Id) -> Micros {
        self.balances.get(account).copied().unwrap_or(0)
    }

    pub fn balances(&self) -> &BTreeMap<Id, Micros> {
        &self.balances
    }

    pub fn escrow(&self, task: &Id) -> Option<&Escrow> {
        self.tasks.get(task)
    }

    pub fn phase(&self, task: &Id) -> Phase {
        self.tasks.get(task).map(|e| e.phase).unwrap_or(Phase::Open)
    }

    pub fn released_digest(&self, task: &Id) -> Option<&str> {
        self.tasks.get(task).and_then(|e| e.released_digest.as_deref())
    }

    pub fn total_escrow(&self) -> Micros {
        self.tasks.values().map(Escrow::held).sum()
    }

    /// Sum of all balances and all escrowed money.
    pub fn total_money(&self) -> u128 {
        self.balances.values().map(|&b| b as u128).sum::<u128>() + self.total_escrow() as u128
    }

    pub fn state_digest(&self) -> String {
        let s = State {
            balances: &self.balances,
            tasks: &self.tasks,
        };
        sha256_hex(serde_json::to_string(&s).expect("state serializes").as_bytes())
    }

    pub fn journal(&self) -> &Chain<JournalEntry> {
        &self.journal
    }

    pub fn journal_jsonl(&self) -> String {
        self.journal.to_jsonl()
    }

    /// External funding, used only to set up accounts.
    pub fn mint(&mut self, account: &Id, amount: Micros) -> Result<(), LedgerError> {
        self.ensure_open()?;
        let b = self.balance(account);
        let nb = b
            .checked_add(amount)
            .ok_or_else(|| LedgerError::InvalidAmount("balance overflow".into()))?;
        self.balances.insert(account.clone(), nb);
        self.record(LedgerOp::Mint {
            account: account.clone(),
            amount,
        });
        Ok(())
    }

    fn wrong_phase(&self, task: &Id, expected: &'static str) -> LedgerError {
        LedgerError::WrongPhase {
            task: task.clone(),
            phase: self.phase(task),
            expected,
        }
    }

    /// Moves the user's budget and `n * d0` from every provider into escrow.
    pub fn deposit(
        &mut self,
        task: &Id,
        user: &Id,
        budget: Micros,
        providers: &[Id],
        d0: Micros,
        n: u64,
    ) -> Result<(), LedgerError> {
        self.ensure_open()?;
        if self.phase(task) != Phase::Open {
            return Err(self.wrong_phase(task, "Open"));
        }
        if n == 0 {
            return Err(LedgerError::InvalidAmount("n must be positive".into()));
        }
        let mut sorted = providers.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != providers.len() || providers.contains(user) {
            return Err(LedgerError::InvalidReports(
                "providers must be distinct and differ from the user".into(),
            ));
        }
        let per_provider = d0
            .checked_mul(n)
            .ok_or_else(|| LedgerError::InvalidAmount("deposit overflow".into()))?;
        if self.balance(user) < budget {
            return Err(LedgerError::InsufficientFunds(user.clone()));
        }
        if let Some(p) = providers.iter().find(|p| self.balance(p) < per_provider) {
            return Err(LedgerError::InsufficientFunds(p.clone()));
        }
        *self.balances.get_mut(user).expect("checked balance") -= budget;
        let mut deposits = BTreeMap::new();
        for p in providers {
            if per_provider > 0 {
                *self.balances.get_mut(p).expect("checked balance") -= per_provider;
            }
            deposits.insert(p.clone(), per_provider);
        }
        self.tasks.insert(
            task.clone(),
            Escrow {
                user: user.clone(),
                phase: Phase::Deposited,
                n_queries: n,
                deposit_per_query: d0,
                user_budget: budget,
                provider_deposits: deposits,
                metadata: None,
                released_digest: None,
            },
        );
        self.record(LedgerOp::Deposit {
            task: task.clone(),
            user: user.clone(),
            budget,
            providers: providers.to_vec(),
            d0,
            n,
        });
        Ok(())
    }

    /// Binds the task description hash the result must answer.
    pub fn request(&mut self, task: &Id, metadata: &str) -> Result<(), LedgerError> {
        self.ensure_open()?;
        if self.phase(task) != Phase::Deposited {
            return Err(self.wrong_phase(task, "Deposited"));
        }
        let e = self.tasks.get_mut(task).expect("deposited task exists");
        e.phase = Phase::Requested;
        e.metadata = Some(metadata.to_string());
        self.record(LedgerOp::Request {
            task: task.clone(),
            metadata: metadata.to_string(),
        });
        Ok(())
    }

    /// Computes the payout without touching state.
    pub fn plan_settlement(&self, task: &Id, s: &Settlement) -> Result<Payout, LedgerError> {
        if self.phase(task) != Phase::Requested {
            return Err(self.wrong_phase(task, "Requested"));
        }
        if !verify_tag(&self.verify_key, &canonical::result(task.as_str(), &s.digest, &s.reports), &s.tag) {
            return Err(LedgerError::BadAuthTag);
        }
        let e = &self.tasks[task];
        let d0 = from_micros(e.deposit_per_query);
        let mut counts: BTreeMap<&Id, (u64, u64)> = BTreeMap::new();
        let mut user_funded: BTreeMap<Id, Micros> = BTreeMap::new();
        let mut per_query: BTreeMap<Id, Micros> = BTreeMap::new();
        for r in &s.reports {
            if !e.provider_deposits.contains_key(&r.provider) {
                return Err(LedgerError::InvalidReports(format!("unknown provider {}", r.provider)));
            }
            let c = counts.entry(&r.provider).or_default();
            match &r.query {
                None => {
                    if r.deposit_refunded || r.payment != 0.0 {
                        return Err(LedgerError::InvalidReports(format!(
                            "abort report of {} carries a payment",
                            r.provider
                        )));
                    }
                    c.1 += 1;
                }
                Some(q) => {
                    if !r.deposit_refunded {
                        return Err(LedgerError::InvalidReports(format!(
                            "report of {} on {q} forfeits without aborting",
                            r.provider
                        )));
                    }
                    c.0 += 1;
                    let paid = floor_micros((r.payment - d0).max(0.0))?;
                    *user_funded.entry(r.provider.clone()).or_default() += paid;
                    *per_query.entry(q.clone()).or_default() += paid;
                }
            }
        }
        for p in e.provider_deposits.keys() {
            match counts.get(p).copied().unwrap_or((0, 0)) {
                (n, 0) if n == e.n_queries => {}
                (0, 1) => {}
                _ => {
                    return Err(LedgerError::InvalidReports(format!(
                        "provider {p} needs either {} query reports or one abort report",
                        e.n_queries
                    )))
                }
            }
        }
        if per_query.len() as u64 > e.n_queries {
            return Err(LedgerError::InvalidReports("more queries than requested".into()));
        }
        for (q, paid) in &per_query {
            if (*paid as u128) * (e.n_queries as u128) > e.user_budget as u128 {
                return Err(LedgerError::BudgetExceeded {
                    query: q.clone(),
                    paid: *paid,
                });
            }
        }
        let spent: Micros = user_funded.values().sum();
        let mut providers = BTreeMap::new();
        let mut forfeited = 0;
        for (p, dep) in &e.provider_deposits {
            if counts.get(p).is_some_and(|c| c.1 == 1) {
                forfeited += dep;
                providers.insert(p.clone(), 0);
            } else {
                providers.insert(p.clone(), dep + user_funded.get(p).copied().unwrap_or(0));
            }
        }
        Ok(Payout {
            providers,
            user_funded,
            per_query,
            forfeited,
            returned_to_user: e.user_budget - spent + forfeited,
        })
    }

    /// Pays providers, forfeits aborted deposits to the user, returns the
    /// unspent budget and marks the result digest released, all in one step.
    pub fn settle(&mut self, task: &Id, s: &Settlement) -> Result<Payout, LedgerError> {
        self.ensure_open()?;
        let payout = self.plan_settlement(task, s)?;
        let user = self.tasks[task].user.clone();
        for (p, amount) in &payout.providers {
            *self.balances.entry(p.clone()).or_default() += amount;
        }
        *self.balances.entry(user).or_default() += payout.returned_to_user;
        let e = self.tasks.get_mut(task).expect("requested task exists");
        e.user_budget = 0;
        e.provider_deposits.values_mut().for_each(|d| *d = 0);
        e.released_digest = Some(s.digest.clone());
        e.phase = Phase::Settled;
        self.record(LedgerOp::Settle {
            task: task.clone(),
            settlement: s.clone(),
        });
        Ok(payout)
    }

    /// Returns every escrowed amount to its owner.
    pub fn refund(&mut self, task: &Id) -> Result<(), LedgerError> {
        self.ensure_open()?;
        if !matches!(self.phase(task), Phase::Deposited | Phase::Requested) {
            return Err(self.wrong_phase(task, "Deposited or Requested"));
        }
        let e = self.tasks.get_mut(task).expect("escrowed task exists");
        let mut moves = vec![(e.user.clone(), std::mem::take(&mut e.user_budget))];
        for (p, d) in e.provider_deposits.iter_mut() {
            moves.push((p.clone(), std::mem::take(d)));
        }
        e.phase = Phase::Refunded;
        for (account, amount) in moves {
            *self.balances.entry(account).or_default() += amount;
        }
        self.record(LedgerOp::Refund { task: task.clone() });
        Ok(())
    }

    /// Appends the closing record; no further operations are accepted.
    pub fn close(&mut self) -> Result<(), LedgerError> {
        self.ensure_open()?;
        self.record(LedgerOp::Close);
        self.closed = true;
        Ok(())
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn apply(&mut self, op: &LedgerOp) -> Result<(), LedgerError> {
        match op {
            LedgerOp::Init { .. } => Err(LedgerError::InvalidReports("init must come first".into())),
            LedgerOp::Mint { account, amount } => self.mint(account, *amount),
            LedgerOp::Deposit {
                task,
                user,
                budget,
                providers,
                d0,
                n,
            } => self.deposit(task, user, *budget, providers, *d0, *n),
            LedgerOp::Request { task, metadata } => self.request(task, metadata),
            LedgerOp::Settle { task, settlement } => self.settle(task, settlement).map(|_| ()),
            LedgerOp::Refund { task } => self.refund(task),
            LedgerOp::Close => self.close(),
        }
    }
}

/// Re-executes a journal from scratch, checking every recorded state
/// digest. Returns the rebuilt ledger.
pub fn replay_journal(text: &str) -> Result<Ledger, CorruptJournal> {
    let entries: Vec<JournalEntry> = read_chain(text)?;
    let corrupt = |index: usize, reason: String| CorruptJournal { index, reason };
    let mut ledger = match entries.first().map(|e| &e.op) {
        Some(LedgerOp::Init { verify_key }) => {
            let key = hex::decode(verify_key).map_err(|e| corrupt(0, format!("bad key: {e}")))?;
            Ledger::new(&key)
        }
        _ => return Err(corrupt(0, "journal must start with init".into())),
    };
    if ledger.journal.records()[0].body.state != entries[0].state {
        return Err(corrupt(0, "state digest mismatch".into()));
    }
    for (i, entry) in entries.iter().enumerate().skip(1) {
        ledger
            .apply(&entry.op)
            .map_err(|e| corrupt(i, format!("operation failed on replay: {e}")))?;
        if ledger.state_digest() != entry.state {
            return Err(corrupt(i, "state digest mismatch".into()));
        }
    }
    Ok(ledger)
}
