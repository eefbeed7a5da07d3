//! `predpool`: run simulations, check the incentive constraints, audit
//! journals and serve or feed the wire endpoint.
//!
//! Exit codes: 0 on success / PASS / OK, 1 when a check fails, 2 on
//! configuration or usage errors.

use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Arg, ArgMatches, Command};
use predpool_core::experiment::{
    aggregator_key, fund_and_request, provider_key, replay, scenario, simulate, task_id, task_spec, top1_accuracy,
    verify_bne, ConfigError, ExperimentConfig, ExperimentError, FormatChoice, CONFIG_KEYS,
};
use predpool_core::journal::Chain;
use predpool_core::ledger::{replay_journal, Ledger};
use predpool_core::net::{run_collection, submit_over_tcp};
use predpool_core::providers_sim::provider_predictions;
use predpool_core::serving::{open_task, release, ServingError, TranscriptEntry};
use predpool_core::wire::{encode, Message, ResultMsg};
use predpool_core::Id;

#[derive(Debug)]
enum Failure {
    /// Bad configuration or usage; exit 2.
    Config(String),
    /// A run or check failed; exit 1.
    Check(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Check(e.to_string())
    }
}

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn config_args(seed_required: bool) -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(clap::value_parser!(PathBuf))
        .help("key = value config file; flags override it")];
    for key in CONFIG_KEYS {
        let mut a = Arg::new(key).long(flag(key)).value_name("VALUE");
        if key.contains('_') {
            a = a.alias(key);
        }
        if key == "seed" && seed_required {
            a = a.required(true);
        }
        args.push(a);
    }
    args
}

fn cli() -> Command {
    Command::new("predpool")
        .about("Federated prediction serving: simulation, verification and wire endpoint")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("simulate")
                .about("Run the end-to-end simulation and print the accuracy table as CSV")
                .args(config_args(true)),
        )
        .subcommand(
            Command::new("verify-bne")
                .about("Check the equilibrium constraints and strategy utilities")
                .args(config_args(false)),
        )
        .subcommand(
            Command::new("replay")
                .about("Re-execute a ledger journal and an aggregation transcript")
                .arg(Arg::new("journal").required(true).value_parser(clap::value_parser!(PathBuf)))
                .arg(Arg::new("transcript").required(true).value_parser(clap::value_parser!(PathBuf))),
        )
        .subcommand(
            Command::new("verify-ledger")
                .about("Re-execute a ledger journal alone")
                .arg(Arg::new("journal").required(true).value_parser(clap::value_parser!(PathBuf))),
        )
        .subcommand(
            Command::new("serve")
                .about("Open one task and collect submissions over TCP")
                .args(config_args(false)),
        )
        .subcommand(
            Command::new("provider")
                .about("Submit one simulated provider's predictions to a running server")
                .args(config_args(false)),
        )
}

fn load_config(m: &ArgMatches) -> Result<ExperimentConfig, Failure> {
    let overrides: Vec<(String, String)> = CONFIG_KEYS
        .iter()
        .filter_map(|k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    let path = m.get_one::<PathBuf>("config");
    Ok(ExperimentConfig::load(path.map(PathBuf::as_path), &overrides)?)
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))
}

fn single_format(cfg: &ExperimentConfig, cmd: &str) -> Result<predpool_core::Format, Failure> {
    match cfg.format {
        FormatChoice::One(f) => Ok(f),
        FormatChoice::All => Err(Failure::Config(format!("{cmd} needs a single --format"))),
    }
}

fn cmd_simulate(m: &ArgMatches) -> Result<(), Failure> {
    let cfg = load_config(m)?;
    let out = simulate(&cfg)?;
    if let Some(dir) = &cfg.output_dir {
        out.write_to(dir)?;
    }
    print!("{}", out.accuracy_csv);
    eprintln!("transcript {} journal {}", out.transcript_digest(), out.journal_digest());
    Ok(())
}

fn cmd_verify_bne(m: &ArgMatches) -> Result<(), Failure> {
    let cfg = load_config(m)?;
    cfg.validate()?;
    let report = verify_bne(&cfg);
    for line in &report.lines {
        println!("{line}");
    }
    if report.ok {
        Ok(())
    } else {
        Err(Failure::Check("equilibrium check failed".into()))
    }
}

fn cmd_replay(m: &ArgMatches) -> Result<(), Failure> {
    let journal = read(m.get_one::<PathBuf>("journal").expect("required"))?;
    let transcript = read(m.get_one::<PathBuf>("transcript").expect("required"))?;
    match replay(&journal, &transcript) {
        Ok(r) => {
            println!(
                "OK tasks={} submissions={} accounts={} state={}",
                r.tasks,
                r.submissions,
                r.balances.len(),
                r.state_digest
            );
            Ok(())
        }
        Err(e) => {
            println!(
                "CorruptJournal in {} at record {}: {}",
                e.artifact, e.source.index, e.source.reason
            );
            Err(Failure::Check("replay diverged".into()))
        }
    }
}

fn cmd_verify_ledger(m: &ArgMatches) -> Result<(), Failure> {
    let journal = read(m.get_one::<PathBuf>("journal").expect("required"))?;
    match replay_journal(&journal) {
        Ok(l) => {
            println!("OK records={} state={}", l.journal().len(), l.state_digest());
            Ok(())
        }
        Err(e) => {
            println!("CorruptJournal in journal at record {}: {}", e.index, e.reason);
            Err(Failure::Check("replay diverged".into()))
        }
    }
}

fn cmd_serve(m: &ArgMatches) -> Result<(), Failure> {
    let cfg = load_config(m)?;
    cfg.validate()?;
    let format = single_format(&cfg, "serve")?;
    let sc = scenario(&cfg)?;
    let agg = aggregator_key(&cfg);
    let mut ledger = Ledger::new(&agg);
    fund_and_request(&cfg, &mut ledger, &sc.profiles)?;
    let spec = task_spec(&cfg, format);
    let keys: Vec<(Id, Vec<u8>)> = sc
        .profiles
        .iter()
        .map(|p| (p.id.clone(), provider_key(&cfg, &p.id)))
        .collect();
    let session = open_task(spec.clone(), keys, &agg, &cfg.user_token, &ledger).map_err(ExperimentError::from)?;

    let listener = TcpListener::bind((cfg.host.as_str(), cfg.port))?;
    println!("LISTENING {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    let shared = Arc::new(Mutex::new(session));
    run_collection(&listener, Arc::clone(&shared), Duration::from_millis(cfg.tick_ms))?;
    let mut session = shared.lock().expect("session lock");

    let mut transcript = Chain::new();
    let finalized = session.finalize();
    for e in session.transcript() {
        transcript.append(e.clone());
    }
    let outcome = match finalized {
        Ok(f) => {
            ledger.settle(&spec.task_id, &f.result.settlement()).map_err(ExperimentError::from)?;
            let released = release(&f.result, &cfg.user_token, &ledger).map_err(ExperimentError::from)?;
            let truths: Vec<Vec<f64>> = released.aggregates.into_iter().map(|a| a.values).collect();
            println!("{}", encode(&Message::Result(ResultMsg::from_sealed(&f.result))));
            let aborted: Vec<&str> = f.aborted.iter().map(Id::as_str).collect();
            println!(
                "SETTLED task={} submitters={} aborted=[{}] td_accuracy={:.6}",
                spec.task_id,
                f.submitters.len(),
                aborted.join(","),
                top1_accuracy(&sc.truth.labels, &truths)
            );
            Ok(())
        }
        Err(ServingError::TooFewSubmitters(k)) => {
            ledger.refund(&spec.task_id).map_err(ExperimentError::from)?;
            println!("FAILED task={} submitters={k} escrow refunded", spec.task_id);
            Err(Failure::Check("too few submitters".into()))
        }
        Err(e) => return Err(ExperimentError::from(e).into()),
    };
    ledger.close().map_err(ExperimentError::from)?;
    transcript.append(TranscriptEntry::Close);
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("journal.jsonl"), ledger.journal_jsonl())?;
        std::fs::write(dir.join("transcript.jsonl"), transcript.to_jsonl())?;
    }
    outcome
}

fn cmd_provider(m: &ArgMatches) -> Result<(), Failure> {
    let cfg = load_config(m)?;
    cfg.validate()?;
    let format = single_format(&cfg, "provider")?;
    let name = cfg
        .provider
        .clone()
        .ok_or_else(|| Failure::Config("provider needs --provider".into()))?;
    let sc = scenario(&cfg)?;
    let profile = sc
        .profiles
        .iter()
        .find(|p| p.id.as_str() == name)
        .ok_or_else(|| Failure::Config(format!("no provider {name:?} in this population")))?;
    let Some(preds) = provider_predictions(profile, &sc.truth, cfg.c, format, cfg.concentration) else {
        println!("ABORT {name}");
        return Ok(());
    };
    let key = provider_key(&cfg, &profile.id);
    let ack = submit_over_tcp((cfg.host.as_str(), cfg.port), &task_id(format), &profile.id, &key, &preds)?;
    println!("{}", encode(&Message::Ack(ack.clone())));
    if ack.accepted {
        Ok(())
    } else {
        Err(Failure::Check(format!("submission rejected: {}", ack.reason)))
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = match name {
        "simulate" => cmd_simulate(sub),
        "verify-bne" => cmd_verify_bne(sub),
        "replay" => cmd_replay(sub),
        "verify-ledger" => cmd_verify_ledger(sub),
        "serve" => cmd_serve(sub),
        "provider" => cmd_provider(sub),
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
    }
}
