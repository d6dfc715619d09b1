mod args;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Parser;
use fdgnn::data::random_samples;
use fdgnn::gcnn::{self, init_params, Activation, InitScheme, LayerSpec, ParamSet};
use fdgnn::graph::{build_shift, generate_ba, Graph, ShiftVariant};
use fdgnn::netsim::{ledger_report, simulate_costs, table_round_count, CommLedger, LedgerRow, Network, Strategy};
use fdgnn::optim::{OptimizerConfig, OptimizerKind};
use fdgnn::trainer::{comparison_methods, train_centralized, train_distributed, MetricsLog, RunConfig};
use fdgnn::Error;

use args::{Cli, Command, CompareArgs, CostArgs, GradcheckArgs, RunArgs};

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

enum Failure {
    Config(String),
    Numeric { step: usize, saved: Option<PathBuf> },
    Runtime(String),
}

impl Failure {
    fn report(&self) -> ExitCode {
        match self {
            Failure::Config(msg) => {
                eprintln!("fdgnn: configuration error: {msg}");
                ExitCode::from(EXIT_CONFIG)
            }
            Failure::Numeric { step, saved } => {
                eprintln!("fdgnn: non-finite values after update {step}, training aborted");
                if let Some(p) = saved {
                    eprintln!("fdgnn: last finite parameters written to {}", p.display());
                }
                ExitCode::from(EXIT_NUMERIC)
            }
            Failure::Runtime(msg) => {
                eprintln!("fdgnn: {msg}");
                ExitCode::from(EXIT_FAILED)
            }
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn config_error(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Costs(a) => cmd_costs(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(f) => f.report(),
    }
}

fn load_config(a: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    a.overrides.apply(&mut cfg).map_err(config_error)?;
    cfg.validate().map_err(config_error)?;
    if !cfg.optimizer.kind.is_central() {
        cfg.strategy.check_optimizer(cfg.optimizer.kind).map_err(config_error)?;
    }
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn training_failure(e: Error, out: &Path) -> Failure {
    match e {
        Error::NonFinite { step, last_good } => {
            let saved = last_good.and_then(|p| {
                let path = out.join("checkpoint_last_good.json");
                p.save(&path).ok().map(|_| path)
            });
            Failure::Numeric { step, saved }
        }
        Error::InvalidArgument(_) | Error::Parse(_) | Error::Disconnected | Error::GenerationFailed { .. } => {
            config_error(e)
        }
        other => runtime(other),
    }
}

fn cmd_train(a: &RunArgs) -> CliResult<ExitCode> {
    let cfg = load_config(a)?;
    prepare_out(&a.out)?;
    let resolved = serde_json::to_string_pretty(&cfg).map_err(runtime)?;
    fs::write(a.out.join("config.json"), resolved + "\n").map_err(runtime)?;

    let (params, log, ledger, strategy) = if cfg.optimizer.kind.is_central() {
        let run = train_centralized(&cfg).map_err(|e| training_failure(e, &a.out))?;
        (run.params, run.log, run.ledger, Strategy::FwdOnly)
    } else {
        let run = train_distributed(&cfg).map_err(|e| training_failure(e, &a.out))?;
        (run.theta_star, run.log, run.ledger, cfg.strategy)
    };

    log.write_csv(create(&a.out, "metrics.csv")?).map_err(runtime)?;
    let row = LedgerRow::new(
        strategy,
        cfg.model.depth(),
        cfg.batch,
        cfg.optimizer.k_rounds,
        &ledger,
    );
    ledger_report(&[row], create(&a.out, "ledger.csv")?).map_err(runtime)?;
    params.save(a.out.join("checkpoint.json")).map_err(runtime)?;

    if let Some(last) = log.last() {
        println!(
            "{} / {}: {} updates, {} rounds, train MSE {:.6}, test MSE {:.6}, consensus gap {:.3e}",
            cfg.optimizer.kind.name(),
            strategy,
            last.t,
            last.rounds,
            last.train_mse,
            last.test_mse,
            last.consensus_gap
        );
    }
    println!("wrote metrics.csv, ledger.csv, checkpoint.json to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("FDGNN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

fn cmd_compare(a: &CompareArgs) -> CliResult<ExitCode> {
    let mut base = load_config(&a.run)?;
    // Each method supplies its own pairing; the base strategy is not checked.
    base.strategy = Strategy::PiggybackDo;
    let methods: Vec<_> = comparison_methods()
        .into_iter()
        .filter(|m| a.methods.is_empty() || a.methods.iter().any(|s| s == m.label))
        .collect();
    if let Some(bad) = a.methods.iter().find(|s| !methods.iter().any(|m| m.label == s.as_str())) {
        return Err(config_error(format!("unknown method {bad:?}")));
    }
    prepare_out(&a.run.out)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<fdgnn::Result<MetricsLog>>>> = Mutex::new((0..methods.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..worker_count(methods.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(m) = methods.get(k) else { break };
                let r = m.run(&base);
                results.lock().expect("results lock")[k] = Some(r);
            });
        }
    });

    let mut w = csv::Writer::from_writer(create(&a.run.out, "compare.csv")?);
    w.write_record(["method", "t", "rounds", "train_mse", "test_mse", "consensus_gap"])
        .map_err(runtime)?;
    let mut failure = None;
    for (m, r) in methods.iter().zip(results.into_inner().expect("results lock")) {
        match r.expect("every method ran") {
            Ok(log) => {
                for rec in &log.records {
                    w.write_record([
                        m.label.to_string(),
                        rec.t.to_string(),
                        rec.rounds.to_string(),
                        format!("{:?}", rec.train_mse),
                        format!("{:?}", rec.test_mse),
                        format!("{:?}", rec.consensus_gap),
                    ])
                    .map_err(runtime)?;
                }
                let last = log.last().expect("initial record");
                println!(
                    "{:<18} rounds {:>9}  train MSE {:.6}  test MSE {:.6}",
                    m.label, last.rounds, last.train_mse, last.test_mse
                );
            }
            Err(e) => {
                eprintln!("{:<18} failed: {e}", m.label);
                failure.get_or_insert(training_failure(e, &a.run.out));
            }
        }
    }
    w.flush().map_err(runtime)?;
    println!("wrote compare.csv to {}", a.run.out.display());
    match failure {
        Some(f) => Err(f),
        None => Ok(ExitCode::SUCCESS),
    }
}

fn cmd_costs(a: &CostArgs) -> CliResult<ExitCode> {
    if a.layers == 0 || a.batch == 0 || a.k_rounds == 0 {
        return Err(config_error("L, B and K must be positive"));
    }
    let mut rows = Vec::new();
    let mut agree = true;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "L={} B={} K={}", a.layers, a.batch, a.k_rounds).map_err(runtime)?;
    writeln!(
        out,
        "{:<22}{:>10}{:>10}{:>12}{:>12}",
        "strategy", "formula", "measured", "broadcasts", "scalars"
    )
    .map_err(runtime)?;
    for s in Strategy::ALL {
        let formula = table_round_count(s, a.layers, a.batch, a.k_rounds);
        let ledger = simulate_costs(s, a.layers, a.batch, a.k_rounds, a.seed).map_err(runtime)?;
        agree &= formula == ledger.rounds;
        writeln!(
            out,
            "{:<22}{:>10}{:>10}{:>12}{:>12}",
            s.name(),
            formula,
            ledger.rounds,
            ledger.broadcasts,
            ledger.scalars
        )
        .map_err(runtime)?;
        rows.push((formula, LedgerRow::new(s, a.layers, a.batch, a.k_rounds, &ledger)));
    }
    if let Some(dir) = &a.out {
        prepare_out(dir)?;
        let mut w = csv::Writer::from_writer(create(dir, "costs.csv")?);
        w.write_record(["strategy", "L", "B", "K", "formula", "measured", "broadcasts", "scalars"])
            .map_err(runtime)?;
        for (formula, r) in &rows {
            w.write_record([
                r.strategy.name().to_string(),
                r.depth.to_string(),
                r.batch.to_string(),
                r.k_rounds.to_string(),
                formula.to_string(),
                r.rounds.to_string(),
                r.broadcasts.to_string(),
                r.scalars.to_string(),
            ])
            .map_err(runtime)?;
        }
        w.flush().map_err(runtime)?;
    }
    if agree {
        Ok(ExitCode::SUCCESS)
    } else {
        writeln!(out, "measured rounds differ from the closed form").map_err(runtime)?;
        Ok(ExitCode::from(EXIT_FAILED))
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<ExitCode> {
    let widths = match &a.widths {
        Some(w) if w.len() >= 2 && w.last() == Some(&1) && !w.contains(&0) => w.clone(),
        Some(_) => return Err(config_error("--widths needs g0,...,gL with positive entries ending in 1")),
        None if a.layers == 0 => return Err(config_error("--layers must be at least 1")),
        None => {
            let mut w = vec![3];
            w.extend(std::iter::repeat_n(4, a.layers - 1));
            w.push(1);
            w
        }
    };
    if a.n < 2 {
        return Err(config_error("--n must be at least 2"));
    }
    let graph: Graph = generate_ba(a.n, 2.min(a.n - 1), a.seed).map_err(config_error)?;
    let specs = LayerSpec::chain(&widths, Activation::leaky());
    let params: ParamSet = init_params(&specs, InitScheme::GlorotUniform, a.seed).map_err(runtime)?;
    let shift = build_shift(&graph, ShiftVariant::NormalizedAdjacency).map_err(runtime)?;
    let sample = random_samples(a.n, widths[0], 1, a.seed).remove(0);

    let mut net = Network::new(graph, ShiftVariant::NormalizedAdjacency, &params).map_err(runtime)?;
    let cfg = OptimizerConfig::new(OptimizerKind::DSgd, 0.0);
    net.run_minibatch(
        std::slice::from_ref(&sample),
        Strategy::PiggybackDo,
        Some(&cfg),
        0.0,
        &mut CommLedger::new(),
    )
    .map_err(runtime)?;
    let n = net.node_count() as f64;
    let mut averaged = vec![0.0; params.param_count()];
    for agent in net.agents() {
        for (s, g) in averaged.iter_mut().zip(agent.grad_accum()) {
            *s += g / n;
        }
    }
    let fd = gcnn::numerical_gradient(&params, &shift, &sample.features, &sample.labels, a.step).map_err(runtime)?;
    let err = gcnn::max_relative_error(&averaged, &fd, 1e-8);
    let pass = err <= a.tolerance;
    println!(
        "gradcheck n={} widths={:?} params={}: max relative error {err:.3e} (tolerance {:e}) {}",
        a.n,
        widths,
        averaged.len(),
        a.tolerance,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILED)
    })
}
