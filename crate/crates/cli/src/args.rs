use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fdgnn::gcnn::{Activation, InitScheme};
use fdgnn::trainer::{GraphKind, RunConfig, TopologyMode};
use fdgnn::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "fdgnn", version, about = "Fully distributed GCNN training over simulated message passing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration; writes metrics.csv, ledger.csv and checkpoint.json.
    Train(RunArgs),
    /// Run the seven comparison methods on one shared dataset; writes compare.csv.
    Compare(CompareArgs),
    /// Per-mini-batch round counts: closed form against a simulated run.
    Costs(CostArgs),
    /// Averaged local gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "fdgnn-out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated subset of method labels.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// ba, er or file
    #[arg(long)]
    pub graph: Option<String>,
    #[arg(long)]
    pub graph_file: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    /// Number of GCNN layers L.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden widths, one value (repeated) or L-1 comma-separated values.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub shift: Option<String>,
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long = "K", alias = "k")]
    pub k_rounds: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub mix_second_moment: Option<bool>,
    #[arg(long)]
    pub noise_var: Option<f64>,
    /// Training samples N.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub test_samples: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// fixed or redraw-per-batch
    #[arg(long)]
    pub topology: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long = "K", alias = "k", default_value_t = 1)]
    pub k_rounds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for costs.csv; the table is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Full width list g0,...,gL (overrides --layers).
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn unknown(what: &str, value: &str) -> Error {
    Error::Parse(format!("unknown {what} {value:?}"))
}

fn graph_kind(value: &str) -> Result<GraphKind> {
    serde_json::from_value(serde_json::Value::from(value)).map_err(|_| unknown("graph kind", value))
}

fn topology(value: &str) -> Result<TopologyMode> {
    serde_json::from_value(serde_json::Value::from(value)).map_err(|_| unknown("topology mode", value))
}

fn init_scheme(value: &str) -> Result<InitScheme> {
    serde_json::from_value(serde_json::Value::from(value)).map_err(|_| unknown("init scheme", value))
}

fn activation(value: &str) -> Result<Activation> {
    match value {
        "leaky-relu" | "leaky" => Ok(Activation::leaky()),
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        "identity" => Ok(Activation::Identity),
        _ => Err(unknown("activation", value)),
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = &self.graph {
            cfg.graph.kind = graph_kind(v)?;
        }
        if let Some(v) = &self.graph_file {
            cfg.graph.file = Some(v.clone());
            if self.graph.is_none() {
                cfg.graph.kind = GraphKind::File;
            }
        }
        set(&mut cfg.graph.n, self.n);
        set(&mut cfg.graph.m, self.m);
        set(&mut cfg.graph.p, self.p);
        match (self.layers, &self.hidden) {
            (Some(0), _) => return Err(Error::InvalidArgument("--layers must be at least 1".into())),
            (Some(l), Some(h)) if h.len() == 1 => cfg.model.hidden = vec![h[0]; l - 1],
            (Some(l), Some(h)) if h.len() == l - 1 => cfg.model.hidden = h.clone(),
            (Some(l), Some(h)) => {
                return Err(Error::InvalidArgument(format!(
                    "{} hidden widths given for {l} layers",
                    h.len()
                )))
            }
            (Some(l), None) => {
                let w = cfg.model.hidden.first().copied().unwrap_or(8);
                cfg.model.hidden = vec![w; l - 1];
            }
            (None, Some(h)) => cfg.model.hidden = h.clone(),
            (None, None) => {}
        }
        if let Some(v) = &self.activation {
            cfg.model.activation = activation(v)?;
        }
        if let Some(v) = &self.shift {
            cfg.model.shift = v.parse()?;
        }
        if let Some(v) = &self.init {
            cfg.model.init = init_scheme(v)?;
        }
        if let Some(v) = &self.optimizer {
            cfg.optimizer.kind = v.parse()?;
        }
        if let Some(v) = &self.strategy {
            cfg.strategy = v.parse()?;
        }
        set(&mut cfg.batch, self.batch);
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.optimizer.alpha, self.lr);
        set(&mut cfg.optimizer.decay, self.lr_decay);
        set(&mut cfg.optimizer.k_rounds, self.k_rounds);
        set(&mut cfg.optimizer.beta1, self.beta1);
        set(&mut cfg.optimizer.beta2, self.beta2);
        set(&mut cfg.optimizer.epsilon, self.epsilon);
        set(&mut cfg.optimizer.mix_second_moment, self.mix_second_moment);
        set(&mut cfg.dataset.noise_var, self.noise_var);
        set(&mut cfg.dataset.n_samples, self.samples);
        set(&mut cfg.test_samples, self.test_samples);
        set(&mut cfg.eval_every, self.eval_every);
        if let Some(v) = &self.topology {
            cfg.topology = topology(v)?;
        }
        set(&mut cfg.seed, self.seed);
        Ok(())
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
