//! Training loops: the distributed protocol driven through the round
//! scheduler, and the centralized baseline. Both report MSE of the model
//! against the cumulative number of message-passing rounds.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetSpec, Sample, SampleSource};
use crate::error::{Error, Result};
use crate::gcnn::{self, Activation, InitScheme, LayerSpec, ParamSet};
use crate::graph::{build_shift, generate_ba, generate_er, Graph, ShiftOperator, ShiftVariant};
use crate::netsim::{CommLedger, Network, Strategy};
use crate::optim::{central_update, NodeState, OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphKind {
    Ba,
    Er,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub kind: GraphKind,
    pub n: usize,
    /// Edges per new node (Barabási–Albert).
    pub m: usize,
    /// Edge probability (Erdős–Rényi).
    pub p: f64,
    pub file: Option<PathBuf>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            kind: GraphKind::Ba,
            n: 30,
            m: 2,
            p: 0.2,
            file: None,
        }
    }
}

impl GraphConfig {
    pub fn build(&self, seed: u64) -> Result<Graph> {
        let g = match self.kind {
            GraphKind::Ba => generate_ba(self.n, self.m, seed)?,
            GraphKind::Er => generate_er(self.n, self.p, seed)?,
            GraphKind::File => {
                let path = self
                    .file
                    .as_ref()
                    .ok_or_else(|| Error::invalid("graph kind `file` needs a graph file"))?;
                Graph::load(path)?
            }
        };
        g.ensure_connected()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden widths; the model has `hidden.len() + 1` layers.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub shift: ShiftVariant,
    pub init: InitScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![8],
            activation: Activation::leaky(),
            shift: ShiftVariant::NormalizedAdjacency,
            init: InitScheme::GlorotUniform,
        }
    }
}

impl ModelConfig {
    pub fn specs(&self, input_width: usize) -> Vec<LayerSpec> {
        let mut widths = vec![input_width];
        widths.extend(&self.hidden);
        widths.push(1);
        LayerSpec::chain(&widths, self.activation)
    }

    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyMode {
    #[default]
    Fixed,
    /// A fresh graph per mini-batch with samples drawn online for it.
    RedrawPerBatch,
}

/// Everything a run depends on. `seed` drives every random draw; the
/// dataset's own seed field is replaced by one derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub graph: GraphConfig,
    /// `n_samples` is the training-set size.
    pub dataset: DatasetSpec,
    pub test_samples: usize,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub strategy: Strategy,
    pub batch: usize,
    pub epochs: usize,
    /// Mini-batches between evaluations.
    pub eval_every: usize,
    pub seed: u64,
    pub topology: TopologyMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            graph: GraphConfig::default(),
            dataset: DatasetSpec {
                n_samples: 300,
                ..DatasetSpec::default()
            },
            test_samples: 100,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::new(OptimizerKind::DSgd, 1e-3),
            strategy: Strategy::PiggybackDo,
            batch: 30,
            epochs: 300,
            eval_every: 10,
            seed: 0,
            topology: TopologyMode::Fixed,
        }
    }
}

const STREAM_GRAPH: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_TOPOLOGY: u64 = 5;

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch == 0 || self.eval_every == 0 {
            return Err(Error::invalid("batch size and eval cadence must be positive"));
        }
        if self.dataset.n_samples < self.batch {
            return Err(Error::invalid(format!(
                "{} training samples cannot fill a batch of {}",
                self.dataset.n_samples, self.batch
            )));
        }
        if self.test_samples == 0 {
            return Err(Error::invalid("need at least one test sample"));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if self.topology == TopologyMode::RedrawPerBatch && self.graph.kind == GraphKind::File {
            return Err(Error::invalid("a graph file cannot be redrawn per batch"));
        }
        self.dataset.validate()
    }

    /// Mini-batches per epoch; a trailing partial batch is dropped.
    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.n_samples / self.batch
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch()
    }
}

/// Graph, data and initial parameters shared by every method run from the
/// same configuration.
#[derive(Debug, Clone)]
pub struct Setup {
    pub graph: Graph,
    pub shift: ShiftOperator,
    pub dataset_spec: DatasetSpec,
    pub teacher: ParamSet,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub init: ParamSet,
}

pub fn prepare(cfg: &RunConfig) -> Result<Setup> {
    cfg.validate()?;
    let graph = cfg.graph.build(derive_seed(cfg.seed, STREAM_GRAPH))?;
    let n_train = cfg.dataset.n_samples;
    let spec = DatasetSpec {
        n_samples: n_train + cfg.test_samples,
        seed: derive_seed(cfg.seed, STREAM_DATA),
        ..cfg.dataset.clone()
    };
    let ds = data::make_dataset(&graph, &spec)?;
    let fraction = n_train as f64 / spec.n_samples as f64;
    let (train, test) = data::train_test_split(&ds.samples, fraction, spec.seed)?;
    let specs = cfg.model.specs(spec.feature_width());
    let init = gcnn::init_params(&specs, cfg.model.init, derive_seed(cfg.seed, STREAM_INIT))?;
    let shift = build_shift(&graph, cfg.model.shift)?;
    Ok(Setup {
        graph,
        shift,
        dataset_spec: spec,
        teacher: ds.teacher,
        train,
        test,
        init,
    })
}

/// Mean per-sample MSE of `params` over `samples`.
pub fn evaluate(params: &ParamSet, shift: &ShiftOperator, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let (yhat, _) = gcnn::forward(params, shift, &s.features)?;
        total += gcnn::mse_loss(&s.labels, yhat.as_slice())?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Updates applied so far.
    pub t: usize,
    pub rounds: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    pub consensus_gap: f64,
    pub broadcasts: usize,
    pub scalars: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    /// CSV `t,rounds,train_mse,test_mse,consensus_gap`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "rounds", "train_mse", "test_mse", "consensus_gap"])?;
        for r in &self.records {
            w.write_record([
                r.t.to_string(),
                r.rounds.to_string(),
                format!("{:?}", r.train_mse),
                format!("{:?}", r.test_mse),
                format!("{:?}", r.consensus_gap),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DistributedRun {
    pub node_states: Vec<NodeState>,
    /// Node-average parameters `θ* = (1/n) Σᵢ θⁱ`.
    pub theta_star: ParamSet,
    pub log: MetricsLog,
    pub ledger: CommLedger,
}

#[derive(Debug, Clone)]
pub struct CentralRun {
    pub params: ParamSet,
    pub log: MetricsLog,
    pub ledger: CommLedger,
}

fn epoch_orders(cfg: &RunConfig) -> impl FnMut() -> Vec<usize> {
    let n = cfg.dataset.n_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE));
    move || {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn record(
    t: usize,
    ledger: &CommLedger,
    params: &ParamSet,
    setup: &Setup,
    consensus_gap: f64,
    last_good: &ParamSet,
) -> Result<MetricsRecord> {
    let train_mse = evaluate(params, &setup.shift, &setup.train)?;
    let test_mse = evaluate(params, &setup.shift, &setup.test)?;
    if !(train_mse.is_finite() && test_mse.is_finite()) {
        return Err(Error::NonFinite {
            step: t,
            last_good: Some(Box::new(last_good.clone())),
        });
    }
    Ok(MetricsRecord {
        t,
        rounds: ledger.rounds,
        train_mse,
        test_mse,
        consensus_gap,
        broadcasts: ledger.broadcasts,
        scalars: ledger.scalars,
    })
}

pub fn train_distributed(cfg: &RunConfig) -> Result<DistributedRun> {
    train_distributed_observed(cfg, |_, _| {})
}

/// Runs the distributed protocol; `observe(t, network)` is called after every
/// update `t ≥ 1`.
pub fn train_distributed_observed(
    cfg: &RunConfig,
    mut observe: impl FnMut(usize, &Network),
) -> Result<DistributedRun> {
    let setup = prepare(cfg)?;
    if cfg.optimizer.kind.is_central() {
        return Err(Error::invalid(format!(
            "{} is a centralized optimizer",
            cfg.optimizer.kind.name()
        )));
    }
    cfg.strategy.check_optimizer(cfg.optimizer.kind)?;
    if !cfg.strategy.trains() {
        return Err(Error::invalid("fwd-only does not train"));
    }
    let specs = setup.init.specs().to_vec();
    let mut net = Network::new(setup.graph.clone(), cfg.model.shift, &setup.init)?;
    let mut ledger = CommLedger::new();
    let mut log = MetricsLog::default();
    let mut theta_bar = setup.init.clone();
    let mut last_good = theta_bar.clone();
    log.records.push(record(0, &ledger, &theta_bar, &setup, 0.0, &last_good)?);

    let mut next_order = epoch_orders(cfg);
    let mut topo_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_TOPOLOGY));
    let total = cfg.total_steps();
    let mut t = 0;
    for _ in 0..cfg.epochs {
        let order = next_order();
        for chunk in order.chunks_exact(cfg.batch) {
            let batch: Vec<Sample> = match cfg.topology {
                TopologyMode::Fixed => chunk.iter().map(|&k| setup.train[k].clone()).collect(),
                TopologyMode::RedrawPerBatch => {
                    let g = cfg.graph.build(topo_rng.next_u64())?;
                    let source = SampleSource::new(&setup.dataset_spec, setup.teacher.clone(), &g)?;
                    net.set_topology(g)?;
                    (0..cfg.batch)
                        .map(|_| source.draw(&mut topo_rng))
                        .collect::<Result<_>>()?
                }
            };
            let alpha = cfg.optimizer.learning_rate(t);
            net.run_minibatch(&batch, cfg.strategy, Some(&cfg.optimizer), alpha, &mut ledger)?;
            t += 1;
            let mean = net.mean_theta();
            if !all_finite(&mean) {
                return Err(Error::NonFinite {
                    step: t,
                    last_good: Some(Box::new(last_good)),
                });
            }
            theta_bar = ParamSet::unflatten(&specs, &mean)?;
            observe(t, &net);
            if t % cfg.eval_every == 0 || t == total {
                log.records
                    .push(record(t, &ledger, &theta_bar, &setup, net.consensus_gap(), &last_good)?);
            }
            last_good = theta_bar.clone();
        }
    }
    Ok(DistributedRun {
        node_states: net.node_states(),
        theta_star: theta_bar,
        log,
        ledger,
    })
}

/// Centralized mini-batch training on the sum of per-sample MSE gradients.
/// Each mini-batch is charged `L·B` rounds, the cost of distributed
/// inference.
pub fn train_centralized(cfg: &RunConfig) -> Result<CentralRun> {
    let setup = prepare(cfg)?;
    if !cfg.optimizer.kind.is_central() {
        return Err(Error::invalid(format!(
            "{} is not a centralized optimizer",
            cfg.optimizer.kind.name()
        )));
    }
    let specs = setup.init.specs().to_vec();
    let depth = specs.len();
    let mut state = NodeState::new(setup.init.flatten());
    let mut params = setup.init.clone();
    let mut ledger = CommLedger::new();
    let mut log = MetricsLog::default();
    let mut last_good = params.clone();
    log.records.push(record(0, &ledger, &params, &setup, 0.0, &last_good)?);

    let mut next_order = epoch_orders(cfg);
    let total = cfg.total_steps();
    let mut t = 0;
    for _ in 0..cfg.epochs {
        let order = next_order();
        for chunk in order.chunks_exact(cfg.batch) {
            let mut grad = vec![0.0; state.theta.len()];
            for &k in chunk {
                let s = &setup.train[k];
                let g = gcnn::central_gradient(&params, &setup.shift, &s.features, &s.labels)?;
                for (a, v) in grad.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            central_update(&cfg.optimizer, cfg.optimizer.learning_rate(t), &mut state, &grad)?;
            ledger.charge_rounds(depth * cfg.batch);
            t += 1;
            if !all_finite(&state.theta) {
                return Err(Error::NonFinite {
                    step: t,
                    last_good: Some(Box::new(last_good)),
                });
            }
            params.assign_flat(&state.theta)?;
            if t % cfg.eval_every == 0 || t == total {
                log.records.push(record(t, &ledger, &params, &setup, 0.0, &last_good)?);
            }
            last_good = params.clone();
        }
    }
    Ok(CentralRun { params, log, ledger })
}

/// One labelled method of the comparison suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Method {
    pub label: &'static str,
    pub kind: OptimizerKind,
    pub strategy: Strategy,
}

/// The seven compared methods: two centralized baselines, naive gradient
/// consensus with and without piggybacking, and the three parameter-mixing
/// optimizers.
pub fn comparison_methods() -> Vec<Method> {
    let m = |label, kind, strategy| Method { label, kind, strategy };
    vec![
        m("central-sgd", OptimizerKind::CentralSgd, Strategy::FwdOnly),
        m("central-adam", OptimizerKind::CentralAdam, Strategy::FwdOnly),
        m("d-naive", OptimizerKind::DNaive, Strategy::PerBatchConsensus),
        m("d-naive-piggyback", OptimizerKind::DNaive, Strategy::PiggybackConsensus),
        m("d-sgd", OptimizerKind::DSgd, Strategy::PiggybackDo),
        m("d-adam", OptimizerKind::DAdam, Strategy::PiggybackDo),
        m("d-amsgrad", OptimizerKind::DAmsgrad, Strategy::PiggybackDo),
    ]
}

impl Method {
    pub fn configure(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.optimizer.kind = self.kind;
        if !self.kind.is_central() {
            cfg.strategy = self.strategy;
        }
        cfg
    }

    pub fn run(&self, base: &RunConfig) -> Result<MetricsLog> {
        let cfg = self.configure(base);
        if self.kind.is_central() {
            Ok(train_centralized(&cfg)?.log)
        } else {
            Ok(train_distributed(&cfg)?.log)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: OptimizerKind, strategy: Strategy) -> RunConfig {
        RunConfig {
            graph: GraphConfig {
                n: 8,
                ..GraphConfig::default()
            },
            dataset: DatasetSpec {
                n_samples: 12,
                ..DatasetSpec::default()
            },
            test_samples: 4,
            optimizer: OptimizerConfig::new(kind, 1e-3),
            strategy,
            batch: 4,
            epochs: 2,
            eval_every: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn one_batch_one_sample_two_layers_is_three_rounds() {
        let cfg = RunConfig {
            dataset: DatasetSpec {
                n_samples: 1,
                ..DatasetSpec::default()
            },
            batch: 1,
            epochs: 1,
            ..tiny(OptimizerKind::DSgd, Strategy::PiggybackDo)
        };
        let run = train_distributed(&cfg).unwrap();
        assert_eq!(run.ledger.rounds, 3);
        assert_eq!(run.log.records.len(), 2);
    }

    #[test]
    fn rounds_strictly_increase_and_runs_repeat() {
        let cfg = tiny(OptimizerKind::DAmsgrad, Strategy::PiggybackDo);
        let a = train_distributed(&cfg).unwrap();
        let b = train_distributed(&cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert!(a.log.records.windows(2).all(|w| w[0].rounds < w[1].rounds));
        assert_eq!(a.log.records.len(), 1 + cfg.total_steps());
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let mut cfg = tiny(OptimizerKind::CentralSgd, Strategy::FwdOnly);
        cfg.optimizer.alpha = 0.0;
        let run = train_centralized(&cfg).unwrap();
        let first = run.log.records[0].train_mse;
        assert!(run.log.records.iter().all(|r| r.train_mse == first));
        assert_eq!(run.ledger.rounds, 2 * 4 * cfg.total_steps());
    }

    #[test]
    fn centralized_runs_repeat() {
        let cfg = tiny(OptimizerKind::CentralAdam, Strategy::FwdOnly);
        assert_eq!(train_centralized(&cfg).unwrap().log, train_centralized(&cfg).unwrap().log);
    }

    #[test]
    fn mismatched_optimizer_rejected() {
        assert!(train_distributed(&tiny(OptimizerKind::DSgd, Strategy::PerBatchConsensus)).is_err());
        assert!(train_distributed(&tiny(OptimizerKind::CentralSgd, Strategy::PiggybackDo)).is_err());
        assert!(train_centralized(&tiny(OptimizerKind::DSgd, Strategy::PiggybackDo)).is_err());
    }

    #[test]
    fn divergence_aborts_with_checkpoint() {
        let mut cfg = tiny(OptimizerKind::DSgd, Strategy::PiggybackDo);
        cfg.optimizer.alpha = 1e200;
        match train_distributed(&cfg) {
            Err(Error::NonFinite { step, last_good }) => {
                assert!(step >= 1);
                assert!(all_finite(&last_good.unwrap().flatten()));
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn redraw_mode_changes_graph_and_trains() {
        let mut cfg = tiny(OptimizerKind::DNaive, Strategy::PiggybackConsensus);
        cfg.topology = TopologyMode::RedrawPerBatch;
        let run = train_distributed(&cfg).unwrap();
        assert_eq!(run.log.records.len(), 1 + cfg.total_steps());
        assert!(run.log.records.iter().all(|r| r.train_mse.is_finite()));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"batchsize": 3}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"batch": 3, "optimizer": {"kind": "d-adam"}}"#).unwrap();
        assert_eq!(cfg.batch, 3);
        assert_eq!(cfg.optimizer.kind, OptimizerKind::DAdam);
    }

    #[test]
    fn metrics_csv_header() {
        let run = train_distributed(&tiny(OptimizerKind::DSgd, Strategy::PiggybackDo)).unwrap();
        let mut out = Vec::new();
        run.log.write_csv(&mut out).unwrap();
        assert!(String::from_utf8(out)
            .unwrap()
            .starts_with("t,rounds,train_mse,test_mse,consensus_gap\n0,0,"));
    }
}
