//! Synchronous round scheduler. A [`RoundPlan`] lists, per round, which
//! quantities every node broadcasts; [`Network::execute`] runs the plan over
//! the agents and charges each round to a [`CommLedger`].

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentState, ConsensusScope, Message, Payload};
use crate::data::{random_samples, Sample};
use crate::error::{check_dim, Error, Result};
use crate::gcnn::{init_params, Activation, InitScheme, LayerSpec, ParamSet};
use crate::graph::{build_shift, metropolis_weights, ConsensusWeights, Graph, ShiftOperator, ShiftVariant};
use crate::optim::{NodeState, OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Inference only.
    FwdOnly,
    /// Forward, backward and `K` gradient-consensus rounds for every sample.
    NaivePerSample,
    /// Sequential forward/backward per sample, then `K` consensus rounds on
    /// the summed gradient.
    PerBatchConsensus,
    /// Pipelined forward/backward, then `K` consensus rounds.
    PiggybackConsensus,
    /// Pipelined forward/backward with parameter consensus chunked into the
    /// forward rounds.
    PiggybackDo,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::FwdOnly,
        Strategy::NaivePerSample,
        Strategy::PerBatchConsensus,
        Strategy::PiggybackConsensus,
        Strategy::PiggybackDo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FwdOnly => "fwd-only",
            Strategy::NaivePerSample => "naive-per-sample",
            Strategy::PerBatchConsensus => "per-batch-consensus",
            Strategy::PiggybackConsensus => "piggyback-consensus",
            Strategy::PiggybackDo => "piggyback-do",
        }
    }

    pub fn trains(self) -> bool {
        self != Strategy::FwdOnly
    }

    /// Runs `K` rounds of gradient consensus.
    pub fn uses_gradient_consensus(self) -> bool {
        matches!(
            self,
            Strategy::NaivePerSample | Strategy::PerBatchConsensus | Strategy::PiggybackConsensus
        )
    }

    pub fn pipelined(self) -> bool {
        matches!(self, Strategy::PiggybackConsensus | Strategy::PiggybackDo)
    }

    /// Checks that `kind` can be driven by this strategy.
    pub fn check_optimizer(self, kind: OptimizerKind) -> Result<()> {
        let ok = match self {
            Strategy::FwdOnly => true,
            Strategy::PiggybackDo => kind.mixes_parameters(),
            _ => kind == OptimizerKind::DNaive,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "optimizer {} cannot run with strategy {}",
                kind.name(),
                self.name()
            )))
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}")))
    }
}

/// Mini-batch round count in closed form.
pub fn table_round_count(strategy: Strategy, depth: usize, batch: usize, k: usize) -> usize {
    let (l, b) = (depth, batch);
    match strategy {
        Strategy::FwdOnly => l * b,
        Strategy::NaivePerSample => b * (2 * l - 1) + b * k,
        Strategy::PerBatchConsensus => 2 * b * l - b + k,
        Strategy::PiggybackConsensus => l * b + l - 1 + k,
        Strategy::PiggybackDo => l * b + l - 1,
    }
}

/// One quantity broadcast by every node in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transfer {
    Degree,
    /// `X^level` rows of `sample`.
    Forward { sample: usize, level: usize },
    /// `Θ₁ˡ Qˡ` of `sample` for `layer`.
    Backward { sample: usize, layer: usize },
    GradConsensus { scope: ConsensusScope, iteration: usize },
    /// Chunk `index` of `count` of the parameter consensus vector.
    ParamChunk { index: usize, count: usize },
}

impl Transfer {
    fn matches(&self, p: &Payload) -> bool {
        match (*self, p) {
            (Transfer::Degree, Payload::Degree(_)) => true,
            (Transfer::Forward { sample, level }, Payload::FwdFeature { sample: s, level: l, .. }) => {
                sample == *s && level == *l
            }
            (Transfer::Backward { sample, layer }, Payload::BwdAdjoint { sample: s, layer: l, .. }) => {
                sample == *s && layer == *l
            }
            (
                Transfer::GradConsensus { scope, iteration },
                Payload::GradientIterate {
                    scope: s, iteration: k, ..
                },
            ) => scope == *s && iteration == *k,
            (Transfer::ParamChunk { .. }, Payload::ConsensusChunk { .. }) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Round {
    pub transfers: Vec<Transfer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    pub strategy: Strategy,
    pub depth: usize,
    pub batch: usize,
    pub k_rounds: usize,
    pub rounds: Vec<Round>,
}

pub fn build_round_plan(depth: usize, batch: usize, k_rounds: usize, strategy: Strategy) -> Result<RoundPlan> {
    if depth == 0 || batch == 0 {
        return Err(Error::invalid(format!("need L >= 1 and B >= 1, got L={depth}, B={batch}")));
    }
    if strategy.uses_gradient_consensus() && k_rounds == 0 {
        return Err(Error::invalid(format!("strategy {strategy} needs K >= 1")));
    }
    let l = depth;
    let mut rounds: Vec<Round> = Vec::new();
    let single = |t: Transfer| Round { transfers: vec![t] };
    let backward_rounds = |b: usize, rounds: &mut Vec<Round>| {
        for layer in (2..=l).rev() {
            rounds.push(single(Transfer::Backward { sample: b, layer }));
        }
    };
    let consensus_rounds = |scope: ConsensusScope, rounds: &mut Vec<Round>| {
        for iteration in 1..=k_rounds {
            rounds.push(single(Transfer::GradConsensus { scope, iteration }));
        }
    };
    match strategy {
        Strategy::FwdOnly | Strategy::NaivePerSample | Strategy::PerBatchConsensus => {
            for b in 0..batch {
                for level in 0..l {
                    rounds.push(single(Transfer::Forward { sample: b, level }));
                }
                if strategy.trains() {
                    backward_rounds(b, &mut rounds);
                }
                if strategy == Strategy::NaivePerSample {
                    consensus_rounds(ConsensusScope::Sample(b), &mut rounds);
                }
            }
            if strategy == Strategy::PerBatchConsensus {
                consensus_rounds(ConsensusScope::Batch, &mut rounds);
            }
        }
        Strategy::PiggybackConsensus | Strategy::PiggybackDo => {
            let count = l * batch;
            for b in 0..batch {
                for level in 0..l {
                    let mut round = single(Transfer::Forward { sample: b, level });
                    if b >= 1 && level + 2 <= l {
                        round.transfers.push(Transfer::Backward {
                            sample: b - 1,
                            layer: l - level,
                        });
                    }
                    if strategy == Strategy::PiggybackDo {
                        round.transfers.push(Transfer::ParamChunk {
                            index: b * l + level,
                            count,
                        });
                    }
                    rounds.push(round);
                }
            }
            backward_rounds(batch - 1, &mut rounds);
            if strategy == Strategy::PiggybackConsensus {
                consensus_rounds(ConsensusScope::Batch, &mut rounds);
            }
        }
    }
    if strategy.trains() {
        rounds[0].transfers.insert(0, Transfer::Degree);
    }
    Ok(RoundPlan {
        strategy,
        depth,
        batch,
        k_rounds,
        rounds,
    })
}

impl RoundPlan {
    pub fn round_count(&self) -> usize {
        self.rounds.len()
    }

    /// Transfer whose processing makes the gradient of `sample` final.
    fn completion(&self, sample: usize) -> Transfer {
        if self.depth == 1 {
            Transfer::Forward { sample, level: 0 }
        } else {
            Transfer::Backward { sample, layer: 2 }
        }
    }

    /// Transfers that must have been processed in a strictly earlier round
    /// before `t` can be broadcast.
    fn prerequisites(&self, t: Transfer) -> Vec<Transfer> {
        let l = self.depth;
        match t {
            Transfer::Degree | Transfer::ParamChunk { .. } => Vec::new(),
            Transfer::Forward { level: 0, .. } => Vec::new(),
            Transfer::Forward { sample, level } => vec![Transfer::Forward { sample, level: level - 1 }],
            Transfer::Backward { sample, layer } if layer == l => {
                vec![Transfer::Forward { sample, level: l - 1 }]
            }
            Transfer::Backward { sample, layer } => vec![Transfer::Backward { sample, layer: layer + 1 }],
            Transfer::GradConsensus { scope, iteration } if iteration > 1 => {
                vec![Transfer::GradConsensus {
                    scope,
                    iteration: iteration - 1,
                }]
            }
            Transfer::GradConsensus {
                scope: ConsensusScope::Sample(b),
                ..
            } => vec![self.completion(b)],
            Transfer::GradConsensus { .. } => (0..self.batch).map(|b| self.completion(b)).collect(),
        }
    }

    fn in_range(&self, t: Transfer) -> bool {
        let (l, b_n, k) = (self.depth, self.batch, self.k_rounds);
        match t {
            Transfer::Degree => true,
            Transfer::Forward { sample, level } => sample < b_n && level < l,
            Transfer::Backward { sample, layer } => sample < b_n && (2..=l).contains(&layer),
            Transfer::GradConsensus { scope, iteration } => {
                (1..=k).contains(&iteration)
                    && match scope {
                        ConsensusScope::Sample(b) => b < b_n,
                        ConsensusScope::Batch => true,
                    }
            }
            Transfer::ParamChunk { index, count } => count == l * b_n && index < count,
        }
    }

    /// Every transfer the strategy requires, each exactly once.
    fn required(&self) -> Vec<Transfer> {
        let (l, b_n) = (self.depth, self.batch);
        let s = self.strategy;
        let mut out = Vec::new();
        for sample in 0..b_n {
            out.extend((0..l).map(|level| Transfer::Forward { sample, level }));
            if s.trains() {
                out.extend((2..=l).map(|layer| Transfer::Backward { sample, layer }));
            }
            if s == Strategy::NaivePerSample {
                out.extend((1..=self.k_rounds).map(|iteration| Transfer::GradConsensus {
                    scope: ConsensusScope::Sample(sample),
                    iteration,
                }));
            }
        }
        if matches!(s, Strategy::PerBatchConsensus | Strategy::PiggybackConsensus) {
            out.extend((1..=self.k_rounds).map(|iteration| Transfer::GradConsensus {
                scope: ConsensusScope::Batch,
                iteration,
            }));
        }
        if s == Strategy::PiggybackDo {
            out.extend((0..l * b_n).map(|index| Transfer::ParamChunk { index, count: l * b_n }));
        }
        if s.trains() {
            out.push(Transfer::Degree);
        }
        out
    }

    /// Structural audit: nothing is broadcast before it exists, mixing never
    /// precedes the degree exchange, and every required transfer happens
    /// exactly once.
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.batch == 0 {
            return Err(Error::invalid("plan needs L >= 1 and B >= 1"));
        }
        if self.strategy.uses_gradient_consensus() && self.k_rounds == 0 {
            return Err(Error::invalid(format!("strategy {} needs K >= 1", self.strategy)));
        }
        let mut done: HashMap<Transfer, usize> = HashMap::new();
        let mut degree_round = None;
        for (r, round) in self.rounds.iter().enumerate() {
            if round.transfers.is_empty() {
                return Err(Error::Causality {
                    round: r,
                    reason: "empty round".into(),
                });
            }
            for &t in &round.transfers {
                if !self.in_range(t) {
                    return Err(Error::Causality {
                        round: r,
                        reason: format!("{t:?} outside the batch shape"),
                    });
                }
                for p in self.prerequisites(t) {
                    match done.get(&p) {
                        Some(&rp) if rp < r => {}
                        _ => {
                            return Err(Error::Causality {
                                round: r,
                                reason: format!("{t:?} broadcast before {p:?} was processed"),
                            })
                        }
                    }
                }
                if matches!(t, Transfer::GradConsensus { .. }) && degree_round.is_none() {
                    return Err(Error::Causality {
                        round: r,
                        reason: "consensus before degree exchange".into(),
                    });
                }
                if t == Transfer::Degree {
                    degree_round = Some(r);
                }
                if done.insert(t, r).is_some() {
                    return Err(Error::Causality {
                        round: r,
                        reason: format!("{t:?} repeated"),
                    });
                }
            }
        }
        let required = self.required();
        let last = self.rounds.len().saturating_sub(1);
        for t in &required {
            if !done.contains_key(t) {
                return Err(Error::Causality {
                    round: last,
                    reason: format!("{t:?} never scheduled"),
                });
            }
        }
        if done.len() != required.len() {
            let extra = done.keys().find(|t| !required.contains(t)).expect("extra transfer");
            return Err(Error::Causality {
                round: done[extra],
                reason: format!("{extra:?} not used by strategy {}", self.strategy),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RoundTrace {
    pub broadcasts: usize,
    pub scalars: usize,
    /// Largest single broadcast of the round, in scalars.
    pub max_message: usize,
}

/// Communication counters. Scalars are counted, not bytes; a degree is one
/// scalar.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub rounds: usize,
    pub broadcasts: usize,
    pub scalars: usize,
    pub trace: Option<Vec<RoundTrace>>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_trace() -> Self {
        CommLedger {
            trace: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn record_round(&mut self, messages: &[Message]) {
        let mut t = RoundTrace {
            broadcasts: 0,
            scalars: 0,
            max_message: 0,
        };
        for m in messages {
            let size = m.scalar_count();
            if size > 0 {
                t.broadcasts += 1;
                t.scalars += size;
                t.max_message = t.max_message.max(size);
            }
        }
        self.rounds += 1;
        self.broadcasts += t.broadcasts;
        self.scalars += t.scalars;
        if let Some(trace) = &mut self.trace {
            trace.push(t);
        }
    }

    /// Charges `rounds` rounds without messages (used by the centralized
    /// baseline's round axis).
    pub fn charge_rounds(&mut self, rounds: usize) {
        self.rounds += rounds;
    }

    pub fn write_trace_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "broadcasts", "scalars", "max_message"])?;
        for (r, t) in self.trace.iter().flatten().enumerate() {
            w.write_record([
                r.to_string(),
                t.broadcasts.to_string(),
                t.scalars.to_string(),
                t.max_message.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub strategy: Strategy,
    #[serde(rename = "L")]
    pub depth: usize,
    #[serde(rename = "B")]
    pub batch: usize,
    #[serde(rename = "K")]
    pub k_rounds: usize,
    pub rounds: usize,
    pub broadcasts: usize,
    pub scalars: usize,
}

impl LedgerRow {
    pub fn new(strategy: Strategy, depth: usize, batch: usize, k_rounds: usize, ledger: &CommLedger) -> Self {
        LedgerRow {
            strategy,
            depth,
            batch,
            k_rounds,
            rounds: ledger.rounds,
            broadcasts: ledger.broadcasts,
            scalars: ledger.scalars,
        }
    }
}

/// CSV `strategy,L,B,K,rounds,broadcasts,scalars`.
pub fn ledger_report(rows: &[LedgerRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["strategy", "L", "B", "K", "rounds", "broadcasts", "scalars"])?;
    }
    w.flush()?;
    Ok(())
}

/// All agents of one graph plus the global view used for instrumentation.
#[derive(Debug, Clone)]
pub struct Network {
    graph: Graph,
    shift: ShiftOperator,
    weights: ConsensusWeights,
    agents: Vec<AgentState>,
}

impl Network {
    /// Every node starts from the same parameters.
    pub fn new(graph: Graph, variant: ShiftVariant, params: &ParamSet) -> Result<Self> {
        let shift = build_shift(&graph, variant)?;
        let weights = metropolis_weights(&graph)?;
        let agents = (0..graph.node_count())
            .map(|i| AgentState::from_graph(i, &graph, &shift, params.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            graph,
            shift,
            weights,
            agents,
        })
    }

    /// Swaps in a new graph on the same node set; each node keeps its
    /// parameters and moments.
    pub fn set_topology(&mut self, graph: Graph) -> Result<()> {
        check_dim("node count", self.graph.node_count(), graph.node_count())?;
        let shift = build_shift(&graph, self.shift.variant)?;
        let weights = metropolis_weights(&graph)?;
        for (i, a) in self.agents.iter_mut().enumerate() {
            let (nbrs, s_self, row) = crate::agent::local_view(i, &graph, &shift);
            a.set_topology(nbrs, s_self, row)?;
        }
        self.graph = graph;
        self.shift = shift;
        self.weights = weights;
        Ok(())
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shift(&self) -> &ShiftOperator {
        &self.shift
    }

    pub fn weights(&self) -> &ConsensusWeights {
        &self.weights
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn node_count(&self) -> usize {
        self.agents.len()
    }

    pub fn node_states(&self) -> Vec<NodeState> {
        self.agents.iter().map(|a| a.node_state().clone()).collect()
    }

    pub fn set_node_states(&mut self, states: Vec<NodeState>) -> Result<()> {
        check_dim("node states", self.agents.len(), states.len())?;
        for (a, s) in self.agents.iter_mut().zip(states) {
            a.set_node_state(s)?;
        }
        Ok(())
    }

    /// `θ̄ = (1/n) Σᵢ θⁱ`, summed in node order.
    pub fn mean_theta(&self) -> Vec<f64> {
        let n = self.agents.len() as f64;
        let mut mean = vec![0.0; self.agents[0].theta().len()];
        for a in &self.agents {
            for (m, t) in mean.iter_mut().zip(a.theta()) {
                *m += t;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// `maxᵢ ‖θⁱ − θ̄‖₂`.
    pub fn consensus_gap(&self) -> f64 {
        let mean = self.mean_theta();
        self.agents
            .iter()
            .map(|a| {
                a.theta()
                    .iter()
                    .zip(&mean)
                    .map(|(t, m)| (t - m) * (t - m))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Node predictions for `sample` of the last executed plan.
    pub fn predictions(&self, sample: usize) -> Option<Vec<f64>> {
        self.agents.iter().map(|a| a.prediction(sample)).collect()
    }

    /// Builds the strategy's plan and executes it. `cfg` is required for
    /// training strategies; `K` comes from `cfg.k_rounds`.
    pub fn run_minibatch(
        &mut self,
        samples: &[Sample],
        strategy: Strategy,
        cfg: Option<&OptimizerConfig>,
        alpha_t: f64,
        ledger: &mut CommLedger,
    ) -> Result<()> {
        let k = cfg.map_or(0, |c| c.k_rounds);
        let plan = build_round_plan(self.agents[0].params().depth(), samples.len(), k, strategy)?;
        self.execute(&plan, samples, cfg, alpha_t, ledger)
    }

    /// Runs `plan` round by round. Each round is an emit phase (every node
    /// assembles one broadcast), a ledger charge, and a process phase (every
    /// node consumes its neighbors' payloads in ascending sender order).
    /// After the last round the optimizer update is applied.
    pub fn execute(
        &mut self,
        plan: &RoundPlan,
        samples: &[Sample],
        cfg: Option<&OptimizerConfig>,
        alpha_t: f64,
        ledger: &mut CommLedger,
    ) -> Result<()> {
        plan.validate()?;
        let n = self.agents.len();
        let depth = self.agents[0].params().depth();
        check_dim("plan depth", depth, plan.depth)?;
        check_dim("batch size", plan.batch, samples.len())?;
        let width = self.agents[0].params().input_width();
        for s in samples {
            check_dim("sample nodes", n, s.features.nrows())?;
            check_dim("sample labels", n, s.labels.len())?;
            check_dim("sample feature width", width, s.features.ncols())?;
        }
        let cfg = match (plan.strategy.trains(), cfg) {
            (false, _) => None,
            (true, Some(c)) => {
                c.validate()?;
                plan.strategy.check_optimizer(c.kind)?;
                Some(c)
            }
            (true, None) => return Err(Error::invalid(format!("strategy {} needs an optimizer", plan.strategy))),
        };
        let mixing = cfg.filter(|c| c.kind.mixes_parameters());
        for a in &mut self.agents {
            a.begin_batch(mixing);
            for (b, s) in samples.iter().enumerate() {
                let row: Vec<f64> = s.features.row(a.node_id()).iter().copied().collect();
                a.begin_sample(b, &row, s.labels[a.node_id()])?;
            }
        }
        for round in &plan.rounds {
            let messages = self.emit(round, ledger.rounds)?;
            ledger.record_round(&messages);
            self.process(plan, round, &messages)?;
        }
        match cfg {
            Some(c) if c.kind.mixes_parameters() => {
                for a in &mut self.agents {
                    a.apply_mixing_update(c, alpha_t)?;
                }
            }
            Some(_) => {
                for a in &mut self.agents {
                    a.apply_naive_update(alpha_t)?;
                }
            }
            None => {}
        }
        Ok(())
    }

    fn emit(&mut self, round: &Round, round_index: usize) -> Result<Vec<Message>> {
        self.agents
            .iter_mut()
            .map(|a| {
                let mut payloads = Vec::with_capacity(round.transfers.len());
                for &t in &round.transfers {
                    let p = match t {
                        Transfer::Degree => Payload::Degree(a.degree()),
                        Transfer::Forward { sample, level } => Payload::FwdFeature {
                            sample,
                            level,
                            values: a.forward_features(sample, level)?.to_vec(),
                        },
                        Transfer::Backward { sample, layer } => Payload::BwdAdjoint {
                            sample,
                            layer,
                            values: a.outgoing_adjoint(sample, layer)?.to_vec(),
                        },
                        Transfer::GradConsensus { scope, iteration } => Payload::GradientIterate {
                            scope,
                            iteration,
                            values: a.gradient_iterate(scope, iteration)?.to_vec(),
                        },
                        Transfer::ParamChunk { index, count } => {
                            let (offset, values) = a.consensus_chunk(index, count);
                            Payload::ConsensusChunk {
                                offset,
                                values: values.to_vec(),
                            }
                        }
                    };
                    if !p.is_empty() {
                        payloads.push(p);
                    }
                }
                Ok(Message {
                    sender: a.node_id(),
                    round: round_index,
                    payloads,
                })
            })
            .collect()
    }

    fn process(&mut self, plan: &RoundPlan, round: &Round, messages: &[Message]) -> Result<()> {
        let depth = plan.depth;
        for &t in &round.transfers {
            for a in &mut self.agents {
                let found: Vec<(usize, &Payload)> = a
                    .neighbors()
                    .iter()
                    .filter_map(|&j| messages[j].payloads.iter().find(|p| t.matches(p)).map(|p| (j, p)))
                    .collect();
                let inbox: Vec<(usize, &[f64])> = found.iter().map(|&(j, p)| (j, payload_values(p))).collect();
                match t {
                    Transfer::Degree => {
                        let inbox: Vec<(usize, usize)> = found
                            .iter()
                            .filter_map(|&(j, p)| match p {
                                Payload::Degree(d) => Some((j, *d)),
                                _ => None,
                            })
                            .collect();
                        a.receive_degrees(&inbox)?;
                    }
                    Transfer::Forward { sample, level } => {
                        a.local_forward_layer(sample, level + 1, &inbox)?;
                        if level + 1 == depth && plan.strategy.trains() {
                            a.local_backward_init(sample)?;
                            a.local_backward_layer(sample, depth)?;
                        }
                    }
                    Transfer::Backward { sample, layer } => {
                        a.absorb_adjoints(sample, layer, &inbox)?;
                        a.local_backward_layer(sample, layer - 1)?;
                    }
                    Transfer::GradConsensus { scope, iteration } => {
                        a.mix_gradient(scope, iteration, iteration == plan.k_rounds, &inbox)?;
                    }
                    Transfer::ParamChunk { .. } => {
                        for &(j, p) in &found {
                            if let Payload::ConsensusChunk { offset, values } = p {
                                a.receive_consensus_chunk(j, *offset, values)?;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn payload_values(p: &Payload) -> &[f64] {
    match p {
        Payload::FwdFeature { values, .. }
        | Payload::BwdAdjoint { values, .. }
        | Payload::GradientIterate { values, .. }
        | Payload::ConsensusChunk { values, .. } => values,
        Payload::Degree(_) => &[],
    }
}

/// Runs one mini-batch of `strategy` on a small random network and returns
/// the measured ledger. Mixing strategies use D-SGD, gradient-consensus
/// strategies use the naive optimizer with `K = k_rounds`.
pub fn simulate_costs(
    strategy: Strategy,
    depth: usize,
    batch: usize,
    k_rounds: usize,
    seed: u64,
) -> Result<CommLedger> {
    let graph = Graph::path(4);
    let mut widths = vec![3; depth];
    widths.push(1);
    let specs = LayerSpec::chain(&widths, Activation::Tanh);
    let params = init_params(&specs, InitScheme::GlorotUniform, seed)?;
    let mut net = Network::new(graph, ShiftVariant::NormalizedAdjacency, &params)?;
    let samples = random_samples(4, 3, batch, seed);
    let kind = match strategy {
        Strategy::PiggybackDo => OptimizerKind::DSgd,
        _ => OptimizerKind::DNaive,
    };
    let cfg = OptimizerConfig {
        k_rounds: k_rounds.max(1),
        ..OptimizerConfig::new(kind, 1e-3)
    };
    let plan = build_round_plan(depth, batch, k_rounds, strategy)?;
    let mut ledger = CommLedger::with_trace();
    net.execute(&plan, &samples, Some(&cfg), cfg.learning_rate(0), &mut ledger)?;
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_counts_for_two_layers_hundred_samples() {
        let counts: Vec<usize> = Strategy::ALL
            .iter()
            .map(|&s| build_round_plan(2, 100, 1, s).unwrap().round_count())
            .collect();
        assert_eq!(counts, vec![200, 400, 301, 202, 201]);
    }

    #[test]
    fn piggyback_do_three_samples_layout() {
        let plan = build_round_plan(2, 3, 1, Strategy::PiggybackDo).unwrap();
        assert_eq!(plan.round_count(), 7);
        let carries = |r: usize| {
            plan.rounds[r]
                .transfers
                .iter()
                .filter(|t| matches!(t, Transfer::Backward { .. }))
                .count()
        };
        let with_adjoint: Vec<usize> = (0..7).filter(|&r| carries(r) == 1).map(|r| r + 1).collect();
        assert_eq!(with_adjoint, vec![3, 5, 7]);
        assert_eq!(
            plan.rounds[6].transfers,
            vec![Transfer::Backward { sample: 2, layer: 2 }]
        );
        plan.validate().unwrap();
    }

    #[test]
    fn single_layer_has_no_backward_rounds() {
        let plan = build_round_plan(1, 5, 1, Strategy::PiggybackDo).unwrap();
        assert_eq!(plan.round_count(), 5);
        assert!(plan
            .rounds
            .iter()
            .flat_map(|r| &r.transfers)
            .all(|t| !matches!(t, Transfer::Backward { .. })));
    }

    #[test]
    fn zero_k_rejected_for_gradient_consensus() {
        for s in [
            Strategy::NaivePerSample,
            Strategy::PerBatchConsensus,
            Strategy::PiggybackConsensus,
        ] {
            assert!(build_round_plan(2, 3, 0, s).is_err());
        }
        assert!(build_round_plan(2, 3, 0, Strategy::PiggybackDo).is_ok());
        assert!(build_round_plan(0, 3, 1, Strategy::FwdOnly).is_err());
    }

    #[test]
    fn audit_rejects_early_adjoint() {
        let mut plan = build_round_plan(2, 3, 1, Strategy::PiggybackDo).unwrap();
        let t = plan.rounds[2].transfers.remove(1);
        plan.rounds[1].transfers.push(t);
        assert!(matches!(plan.validate(), Err(Error::Causality { round: 1, .. })));
    }

    #[test]
    fn audit_rejects_missing_and_duplicate() {
        let mut plan = build_round_plan(2, 2, 2, Strategy::PerBatchConsensus).unwrap();
        plan.rounds.pop();
        assert!(plan.validate().is_err());
        let mut plan = build_round_plan(2, 2, 1, Strategy::FwdOnly).unwrap();
        let dup = plan.rounds[0].clone();
        plan.rounds.push(dup);
        assert!(plan.validate().is_err());
    }

    #[test]
    fn fwd_only_scalar_count_on_two_nodes() {
        let specs = LayerSpec::chain(&[1, 1], Activation::Tanh);
        let params = init_params(&specs, InitScheme::GlorotUniform, 0).unwrap();
        let mut net = Network::new(Graph::complete(2), ShiftVariant::NormalizedAdjacency, &params).unwrap();
        let samples = random_samples(2, 1, 2, 0);
        let mut ledger = CommLedger::new();
        net.run_minibatch(&samples, Strategy::FwdOnly, None, 0.0, &mut ledger).unwrap();
        assert_eq!((ledger.rounds, ledger.broadcasts, ledger.scalars), (2, 4, 4));
    }

    #[test]
    fn piggyback_do_message_sizes() {
        // L=2, widths (3,3,1), |θ| = 2·9 + 2·3 = 24, B=2 → chunk of 6.
        let ledger = simulate_costs(Strategy::PiggybackDo, 2, 2, 1, 3).unwrap();
        let trace = ledger.trace.unwrap();
        let max: Vec<usize> = trace.iter().map(|t| t.max_message).collect();
        // degree + X⁰ + chunk, X¹ + chunk, X⁰ + adjoint + chunk, X¹ + chunk, adjoint.
        assert_eq!(max, vec![1 + 3 + 6, 3 + 6, 3 + 3 + 6, 3 + 6, 3]);
    }

    #[test]
    fn measured_equals_formula_small_grid() {
        for l in 1..=3 {
            for b in 1..=3 {
                for k in 1..=2 {
                    for s in Strategy::ALL {
                        let ledger = simulate_costs(s, l, b, k, 1).unwrap();
                        assert_eq!(ledger.rounds, table_round_count(s, l, b, k), "{s} L={l} B={b} K={k}");
                    }
                }
            }
        }
    }

    #[test]
    fn strategy_parsing_round_trips() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("pipelined".parse::<Strategy>().is_err());
    }

    #[test]
    fn ledger_csv_header() {
        let mut out = Vec::new();
        let row = LedgerRow::new(Strategy::PiggybackDo, 2, 1, 1, &CommLedger::new());
        ledger_report(&[row], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("strategy,L,B,K,rounds,broadcasts,scalars\npiggyback-do,2,1,1,"));
    }
}
