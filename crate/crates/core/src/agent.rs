//! Per-node computation: the local GCNN layer, the local backward recursion and
//! the node's share of consensus. An agent only ever sees its own state and the
//! payloads its graph neighbors broadcast to it.
//!
//! Backward for layer `l` runs in two phases. [`AgentState::local_backward_layer`]
//! turns `Zˡ` into `Qˡ`, accumulates the parameter partials and returns the
//! broadcast `Θ₁ˡ Qˡ`. Once the neighbors' broadcasts arrive,
//! [`AgentState::absorb_adjoints`] forms `Z^{l-1}`.

use std::collections::BTreeMap;

use crate::error::{check_dim, Error, Result};
use crate::gcnn::{layer_offsets, ParamSet};
use crate::graph::{metropolis_edge_weight, Graph, ShiftOperator};
use crate::optim::{self, NodeState, OptimizerConfig};

/// Which gradient a consensus iteration is averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConsensusScope {
    Sample(usize),
    Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// `X^level` row of the sender, consumed by layer `level + 1`.
    FwdFeature {
        sample: usize,
        level: usize,
        values: Vec<f64>,
    },
    /// `Θ₁ˡ Qˡ` of the sender for `layer = l`, length `g_{l-1}`.
    BwdAdjoint {
        sample: usize,
        layer: usize,
        values: Vec<f64>,
    },
    /// Slice of the sender's consensus vector (parameters, then moments).
    ConsensusChunk { offset: usize, values: Vec<f64> },
    /// Current iterate of gradient consensus.
    GradientIterate {
        scope: ConsensusScope,
        iteration: usize,
        values: Vec<f64>,
    },
    Degree(usize),
}

impl Payload {
    /// Number of scalars on the wire.
    pub fn len(&self) -> usize {
        match self {
            Payload::FwdFeature { values, .. }
            | Payload::BwdAdjoint { values, .. }
            | Payload::ConsensusChunk { values, .. }
            | Payload::GradientIterate { values, .. } => values.len(),
            Payload::Degree(_) => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One broadcast: every payload a node sends in a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: usize,
    pub round: usize,
    pub payloads: Vec<Payload>,
}

impl Message {
    pub fn scalar_count(&self) -> usize {
        self.payloads.iter().map(Payload::len).sum()
    }
}

#[derive(Debug, Clone)]
struct SampleTrace {
    label: f64,
    /// `X⁰ … ` rows computed so far.
    outputs: Vec<Vec<f64>>,
    /// `Hˡ` rows at index `l - 1`.
    pre: Vec<Vec<f64>>,
    /// `Σ_{j∈N⁺(i)} S_ij X_j^{l-1}` at index `l - 1`.
    aggregates: Vec<Vec<f64>>,
    /// Adjoint `Zˡ` for the layer awaiting [`AgentState::local_backward_layer`].
    z: Option<Vec<f64>>,
    /// `Qˡ` of the most recently processed backward layer.
    q: Vec<f64>,
    /// Next layer whose backward step is due; 0 once the recursion is done.
    next_backward: usize,
    /// Layer whose `Z^{l-1}` is waiting on neighbor adjoints.
    awaiting_adjoints: Option<usize>,
    outgoing_adjoint: Option<(usize, Vec<f64>)>,
    grad: Vec<f64>,
    complete: bool,
}

/// One node of the network.
#[derive(Debug, Clone)]
pub struct AgentState {
    node_id: usize,
    params: ParamSet,
    offsets: Vec<(usize, usize)>,
    local: NodeState,
    neighbors: Vec<usize>,
    shift_self: f64,
    /// `S_ij` aligned with `neighbors`; also used as `S_ji` (all shift
    /// operators here are symmetric).
    shift_row: Vec<f64>,
    neighbor_degrees: Vec<Option<usize>>,
    samples: BTreeMap<usize, SampleTrace>,
    grad_accum: Vec<f64>,
    consensus_out: Vec<f64>,
    consensus_in: Vec<Vec<f64>>,
    consensus_received: Vec<usize>,
    gradient_iterate: Option<(ConsensusScope, usize, Vec<f64>)>,
    naive_direction: Vec<f64>,
}

impl AgentState {
    pub fn new(
        node_id: usize,
        params: ParamSet,
        neighbors: Vec<usize>,
        shift_self: f64,
        shift_row: Vec<f64>,
    ) -> Result<Self> {
        let p = params.param_count();
        let local = NodeState::new(params.flatten());
        let offsets = layer_offsets(params.specs());
        let mut agent = AgentState {
            node_id,
            params,
            offsets,
            local,
            neighbors: Vec::new(),
            shift_self: 0.0,
            shift_row: Vec::new(),
            neighbor_degrees: Vec::new(),
            samples: BTreeMap::new(),
            grad_accum: vec![0.0; p],
            consensus_out: Vec::new(),
            consensus_in: Vec::new(),
            consensus_received: Vec::new(),
            gradient_iterate: None,
            naive_direction: vec![0.0; p],
        };
        agent.set_topology(neighbors, shift_self, shift_row)?;
        Ok(agent)
    }

    pub fn from_graph(node_id: usize, graph: &Graph, shift: &ShiftOperator, params: ParamSet) -> Result<Self> {
        let (neighbors, s_self, row) = local_view(node_id, graph, shift);
        AgentState::new(node_id, params, neighbors, s_self, row)
    }

    /// Replaces the local view of the topology. Degrees must be exchanged again.
    pub fn set_topology(&mut self, neighbors: Vec<usize>, shift_self: f64, shift_row: Vec<f64>) -> Result<()> {
        check_dim("shift row", neighbors.len(), shift_row.len())?;
        if neighbors.windows(2).any(|w| w[0] >= w[1]) || neighbors.contains(&self.node_id) {
            return Err(Error::protocol(self.node_id, "neighbor list must be sorted, unique and exclude self"));
        }
        self.neighbor_degrees = vec![None; neighbors.len()];
        self.neighbors = neighbors;
        self.shift_self = shift_self;
        self.shift_row = shift_row;
        Ok(())
    }

    pub fn node_id(&self) -> usize {
        self.node_id
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn theta(&self) -> &[f64] {
        &self.local.theta
    }

    pub fn node_state(&self) -> &NodeState {
        &self.local
    }

    /// Replaces the local parameters and optimizer moments.
    pub fn set_node_state(&mut self, state: NodeState) -> Result<()> {
        self.params.assign_flat(&state.theta)?;
        self.local = state;
        Ok(())
    }

    pub fn neighbors(&self) -> &[usize] {
        &self.neighbors
    }

    pub fn degree(&self) -> usize {
        self.neighbors.len()
    }

    pub fn grad_accum(&self) -> &[f64] {
        &self.grad_accum
    }

    pub fn naive_direction(&self) -> &[f64] {
        &self.naive_direction
    }

    /// Clears per-batch state and snapshots the vector this node shares for
    /// parameter consensus.
    pub fn begin_batch(&mut self, cfg: Option<&OptimizerConfig>) {
        self.samples.clear();
        self.grad_accum.iter_mut().for_each(|g| *g = 0.0);
        self.naive_direction.iter_mut().for_each(|g| *g = 0.0);
        self.gradient_iterate = None;
        self.consensus_out = cfg.map(|c| self.local.consensus_payload(c)).unwrap_or_default();
        let len = self.consensus_out.len();
        self.consensus_in = vec![vec![0.0; len]; self.neighbors.len()];
        self.consensus_received = vec![0; self.neighbors.len()];
    }

    pub fn begin_sample(&mut self, sample: usize, features: &[f64], label: f64) -> Result<()> {
        check_dim("feature row", self.params.input_width(), features.len())?;
        if self.samples.contains_key(&sample) {
            return Err(Error::protocol(self.node_id, format!("sample {sample} started twice")));
        }
        let depth = self.params.depth();
        self.samples.insert(
            sample,
            SampleTrace {
                label,
                outputs: vec![features.to_vec()],
                pre: Vec::with_capacity(depth),
                aggregates: Vec::with_capacity(depth),
                z: None,
                q: Vec::new(),
                next_backward: depth,
                awaiting_adjoints: None,
                outgoing_adjoint: None,
                grad: vec![0.0; self.params.param_count()],
                complete: false,
            },
        );
        Ok(())
    }

    pub fn has_sample(&self, sample: usize) -> bool {
        self.samples.contains_key(&sample)
    }

    fn trace(&self, sample: usize) -> Result<&SampleTrace> {
        self.samples
            .get(&sample)
            .ok_or_else(|| Error::protocol(self.node_id, format!("unknown sample {sample}")))
    }

    fn trace_mut(&mut self, sample: usize) -> Result<&mut SampleTrace> {
        let id = self.node_id;
        self.samples
            .get_mut(&sample)
            .ok_or_else(|| Error::protocol(id, format!("unknown sample {sample}")))
    }

    /// Own `X^level` row, the forward broadcast.
    pub fn forward_features(&self, sample: usize, level: usize) -> Result<&[f64]> {
        self.trace(sample)?
            .outputs
            .get(level)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::protocol(self.node_id, format!("X^{level} of sample {sample} not computed")))
    }

    /// Orders `(sender, values)` pairs by neighbor position, rejecting
    /// non-neighbors, duplicates and gaps.
    fn align_inbox<'a>(&self, inbox: &[(usize, &'a [f64])], what: &str) -> Result<Vec<&'a [f64]>> {
        let mut slots: Vec<Option<&'a [f64]>> = vec![None; self.neighbors.len()];
        for &(sender, values) in inbox {
            let pos = self.neighbors.binary_search(&sender).map_err(|_| {
                Error::protocol(self.node_id, format!("{what} from non-neighbor {sender}"))
            })?;
            if slots[pos].replace(values).is_some() {
                return Err(Error::protocol(self.node_id, format!("duplicate {what} from {sender}")));
            }
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(pos, s)| {
                s.ok_or_else(|| {
                    Error::protocol(
                        self.node_id,
                        format!("missing {what} from neighbor {}", self.neighbors[pos]),
                    )
                })
            })
            .collect()
    }

    /// Local layer `l`: aggregates `S_ii X_i + Σ_j S_ij X_j` over the closed
    /// neighborhood (ascending node order), then `H = X_i Θ₀ + a Θ₁`,
    /// `X = σ(H)`. Returns the new row `X^l_{i*}`; for the last layer it holds
    /// the single prediction `ŷᵢ`.
    pub fn local_forward_layer(&mut self, sample: usize, layer: usize, inbox: &[(usize, &[f64])]) -> Result<Vec<f64>> {
        let depth = self.params.depth();
        if layer == 0 || layer > depth {
            return Err(Error::protocol(self.node_id, format!("layer {layer} out of range")));
        }
        let spec = self.params.specs()[layer - 1];
        let rows = self.align_inbox(inbox, "forward feature")?;
        let trace = self.trace(sample)?;
        if trace.outputs.len() != layer {
            return Err(Error::protocol(
                self.node_id,
                format!("layer {layer} of sample {sample} out of order"),
            ));
        }
        let own = &trace.outputs[layer - 1];
        let g_in = spec.g_in;
        for r in &rows {
            check_dim("neighbor feature width", g_in, r.len())?;
        }
        let mut agg = vec![0.0; g_in];
        let mut self_added = false;
        let mut add = |w: f64, x: &[f64]| {
            for (a, v) in agg.iter_mut().zip(x) {
                *a += w * v;
            }
        };
        for (pos, &j) in self.neighbors.iter().enumerate() {
            if !self_added && j > self.node_id {
                add(self.shift_self, own);
                self_added = true;
            }
            add(self.shift_row[pos], rows[pos]);
        }
        if !self_added {
            add(self.shift_self, own);
        }
        let p = &self.params.layers()[layer - 1];
        let h: Vec<f64> = (0..spec.g_out)
            .map(|k| {
                let mut s = 0.0;
                for a in 0..g_in {
                    s += own[a] * p.theta0[(a, k)];
                }
                for a in 0..g_in {
                    s += agg[a] * p.theta1[(a, k)];
                }
                s
            })
            .collect();
        let out: Vec<f64> = h.iter().map(|&v| spec.activation.apply(v)).collect();
        let trace = self.trace_mut(sample)?;
        trace.aggregates.push(agg);
        trace.pre.push(h);
        trace.outputs.push(out.clone());
        Ok(out)
    }

    pub fn prediction(&self, sample: usize) -> Option<f64> {
        let t = self.samples.get(&sample)?;
        (t.outputs.len() == self.params.depth() + 1).then(|| t.outputs[self.params.depth()][0])
    }

    /// `Z^L = 2(ŷᵢ − yᵢ)`, the adjoint of the summed node losses.
    pub fn local_backward_init(&mut self, sample: usize) -> Result<()> {
        let yhat = self
            .prediction(sample)
            .ok_or_else(|| Error::protocol(self.node_id, format!("backward before forward of sample {sample}")))?;
        let trace = self.trace_mut(sample)?;
        if trace.z.is_some() || trace.next_backward != trace.pre.len() {
            return Err(Error::protocol(self.node_id, "backward initialized twice"));
        }
        trace.z = Some(vec![2.0 * (yhat - trace.label)]);
        Ok(())
    }

    /// Backward step for layer `l`: `Qˡ = Zˡ ⊙ σ'(Hˡ)`, partials
    /// `∂/∂Θ₀ = X^{l-1}ᵀ Qᵀ`, `∂/∂Θ₁ = aˡᵀ Qᵀ`. Returns `Θ₁ˡ Qˡ` for
    /// broadcast when `l ≥ 2`; at `l = 1` the sample gradient is complete and
    /// folded into the batch accumulator.
    pub fn local_backward_layer(&mut self, sample: usize, layer: usize) -> Result<Option<Vec<f64>>> {
        let node = self.node_id;
        let spec = *self
            .params
            .specs()
            .get(layer.wrapping_sub(1))
            .ok_or_else(|| Error::protocol(node, format!("layer {layer} out of range")))?;
        let (off0, off1) = self.offsets[layer - 1];
        let theta1 = self.params.layers()[layer - 1].theta1.clone();
        let trace = self.trace_mut(sample)?;
        if trace.next_backward != layer || trace.awaiting_adjoints.is_some() {
            return Err(Error::protocol(node, format!("backward layer {layer} out of order")));
        }
        let z = trace
            .z
            .take()
            .ok_or_else(|| Error::protocol(node, format!("Z^{layer} unknown")))?;
        let h = &trace.pre[layer - 1];
        let q: Vec<f64> = z
            .iter()
            .zip(h)
            .map(|(zv, &hv)| zv * spec.activation.derivative(hv))
            .collect();
        let x_prev = &trace.outputs[layer - 1];
        let agg = &trace.aggregates[layer - 1];
        for a in 0..spec.g_in {
            for k in 0..spec.g_out {
                trace.grad[off0 + a * spec.g_out + k] += x_prev[a] * q[k];
                trace.grad[off1 + a * spec.g_out + k] += agg[a] * q[k];
            }
        }
        trace.next_backward = layer - 1;
        let broadcast = if layer >= 2 {
            let v: Vec<f64> = (0..spec.g_in)
                .map(|a| (0..spec.g_out).map(|k| theta1[(a, k)] * q[k]).sum())
                .collect();
            trace.awaiting_adjoints = Some(layer);
            trace.outgoing_adjoint = Some((layer, v.clone()));
            Some(v)
        } else {
            trace.complete = true;
            None
        };
        trace.q = q;
        if trace.complete {
            let grad = trace.grad.clone();
            for (acc, g) in self.grad_accum.iter_mut().zip(&grad) {
                *acc += g;
            }
        }
        Ok(broadcast)
    }

    /// Pending `Θ₁ˡ Qˡ` broadcast for `layer`.
    pub fn outgoing_adjoint(&self, sample: usize, layer: usize) -> Result<&[f64]> {
        match &self.trace(sample)?.outgoing_adjoint {
            Some((l, v)) if *l == layer => Ok(v),
            _ => Err(Error::protocol(
                self.node_id,
                format!("adjoint of layer {layer} for sample {sample} not ready"),
            )),
        }
    }

    /// `Z^{l-1} = (Θ₀ˡ + S_ii Θ₁ˡ) Qˡ + Σ_{j∈N(i)} S_ji (Θ₁ˡʲ Qˡʲ)`.
    pub fn absorb_adjoints(&mut self, sample: usize, layer: usize, inbox: &[(usize, &[f64])]) -> Result<()> {
        let node = self.node_id;
        let rows = self.align_inbox(inbox, "backward adjoint")?;
        let p = &self.params.layers()[layer.saturating_sub(1).min(self.params.depth() - 1)];
        let (theta0, theta1) = (p.theta0.clone(), p.theta1.clone());
        let s_self = self.shift_self;
        let shift_row = self.shift_row.clone();
        let trace = self.trace_mut(sample)?;
        if trace.awaiting_adjoints != Some(layer) {
            return Err(Error::protocol(node, format!("unexpected adjoints for layer {layer}")));
        }
        let g_in = theta0.nrows();
        for r in &rows {
            check_dim("neighbor adjoint width", g_in, r.len())?;
        }
        let q = &trace.q;
        let mut z: Vec<f64> = (0..g_in)
            .map(|a| {
                (0..theta0.ncols())
                    .map(|k| (theta0[(a, k)] + s_self * theta1[(a, k)]) * q[k])
                    .sum()
            })
            .collect();
        for (pos, r) in rows.iter().enumerate() {
            for (zv, v) in z.iter_mut().zip(r.iter()) {
                *zv += shift_row[pos] * v;
            }
        }
        trace.z = Some(z);
        trace.awaiting_adjoints = None;
        trace.outgoing_adjoint = None;
        Ok(())
    }

    /// `∇̂Jᵢ` for one sample once its backward recursion reached layer 1.
    pub fn local_gradient(&self, sample: usize) -> Result<&[f64]> {
        let t = self.trace(sample)?;
        if t.complete {
            Ok(&t.grad)
        } else {
            Err(Error::protocol(self.node_id, format!("gradient of sample {sample} incomplete")))
        }
    }

    pub fn sample_complete(&self, sample: usize) -> bool {
        self.samples.get(&sample).is_some_and(|t| t.complete)
    }

    pub fn receive_degrees(&mut self, inbox: &[(usize, usize)]) -> Result<()> {
        for &(sender, d) in inbox {
            let pos = self
                .neighbors
                .binary_search(&sender)
                .map_err(|_| Error::protocol(self.node_id, format!("degree from non-neighbor {sender}")))?;
            self.neighbor_degrees[pos] = Some(d);
        }
        Ok(())
    }

    /// Metropolis weights of the closed neighborhood in ascending node order,
    /// `(node, weight)`, built from exchanged degrees.
    pub fn mixing_weights(&self) -> Result<Vec<(usize, f64)>> {
        let d_i = self.degree();
        let mut edge = Vec::with_capacity(self.neighbors.len());
        let mut off = 0.0;
        for (pos, &j) in self.neighbors.iter().enumerate() {
            let d_j = self.neighbor_degrees[pos]
                .ok_or_else(|| Error::protocol(self.node_id, format!("degree of neighbor {j} unknown")))?;
            let w = metropolis_edge_weight(d_i, d_j);
            off += w;
            edge.push((j, w));
        }
        let at = edge.partition_point(|&(j, _)| j < self.node_id);
        edge.insert(at, (self.node_id, 1.0 - off));
        Ok(edge)
    }

    /// `Σ_{j∈N⁺(i)} W_ij xʲ` given own vector and neighbor vectors aligned
    /// with the neighbor list.
    fn mix_closed(&self, own: &[f64], others: &[&[f64]]) -> Result<Vec<f64>> {
        let weights = self.mixing_weights()?;
        let mut nbr = others.iter();
        let terms: Vec<(f64, &[f64])> = weights
            .iter()
            .map(|&(j, w)| {
                if j == self.node_id {
                    (w, own)
                } else {
                    (w, *nbr.next().expect("aligned neighbor vectors"))
                }
            })
            .collect();
        optim::mix(own.len(), terms)
    }

    /// Current gradient consensus iterate, seeding iteration 1 from the
    /// sample gradient or the batch accumulator.
    pub fn gradient_iterate(&mut self, scope: ConsensusScope, iteration: usize) -> Result<&[f64]> {
        if iteration == 1 {
            let seed = match scope {
                ConsensusScope::Sample(b) => self.local_gradient(b)?.to_vec(),
                ConsensusScope::Batch => {
                    if let Some(b) = self.samples.iter().find(|(_, t)| !t.complete).map(|(b, _)| *b) {
                        return Err(Error::protocol(self.node_id, format!("sample {b} unfinished at batch consensus")));
                    }
                    self.grad_accum.clone()
                }
            };
            self.gradient_iterate = Some((scope, 0, seed));
        }
        match &self.gradient_iterate {
            Some((s, done, v)) if *s == scope && *done + 1 == iteration => Ok(v),
            _ => Err(Error::protocol(
                self.node_id,
                format!("consensus iteration {iteration} of {scope:?} out of order"),
            )),
        }
    }

    /// One consensus iteration; after the final one the result is added to
    /// the naive update direction.
    pub fn mix_gradient(
        &mut self,
        scope: ConsensusScope,
        iteration: usize,
        final_iteration: bool,
        inbox: &[(usize, &[f64])],
    ) -> Result<()> {
        let rows = self.align_inbox(inbox, "gradient iterate")?;
        let own = match &self.gradient_iterate {
            Some((s, done, v)) if *s == scope && *done + 1 == iteration => v.clone(),
            _ => return Err(Error::protocol(self.node_id, "gradient iterate missing")),
        };
        let next = self.mix_closed(&own, &rows)?;
        if final_iteration {
            for (d, v) in self.naive_direction.iter_mut().zip(&next) {
                *d += v;
            }
            self.gradient_iterate = None;
        } else {
            self.gradient_iterate = Some((scope, iteration, next));
        }
        Ok(())
    }

    /// Chunk `index` of `count` of this node's consensus vector.
    pub fn consensus_chunk(&self, index: usize, count: usize) -> (usize, &[f64]) {
        let range = chunk_range(self.consensus_out.len(), index, count);
        (range.start, &self.consensus_out[range])
    }

    pub fn receive_consensus_chunk(&mut self, sender: usize, offset: usize, values: &[f64]) -> Result<()> {
        let pos = self
            .neighbors
            .binary_search(&sender)
            .map_err(|_| Error::protocol(self.node_id, format!("chunk from non-neighbor {sender}")))?;
        let buf = &mut self.consensus_in[pos];
        if offset + values.len() > buf.len() {
            return Err(Error::protocol(self.node_id, "consensus chunk out of range"));
        }
        buf[offset..offset + values.len()].copy_from_slice(values);
        self.consensus_received[pos] += values.len();
        Ok(())
    }

    /// Parameter-mixing update from the received chunks and the batch
    /// gradient accumulator.
    pub fn apply_mixing_update(&mut self, cfg: &OptimizerConfig, alpha_t: f64) -> Result<()> {
        let len = self.consensus_out.len();
        if len != cfg.consensus_blocks() * self.local.theta.len() {
            return Err(Error::protocol(self.node_id, "consensus snapshot does not match optimizer"));
        }
        if let Some(pos) = self.consensus_received.iter().position(|&c| c != len) {
            return Err(Error::protocol(
                self.node_id,
                format!("incomplete consensus vector from neighbor {}", self.neighbors[pos]),
            ));
        }
        let others: Vec<&[f64]> = self.consensus_in.iter().map(Vec::as_slice).collect();
        let mixed = self.mix_closed(&self.consensus_out, &others)?;
        let grad = self.grad_accum.clone();
        optim::apply_local_update(cfg, alpha_t, &mut self.local, &mixed, &grad)?;
        self.params.assign_flat(&self.local.theta)
    }

    /// `θⁱ ← θⁱ − α_t·d` with the consensus gradient direction.
    pub fn apply_naive_update(&mut self, alpha_t: f64) -> Result<()> {
        let d = self.naive_direction.clone();
        optim::naive_step(&mut self.local, alpha_t, &d)?;
        self.params.assign_flat(&self.local.theta)
    }
}

/// Neighbors, `S_ii` and `S_ij` row of node `i`.
pub fn local_view(i: usize, graph: &Graph, shift: &ShiftOperator) -> (Vec<usize>, f64, Vec<f64>) {
    let neighbors: Vec<usize> = graph.neighbors(i).collect();
    let row = neighbors.iter().map(|&j| shift.get(i, j)).collect();
    (neighbors, shift.get(i, i), row)
}

/// Index range of chunk `index` when a vector of `len` scalars is split into
/// `count` chunks of `ceil(len / count)` scalars; trailing chunks may be short
/// or empty.
pub fn chunk_range(len: usize, index: usize, count: usize) -> std::ops::Range<usize> {
    if count == 0 {
        return 0..0;
    }
    let size = len.div_ceil(count);
    let start = (index * size).min(len);
    start..((index + 1) * size).min(len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcnn::{Activation, LayerParams, LayerSpec};
    use crate::graph::{build_shift, ShiftVariant};
    use nalgebra::DMatrix;

    fn scalar_params(t0: f64, t1: f64) -> ParamSet {
        ParamSet::new(
            vec![LayerSpec {
                g_in: 1,
                g_out: 1,
                activation: Activation::Identity,
            }],
            vec![LayerParams {
                theta0: DMatrix::from_element(1, 1, t0),
                theta1: DMatrix::from_element(1, 1, t1),
            }],
        )
        .unwrap()
    }

    #[test]
    fn star_center_identity_returns_own_feature() {
        let g = Graph::star(4);
        let s = build_shift(&g, ShiftVariant::Adjacency).unwrap();
        let mut a = AgentState::from_graph(0, &g, &s, scalar_params(1.0, 0.0)).unwrap();
        a.begin_sample(0, &[2.5], 0.0).unwrap();
        let inbox = [(1, &[1.0][..]), (2, &[-3.0][..]), (3, &[7.0][..])];
        assert_eq!(a.local_forward_layer(0, 1, &inbox).unwrap(), vec![2.5]);
    }

    #[test]
    fn single_edge_shift_reads_neighbor() {
        let g = Graph::path(2);
        let s = build_shift(&g, ShiftVariant::Adjacency).unwrap();
        let mut a = AgentState::from_graph(0, &g, &s, scalar_params(0.0, 1.0)).unwrap();
        a.begin_sample(0, &[0.4], 0.0).unwrap();
        assert_eq!(a.local_forward_layer(0, 1, &[(1, &[-1.25][..])]).unwrap(), vec![-1.25]);
    }

    #[test]
    fn inbox_violations_are_protocol_errors() {
        let g = Graph::path(3);
        let s = build_shift(&g, ShiftVariant::Adjacency).unwrap();
        let mut a = AgentState::from_graph(1, &g, &s, scalar_params(1.0, 1.0)).unwrap();
        a.begin_sample(0, &[1.0], 0.0).unwrap();
        let missing = a.local_forward_layer(0, 1, &[(0, &[1.0][..])]);
        assert!(matches!(missing, Err(Error::Protocol { .. })));
        let mut b = AgentState::from_graph(0, &g, &s, scalar_params(1.0, 1.0)).unwrap();
        b.begin_sample(0, &[1.0], 0.0).unwrap();
        let stranger = b.local_forward_layer(0, 1, &[(1, &[1.0][..]), (2, &[1.0][..])]);
        assert!(matches!(stranger, Err(Error::Protocol { .. })));
        let wide = a.local_forward_layer(0, 1, &[(0, &[1.0, 2.0][..]), (2, &[1.0][..])]);
        assert!(wide.is_err());
    }

    #[test]
    fn backward_init_residual() {
        let g = Graph::empty(1);
        let s = build_shift(&g, ShiftVariant::Adjacency).unwrap();
        let mut a = AgentState::from_graph(0, &g, &s, scalar_params(1.5, 0.0)).unwrap();
        a.begin_sample(0, &[1.0], 1.0).unwrap();
        assert!(a.local_backward_init(0).is_err());
        a.local_forward_layer(0, 1, &[]).unwrap();
        a.local_backward_init(0).unwrap();
        assert_eq!(a.samples[&0].z, Some(vec![1.0]));
        assert!(a.local_backward_init(0).is_err());
    }

    #[test]
    fn single_node_scalar_chain_rule() {
        // one node with self shift S_11 = 0.5, identity activation, L = 1
        let params = scalar_params(0.8, -0.4);
        let mut a = AgentState::new(0, params, vec![], 0.5, vec![]).unwrap();
        let (x, y) = (1.5, 0.2);
        a.begin_sample(0, &[x], y).unwrap();
        let yhat = a.local_forward_layer(0, 1, &[]).unwrap()[0];
        assert!((yhat - (0.8 * x + 0.5 * x * -0.4)).abs() < 1e-15);
        a.local_backward_init(0).unwrap();
        assert_eq!(a.local_backward_layer(0, 1).unwrap(), None);
        let g = a.local_gradient(0).unwrap();
        let r = 2.0 * (yhat - y);
        assert!((g[0] - r * x).abs() < 1e-15);
        assert!((g[1] - r * 0.5 * x).abs() < 1e-15);
        assert_eq!(a.grad_accum(), g);
    }

    #[test]
    fn backward_layer_order_enforced() {
        let specs = LayerSpec::chain(&[1, 2, 1], Activation::Identity);
        let p = crate::gcnn::init_params(&specs, crate::gcnn::InitScheme::GlorotUniform, 1).unwrap();
        let mut a = AgentState::new(0, p, vec![], 1.0, vec![]).unwrap();
        a.begin_sample(0, &[1.0], 0.0).unwrap();
        a.local_forward_layer(0, 1, &[]).unwrap();
        assert!(a.local_forward_layer(0, 1, &[]).is_err());
        a.local_forward_layer(0, 2, &[]).unwrap();
        a.local_backward_init(0).unwrap();
        assert!(a.local_backward_layer(0, 1).is_err());
        assert!(a.local_gradient(0).is_err());
        let sent = a.local_backward_layer(0, 2).unwrap().unwrap();
        assert_eq!(sent.len(), 2);
        assert_eq!(a.outgoing_adjoint(0, 2).unwrap(), sent.as_slice());
        assert!(a.local_backward_layer(0, 1).is_err());
        a.absorb_adjoints(0, 2, &[]).unwrap();
        assert!(a.local_backward_layer(0, 1).unwrap().is_none());
        assert!(a.local_gradient(0).is_ok());
    }

    #[test]
    fn identity_activation_q_equals_z() {
        let specs = LayerSpec::chain(&[1, 1], Activation::Identity);
        let p = crate::gcnn::init_params(&specs, crate::gcnn::InitScheme::GlorotUniform, 4).unwrap();
        let mut a = AgentState::new(0, p, vec![], 0.0, vec![]).unwrap();
        a.begin_sample(0, &[0.7], 3.0).unwrap();
        a.local_forward_layer(0, 1, &[]).unwrap();
        a.local_backward_init(0).unwrap();
        let z = a.samples[&0].z.clone().unwrap();
        a.local_backward_layer(0, 1).unwrap();
        assert_eq!(a.samples[&0].q, z);
    }

    #[test]
    fn local_weights_match_global_metropolis() {
        let g = crate::graph::generate_ba(12, 2, 3).unwrap();
        let s = build_shift(&g, ShiftVariant::NormalizedAdjacency).unwrap();
        let w = crate::graph::metropolis_weights(&g).unwrap();
        for i in 0..12 {
            let mut a = AgentState::from_graph(i, &g, &s, scalar_params(1.0, 1.0)).unwrap();
            assert!(a.mixing_weights().is_err());
            let degs: Vec<(usize, usize)> = g.neighbors(i).map(|j| (j, g.degree(j))).collect();
            a.receive_degrees(&degs).unwrap();
            for (j, wij) in a.mixing_weights().unwrap() {
                assert_eq!(wij, w.get(i, j));
            }
        }
    }

    #[test]
    fn chunk_ranges_cover_vector() {
        assert_eq!(chunk_range(10, 0, 4), 0..3);
        assert_eq!(chunk_range(10, 3, 4), 9..10);
        assert_eq!(chunk_range(3, 2, 6), 2..3);
        assert_eq!(chunk_range(3, 5, 6), 3..3);
        let covered: usize = (0..7).map(|k| chunk_range(50, k, 7).len()).sum();
        assert_eq!(covered, 50);
    }
}
