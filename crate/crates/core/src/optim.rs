//! Consensus averaging and the optimizer family: centralized SGD/Adam and the
//! distributed naive, D-SGD, D-Adam and D-AMSGrad updates.
//!
//! Every distributed update is split into a mixing step over the closed
//! neighborhood, [`mix`], and a purely local rule, [`apply_local_update`].
//! The bulk functions here and the message-driven simulator share both, so
//! the two execution paths produce bit-identical parameters.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::graph::ConsensusWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    CentralSgd,
    CentralAdam,
    DNaive,
    DSgd,
    DAdam,
    DAmsgrad,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 6] = [
        OptimizerKind::CentralSgd,
        OptimizerKind::CentralAdam,
        OptimizerKind::DNaive,
        OptimizerKind::DSgd,
        OptimizerKind::DAdam,
        OptimizerKind::DAmsgrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::CentralSgd => "central-sgd",
            OptimizerKind::CentralAdam => "central-adam",
            OptimizerKind::DNaive => "d-naive",
            OptimizerKind::DSgd => "d-sgd",
            OptimizerKind::DAdam => "d-adam",
            OptimizerKind::DAmsgrad => "d-amsgrad",
        }
    }

    pub fn is_central(self) -> bool {
        matches!(self, OptimizerKind::CentralSgd | OptimizerKind::CentralAdam)
    }

    /// Kinds that mix parameters once per mini-batch alongside a local step.
    pub fn mixes_parameters(self) -> bool {
        matches!(
            self,
            OptimizerKind::DSgd | OptimizerKind::DAdam | OptimizerKind::DAmsgrad
        )
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown optimizer {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub alpha: f64,
    /// Multiplicative learning-rate factor per update: `α_t = α·decay^t`.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Gradient consensus rounds for `d-naive`.
    pub k_rounds: usize,
    /// D-AMSGrad only: also mix the second moment `v`.
    pub mix_second_moment: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::DSgd,
            alpha: 1e-3,
            decay: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            k_rounds: 1,
            mix_second_moment: false,
        }
    }
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, alpha: f64) -> Self {
        OptimizerConfig {
            kind,
            alpha,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be non-negative, got {}", self.alpha)));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::invalid(format!("learning-rate decay must be positive, got {}", self.decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("epsilon must be non-negative"));
        }
        if self.kind == OptimizerKind::DNaive && self.k_rounds == 0 {
            return Err(Error::invalid("d-naive needs at least one consensus round"));
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        self.alpha * self.decay.powi(step as i32)
    }

    /// Number of `|θ|`-sized blocks a node mixes per update.
    pub fn consensus_blocks(&self) -> usize {
        match self.kind {
            OptimizerKind::DSgd | OptimizerKind::DAdam => 1,
            OptimizerKind::DAmsgrad if self.mix_second_moment => 3,
            OptimizerKind::DAmsgrad => 2,
            _ => 0,
        }
    }
}

/// Optimizer moments of one parameter copy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Running coordinatewise maximum of `v` (AMSGrad).
    pub vhat: Vec<f64>,
    pub t: usize,
}

impl MomentState {
    pub fn zeros(len: usize) -> Self {
        MomentState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            vhat: vec![0.0; len],
            t: 0,
        }
    }
}

/// One node's parameter copy together with its optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub theta: Vec<f64>,
    pub moments: MomentState,
}

impl NodeState {
    pub fn new(theta: Vec<f64>) -> Self {
        let len = theta.len();
        NodeState {
            theta,
            moments: MomentState::zeros(len),
        }
    }

    /// Vector broadcast for mixing: `θ`, then `m` and `v` as the kind requires.
    pub fn consensus_payload(&self, cfg: &OptimizerConfig) -> Vec<f64> {
        let blocks = cfg.consensus_blocks();
        let mut out = Vec::with_capacity(blocks * self.theta.len());
        if blocks >= 1 {
            out.extend_from_slice(&self.theta);
        }
        if blocks >= 2 {
            out.extend_from_slice(&self.moments.m);
        }
        if blocks >= 3 {
            out.extend_from_slice(&self.moments.v);
        }
        out
    }
}

/// Weighted sum `Σ w_j x_j`, accumulated in iteration order.
pub fn mix<'a>(len: usize, terms: impl IntoIterator<Item = (f64, &'a [f64])>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; len];
    for (w, x) in terms {
        check_dim("consensus operand", len, x.len())?;
        for (o, v) in out.iter_mut().zip(x) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// One synchronous round `xⁱ ← Σ_{j ∈ N⁺(i)} W_ij xʲ`.
pub fn consensus_round(values: &[Vec<f64>], w: &ConsensusWeights) -> Result<Vec<Vec<f64>>> {
    let n = w.node_count();
    check_dim("consensus node count", n, values.len())?;
    let len = values.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            mix(
                len,
                (0..n)
                    .filter(|&j| j == i || w.get(i, j) != 0.0)
                    .map(|j| (w.get(i, j), values[j].as_slice())),
            )
        })
        .collect()
}

pub fn consensus_rounds(values: &[Vec<f64>], w: &ConsensusWeights, rounds: usize) -> Result<Vec<Vec<f64>>> {
    let mut x = values.to_vec();
    for _ in 0..rounds {
        x = consensus_round(&x, w)?;
    }
    Ok(x)
}

/// Local rule of the parameter-mixing optimizers. `mixed` is the neighborhood
/// average of [`NodeState::consensus_payload`]; `grad` is the node's batch
/// aggregate `Σ_b ∇̂Jᵢ(b)`.
pub fn apply_local_update(
    cfg: &OptimizerConfig,
    alpha_t: f64,
    node: &mut NodeState,
    mixed: &[f64],
    grad: &[f64],
) -> Result<()> {
    let p = node.theta.len();
    check_dim("local gradient", p, grad.len())?;
    check_dim("mixed payload", cfg.consensus_blocks() * p, mixed.len())?;
    let theta_mix = &mixed[..p];
    let ms = &mut node.moments;
    match cfg.kind {
        OptimizerKind::DSgd => {
            for k in 0..p {
                node.theta[k] = theta_mix[k] - alpha_t * grad[k];
            }
        }
        OptimizerKind::DAdam => {
            ms.t += 1;
            let c1 = 1.0 - cfg.beta1.powi(ms.t as i32);
            let c2 = 1.0 - cfg.beta2.powi(ms.t as i32);
            for k in 0..p {
                ms.m[k] = cfg.beta1 * ms.m[k] + (1.0 - cfg.beta1) * grad[k];
                ms.v[k] = cfg.beta2 * ms.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
                let mhat = ms.m[k] / c1;
                let vhat = ms.v[k] / c2;
                node.theta[k] = theta_mix[k] - alpha_t * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
        OptimizerKind::DAmsgrad => {
            ms.t += 1;
            let m_prev = &mixed[p..2 * p];
            let v_prev = if cfg.mix_second_moment {
                mixed[2 * p..3 * p].to_vec()
            } else {
                ms.v.clone()
            };
            for k in 0..p {
                ms.m[k] = cfg.beta1 * m_prev[k] + (1.0 - cfg.beta1) * grad[k];
                ms.v[k] = cfg.beta2 * v_prev[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
                ms.vhat[k] = ms.vhat[k].max(ms.v[k]);
                node.theta[k] = theta_mix[k] - alpha_t * ms.m[k] / (ms.vhat[k].sqrt() + cfg.epsilon);
            }
        }
        kind => {
            return Err(Error::invalid(format!(
                "{} does not mix parameters",
                kind.name()
            )))
        }
    }
    Ok(())
}

fn mixing_update(
    cfg: &OptimizerConfig,
    expected: OptimizerKind,
    nodes: &mut [NodeState],
    w: &ConsensusWeights,
    alpha_t: f64,
    batch_grads: &[Vec<f64>],
) -> Result<()> {
    if cfg.kind != expected {
        return Err(Error::invalid(format!(
            "{} update called with a {} configuration",
            expected.name(),
            cfg.kind.name()
        )));
    }
    check_dim("batch gradients", nodes.len(), batch_grads.len())?;
    let payloads: Vec<Vec<f64>> = nodes.iter().map(|n| n.consensus_payload(cfg)).collect();
    let mixed = consensus_round(&payloads, w)?;
    for ((node, mixed), grad) in nodes.iter_mut().zip(&mixed).zip(batch_grads) {
        apply_local_update(cfg, alpha_t, node, mixed, grad)?;
    }
    Ok(())
}

/// `θⁱ ← Σ_j W_ij θʲ − α_t Σ_b ∇̂Jᵢ(b)` for every node.
pub fn dsgd_update(
    cfg: &OptimizerConfig,
    nodes: &mut [NodeState],
    w: &ConsensusWeights,
    alpha_t: f64,
    batch_grads: &[Vec<f64>],
) -> Result<()> {
    mixing_update(cfg, OptimizerKind::DSgd, nodes, w, alpha_t, batch_grads)
}

/// Parameter mixing followed by a bias-corrected Adam step on local moments.
/// Moments are never mixed.
pub fn dadam_update(
    cfg: &OptimizerConfig,
    nodes: &mut [NodeState],
    w: &ConsensusWeights,
    alpha_t: f64,
    batch_grads: &[Vec<f64>],
) -> Result<()> {
    mixing_update(cfg, OptimizerKind::DAdam, nodes, w, alpha_t, batch_grads)
}

/// Parameter and first-moment mixing (optionally second moment too) followed
/// by an AMSGrad step.
pub fn damsgrad_update(
    cfg: &OptimizerConfig,
    nodes: &mut [NodeState],
    w: &ConsensusWeights,
    alpha_t: f64,
    batch_grads: &[Vec<f64>],
) -> Result<()> {
    mixing_update(cfg, OptimizerKind::DAmsgrad, nodes, w, alpha_t, batch_grads)
}

/// Gradients handed to [`dnaive_update`].
#[derive(Debug, Clone, Copy)]
pub enum NaiveGradients<'a> {
    /// `[b][i]`: one gradient per sample and node; consensus runs per sample.
    PerSample(&'a [Vec<Vec<f64>>]),
    /// `[i]`: batch sums; consensus runs once.
    PerBatch(&'a [Vec<f64>]),
}

/// `K` rounds of gradient consensus, then `θⁱ ← θⁱ − α_t·(consensus result)`.
pub fn dnaive_update(
    nodes: &mut [NodeState],
    w: &ConsensusWeights,
    k_rounds: usize,
    alpha_t: f64,
    grads: NaiveGradients<'_>,
) -> Result<()> {
    if k_rounds == 0 {
        return Err(Error::invalid("d-naive needs at least one consensus round"));
    }
    let n = nodes.len();
    let p = nodes.first().map_or(0, |s| s.theta.len());
    let direction = match grads {
        NaiveGradients::PerBatch(g) => {
            check_dim("batch gradients", n, g.len())?;
            consensus_rounds(g, w, k_rounds)?
        }
        NaiveGradients::PerSample(per_sample) => {
            let mut acc = vec![vec![0.0; p]; n];
            for g in per_sample {
                check_dim("sample gradients", n, g.len())?;
                let c = consensus_rounds(g, w, k_rounds)?;
                for (a, c) in acc.iter_mut().zip(&c) {
                    check_dim("sample gradient", p, c.len())?;
                    for (a, c) in a.iter_mut().zip(c) {
                        *a += c;
                    }
                }
            }
            acc
        }
    };
    for (node, d) in nodes.iter_mut().zip(&direction) {
        naive_step(node, alpha_t, d)?;
    }
    Ok(())
}

pub fn naive_step(node: &mut NodeState, alpha_t: f64, direction: &[f64]) -> Result<()> {
    check_dim("consensus gradient", node.theta.len(), direction.len())?;
    for (t, d) in node.theta.iter_mut().zip(direction) {
        *t -= alpha_t * d;
    }
    Ok(())
}

/// Centralized SGD or Adam on a flat parameter vector.
pub fn central_update(
    cfg: &OptimizerConfig,
    alpha_t: f64,
    state: &mut NodeState,
    grad: &[f64],
) -> Result<()> {
    check_dim("gradient", state.theta.len(), grad.len())?;
    match cfg.kind {
        OptimizerKind::CentralSgd => naive_step(state, alpha_t, grad),
        OptimizerKind::CentralAdam => {
            // Adam is D-Adam on a single node whose mixing is the identity.
            let adam = OptimizerConfig {
                kind: OptimizerKind::DAdam,
                ..cfg.clone()
            };
            let theta = state.theta.clone();
            apply_local_update(&adam, alpha_t, state, &theta, grad)
        }
        kind => Err(Error::invalid(format!("{} is not a centralized optimizer", kind.name()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{metropolis_weights, Graph};

    fn cfg(kind: OptimizerKind) -> OptimizerConfig {
        OptimizerConfig::new(kind, 0.05)
    }

    #[test]
    fn consensus_fixed_point() {
        let w = metropolis_weights(&Graph::path(4)).unwrap();
        let x = vec![vec![1.5, -2.0]; 4];
        assert_eq!(consensus_round(&x, &w).unwrap(), x);
    }

    #[test]
    fn consensus_k2_averages_exactly() {
        let w = metropolis_weights(&Graph::path(2)).unwrap();
        let out = consensus_round(&[vec![1.0], vec![4.0]], &w).unwrap();
        assert_eq!(out, vec![vec![2.5], vec![2.5]]);
    }

    #[test]
    fn consensus_path3_converges() {
        let w = metropolis_weights(&Graph::path(3)).unwrap();
        let x = vec![vec![3.0], vec![-1.0], vec![7.0]];
        let out = consensus_rounds(&x, &w, 500).unwrap();
        for v in out {
            assert!((v[0] - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn consensus_rejects_bad_lengths() {
        let w = metropolis_weights(&Graph::path(2)).unwrap();
        assert!(consensus_round(&[vec![1.0]], &w).is_err());
        assert!(consensus_round(&[vec![1.0], vec![1.0, 2.0]], &w).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(OptimizerKind::DSgd).validate().is_ok());
        assert!(OptimizerConfig::new(OptimizerKind::DSgd, -1e-3).validate().is_err());
        OptimizerConfig::new(OptimizerKind::DSgd, 0.0).validate().unwrap();
        let mut c = cfg(OptimizerKind::DNaive);
        c.k_rounds = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(OptimizerKind::DAdam);
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
        assert_eq!("d-amsgrad".parse::<OptimizerKind>().unwrap(), OptimizerKind::DAmsgrad);
        assert!("adamw".parse::<OptimizerKind>().is_err());
    }

    #[test]
    fn learning_rate_decays_exponentially() {
        let mut c = cfg(OptimizerKind::DSgd);
        c.decay = 0.5;
        assert_eq!(c.learning_rate(0), 0.05);
        assert_eq!(c.learning_rate(3), 0.05 * 0.125);
    }

    #[test]
    fn dsgd_zero_gradient_is_pure_consensus() {
        let g = Graph::star(4);
        let w = metropolis_weights(&g).unwrap();
        let thetas = vec![vec![1.0, 0.0], vec![2.0, 1.0], vec![-1.0, 3.0], vec![0.5, 0.5]];
        let mut nodes: Vec<NodeState> = thetas.iter().cloned().map(NodeState::new).collect();
        dsgd_update(&cfg(OptimizerKind::DSgd), &mut nodes, &w, 0.1, &vec![vec![0.0; 2]; 4]).unwrap();
        let expect = consensus_round(&thetas, &w).unwrap();
        for (n, e) in nodes.iter().zip(&expect) {
            assert_eq!(&n.theta, e);
        }
    }

    #[test]
    fn dsgd_complete_graph_equal_inputs_matches_sgd() {
        let w = metropolis_weights(&Graph::complete(5)).unwrap();
        let theta = vec![0.3, -0.7, 1.1];
        let grad = vec![0.5, 0.25, -1.0];
        let mut nodes = vec![NodeState::new(theta.clone()); 5];
        dsgd_update(&cfg(OptimizerKind::DSgd), &mut nodes, &w, 0.1, &vec![grad.clone(); 5]).unwrap();
        for n in &nodes {
            for k in 0..3 {
                assert!((n.theta[k] - (theta[k] - 0.1 * grad[k])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn update_rejects_wrong_kind() {
        let w = metropolis_weights(&Graph::path(2)).unwrap();
        let mut nodes = vec![NodeState::new(vec![0.0]); 2];
        let grads = vec![vec![1.0]; 2];
        assert!(dsgd_update(&cfg(OptimizerKind::DAdam), &mut nodes, &w, 0.1, &grads).is_err());
    }

    #[test]
    fn damsgrad_zero_gradients_reduce_to_consensus() {
        let g = Graph::path(3);
        let w = metropolis_weights(&g).unwrap();
        let c = cfg(OptimizerKind::DAmsgrad);
        let init = vec![vec![1.0], vec![-2.0], vec![4.0]];
        let mut nodes: Vec<NodeState> = init.iter().cloned().map(NodeState::new).collect();
        for _ in 0..300 {
            damsgrad_update(&c, &mut nodes, &w, 0.1, &vec![vec![0.0]; 3]).unwrap();
        }
        for n in &nodes {
            assert!((n.theta[0] - 1.0).abs() < 1e-9);
            assert_eq!(n.moments.m, vec![0.0]);
            assert_eq!(n.moments.v, vec![0.0]);
        }
    }

    #[test]
    fn damsgrad_vhat_is_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g = Graph::cycle(5);
        let w = metropolis_weights(&g).unwrap();
        for mix_v in [false, true] {
            let mut c = cfg(OptimizerKind::DAmsgrad);
            c.mix_second_moment = mix_v;
            let mut nodes = vec![NodeState::new(vec![0.0; 4]); 5];
            for _ in 0..200 {
                let before: Vec<Vec<f64>> = nodes.iter().map(|n| n.moments.vhat.clone()).collect();
                let grads: Vec<Vec<f64>> = (0..5)
                    .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
                    .collect();
                damsgrad_update(&c, &mut nodes, &w, 0.01, &grads).unwrap();
                for (n, b) in nodes.iter().zip(&before) {
                    assert!(n.moments.vhat.iter().zip(b).all(|(a, b)| a >= b));
                }
            }
        }
    }

    /// Straight-line AMSGrad without bias correction.
    fn amsgrad_reference(theta0: &[f64], grads: &[Vec<f64>], alpha: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut theta = theta0.to_vec();
        let mut m = vec![0.0; theta.len()];
        let mut v = vec![0.0; theta.len()];
        let mut vh = vec![0.0; theta.len()];
        for g in grads {
            for k in 0..theta.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                vh[k] = f64::max(vh[k], v[k]);
                theta[k] -= alpha * m[k] / (vh[k].sqrt() + eps);
            }
        }
        theta
    }

    #[test]
    fn damsgrad_single_node_is_amsgrad() {
        let w = metropolis_weights(&Graph::empty(1)).unwrap();
        let grads: Vec<Vec<f64>> = (0..20)
            .map(|t| vec![(t as f64 * 0.7).sin(), 1.0 / (1.0 + t as f64), -0.3])
            .collect();
        let theta0 = vec![0.2, -0.1, 0.0];
        let c = cfg(OptimizerKind::DAmsgrad);
        let mut nodes = vec![NodeState::new(theta0.clone())];
        for g in &grads {
            damsgrad_update(&c, &mut nodes, &w, 0.05, &[g.clone()]).unwrap();
        }
        let expect = amsgrad_reference(&theta0, &grads, 0.05);
        for k in 0..3 {
            assert!((nodes[0].theta[k] - expect[k]).abs() < 1e-14);
        }
    }

    /// Straight-line bias-corrected Adam.
    fn adam_reference(theta0: &[f64], grads: &[Vec<f64>], alpha: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut theta = theta0.to_vec();
        let mut m = vec![0.0; theta.len()];
        let mut v = vec![0.0; theta.len()];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            for k in 0..theta.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / (1.0 - b1.powi(t));
                let vh = v[k] / (1.0 - b2.powi(t));
                theta[k] -= alpha * mh / (vh.sqrt() + eps);
            }
        }
        theta
    }

    #[test]
    fn dadam_single_node_is_adam() {
        let w = metropolis_weights(&Graph::empty(1)).unwrap();
        let grads: Vec<Vec<f64>> = (0..15).map(|t| vec![(t as f64).cos(), 2.0 - t as f64 * 0.1]).collect();
        let theta0 = vec![1.0, -1.0];
        let c = cfg(OptimizerKind::DAdam);
        let mut nodes = vec![NodeState::new(theta0.clone())];
        for g in &grads {
            dadam_update(&c, &mut nodes, &w, 0.01, &[g.clone()]).unwrap();
        }
        let expect = adam_reference(&theta0, &grads, 0.01);
        for k in 0..2 {
            assert!((nodes[0].theta[k] - expect[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn dadam_zero_gradients_reduce_to_consensus() {
        let w = metropolis_weights(&Graph::path(2)).unwrap();
        let mut nodes = vec![NodeState::new(vec![1.0]), NodeState::new(vec![3.0])];
        dadam_update(&cfg(OptimizerKind::DAdam), &mut nodes, &w, 0.1, &[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(nodes[0].theta, vec![2.0]);
        assert_eq!(nodes[1].theta, vec![2.0]);
    }

    #[test]
    fn dadam_local_moments_diverge_under_asymmetric_data() {
        let w = metropolis_weights(&Graph::path(2)).unwrap();
        let mut nodes = vec![NodeState::new(vec![0.0, 0.0]); 2];
        let c = cfg(OptimizerKind::DAdam);
        for _ in 0..10 {
            dadam_update(&c, &mut nodes, &w, 0.01, &[vec![1.0, 0.0], vec![-1.0, 2.0]]).unwrap();
        }
        assert_ne!(nodes[0].moments.m, nodes[1].moments.m);
        // with moment mixing, first moments are pulled together
        let mut mixed = vec![NodeState::new(vec![0.0, 0.0]); 2];
        let c = cfg(OptimizerKind::DAmsgrad);
        for _ in 0..10 {
            damsgrad_update(&c, &mut mixed, &w, 0.01, &[vec![1.0, 0.0], vec![-1.0, 2.0]]).unwrap();
        }
        let gap = |s: &[NodeState]| (s[0].moments.m[0] - s[1].moments.m[0]).abs();
        assert!(gap(&mixed) < gap(&nodes));
    }

    #[test]
    fn dnaive_modes_agree_under_exact_consensus() {
        let w = metropolis_weights(&Graph::complete(4)).unwrap();
        let per_sample: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|b| (0..4).map(|i| vec![(b * 4 + i) as f64 * 0.1, -(i as f64)]).collect())
            .collect();
        let per_batch: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut s = vec![0.0; 2];
                for g in &per_sample {
                    s[0] += g[i][0];
                    s[1] += g[i][1];
                }
                s
            })
            .collect();
        let init = NodeState::new(vec![0.5, 0.5]);
        let mut a = vec![init.clone(); 4];
        let mut b = vec![init; 4];
        dnaive_update(&mut a, &w, 1, 0.1, NaiveGradients::PerSample(&per_sample)).unwrap();
        dnaive_update(&mut b, &w, 1, 0.1, NaiveGradients::PerBatch(&per_batch)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for k in 0..2 {
                assert!((x.theta[k] - y.theta[k]).abs() <= 1e-12);
            }
        }
        assert!(dnaive_update(&mut a, &w, 0, 0.1, NaiveGradients::PerBatch(&per_batch)).is_err());
    }

    #[test]
    fn dnaive_star_single_round_is_inexact() {
        let w = metropolis_weights(&Graph::star(5)).unwrap();
        let g: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let mean = 2.0;
        let out = consensus_rounds(&g, &w, 1).unwrap();
        assert!(out.iter().any(|v| (v[0] - mean).abs() > 1e-3));
    }

    #[test]
    fn central_sgd_steps() {
        let c = cfg(OptimizerKind::CentralSgd);
        let mut s = NodeState::new(vec![1.0, 2.0]);
        central_update(&c, 0.1, &mut s, &[0.0, 0.0]).unwrap();
        assert_eq!(s.theta, vec![1.0, 2.0]);
        central_update(&c, 0.1, &mut s, &[1.0, -2.0]).unwrap();
        assert_eq!(s.theta, vec![1.0 - 0.1, 2.0 + 0.2]);
        assert!(central_update(&cfg(OptimizerKind::DSgd), 0.1, &mut s, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn central_adam_matches_hand_recurrence() {
        // five steps of a fixed stream, unrolled by hand
        let grads = [0.5, -0.2, 0.1, 0.4, -0.3];
        let alpha = 0.01;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut theta) = (0.0, 0.0, 1.0);
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            theta -= alpha * mh / (vh.sqrt() + eps);
        }
        // first step of Adam moves by almost exactly alpha
        let mut s = NodeState::new(vec![1.0]);
        let c = cfg(OptimizerKind::CentralAdam);
        central_update(&c, alpha, &mut s, &[grads[0]]).unwrap();
        assert!((s.theta[0] - (1.0 - alpha)).abs() < 1e-9);
        for g in &grads[1..] {
            central_update(&c, alpha, &mut s, &[*g]).unwrap();
        }
        assert!((s.theta[0] - theta).abs() < 1e-15);
        assert_eq!(s.moments.t, 5);
    }
}
