//! Gated recurrent unit with a linear Q-value head.
//!
//! Parameters live in one flat vector; [`Block`] names the slices. The cell is
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! n  = tanh(W_n x + U_n (r ⊙ h) + b_n)
//! h' = (1 − z) ⊙ h + z ⊙ n
//! q  = W_o h' + b_o
//! ```
//!
//! [`forward_episode`] records a tape that [`backward_episode`] replays in
//! reverse to produce exact gradients.

use crate::bandit::{Choice, Policy, StepRecord};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl NetShape {
    /// Shape for a bandit agent: one-hot previous action plus scaled reward in,
    /// one Q-value per arm out.
    pub fn for_bandit(num_arms: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim: num_arms + 1,
            hidden_dim,
            output_dim: num_arms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidParameter(format!("net shape {self:?}")));
        }
        Ok(())
    }

    /// `(rows, cols)` of a block; biases are `rows × 1`.
    pub fn dims(&self, block: Block) -> (usize, usize) {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        match block {
            Block::Wz | Block::Wr | Block::Wn => (h, i),
            Block::Uz | Block::Ur | Block::Un => (h, h),
            Block::Bz | Block::Br | Block::Bn => (h, 1),
            Block::Wo => (o, h),
            Block::Bo => (o, 1),
        }
    }

    pub fn offset(&self, block: Block) -> usize {
        Block::ALL
            .iter()
            .take_while(|&&b| b != block)
            .map(|&b| {
                let (r, c) = self.dims(b);
                r * c
            })
            .sum()
    }

    pub fn num_params(&self) -> usize {
        Block::ALL
            .iter()
            .map(|&b| {
                let (r, c) = self.dims(b);
                r * c
            })
            .sum()
    }

    /// Group id of every parameter: one group per row of each weight matrix,
    /// with every bias entry joining the row of its input matrix (`W_*`, or
    /// `W_o` for the head).
    pub fn groups(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.num_params()];
        let mut next = 0u32;
        let assign = |out: &mut [u32], blocks: &[Block], next: &mut u32| {
            let rows = self.dims(blocks[0]).0;
            for row in 0..rows {
                for &b in blocks {
                    let (_, cols) = self.dims(b);
                    let start = self.offset(b) + row * cols;
                    out[start..start + cols].fill(*next);
                }
                *next += 1;
            }
        };
        assign(&mut out, &[Block::Wz, Block::Bz], &mut next);
        assign(&mut out, &[Block::Uz], &mut next);
        assign(&mut out, &[Block::Wr, Block::Br], &mut next);
        assign(&mut out, &[Block::Ur], &mut next);
        assign(&mut out, &[Block::Wn, Block::Bn], &mut next);
        assign(&mut out, &[Block::Un], &mut next);
        assign(&mut out, &[Block::Wo, Block::Bo], &mut next);
        out
    }

    pub fn num_groups(&self) -> usize {
        6 * self.hidden_dim + self.output_dim
    }
}

/// Named parameter blocks, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Wz,
    Uz,
    Bz,
    Wr,
    Ur,
    Br,
    Wn,
    Un,
    Bn,
    Wo,
    Bo,
}

impl Block {
    pub const ALL: [Block; 11] = [
        Block::Wz,
        Block::Uz,
        Block::Bz,
        Block::Wr,
        Block::Ur,
        Block::Br,
        Block::Wn,
        Block::Un,
        Block::Bn,
        Block::Wo,
        Block::Bo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Wz => "update_input",
            Block::Uz => "update_recurrent",
            Block::Bz => "update_bias",
            Block::Wr => "reset_input",
            Block::Ur => "reset_recurrent",
            Block::Br => "reset_bias",
            Block::Wn => "candidate_input",
            Block::Un => "candidate_recurrent",
            Block::Bn => "candidate_bias",
            Block::Wo => "head_weight",
            Block::Bo => "head_bias",
        }
    }
}

/// Network weights (or a gradient with the same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub shape: NetShape,
    pub data: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type ParamGradients = NetParams;

impl NetParams {
    pub fn zeros(shape: NetShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.num_params()],
        }
    }

    pub fn from_vec(shape: NetShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                data.len(),
                shape.num_params()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn block(&self, b: Block) -> &[f64] {
        let (r, c) = self.shape.dims(b);
        let o = self.shape.offset(b);
        &self.data[o..o + r * c]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        let (r, c) = self.shape.dims(b);
        let o = self.shape.offset(b);
        &mut self.data[o..o + r * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub type HiddenState = Vec<f64>;

/// Network input for one step: one-hot previous action followed by the
/// previous reward divided by `reward_scale`. All zeros at the first step.
pub fn encode_input(
    num_arms: usize,
    prev_action: Option<usize>,
    prev_reward: Option<f64>,
    reward_scale: f64,
) -> Vec<f64> {
    let mut x = vec![0.0; num_arms + 1];
    if let Some(a) = prev_action {
        if a < num_arms {
            x[a] = 1.0;
        }
    }
    if let Some(r) = prev_reward {
        x[num_arms] = r / reward_scale;
    }
    x
}

/// Inputs for a whole episode given its actions and rewards.
pub fn encode_episode(num_arms: usize, actions: &[usize], rewards: &[f64], reward_scale: f64) -> Vec<Vec<f64>> {
    (0..actions.len())
        .map(|t| {
            if t == 0 {
                encode_input(num_arms, None, None, reward_scale)
            } else {
                encode_input(num_arms, Some(actions[t - 1]), Some(rewards[t - 1]), reward_scale)
            }
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += M v` for row-major `M` with `v.len()` columns.
fn matvec_acc(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Mᵀ v`.
fn matvec_t_acc(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (vi, row) in v.iter().zip(m.chunks_exact(cols)) {
        if *vi != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += vi * a;
            }
        }
    }
}

/// `M += u vᵀ`.
fn outer_acc(m: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (ui, row) in u.iter().zip(m.chunks_exact_mut(cols)) {
        if *ui != 0.0 {
            for (a, vj) in row.iter_mut().zip(v) {
                *a += ui * vj;
            }
        }
    }
}

struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    h: Vec<f64>,
}

fn cell(params: &NetParams, h: &[f64], x: &[f64]) -> StepCache {
    let hd = params.shape.hidden_dim;
    let gate = |w: Block, u: Block, b: Block, hv: &[f64]| {
        let mut a = params.block(b).to_vec();
        matvec_acc(params.block(w), x, &mut a);
        matvec_acc(params.block(u), hv, &mut a);
        a
    };
    let z: Vec<f64> = gate(Block::Wz, Block::Uz, Block::Bz, h)
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f64> = gate(Block::Wr, Block::Ur, Block::Br, h)
        .into_iter()
        .map(sigmoid)
        .collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let n: Vec<f64> = gate(Block::Wn, Block::Un, Block::Bn, &rh)
        .into_iter()
        .map(f64::tanh)
        .collect();
    let mut h_new = vec![0.0; hd];
    for k in 0..hd {
        h_new[k] = (1.0 - z[k]) * h[k] + z[k] * n[k];
    }
    StepCache {
        x: x.to_vec(),
        h_prev: h.to_vec(),
        z,
        r,
        n,
        h: h_new,
    }
}

fn check_dims(params: &NetParams, h: &[f64], x: &[f64]) -> Result<()> {
    let s = params.shape;
    if h.len() != s.hidden_dim || x.len() != s.input_dim || params.data.len() != s.num_params() {
        return Err(Error::ShapeMismatch(format!(
            "hidden {} / input {} against shape {s:?}",
            h.len(),
            x.len()
        )));
    }
    Ok(())
}

/// One recurrent update.
pub fn gru_step(params: &NetParams, h: &[f64], x: &[f64]) -> Result<HiddenState> {
    check_dims(params, h, x)?;
    Ok(cell(params, h, x).h)
}

/// Linear head.
pub fn q_values(params: &NetParams, h: &[f64]) -> Vec<f64> {
    let mut q = params.block(Block::Bo).to_vec();
    matvec_acc(params.block(Block::Wo), h, &mut q);
    q
}

/// Index of the largest Q-value; ties go to the lowest index.
pub fn greedy_action(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Intermediate values of one forward pass.
pub struct Tape {
    steps: Vec<StepCache>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs the network over an episode from a zero hidden state.
pub fn forward_episode(params: &NetParams, inputs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Tape)> {
    if inputs.is_empty() {
        return Err(Error::InvalidParameter("empty input sequence".into()));
    }
    let mut h = vec![0.0; params.shape.hidden_dim];
    let mut qs = Vec::with_capacity(inputs.len());
    let mut steps = Vec::with_capacity(inputs.len());
    for x in inputs {
        check_dims(params, &h, x)?;
        let c = cell(params, &h, x);
        qs.push(q_values(params, &c.h));
        h.clone_from(&c.h);
        steps.push(c);
    }
    Ok((qs, Tape { steps }))
}

/// Gradient of `Σ_t ⟨q_grads[t], Q_t⟩` with respect to every parameter.
pub fn backward_episode(params: &NetParams, tape: &Tape, q_grads: &[Vec<f64>]) -> Result<ParamGradients> {
    let shape = params.shape;
    if q_grads.len() != tape.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} Q-gradients for a {}-step tape",
            q_grads.len(),
            tape.len()
        )));
    }
    let hd = shape.hidden_dim;
    let mut g = NetParams::zeros(shape);
    let mut dh_carry = vec![0.0; hd];
    let mut dh = vec![0.0; hd];
    let mut da_z = vec![0.0; hd];
    let mut da_r = vec![0.0; hd];
    let mut da_n = vec![0.0; hd];
    let mut drh = vec![0.0; hd];
    let mut rh = vec![0.0; hd];
    for (c, dq) in tape.steps.iter().zip(q_grads).rev() {
        if dq.len() != shape.output_dim {
            return Err(Error::ShapeMismatch(format!("Q-gradient of length {}", dq.len())));
        }
        outer_acc(g.block_mut(Block::Wo), dq, &c.h);
        for (b, d) in g.block_mut(Block::Bo).iter_mut().zip(dq) {
            *b += d;
        }
        dh.copy_from_slice(&dh_carry);
        matvec_t_acc(params.block(Block::Wo), dq, &mut dh);

        for k in 0..hd {
            let dz = dh[k] * (c.n[k] - c.h_prev[k]);
            da_z[k] = dz * c.z[k] * (1.0 - c.z[k]);
            da_n[k] = dh[k] * c.z[k] * (1.0 - c.n[k] * c.n[k]);
            dh_carry[k] = dh[k] * (1.0 - c.z[k]);
            rh[k] = c.r[k] * c.h_prev[k];
        }

        // candidate
        outer_acc(g.block_mut(Block::Wn), &da_n, &c.x);
        outer_acc(g.block_mut(Block::Un), &da_n, &rh);
        for (b, d) in g.block_mut(Block::Bn).iter_mut().zip(&da_n) {
            *b += d;
        }
        drh.fill(0.0);
        matvec_t_acc(params.block(Block::Un), &da_n, &mut drh);
        for k in 0..hd {
            da_r[k] = drh[k] * c.h_prev[k] * c.r[k] * (1.0 - c.r[k]);
            dh_carry[k] += drh[k] * c.r[k];
        }

        // reset gate
        outer_acc(g.block_mut(Block::Wr), &da_r, &c.x);
        outer_acc(g.block_mut(Block::Ur), &da_r, &c.h_prev);
        for (b, d) in g.block_mut(Block::Br).iter_mut().zip(&da_r) {
            *b += d;
        }
        matvec_t_acc(params.block(Block::Ur), &da_r, &mut dh_carry);

        // update gate
        outer_acc(g.block_mut(Block::Wz), &da_z, &c.x);
        outer_acc(g.block_mut(Block::Uz), &da_z, &c.h_prev);
        for (b, d) in g.block_mut(Block::Bz).iter_mut().zip(&da_z) {
            *b += d;
        }
        matvec_t_acc(params.block(Block::Uz), &da_z, &mut dh_carry);
    }
    Ok(g)
}

/// Greedy agent driven by a fixed parameter set.
///
/// Reported Q-values are converted back to reward units.
pub struct NetPolicy<'a> {
    params: &'a NetParams,
    reward_scale: f64,
    hidden: HiddenState,
    seen: usize,
}

impl<'a> NetPolicy<'a> {
    pub fn new(params: &'a NetParams, reward_scale: f64) -> Self {
        Self {
            params,
            reward_scale,
            hidden: vec![0.0; params.shape.hidden_dim],
            seen: 0,
        }
    }
}

impl Policy for NetPolicy<'_> {
    fn choose(&mut self, history: &[StepRecord], _rng: &mut StreamRng) -> Result<Choice> {
        let num_arms = self.params.shape.output_dim;
        if history.len() != self.seen + 1 || history.is_empty() {
            if !history.is_empty() {
                return Err(Error::InvalidParameter(
                    "network policy must observe every step of the episode".into(),
                ));
            }
            self.hidden.fill(0.0);
        }
        let x = match history.last() {
            None => encode_input(num_arms, None, None, self.reward_scale),
            Some(s) => encode_input(num_arms, Some(s.action), Some(s.reward), self.reward_scale),
        };
        self.hidden = gru_step(self.params, &self.hidden, &x)?;
        self.seen = history.len();
        let q = q_values(self.params, &self.hidden);
        let action = greedy_action(&q);
        Ok(Choice {
            action,
            q_values: Some(q.iter().map(|v| v * self.reward_scale).collect()),
            factors: None,
        })
    }
}
