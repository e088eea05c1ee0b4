//! Budgeted width growth.
//!
//! Every conv layer is offered one split candidate per existing channel and
//! a batch of fresh neurons. A growth epoch trains the candidates'
//! perturbations jointly on an enlarged copy of the network whose base
//! weights are frozen; each candidate is then scored and the best ones are
//! committed until the width budget `⌊(1+γ)·C(f)⌋` is reached.
//!
//! The enlarged network lays each layer out as `[base rows (W − D on split
//! channels), split copies (W + D), new neurons (R + D_in)]`. Split copies
//! in the previous layer halve the incoming columns they share, new
//! neurons of the previous layer feed the base rows and copies through
//! their trainable outgoing weights `O`.

use crate::error::{Error, Result};
use crate::nn::{Network, NeuronInit, ParamVars, Topology};
use crate::rng::{self, Rng};
use crate::tensor::{Activation, Tape, Tensor, Var};
use crate::train::{flop_estimate, Counters, Run, Stream, TrainConfig, TRAIN_FLOP_FACTOR};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            lr: 9e-5,
            alpha: 0.1,
            momentum: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowthConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub new_per_layer: usize,
    pub growth_epochs: usize,
    pub rmsprop: RmsProp,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            epsilon: 0.01,
            new_per_layer: 70,
            growth_epochs: 1,
            rmsprop: RmsProp::default(),
        }
    }
}

impl GrowthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!(
                "gamma must be ≥ 0, got {}",
                self.gamma
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.1) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 0.1], got {}",
                self.epsilon
            )));
        }
        if !(self.rmsprop.lr > 0.0) {
            return Err(Error::Config(
                "growth learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `⌊(1+γ)·c⌋`, guarded against products like `1.9 · 270` landing just
/// below an integer.
pub fn budget_target(complexity: usize, gamma: f64) -> usize {
    ((1.0 + gamma) * complexity as f64 + 1e-9).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CandidateKind {
    Split { channel: usize },
    New,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthCandidate {
    pub id: usize,
    pub layer: usize,
    pub kind: CandidateKind,
    /// Fixed random incoming weights of a new neuron; empty for splits.
    pub base_in: Vec<f64>,
    /// Incoming perturbation over the layer's original input channels.
    pub delta_in: Vec<f64>,
    /// Outgoing weights of a new neuron; empty for splits.
    pub delta_out: Vec<f64>,
    pub score: f64,
}

impl GrowthCandidate {
    /// Trainable part, flattened.
    pub fn delta(&self) -> Vec<f64> {
        let mut d = self.delta_in.clone();
        d.extend_from_slice(&self.delta_out);
        d
    }

    pub fn with_zero_delta(&self) -> Self {
        Self {
            delta_in: vec![0.0; self.delta_in.len()],
            delta_out: vec![0.0; self.delta_out.len()],
            ..self.clone()
        }
    }
}

/// One split per existing channel and `new_per_layer` fresh neurons per
/// layer. Perturbations start at `U(−ε, ε)`.
pub fn propose(net: &Network, cfg: &GrowthConfig, rng: &mut Rng) -> Vec<GrowthCandidate> {
    let eps = cfg.epsilon;
    let mut out = Vec::new();
    for layer in 0..net.topology().depth() {
        let inc = net.incoming_len(layer);
        let outc = net.outgoing_len(layer);
        let uniform = |len: usize, rng: &mut Rng| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-eps..eps)).collect()
        };
        for channel in 0..net.topology().widths[layer] {
            let delta_in = uniform(inc, rng);
            out.push(GrowthCandidate {
                id: out.len(),
                layer,
                kind: CandidateKind::Split { channel },
                base_in: Vec::new(),
                delta_in,
                delta_out: Vec::new(),
                score: 0.0,
            });
        }
        for _ in 0..cfg.new_per_layer {
            let base_in = uniform(inc, rng);
            let delta_in = uniform(inc, rng);
            let delta_out = uniform(outc, rng);
            out.push(GrowthCandidate {
                id: out.len(),
                layer,
                kind: CandidateKind::New,
                base_in,
                delta_in,
                delta_out,
                score: 0.0,
            });
        }
    }
    out
}

/// First-order loss-decrease estimate `‖mean ∂L/∂δ‖ · ‖δ‖`.
pub fn score(mean_grad: &[f64], delta: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    norm(mean_grad) * norm(delta)
}

/// Candidates of one layer, indices into the candidate slice.
#[derive(Debug, Clone, Default)]
struct LayerPlan {
    splits: Vec<(usize, usize)>,
    news: Vec<usize>,
}

fn plan(net: &Network, cands: &[GrowthCandidate]) -> Result<Vec<LayerPlan>> {
    let topo = net.topology();
    let mut plans = vec![LayerPlan::default(); topo.depth()];
    for (i, c) in cands.iter().enumerate() {
        if c.layer >= topo.depth() {
            return Err(Error::Growth(format!(
                "candidate {} targets missing layer {}",
                c.id, c.layer
            )));
        }
        let inc = net.incoming_len(c.layer);
        if c.delta_in.len() != inc {
            return Err(Error::Growth(format!(
                "candidate {} has {} incoming values, layer {} needs {inc}",
                c.id,
                c.delta_in.len(),
                c.layer
            )));
        }
        match c.kind {
            CandidateKind::Split { channel } => {
                if channel >= topo.widths[c.layer] {
                    return Err(Error::Growth(format!(
                        "candidate {} splits channel {channel} of a {}-wide layer",
                        c.id, topo.widths[c.layer]
                    )));
                }
                if plans[c.layer].splits.iter().any(|&(_, ch)| ch == channel) {
                    return Err(Error::Growth(format!(
                        "channel {channel} of layer {} is split twice",
                        c.layer
                    )));
                }
                plans[c.layer].splits.push((i, channel));
            }
            CandidateKind::New => {
                if c.base_in.len() != inc || c.delta_out.len() != net.outgoing_len(c.layer) {
                    return Err(Error::Growth(format!(
                        "new-neuron candidate {} has inconsistent slices",
                        c.id
                    )));
                }
                plans[c.layer].news.push(i);
            }
        }
    }
    Ok(plans)
}

/// A trainable buffer of the enlarged network with RMSprop state and the
/// running gradient sum.
#[derive(Debug, Clone)]
struct Buf {
    shape: Vec<usize>,
    data: Vec<f64>,
    square: Vec<f64>,
    momentum: Vec<f64>,
    grad_sum: Vec<f64>,
}

impl Buf {
    fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape,
            data,
            square: vec![0.0; n],
            momentum: vec![0.0; n],
            grad_sum: vec![0.0; n],
        }
    }

    fn register(&self, tape: &mut Tape) -> Var {
        let t = Tensor::new(self.shape.clone(), self.data.clone())
            .expect("buffer shape matches data")
            .with_grad();
        tape.leaf(&t)
    }

    fn update(&mut self, g: &[f64], cfg: &RmsProp) {
        for i in 0..self.data.len() {
            self.grad_sum[i] += g[i];
            self.square[i] = cfg.alpha * self.square[i] + (1.0 - cfg.alpha) * g[i] * g[i];
            let step = g[i] / (self.square[i].sqrt() + cfg.eps);
            self.momentum[i] = cfg.momentum * self.momentum[i] + step;
            self.data[i] -= cfg.lr * self.momentum[i];
        }
    }
}

/// Constant pieces and trainable buffers of one enlarged layer.
struct AugLayer {
    plan: LayerPlan,
    base: Vec<f64>,
    bias: Vec<f64>,
    width: usize,
    fan: usize,
    /// `[w, s]` one-hot rows placing split deltas on their channels.
    scatter: Vec<f64>,
    /// `[s, w]`, the transpose.
    gather: Vec<f64>,
    /// Base rows of the split channels, `[s, fan]`.
    split_rows: Vec<f64>,
    /// `[n, fan]`.
    new_base: Vec<f64>,
    /// Maps base columns onto `[base, copies]` columns, halving the split
    /// ones; `None` when the previous layer has no split candidates.
    expand: Option<(usize, Vec<f64>)>,
    d: Option<Buf>,
    din: Option<Buf>,
    out: Option<Buf>,
}

struct AugNet {
    layers: Vec<AugLayer>,
    head_const: Vec<f64>,
    head_bias: Vec<f64>,
    topology: Topology,
}

impl AugNet {
    fn new(net: &Network, cands: &[GrowthCandidate]) -> Result<Self> {
        let plans = plan(net, cands)?;
        let topo = net.topology();
        let k2 = topo.kernel * topo.kernel;
        let depth = topo.depth();
        let mut layers: Vec<AugLayer> = Vec::with_capacity(depth);
        for (l, plan) in plans.iter().enumerate() {
            let w = topo.widths[l];
            let fan = net.incoming_len(l);
            let (s, n) = (plan.splits.len(), plan.news.len());
            let base = net.convs()[l].weight.data().to_vec();
            let mut bias = net.convs()[l].bias.data().to_vec();
            let mut scatter = vec![0.0; w * s];
            let mut gather = vec![0.0; s * w];
            let mut split_rows = Vec::with_capacity(s * fan);
            let mut d = Vec::with_capacity(s * fan);
            for (t, &(ci, ch)) in plan.splits.iter().enumerate() {
                scatter[ch * s + t] = 1.0;
                gather[t * w + ch] = 1.0;
                split_rows.extend_from_slice(&base[ch * fan..(ch + 1) * fan]);
                bias.push(net.convs()[l].bias.data()[ch]);
                d.extend_from_slice(&cands[ci].delta_in);
            }
            bias.extend(std::iter::repeat(0.0).take(n));
            let mut new_base = Vec::with_capacity(n * fan);
            let mut din = Vec::with_capacity(n * fan);
            for &ci in &plan.news {
                new_base.extend_from_slice(&cands[ci].base_in);
                din.extend_from_slice(&cands[ci].delta_in);
            }
            let out = if n == 0 {
                None
            } else if l + 1 < depth {
                let next = topo.widths[l + 1];
                let mut o = vec![0.0; next * n * k2];
                for (k, &ci) in plan.news.iter().enumerate() {
                    let src = &cands[ci].delta_out;
                    for r in 0..next {
                        o[r * n * k2 + k * k2..r * n * k2 + (k + 1) * k2]
                            .copy_from_slice(&src[r * k2..(r + 1) * k2]);
                    }
                }
                Some(Buf::new(vec![next, n * k2], o))
            } else {
                let rows = topo.head_spatial();
                let c = topo.num_classes;
                let mut o = Vec::with_capacity(n * rows * c);
                for &ci in &plan.news {
                    o.extend_from_slice(&cands[ci].delta_out);
                }
                Some(Buf::new(vec![n * rows, c], o))
            };
            let expand = if l > 0 && !plans[l - 1].splits.is_empty() {
                let cin = topo.in_channels(l);
                let prev = &plans[l - 1].splits;
                let cols = (cin + prev.len()) * k2;
                let mut m = vec![0.0; fan * cols];
                let mut halve = vec![1.0; cin];
                for &(_, ch) in prev {
                    halve[ch] = 0.5;
                }
                for j in 0..cin {
                    for q in 0..k2 {
                        m[(j * k2 + q) * cols + j * k2 + q] = halve[j];
                    }
                }
                for (t, &(_, ch)) in prev.iter().enumerate() {
                    for q in 0..k2 {
                        m[(ch * k2 + q) * cols + (cin + t) * k2 + q] = 0.5;
                    }
                }
                Some((cols, m))
            } else {
                None
            };
            layers.push(AugLayer {
                plan: plan.clone(),
                base,
                bias,
                width: w,
                fan,
                scatter,
                gather,
                split_rows,
                new_base,
                expand,
                d: (s > 0).then(|| Buf::new(vec![s, fan], d)),
                din: (n > 0).then(|| Buf::new(vec![n, fan], din)),
                out,
            });
        }

        let last = &plans[depth - 1];
        let rows = topo.head_spatial();
        let c = topo.num_classes;
        let block = rows * c;
        let hb = net.head().weight.data();
        let mut head_const = hb.to_vec();
        for &(_, ch) in &last.splits {
            for v in &mut head_const[ch * block..(ch + 1) * block] {
                *v *= 0.5;
            }
        }
        for &(_, ch) in &last.splits {
            head_const.extend(hb[ch * block..(ch + 1) * block].iter().map(|v| 0.5 * v));
        }

        let mut topology = topo.clone();
        for (l, p) in plans.iter().enumerate() {
            topology.widths[l] += p.splits.len() + p.news.len();
        }
        Ok(Self {
            layers,
            head_const,
            head_bias: net.head().bias.data().to_vec(),
            topology,
        })
    }

    /// Puts the enlarged network on the tape. Returns the parameter handles
    /// and the trainable vars per layer as `(d, din, out)`.
    #[allow(clippy::type_complexity)]
    fn register(
        &self,
        tape: &mut Tape,
    ) -> Result<(ParamVars, Vec<(Option<Var>, Option<Var>, Option<Var>)>)> {
        let k = self.topology.kernel;
        let k2 = k * k;
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut vars: Vec<(Option<Var>, Option<Var>, Option<Var>)> =
            Vec::with_capacity(self.layers.len());
        for (l, al) in self.layers.iter().enumerate() {
            let (w, fan) = (al.width, al.fan);
            let (s, n) = (al.plan.splits.len(), al.plan.news.len());
            let d = al.d.as_ref().map(|b| b.register(tape));
            let din = al.din.as_ref().map(|b| b.register(tape));
            let out = al.out.as_ref().map(|b| b.register(tape));

            let base = tape.constant(&[w, fan], al.base.clone())?;
            let mut parts = Vec::with_capacity(3);
            if let Some(d) = d {
                let sc = tape.constant(&[w, s], al.scatter.clone())?;
                let zero = tape.constant(&[fan], vec![0.0; fan])?;
                let spread = tape.dense(sc, d, zero)?;
                parts.push(tape.sub(base, spread)?);
                let rows = tape.constant(&[s, fan], al.split_rows.clone())?;
                parts.push(tape.add(rows, d)?);
            } else {
                parts.push(base);
            }
            if let Some(din) = din {
                let r = tape.constant(&[n, fan], al.new_base.clone())?;
                parts.push(tape.add(r, din)?);
            }
            let mut v = if parts.len() == 1 {
                parts[0]
            } else {
                tape.concat(&parts, 0)?
            };
            let rows = w + s + n;
            let mut cin = fan / k2;
            if let Some((cols, m)) = &al.expand {
                let mv = tape.constant(&[fan, *cols], m.clone())?;
                let zero = tape.constant(&[*cols], vec![0.0; *cols])?;
                v = tape.dense(v, mv, zero)?;
                cin = cols / k2;
            }
            if l > 0 {
                if let (_, _, Some(o_prev)) = vars[l - 1] {
                    let n_prev = self.layers[l - 1].plan.news.len();
                    let width = n_prev * k2;
                    let mut oparts = vec![o_prev];
                    if s > 0 {
                        let g = tape.constant(&[s, w], al.gather.clone())?;
                        let zero = tape.constant(&[width], vec![0.0; width])?;
                        oparts.push(tape.dense(g, o_prev, zero)?);
                    }
                    if n > 0 {
                        oparts.push(tape.constant(&[n, width], vec![0.0; n * width])?);
                    }
                    let ocat = if oparts.len() == 1 {
                        oparts[0]
                    } else {
                        tape.concat(&oparts, 0)?
                    };
                    v = tape.concat(&[v, ocat], 1)?;
                    cin += n_prev;
                }
            }
            let weight = tape.reshape(v, &[rows, cin, k, k])?;
            let bias = tape.constant(&[rows], al.bias.clone())?;
            convs.push((weight, bias));
            vars.push((d, din, out));
        }
        let c = self.topology.num_classes;
        let fixed_rows = self.head_const.len() / c;
        let hconst = tape.constant(&[fixed_rows, c], self.head_const.clone())?;
        let hw = match vars.last().and_then(|v| v.2) {
            Some(o) => tape.concat(&[hconst, o], 0)?,
            None => hconst,
        };
        let hb = tape.constant(&[c], self.head_bias.clone())?;
        Ok((
            ParamVars {
                convs,
                head: (hw, hb),
            },
            vars,
        ))
    }

    /// Copies trained deltas back and scores every candidate from the mean
    /// gradient over `batches` steps.
    fn write_back(&self, cands: &mut [GrowthCandidate], batches: usize) {
        let k2 = self.topology.kernel * self.topology.kernel;
        let depth = self.layers.len();
        let scale = 1.0 / batches.max(1) as f64;
        for (l, al) in self.layers.iter().enumerate() {
            let fan = al.fan;
            if let Some(d) = &al.d {
                for (t, &(ci, _)) in al.plan.splits.iter().enumerate() {
                    let c = &mut cands[ci];
                    c.delta_in = d.data[t * fan..(t + 1) * fan].to_vec();
                    let g: Vec<f64> = d.grad_sum[t * fan..(t + 1) * fan]
                        .iter()
                        .map(|v| v * scale)
                        .collect();
                    c.score = score(&g, &c.delta_in);
                }
            }
            let n = al.plan.news.len();
            for (k, &ci) in al.plan.news.iter().enumerate() {
                let din = al.din.as_ref().expect("new neurons have incoming deltas");
                let out = al.out.as_ref().expect("new neurons have outgoing weights");
                let mut delta_in = din.data[k * fan..(k + 1) * fan].to_vec();
                let mut grad: Vec<f64> = din.grad_sum[k * fan..(k + 1) * fan].to_vec();
                let (mut delta_out, mut gout) = (Vec::new(), Vec::new());
                if l + 1 < depth {
                    let next = out.shape[0];
                    for r in 0..next {
                        let at = r * n * k2 + k * k2;
                        delta_out.extend_from_slice(&out.data[at..at + k2]);
                        gout.extend_from_slice(&out.grad_sum[at..at + k2]);
                    }
                } else {
                    let block = out.data.len() / n;
                    delta_out = out.data[k * block..(k + 1) * block].to_vec();
                    gout = out.grad_sum[k * block..(k + 1) * block].to_vec();
                }
                grad.extend(gout);
                for g in &mut grad {
                    *g *= scale;
                }
                let c = &mut cands[ci];
                std::mem::swap(&mut c.delta_in, &mut delta_in);
                c.delta_out = delta_out;
                c.score = score(&grad, &c.delta());
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GrowthEpochOutcome {
    pub counters: Counters,
    pub mean_loss: f64,
    pub batches: usize,
}

/// Trains the candidates' perturbations for `cfg.growth_epochs` epochs with
/// the base network frozen, then scores them. `epoch_key` seeds the
/// shuffles of the first epoch.
pub fn growth_epoch(
    net: &Network,
    cands: &mut [GrowthCandidate],
    stream: &Stream,
    cfg: &GrowthConfig,
    epoch_key: u64,
) -> Result<GrowthEpochOutcome> {
    cfg.validate()?;
    if stream.data.is_empty() {
        return Err(Error::Empty("growth data stream".into()));
    }
    if cands.is_empty() {
        return Ok(GrowthEpochOutcome::default());
    }
    let mut aug = AugNet::new(net, cands)?;
    let shape = net.topology().input_shape;
    let views = stream.views() as u64;
    let flops_per_pass = flop_estimate(&aug.topology) * TRAIN_FLOP_FACTOR;
    let mut outcome = GrowthEpochOutcome::default();
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    for ep in 0..cfg.growth_epochs {
        let key = epoch_key + ep as u64;
        for idx in stream.epoch_batches(key) {
            let batch = stream.make_batch(&idx, key)?;
            let mut tape = Tape::new();
            let (params, vars) = aug.register(&mut tape)?;
            let x = batch.input(&mut tape, shape)?;
            let logits = aug.topology.forward(&mut tape, &params, x)?;
            let loss = batch.loss(&mut tape, logits)?;
            loss_sum += tape.scalar(loss) * idx.len() as f64;
            seen += idx.len();
            tape.backward(loss)?;
            for (al, (d, din, out)) in aug.layers.iter_mut().zip(&vars) {
                for (buf, var) in [(&mut al.d, d), (&mut al.din, din), (&mut al.out, out)] {
                    if let (Some(buf), Some(var)) = (buf.as_mut(), var) {
                        let g = tape.grad(*var).expect("trainable delta").to_vec();
                        buf.update(&g, &cfg.rmsprop);
                    }
                }
            }
            outcome.batches += 1;
            outcome.counters.steps += 1;
            outcome.counters.sample_passes += idx.len() as u64 * views;
            outcome.counters.flops += idx.len() as u64 * views * flops_per_pass;
        }
    }
    aug.write_back(cands, outcome.batches);
    outcome.mean_loss = loss_sum / seen.max(1) as f64;
    Ok(outcome)
}

/// One committed candidate, as written to the growth trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthEvent {
    pub step: usize,
    pub layer: usize,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel: Option<usize>,
    pub score: f64,
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CommitOutcome {
    pub net: Network,
    pub events: Vec<GrowthEvent>,
    pub target: usize,
    /// Set when the budget did not allow a single neuron.
    pub warning: Option<String>,
}

/// Indices of the candidates to commit: best score first, ties broken by
/// `(layer, id)`.
pub fn select(cands: &[GrowthCandidate], budget: usize) -> Result<Vec<usize>> {
    if let Some(c) = cands.iter().find(|c| !c.score.is_finite()) {
        return Err(Error::Growth(format!(
            "candidate {} has score {}",
            c.id, c.score
        )));
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&cands[a], &cands[b]);
        y.score
            .total_cmp(&x.score)
            .then(x.layer.cmp(&y.layer))
            .then(x.id.cmp(&y.id))
    });
    order.truncate(budget);
    Ok(order)
}

pub fn select_commit(
    net: &Network,
    scored: &[GrowthCandidate],
    gamma: f64,
) -> Result<CommitOutcome> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be ≥ 0, got {gamma}")));
    }
    select_commit_to(net, scored, budget_target(net.complexity(), gamma), 0)
}

/// Greedy commit until the width sum reaches `target`.
pub fn select_commit_to(
    net: &Network,
    scored: &[GrowthCandidate],
    target: usize,
    step: usize,
) -> Result<CommitOutcome> {
    let current = net.complexity();
    if target <= current {
        return Ok(CommitOutcome {
            net: net.clone(),
            events: Vec::new(),
            target,
            warning: Some(format!(
                "growth budget {target} leaves no room above complexity {current}; network unchanged"
            )),
        });
    }
    let chosen = select(scored, target - current)?;
    let (grown, events) = commit(net, scored, &chosen, step)?;
    Ok(CommitOutcome {
        net: grown,
        events,
        target,
        warning: None,
    })
}

/// Applies the chosen candidates layer by layer. Deltas are defined over
/// the layer's original inputs; columns whose source channel was split in
/// the previous layer share the delta equally between the two copies, and
/// columns from the previous layer's new neurons get none.
pub fn commit(
    net: &Network,
    cands: &[GrowthCandidate],
    chosen: &[usize],
    step: usize,
) -> Result<(Network, Vec<GrowthEvent>)> {
    let picked: Vec<GrowthCandidate> = chosen.iter().map(|&i| cands[i].clone()).collect();
    plan(net, &picked)?;
    let original = net.topology().clone();
    let k2 = original.kernel * original.kernel;
    let relu = original.activation == Activation::Relu;
    let mut grown = net.clone();
    let mut events = Vec::with_capacity(picked.len());
    let mut prev_copies: Vec<usize> = Vec::new();
    for layer in 0..original.depth() {
        let cin = original.in_channels(layer);
        let extra = grown.topology().in_channels(layer) - cin;
        let copies = prev_copies.clone();
        let expand = |base: &[f64]| -> Vec<f64> {
            let mut v = vec![0.0; (cin + extra) * k2];
            v[..cin * k2].copy_from_slice(base);
            for (t, &ch) in copies.iter().enumerate() {
                for q in 0..k2 {
                    let half = 0.5 * base[ch * k2 + q];
                    v[ch * k2 + q] = half;
                    v[(cin + t) * k2 + q] = half;
                }
            }
            v
        };
        let mut mine: Vec<&GrowthCandidate> = picked.iter().filter(|c| c.layer == layer).collect();
        mine.sort_by_key(|c| (matches!(c.kind, CandidateKind::New), c.id));
        prev_copies.clear();
        for c in mine {
            match c.kind {
                CandidateKind::Split { channel } => {
                    grown.split(layer, channel, &expand(&c.delta_in))?;
                    prev_copies.push(channel);
                }
                CandidateKind::New => {
                    let summed: Vec<f64> = c
                        .base_in
                        .iter()
                        .zip(&c.delta_in)
                        .map(|(a, b)| a + b)
                        .collect();
                    let mut incoming = expand(&summed);
                    let mut outgoing = c.delta_out.clone();
                    let norm = incoming.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if relu && norm > 0.0 {
                        // relu(a·z) = a·relu(z) for a > 0, so moving scale
                        // from the outgoing to the incoming side keeps the
                        // function while giving the neuron a usable fan-in.
                        let a = 2f64.sqrt() / norm;
                        incoming.iter_mut().for_each(|v| *v *= a);
                        outgoing.iter_mut().for_each(|v| *v /= a);
                    }
                    grown.widen(
                        layer,
                        &[NeuronInit {
                            incoming,
                            bias: 0.0,
                            outgoing,
                        }],
                    )?;
                }
            }
            events.push(GrowthEvent {
                step,
                layer,
                kind: match c.kind {
                    CandidateKind::Split { .. } => "split".into(),
                    CandidateKind::New => "new".into(),
                },
                channel: match c.kind {
                    CandidateKind::Split { channel } => Some(channel),
                    CandidateKind::New => None,
                },
                score: c.score,
                widths: grown.topology().widths.clone(),
            });
        }
    }
    Ok((grown, events))
}

/// Per-step complexity targets of an `m`-step schedule starting from `c0`:
/// `⌊c0·(1+γ)^(i/m)⌋`, the last one exactly `⌊(1+γ)·c0⌋`.
pub fn m_shot_targets(c0: usize, gamma: f64, m: usize) -> Vec<usize> {
    (1..=m)
        .map(|i| {
            if i == m {
                budget_target(c0, gamma)
            } else {
                (c0 as f64 * (1.0 + gamma).powf(i as f64 / m as f64) + 1e-9).floor() as usize
            }
        })
        .collect()
}

/// Splits `total` epochs over `stages` stages, remainder to the earliest.
pub fn split_epochs(total: usize, stages: usize) -> Vec<usize> {
    (0..stages)
        .map(|i| total / stages + usize::from(i < total % stages))
        .collect()
}

/// Propose, run the growth epoch and commit up to `target`.
pub fn growth_step(
    net: Network,
    stream: &Stream,
    target: usize,
    step: usize,
    cfg: &GrowthConfig,
    seed: u64,
    run: &mut Run,
) -> Result<Network> {
    cfg.validate()?;
    run.growth_steps += 1;
    if target <= net.complexity() {
        run.warn(format!(
            "growth step {step}: target {target} does not exceed complexity {}; skipped",
            net.complexity()
        ));
        return Ok(net);
    }
    let mut r = rng::substream(seed, "growth", &[step as u64]);
    let mut cands = propose(&net, cfg, &mut r);
    let outcome = growth_epoch(&net, &mut cands, stream, cfg, run.epoch() as u64)?;
    let committed = select_commit_to(&net, &cands, target, step)?;
    if let Some(w) = committed.warning {
        run.warn(w);
    }
    run.trace.extend(committed.events);
    run.record_growth(
        outcome.counters,
        cfg.growth_epochs,
        outcome.mean_loss,
        &committed.net,
        &format!("grow{step}"),
    );
    Ok(committed.net)
}

/// Trains `f0` for `stage_epochs[0]` epochs, then alternates growth steps
/// towards `targets[i]` with training for `stage_epochs[i + 1]` epochs.
pub fn grow_schedule(
    f0: Network,
    stream: &Stream,
    stage_epochs: &[usize],
    targets: &[usize],
    cfg: &GrowthConfig,
    tcfg: &TrainConfig,
    run: &mut Run,
) -> Result<Network> {
    if stage_epochs.len() != targets.len() + 1 {
        return Err(Error::Config(format!(
            "{} training stages for {} growth steps",
            stage_epochs.len(),
            targets.len()
        )));
    }
    let mut net = f0;
    run.train_stage(&mut net, stream, stage_epochs[0], tcfg, "stage1")?;
    for (i, &target) in targets.iter().enumerate() {
        net = growth_step(net, stream, target, i + 1, cfg, tcfg.seed, run)?;
        run.train_stage(
            &mut net,
            stream,
            stage_epochs[i + 1],
            tcfg,
            &format!("stage{}", i + 2),
        )?;
    }
    Ok(net)
}

/// One-shot growth: train `e1`, grow once, train `e2`.
pub fn osg(
    f0: Network,
    stream: &Stream,
    e1: usize,
    e2: usize,
    cfg: &GrowthConfig,
    tcfg: &TrainConfig,
    run: &mut Run,
) -> Result<Network> {
    let target = budget_target(f0.complexity(), cfg.gamma);
    grow_schedule(f0, stream, &[e1, e2], &[target], cfg, tcfg, run)
}

/// `m` growth steps with geometric per-step budgets reaching the one-shot
/// size; `epochs_total` training epochs spread over the `m + 1` stages.
#[allow(clippy::too_many_arguments)]
pub fn m_shot(
    f0: Network,
    stream: &Stream,
    m: usize,
    total_gamma: f64,
    epochs_total: usize,
    cfg: &GrowthConfig,
    tcfg: &TrainConfig,
    run: &mut Run,
) -> Result<Network> {
    if m == 0 {
        return Err(Error::Config("m-shot growth needs m ≥ 1".into()));
    }
    if !(total_gamma >= 0.0) {
        return Err(Error::Config(format!(
            "gamma must be ≥ 0, got {total_gamma}"
        )));
    }
    let targets = m_shot_targets(f0.complexity(), total_gamma, m);
    grow_schedule(
        f0,
        stream,
        &split_epochs(epochs_total, m + 1),
        &targets,
        cfg,
        tcfg,
        run,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_shapes, ShapesConfig};
    use crate::train::Objective;

    fn small_net(seed: u64) -> Network {
        let topo = Topology::plain(3, 4, 3, [3, 8, 8]);
        Network::build(topo, seed).unwrap()
    }

    fn shapes() -> crate::data::Dataset {
        gen_shapes(&ShapesConfig {
            seed: 1,
            n_train: 24,
            n_test: 3,
            classes: 3,
            size: 8,
            ..Default::default()
        })
        .unwrap()
        .0
    }

    #[test]
    fn proposal_counts() {
        let net = Network::build(Topology::desk_backbone(3), 0).unwrap();
        let mut r = rng::substream(0, "g", &[]);
        let c = propose(&net, &GrowthConfig::default(), &mut r);
        assert_eq!(c.len(), 6 * (45 + 70));
        let cfg = GrowthConfig {
            new_per_layer: 0,
            ..Default::default()
        };
        assert_eq!(propose(&net, &cfg, &mut r).len(), 270);
        assert!(c.iter().all(|c| c.delta().iter().all(|v| v.abs() < 0.01)));
    }

    #[test]
    fn budget_arithmetic() {
        assert_eq!(budget_target(270, 0.9), 513);
        assert_eq!(budget_target(270, 0.0), 270);
        assert_eq!(m_shot_targets(270, 0.9, 2), vec![372, 513]);
        assert_eq!(m_shot_targets(270, 0.9, 1), vec![513]);
        assert_eq!(split_epochs(20, 3), vec![7, 7, 6]);
        assert_eq!(split_epochs(20, 2), vec![10, 10]);
    }

    #[test]
    fn zero_delta_commit_preserves_logits() {
        let net = small_net(2);
        let x: Vec<f64> = (0..2 * 3 * 64)
            .map(|i| ((i * 37) % 101) as f64 / 100.0)
            .collect();
        let before = net.logits(&x).unwrap();
        let mut r = rng::substream(2, "g", &[]);
        let cands = propose(
            &net,
            &GrowthConfig {
                new_per_layer: 3,
                ..Default::default()
            },
            &mut r,
        );
        let zeroed: Vec<_> = cands.iter().map(|c| c.with_zero_delta()).collect();
        let all: Vec<usize> = (0..zeroed.len()).collect();
        let (grown, _) = commit(&net, &zeroed, &all, 0).unwrap();
        assert_eq!(grown.complexity(), net.complexity() + zeroed.len());
        let after = grown.logits(&x).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn growth_epoch_freezes_base_and_is_deterministic() {
        let net = small_net(3);
        let data = shapes();
        let stream = Stream::new(&data, Objective::Clean, 0, 8);
        let cfg = GrowthConfig {
            new_per_layer: 2,
            ..Default::default()
        };
        let snapshot = net.clone();
        let mut a = propose(&net, &cfg, &mut rng::substream(0, "g", &[]));
        let mut b = a.clone();
        let out = growth_epoch(&net, &mut a, &stream, &cfg, 0).unwrap();
        growth_epoch(&net, &mut b, &stream, &cfg, 0).unwrap();
        assert_eq!(net, snapshot);
        assert_eq!(out.batches, 3);
        assert_eq!(out.counters.sample_passes, 24);
        assert!(a.iter().all(|c| c.score.is_finite() && c.score >= 0.0));
        assert!(a.iter().any(|c| c.score > 0.0));
        assert_eq!(a, b);
    }

    #[test]
    fn aligned_direction_scores_higher() {
        // Linear loss L(θ) = g·θ; candidate k perturbs θ along u_k with
        // coefficient δ_k, so ∂L/∂δ_k = g·u_k.
        let g = [0.6, -0.8, 0.0];
        let aligned = [0.6, -0.8, 0.0];
        let orthogonal = [0.8, 0.6, 0.0];
        let dot = |u: &[f64]| g.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
        let s1 = score(&[dot(&aligned)], &[0.01]);
        let s2 = score(&[dot(&orthogonal)], &[0.01]);
        assert!(s1 > s2);
        assert_eq!(score(&[0.0, 0.0], &[0.3, 0.1]), 0.0);
    }

    #[test]
    fn ties_break_by_layer_then_id() {
        let net = small_net(4);
        let mut r = rng::substream(4, "g", &[]);
        let cands = propose(
            &net,
            &GrowthConfig {
                new_per_layer: 1,
                ..Default::default()
            },
            &mut r,
        );
        let chosen = select(&cands, 5).unwrap();
        assert_eq!(chosen, vec![0, 1, 2, 3, 4]);
        let out = select_commit(&net, &cands, 0.0).unwrap();
        assert!(out.warning.is_some());
        assert_eq!(out.net, net);
    }

    #[test]
    fn commit_saturates_budget() {
        let net = small_net(5);
        let mut r = rng::substream(5, "g", &[]);
        let mut cands = propose(
            &net,
            &GrowthConfig {
                new_per_layer: 4,
                ..Default::default()
            },
            &mut r,
        );
        for (i, c) in cands.iter_mut().enumerate() {
            c.score = ((i * 7919) % 13) as f64;
        }
        let out = select_commit(&net, &cands, 0.9).unwrap();
        assert_eq!(out.net.complexity(), budget_target(12, 0.9));
        assert_eq!(out.events.len(), out.net.complexity() - 12);
    }

    #[test]
    fn bad_scores_rejected() {
        let net = small_net(6);
        let mut cands = propose(
            &net,
            &GrowthConfig::default(),
            &mut rng::substream(6, "g", &[]),
        );
        cands[3].score = f64::NAN;
        assert!(select_commit(&net, &cands, 0.5).is_err());
    }
}
