//! Optimisation, the training pipelines and run bookkeeping.

use crate::corrupt::{accuracy, robust_accuracy_on, CorruptedSet};
use crate::data::Dataset;
use crate::era::{self, ChainParams, TransformSet};
use crate::error::{Error, Result};
use crate::grow::{self, GrowthConfig, GrowthEvent};
use crate::nn::{Network, Topology};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Set from the experiment-level seed, never from the nested config.
    #[serde(skip)]
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the consistency term in the augmented loss.
    pub lambda: f64,
    /// Stage 1 epochs (before growth).
    pub e1: usize,
    /// Stage 2 epochs (after growth).
    pub e2: usize,
    /// Robust-training epochs of the second phase.
    pub er: usize,
    /// Epochs of the fixed-topology baselines.
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda: 12.0,
            e1: 10,
            e2: 10,
            er: 10,
            epochs: 40,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config(
                "momentum, weight decay or lambda out of range".into(),
            ));
        }
        Ok(())
    }
}

/// Step schedule: ×0.1 at half and again at three quarters of `total`.
pub fn lr_at(base: f64, epoch: usize, total: usize) -> f64 {
    let mut lr = base;
    if 2 * epoch >= total {
        lr *= 0.1;
    }
    if 4 * epoch >= 3 * total {
        lr *= 0.1;
    }
    lr
}

/// Heavy-ball SGD with coupled weight decay:
/// `v ← μv + g + λw`, `w ← w − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: Vec::new(),
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Config(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.len() != params.len()
            || self
                .velocity
                .iter()
                .zip(params.iter())
                .any(|(v, p)| v.len() != p.numel())
        {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if g.len() != p.numel() {
                return Err(Error::Config(format!(
                    "gradient of length {} for a parameter of {}",
                    g.len(),
                    p.numel()
                )));
            }
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Forward FLOPs per sample: twice the multiply-accumulates of every conv
/// layer and the head.
pub fn flop_estimate(topology: &Topology) -> u64 {
    let k2 = (topology.kernel * topology.kernel) as u64;
    let extents = topology
        .spatial_extents()
        .unwrap_or_else(|_| vec![(0, 0); topology.depth() + 1]);
    let mut macs = 0u64;
    for l in 0..topology.depth() {
        let (h, w) = extents[l];
        macs += (topology.in_channels(l) * topology.widths[l]) as u64 * k2 * (h * w) as u64;
    }
    let (h, w) = extents[topology.depth()];
    macs += (*topology.widths.last().expect("non-empty") * h * w * topology.num_classes) as u64;
    2 * macs
}

/// A training pass (forward and backward) is charged three forward passes.
pub const TRAIN_FLOP_FACTOR: u64 = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: u64,
    pub sample_passes: u64,
    pub flops: u64,
}

impl Counters {
    pub fn add(&mut self, other: Counters) {
        self.steps += other.steps;
        self.sample_passes += other.sample_passes;
        self.flops += other.flops;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EraConfig {
    pub chain: ChainParams,
    pub lambda: f64,
    #[serde(default)]
    pub transforms: TransformSet,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Cross-entropy on the raw samples.
    Clean,
    /// ERA-expanded views with the augmented loss.
    Robust(EraConfig),
}

impl Objective {
    pub fn views(&self) -> usize {
        match self {
            Objective::Clean => 1,
            Objective::Robust(e) => e.chain.views_per_sample(),
        }
    }
}

/// `views` stacked copies of one minibatch, view-major.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub views: usize,
    pub lambda: f64,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.labels.len() * self.views
    }

    pub fn input(&self, tape: &mut Tape, shape: [usize; 3]) -> Result<Var> {
        let [c, h, w] = shape;
        Ok(tape.constant(&[self.rows(), c, h, w], self.images.clone())?)
    }

    pub fn loss(&self, tape: &mut Tape, logits: Var) -> Result<Var> {
        era::aug_loss(tape, logits, &self.labels, self.views, self.lambda)
    }
}

/// Shuffled minibatches of a dataset under an objective. Shuffling and
/// augmentation are keyed by `(seed, epoch)` and `(seed, sample, epoch)`.
#[derive(Debug, Clone)]
pub struct Stream<'a> {
    pub data: &'a Dataset,
    pub objective: Objective,
    pub seed: u64,
    pub batch_size: usize,
}

impl<'a> Stream<'a> {
    pub fn new(data: &'a Dataset, objective: Objective, seed: u64, batch_size: usize) -> Self {
        Self {
            data,
            objective,
            seed,
            batch_size,
        }
    }

    pub fn views(&self) -> usize {
        self.objective.views()
    }

    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng::substream(self.seed, "shuffle", &[epoch]));
        order
            .chunks(self.batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }

    pub fn make_batch(&self, indices: &[usize], epoch: u64) -> Result<Batch> {
        let labels: Vec<usize> = indices.iter().map(|&i| self.data.labels()[i]).collect();
        match &self.objective {
            Objective::Clean => {
                let mut images = Vec::with_capacity(indices.len() * self.data.pixels_per_image());
                for &i in indices {
                    images.extend_from_slice(self.data.image(i));
                }
                Ok(Batch {
                    images,
                    labels,
                    views: 1,
                    lambda: 0.0,
                })
            }
            Objective::Robust(cfg) => {
                let views = cfg.chain.views_per_sample();
                let per = self.data.pixels_per_image();
                let n = indices.len();
                let mut images = vec![0.0; views * n * per];
                for (k, &i) in indices.iter().enumerate() {
                    let mut r = rng::substream(self.seed, "era", &[i as u64, epoch]);
                    let t = era::expand(
                        self.data.image(i),
                        labels[k],
                        self.data.shape(),
                        &mut r,
                        &cfg.chain,
                        &cfg.transforms,
                    )?;
                    for (v, img) in t.views.iter().enumerate() {
                        images[(v * n + k) * per..(v * n + k + 1) * per].copy_from_slice(img);
                    }
                }
                Ok(Batch {
                    images,
                    labels,
                    views,
                    lambda: cfg.lambda,
                })
            }
        }
    }
}

/// Held-out clean and corrupted test data used at stage ends.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub test: Dataset,
    pub corrupted: CorruptedSet,
}

impl Evaluator {
    pub fn evaluate(&self, net: &Network) -> Result<(f64, f64)> {
        let a_cln = accuracy(net, &self.test)?;
        let a_rob = robust_accuracy_on(net, &self.corrupted)?.a_rob;
        Ok((a_cln, a_rob))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub stage: String,
    pub loss: f64,
    pub lr: f64,
    pub a_cln: Option<f64>,
    pub a_rob: Option<f64>,
    pub complexity: usize,
    pub steps: u64,
    pub sample_passes: u64,
    pub flops: u64,
}

/// Everything a run accumulates: per-epoch metrics, counters and the
/// growth trace.
#[derive(Debug, Clone)]
pub struct Run<'e> {
    pub counters: Counters,
    pub rows: Vec<MetricRow>,
    pub trace: Vec<GrowthEvent>,
    pub growth_steps: usize,
    pub warnings: Vec<String>,
    epoch: usize,
    evaluator: Option<&'e Evaluator>,
}

impl<'e> Run<'e> {
    pub fn new(evaluator: Option<&'e Evaluator>) -> Self {
        Self {
            counters: Counters::default(),
            rows: Vec::new(),
            trace: Vec::new(),
            growth_steps: 0,
            warnings: Vec::new(),
            epoch: 0,
            evaluator,
        }
    }

    /// Epochs consumed so far, used to key shuffles and augmentation.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn warn(&mut self, message: String) {
        log::warn!("{message}");
        self.warnings.push(message);
    }

    /// Advances the epoch key without training, so a run resumed from a
    /// checkpoint draws the same shuffles and augmentations.
    pub fn skip_epochs(&mut self, epochs: usize) {
        self.epoch += epochs;
    }

    pub fn last_accuracies(&self) -> Option<(f64, f64)> {
        self.rows
            .iter()
            .rev()
            .find_map(|r| Some((r.a_cln?, r.a_rob?)))
    }

    /// Trains `net` for `epochs` epochs with SGD and the step schedule.
    /// Evaluates at the final epoch of the stage when an evaluator is set.
    pub fn train_stage(
        &mut self,
        net: &mut Network,
        stream: &Stream,
        epochs: usize,
        cfg: &TrainConfig,
        stage: &str,
    ) -> Result<()> {
        cfg.validate()?;
        if stream.data.is_empty() && epochs > 0 {
            return Err(Error::Empty("training data".into()));
        }
        let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
        let views = stream.views() as u64;
        let flops_per_pass = flop_estimate(net.topology()) * TRAIN_FLOP_FACTOR;
        let shape = net.topology().input_shape;
        for e in 0..epochs {
            let lr = lr_at(cfg.lr, e, epochs);
            let key = self.epoch as u64;
            let mut loss_sum = 0.0;
            let mut seen = 0usize;
            for idx in stream.epoch_batches(key) {
                let batch = stream.make_batch(&idx, key)?;
                let mut tape = Tape::new();
                let params = net.register(&mut tape, true);
                let x = batch.input(&mut tape, shape)?;
                let logits = net.forward(&mut tape, &params, x)?;
                let loss = batch.loss(&mut tape, logits)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Config(format!(
                        "loss diverged to {value} in stage {stage} epoch {e}"
                    )));
                }
                tape.backward(loss)?;
                let vars = Network::flatten_vars(&params);
                let grads: Vec<Vec<f64>> = vars
                    .iter()
                    .map(|&v| tape.grad(v).expect("trainable leaf").to_vec())
                    .collect();
                let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
                sgd.step(&mut net.parameters_mut(), &grad_refs, lr)?;
                loss_sum += value * idx.len() as f64;
                seen += idx.len();
                self.counters.steps += 1;
                self.counters.sample_passes += idx.len() as u64 * views;
                self.counters.flops += idx.len() as u64 * views * flops_per_pass;
            }
            self.epoch += 1;
            log::info!(
                "{stage} epoch {} loss {:.4} lr {lr}",
                self.epoch,
                loss_sum / seen.max(1) as f64
            );
            let (a_cln, a_rob) = match self.evaluator {
                Some(ev) if e + 1 == epochs => {
                    let (c, r) = ev.evaluate(net)?;
                    (Some(c), Some(r))
                }
                _ => (None, None),
            };
            self.rows.push(MetricRow {
                epoch: self.epoch,
                stage: stage.to_string(),
                loss: loss_sum / seen.max(1) as f64,
                lr,
                a_cln,
                a_rob,
                complexity: net.complexity(),
                steps: self.counters.steps,
                sample_passes: self.counters.sample_passes,
                flops: self.counters.flops,
            });
        }
        Ok(())
    }

    /// Bookkeeping for a growth epoch that does not go through
    /// [`Run::train_stage`].
    pub(crate) fn record_growth(
        &mut self,
        spent: Counters,
        epochs: usize,
        loss: f64,
        net: &Network,
        stage: &str,
    ) {
        self.counters.add(spent);
        self.epoch += epochs;
        self.rows.push(MetricRow {
            epoch: self.epoch,
            stage: stage.to_string(),
            loss,
            lr: 0.0,
            a_cln: None,
            a_rob: None,
            complexity: net.complexity(),
            steps: self.counters.steps,
            sample_passes: self.counters.sample_passes,
            flops: self.counters.flops,
        });
    }

    pub fn metrics_csv(&self) -> String {
        let mut s =
            String::from("epoch,stage,loss,lr,a_cln,a_rob,complexity,steps,sample_passes,flops\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.stage,
                r.loss,
                r.lr,
                opt(r.a_cln),
                opt(r.a_rob),
                r.complexity,
                r.steps,
                r.sample_passes,
                r.flops
            ));
        }
        s
    }

    pub fn growth_trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect()
    }
}

pub fn train_clean(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    run: &mut Run,
) -> Result<()> {
    let stream = Stream::new(data, Objective::Clean, cfg.seed, cfg.batch_size);
    run.train_stage(net, &stream, epochs, cfg, "clean")
}

pub fn train_robust(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    chain: ChainParams,
    run: &mut Run,
) -> Result<()> {
    let stream = robust_stream(data, cfg, chain);
    run.train_stage(net, &stream, epochs, cfg, "robust")
}

fn robust_stream<'a>(data: &'a Dataset, cfg: &TrainConfig, chain: ChainParams) -> Stream<'a> {
    Stream::new(
        data,
        Objective::Robust(EraConfig {
            chain,
            lambda: cfg.lambda,
            transforms: TransformSet::standard(),
        }),
        cfg.seed,
        cfg.batch_size,
    )
}

/// One-phase pipeline: growth and both training stages on ERA views with
/// the augmented loss.
pub fn gearnn1(
    f0: Network,
    data: &Dataset,
    cfg: &TrainConfig,
    growth: &GrowthConfig,
    chain: ChainParams,
    run: &mut Run,
) -> Result<Network> {
    let stream = robust_stream(data, cfg, chain);
    grow::osg(f0, &stream, cfg.e1, cfg.e2, growth, cfg, run)
}

/// Two-phase pipeline: one-shot growth on clean data, then ERA training of
/// the grown network for `er` epochs.
pub fn gearnn2(
    f0: Network,
    data: &Dataset,
    cfg: &TrainConfig,
    growth: &GrowthConfig,
    chain: ChainParams,
    run: &mut Run,
) -> Result<Network> {
    let clean = Stream::new(data, Objective::Clean, cfg.seed, cfg.batch_size);
    let mut net = grow::osg(f0, &clean, cfg.e1, cfg.e2, growth, cfg, run)?;
    let stream = robust_stream(data, cfg, chain);
    run.train_stage(&mut net, &stream, cfg.er, cfg, "phase2")?;
    Ok(net)
}

/// Two-phase pipeline whose first phase grows in `m` steps; the epochs of
/// `e1 + e2` are spread over the `m + 1` training stages.
pub fn gearnn2_mshot(
    f0: Network,
    data: &Dataset,
    cfg: &TrainConfig,
    growth: &GrowthConfig,
    chain: ChainParams,
    m: usize,
    run: &mut Run,
) -> Result<Network> {
    let clean = Stream::new(data, Objective::Clean, cfg.seed, cfg.batch_size);
    let mut net = grow::m_shot(
        f0,
        &clean,
        m,
        growth.gamma,
        cfg.e1 + cfg.e2,
        growth,
        cfg,
        run,
    )?;
    let stream = robust_stream(data, cfg, chain);
    run.train_stage(&mut net, &stream, cfg.er, cfg, "phase2")?;
    Ok(net)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Clean,
    Augmented,
}

/// Fixed-topology network trained from scratch for `cfg.epochs` epochs.
pub fn baseline_small(
    kind: BaselineKind,
    topology: Topology,
    data: &Dataset,
    cfg: &TrainConfig,
    chain: ChainParams,
    run: &mut Run,
) -> Result<Network> {
    let mut net = Network::build(topology, cfg.seed)?;
    match kind {
        BaselineKind::Clean => {
            let stream = Stream::new(data, Objective::Clean, cfg.seed, cfg.batch_size);
            run.train_stage(&mut net, &stream, cfg.epochs, cfg, "small_clean")?;
        }
        BaselineKind::Augmented => {
            let stream = robust_stream(data, cfg, chain);
            run.train_stage(&mut net, &stream, cfg.epochs, cfg, "small_aug")?;
        }
    }
    Ok(net)
}

/// Writes `contents` to `path` through a temporary file and a rename, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
