//! JSON experiment specs and the drivers behind the command-line verbs.

use crate::corrupt::{
    self, robust_accuracy_on, CellAccuracy, CorruptedSet, Corruption, CorruptionKind,
};
use crate::data::{self, Dataset, ShapesConfig};
use crate::era::{ChainParams, TransformSet};
use crate::error::{Error, Result};
use crate::grow::{self, GrowthConfig, GrowthEvent};
use crate::nn::{Network, SizeReport, Topology};
use crate::train::{
    self, write_atomic, BaselineKind, Counters, EraConfig, Evaluator, MetricRow, Objective, Run,
    Stream, TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gearnn1,
    Gearnn2,
    SmallClean,
    SmallAug,
    Mshot,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gearnn1 => "gearnn1",
            Method::Gearnn2 => "gearnn2",
            Method::SmallClean => "small_clean",
            Method::SmallAug => "small_aug",
            Method::Mshot => "mshot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Shapes(ShapesConfig),
    Container { train: PathBuf, test: PathBuf },
    Cifar10 { train: Vec<PathBuf>, test: PathBuf },
}

impl DatasetSource {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSource::Shapes(cfg) => data::gen_shapes(cfg),
            DatasetSource::Container { train, test } => {
                Ok((Dataset::load(train)?, Dataset::load(test)?))
            }
            DatasetSource::Cifar10 { train, test } => {
                let mut parts = Vec::with_capacity(train.len());
                for p in train {
                    parts.push(data::read_cifar_binary(p)?);
                }
                let first = parts
                    .first()
                    .ok_or_else(|| Error::Config("no CIFAR-10 training files given".into()))?;
                let (shape, classes) = (first.shape(), first.num_classes());
                let mut images = Vec::new();
                let mut labels = Vec::new();
                let mut prov = Vec::new();
                for p in &parts {
                    images.extend_from_slice(p.images());
                    labels.extend_from_slice(p.labels());
                    prov.push(p.provenance().to_string());
                }
                let train = Dataset::new(images, labels, shape, classes, "train", prov.join("+"))?;
                Ok((train, data::read_cifar_binary(test)?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub kind: CorruptionKind,
    pub severity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub method: Method,
    pub dataset: DatasetSource,
    /// The single seed every random stream of the run derives from.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub growth: GrowthConfig,
    #[serde(default)]
    pub chain: ChainParams,
    /// Corruption cells; the full 5×5 suite when absent.
    #[serde(default)]
    pub suite: Option<Vec<SuiteEntry>>,
    /// Starting topology of the growing methods and the default topology of
    /// the baselines. Six layers of width 45 when absent.
    #[serde(default)]
    pub backbone: Option<Topology>,
    /// Run directory whose `topology.json` the baselines should adopt.
    #[serde(default)]
    pub topology_from: Option<PathBuf>,
    /// Growth steps of the `mshot` method.
    #[serde(default)]
    pub m: Option<usize>,
    pub out: PathBuf,
    /// Directory for cached corrupted test sets.
    #[serde(default)]
    pub corruption_cache: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut spec: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid experiment spec: {e}")))?;
        spec.set_seed(spec.seed);
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut spec = Self::from_json(&std::fs::read_to_string(path)?)?;
        // Relative paths inside a spec are relative to the spec file.
        if let Some(dir) = path.parent() {
            spec.rebase(dir);
        }
        Ok(spec)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.out);
        if let Some(p) = &mut self.topology_from {
            fix(p);
        }
        if let Some(p) = &mut self.corruption_cache {
            fix(p);
        }
        match &mut self.dataset {
            DatasetSource::Shapes(_) => {}
            DatasetSource::Container { train, test } => {
                fix(train);
                fix(test);
            }
            DatasetSource::Cifar10 { train, test } => {
                train.iter_mut().for_each(fix);
                fix(test);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.growth.validate()?;
        self.chain.validate()?;
        if let Some(t) = &self.backbone {
            t.validate()?;
        }
        if self.method == Method::Mshot && self.m.unwrap_or(0) == 0 {
            return Err(Error::Config("method mshot needs m ≥ 1".into()));
        }
        for e in self.suite.iter().flatten() {
            Corruption::new(e.kind, e.severity)?;
        }
        if matches!(self.suite.as_deref(), Some([])) {
            return Err(Error::Config("corruption suite is empty".into()));
        }
        TransformSet::standard().check_disjoint(&corrupt::kind_names())
    }

    pub fn corruptions(&self) -> Result<Vec<Corruption>> {
        match &self.suite {
            None => Ok(corrupt::standard_suite()),
            Some(entries) => entries
                .iter()
                .map(|e| Corruption::new(e.kind, e.severity))
                .collect(),
        }
    }

    fn backbone_for(&self, train: &Dataset) -> Topology {
        self.backbone
            .clone()
            .unwrap_or_else(|| Topology::plain(6, 45, train.num_classes(), train.shape()))
    }

    fn era(&self) -> Objective {
        Objective::Robust(EraConfig {
            chain: self.chain,
            lambda: self.train.lambda,
            transforms: TransformSet::standard(),
        })
    }
}

/// Persisted outcome of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub a_cln: f64,
    pub a_rob: f64,
    pub cells: Vec<CellAccuracy>,
    pub counters: Counters,
    pub topology: Topology,
    pub size: SizeReport,
    pub train_digest: String,
    pub test_digest: String,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub metrics: Vec<MetricRow>,
    #[serde(skip)]
    pub metrics_csv: String,
    #[serde(skip)]
    pub growth_trace: Vec<GrowthEvent>,
}

/// Loaded data plus the corrupted copies of its test split.
pub struct Prepared {
    pub train: Dataset,
    pub evaluator: Evaluator,
}

pub fn prepare(spec: &ExperimentSpec) -> Result<Prepared> {
    spec.validate()?;
    let (train, test) = spec.dataset.load()?;
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let suite = spec.corruptions()?;
    let seed = spec.train.seed;
    let corrupted = match &spec.corruption_cache {
        Some(dir) => CorruptedSet::cached(&test, &suite, seed, dir)?,
        None => CorruptedSet::generate(&test, &suite, seed)?,
    };
    Ok(Prepared {
        train,
        evaluator: Evaluator { test, corrupted },
    })
}

/// Networks produced by [`execute`]: the final one and, for the two-phase
/// methods, the network at the end of phase 1.
pub struct Outcome {
    pub record: RunRecord,
    pub net: Network,
    pub phase1: Option<Network>,
}

fn baseline_topology(spec: &ExperimentSpec, train: &Dataset) -> Result<Topology> {
    match &spec.topology_from {
        Some(dir) => {
            let text = std::fs::read_to_string(dir.join("topology.json"))?;
            let t: Topology = serde_json::from_str(&text)?;
            t.validate()?;
            Ok(t)
        }
        None => Ok(spec.backbone_for(train)),
    }
}

pub fn execute(spec: &ExperimentSpec, prep: &Prepared) -> Result<Outcome> {
    let cfg = &spec.train;
    let train = &prep.train;
    let mut run = Run::new(Some(&prep.evaluator));
    let clean = Stream::new(train, Objective::Clean, cfg.seed, cfg.batch_size);
    let robust = Stream::new(train, spec.era(), cfg.seed, cfg.batch_size);
    let mut phase1 = None;
    let net = match spec.method {
        Method::Gearnn1 => {
            let f0 = Network::build(spec.backbone_for(train), cfg.seed)?;
            grow::osg(f0, &robust, cfg.e1, cfg.e2, &spec.growth, cfg, &mut run)?
        }
        Method::Gearnn2 | Method::Mshot => {
            let f0 = Network::build(spec.backbone_for(train), cfg.seed)?;
            let mut net = match spec.method {
                Method::Gearnn2 => {
                    grow::osg(f0, &clean, cfg.e1, cfg.e2, &spec.growth, cfg, &mut run)?
                }
                _ => grow::m_shot(
                    f0,
                    &clean,
                    spec.m.unwrap_or(1),
                    spec.growth.gamma,
                    cfg.e1 + cfg.e2,
                    &spec.growth,
                    cfg,
                    &mut run,
                )?,
            };
            phase1 = Some(net.clone());
            run.train_stage(&mut net, &robust, cfg.er, cfg, "phase2")?;
            net
        }
        Method::SmallClean | Method::SmallAug => {
            let kind = if spec.method == Method::SmallClean {
                BaselineKind::Clean
            } else {
                BaselineKind::Augmented
            };
            let topology = baseline_topology(spec, train)?;
            train::baseline_small(kind, topology, train, cfg, spec.chain, &mut run)?
        }
    };
    let a_cln = corrupt::accuracy(&net, &prep.evaluator.test)?;
    let report = robust_accuracy_on(&net, &prep.evaluator.corrupted)?;
    let record = RunRecord {
        method: spec.method,
        seed: cfg.seed,
        a_cln,
        a_rob: report.a_rob,
        cells: report.cells,
        counters: run.counters,
        topology: net.topology().clone(),
        size: net.size_report(),
        train_digest: train.digest(),
        test_digest: prep.evaluator.test.digest(),
        warnings: run.warnings.clone(),
        metrics_csv: run.metrics_csv(),
        metrics: run.rows.clone(),
        growth_trace: run.trace.clone(),
    };
    Ok(Outcome {
        record,
        net,
        phase1,
    })
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    method: &'a str,
    files: Vec<&'a str>,
    /// Not part of any determinism guarantee.
    wall_clock_seconds: f64,
}

/// Writes the run directory: config, metrics, topology, growth trace,
/// checkpoints, result summary and a manifest.
pub fn write_record(spec: &ExperimentSpec, outcome: &Outcome, wall_clock: f64) -> Result<()> {
    let dir = &spec.out;
    std::fs::create_dir_all(dir)?;
    let rec = &outcome.record;
    let counters = serde_json::to_value(rec.counters)?;
    write_atomic(&dir.join("config.json"), &serde_json::to_vec_pretty(spec)?)?;
    write_atomic(
        &dir.join("topology.json"),
        &serde_json::to_vec_pretty(&rec.topology)?,
    )?;
    let trace: String = rec
        .growth_trace
        .iter()
        .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
        .collect();
    write_atomic(&dir.join("growth_trace.jsonl"), trace.as_bytes())?;
    write_atomic(&dir.join("result.json"), &serde_json::to_vec_pretty(rec)?)?;
    let mut files = vec![
        "config.json",
        "metrics.csv",
        "topology.json",
        "growth_trace.jsonl",
        "result.json",
        "final.ckpt",
    ];
    outcome.net.save(&dir.join("final.ckpt"), &counters)?;
    if let Some(p1) = &outcome.phase1 {
        p1.save(&dir.join("phase1.ckpt"), &counters)?;
        files.push("phase1.ckpt");
    }
    // Metrics go last so a present metrics.csv implies a complete run.
    write_atomic(&dir.join("metrics.csv"), rec.metrics_csv.as_bytes())?;
    let manifest = Manifest {
        method: rec.method.name(),
        files,
        wall_clock_seconds: wall_clock,
    };
    write_atomic(
        &dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Runs one spec end to end and writes its record directory.
pub fn run_spec(spec: &ExperimentSpec) -> Result<RunRecord> {
    let start = Instant::now();
    let prep = prepare(spec)?;
    let outcome = execute(spec, &prep)?;
    write_record(spec, &outcome, start.elapsed().as_secs_f64())?;
    Ok(outcome.record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub size_pct: f64,
    pub width_pct: f64,
    pub a_cln: f64,
    pub a_rob: f64,
    pub steps: u64,
    pub sample_passes: u64,
    pub flops: u64,
}

impl CompareRow {
    pub fn from_record(r: &RunRecord) -> Self {
        Self {
            method: r.method.name().into(),
            size_pct: 100.0 * r.size.param_fraction,
            width_pct: 100.0 * r.size.width_fraction,
            a_cln: 100.0 * r.a_cln,
            a_rob: 100.0 * r.a_rob,
            steps: r.counters.steps,
            sample_passes: r.counters.sample_passes,
            flops: r.counters.flops,
        }
    }
}

/// Runs the specs in order after checking that they all train and test on
/// the same data.
pub fn compare(specs: &[ExperimentSpec]) -> Result<Vec<CompareRow>> {
    let mut digests: Option<(String, String)> = None;
    for s in specs {
        let (train, test) = s.dataset.load()?;
        let d = (train.digest(), test.digest());
        match &digests {
            None => digests = Some(d),
            Some(first) if *first != d => {
                return Err(Error::Config(format!(
                    "dataset digest mismatch: {} trains on {}, the first spec on {}",
                    s.method.name(),
                    &d.0[..12],
                    &first.0[..12]
                )))
            }
            _ => {}
        }
    }
    specs
        .iter()
        .map(|s| run_spec(s).map(|r| CompareRow::from_record(&r)))
        .collect()
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("method,size_pct,width_pct,a_cln,a_rob,steps,sample_passes,flops\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{},{},{}\n",
            r.method, r.size_pct, r.width_pct, r.a_cln, r.a_rob, r.steps, r.sample_passes, r.flops
        ));
    }
    s
}

/// The `(W, D, J)` cells of the augmentation ablation.
pub const ERA_GRID: [(usize, usize, usize); 10] = [
    (1, 1, 0),
    (3, 1, 0),
    (1, 3, 0),
    (1, 1, 3),
    (3, 3, 0),
    (3, 1, 3),
    (1, 3, 3),
    (1, 3, 2),
    (1, 3, 4),
    (3, 3, 3),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub width: usize,
    pub depth: usize,
    pub views: usize,
    pub a_cln: f64,
    pub a_rob: f64,
    pub steps: u64,
    pub sample_passes: u64,
    pub flops: u64,
}

/// Phase 1 of the two-phase pipeline on clean data, shared by the ablations.
pub fn phase1(spec: &ExperimentSpec, prep: &Prepared) -> Result<(Network, Run<'static>)> {
    let cfg = &spec.train;
    let clean = Stream::new(&prep.train, Objective::Clean, cfg.seed, cfg.batch_size);
    let f0 = Network::build(spec.backbone_for(&prep.train), cfg.seed)?;
    let mut run = Run::new(None);
    let net = grow::osg(f0, &clean, cfg.e1, cfg.e2, &spec.growth, cfg, &mut run)?;
    Ok((net, run))
}

/// Trains a copy of `start` for `train.er` epochs under each chain setting
/// and reports accuracy and the cost of that training alone.
pub fn ablate_era_from(
    spec: &ExperimentSpec,
    prep: &Prepared,
    start: &Network,
    start_epoch: usize,
    grid: &[ChainParams],
) -> Result<Vec<AblationRow>> {
    let cfg = &spec.train;
    grid.iter()
        .map(|chain| {
            chain.validate()?;
            let objective = Objective::Robust(EraConfig {
                chain: *chain,
                lambda: cfg.lambda,
                transforms: TransformSet::standard(),
            });
            let stream = Stream::new(&prep.train, objective, cfg.seed, cfg.batch_size);
            let mut net = start.clone();
            let mut run = Run::new(None);
            run.skip_epochs(start_epoch);
            run.train_stage(&mut net, &stream, cfg.er, cfg, "phase2")?;
            let (a_cln, a_rob) = prep.evaluator.evaluate(&net)?;
            Ok(AblationRow {
                width: chain.width,
                depth: chain.depth,
                views: chain.views,
                a_cln: 100.0 * a_cln,
                a_rob: 100.0 * a_rob,
                steps: run.counters.steps,
                sample_passes: run.counters.sample_passes,
                flops: run.counters.flops,
            })
        })
        .collect()
}

pub fn ablate_era(spec: &ExperimentSpec, grid: &[ChainParams]) -> Result<Vec<AblationRow>> {
    let prep = prepare(spec)?;
    let (start, run) = phase1(spec, &prep)?;
    ablate_era_from(spec, &prep, &start, run.epoch(), grid)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("W,D,J,a_cln,a_rob,steps,sample_passes,flops\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.4},{:.4},{},{},{}\n",
            r.width, r.depth, r.views, r.a_cln, r.a_rob, r.steps, r.sample_passes, r.flops
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepsRow {
    pub m: usize,
    pub complexity: usize,
    pub a_cln: f64,
    pub a_rob: f64,
    pub steps: u64,
    pub sample_passes: u64,
    pub flops: u64,
}

/// Two-phase pipeline with an `m`-step first phase, for each `m`.
pub fn growth_steps(spec: &ExperimentSpec, ms: &[usize]) -> Result<Vec<StepsRow>> {
    let prep = prepare(spec)?;
    ms.iter()
        .map(|&m| {
            let mut s = spec.clone();
            s.method = Method::Mshot;
            s.m = Some(m);
            s.validate()?;
            let r = execute(&s, &prep)?.record;
            Ok(StepsRow {
                m,
                complexity: r.topology.complexity(),
                a_cln: 100.0 * r.a_cln,
                a_rob: 100.0 * r.a_rob,
                steps: r.counters.steps,
                sample_passes: r.counters.sample_passes,
                flops: r.counters.flops,
            })
        })
        .collect()
}

pub fn steps_csv(rows: &[StepsRow]) -> String {
    let mut s = String::from("m,complexity,a_cln,a_rob,steps,sample_passes,flops\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.4},{:.4},{},{},{}\n",
            r.m, r.complexity, r.a_cln, r.a_rob, r.steps, r.sample_passes, r.flops
        ));
    }
    s
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
