use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gearlab::analyze;
use gearlab::corrupt;
use gearlab::data::{gen_shapes, Dataset, ShapesConfig};
use gearlab::era::ChainParams;
use gearlab::experiment::{self, ExperimentSpec, RunRecord};
use gearlab::nn::{Network, Topology};
use gearlab::train::write_atomic;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Grow compact CNNs, train them for corruption robustness and analyse
/// the results.
#[derive(Parser, Debug)]
#[command(name = "gearlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the procedural shapes dataset into train/test containers.
    GenData(GenData),
    /// Execute one experiment spec end to end.
    Run {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Run several specs on the same data and tabulate them side by side.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        specs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep augmentation chain settings from a shared phase-1 network.
    AblateEra {
        #[arg(long)]
        spec: PathBuf,
        /// Cells as W,D,J; the standard ten-cell grid when omitted.
        #[arg(long, num_args = 1.., value_parser = parse_cell)]
        grid: Vec<ChainParams>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare one-shot against m-step growth at the same final size.
    GrowthSteps {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, num_args = 1.., default_values_t = [1usize, 2, 3, 4])]
        m: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Topology statistics, Fourier spectra or loss slices.
    Analyze(Analyze),
}

#[derive(clap::Args, Debug)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    n_train: usize,
    #[arg(long, default_value_t = 600)]
    n_test: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum What {
    Topology,
    Fourier,
    LossSlice,
}

#[derive(clap::Args, Debug)]
struct Analyze {
    #[arg(long, value_enum)]
    what: What,
    /// Run directories (topology).
    #[arg(long, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Dataset container: test split for fourier, training split for loss-slice.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to slice (loss-slice).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 21)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restrict fourier to one severity level.
    #[arg(long)]
    severity: Option<u8>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_cell(s: &str) -> std::result::Result<ChainParams, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [w, d, j] => {
            let c = ChainParams::new(w, d, j);
            c.validate().map_err(|e| e.to_string())?;
            Ok(c)
        }
        _ => Err(format!("expected W,D,J, got {s:?}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(g) => gen_data(g),
        Command::Run { spec } => {
            let spec = load_spec(&spec)?;
            let rec = experiment::run_spec(&spec)?;
            print_record(&rec, &spec.out);
            Ok(())
        }
        Command::Compare { specs, out } => {
            let specs = specs
                .iter()
                .map(|p| load_spec(p))
                .collect::<Result<Vec<_>>>()?;
            let rows = experiment::compare(&specs)?;
            let csv = experiment::compare_csv(&rows);
            write_out(&out, &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::AblateEra { spec, grid, out } => {
            let spec = load_spec(&spec)?;
            let grid = if grid.is_empty() {
                experiment::ERA_GRID
                    .iter()
                    .map(|&(w, d, j)| ChainParams::new(w, d, j))
                    .collect()
            } else {
                grid
            };
            let rows = experiment::ablate_era(&spec, &grid)?;
            let csv = experiment::ablation_csv(&rows);
            write_out(&out, &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::GrowthSteps { spec, m, out } => {
            if m.contains(&0) {
                bail!("--m values must be at least 1");
            }
            let spec = load_spec(&spec)?;
            let rows = experiment::growth_steps(&spec, &m)?;
            let csv = experiment::steps_csv(&rows);
            write_out(&out, &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::Analyze(a) => analyze_cmd(a),
    }
}

fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    ExperimentSpec::load(path).with_context(|| format!("loading spec {}", path.display()))
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_record(rec: &RunRecord, out: &Path) {
    println!("method       {}", rec.method.name());
    println!("topology     {:?}", rec.topology.widths);
    println!(
        "size         {:.2}% of params",
        100.0 * rec.size.param_fraction
    );
    println!("A_cln        {:.2}", 100.0 * rec.a_cln);
    println!("A_rob        {:.2}", 100.0 * rec.a_rob);
    println!("steps        {}", rec.counters.steps);
    println!("passes       {}", rec.counters.sample_passes);
    println!("flops        {}", rec.counters.flops);
    for w in &rec.warnings {
        println!("warning      {w}");
    }
    println!("record       {}", out.display());
}

fn gen_data(g: GenData) -> Result<()> {
    let cfg = ShapesConfig {
        seed: g.seed,
        n_train: g.n_train,
        n_test: g.n_test,
        classes: g.classes,
        size: g.size,
    };
    let (train, test) = gen_shapes(&cfg)?;
    std::fs::create_dir_all(&g.out)?;
    for d in [&train, &test] {
        let path = g.out.join(format!("{}.gds", d.split()));
        d.save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("{}  {} samples  {}", d.digest(), d.len(), path.display());
    }
    Ok(())
}

fn load_data(path: &Option<PathBuf>) -> Result<Dataset> {
    let path = path.as_ref().context("--data is required")?;
    Dataset::load(path).with_context(|| format!("loading {}", path.display()))
}

fn analyze_cmd(a: Analyze) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    match a.what {
        What::Topology => {
            if a.runs.is_empty() {
                bail!("--runs is required for topology");
            }
            let topologies = a
                .runs
                .iter()
                .map(|dir| {
                    let path = dir.join("topology.json");
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    Ok(serde_json::from_str::<Topology>(&text)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let stats = analyze::topology_report(&topologies)?;
            let title = format!("mean width per layer over {} runs", topologies.len());
            write_out(&a.out.join("topology.csv"), &analyze::topology_csv(&stats))?;
            write_out(
                &a.out.join("topology.svg"),
                &analyze::topology_svg(&stats, &title),
            )?;
            print!("{}", analyze::topology_csv(&stats));
        }
        What::Fourier => {
            let test = load_data(&a.data)?;
            let suite: Vec<_> = corrupt::standard_suite()
                .into_iter()
                .filter(|c| a.severity.map_or(true, |s| c.severity == s))
                .collect();
            if suite.is_empty() {
                bail!("no corruption cells at severity {:?}", a.severity);
            }
            let report = analyze::fourier_report(&test, &suite, &ChainParams::default(), a.seed)?;
            for (name, p) in &report {
                write_out(&a.out.join(format!("{name}.csv")), &p.radial_csv())?;
                write_out(&a.out.join(format!("{name}.pgm")), &p.magnitude_pgm())?;
            }
            let summary = analyze::fourier_summary_csv(&report);
            write_out(&a.out.join("summary.csv"), &summary)?;
            print!("{summary}");
        }
        What::LossSlice => {
            let data = load_data(&a.data)?;
            let ckpt = a.checkpoint.as_ref().context("--checkpoint is required")?;
            let (net, _) =
                Network::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let curve = analyze::loss_slice(
                &net,
                &data,
                analyze::mean_cross_entropy,
                a.points,
                (-1.0, 1.0),
                a.seed,
            )?;
            let csv = analyze::curve_csv(&curve);
            write_out(&a.out.join("loss_slice.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}
