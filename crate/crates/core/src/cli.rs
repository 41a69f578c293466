//! Command-line entry point.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 runtime failure. Diagnostics go to standard error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::config::RunConfig;
use crate::costmap::Costmap;
use crate::costmodel::{adam_step, AdamState, Ensemble, ModelKind, Normalization};
use crate::dynamics::{step_unchecked, Control, State, Trajectory};
use crate::error::{Error, Result};
use crate::eval::{evaluate_mhd, navigate, plan_course, CostProvider, GroundTruth, NavReport, ZeroCost};
use crate::gridmap::{GridMap, MapMeta, N_CHANNELS};
use crate::io;
use crate::irl::train;
use crate::mppi::{solve, svf, PhaseTimings};
use crate::seed;
use crate::selftest;
use crate::worldgen::{build_dataset, generate_world, DemoSample, World, WINDOW_LEN};

#[derive(Parser, Debug)]
#[command(name = "offroad-irl", version, about = "Risk-aware costmap learning with MPPI-based maximum-entropy IRL")]
struct Cli {
    /// TOML configuration file with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set mppi.irl.samples=512`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world.
    GenWorld {
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect expert demonstrations into a dataset directory.
    Collect {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        demos: Option<usize>,
    },
    /// Train an ensemble on a dataset's training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        kind: Option<ModelKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        members: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log; defaults to the checkpoint path with `.train.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Open-loop MHD evaluation on a dataset's test split.
    EvalMhd {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long, allow_negative_numbers = true)]
        nu: Option<f64>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop waypoint navigation with intervention counting.
    Navigate {
        #[arg(long)]
        world: PathBuf,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long, allow_negative_numbers = true)]
        nu: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// CSV of `x,y` waypoints; a random course is planned otherwise.
        #[arg(long)]
        waypoints: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory for costmap snapshots taken at interventions.
        #[arg(long)]
        snapshots: Option<PathBuf>,
    },
    /// Write a costmap for one saved gridmap as PGM plus raw f32 sidecar.
    ExportCostmap {
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long)]
        map: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        nu: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time full training samples phase by phase.
    BenchMppi {
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long, default_value = "linear")]
        kind: ModelKind,
        /// Benchmark on the first sample of this dataset instead of a synthetic one.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check defaults and run the small oracle suites.
    Selftest,
}

#[derive(Args, Debug)]
struct ProviderArgs {
    /// Trained ensemble checkpoint.
    #[arg(long, conflicts_with = "baseline")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<Baseline>,
    /// World file, needed by the ground-truth baseline outside `navigate`.
    #[arg(long = "truth-world")]
    truth_world: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Occupancy,
    Zero,
    GroundTruth,
}

impl clap::ValueEnum for ModelKind {
    fn value_variants<'a>() -> &'a [Self] {
        &ModelKind::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

/// Map an error to the process exit status.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Data(_) | Error::Io(_) => 2,
        Error::Domain(_) | Error::Optimization(_) | Error::Timeout { .. } | Error::Training(_) => 3,
    }
}

/// Parse `argv` (program name first) and run. Returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{o}' must look like key=value")))?;
        cfg.set_str(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    // Subcommand flags take precedence over the file.
    match &cli.command {
        Some(Command::Collect { demos: Some(d), .. }) => cfg.dataset.demos = *d,
        Some(Command::Train { kind, epochs, members, .. }) => {
            if let Some(k) = kind {
                cfg.model.kind = *k;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(m) = members {
                cfg.model.members = *m;
            }
        }
        Some(Command::EvalMhd { nu, seeds, .. }) | Some(Command::Navigate { nu, seeds, .. }) => {
            if let Some(n) = nu {
                cfg.eval.nu = *n;
            }
            if let Some(s) = seeds {
                cfg.eval.seeds = s.clone();
            }
        }
        Some(Command::ExportCostmap { nu: Some(n), .. }) => cfg.eval.nu = *n,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A provider owned for the duration of one command.
enum Provider {
    Ensemble(Ensemble),
    Occupancy(crate::eval::Occupancy),
    Zero,
    Truth(World),
}

impl Provider {
    fn load(args: &ProviderArgs, cfg: &RunConfig, world: Option<&Path>) -> Result<Self> {
        match (&args.ckpt, args.baseline) {
            (Some(p), _) => Ok(Provider::Ensemble(io::read_checkpoint(p)?)),
            (None, Some(Baseline::Occupancy)) => Ok(Provider::Occupancy(cfg.occupancy())),
            (None, Some(Baseline::Zero)) => Ok(Provider::Zero),
            (None, Some(Baseline::GroundTruth)) => {
                let w = args
                    .truth_world
                    .as_deref()
                    .or(world)
                    .ok_or_else(|| Error::config("the ground-truth baseline needs --truth-world"))?;
                Ok(Provider::Truth(io::read_world(w)?))
            }
            (None, None) => Err(Error::config("choose a cost source with --ckpt or --baseline")),
        }
    }

    fn get(&self) -> Box<dyn CostProvider + '_> {
        match self {
            Provider::Ensemble(e) => Box::new(EnsembleRef(e)),
            Provider::Occupancy(o) => Box::new(*o),
            Provider::Zero => Box::new(ZeroCost),
            Provider::Truth(w) => Box::new(GroundTruth(w)),
        }
    }
}

struct EnsembleRef<'a>(&'a Ensemble);

impl CostProvider for EnsembleRef<'_> {
    fn name(&self) -> String {
        self.0.name()
    }

    fn costmap(&self, map: &GridMap, nu: f64) -> Result<Costmap> {
        self.0.costmap(map, nu)
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.render());
        return Ok(());
    }
    let command = cli.command.ok_or_else(|| Error::config("no subcommand given (try --help)"))?;
    match command {
        Command::GenWorld { out } => {
            let world = generate_world(cfg.seed, &cfg.world)?;
            io::write_world(&out, &world)?;
            println!("world {}x{} cells written to {}", world.n, world.n, out.display());
        }
        Command::Collect { world, out, .. } => {
            let world = io::read_world(&world)?;
            let ds = build_dataset(&world, &cfg.sensor, &cfg.dataset(), cfg.seed)?;
            if ds.samples.is_empty() {
                return Err(Error::Optimization("no usable demonstration windows were collected".into()));
            }
            io::write_dataset(&out, &ds)?;
            println!(
                "{} samples ({} train demos, {} test demos, {} skipped) written to {}",
                ds.samples.len(),
                ds.train_demos.len(),
                ds.test_demos.len(),
                ds.skipped,
                out.display()
            );
        }
        Command::Train { data, out, log, .. } => {
            let ds = io::read_dataset(&data)?;
            let (train_set, val) = (ds.train(), ds.test());
            if train_set.is_empty() {
                return Err(Error::data("dataset has no training samples"));
            }
            let outcome = train(&train_set, &val, &cfg.training(), cfg.seed)?;
            io::write_checkpoint(&out, &outcome.ensemble)?;
            let log_path = log.unwrap_or_else(|| out.with_extension("train.csv"));
            let mut csv = String::from("epoch,mean_svf_gap,val_mhd,sec_per_sample\n");
            for e in &outcome.curve {
                let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.mean_svf_gap, e.val_mhd, e.sec_per_sample);
            }
            fs::write(&log_path, csv)?;
            println!(
                "trained {} x{} for {} epochs (best epoch {:?}), checkpoint {}",
                cfg.model.kind,
                cfg.model.members,
                outcome.curve.len(),
                outcome.best_epoch,
                out.display()
            );
        }
        Command::EvalMhd { data, provider, out, .. } => {
            let ds = io::read_dataset(&data)?;
            let test = ds.test();
            if test.is_empty() {
                return Err(Error::data("dataset has no test samples"));
            }
            let provider = Provider::load(&provider, &cfg, None)?;
            let p = provider.get();
            let r = evaluate_mhd(p.as_ref(), &test, cfg.eval.nu, &cfg.eval.seeds, &cfg.mppi_irl())?;
            let mut csv = String::from("seed,sample,demo_id,window_start,mhd\n");
            for s in &r.per_sample {
                let d = test[s.sample];
                let _ = writeln!(csv, "{},{},{},{},{}", s.seed, s.sample, d.demo_id, d.window_start, s.mhd);
            }
            fs::write(&out, csv)?;
            println!(
                "{}: mean MHD {:.4} ± {:.4} over {} seeds, {} samples, {} failures",
                p.name(),
                r.mean,
                r.std,
                cfg.eval.seeds.len(),
                test.len(),
                r.failures.len()
            );
        }
        Command::Navigate { world, provider, waypoints, out, snapshots, .. } => {
            let world_data = io::read_world(&world)?;
            let provider = Provider::load(&provider, &cfg, Some(&world))?;
            let p = provider.get();
            let course = match waypoints {
                Some(path) => read_waypoints(&path)?,
                None => plan_course(&world_data, cfg.nav.waypoints, cfg.nav.waypoint_spacing, 10.0, cfg.seed)?,
            };
            let nav_cfg = cfg.navigation();
            let mut runs = String::from(
                "seed,provider,nu,autonomous_distance,mean_speed,interventions,waypoints_reached,complete,steps\n",
            );
            let mut log = String::from("seed,step,x,y,reason\n");
            for &s in &cfg.eval.seeds {
                let r = navigate(&world_data, &course, p.as_ref(), cfg.eval.nu, &nav_cfg, s)?;
                let _ = writeln!(
                    runs,
                    "{s},{},{},{},{},{},{},{},{}",
                    p.name(),
                    cfg.eval.nu,
                    r.autonomous_distance,
                    r.mean_speed,
                    r.interventions,
                    r.waypoints_reached,
                    r.complete,
                    r.steps
                );
                for i in &r.log {
                    let _ = writeln!(log, "{s},{},{},{},{}", i.step, i.position[0], i.position[1], i.reason.name());
                }
                if let Some(dir) = &snapshots {
                    write_snapshots(dir, s, &r)?;
                }
                println!(
                    "seed {s}: {:.1} m autonomous at {:.2} m/s, {} interventions, {}",
                    r.autonomous_distance,
                    r.mean_speed,
                    r.interventions,
                    if r.complete { "complete" } else { "incomplete" }
                );
            }
            fs::write(&out, runs)?;
            fs::write(out.with_extension("interventions.csv"), log)?;
        }
        Command::ExportCostmap { provider, map, out, .. } => {
            let gridmap = io::read_gridmap(&map)?;
            let provider = Provider::load(&provider, &cfg, None)?;
            let c = provider.get().costmap(&gridmap, cfg.eval.nu)?;
            io::write_costmap_pgm(&out, &c)?;
            println!(
                "{}x{} costmap written to {} (+ {})",
                c.meta.nx,
                c.meta.ny,
                out.display(),
                io::sidecar_path(&out).display()
            );
        }
        Command::BenchMppi { runs, kind, data, out } => {
            let sample = match data {
                Some(d) => io::read_dataset(&d)?
                    .samples
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::data("dataset has no samples"))?,
                None => synthetic_sample(&cfg),
            };
            let csv = bench_training_sample(&sample, kind, runs.max(1), &cfg)?;
            match out {
                Some(p) => fs::write(p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Selftest => {
            let mut failed = 0;
            for c in selftest::run_all() {
                println!("{} {} ({:.2} s): {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.seconds, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Error::Optimization(format!("{failed} self-checks failed")));
            }
        }
    }
    Ok(())
}

fn read_waypoints(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('x')) {
        let (x, y) = line.split_once(',').ok_or_else(|| Error::data(format!("waypoint line '{line}' is not x,y")))?;
        let p = [
            x.trim().parse().map_err(|_| Error::data(format!("bad waypoint '{line}'")))?,
            y.trim().parse().map_err(|_| Error::data(format!("bad waypoint '{line}'")))?,
        ];
        out.push(p);
    }
    Ok(out)
}

fn write_snapshots(dir: &Path, seed_value: u64, r: &NavReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, i) in r.log.iter().enumerate() {
        if let Some(c) = &i.costmap {
            io::write_costmap_pgm(&dir.join(format!("seed{seed_value}_{k:03}_{}.pgm", i.reason.name())), c)?;
        }
    }
    Ok(())
}

/// A gently curving expert window over a featureless map, for benchmarking
/// without a dataset.
fn synthetic_sample(cfg: &RunConfig) -> DemoSample {
    let mppi = cfg.mppi_irl();
    let meta = MapMeta::centered([0.0, 0.0], [cfg.dataset.map_length, cfg.dataset.map_length], cfg.dataset.map_resolution)
        .expect("valid map geometry");
    let mut rng = seed::rng_for(cfg.seed, "bench-map");
    let data = (0..meta.n_cells() * N_CHANNELS)
        .map(|_| rand::Rng::random_range(&mut rng, 0.0f32..1.0))
        .collect();
    let gridmap = GridMap::from_data(meta, data).expect("valid map");
    let mut expert = Trajectory::new(mppi.dt);
    let u = Control::new(4.0, 0.05);
    let mut s = State::new(0.0, 0.0, 0.0, 4.0, 0.0);
    for _ in 0..WINDOW_LEN {
        expert.push(s, u);
        s = step_unchecked(&s, &u, mppi.dt, &mppi.vehicle);
    }
    let goal = expert.states[WINDOW_LEN - 1].position();
    DemoSample { demo_id: 0, window_start: 0, gridmap, expert, goal }
}

/// Time `runs` complete training samples: forward, MPPI, SVF and one
/// backward/Adam step. Returns CSV with one row per run.
pub fn bench_training_sample(sample: &DemoSample, kind: ModelKind, runs: usize, cfg: &RunConfig) -> Result<String> {
    let norm = Normalization::fit(&[&sample.gridmap])?;
    let mut ensemble = Ensemble::new(kind, 2, cfg.model.c_max, norm, cfg.seed)?;
    let mut adam = AdamState::new(ensemble.members[0].n_params(), cfg.adam);
    let mppi = cfg.mppi_irl();
    let mut rng = seed::rng_for(cfg.seed, "bench");
    let mut csv = String::from("run,forward,sampling,rollout,cost,update,svf,backward_adam,total\n");
    for run in 0..runs {
        let t0 = Instant::now();
        let costmap = ensemble.members[0].forward(&sample.gridmap)?;
        let t1 = Instant::now();
        let sol = solve(&sample.start(), sample.goal, &costmap, &mppi, None, &mut rng)?;
        let t2 = Instant::now();
        let meta = sample.gridmap.meta;
        let de = svf(&[&sample.expert.states], &[1.0], &meta)?;
        let trajs: Vec<&[State]> = sol.trajectories().collect();
        let dl = svf(&trajs, &sol.weights, &meta)?;
        let t3 = Instant::now();
        let g: Vec<f64> = de.values.iter().zip(&dl.values).map(|(a, b)| a - b).collect();
        let grad = ensemble.members[0].backward(&sample.gridmap, &g)?;
        adam_step(&mut ensemble.members[0].params, &grad, &mut adam)?;
        let t4 = Instant::now();
        let PhaseTimings { sampling, rollout, cost, update } = sol.timings;
        let _ = writeln!(
            csv,
            "{run},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            (t1 - t0).as_secs_f64(),
            sampling.as_secs_f64(),
            rollout.as_secs_f64(),
            cost.as_secs_f64(),
            update.as_secs_f64(),
            (t3 - t2).as_secs_f64(),
            (t4 - t3).as_secs_f64(),
            (t4 - t0).as_secs_f64()
        );
        info!("bench run {run}: {:.3} s", (t4 - t0).as_secs_f64());
    }
    Ok(csv)
}
