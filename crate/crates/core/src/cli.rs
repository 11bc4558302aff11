//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::baseline::{label_propagation_smooth, pixelwise_classify};
use crate::eval::{report, EvalError, Report};
use crate::infer::{max_sum, sum_product, Evidence, InferError, NodeFeatures};
use crate::learn::{em_fit_features, EmConfig, LearnError};
use crate::model::{fit_initial_params, labeled_samples, InitConfig, ModelError, ModelParams};
use crate::raster::{
    load_scene, read_grid_file, write_ascii_grid, write_ppm, Grid, Palette, RasterError,
    SceneBundle,
};
use crate::synth::{generate_scene, write_scene_dir, SynthConfig, SynthError, Terrain};
use crate::tree::{
    build_flow_tree, dump_tree, labels_to_grid, node_values_to_grid, validate_partial_order,
    Connectivity, FlowTree, TreeError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
        }
    }
}

#[derive(Debug)]
pub struct Error {
    pub kind: ErrorKind,
    pub message: String,
}

impl Error {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(ErrorKind::Data, format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Error {}

impl From<RasterError> for Error {
    fn from(e: RasterError) -> Self {
        Self::new(ErrorKind::Data, e.to_string())
    }
}

impl From<TreeError> for Error {
    fn from(e: TreeError) -> Self {
        Self::new(ErrorKind::Data, e.to_string())
    }
}

impl From<ModelError> for Error {
    fn from(e: ModelError) -> Self {
        let kind = match e {
            ModelError::NotPositiveDefinite { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<InferError> for Error {
    fn from(e: InferError) -> Self {
        match e {
            InferError::Model(m) => m.into(),
            other => Self::new(ErrorKind::Data, other.to_string()),
        }
    }
}

impl From<LearnError> for Error {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::Model(m) => m.into(),
            LearnError::Infer(i) => i.into(),
            LearnError::Config(m) => Self::usage(m),
            e @ LearnError::NonMonotone { .. } => Self::new(ErrorKind::Numerical, e.to_string()),
        }
    }
}

impl From<EvalError> for Error {
    fn from(e: EvalError) -> Self {
        Self::new(ErrorKind::Data, e.to_string())
    }
}

impl From<SynthError> for Error {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(m) => Self::usage(m),
            SynthError::Model(m) => m.into(),
            other => Self::new(ErrorKind::Data, other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "floodhmt",
    version,
    about = "Flood extent mapping on elevation-ordered hidden Markov trees"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the flow tree of a DEM and write its dump.
    Tree(TreeArgs),
    /// Fit the model by EM and write the MAP class map.
    Run(RunArgs),
    /// Per-pixel classifier followed by majority smoothing.
    Baseline(BaselineArgs),
    /// Compare a class map against ground truth.
    Eval(EvalArgs),
    /// Generate a seeded synthetic scene directory.
    Synth(SynthArgs),
    /// Time tree construction, learning and inference on synthetic scenes.
    Bench(BenchArgs),
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    s.parse::<u32>()
        .ok()
        .and_then(Connectivity::from_count)
        .ok_or_else(|| format!("expected 4 or 8, got {s:?}"))
}

fn parse_open_unit(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!(
            "expected a number strictly between 0 and 1, got {s:?}"
        )),
    }
}

fn parse_rho(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.5..1.0).contains(&v) => Ok(v),
        _ => Err(format!("expected a number in [0.5, 1), got {s:?}")),
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn parse_unit(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("expected a number in [0, 1], got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct TreeArgs {
    #[arg(long)]
    pub dem: PathBuf,
    #[arg(long, default_value = "4", value_parser = parse_connectivity)]
    pub connectivity: Connectivity,
    /// Output dump file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long)]
    pub dem: PathBuf,
    /// Spectral band raster; repeat in band order.
    #[arg(long = "band", required = true)]
    pub bands: Vec<PathBuf>,
    /// Training labels: 1 flood, 0 dry, nodata unlabeled.
    #[arg(long)]
    pub labels: PathBuf,
    /// Ground truth for an accuracy report.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Initial flood prior, overriding the label proportion.
    #[arg(long, value_parser = parse_open_unit)]
    pub pi: Option<f64>,
    /// Also write class_map.ppm.
    #[arg(long)]
    pub emit_ppm: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value = "4", value_parser = parse_connectivity)]
    pub connectivity: Connectivity,
    /// Initial probability that a node floods when all its parents do.
    #[arg(long, default_value_t = 0.99, value_parser = parse_rho)]
    pub rho: f64,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iters: u64,
    /// Relative log-likelihood gain below which EM stops.
    #[arg(long, default_value_t = 1e-6, value_parser = parse_positive)]
    pub tol: f64,
    /// Keep the Gaussians fitted from labels; learn only pi and rho.
    #[arg(long)]
    pub fix_gaussians: bool,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: u64,
    /// Also write posterior flood probabilities as marginals.asc.
    #[arg(long)]
    pub emit_marginals: bool,
    /// Also write the flow tree dump as tree.txt.
    #[arg(long)]
    pub emit_tree: bool,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Majority smoothing sweeps; 0 keeps the raw per-pixel map.
    #[arg(long, default_value_t = 10)]
    pub smooth_iters: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted class map.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Report file; the table is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Manifest to start from; explicit flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    /// `ramp`, or `bumps` with the default bump settings.
    #[arg(long)]
    pub terrain: Option<String>,
    #[arg(long)]
    pub water_level: Option<f64>,
    /// Standard deviation of DEM noise.
    #[arg(long)]
    pub roughness: Option<f64>,
    #[arg(long, value_parser = parse_unit)]
    pub canopy_fraction: Option<f64>,
    #[arg(long)]
    pub strips: Option<usize>,
    #[arg(long)]
    pub strip_amplitude: Option<f64>,
    #[arg(long, value_parser = parse_unit)]
    pub withheld_fraction: Option<f64>,
    #[arg(long, value_parser = parse_connectivity)]
    pub connectivity: Option<Connectivity>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Square scene edge lengths.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeats: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iters: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: u64,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse arguments, run the subcommand and return the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            let text = e.render().to_string();
            return match e.kind() {
                K::DisplayHelp | K::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    ErrorKind::Usage.exit_code()
                }
            };
        }
    };
    match execute(&cli.command, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.kind.exit_code()
        }
    }
}

pub fn execute(
    command: &Command,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), Error> {
    match command {
        Command::Tree(a) => cmd_tree(a, stdout),
        Command::Run(a) => cmd_run(a, stdout),
        Command::Baseline(a) => cmd_baseline(a, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::Synth(a) => cmd_synth(a, stdout, stderr),
        Command::Bench(a) => cmd_bench(a, stdout),
    }
}

/// Files produced by a command, written together. If any write fails the
/// ones already written are removed.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn commit(self) -> Result<Vec<PathBuf>, Error> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            if let Err(e) = fs::write(&path, bytes) {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                let _ = fs::remove_file(&path);
                return Err(Error::io(&path, e));
            }
            written.push(path);
        }
        Ok(written)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn cmd_tree(args: &TreeArgs, stdout: &mut dyn Write) -> Result<(), Error> {
    let dem = read_grid_file(&args.dem)?;
    let start = Instant::now();
    let tree = build_flow_tree(&dem, args.connectivity)?;
    let elapsed = start.elapsed().as_secs_f64();
    write_file(&args.out, dump_tree(&tree).as_bytes())?;
    let _ = writeln!(
        stdout,
        "nodes {} edges {} sources {} roots {} construction {:.3} s",
        tree.node_count(),
        tree.edge_count(),
        tree.sources().len(),
        tree.roots().len(),
        elapsed
    );
    Ok(())
}

fn load(args: &SceneArgs) -> Result<SceneBundle, Error> {
    let bands: Vec<&Path> = args.bands.iter().map(PathBuf::as_path).collect();
    let scene = load_scene(args.dem.as_path(), &bands, Some(args.labels.as_path()))?;
    if let Some(labels) = &scene.labels {
        labels.check_binary(&args.labels.display().to_string())?;
    }
    Ok(scene)
}

fn initial_params(scene: &SceneBundle, rho: f64, pi: Option<f64>) -> Result<ModelParams, Error> {
    let (features, labels) = labeled_samples(scene);
    let config = InitConfig {
        rho,
        pi,
        ..InitConfig::default()
    };
    Ok(fit_initial_params(&features, &labels, &config)?)
}

fn truth_report(path: &Path, class_map: &Grid) -> Result<Report, Error> {
    let truth = read_grid_file(path)?;
    truth.check_binary(&path.display().to_string())?;
    Ok(report(class_map, &truth)?)
}

fn report_text(r: &Report) -> String {
    format!("{}\n{}", r.to_table(), r.to_machine())
}

/// Results of the tree pipeline held in memory.
pub struct RunResult {
    pub tree: FlowTree,
    pub params: ModelParams,
    pub trace: crate::learn::EmTrace,
    pub labels: Vec<u8>,
    pub class_map: Grid,
    pub marginals: Option<Grid>,
    pub violations: usize,
    pub timings: [f64; 3],
}

/// Initial fit, flow tree, EM and MAP labeling.
pub fn run_pipeline(
    scene: &SceneBundle,
    connectivity: Connectivity,
    init: &ModelParams,
    config: &EmConfig,
    want_marginals: bool,
) -> Result<RunResult, Error> {
    let t0 = Instant::now();
    let masked = scene.masked_dem();
    let tree = build_flow_tree(&masked, connectivity)?;
    let t1 = Instant::now();
    let features = NodeFeatures::from_scene(scene, &tree);
    let trace = em_fit_features(&features, &tree, init, config)?;
    let params = trace.params.clone();
    let t2 = Instant::now();
    let evidence = Evidence::from_features(&features, &params, config.workers)?;
    let labels = max_sum(&tree, &evidence, &params)?;
    let class_map = labels_to_grid(&tree, &masked, &labels);
    let marginals = if want_marginals {
        let post = sum_product(&tree, &evidence, &params)?;
        Some(node_values_to_grid(&tree, &masked, &post.gamma))
    } else {
        None
    };
    let t3 = Instant::now();
    let violations = validate_partial_order(&tree, &labels);
    Ok(RunResult {
        violations,
        tree,
        params,
        trace,
        labels,
        class_map,
        marginals,
        timings: [
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            (t3 - t2).as_secs_f64(),
        ],
    })
}

pub fn cmd_run(args: &RunArgs, stdout: &mut dyn Write) -> Result<(), Error> {
    let scene = load(&args.scene)?;
    let init = initial_params(&scene, args.rho, args.scene.pi)?;
    let config = EmConfig {
        max_iters: args.max_iters as usize,
        tol: args.tol,
        fix_gaussians: args.fix_gaussians,
        workers: args.workers as usize,
        ..EmConfig::default()
    };
    let result = run_pipeline(
        &scene,
        args.connectivity,
        &init,
        &config,
        args.emit_marginals,
    )?;
    if result.violations != 0 {
        return Err(Error::new(
            ErrorKind::Numerical,
            format!(
                "MAP labeling violates the flow order at {} nodes",
                result.violations
            ),
        ));
    }
    let report = match &args.scene.truth {
        Some(path) => Some(truth_report(path, &result.class_map)?),
        None => None,
    };

    let mut out = Outputs::new(&args.scene.out);
    out.add("class_map.asc", write_ascii_grid(&result.class_map));
    out.add("params.txt", result.params.to_text().into_bytes());
    out.add("trace.txt", result.trace.to_text().into_bytes());
    if let Some(m) = &result.marginals {
        out.add("marginals.asc", write_ascii_grid(m));
    }
    if args.emit_tree {
        out.add("tree.txt", dump_tree(&result.tree).into_bytes());
    }
    if args.scene.emit_ppm {
        out.add(
            "class_map.ppm",
            write_ppm(&result.class_map, &Palette::default())?,
        );
    }
    if let Some(r) = &report {
        out.add("report.txt", report_text(r).into_bytes());
    }
    out.commit()?;

    let flooded = result.labels.iter().filter(|&&l| l == 1).count();
    let [tc, tl, ti] = result.timings;
    let _ = writeln!(
        stdout,
        "nodes {} flooded {} iterations {} converged {} loglik {}",
        result.tree.node_count(),
        flooded,
        result.trace.iterations_run(),
        result.trace.converged,
        result.trace.logliks().last().copied().unwrap_or(f64::NAN)
    );
    let _ = writeln!(
        stdout,
        "construction {tc:.3} s learning {tl:.3} s inference {ti:.3} s"
    );
    if let Some(r) = &report {
        let _ = write!(stdout, "{}", r.to_table());
    }
    Ok(())
}

pub fn cmd_baseline(args: &BaselineArgs, stdout: &mut dyn Write) -> Result<(), Error> {
    let scene = load(&args.scene)?;
    let params = initial_params(&scene, InitConfig::default().rho, args.scene.pi)?;
    let raw = pixelwise_classify(&scene, &params)?;
    let class_map = label_propagation_smooth(&raw, args.smooth_iters);
    let report = match &args.scene.truth {
        Some(path) => Some(truth_report(path, &class_map)?),
        None => None,
    };
    let mut out = Outputs::new(&args.scene.out);
    out.add("class_map.asc", write_ascii_grid(&class_map));
    out.add("params.txt", params.to_text().into_bytes());
    if args.scene.emit_ppm {
        out.add("class_map.ppm", write_ppm(&class_map, &Palette::default())?);
    }
    if let Some(r) = &report {
        out.add("report.txt", report_text(r).into_bytes());
    }
    out.commit()?;
    let changed = raw
        .values
        .iter()
        .zip(&class_map.values)
        .filter(|(a, b)| a != b)
        .count();
    let _ = writeln!(stdout, "smoothing changed {changed} pixels");
    if let Some(r) = &report {
        let _ = write!(stdout, "{}", r.to_table());
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, stdout: &mut dyn Write) -> Result<(), Error> {
    let pred = read_grid_file(&args.pred)?;
    pred.check_binary(&args.pred.display().to_string())?;
    let r = truth_report(&args.truth, &pred)?;
    let text = report_text(&r);
    if let Some(path) = &args.out {
        write_file(path, text.as_bytes())?;
    }
    let _ = write!(stdout, "{text}");
    Ok(())
}

pub fn synth_config(args: &SynthArgs) -> Result<SynthConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            SynthConfig::from_manifest(&text).map_err(|e| match e {
                SynthError::Config(m) => {
                    Error::new(ErrorKind::Data, format!("{}: {m}", path.display()))
                }
                other => Error::new(ErrorKind::Data, format!("{}: {other}", path.display())),
            })?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.rows {
        cfg.nrows = v;
    }
    if let Some(v) = args.cols {
        cfg.ncols = v;
    }
    if let Some(t) = &args.terrain {
        cfg.terrain = match t.as_str() {
            "ramp" => Terrain::Ramp,
            "bumps" => SynthConfig::default().terrain,
            other => {
                return Err(Error::usage(format!(
                    "unknown terrain {other:?}; expected ramp or bumps"
                )))
            }
        };
    }
    if let Some(v) = args.water_level {
        cfg.water_level = v;
    }
    if let Some(v) = args.roughness {
        cfg.roughness = v;
    }
    if let Some(v) = args.canopy_fraction {
        cfg.canopy_fraction = v;
    }
    if let Some(v) = args.strips {
        cfg.strips = v;
    }
    if let Some(v) = args.strip_amplitude {
        cfg.strip_amplitude = v;
    }
    if let Some(v) = args.withheld_fraction {
        cfg.withheld_fraction = v;
    }
    if let Some(v) = args.connectivity {
        cfg.connectivity = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_synth(
    args: &SynthArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), Error> {
    let cfg = synth_config(args)?;
    let scene = generate_scene(&cfg)?;
    for w in &scene.warnings {
        let _ = writeln!(stderr, "warning: {w}");
    }
    let written = write_scene_dir(&args.out, &cfg, &scene)?;
    let flooded = scene.truth.values.iter().filter(|&&v| v == 1.0).count();
    let _ = writeln!(
        stdout,
        "wrote {} files to {} ({}x{}, {} flooded)",
        written.len(),
        args.out.display(),
        cfg.nrows,
        cfg.ncols,
        flooded
    );
    Ok(())
}

pub const BENCH_COLUMNS: [&str; 3] = ["Tree construction (s)", "Learning (s)", "Inference (s)"];

/// Mean construction, learning and inference seconds for one scene size.
pub fn bench_size(
    size: usize,
    repeats: usize,
    max_iters: usize,
    seed: u64,
    workers: usize,
) -> Result<[f64; 3], Error> {
    let cfg = SynthConfig {
        nrows: size,
        ncols: size,
        seed,
        canopy_fraction: 0.3,
        strips: 3,
        strip_amplitude: 1.0,
        ..SynthConfig::default()
    };
    let synthetic = generate_scene(&cfg)?;
    let init = initial_params(&synthetic.scene, InitConfig::default().rho, None)?;
    let config = EmConfig {
        max_iters,
        workers,
        ..EmConfig::default()
    };
    let mut sums = [0.0; 3];
    for _ in 0..repeats {
        let r = run_pipeline(&synthetic.scene, cfg.connectivity, &init, &config, false)?;
        for (s, t) in sums.iter_mut().zip(r.timings) {
            *s += t;
        }
    }
    Ok(sums.map(|s| s / repeats as f64))
}

pub fn cmd_bench(args: &BenchArgs, stdout: &mut dyn Write) -> Result<(), Error> {
    if args.sizes.iter().any(|&s| s < 4) {
        return Err(Error::usage("sizes must be at least 4"));
    }
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:>6} {:>9} {:>22} {:>13} {:>14}",
        "Size", "Pixels", BENCH_COLUMNS[0], BENCH_COLUMNS[1], BENCH_COLUMNS[2]
    );
    for &size in &args.sizes {
        let [c, l, i] = bench_size(
            size,
            args.repeats as usize,
            args.max_iters as usize,
            args.seed,
            args.workers as usize,
        )?;
        let _ = writeln!(
            table,
            "{:>6} {:>9} {:>22.4} {:>13.4} {:>14.4}",
            size,
            size * size,
            c,
            l,
            i
        );
    }
    if let Some(path) = &args.out {
        write_file(path, table.as_bytes())?;
    }
    let _ = write!(stdout, "{table}");
    Ok(())
}
