//! Command implementations behind the `gradproj` binary.
//!
//! Exit codes: 0 success, 2 usage or precondition failure, 3 numerical abort.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gradproj::grid::DisplacementField;
use gradproj::io::{
    self, read_field, read_labels, read_landmarks, read_volume, write_field, write_json,
    write_labels, write_landmarks, write_report_json, write_step_logs_csv, write_volume, Dtype,
    RunReport,
};
use gradproj::metrics::{dice, mean_hd95, ndv, tre, warp_labels, MetricsReport};
use gradproj::moo::{conflict_rate, instance_optimize, IoError, IoOutcome};
use gradproj::phantom::make_phantom;
use gradproj::{GpConfig, Mode, ProjectionVariant};
use serde::Serialize;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "gradproj", version, about = "Instance-optimization registration with gradient projection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom pair with a known deformation.
    Synth(SynthArgs),
    /// Register a moving image to a fixed image.
    Register(RegisterArgs),
    /// Score a displacement field against a phantom pair.
    Eval(EvalArgs),
    /// Compare optimization modes over a batch of phantoms.
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"], default_values_t = [48, 48, 48])]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub blobs: usize,
    /// Largest ground-truth displacement, in voxels.
    #[arg(long, default_value_t = 4.0)]
    pub max_disp: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Scalar,
    Gp,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Scalar => Mode::Scalarization,
            ModeArg::Gp => Mode::GradientProjection,
        }
    }
}

impl ModeArg {
    fn as_str(self) -> &'static str {
        match self {
            ModeArg::Scalar => "scalar",
            ModeArg::Gp => "gp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantArg {
    ProjectedOnto,
    AsPrinted,
}

impl From<VariantArg> for ProjectionVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::ProjectedOnto => ProjectionVariant::ProjectedOnto,
            VariantArg::AsPrinted => ProjectionVariant::AsPrinted,
        }
    }
}

/// Optimizer settings shared by `register` and `sweep`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, value_enum, default_value_t = VariantArg::ProjectedOnto)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = GpConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = GpConfig::default().lambda)]
    pub lambda: f64,
    #[arg(long, default_value_t = GpConfig::default().weight_decay)]
    pub wd: f64,
}

impl OptimArgs {
    fn config(&self, mode: Mode, seed: u64) -> GpConfig {
        GpConfig {
            lambda: self.lambda,
            steps: self.steps,
            lr: self.lr,
            weight_decay: self.wd,
            mode,
            denominator_variant: self.variant.into(),
            seed,
            ..GpConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct RegisterArgs {
    /// Fixed image: a grid stem or its `.json`/`.raw` file.
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Gp)]
    pub mode: ModeArg,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub pair_dir: PathBuf,
    #[arg(long)]
    pub fields_dir: PathBuf,
    /// Stem of the field to score inside `--fields-dir`.
    #[arg(long, default_value = "u_mov")]
    pub field: String,
    /// Report JSON path; the manifest is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, default_value_t = 20)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ModeArg::Scalar, ModeArg::Gp])]
    pub modes: Vec<ModeArg>,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"], default_values_t = [48, 48, 48])]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub blobs: usize,
    #[arg(long, default_value_t = 4.0)]
    pub max_disp: f64,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] gradproj::Error),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Setup(e) => CliError::Core(e),
            IoError::NonFinite(_) => CliError::Numerical(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub command: String,
    pub config: C,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub wall_time_s: f64,
    pub version: String,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Register(a) => cmd_register(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn dims3(v: &[usize]) -> CliResult<[usize; 3]> {
    v.try_into()
        .map_err(|_| CliError::Usage(format!("expected three dims, got {v:?}")))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| gradproj::Error::io(dir, e).into())
}

/// Accepts a grid stem or either of its two files.
fn grid_stem(p: &Path) -> PathBuf {
    match p.extension().and_then(|e| e.to_str()) {
        Some("json" | "raw") => p.with_extension(""),
        _ => p.to_path_buf(),
    }
}

fn write_manifest<C: Serialize>(
    path: &Path,
    command: &str,
    config: C,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    started: Instant,
) -> CliResult<()> {
    let m = RunManifest {
        command: command.to_string(),
        config,
        inputs,
        outputs,
        seed,
        wall_time_s: started.elapsed().as_secs_f64(),
        version: VERSION.to_string(),
    };
    Ok(write_json(path, &m)?)
}

/// File names written by `synth`, relative to the output directory.
pub const PAIR_GRIDS: [&str; 5] = ["fixed", "moving", "fixed_labels", "moving_labels", "gt_field"];
pub const PAIR_LANDMARKS: [&str; 2] = ["fixed_landmarks.json", "moving_landmarks.json"];

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let started = Instant::now();
    let dims = dims3(&a.dims)?;
    let pair = make_phantom(a.seed, dims, a.blobs, a.max_disp)?;
    create_dir(&a.out)?;
    let stem = |name: &str| a.out.join(name);
    write_volume(&stem("fixed"), &pair.fixed, Dtype::F64)?;
    write_volume(&stem("moving"), &pair.moving, Dtype::F64)?;
    write_labels(&stem("fixed_labels"), &pair.fixed_labels)?;
    write_labels(&stem("moving_labels"), &pair.moving_labels)?;
    write_field(&stem("gt_field"), &pair.gt_field, Dtype::F64)?;
    write_landmarks(&stem(PAIR_LANDMARKS[0]), &pair.fixed_landmarks)?;
    write_landmarks(&stem(PAIR_LANDMARKS[1]), &pair.moving_landmarks)?;

    let mut outputs = Vec::new();
    for g in PAIR_GRIDS {
        outputs.push(io::header_path(&stem(g)));
        outputs.push(io::raw_path(&stem(g)));
    }
    outputs.extend(PAIR_LANDMARKS.iter().map(|l| stem(l)));
    write_manifest(&stem(MANIFEST), "synth", a, vec![], outputs, Some(a.seed), started)
}

fn run_io(fixed: &gradproj::Volume, moving: &gradproj::Volume, cfg: &GpConfig) -> CliResult<IoOutcome> {
    let z = DisplacementField::zeros(fixed.dims()).with_spacing(fixed.spacing())?;
    Ok(instance_optimize(moving, fixed, &z, &z, cfg)?)
}

pub fn cmd_register(a: &RegisterArgs) -> CliResult<()> {
    let started = Instant::now();
    let cfg = a.optim.config(a.mode.into(), a.seed);
    cfg.validate()?;
    let fixed_stem = grid_stem(&a.fixed);
    let moving_stem = grid_stem(&a.moving);
    let fixed = read_volume(&fixed_stem)?;
    let moving = read_volume(&moving_stem)?;
    let out = run_io(&fixed, &moving, &cfg)?;

    create_dir(&a.out)?;
    let u_mov = a.out.join("u_mov");
    let u_fix = a.out.join("u_fix");
    let csv = a.out.join("steps.csv");
    write_field(&u_mov, &out.u_mov, Dtype::F64)?;
    write_field(&u_fix, &out.u_fix, Dtype::F64)?;
    write_step_logs_csv(&csv, &out.logs)?;
    let outputs = vec![
        io::header_path(&u_mov),
        io::raw_path(&u_mov),
        io::header_path(&u_fix),
        io::raw_path(&u_fix),
        csv,
    ];
    let inputs = vec![a.fixed.clone(), a.moving.clone()];
    write_manifest(&a.out.join(MANIFEST), "register", &cfg, inputs, outputs, Some(a.seed), started)
}

fn optional<T>(r: gradproj::Result<T>) -> CliResult<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(gradproj::Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn check_dims(what: &str, got: [usize; 3], want: [usize; 3]) -> CliResult<()> {
    if got != want {
        return Err(CliError::Usage(format!("{what} has dims {got:?}, expected {want:?}")));
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let started = Instant::now();
    let field_stem = a.fields_dir.join(&a.field);
    let u = read_field(&field_stem)?;
    let dims = u.dims();
    let fixed_labels = optional(read_labels(&a.pair_dir.join("fixed_labels")))?;
    let moving_labels = optional(read_labels(&a.pair_dir.join("moving_labels")))?;
    let fixed_lm = optional(read_landmarks(&a.pair_dir.join(PAIR_LANDMARKS[0])))?;
    let moving_lm = optional(read_landmarks(&a.pair_dir.join(PAIR_LANDMARKS[1])))?;

    let mut report = MetricsReport {
        ndv_fraction: Some(ndv(&u)?),
        ..MetricsReport::default()
    };
    if let (Some(fl), Some(ml)) = (&fixed_labels, &moving_labels) {
        check_dims("fixed labels", fl.dims(), dims)?;
        check_dims("moving labels", ml.dims(), dims)?;
        let warped = warp_labels(ml, &u)?;
        let d = dice(&warped, fl)?;
        report.dice_mean = d.mean.is_finite().then_some(d.mean);
        report.dice_per_label = Some(d.per_label);
        report.hd95_mm = mean_hd95(&warped, fl, fl.spacing())?;
    }
    if let (Some(fl), Some(ml)) = (&fixed_lm, &moving_lm) {
        let spacing = fixed_labels.as_ref().map_or(u.spacing(), |l| l.spacing());
        let t = tre(fl, ml, &u, spacing)?;
        report.tre_mean_mm = Some(t.mean_mm);
        report.tre_std_mm = Some(t.std_mm);
    }
    let run = RunReport {
        metrics: report,
        config: None,
        seed: None,
        conflict_rate: None,
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_report_json(&a.out, &run)?;
    let inputs = vec![a.pair_dir.clone(), io::header_path(&field_stem)];
    let manifest = a.out.with_extension("manifest.json");
    write_manifest(&manifest, "eval", a, inputs, vec![a.out.clone()], None, started)
}

/// One row of the sweep summary.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub pair: usize,
    pub seed: u64,
    pub mode: ModeArg,
    pub baseline_dice: f64,
    pub dice_mean: f64,
    pub hd95_mm: f64,
    pub ndv: f64,
    pub tre_mean_mm: f64,
    pub conflict_rate: f64,
    pub final_sim_fwd: f64,
    pub final_sim_bwd: f64,
    pub final_reg: f64,
    pub final_total: f64,
}

pub const SUMMARY_HEADER: &str = "pair,seed,mode,baseline_dice,dice_mean,hd95_mm,ndv,tre_mean_mm,conflict_rate,final_sim_fwd,final_sim_bwd,final_reg,final_total";

impl SweepRow {
    fn values(&self) -> [f64; 10] {
        [
            self.baseline_dice,
            self.dice_mean,
            self.hd95_mm,
            self.ndv,
            self.tre_mean_mm,
            self.conflict_rate,
            self.final_sim_fwd,
            self.final_sim_bwd,
            self.final_reg,
            self.final_total,
        ]
    }
}

fn nan_to_none(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

fn sweep_pair(a: &SweepArgs, pair: usize, dims: [usize; 3]) -> CliResult<Vec<SweepRow>> {
    let seed = a.seed + pair as u64;
    let p = make_phantom(seed, dims, a.blobs, a.max_disp)?;
    let baseline = dice(&p.moving_labels, &p.fixed_labels)?.mean;
    let mut rows = Vec::new();
    for &mode in &a.modes {
        let cfg = a.optim.config(mode.into(), seed);
        let out = run_io(&p.fixed, &p.moving, &cfg)?;
        let warped = warp_labels(&p.moving_labels, &out.u_mov)?;
        let d = dice(&warped, &p.fixed_labels)?;
        let hd = mean_hd95(&warped, &p.fixed_labels, p.fixed_labels.spacing())?;
        let t = tre(&p.fixed_landmarks, &p.moving_landmarks, &out.u_mov, p.fixed.spacing())?;
        rows.push(SweepRow {
            pair,
            seed,
            mode,
            baseline_dice: baseline,
            dice_mean: d.mean,
            hd95_mm: nan_to_none(hd),
            ndv: ndv(&out.u_mov)?,
            tre_mean_mm: t.mean_mm,
            conflict_rate: conflict_rate(&out.logs)?,
            final_sim_fwd: out.final_loss.sim_fwd,
            final_sim_bwd: out.final_loss.sim_bwd,
            final_reg: out.final_loss.reg,
            final_total: out.final_loss.total,
        });
    }
    Ok(rows)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Summary CSV text: one row per pair and mode, then one `aggregate` row per
/// mode whose cells read `mean±std`.
pub fn summary_csv(rows: &[SweepRow], modes: &[ModeArg]) -> String {
    let mut s = String::new();
    writeln!(s, "{SUMMARY_HEADER}").unwrap();
    for r in rows {
        write!(s, "{},{},{}", r.pair, r.seed, r.mode.as_str()).unwrap();
        for v in r.values() {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    for &mode in modes {
        let of_mode: Vec<&SweepRow> = rows.iter().filter(|r| r.mode == mode).collect();
        write!(s, "aggregate,,{}", mode.as_str()).unwrap();
        for c in 0..10 {
            let col: Vec<f64> = of_mode.iter().map(|r| r.values()[c]).collect();
            let (m, sd) = mean_std(&col);
            write!(s, ",{m}±{sd}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let started = Instant::now();
    if a.pairs == 0 {
        return Err(CliError::Usage("--pairs must be at least 1".into()));
    }
    if a.modes.is_empty() {
        return Err(CliError::Usage("--modes must name at least one mode".into()));
    }
    let dims = dims3(&a.dims)?;
    a.optim.config(Mode::Scalarization, a.seed).validate()?;
    make_phantom(a.seed, dims, a.blobs, a.max_disp)?;

    let jobs = a.jobs.clamp(1, a.pairs);
    let mut per_pair: Vec<Option<CliResult<Vec<SweepRow>>>> = (0..a.pairs).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = per_pair
            .chunks_mut(a.pairs.div_ceil(jobs))
            .enumerate()
            .map(|(c, slots)| {
                let start = c * a.pairs.div_ceil(jobs);
                scope.spawn(move || {
                    for (k, slot) in slots.iter_mut().enumerate() {
                        *slot = Some(sweep_pair(a, start + k, dims));
                    }
                })
            })
            .collect();
        for h in chunks {
            h.join().expect("sweep worker panicked");
        }
    });
    let mut rows = Vec::new();
    for r in per_pair {
        rows.extend(r.expect("every pair ran")?);
    }

    create_dir(&a.out)?;
    let summary = a.out.join("summary.csv");
    fs::write(&summary, summary_csv(&rows, &a.modes)).map_err(|e| gradproj::Error::io(&summary, e))?;
    write_manifest(&a.out.join(MANIFEST), "sweep", a, vec![], vec![summary], Some(a.seed), started)
}
