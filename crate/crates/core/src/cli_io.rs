//! Command-line front end: config, checkpoints and report files.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::hamiltonian_model::{load_model_path, ModelSpec};
use crate::kam_driver::{
    build_schedule, convergence_summary, initial_state, kam_step, run_from, IterationSchedule,
    ScheduleParams, ScheduleRow, StepOptions, StepReport, StepState, DEFAULT_SLACK,
};
use crate::lie_transform::SIGN_CONVENTION;
use crate::resonance_measure::{measure_schedule, surviving_measure_bound, surviving_value, DEFAULT_C};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CSV_COLUMNS: [&str; 13] = [
    "k", "eps_k", "P_low", "P_high", "F_norm", "a_norm", "min_divisor", "omega_dev", "s_k", "r_k",
    "L_k", "M_k", "wall_ms",
];
pub const REPORTS_JSONL: &str = "reports.jsonl";
pub const REPORTS_CSV: &str = "reports.csv";
pub const TIMINGS_JSONL: &str = "timings.jsonl";
pub const SUMMARY_JSON: &str = "summary.json";
pub const MEASURE_JSON: &str = "measure.json";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RESONANCE: i32 = 3;
pub const EXIT_CONTRACTION: i32 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    pub params: ScheduleParams,
    pub slack: f64,
    pub out: PathBuf,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    /// Write the checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub sign_convention: String,
    pub params: ScheduleParams,
    /// Schedule row the state is positioned at.
    pub row: ScheduleRow,
    pub state: StepState,
}

impl Checkpoint {
    pub fn new(sched: &IterationSchedule, state: &StepState) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            sign_convention: SIGN_CONVENTION.to_string(),
            params: sched.params,
            row: sched.rows[state.k.min(sched.rows.len() - 1)],
            state: state.clone(),
        }
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec(ck)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(KamError::Schema {
            path: "version".into(),
            msg: format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", ck.version),
        });
    }
    if ck.sign_convention != SIGN_CONVENTION {
        return Err(KamError::Schema {
            path: "sign_convention".into(),
            msg: format!("`{}` (expected `{SIGN_CONVENTION}`)", ck.sign_convention),
        });
    }
    Ok(ck)
}

/// One JSONL record; `wall_ms` is not part of it.
pub fn report_line(rep: &StepReport) -> Result<String> {
    Ok(serde_json::to_string(rep)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub k: usize,
    pub wall_ms: f64,
}

pub fn read_reports(path: &Path) -> Result<Vec<StepReport>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_timings(path: &Path) -> Result<Vec<Timing>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> KamError {
    KamError::Serde(e.to_string())
}

fn num(x: f64) -> String {
    if x == 0.0 || (1e-3..1e4).contains(&x.abs()) {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

/// Writes the fixed-column CSV; `wall_ms` comes from the report itself or
/// from `timings` when given.
pub fn write_csv<W: Write>(w: W, reports: &[StepReport], timings: Option<&[Timing]>) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in reports {
        let wall = match timings {
            Some(t) => t.iter().find(|t| t.k == r.k).map_or(f64::NAN, |t| t.wall_ms),
            None => r.wall_ms,
        };
        let row = [
            r.k.to_string(),
            num(r.eps_k),
            num(r.p_low),
            num(r.p_high),
            num(r.f_norm),
            num(r.a_norm),
            num(r.min_divisor),
            num(r.omega_dev),
            num(r.s_k),
            num(r.r_k),
            r.l_k.to_string(),
            // Fourier cap actually used by step k
            r.m_next.to_string(),
            num(wall),
        ];
        wr.write_record(&row).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// argument parsing

#[derive(Parser, Debug)]
#[command(name = "kamlattice", version, about = "KAM iteration on truncated lattice Hamiltonians")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Load the model and build the schedule.
    Validate(RunArgs),
    /// One step, fresh or from a checkpoint.
    Step(RunArgs),
    /// All K steps with JSONL/CSV output.
    Run(RunArgs),
    /// Monte Carlo measure of the schedule's resonant zones.
    Measure(MeasureArgs),
    /// Convert a JSONL report to CSV and print a summary table.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ScheduleArgs {
    /// Defaults to the model's epsilon.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.003)]
    pub gamma: f64,
    /// Defaults to gamma / 2.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Defaults to the model's alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub s0: f64,
    #[arg(long, default_value_t = 0.5)]
    pub r0: f64,
    #[arg(long = "steps", short = 'K', default_value_t = 3)]
    pub steps: usize,
}

impl ScheduleArgs {
    fn params(&self, eps: f64, alpha: f64) -> ScheduleParams {
        ScheduleParams {
            eps: self.eps.unwrap_or(eps),
            beta: self.beta,
            gamma: self.gamma,
            kappa: self.kappa.unwrap_or(self.gamma / 2.0),
            alpha: self.alpha.unwrap_or(alpha),
            s0: self.s0,
            r0: self.r0,
            steps: self.steps,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = DEFAULT_SLACK)]
    pub slack: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Defaults to OUT/checkpoint.json.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint cadence in steps (0 disables).
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
    /// Continue from the checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: bool,
    /// Report small divisors instead of aborting on them.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Args, Debug, Clone)]
pub struct MeasureArgs {
    /// Supplies defaults for epsilon and alpha.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Constant in the per-step bound.
    #[arg(long = "bound-c", default_value_t = DEFAULT_C)]
    pub bound_c: f64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// JSONL report file.
    #[arg(long)]
    pub input: PathBuf,
    /// Timing sidecar; defaults to timings.jsonl next to the input if present.
    #[arg(long)]
    pub timings: Option<PathBuf>,
    /// CSV destination; defaults to the input with a .csv extension.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

impl RunArgs {
    pub fn config(&self, spec: &ModelSpec) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            params: self.schedule.params(spec.eps, spec.weights.alpha),
            slack: self.slack,
            out: self.out.clone(),
            seed: self.seed,
            checkpoint: Some(
                self.checkpoint
                    .clone()
                    .unwrap_or_else(|| self.out.join(CHECKPOINT_JSON)),
            ),
            checkpoint_every: self.checkpoint_every,
        }
    }

    fn options(&self) -> StepOptions {
        StepOptions {
            slack: self.slack,
            strict: !self.lenient,
            ..StepOptions::default()
        }
    }
}

// ---------------------------------------------------------------------------
// dispatch

pub fn exit_code(e: &KamError) -> i32 {
    match e.root() {
        KamError::Resonance { .. } => EXIT_RESONANCE,
        KamError::Contraction { .. } => EXIT_CONTRACTION,
        KamError::Width(_)
        | KamError::Schema { .. }
        | KamError::Assumption { .. }
        | KamError::Decay { .. }
        | KamError::Parameter(_)
        | KamError::SingularHessian { .. } => EXIT_VALIDATION,
        _ => EXIT_INTERNAL,
    }
}

fn describe(e: &KamError) -> String {
    let step = match e {
        KamError::AtStep { k, .. } => format!(" (step {k})"),
        _ => String::new(),
    };
    match e.root() {
        KamError::Resonance {
            mode,
            divisor,
            threshold,
        } => format!("resonance{step}: mode {mode} has |<omega,nu>| = {divisor:.6e} < {threshold:.6e}"),
        KamError::Contraction {
            k,
            measured,
            bound,
            ratio,
        } => format!("contraction failed at k = {k}: |P_low| = {measured:.6e} > {bound:.6e}, log ratio {ratio:.6}"),
        _ => format!("error: {e}"),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let res = match &parsed.command {
        Command::Validate(a) => cmd_validate(a, out),
        Command::Step(a) => cmd_step(a, out),
        Command::Run(a) => cmd_run(a, out),
        Command::Measure(a) => cmd_measure(a, out),
        Command::Report(a) => cmd_report(a, out),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{}", describe(&e));
            exit_code(&e)
        }
    }
}

fn setup(a: &RunArgs) -> Result<(ModelSpec, RunConfig, IterationSchedule)> {
    let spec = load_model_path(&a.model)?;
    let cfg = a.config(&spec);
    let sched = build_schedule(cfg.params)?;
    Ok((spec, cfg, sched))
}

fn starting_state(a: &RunArgs, spec: &ModelSpec, cfg: &RunConfig, sched: &IterationSchedule) -> Result<StepState> {
    let ck_path = cfg.checkpoint.as_deref().expect("config always carries a checkpoint path");
    if !a.resume {
        return initial_state(spec, sched);
    }
    let ck = load_checkpoint(ck_path)?;
    if ck.params != sched.params {
        return Err(KamError::Parameter(
            "checkpoint schedule parameters differ from the command line".into(),
        ));
    }
    Ok(ck.state)
}

fn cmd_validate(a: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let (spec, cfg, sched) = setup(a)?;
    let state = initial_state(&spec, &sched)?;
    let omega = state.h.normal.omega.clone();
    writeln!(out, "model {} ok", cfg.model.display())?;
    writeln!(
        out,
        "alpha = {}, lambda = {}, eps = {:e}, couplings = {}",
        spec.weights.alpha,
        spec.weights.lambda,
        cfg.params.eps,
        spec.couplings.len()
    )?;
    for (j, w) in omega.iter() {
        writeln!(out, "omega[{j}] = {w:.12e}")?;
    }
    writeln!(out, "k  eps_k  s_k  r_k  L_k  M_k")?;
    for r in &sched.rows {
        writeln!(out, "{}  {:.6e}  {:.6}  {:.6}  {}  {}", r.k, r.eps_k, r.s_k, r.r_k, r.l_k, r.m_k)?;
    }
    Ok(())
}

fn write_outputs(out_dir: &Path, reports: &[StepReport], append: bool) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let open = |name: &str| -> Result<BufWriter<File>> {
        let f = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(out_dir.join(name))?;
        Ok(BufWriter::new(f))
    };
    let mut jsonl = open(REPORTS_JSONL)?;
    let mut timings = open(TIMINGS_JSONL)?;
    for r in reports {
        writeln!(jsonl, "{}", report_line(r)?)?;
        let t = Timing {
            k: r.k,
            wall_ms: r.wall_ms,
        };
        writeln!(timings, "{}", serde_json::to_string(&t)?)?;
    }
    jsonl.flush()?;
    timings.flush()?;
    drop((jsonl, timings));
    let all = read_reports(&out_dir.join(REPORTS_JSONL))?;
    let times = read_timings(&out_dir.join(TIMINGS_JSONL))?;
    write_csv(File::create(out_dir.join(REPORTS_CSV))?, &all, Some(&times))
}

fn cmd_step(a: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let (spec, cfg, sched) = setup(a)?;
    let state = starting_state(a, &spec, &cfg, &sched)?;
    let k = state.k;
    let (next, rep) = kam_step(&state, &sched, &a.options()).map_err(|e| e.at_step(k))?;
    write_outputs(&cfg.out, std::slice::from_ref(&rep), a.resume)?;
    if let Some(p) = &cfg.checkpoint {
        save_checkpoint(p, &Checkpoint::new(&sched, &next))?;
    }
    writeln!(
        out,
        "step {k}: P_low {:.6e} -> {:.6e}, F {:.6e}, min divisor {:.6e}",
        rep.p_low, rep.p_low_next, rep.f_norm, rep.min_divisor
    )?;
    Ok(())
}

fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let (spec, cfg, sched) = setup(a)?;
    let state = starting_state(a, &spec, &cfg, &sched)?;
    let ck_path = cfg.checkpoint.clone();
    let every = cfg.checkpoint_every;
    let (final_state, reports) = run_from(state, &sched, &a.options(), |st, _| {
        if let Some(p) = &ck_path {
            if every > 0 && (st.k % every == 0 || st.k == sched.steps()) {
                save_checkpoint(p, &Checkpoint::new(&sched, st))?;
            }
        }
        Ok(())
    })?;
    write_outputs(&cfg.out, &reports, a.resume)?;
    let conv = convergence_summary(&final_state, &reports, &sched)?;
    fs::write(cfg.out.join(SUMMARY_JSON), serde_json::to_string_pretty(&conv)?)?;
    for r in &reports {
        writeln!(
            out,
            "k={} P_low={:.6e} P_low_next={:.6e} ratio={} omega_dev={:.3e}",
            r.k,
            r.p_low,
            r.p_low_next,
            r.contraction_ratio.map_or("-".into(), |x| format!("{x:.4}")),
            r.omega_dev
        )?;
    }
    writeln!(
        out,
        "displacement {:.6e} (eps^0.34 = {:.6e}), |||sum Omega_hat||| {:.6e} (eps^0.2 = {:.6e})",
        conv.displacement, conv.eps_17_50, conv.correction_op, conv.eps_1_5
    )?;
    Ok(())
}

#[derive(Serialize)]
struct MeasureDoc<'a> {
    params: ScheduleParams,
    samples: usize,
    seed: u64,
    zones: &'a [crate::resonance_measure::ZoneReport],
    surviving_value: f64,
    per_step_bound: Option<Vec<f64>>,
}

fn cmd_measure(a: &MeasureArgs, out: &mut dyn Write) -> Result<()> {
    let (eps, alpha) = match &a.model {
        Some(p) => {
            let spec = load_model_path(p)?;
            (spec.eps, spec.weights.alpha)
        }
        None => (1e-4, 1.0),
    };
    let sched = build_schedule(a.schedule.params(eps, alpha))?;
    let zones = measure_schedule(&sched, a.samples, a.seed)?;
    let value = surviving_value(&sched, sched.steps());
    let per_step = surviving_measure_bound(&sched, sched.steps(), a.bound_c)
        .ok()
        .map(|b| b.per_step);
    writeln!(out, "k  dim  M_k  delta  mc_mean  std_err  exact  eps^kappa  holds")?;
    for z in &zones {
        writeln!(
            out,
            "{}  {}  {}  {:.6}  {:.6}  {:.2e}  {}  {:.6}  {}",
            z.zone.k,
            z.zone.dim,
            z.zone.m_cap,
            z.zone.delta,
            z.estimate.mean,
            z.estimate.std_error,
            z.exact.map_or("-".into(), |x| format!("{x:.6}")),
            z.paper_bound,
            z.holds
        )?;
    }
    writeln!(out, "1 - sum eps_j^kappa = {value:.6}")?;
    fs::create_dir_all(&a.out)?;
    let doc = MeasureDoc {
        params: sched.params,
        samples: a.samples,
        seed: a.seed,
        zones: &zones,
        surviving_value: value,
        per_step_bound: per_step,
    };
    fs::write(a.out.join(MEASURE_JSON), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let reports = read_reports(&a.input)?;
    let side = a.timings.clone().or_else(|| {
        let p = a.input.with_file_name(TIMINGS_JSONL);
        p.exists().then_some(p)
    });
    let timings = side.as_deref().map(read_timings).transpose()?;
    let csv_path = a.csv.clone().unwrap_or_else(|| a.input.with_extension("csv"));
    write_csv(File::create(&csv_path)?, &reports, timings.as_deref())?;
    writeln!(out, "{:>3} {:>12} {:>12} {:>12} {:>12} {:>10}", "k", "eps_k", "P_low", "P_low_next", "omega_dev", "ratio")?;
    for r in &reports {
        writeln!(
            out,
            "{:>3} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>10}",
            r.k,
            r.eps_k,
            r.p_low,
            r.p_low_next,
            r.omega_dev,
            r.contraction_ratio.map_or("-".into(), |x| format!("{x:.4}"))
        )?;
    }
    writeln!(out, "csv written to {}", csv_path.display())?;
    Ok(())
}
