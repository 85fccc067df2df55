//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::Serialize;

use ctact::activations::{ActivationKind, Thresholds};
use ctact::attack::{
    run_experiment, trial_rng, BaseLatency, DelayDistribution, DeviceTimingModel, ExperimentSpec, TrialOutcome,
    ATTACK_CLASSES, CLOCK_HZ, CONSTANT_TIME_CYCLES, RNG_ALGORITHM,
};
use ctact::error_analysis::{error_metrics, solve_tau_tanh, threshold_sweep, ErrorReport, SOLVER_BRACKET};
use ctact::grid::Grid;
use ctact::timing_harness::{
    aligned_lengths, check_uniformity, measure_host, measure_traces, trace_eval, TimeUnit, TimingSample,
};

use crate::config::ConfigFile;
use crate::output::{Format, Sink};
use crate::{Cli, CliError, Command, GridArgs, Status, OUT_DIR_ENV};

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_REPS: u32 = 5;
pub const DEFAULT_N_PROF: usize = 10_000;
pub const DEFAULT_N_MAX: usize = 8_000;
pub const DEFAULT_TRIALS: usize = 100;
pub const DEFAULT_JITTER_CYCLES: u32 = 10;
pub const DEFAULT_TOLERANCE: f64 = 1e-9;
const DEFAULT_GELU_CANDIDATES: [f32; 9] = [2.8, 3.0, 3.2, 3.4, 3.6, 3.8, 4.0, 4.2, 4.4];
const DEFAULT_SWISH_CANDIDATES: [f32; 9] = [6.0, 6.5, 7.0, 7.5, 8.0, 8.5, 9.0, 9.5, 10.0];

struct Context {
    seed: u64,
    sink: Sink,
    cfg: ConfigFile,
    summary: String,
}

impl Context {
    fn say(&mut self, text: &str) {
        self.summary.push_str(text);
    }
}

pub fn run(cli: Cli) -> Result<Status, CliError> {
    let cfg = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let format = Format::parse(cli.format.as_deref().or(cfg.format.as_deref()).unwrap_or("csv"))?;
    let dir: Option<PathBuf> = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
    let force = cli.force || cfg.force.unwrap_or(false);
    let seed = cli.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let mut ctx = Context { seed, sink: Sink::new(dir, force, format), cfg, summary: String::new() };

    let status = match cli.command {
        Command::Errors { grid, kinds } => errors(&mut ctx, &grid, kinds.as_deref())?,
        Command::Traces { grid, kinds, unprotected } => {
            traces(&mut ctx, &grid, kinds.as_deref(), unprotected.as_deref())?
        }
        Command::Bench { grid, kinds, variant, reps, clock, delay } => {
            let opts = BenchFlags { kinds, variant, reps, clock, delay };
            bench(&mut ctx, &grid, opts)?
        }
        Command::Attack { classes, n_prof, n_max, trials, countermeasure, delay, jitter_cycles, history_trials } => {
            let flags =
                AttackFlags { classes, n_prof, n_max, trials, countermeasure, delay, jitter_cycles, history_trials };
            attack(&mut ctx, flags)?
        }
        Command::Thresholds { tolerance, sweep, grid } => thresholds(&mut ctx, tolerance, sweep, &grid)?,
    };
    let Context { sink, summary, .. } = ctx;
    // Human-readable summary: stdout when artifacts go to files, else stderr.
    let to_files = sink.writes_files();
    let written = sink.flush()?;
    if to_files {
        print!("{summary}");
    } else {
        eprint!("{summary}");
    }
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(status)
}

// ---------------------------------------------------------------------------
// shared parsing
// ---------------------------------------------------------------------------

fn parse_kind_list<S: AsRef<str>>(items: &[S]) -> Result<Vec<ActivationKind>, CliError> {
    let mut kinds = Vec::new();
    for item in items {
        let name = item.as_ref().trim();
        if name.is_empty() {
            continue;
        }
        let kind: ActivationKind = name.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
        if kinds.contains(&kind) {
            return Err(CliError::Usage(format!("activation {kind} listed twice")));
        }
        kinds.push(kind);
    }
    Ok(kinds)
}

fn resolve_kinds(
    flag: Option<&str>,
    cfg: Option<&Vec<String>>,
    default: &[ActivationKind],
) -> Result<Vec<ActivationKind>, CliError> {
    match (flag, cfg) {
        (Some(s), _) => parse_kind_list(&s.split(',').collect::<Vec<_>>()),
        (None, Some(list)) => parse_kind_list(list),
        (None, None) => Ok(default.to_vec()),
    }
}

/// Flag, then config; with neither, the given default grids.
fn resolve_grids(
    args: &GridArgs,
    cfg_interval: Option<[f64; 2]>,
    cfg_step: Option<f64>,
    defaults: &[Grid],
) -> Result<Vec<Grid>, CliError> {
    let interval = match &args.interval {
        Some(v) => Some([v[0], v[1]]),
        None => cfg_interval,
    };
    let step = args.step.or(cfg_step);
    if interval.is_none() && step.is_none() {
        return Ok(defaults.to_vec());
    }
    let [lo, hi] = interval.unwrap_or([Grid::NARROW.lo, Grid::NARROW.hi]);
    let step = step.unwrap_or(Grid::NARROW.step);
    Grid::new(lo, hi, step).map(|g| vec![g]).map_err(|e| CliError::Usage(e.to_string()))
}

/// `calibrated`, `none`, `uniform:LO:HI` or `gaussian:MEAN:STD`.
fn parse_delay(spec: &str, base: &BaseLatency) -> Result<DelayDistribution, CliError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |s: &str| -> Result<f64, CliError> {
        s.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad number {s:?} in delay spec {spec:?}")))
    };
    let delay = match parts.as_slice() {
        ["calibrated"] => DelayDistribution::calibrated_uniform(base),
        ["none"] => DelayDistribution::None,
        ["uniform", lo, hi] => DelayDistribution::Uniform { lo_us: num(lo)?, hi_us: num(hi)? },
        ["gaussian", m, s] => DelayDistribution::TruncatedGaussian { mean_us: num(m)?, std_us: num(s)? },
        ["uniform", ..] | ["gaussian", ..] => {
            return Err(CliError::Usage(format!("delay spec {spec:?} needs exactly two parameters")))
        }
        _ => {
            return Err(CliError::Usage(format!(
                "unknown delay spec {spec:?} (calibrated, none, uniform:LO:HI, gaussian:MEAN:STD)"
            )))
        }
    };
    delay.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(delay)
}

fn variant_name(protected: bool) -> &'static str {
    if protected {
        "protected"
    } else {
        "unprotected"
    }
}

// ---------------------------------------------------------------------------
// errors
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ErrorRow {
    kind: ActivationKind,
    lo: f64,
    hi: f64,
    step: f64,
    points: usize,
    threshold: f32,
    mse: f64,
    rmse: f64,
    max_abs: f64,
    argmax_input: f32,
}

impl From<&ErrorReport> for ErrorRow {
    fn from(r: &ErrorReport) -> Self {
        ErrorRow {
            kind: r.kind,
            lo: r.lo,
            hi: r.hi,
            step: r.step,
            points: r.points,
            threshold: Thresholds::DEFAULT.for_kind(r.kind),
            mse: r.mse,
            rmse: r.rmse,
            max_abs: r.max_abs,
            argmax_input: r.argmax_input,
        }
    }
}

fn error_table(reports: &[ErrorReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>18} {:>7} {:>11} {:>11} {:>11} {:>10}",
        "kind", "interval/step", "points", "MSE", "RMSE", "max abs", "argmax x"
    );
    for r in reports {
        let grid = format!("[{}, {}]/{}", r.lo, r.hi, r.step);
        let _ = writeln!(
            s,
            "{:<8} {:>18} {:>7} {:>11.3e} {:>11.3e} {:>11.3e} {:>10}",
            r.kind.name(),
            grid,
            r.points,
            r.mse,
            r.rmse,
            r.max_abs,
            r.argmax_input
        );
    }
    s
}

fn errors(ctx: &mut Context, grid: &GridArgs, kinds: Option<&str>) -> Result<Status, CliError> {
    let sec = &ctx.cfg.errors;
    let grids = resolve_grids(grid, sec.interval, sec.step, &[Grid::NARROW, Grid::WIDE])?;
    let kinds = resolve_kinds(kinds, sec.kinds.as_ref(), &ActivationKind::NONLINEAR)?;
    if kinds.is_empty() {
        return Err(CliError::Usage("empty activation list".into()));
    }
    if kinds.contains(&ActivationKind::Relu) {
        return Err(CliError::Usage("relu is exact by construction; error metrics do not apply".into()));
    }
    let mut bounds = Vec::new();
    for (name, bound) in &sec.bounds {
        let kind: ActivationKind = name.parse().map_err(|e| CliError::Usage(format!("errors.bounds: {e}")))?;
        bounds.push((kind, bound));
    }

    let mut reports = Vec::new();
    for g in &grids {
        for &kind in &kinds {
            reports.push(error_metrics(kind, g).map_err(|e| CliError::Usage(e.to_string()))?);
        }
    }

    let mut failures = Vec::new();
    for (kind, bound) in &bounds {
        for r in reports.iter().filter(|r| r.kind == *kind) {
            let checks =
                [("max_abs", bound.max_abs, r.max_abs), ("rmse", bound.rmse, r.rmse), ("mse", bound.mse, r.mse)];
            for (metric, limit, value) in checks {
                if let Some(limit) = limit {
                    if value.is_nan() || value > limit {
                        failures
                            .push(format!("{kind} {metric} on [{}, {}]/{}: {value:e} > {limit:e}", r.lo, r.hi, r.step));
                    }
                }
            }
        }
    }

    let rows: Vec<ErrorRow> = reports.iter().map(ErrorRow::from).collect();
    let table = error_table(&reports);
    ctx.sink.records("errors", &rows)?;
    ctx.sink.text("errors_table.txt", table.clone());
    ctx.say(&table);
    Ok(if failures.is_empty() { Status::Ok } else { Status::Failed(failures) })
}

// ---------------------------------------------------------------------------
// traces
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TraceReportRow {
    lo: f64,
    hi: f64,
    step: f64,
    kind: ActivationKind,
    variant: &'static str,
    points: usize,
    uniform: bool,
    canonical_length: usize,
    distinct_lengths: String,
    control_flow: bool,
    deviating_inputs: usize,
}

#[derive(Serialize)]
struct AlignmentRow {
    lo: f64,
    hi: f64,
    step: f64,
    kinds: String,
    aligned: bool,
    trace_len: Option<usize>,
}

#[derive(Serialize)]
struct TraceLengthRow {
    lo: f64,
    hi: f64,
    step: f64,
    kind: ActivationKind,
    variant: &'static str,
    input: f32,
    trace_len: usize,
}

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

fn traces(
    ctx: &mut Context,
    grid: &GridArgs,
    kinds: Option<&str>,
    unprotected: Option<&str>,
) -> Result<Status, CliError> {
    let sec = &ctx.cfg.traces;
    let grids = resolve_grids(grid, sec.interval, sec.step, &[Grid::NARROW, Grid::WIDE])?;
    let protected = resolve_kinds(kinds, sec.kinds.as_ref(), &ActivationKind::ALL)?;
    let unprotected = resolve_kinds(unprotected, sec.unprotected.as_ref(), &[])?;
    if protected.is_empty() && unprotected.is_empty() {
        return Err(CliError::Usage("empty activation list".into()));
    }
    let variants: Vec<(ActivationKind, bool)> =
        protected.iter().map(|&k| (k, true)).chain(unprotected.iter().map(|&k| (k, false))).collect();

    let mut report_rows = Vec::new();
    let mut alignment_rows = Vec::new();
    let mut length_rows = Vec::new();
    let mut deviating_rows = Vec::new();
    let mut failures = Vec::new();
    let mut summary = String::new();

    for g in &grids {
        let points = g.points();
        for &(kind, is_protected) in &variants {
            let report = check_uniformity(kind, is_protected, &points).map_err(|e| CliError::Runtime(e.to_string()))?;
            for &x in &points {
                let trace_len = trace_eval(kind, x, is_protected).trace.len();
                length_rows.push(TraceLengthRow {
                    lo: g.lo,
                    hi: g.hi,
                    step: g.step,
                    kind,
                    variant: variant_name(is_protected),
                    input: x,
                    trace_len,
                });
            }
            let _ = writeln!(
                summary,
                "[{}, {}]/{} {:<8} {:<11} uniform={} lengths={}",
                g.lo,
                g.hi,
                g.step,
                kind.name(),
                variant_name(is_protected),
                report.uniform,
                join(&report.distinct_lengths, ",")
            );
            if is_protected && (!report.uniform || report.control_flow) {
                failures.push(format!(
                    "protected {kind} on [{}, {}]/{}: {} deviating inputs, control flow {}",
                    g.lo,
                    g.hi,
                    g.step,
                    report.deviating_inputs.len(),
                    report.control_flow
                ));
                for &(input, trace_len) in &report.deviating_inputs {
                    deviating_rows.push(TraceLengthRow {
                        lo: g.lo,
                        hi: g.hi,
                        step: g.step,
                        kind,
                        variant: "protected",
                        input,
                        trace_len,
                    });
                }
            }
            report_rows.push(TraceReportRow {
                lo: g.lo,
                hi: g.hi,
                step: g.step,
                kind,
                variant: variant_name(is_protected),
                points: points.len(),
                uniform: report.uniform,
                canonical_length: report.canonical_length,
                distinct_lengths: join(&report.distinct_lengths, ";"),
                control_flow: report.control_flow,
                deviating_inputs: report.deviating_inputs.len(),
            });
        }
        if !protected.is_empty() {
            let pv: Vec<(ActivationKind, bool)> = protected.iter().map(|&k| (k, true)).collect();
            let aligned = aligned_lengths(&pv, &points).map_err(|e| CliError::Runtime(e.to_string()))?;
            let trace_len = if aligned { Some(trace_eval(protected[0], points[0], true).trace.len()) } else { None };
            let _ = writeln!(summary, "[{}, {}]/{} protected aligned={}", g.lo, g.hi, g.step, aligned);
            if !aligned {
                failures.push(format!("protected trace lengths not aligned on [{}, {}]/{}", g.lo, g.hi, g.step));
            }
            alignment_rows.push(AlignmentRow {
                lo: g.lo,
                hi: g.hi,
                step: g.step,
                kinds: join(&protected, ";"),
                aligned,
                trace_len,
            });
        }
    }

    ctx.sink.records("traces_report", &report_rows)?;
    ctx.sink.records("traces_alignment", &alignment_rows)?;
    ctx.sink.records("trace_lengths", &length_rows)?;
    if !deviating_rows.is_empty() {
        ctx.sink.records("deviating_inputs", &deviating_rows)?;
    }
    ctx.say(&summary);
    Ok(if failures.is_empty() { Status::Ok } else { Status::Failed(failures) })
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchFlags {
    kinds: Option<String>,
    variant: Option<String>,
    reps: Option<u32>,
    clock: Option<String>,
    delay: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Clock {
    Host,
    Trace,
    Model,
}

impl Clock {
    fn column(self) -> &'static str {
        match self {
            Clock::Host => "elapsed_ns",
            Clock::Trace => "trace_len",
            Clock::Model => "cycles",
        }
    }
}

#[derive(Serialize)]
struct SummaryRow {
    kind: ActivationKind,
    variant: &'static str,
    unit: TimeUnit,
    samples: usize,
    min: f64,
    mean: f64,
    median: f64,
    std: f64,
    max: f64,
}

/// min, mean, median, sample std, max.
fn summarize(values: &mut [f64]) -> (f64, f64, f64, f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) };
    let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    (values[0], mean, median, var.sqrt(), values[n - 1])
}

fn bench(ctx: &mut Context, grid: &GridArgs, flags: BenchFlags) -> Result<Status, CliError> {
    let sec = &ctx.cfg.bench;
    let grids = resolve_grids(grid, sec.interval, sec.step, &[Grid::WIDE])?;
    let points = grids[0].points();
    let kinds = resolve_kinds(flags.kinds.as_deref(), sec.kinds.as_ref(), &ActivationKind::ALL)?;
    if kinds.is_empty() {
        return Err(CliError::Usage("empty activation list".into()));
    }
    let variants: &[bool] = match flags.variant.as_deref().or(sec.variant.as_deref()).unwrap_or("protected") {
        "protected" => &[true],
        "unprotected" => &[false],
        "both" => &[true, false],
        other => return Err(CliError::Usage(format!("unknown variant {other:?} (protected, unprotected, both)"))),
    };
    let reps = flags.reps.or(sec.reps).unwrap_or(DEFAULT_REPS);
    if reps == 0 {
        return Err(CliError::Usage("reps must be at least 1".into()));
    }
    let clock = match flags.clock.as_deref().or(sec.clock.as_deref()).unwrap_or("host") {
        "host" => Clock::Host,
        "trace" => Clock::Trace,
        "model" => Clock::Model,
        other => return Err(CliError::Usage(format!("unknown clock {other:?} (host, trace, model)"))),
    };
    let delay_spec = flags.delay.or_else(|| sec.delay.clone());
    if delay_spec.is_some() && clock != Clock::Model {
        return Err(CliError::Usage("--delay applies only to --clock model".into()));
    }
    let unprotected_base = BaseLatency::Unprotected { jitter_cycles: DEFAULT_JITTER_CYCLES };
    let delay = parse_delay(delay_spec.as_deref().unwrap_or("none"), &unprotected_base)?;

    let mut samples: Vec<TimingSample> = Vec::new();
    for (ki, &kind) in kinds.iter().enumerate() {
        for (vi, &protected) in variants.iter().enumerate() {
            let batch = match clock {
                Clock::Host => measure_host(kind, protected, &points, reps),
                Clock::Trace => measure_traces(kind, protected, &points, reps),
                Clock::Model => {
                    let base = if protected { BaseLatency::CONSTANT_TIME } else { unprotected_base };
                    let model = DeviceTimingModel { base, clock_hz: CLOCK_HZ, delay };
                    let mut rng = trial_rng(ctx.seed, ki, vi);
                    let mut out = Vec::with_capacity(points.len() * reps as usize);
                    for &x in &points {
                        for repetition in 0..reps {
                            let elapsed = model.simulate_cycles(kind, x, &mut rng);
                            out.push(TimingSample {
                                kind,
                                protected,
                                input: x,
                                elapsed,
                                unit: TimeUnit::Cycles,
                                repetition,
                            });
                        }
                    }
                    Ok(out)
                }
            }
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            samples.extend(batch);
        }
    }

    let column = clock.column();
    match ctx.sink.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let encode = |e: csv::Error| CliError::Runtime(format!("csv encoding: {e}"));
            w.write_record(["kind", "variant", "input", "repetition", column]).map_err(encode)?;
            for s in &samples {
                w.write_record([
                    s.kind.name().to_string(),
                    variant_name(s.protected).to_string(),
                    s.input.to_string(),
                    s.repetition.to_string(),
                    s.elapsed.to_string(),
                ])
                .map_err(encode)?;
            }
            let bytes = w.into_inner().map_err(|e| CliError::Runtime(format!("csv encoding: {e}")))?;
            ctx.sink.text("bench_samples.csv", String::from_utf8_lossy(&bytes).into_owned());
        }
        Format::Json => {
            let rows: Vec<serde_json::Value> = samples
                .iter()
                .map(|s| {
                    let mut m = serde_json::Map::new();
                    m.insert("kind".into(), s.kind.name().into());
                    m.insert("variant".into(), variant_name(s.protected).into());
                    m.insert("input".into(), serde_json::json!(s.input));
                    m.insert("repetition".into(), s.repetition.into());
                    m.insert(column.into(), s.elapsed.into());
                    serde_json::Value::Object(m)
                })
                .collect();
            ctx.sink.json("bench_samples.json", &rows)?;
        }
    }

    let mut summary = Vec::new();
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:<8} {:<11} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "kind", "variant", "min", "mean", "median", "std", "max"
    );
    for &kind in &kinds {
        for &protected in variants {
            let mut values: Vec<f64> = samples
                .iter()
                .filter(|s| s.kind == kind && s.protected == protected)
                .map(|s| s.elapsed as f64)
                .collect();
            let (min, mean, median, std, max) = summarize(&mut values);
            let unit = samples[0].unit;
            let _ = writeln!(
                text,
                "{:<8} {:<11} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>10.2}",
                kind.name(),
                variant_name(protected),
                min,
                mean,
                median,
                std,
                max
            );
            summary.push(SummaryRow {
                kind,
                variant: variant_name(protected),
                unit,
                samples: values.len(),
                min,
                mean,
                median,
                std,
                max,
            });
        }
    }
    ctx.sink.records("bench_summary", &summary)?;
    ctx.say(&text);
    Ok(Status::Ok)
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

struct AttackFlags {
    classes: Option<String>,
    n_prof: Option<usize>,
    n_max: Option<usize>,
    trials: Option<usize>,
    countermeasure: Option<String>,
    delay: Option<String>,
    jitter_cycles: Option<u32>,
    history_trials: Option<usize>,
}

#[derive(Serialize)]
struct ScoreRow {
    true_class: ActivationKind,
    trial: usize,
    n: usize,
    class: ActivationKind,
    score: f64,
}

#[derive(Serialize)]
struct TrialRow {
    true_class: ActivationKind,
    trial: usize,
    success: bool,
    separation_n: Option<usize>,
    final_leader: ActivationKind,
}

#[derive(Serialize)]
struct TemplateRow {
    true_class: ActivationKind,
    trial: usize,
    class: ActivationKind,
    mu: f64,
    sigma_sq: f64,
    n_prof: usize,
}

#[derive(Serialize)]
struct ClassSummary {
    true_class: ActivationKind,
    trials: usize,
    success_rate: f64,
    median_separation_n: Option<f64>,
    final_leader_counts: BTreeMap<ActivationKind, usize>,
}

#[derive(Serialize)]
struct AttackSummary {
    rng: &'static str,
    seed: u64,
    countermeasure: String,
    model: DeviceTimingModel,
    classes: Vec<ActivationKind>,
    n_prof: usize,
    n_max: usize,
    trials: usize,
    success_rate: f64,
    median_separation_n: Option<f64>,
    per_class: Vec<ClassSummary>,
}

/// Median with failed trials ranked above every success; `None` when the
/// median falls on a failure.
fn median_separation(outcomes: &[&TrialOutcome]) -> Option<f64> {
    let mut ns: Vec<Option<usize>> = outcomes.iter().map(|o| o.result.separation_n).collect();
    ns.sort_by_key(|n| n.unwrap_or(usize::MAX));
    let len = ns.len();
    if len == 0 {
        return None;
    }
    if len % 2 == 1 {
        ns[len / 2].map(|n| n as f64)
    } else {
        Some(0.5 * (ns[len / 2 - 1]? as f64 + ns[len / 2]? as f64))
    }
}

fn attack(ctx: &mut Context, flags: AttackFlags) -> Result<Status, CliError> {
    let sec = &ctx.cfg.attack;
    let classes = resolve_kinds(flags.classes.as_deref(), sec.classes.as_ref(), &ATTACK_CLASSES)?;
    if classes.len() < 2 {
        return Err(CliError::Usage("an attack needs at least two candidate classes".into()));
    }
    let n_prof = flags.n_prof.or(sec.n_prof).unwrap_or(DEFAULT_N_PROF);
    let n_max = flags.n_max.or(sec.n_max).unwrap_or(DEFAULT_N_MAX);
    let trials = flags.trials.or(sec.trials).unwrap_or(DEFAULT_TRIALS);
    let history_trials = flags.history_trials.or(sec.history_trials).unwrap_or(1).min(trials);
    if n_prof < 2 {
        return Err(CliError::Usage("n_prof must be at least 2".into()));
    }
    if n_max == 0 || trials == 0 {
        return Err(CliError::Usage("n_max and trials must be positive".into()));
    }
    let jitter = flags.jitter_cycles.or(sec.jitter_cycles).unwrap_or(DEFAULT_JITTER_CYCLES);
    let unprotected = BaseLatency::Unprotected { jitter_cycles: jitter };
    let countermeasure = flags.countermeasure.or_else(|| sec.countermeasure.clone()).unwrap_or_else(|| "desync".into());
    let base = match countermeasure.as_str() {
        "desync" => unprotected,
        "constant-time" => BaseLatency::ConstantTime { cycles: CONSTANT_TIME_CYCLES },
        other => return Err(CliError::Usage(format!("unknown countermeasure {other:?} (desync, constant-time)"))),
    };
    let delay_spec = flags.delay.or_else(|| sec.delay.clone()).unwrap_or_else(|| "calibrated".into());
    let delay = parse_delay(&delay_spec, &unprotected)?;
    let model = DeviceTimingModel { base, clock_hz: CLOCK_HZ, delay };

    let spec = ExperimentSpec { model, classes: classes.clone(), n_prof, n_max, trials, seed: ctx.seed };
    let outcomes = run_experiment(&spec).map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut score_rows = Vec::new();
    let mut trial_rows = Vec::new();
    let mut template_rows = Vec::new();
    let mut per_class = Vec::new();
    for (ci, per_trial) in outcomes.iter().enumerate() {
        let true_class = classes[ci];
        for o in per_trial {
            let r = &o.result;
            if o.trial < history_trials {
                for (c, history) in r.score_history.iter().enumerate() {
                    for (i, &score) in history.iter().enumerate() {
                        score_rows.push(ScoreRow { true_class, trial: o.trial, n: i + 1, class: r.classes[c], score });
                    }
                }
            }
            trial_rows.push(TrialRow {
                true_class,
                trial: o.trial,
                success: r.success,
                separation_n: r.separation_n,
                final_leader: r.final_leader(),
            });
            for t in &o.templates {
                template_rows.push(TemplateRow {
                    true_class,
                    trial: o.trial,
                    class: t.class,
                    mu: t.mu,
                    sigma_sq: t.sigma_sq,
                    n_prof: t.n_prof,
                });
            }
        }
        let refs: Vec<&TrialOutcome> = per_trial.iter().collect();
        let mut counts: BTreeMap<ActivationKind, usize> = classes.iter().map(|&c| (c, 0)).collect();
        for o in per_trial {
            *counts.entry(o.result.final_leader()).or_default() += 1;
        }
        per_class.push(ClassSummary {
            true_class,
            trials: per_trial.len(),
            success_rate: per_trial.iter().filter(|o| o.result.success).count() as f64 / per_trial.len() as f64,
            median_separation_n: median_separation(&refs),
            final_leader_counts: counts,
        });
    }
    let all: Vec<&TrialOutcome> = outcomes.iter().flatten().collect();
    let summary = AttackSummary {
        rng: RNG_ALGORITHM,
        seed: ctx.seed,
        countermeasure,
        model,
        classes,
        n_prof,
        n_max,
        trials,
        success_rate: all.iter().filter(|o| o.result.success).count() as f64 / all.len() as f64,
        median_separation_n: median_separation(&all),
        per_class,
    };

    let mut text = String::new();
    for c in &summary.per_class {
        let median = c.median_separation_n.map_or("none".to_string(), |m| m.to_string());
        let _ = writeln!(
            text,
            "{:<8} success rate {:.3}, median separation {}",
            c.true_class.name(),
            c.success_rate,
            median
        );
    }
    ctx.sink.records("attack_scores", &score_rows)?;
    ctx.sink.records("attack_trials", &trial_rows)?;
    ctx.sink.records("attack_templates", &template_rows)?;
    ctx.sink.json("attack_summary.json", &summary)?;
    ctx.say(&text);
    Ok(Status::Ok)
}

// ---------------------------------------------------------------------------
// thresholds
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ThresholdRow {
    parameter: &'static str,
    value: f64,
    binary32: f32,
    provenance: &'static str,
}

#[derive(Serialize)]
struct SolverInfo {
    tolerance: f64,
    bracket: [f64; 2],
    tau: f64,
    residual: f64,
    iterations: u32,
}

#[derive(Serialize)]
struct ThresholdsOutput {
    solver: SolverInfo,
    thresholds: Vec<ThresholdRow>,
}

#[derive(Serialize)]
struct SweepRow {
    kind: ActivationKind,
    tau: f32,
    is_default: bool,
    lo: f64,
    hi: f64,
    step: f64,
    rmse: f64,
    max_abs: f64,
    argmax_input: f32,
}

/// Shortest decimal of a binary32 constant, widened.
fn decimal(x: f32) -> f64 {
    x.to_string().parse().unwrap_or(x as f64)
}

fn thresholds(ctx: &mut Context, tolerance: Option<f64>, sweep: bool, grid: &GridArgs) -> Result<Status, CliError> {
    let sec = &ctx.cfg.thresholds;
    let tolerance = tolerance.or(sec.tolerance).unwrap_or(DEFAULT_TOLERANCE);
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(CliError::Usage(format!("tolerance must be positive, got {tolerance}")));
    }
    let sweep = sweep || sec.sweep.unwrap_or(false);
    let grids = resolve_grids(grid, sec.interval, sec.step, &[Grid::WIDE])?;
    let gelu_candidates = sec.gelu_candidates.clone().unwrap_or_else(|| DEFAULT_GELU_CANDIDATES.to_vec());
    let swish_candidates = sec.swish_candidates.clone().unwrap_or_else(|| DEFAULT_SWISH_CANDIDATES.to_vec());
    if sweep {
        if let Some(bad) = gelu_candidates.iter().chain(&swish_candidates).find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(CliError::Usage(format!("sweep candidates must be positive, got {bad}")));
        }
    }

    let s = solve_tau_tanh(tolerance).map_err(|e| CliError::Runtime(e.to_string()))?;
    let t = Thresholds::DEFAULT;
    let out = ThresholdsOutput {
        solver: SolverInfo {
            tolerance,
            bracket: [SOLVER_BRACKET.0, SOLVER_BRACKET.1],
            tau: s.tau,
            residual: s.residual,
            iterations: s.iterations,
        },
        thresholds: vec![
            ThresholdRow { parameter: "tau_tanh", value: s.tau, binary32: t.tau_tanh, provenance: "solved" },
            ThresholdRow {
                parameter: "tau_sigmoid",
                value: 2.0 * s.tau,
                binary32: t.tau_sigmoid,
                provenance: "derived",
            },
            ThresholdRow {
                parameter: "tau_gelu",
                value: decimal(t.tau_gelu),
                binary32: t.tau_gelu,
                provenance: "empirical",
            },
            ThresholdRow {
                parameter: "tau_swish",
                value: decimal(t.tau_swish),
                binary32: t.tau_swish,
                provenance: "empirical",
            },
        ],
    };
    let mut text = String::new();
    for r in &out.thresholds {
        let _ = writeln!(text, "{:<12} {:<20} {}", r.parameter, r.value, r.provenance);
    }
    ctx.sink.json("thresholds.json", &out)?;

    if sweep {
        let mut rows = Vec::new();
        for g in &grids {
            for (kind, candidates) in
                [(ActivationKind::Gelu, &gelu_candidates), (ActivationKind::Swish, &swish_candidates)]
            {
                let default = t.for_kind(kind);
                for (tau, r) in threshold_sweep(kind, candidates, g).map_err(|e| CliError::Usage(e.to_string()))? {
                    rows.push(SweepRow {
                        kind,
                        tau,
                        is_default: tau == default,
                        lo: r.lo,
                        hi: r.hi,
                        step: r.step,
                        rmse: r.rmse,
                        max_abs: r.max_abs,
                        argmax_input: r.argmax_input,
                    });
                }
            }
        }
        for r in &rows {
            let _ = writeln!(text, "sweep {:<6} tau={:<5} max_abs={:.3e}", r.kind.name(), r.tau, r.max_abs);
        }
        ctx.sink.records("threshold_sweep", &rows)?;
    }
    ctx.say(&text);
    Ok(Status::Ok)
}
