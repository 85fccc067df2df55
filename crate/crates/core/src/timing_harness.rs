//! Constant-time verification at desk scale.
//!
//! The primary oracle is [`trace_eval`]: it runs an activation on the
//! recording [`Tracer`] machine and returns the abstract operation sequence.
//! Wall-clock sampling ([`measure_host`]) and the Welch test are advisory,
//! since host jitter makes hard thresholds meaningless.

use std::hint::black_box;
use std::sync::atomic::{compiler_fence, Ordering};
use std::time::Instant;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::activations::{eval, eval_in, ActivationKind};
use crate::ct_select::{self, Mask32};
use crate::machine::{Machine, Op, Transcendental};

#[derive(Debug, Error, PartialEq)]
pub enum HarnessError {
    #[error("input grid is empty")]
    EmptyGrid,
    #[error("no activation variants requested")]
    EmptyKinds,
    #[error("repetition count must be at least 1")]
    ZeroRepetitions,
    #[error("sample set {0} is empty")]
    EmptySamples(char),
    #[error("significance level {0} outside (0, 1)")]
    Alpha(f64),
    #[error("input {0} is not finite")]
    NonFinite(f32),
    #[error("clock failure: {0}")]
    Clock(String),
}

/// Recorded abstract operation sequence of one evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct OpTrace {
    ops: Vec<Op>,
}

impl OpTrace {
    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn has_control_flow(&self) -> bool {
        self.ops.iter().any(|op| op.is_control_flow())
    }

    pub fn count(&self, op: Op) -> usize {
        self.ops.iter().filter(|&&o| o == op).count()
    }
}

/// [`Machine`] that executes like `Direct` and records every operation.
#[derive(Debug, Default)]
pub struct Tracer {
    ops: Vec<Op>,
}

impl Tracer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_trace(self) -> OpTrace {
        OpTrace { ops: self.ops }
    }
}

impl Machine for Tracer {
    fn add<F: Float>(&mut self, a: F, b: F) -> F {
        self.ops.push(Op::Add);
        a + b
    }
    fn mul<F: Float>(&mut self, a: F, b: F) -> F {
        self.ops.push(Op::Mul);
        a * b
    }
    fn div<F: Float>(&mut self, a: F, b: F) -> F {
        self.ops.push(Op::Div);
        a / b
    }
    fn neg<F: Float>(&mut self, a: F) -> F {
        self.ops.push(Op::Neg);
        -a
    }
    fn gt<F: Float>(&mut self, a: F, b: F) -> bool {
        self.ops.push(Op::Cmp);
        a > b
    }
    fn mask(&mut self, b: bool) -> Mask32 {
        self.ops.push(Op::Mask);
        ct_select::mask_from_bool(b)
    }
    fn select(&mut self, a: f32, b: f32, mask: Mask32) -> f32 {
        self.ops.push(Op::Select);
        ct_select::ct_select_f32(a, b, mask)
    }
    fn and(&mut self, a: u32, b: u32) -> u32 {
        self.ops.push(Op::And);
        a & b
    }
    fn or(&mut self, a: u32, b: u32) -> u32 {
        self.ops.push(Op::Or);
        a | b
    }
    fn not(&mut self, a: u32) -> u32 {
        self.ops.push(Op::Not);
        !a
    }
    fn bits_of(&mut self, x: f32) -> u32 {
        self.ops.push(Op::Bitcast);
        x.to_bits()
    }
    fn float_of(&mut self, bits: u32) -> f32 {
        self.ops.push(Op::Bitcast);
        f32::from_bits(bits)
    }
    fn branch(&mut self, taken: bool) -> bool {
        self.ops.push(Op::Branch);
        taken
    }
    fn libm(&mut self, f: Transcendental, x: f64) -> f64 {
        let ops = &mut self.ops;
        f.cost(x, &mut |op| ops.push(op));
        f.eval(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracedEval {
    pub value: f32,
    pub trace: OpTrace,
}

pub fn trace_eval(kind: ActivationKind, x: f32, protected: bool) -> TracedEval {
    let mut tracer = Tracer::new();
    let value = eval_in(&mut tracer, kind, x, protected);
    TracedEval { value, trace: tracer.into_trace() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    pub kind: ActivationKind,
    pub protected: bool,
    pub uniform: bool,
    pub canonical_length: usize,
    /// Inputs whose trace differs from the first grid point's, with length.
    pub deviating_inputs: Vec<(f32, usize)>,
    pub distinct_lengths: Vec<usize>,
    pub control_flow: bool,
}

/// Traces every grid point; uniform iff all traces equal the first one
/// opcode by opcode.
pub fn check_uniformity(kind: ActivationKind, protected: bool, grid: &[f32]) -> Result<UniformityReport, HarnessError> {
    let (&first, rest) = grid.split_first().ok_or(HarnessError::EmptyGrid)?;
    if let Some(&bad) = grid.iter().find(|x| !x.is_finite()) {
        return Err(HarnessError::NonFinite(bad));
    }
    let canonical = trace_eval(kind, first, protected).trace;
    let mut control_flow = canonical.has_control_flow();
    let mut lengths = vec![canonical.len()];
    let mut deviating = Vec::new();
    for &x in rest {
        let trace = trace_eval(kind, x, protected).trace;
        control_flow |= trace.has_control_flow();
        if trace != canonical {
            deviating.push((x, trace.len()));
        }
        lengths.push(trace.len());
    }
    lengths.sort_unstable();
    lengths.dedup();
    Ok(UniformityReport {
        kind,
        protected,
        uniform: deviating.is_empty(),
        canonical_length: canonical.len(),
        deviating_inputs: deviating,
        distinct_lengths: lengths,
        control_flow,
    })
}

/// True iff every variant is uniform on `grid` and they share one length.
pub fn aligned_lengths(variants: &[(ActivationKind, bool)], grid: &[f32]) -> Result<bool, HarnessError> {
    if variants.is_empty() {
        return Err(HarnessError::EmptyKinds);
    }
    let mut common = None;
    for &(kind, protected) in variants {
        let report = check_uniformity(kind, protected, grid)?;
        if !report.uniform {
            return Ok(false);
        }
        match common {
            None => common = Some(report.canonical_length),
            Some(len) if len != report.canonical_length => return Ok(false),
            Some(_) => {}
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    Nanoseconds,
    Cycles,
    /// Abstract operation count from the tracer.
    Ops,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub kind: ActivationKind,
    pub protected: bool,
    pub input: f32,
    pub elapsed: u64,
    pub unit: TimeUnit,
    pub repetition: u32,
}

/// One monotonic-clock sample per input per repetition, after a warm-up pass.
///
/// The timed region contains the call and a `black_box` sink, fenced on both
/// sides. Samples are not aggregated. Run one measurement loop at a time.
pub fn measure_host(
    kind: ActivationKind,
    protected: bool,
    grid: &[f32],
    reps: u32,
) -> Result<Vec<TimingSample>, HarnessError> {
    if reps == 0 {
        return Err(HarnessError::ZeroRepetitions);
    }
    if grid.is_empty() {
        return Err(HarnessError::EmptyGrid);
    }
    for &x in grid {
        black_box(eval(kind, black_box(x), protected));
    }
    let mut samples = Vec::with_capacity(grid.len() * reps as usize);
    for &x in grid {
        for repetition in 0..reps {
            let input = black_box(x);
            compiler_fence(Ordering::SeqCst);
            let start = Instant::now();
            compiler_fence(Ordering::SeqCst);
            black_box(eval(kind, input, protected));
            compiler_fence(Ordering::SeqCst);
            let elapsed = start.elapsed();
            compiler_fence(Ordering::SeqCst);
            let elapsed = u64::try_from(elapsed.as_nanos())
                .map_err(|_| HarnessError::Clock("elapsed time overflows u64 nanoseconds".into()))?;
            samples.push(TimingSample { kind, protected, input: x, elapsed, unit: TimeUnit::Nanoseconds, repetition });
        }
    }
    Ok(samples)
}

/// Trace-length "timing": deterministic stand-in for host sampling.
pub fn measure_traces(
    kind: ActivationKind,
    protected: bool,
    grid: &[f32],
    reps: u32,
) -> Result<Vec<TimingSample>, HarnessError> {
    if reps == 0 {
        return Err(HarnessError::ZeroRepetitions);
    }
    if grid.is_empty() {
        return Err(HarnessError::EmptyGrid);
    }
    let mut samples = Vec::with_capacity(grid.len() * reps as usize);
    for &x in grid {
        let len = trace_eval(kind, x, protected).trace.len() as u64;
        for repetition in 0..reps {
            samples.push(TimingSample { kind, protected, input: x, elapsed: len, unit: TimeUnit::Ops, repetition });
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    /// Welch-Satterthwaite degrees of freedom; infinite when undefined.
    pub df: f64,
    pub threshold: f64,
    pub leak: bool,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Two-sided Welch t-test; a leak is reported iff `|t|` exceeds the
/// `1 - alpha/2` quantile of Student's t with Welch-Satterthwaite degrees of
/// freedom. Advisory on hosts.
pub fn welch_leakage_test(a: &[f64], b: &[f64], alpha: f64) -> Result<WelchResult, HarnessError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(HarnessError::Alpha(alpha));
    }
    if a.is_empty() {
        return Err(HarnessError::EmptySamples('a'));
    }
    if b.is_empty() {
        return Err(HarnessError::EmptySamples('b'));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let t = if se2 > 0.0 {
        (ma - mb) / se2.sqrt()
    } else if ma == mb {
        0.0
    } else {
        f64::INFINITY.copysign(ma - mb)
    };
    let df = if se2 > 0.0 && na > 1.0 && nb > 1.0 {
        se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0))
    } else {
        f64::INFINITY
    };
    let q = 1.0 - alpha / 2.0;
    let threshold = if df.is_finite() {
        StudentsT::new(0.0, 1.0, df).map(|d| d.inverse_cdf(q)).unwrap_or(f64::NAN)
    } else {
        Normal::standard().inverse_cdf(q)
    };
    Ok(WelchResult { t, df, threshold, leak: t.abs() > threshold })
}
