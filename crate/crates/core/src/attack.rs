//! Desynchronization countermeasure and profiled Gaussian-template attack.
//!
//! A [`DeviceTimingModel`] produces integer cycle counts per evaluation: an
//! input-dependent base latency plus a nonnegative random delay. Latencies are
//! converted to microseconds only when templates are fitted or scored.
//!
//! Randomness comes from ChaCha8 ([`rand_chacha::ChaCha8Rng`]). Trial `i` of
//! true class `c` uses the master seed with stream `(c << 32) | i`, so trials
//! are independent and can run in any order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activations::ActivationKind;

pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9), stream = (class_index << 32) | trial";

pub const CLOCK_HZ: f64 = 84.0e6;
/// Common protected latency of the five-function build.
pub const CONSTANT_TIME_CYCLES: u32 = 108;
/// Profiling and attack inputs are uniform on this interval.
pub const INPUT_RANGE: (f32, f32) = (-8.0, 8.0);

/// Published template moments `(mu [us], sigma^2 [us^2])` of the
/// desynchronized ReLU, sigmoid and tanh.
pub const PUBLISHED_TEMPLATES: [(ActivationKind, f64, f64); 3] = [
    (ActivationKind::Relu, 9.964, 20.346),
    (ActivationKind::Sigmoid, 12.380, 20.575),
    (ActivationKind::Tanh, 14.520, 20.645),
];

pub const ATTACK_CLASSES: [ActivationKind; 3] = [ActivationKind::Relu, ActivationKind::Sigmoid, ActivationKind::Tanh];

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("at least 2 samples are required to fit a template, got {0}")]
    TooFewSamples(usize),
    #[error("template for {0} has non-positive or non-finite variance")]
    DegenerateTemplate(ActivationKind),
    #[error("no template for class {0}")]
    MissingTemplate(ActivationKind),
    #[error("duplicate template for class {0}")]
    DuplicateTemplate(ActivationKind),
    #[error("measurement count must be at least 1")]
    NoMeasurements,
    #[error("invalid delay distribution: {0}")]
    Delay(String),
    #[error("invalid timing model: {0}")]
    Model(String),
}

/// Nominal unprotected latency in cycles.
pub fn nominal_cycles(kind: ActivationKind) -> u32 {
    match kind {
        ActivationKind::Relu => 12,
        ActivationKind::Sigmoid => 221,
        ActivationKind::Tanh => 403,
        ActivationKind::Gelu => 103,
        ActivationKind::Swish => 174,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaseLatency {
    /// Nominal cycles, plus `+jitter` on `|x| < 1` and `-jitter` on `|x| >= 3`
    /// for the transcendental kinds. ReLU is flat.
    Unprotected { jitter_cycles: u32 },
    /// Every class, every input.
    ConstantTime { cycles: u32 },
}

impl BaseLatency {
    pub const UNPROTECTED: BaseLatency = BaseLatency::Unprotected { jitter_cycles: 10 };
    pub const CONSTANT_TIME: BaseLatency = BaseLatency::ConstantTime { cycles: CONSTANT_TIME_CYCLES };

    pub fn cycles(&self, kind: ActivationKind, x: f32) -> u32 {
        match *self {
            BaseLatency::ConstantTime { cycles } => cycles,
            BaseLatency::Unprotected { jitter_cycles } => {
                let nominal = nominal_cycles(kind);
                if kind == ActivationKind::Relu {
                    return nominal;
                }
                let ax = x.abs();
                if ax < 1.0 {
                    nominal + jitter_cycles
                } else if ax < 3.0 {
                    nominal
                } else {
                    nominal.saturating_sub(jitter_cycles).max(1)
                }
            }
        }
    }

    /// Mean and variance in cycles for inputs uniform on [`INPUT_RANGE`].
    pub fn moments(&self, kind: ActivationKind) -> (f64, f64) {
        let (lo, hi) = (INPUT_RANGE.0 as f64, INPUT_RANGE.1 as f64);
        // piecewise constant on |x| in [0,1), [1,3), [3,8]
        let pieces = [(0.0, 1.0, 0.5f32), (1.0, 3.0, 2.0), (3.0, hi, 5.0)];
        let width = hi - lo;
        let mut mean = 0.0;
        let mut second = 0.0;
        for (a, b, probe) in pieces {
            let p = 2.0 * (b - a) / width;
            let c = self.cycles(kind, probe) as f64;
            mean += p * c;
            second += p * c * c;
        }
        (mean, second - mean * mean)
    }
}

/// Random delay added to every evaluation, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DelayDistribution {
    None,
    Uniform {
        lo_us: f64,
        hi_us: f64,
    },
    /// Normal with the given parameters, redrawn until nonnegative.
    TruncatedGaussian {
        mean_us: f64,
        std_us: f64,
    },
}

impl DelayDistribution {
    pub fn validate(&self) -> Result<(), AttackError> {
        match *self {
            DelayDistribution::None => Ok(()),
            DelayDistribution::Uniform { lo_us, hi_us } => {
                if lo_us.is_finite() && hi_us.is_finite() && 0.0 <= lo_us && lo_us <= hi_us {
                    Ok(())
                } else {
                    Err(AttackError::Delay(format!(
                        "uniform bounds must satisfy 0 <= lo <= hi, got [{lo_us}, {hi_us}]"
                    )))
                }
            }
            DelayDistribution::TruncatedGaussian { mean_us, std_us } => {
                if mean_us.is_finite() && std_us.is_finite() && std_us >= 0.0 && (mean_us >= 0.0 || std_us > 0.0) {
                    Ok(())
                } else {
                    Err(AttackError::Delay(format!(
                        "gaussian needs finite mean and std >= 0, got ({mean_us}, {std_us})"
                    )))
                }
            }
        }
    }

    /// Uniform delay matching the published template moments on average over
    /// the attacked classes: the delay mean is the mean gap between template
    /// and base latency, the width satisfies `(b - a)^2 / 12` equal to the
    /// mean template variance minus the base-latency variance.
    pub fn calibrated_uniform(base: &BaseLatency) -> DelayDistribution {
        let n = PUBLISHED_TEMPLATES.len() as f64;
        let mut gap = 0.0;
        let mut var = 0.0;
        for &(kind, mu, sigma_sq) in &PUBLISHED_TEMPLATES {
            let (m, v) = base.moments(kind);
            gap += mu - m / CLOCK_HZ * 1e6;
            var += sigma_sq - v / (CLOCK_HZ * CLOCK_HZ) * 1e12;
        }
        let (mean, var) = (gap / n, var / n);
        let half_width = (3.0 * var).sqrt();
        DelayDistribution::Uniform { lo_us: mean - half_width, hi_us: mean + half_width }
    }

    /// Mean and variance in microseconds (truncated-gaussian moments are of
    /// the untruncated normal).
    pub fn moments(&self) -> (f64, f64) {
        match *self {
            DelayDistribution::None => (0.0, 0.0),
            DelayDistribution::Uniform { lo_us, hi_us } => ((lo_us + hi_us) / 2.0, (hi_us - lo_us).powi(2) / 12.0),
            DelayDistribution::TruncatedGaussian { mean_us, std_us } => (mean_us, std_us * std_us),
        }
    }

    fn sample_us<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DelayDistribution::None => 0.0,
            DelayDistribution::Uniform { lo_us, hi_us } => {
                if hi_us > lo_us {
                    Uniform::new(lo_us, hi_us).map(|u| u.sample(rng)).unwrap_or(lo_us)
                } else {
                    lo_us
                }
            }
            DelayDistribution::TruncatedGaussian { mean_us, std_us } => {
                let Ok(normal) = Normal::new(mean_us, std_us) else { return mean_us.max(0.0) };
                loop {
                    let d = normal.sample(rng);
                    if d >= 0.0 {
                        return d;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceTimingModel {
    pub base: BaseLatency,
    pub clock_hz: f64,
    pub delay: DelayDistribution,
}

impl DeviceTimingModel {
    /// Unprotected latencies with the calibrated uniform delay.
    pub fn desynchronized() -> Self {
        let base = BaseLatency::UNPROTECTED;
        DeviceTimingModel { base, clock_hz: CLOCK_HZ, delay: DelayDistribution::calibrated_uniform(&base) }
    }

    /// One shared constant latency for every class, same delay as
    /// [`DeviceTimingModel::desynchronized`].
    pub fn constant_time() -> Self {
        let delay = DelayDistribution::calibrated_uniform(&BaseLatency::UNPROTECTED);
        DeviceTimingModel { base: BaseLatency::CONSTANT_TIME, clock_hz: CLOCK_HZ, delay }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err(AttackError::Model(format!("clock must be positive, got {}", self.clock_hz)));
        }
        if let BaseLatency::ConstantTime { cycles: 0 } = self.base {
            return Err(AttackError::Model("constant latency must be positive".into()));
        }
        self.delay.validate()
    }

    pub fn to_us(&self, cycles: u64) -> f64 {
        cycles as f64 / self.clock_hz * 1e6
    }

    /// Base latency plus one delay draw, in whole cycles.
    pub fn simulate_cycles<R: Rng + ?Sized>(&self, kind: ActivationKind, x: f32, rng: &mut R) -> u64 {
        let base = self.base.cycles(kind, x) as u64;
        let delay = (self.delay.sample_us(rng) * self.clock_hz * 1e-6).round() as u64;
        base + delay
    }

    pub fn simulate_latency<R: Rng + ?Sized>(&self, kind: ActivationKind, x: f32, rng: &mut R) -> f64 {
        self.to_us(self.simulate_cycles(kind, x, rng))
    }

    /// Generative mean and variance for uniform inputs, in microseconds
    /// (ignores the rounding of delays to whole cycles).
    pub fn moments_us(&self, kind: ActivationKind) -> (f64, f64) {
        let (bm, bv) = self.base.moments(kind);
        let (dm, dv) = self.delay.moments();
        let s = 1e6 / self.clock_hz;
        (bm * s + dm, bv * s * s + dv)
    }
}

fn random_input<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    rng.random_range(INPUT_RANGE.0..=INPUT_RANGE.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianTemplate {
    pub class: ActivationKind,
    pub mu: f64,
    pub sigma_sq: f64,
    pub n_prof: usize,
}

impl GaussianTemplate {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.sigma_sq.is_finite() && self.sigma_sq > 0.0 && self.mu.is_finite() {
            Ok(())
        } else {
            Err(AttackError::DegenerateTemplate(self.class))
        }
    }
}

/// Sample mean and unbiased variance. A zero variance is returned as is and
/// rejected when the template is used.
pub fn fit_template(samples: &[f64], class: ActivationKind) -> Result<GaussianTemplate, AttackError> {
    let n = samples.len();
    if n < 2 {
        return Err(AttackError::TooFewSamples(n));
    }
    let mu = samples.iter().sum::<f64>() / n as f64;
    let sigma_sq = samples.iter().map(|t| (t - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(GaussianTemplate { class, mu, sigma_sq, n_prof: n })
}

/// `-(ln sigma^2 + (t - mu)^2 / sigma^2)`
pub fn score_increment(template: &GaussianTemplate, t: f64) -> f64 {
    debug_assert!(template.sigma_sq > 0.0);
    let d = t - template.mu;
    -(template.sigma_sq.ln() + d * d / template.sigma_sq)
}

/// `n_prof` draws per class on uniform random inputs.
pub fn profile_phase<R: Rng + ?Sized>(
    model: &DeviceTimingModel,
    classes: &[ActivationKind],
    n_prof: usize,
    rng: &mut R,
) -> Result<Vec<GaussianTemplate>, AttackError> {
    if n_prof < 2 {
        return Err(AttackError::TooFewSamples(n_prof));
    }
    model.validate()?;
    classes
        .iter()
        .map(|&class| {
            let samples: Vec<f64> =
                (0..n_prof).map(|_| model.simulate_latency(class, random_input(rng), rng)).collect();
            fit_template(&samples, class)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub true_class: ActivationKind,
    pub classes: Vec<ActivationKind>,
    /// `score_history[c][n - 1]` is the accumulated score of `classes[c]`
    /// after `n` observations.
    pub score_history: Vec<Vec<f64>>,
    /// First `n` from which the true class strictly leads every competitor
    /// through the last observation.
    pub separation_n: Option<usize>,
    pub success: bool,
}

impl AttackResult {
    pub fn n_observations(&self) -> usize {
        self.score_history.first().map_or(0, Vec::len)
    }

    /// Class with the highest final score; ties go to the earlier class.
    pub fn final_leader(&self) -> ActivationKind {
        let last = self.n_observations() - 1;
        let mut best = 0;
        for c in 1..self.classes.len() {
            if self.score_history[c][last] > self.score_history[best][last] {
                best = c;
            }
        }
        self.classes[best]
    }
}

/// Draws `n_max` observations of `true_class` and accumulates every class
/// score.
pub fn run_attack<R: Rng + ?Sized>(
    templates: &[GaussianTemplate],
    true_class: ActivationKind,
    n_max: usize,
    model: &DeviceTimingModel,
    rng: &mut R,
) -> Result<AttackResult, AttackError> {
    if n_max == 0 {
        return Err(AttackError::NoMeasurements);
    }
    model.validate()?;
    for (i, t) in templates.iter().enumerate() {
        t.validate()?;
        if templates[..i].iter().any(|o| o.class == t.class) {
            return Err(AttackError::DuplicateTemplate(t.class));
        }
    }
    let truth = templates.iter().position(|t| t.class == true_class).ok_or(AttackError::MissingTemplate(true_class))?;

    let k = templates.len();
    let mut history = vec![Vec::with_capacity(n_max); k];
    let mut acc = vec![0.0f64; k];
    let mut lead_since: Option<usize> = None;
    for n in 1..=n_max {
        let t = model.simulate_latency(true_class, random_input(rng), rng);
        for (c, template) in templates.iter().enumerate() {
            acc[c] += score_increment(template, t);
            history[c].push(acc[c]);
        }
        let leads = (0..k).all(|c| c == truth || acc[truth] > acc[c]);
        if leads {
            lead_since.get_or_insert(n);
        } else {
            lead_since = None;
        }
    }
    Ok(AttackResult {
        true_class,
        classes: templates.iter().map(|t| t.class).collect(),
        score_history: history,
        separation_n: lead_since,
        success: lead_since.is_some(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub model: DeviceTimingModel,
    pub classes: Vec<ActivationKind>,
    pub n_prof: usize,
    pub n_max: usize,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub templates: Vec<GaussianTemplate>,
    pub result: AttackResult,
}

pub fn trial_rng(seed: u64, class_index: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class_index as u64) << 32) | trial as u64);
    rng
}

/// Profiles then attacks, once per trial per true class. Trials run in
/// parallel; the output is ordered by class, then trial.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<Vec<TrialOutcome>>, AttackError> {
    spec.model.validate()?;
    spec.classes
        .iter()
        .enumerate()
        .map(|(ci, &true_class)| {
            (0..spec.trials)
                .into_par_iter()
                .map(|trial| {
                    let mut rng = trial_rng(spec.seed, ci, trial);
                    let templates = profile_phase(&spec.model, &spec.classes, spec.n_prof, &mut rng)?;
                    let result = run_attack(&templates, true_class, spec.n_max, &spec.model, &mut rng)?;
                    Ok(TrialOutcome { trial, templates, result })
                })
                .collect()
        })
        .collect()
}
