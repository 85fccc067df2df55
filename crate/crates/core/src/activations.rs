//! Protected activation functions and their references.
//!
//! Each protected function computes its approximation candidate and all
//! saturation candidates on every call, then picks the output with masked
//! selects (lower bound first, then upper bound). Shorter functions are padded
//! with dummy arithmetic so that all five execute [`PROTECTED_TRACE_LEN`]
//! abstract operations.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::hint::black_box;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ct_select::{ct_abs_in, ct_clamp_in, ct_gt_mask_in, ct_sign_in};
use crate::machine::{Direct, Machine, Transcendental};
use crate::pade_core::r_tanh_in;

/// Number of abstract operations every protected activation executes.
pub const PROTECTED_TRACE_LEN: usize = 35;

const TANH_PAD: usize = 4;
const SIGMOID_PAD: usize = 5;
const GELU_PAD: usize = 0;
const SWISH_PAD: usize = 4;
const RELU_PAD: usize = 8;

const PAD_SCALE: f32 = 0.5;
const PAD_OFFSET: f32 = 0.25;

/// `sqrt(2 / pi)`
const GELU_SCALE: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown activation `{0}` (expected relu, sigmoid, tanh, gelu or swish)")]
pub struct UnknownActivation(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
    Gelu,
    Swish,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 5] = [
        ActivationKind::Relu,
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::Gelu,
        ActivationKind::Swish,
    ];

    /// The four kinds that are approximated (everything but ReLU).
    pub const NONLINEAR: [ActivationKind; 4] =
        [ActivationKind::Sigmoid, ActivationKind::Tanh, ActivationKind::Gelu, ActivationKind::Swish];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Swish => "swish",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = UnknownActivation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "tanh" => Ok(ActivationKind::Tanh),
            "gelu" => Ok(ActivationKind::Gelu),
            "swish" => Ok(ActivationKind::Swish),
            _ => Err(UnknownActivation(s.to_string())),
        }
    }
}

/// Saturation thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_tanh: f32,
    pub tau_sigmoid: f32,
    pub tau_gelu: f32,
    pub tau_swish: f32,
}

/// Root of `|tanh(t) - R(t)| = 1 - tanh(t)`, rounded to binary32.
pub const TAU_TANH: f32 = 4.971_787;

impl Thresholds {
    pub const DEFAULT: Thresholds =
        Thresholds { tau_tanh: TAU_TANH, tau_sigmoid: 2.0 * TAU_TANH, tau_gelu: 3.6, tau_swish: 8.0 };

    pub fn for_kind(&self, kind: ActivationKind) -> f32 {
        match kind {
            ActivationKind::Relu | ActivationKind::Tanh => self.tau_tanh,
            ActivationKind::Sigmoid => self.tau_sigmoid,
            ActivationKind::Gelu => self.tau_gelu,
            ActivationKind::Swish => self.tau_swish,
        }
    }

    /// Copy with the threshold of `kind` replaced (sigmoid and tanh stay
    /// coupled through `tau_sigmoid = 2 * tau_tanh`).
    pub fn with(mut self, kind: ActivationKind, tau: f32) -> Thresholds {
        match kind {
            ActivationKind::Relu | ActivationKind::Tanh => {
                self.tau_tanh = tau;
                self.tau_sigmoid = 2.0 * tau;
            }
            ActivationKind::Sigmoid => {
                self.tau_sigmoid = tau;
                self.tau_tanh = 0.5 * tau;
            }
            ActivationKind::Gelu => self.tau_gelu = tau,
            ActivationKind::Swish => self.tau_swish = tau,
        }
        self
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::DEFAULT
    }
}

/// Swish slope; only `beta = 1` is supported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwishBeta(f32);

impl SwishBeta {
    pub const ONE: SwishBeta = SwishBeta(1.0);

    pub fn value(self) -> f32 {
        self.0
    }
}

#[inline(always)]
fn pad_in<M: Machine>(m: &mut M, seed: f32, n: usize) {
    let mut acc = seed;
    for i in 0..n {
        acc = if i % 2 == 0 { m.mul(acc, black_box(PAD_SCALE)) } else { m.add(acc, black_box(PAD_OFFSET)) };
    }
    black_box(acc);
}

/// Selects 0 below `-tau` and `upper` above `tau`, lower bound first.
#[inline(always)]
fn saturate_in<M: Machine>(m: &mut M, x: f32, y: f32, tau: f32, lower: f32, upper: f32) -> f32 {
    let below = ct_gt_mask_in(m, -tau, x);
    let above = ct_gt_mask_in(m, x, tau);
    let y = m.select(y, lower, below);
    m.select(y, upper, above)
}

pub fn tanh_protected_in<M: Machine>(m: &mut M, x: f32, t: &Thresholds) -> f32 {
    let tau = t.tau_tanh;
    let xc = ct_clamp_in(m, x, -tau, tau);
    let approx = r_tanh_in(m, xc);
    let sign = ct_sign_in(m, x);
    let ax = ct_abs_in(m, x);
    let saturated = ct_gt_mask_in(m, ax, tau);
    let y = m.select(approx, sign, saturated);
    pad_in(m, approx, TANH_PAD);
    y
}

/// Clamps `x` to `[-tau_sigmoid, tau_sigmoid]`, then halves.
pub fn sigmoid_protected_in<M: Machine>(m: &mut M, x: f32, t: &Thresholds) -> f32 {
    let tau = t.tau_sigmoid;
    let xc = ct_clamp_in(m, x, -tau, tau);
    let half = m.mul(xc, 0.5);
    let r = r_tanh_in(m, half);
    let scaled = m.mul(r, 0.5);
    let approx = m.add(scaled, 0.5);
    let y = saturate_in(m, x, approx, tau, 0.0, 1.0);
    pad_in(m, r, SIGMOID_PAD);
    y
}

/// The clamp applies to `x` before the cubic, not to the tanh argument.
pub fn gelu_protected_in<M: Machine>(m: &mut M, x: f32, t: &Thresholds) -> f32 {
    let tau = t.tau_gelu;
    let xc = ct_clamp_in(m, x, -tau, tau);
    let x2 = m.mul(xc, xc);
    let x3 = m.mul(x2, xc);
    let cubic = m.mul(x3, GELU_CUBIC);
    let inner = m.add(xc, cubic);
    let z = m.mul(inner, GELU_SCALE);
    let r = r_tanh_in(m, z);
    let half = m.mul(xc, 0.5);
    let one_plus = m.add(r, 1.0);
    let approx = m.mul(half, one_plus);
    let y = saturate_in(m, x, approx, tau, 0.0, x);
    pad_in(m, r, GELU_PAD);
    y
}

pub fn swish_protected_in<M: Machine>(m: &mut M, x: f32, t: &Thresholds) -> f32 {
    let tau = t.tau_swish;
    let xc = ct_clamp_in(m, x, -tau, tau);
    let half = m.mul(xc, 0.5);
    let r = r_tanh_in(m, half);
    let scaled = m.mul(r, 0.5);
    let s = m.add(scaled, 0.5);
    let approx = m.mul(xc, s);
    let y = saturate_in(m, x, approx, tau, 0.0, x);
    pad_in(m, r, SWISH_PAD);
    y
}

/// `max(0, x)` with a discarded rational-core evaluation folded in.
///
/// The dummy value enters the output through a select whose mask comes from
/// `d > d`, which is false for every finite `d` but opaque to the optimizer.
/// Negative inputs and both zeros produce `+0.0`.
pub fn relu_protected_in<M: Machine>(m: &mut M, x: f32, t: &Thresholds) -> f32 {
    let tau = t.tau_tanh;
    let xc = ct_clamp_in(m, x, -tau, tau);
    let dummy = r_tanh_in(m, xc);
    let positive = ct_gt_mask_in(m, x, 0.0);
    let relu = m.select(0.0, x, positive);
    let never = ct_gt_mask_in(m, dummy, black_box(dummy));
    let y = m.select(relu, dummy, never);
    pad_in(m, dummy, RELU_PAD);
    y
}

pub fn protected_in<M: Machine>(m: &mut M, kind: ActivationKind, x: f32, t: &Thresholds) -> f32 {
    match kind {
        ActivationKind::Relu => relu_protected_in(m, x, t),
        ActivationKind::Sigmoid => sigmoid_protected_in(m, x, t),
        ActivationKind::Tanh => tanh_protected_in(m, x, t),
        ActivationKind::Gelu => gelu_protected_in(m, x, t),
        ActivationKind::Swish => swish_protected_in(m, x, t),
    }
}

pub fn relu_ref_in<M: Machine>(m: &mut M, x: f32) -> f32 {
    let c = m.gt(x, 0.0);
    if m.branch(c) {
        x
    } else {
        0.0
    }
}

fn sigmoid_f64_in<M: Machine>(m: &mut M, x: f64) -> f64 {
    let n = m.neg(x);
    let e = m.libm(Transcendental::Exp, n);
    let d = m.add(1.0, e);
    m.div(1.0, d)
}

pub fn sigmoid_ref_in<M: Machine>(m: &mut M, x: f32) -> f32 {
    sigmoid_f64_in(m, x as f64) as f32
}

pub fn tanh_ref_in<M: Machine>(m: &mut M, x: f32) -> f32 {
    m.libm(Transcendental::Tanh, x as f64) as f32
}

/// `x * Phi(x)` with `Phi(x) = erfc(-x / sqrt 2) / 2`.
pub fn gelu_ref_in<M: Machine>(m: &mut M, x: f32) -> f32 {
    let xd = x as f64;
    let scaled = m.mul(xd, -FRAC_1_SQRT_2);
    let c = m.libm(Transcendental::Erfc, scaled);
    let half = m.mul(xd, 0.5);
    m.mul(half, c) as f32
}

pub fn swish_ref_in<M: Machine>(m: &mut M, x: f32) -> f32 {
    let xd = x as f64;
    let s = sigmoid_f64_in(m, xd);
    m.mul(xd, s) as f32
}

pub fn reference_in<M: Machine>(m: &mut M, kind: ActivationKind, x: f32) -> f32 {
    match kind {
        ActivationKind::Relu => relu_ref_in(m, x),
        ActivationKind::Sigmoid => sigmoid_ref_in(m, x),
        ActivationKind::Tanh => tanh_ref_in(m, x),
        ActivationKind::Gelu => gelu_ref_in(m, x),
        ActivationKind::Swish => swish_ref_in(m, x),
    }
}

/// Dispatch on a public kind; only `x` is treated as sensitive.
pub fn eval_in<M: Machine>(m: &mut M, kind: ActivationKind, x: f32, protected: bool) -> f32 {
    if protected {
        protected_in(m, kind, x, &Thresholds::DEFAULT)
    } else {
        reference_in(m, kind, x)
    }
}

pub fn eval(kind: ActivationKind, x: f32, protected: bool) -> f32 {
    eval_in(&mut Direct, kind, x, protected)
}

pub fn eval_with(kind: ActivationKind, x: f32, thresholds: &Thresholds) -> f32 {
    protected_in(&mut Direct, kind, x, thresholds)
}

pub fn tanh_protected(x: f32) -> f32 {
    tanh_protected_in(&mut Direct, x, &Thresholds::DEFAULT)
}

pub fn sigmoid_protected(x: f32) -> f32 {
    sigmoid_protected_in(&mut Direct, x, &Thresholds::DEFAULT)
}

pub fn gelu_protected(x: f32) -> f32 {
    gelu_protected_in(&mut Direct, x, &Thresholds::DEFAULT)
}

pub fn swish_protected(x: f32) -> f32 {
    swish_protected_in(&mut Direct, x, &Thresholds::DEFAULT)
}

pub fn relu_protected(x: f32) -> f32 {
    relu_protected_in(&mut Direct, x, &Thresholds::DEFAULT)
}

pub fn relu_ref(x: f32) -> f32 {
    relu_ref_in(&mut Direct, x)
}

pub fn sigmoid_ref(x: f32) -> f32 {
    sigmoid_ref_in(&mut Direct, x)
}

pub fn tanh_ref(x: f32) -> f32 {
    tanh_ref_in(&mut Direct, x)
}

pub fn gelu_ref(x: f32) -> f32 {
    gelu_ref_in(&mut Direct, x)
}

pub fn swish_ref(x: f32) -> f32 {
    swish_ref_in(&mut Direct, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Frozen from a 50-digit evaluation.
    const TANH_1: f64 = 0.761_594_155_955_764_9;
    const SIGMOID_4: f64 = 0.982_013_790_037_908_4;
    const GELU_1: f64 = 0.841_344_746_068_542_9;
    const GELU_MINUS_1: f64 = -0.158_655_253_931_457_05;
    const SWISH_2: f64 = 1.761_594_155_955_764_9;

    fn close(a: f32, b: f64, tol: f64) -> bool {
        (a as f64 - b).abs() <= tol
    }

    #[test]
    fn thresholds_invariants() {
        let t = Thresholds::DEFAULT;
        assert_eq!(t.tau_sigmoid, 2.0 * t.tau_tanh);
        assert!((4.90..=5.05).contains(&t.tau_tanh));
        assert_eq!(t.tau_gelu, 3.6);
        assert_eq!(t.tau_swish, 8.0);
        assert_eq!(SwishBeta::ONE.value(), 1.0);
    }

    #[test]
    fn gelu_scale_is_rounded_sqrt_two_over_pi() {
        let exact = (2.0 / std::f64::consts::PI).sqrt();
        assert_eq!(GELU_SCALE, exact as f32);
    }

    #[test]
    fn tanh_examples() {
        assert_eq!(tanh_protected(0.0), 0.0);
        assert_eq!(tanh_protected(10.0), 1.0);
        assert_eq!(tanh_protected(-10.0), -1.0);
        assert!(close(tanh_protected(1.0), TANH_1, 9.59e-5));
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_protected(0.0), 0.5);
        assert_eq!(sigmoid_protected(-20.0).to_bits(), 0);
        assert_eq!(sigmoid_protected(20.0), 1.0);
        assert!(close(sigmoid_protected(4.0), SIGMOID_4, 7.51e-6));
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_protected(0.0), 0.0);
        assert_eq!(gelu_protected(5.0), 5.0);
        assert_eq!(gelu_protected(-5.0), 0.0);
        assert!(close(gelu_protected(1.0), GELU_1, 4.17e-4));
    }

    #[test]
    fn swish_examples() {
        assert_eq!(swish_protected(0.0), 0.0);
        assert_eq!(swish_protected(-10.0).to_bits(), 0);
        assert_eq!(swish_protected(10.0), 10.0);
        assert!(close(swish_protected(2.0), SWISH_2, 1.11e-3));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu_protected(3.0).to_bits(), 3.0f32.to_bits());
        assert_eq!(relu_protected(-3.0).to_bits(), 0);
        assert_eq!(relu_protected(0.0).to_bits(), 0);
        assert_eq!(relu_protected(-0.0).to_bits(), 0);
    }

    #[test]
    fn reference_examples() {
        assert_eq!(tanh_ref(0.0), 0.0);
        assert_eq!(sigmoid_ref(0.0), 0.5);
        assert!(close(gelu_ref(-1.0), GELU_MINUS_1, 1e-7));
        assert!(close(gelu_ref(1.0), GELU_1, 1e-7));
        assert_eq!(relu_ref(-1.0), 0.0);
        assert_eq!(relu_ref(-0.0).to_bits(), 0);
    }

    #[test]
    fn eval_dispatch() {
        assert_eq!(eval(ActivationKind::Tanh, 10.0, true), 1.0);
        assert_eq!(eval(ActivationKind::Relu, -1.0, false), 0.0);
        assert_eq!(eval(ActivationKind::Sigmoid, 0.0, true), 0.5);
        for k in ActivationKind::ALL {
            assert_eq!(eval(k, 0.75, true).to_bits(), eval_with(k, 0.75, &Thresholds::DEFAULT).to_bits());
        }
    }

    #[test]
    fn kind_parsing() {
        for k in ActivationKind::ALL {
            assert_eq!(k.name().parse::<ActivationKind>().unwrap(), k);
        }
        assert_eq!(" GELU ".parse::<ActivationKind>().unwrap(), ActivationKind::Gelu);
        assert!("softmax".parse::<ActivationKind>().is_err());
    }

    #[test]
    fn saturation_is_exact_beyond_thresholds() {
        let t = Thresholds::DEFAULT;
        for i in 1..=500 {
            let d = i as f32 * 0.5;
            let above = |tau: f32| tau + d;
            let x = above(t.tau_tanh);
            assert_eq!(tanh_protected(x), 1.0);
            assert_eq!(tanh_protected(-x), -1.0);
            let x = above(t.tau_sigmoid);
            assert_eq!(sigmoid_protected(x), 1.0);
            assert_eq!(sigmoid_protected(-x).to_bits(), 0);
            let x = above(t.tau_gelu);
            assert_eq!(gelu_protected(x).to_bits(), x.to_bits());
            assert_eq!(gelu_protected(-x).to_bits(), 0);
            let x = above(t.tau_swish);
            assert_eq!(swish_protected(x).to_bits(), x.to_bits());
            assert_eq!(swish_protected(-x).to_bits(), 0);
        }
    }

    #[test]
    fn sigmoid_complement_within_one_ulp() {
        let tau = Thresholds::DEFAULT.tau_sigmoid as f64;
        let n = (2.0 * tau / 0.01) as i64;
        for i in 0..=n {
            let x = (-tau + i as f64 * 0.01) as f32;
            let sum = sigmoid_protected(x) + sigmoid_protected(-x);
            assert!((sum - 1.0).abs() <= f32::EPSILON, "x={x} sum={sum}");
        }
    }

    #[test]
    fn with_thresholds_keeps_sigmoid_coupled() {
        let t = Thresholds::DEFAULT.with(ActivationKind::Tanh, 4.5);
        assert_eq!(t.tau_sigmoid, 9.0);
        let t = Thresholds::DEFAULT.with(ActivationKind::Gelu, 3.0);
        assert_eq!(t.tau_gelu, 3.0);
        assert_eq!(t.tau_tanh, TAU_TANH);
    }

    fn finite() -> impl Strategy<Value = f32> {
        any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |x| x.is_finite())
    }

    proptest! {
        #[test]
        fn relu_is_exact(x in finite()) {
            prop_assert_eq!(relu_protected(x).to_bits(), relu_ref(x).to_bits());
        }

        #[test]
        fn tanh_is_odd(x in finite()) {
            prop_assert_eq!(tanh_protected(-x).to_bits(), tanh_protected(x).to_bits() ^ 0x8000_0000);
        }

        #[test]
        fn protected_outputs_are_finite(x in finite()) {
            for k in ActivationKind::ALL {
                prop_assert!(eval(k, x, true).is_finite());
            }
        }
    }
}
