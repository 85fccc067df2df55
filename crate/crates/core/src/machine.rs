//! Abstract arithmetic machine.
//!
//! Every activation in this crate is written once against [`Machine`]. The
//! [`Direct`] machine executes the operations natively; the tracer in
//! [`crate::timing_harness`] executes the same operations and additionally
//! appends one [`Op`] per call. Because both paths run identical source the
//! traced value is bit-identical to the direct one.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::ct_select::{self, Mask32};

/// Abstract opcode recorded by the tracer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Op {
    Add,
    Mul,
    Div,
    Cmp,
    Mask,
    Select,
    And,
    Or,
    Not,
    Neg,
    Bitcast,
    /// Data-dependent control transfer. Never emitted by protected code.
    Branch,
}

impl Op {
    pub fn is_control_flow(self) -> bool {
        matches!(self, Op::Branch)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Op::Add => "ADD",
            Op::Mul => "MUL",
            Op::Div => "DIV",
            Op::Cmp => "CMP",
            Op::Mask => "MASK",
            Op::Select => "SELECT",
            Op::And => "AND",
            Op::Or => "OR",
            Op::Not => "NOT",
            Op::Neg => "NEG",
            Op::Bitcast => "BITCAST",
            Op::Branch => "BRANCH",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// Library transcendental used by the unprotected reference path.
///
/// Values always come from the platform `f64` routines. The opcode stream a
/// tracer records for a call is a cost model of a conventional
/// implementation, see [`Transcendental::cost`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transcendental {
    Exp,
    Tanh,
    Erfc,
}

/// Magnitude above which a single-precision `exp` returns early.
const EXP_EARLY_OUT: f64 = 88.72;
/// Reduction target for the scaling-and-squaring model.
const EXP_REDUCED: f64 = 0.5;
const EXP_POLY_DEGREE: usize = 6;

impl Transcendental {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Transcendental::Exp => x.exp(),
            Transcendental::Tanh => x.tanh(),
            Transcendental::Erfc => libm::erfc(x),
        }
    }

    /// Emits the modeled opcode stream of one library call on `x`.
    ///
    /// * `exp`: early out beyond the single-precision range, otherwise
    ///   halving until `|r| <= 0.5`, a fixed-degree Horner polynomial, one
    ///   squaring per halving and a reciprocal for negative arguments.
    /// * `tanh`: the textbook `(e^x - e^-x) / (e^x + e^-x)` form, two `exp`
    ///   calls behind a tiny-argument and a large-argument early out.
    /// * `erfc`: interval dispatch with per-interval rational kernels, the
    ///   tail interval adding an `exp`.
    pub fn cost(self, x: f64, emit: &mut impl FnMut(Op)) {
        match self {
            Transcendental::Exp => exp_cost(x, emit),
            Transcendental::Tanh => {
                let ax = x.abs();
                emit(Op::Cmp);
                emit(Op::Branch);
                if ax < 3.7e-9 {
                    return;
                }
                emit(Op::Cmp);
                emit(Op::Branch);
                if ax >= 22.0 {
                    return;
                }
                exp_cost(x, emit);
                emit(Op::Neg);
                exp_cost(-x, emit);
                emit(Op::Add);
                emit(Op::Add);
                emit(Op::Div);
            }
            Transcendental::Erfc => {
                let ax = x.abs();
                let degree = if ax < 0.84375 {
                    5
                } else if ax < 1.25 {
                    6
                } else if ax < 6.0 {
                    7
                } else {
                    0
                };
                for _ in 0..3 {
                    emit(Op::Cmp);
                    emit(Op::Branch);
                }
                if degree == 0 {
                    emit(Op::Add);
                    return;
                }
                for _ in 0..2 * degree {
                    emit(Op::Mul);
                    emit(Op::Add);
                }
                emit(Op::Div);
                if ax >= 1.25 {
                    emit(Op::Mul);
                    exp_cost(-ax * ax, emit);
                    emit(Op::Div);
                }
                emit(Op::Cmp);
                emit(Op::Branch);
                if x < 0.0 {
                    emit(Op::Add);
                }
            }
        }
    }
}

fn exp_cost(x: f64, emit: &mut impl FnMut(Op)) {
    emit(Op::Cmp);
    emit(Op::Branch);
    if x.abs() > EXP_EARLY_OUT {
        return;
    }
    let mut r = x.abs();
    let mut halvings = 0usize;
    loop {
        emit(Op::Cmp);
        emit(Op::Branch);
        if r <= EXP_REDUCED {
            break;
        }
        r *= 0.5;
        halvings += 1;
        emit(Op::Mul);
    }
    for _ in 0..EXP_POLY_DEGREE {
        emit(Op::Mul);
        emit(Op::Add);
    }
    for _ in 0..halvings {
        emit(Op::Mul);
    }
    emit(Op::Cmp);
    emit(Op::Branch);
    if x < 0.0 {
        emit(Op::Div);
    }
}

/// The operations available to activation code.
///
/// Each method corresponds to exactly one [`Op`]; the only exception is
/// [`Machine::libm`], which stands for a whole library call.
pub trait Machine {
    fn add<F: Float>(&mut self, a: F, b: F) -> F;
    fn mul<F: Float>(&mut self, a: F, b: F) -> F;
    fn div<F: Float>(&mut self, a: F, b: F) -> F;
    fn neg<F: Float>(&mut self, a: F) -> F;
    /// Strict `a > b`.
    fn gt<F: Float>(&mut self, a: F, b: F) -> bool;
    fn mask(&mut self, b: bool) -> Mask32;
    fn select(&mut self, a: f32, b: f32, mask: Mask32) -> f32;
    fn and(&mut self, a: u32, b: u32) -> u32;
    fn or(&mut self, a: u32, b: u32) -> u32;
    fn not(&mut self, a: u32) -> u32;
    fn bits_of(&mut self, x: f32) -> u32;
    fn float_of(&mut self, bits: u32) -> f32;
    /// Resolves a data-dependent branch condition.
    fn branch(&mut self, taken: bool) -> bool;
    fn libm(&mut self, f: Transcendental, x: f64) -> f64;
}

/// Native execution, no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Direct;

impl Machine for Direct {
    #[inline(always)]
    fn add<F: Float>(&mut self, a: F, b: F) -> F {
        a + b
    }
    #[inline(always)]
    fn mul<F: Float>(&mut self, a: F, b: F) -> F {
        a * b
    }
    #[inline(always)]
    fn div<F: Float>(&mut self, a: F, b: F) -> F {
        a / b
    }
    #[inline(always)]
    fn neg<F: Float>(&mut self, a: F) -> F {
        -a
    }
    #[inline(always)]
    fn gt<F: Float>(&mut self, a: F, b: F) -> bool {
        a > b
    }
    #[inline(always)]
    fn mask(&mut self, b: bool) -> Mask32 {
        ct_select::mask_from_bool(b)
    }
    #[inline(always)]
    fn select(&mut self, a: f32, b: f32, mask: Mask32) -> f32 {
        ct_select::ct_select_f32(a, b, mask)
    }
    #[inline(always)]
    fn and(&mut self, a: u32, b: u32) -> u32 {
        a & b
    }
    #[inline(always)]
    fn or(&mut self, a: u32, b: u32) -> u32 {
        a | b
    }
    #[inline(always)]
    fn not(&mut self, a: u32) -> u32 {
        !a
    }
    #[inline(always)]
    fn bits_of(&mut self, x: f32) -> u32 {
        x.to_bits()
    }
    #[inline(always)]
    fn float_of(&mut self, bits: u32) -> f32 {
        f32::from_bits(bits)
    }
    #[inline(always)]
    fn branch(&mut self, taken: bool) -> bool {
        taken
    }
    #[inline(always)]
    fn libm(&mut self, f: Transcendental, x: f64) -> f64 {
        f.eval(x)
    }
}
