//! Branchless selection over IEEE-754 binary32 encodings.
//!
//! Masks are derived by negating the 0/1 encoding of a comparison result, so
//! no primitive here contains conditional control flow. The `*_in` variants
//! run on an arbitrary [`Machine`] and are what the activations use; the plain
//! functions are the same code on [`Direct`].

use std::ops::Not;

use thiserror::Error;

use crate::machine::{Direct, Machine};

const SIGN_BIT: u32 = 0x8000_0000;
const ONE_BITS: u32 = 0x3f80_0000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectError {
    #[error("mask must be all-zeros or all-ones, got {0:#010x}")]
    InvalidMask(u32),
    #[error("value is not finite (bits {0:#010x})")]
    NonFinite(u32),
}

/// Selection control word: exactly `0x00000000` or `0xFFFFFFFF`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mask32(u32);

impl Mask32 {
    pub const ZEROS: Mask32 = Mask32(0);
    pub const ONES: Mask32 = Mask32(u32::MAX);

    pub fn new(bits: u32) -> Result<Self, SelectError> {
        match bits {
            0 | u32::MAX => Ok(Mask32(bits)),
            other => Err(SelectError::InvalidMask(other)),
        }
    }

    #[inline(always)]
    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn is_set(self) -> bool {
        self.0 != 0
    }
}

impl Not for Mask32 {
    type Output = Mask32;

    #[inline(always)]
    fn not(self) -> Mask32 {
        Mask32(!self.0)
    }
}

/// Binary32 encoding of a finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct F32Bits(u32);

impl F32Bits {
    pub fn new(x: f32) -> Result<Self, SelectError> {
        let bits = x.to_bits();
        if x.is_finite() {
            Ok(F32Bits(bits))
        } else {
            Err(SelectError::NonFinite(bits))
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self, SelectError> {
        Self::new(f32::from_bits(bits))
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn value(self) -> f32 {
        f32::from_bits(self.0)
    }
}

#[inline(always)]
pub fn mask_from_bool(b: bool) -> Mask32 {
    Mask32((b as u32).wrapping_neg())
}

/// `(bits(a) & !mask) | (bits(b) & mask)`: `a` for the zero mask, `b` for
/// the all-ones mask, bit-exact in both cases.
#[inline(always)]
pub fn ct_select_f32(a: f32, b: f32, mask: Mask32) -> f32 {
    let ua = a.to_bits();
    let ub = b.to_bits();
    f32::from_bits((ua & !mask.0) | (ub & mask.0))
}

#[inline(always)]
pub fn ct_gt_mask_in<M: Machine>(m: &mut M, x: f32, t: f32) -> Mask32 {
    let b = m.gt(x, t);
    m.mask(b)
}

/// Two compares, two selects; the lower bound is applied first.
#[inline(always)]
pub fn ct_clamp_in<M: Machine>(m: &mut M, x: f32, lo: f32, hi: f32) -> f32 {
    let below = ct_gt_mask_in(m, lo, x);
    let above = ct_gt_mask_in(m, x, hi);
    let y = m.select(x, lo, below);
    m.select(y, hi, above)
}

/// Transplants the sign bit of `x` onto `1.0`. `+0.0` maps to `+1.0`, `-0.0`
/// to `-1.0`.
#[inline(always)]
pub fn ct_sign_in<M: Machine>(m: &mut M, x: f32) -> f32 {
    let bits = m.bits_of(x);
    let sign = m.and(bits, SIGN_BIT);
    let one = m.or(sign, ONE_BITS);
    m.float_of(one)
}

/// Clears the sign bit.
#[inline(always)]
pub fn ct_abs_in<M: Machine>(m: &mut M, x: f32) -> f32 {
    let bits = m.bits_of(x);
    let mag = m.and(bits, !SIGN_BIT);
    m.float_of(mag)
}

pub fn ct_gt_mask(x: f32, t: f32) -> Mask32 {
    ct_gt_mask_in(&mut Direct, x, t)
}

pub fn ct_clamp(x: f32, lo: f32, hi: f32) -> f32 {
    ct_clamp_in(&mut Direct, x, lo, hi)
}

pub fn ct_sign(x: f32) -> f32 {
    ct_sign_in(&mut Direct, x)
}

pub fn ct_abs(x: f32) -> f32 {
    ct_abs_in(&mut Direct, x)
}
