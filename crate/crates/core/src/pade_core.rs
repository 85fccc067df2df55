//! Shared [3/3] rational core `R(x) = x * P(x^2) / Q(x^2)` for `tanh`.
//!
//! `P(u) = 1 + 5/39 u + 2/715 u^2 + 1/135135 u^3`
//! `Q(u) = 1 + 6/13 u + 10/429 u^2 + 4/19305 u^3`
//!
//! Both polynomials are evaluated by Horner's scheme in `u = x*x`, followed by
//! one division and one multiplication by `x`: 15 operations for every input.
//! No step is fused (Rust does not contract `a * b + c` into an FMA), so the
//! rounding sequence is the same on every target.

use crate::machine::{Direct, Machine};

/// Numerator and denominator coefficients as exact integer ratios.
pub const P_RATIOS: [(u32, u32); 4] = [(1, 1), (5, 39), (2, 715), (1, 135_135)];
pub const Q_RATIOS: [(u32, u32); 4] = [(1, 1), (6, 13), (10, 429), (4, 19_305)];

/// Binary32 coefficients of `P` and `Q`, lowest degree first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PadeCoefficients {
    pub p: [f32; 4],
    pub q: [f32; 4],
}

impl PadeCoefficients {
    /// Round-to-nearest images of the exact ratios.
    pub const TANH: PadeCoefficients = PadeCoefficients {
        p: [1.0, 0.128_205_14, 0.002_797_203, 7.400_007_2e-6],
        q: [1.0, 0.461_538_46, 0.023_310_022, 2.072_002_1e-4],
    };
}

/// `x * P(x^2) / Q(x^2)` in binary32 on any machine.
#[inline(always)]
pub fn r_tanh_in<M: Machine>(m: &mut M, x: f32) -> f32 {
    let c = &PadeCoefficients::TANH;
    let u = m.mul(x, x);

    let p = m.mul(c.p[3], u);
    let p = m.add(p, c.p[2]);
    let p = m.mul(p, u);
    let p = m.add(p, c.p[1]);
    let p = m.mul(p, u);
    let p = m.add(p, c.p[0]);

    let q = m.mul(c.q[3], u);
    let q = m.add(q, c.q[2]);
    let q = m.mul(q, u);
    let q = m.add(q, c.q[1]);
    let q = m.mul(q, u);
    let q = m.add(q, c.q[0]);

    let ratio = m.div(p, q);
    m.mul(x, ratio)
}

/// Accepts any finite `x`; callers clamp to the approximation interval.
/// `Q(u) >= 1` for `u >= 0`, so the division never sees zero. Beyond
/// `|x| ~ 1.9e7` the cubic terms overflow and the result is NaN.
#[inline(never)]
pub fn r_tanh(x: f32) -> f32 {
    r_tanh_in(&mut Direct, x)
}

/// Double-precision evaluation with the exact ratios, for the threshold
/// solver and error analysis.
pub fn r_tanh_f64(x: f64) -> f64 {
    let ratio = |(n, d): (u32, u32)| n as f64 / d as f64;
    let u = x * x;
    let p = P_RATIOS.iter().rev().fold(0.0, |acc, &r| acc * u + ratio(r));
    let q = Q_RATIOS.iter().rev().fold(0.0, |acc, &r| acc * u + ratio(r));
    x * p / q
}
