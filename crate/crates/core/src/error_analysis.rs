//! Accuracy of the protected activations and the tanh threshold solver.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activations::{eval, eval_with, ActivationKind, Thresholds};
use crate::grid::{Grid, GridError};
use crate::pade_core::r_tanh_f64;

/// Bisection bracket for the tanh balancing equation.
pub const SOLVER_BRACKET: (f64, f64) = (3.0, 7.0);
const MAX_ITERATIONS: u32 = 200;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("error metrics do not apply to relu (exact by construction)")]
    NotApplicable,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("solver tolerance must be positive and finite, got {0}")]
    Tolerance(f64),
    #[error("no sign change of the balancing function on [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },
    #[error("bisection stalled at {tau} with residual {residual:e}")]
    NoConvergence { tau: f64, residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: ActivationKind,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    pub points: usize,
    pub mse: f64,
    pub rmse: f64,
    pub max_abs: f64,
    /// First grid point attaining `max_abs`.
    pub argmax_input: f32,
}

/// Pairwise summation with a fixed split, so results do not depend on any
/// partitioning chosen by the caller.
fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

pub fn error_metrics(kind: ActivationKind, grid: &Grid) -> Result<ErrorReport, AnalysisError> {
    error_metrics_with(kind, grid, &Thresholds::DEFAULT)
}

/// Protected vs. reference over every grid point, accumulated in `f64`.
pub fn error_metrics_with(
    kind: ActivationKind,
    grid: &Grid,
    thresholds: &Thresholds,
) -> Result<ErrorReport, AnalysisError> {
    if kind == ActivationKind::Relu {
        return Err(AnalysisError::NotApplicable);
    }
    let grid = Grid::new(grid.lo, grid.hi, grid.step)?;
    let points = grid.points();
    let abs: Vec<f64> =
        points.iter().map(|&x| (eval_with(kind, x, thresholds) as f64 - eval(kind, x, false) as f64).abs()).collect();
    let squares: Vec<f64> = abs.iter().map(|e| e * e).collect();
    let mse = pairwise_sum(&squares) / points.len() as f64;
    let (argmax, max_abs) =
        abs.iter().enumerate().fold((0, 0.0), |(bi, be), (i, &e)| if e > be { (i, e) } else { (bi, be) });
    Ok(ErrorReport {
        kind,
        lo: grid.lo,
        hi: grid.hi,
        step: grid.step,
        points: points.len(),
        mse,
        rmse: mse.sqrt(),
        max_abs,
        argmax_input: points[argmax],
    })
}

/// `(e_R, e_sat)`: `|tanh(t) - R(t)|` and `1 - tanh(t)` in double precision.
pub fn balancing_errors(tau: f64) -> (f64, f64) {
    let t = tau.tanh();
    ((t - r_tanh_f64(tau)).abs(), 1.0 - t)
}

fn balance(tau: f64) -> f64 {
    let (e_r, e_sat) = balancing_errors(tau);
    e_r - e_sat
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSolution {
    pub tau: f64,
    pub residual: f64,
    pub iterations: u32,
}

/// Bisection on `e_R(t) - e_sat(t)` over [`SOLVER_BRACKET`].
pub fn solve_tau_tanh(tolerance: f64) -> Result<ThresholdSolution, AnalysisError> {
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(AnalysisError::Tolerance(tolerance));
    }
    let (mut lo, mut hi) = SOLVER_BRACKET;
    let (g_lo, g_hi) = (balance(lo), balance(hi));
    if g_lo.signum() == g_hi.signum() {
        return Err(AnalysisError::NoSignChange { lo, hi });
    }
    let rising = g_lo < 0.0;
    for iterations in 1..=MAX_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let g = balance(mid);
        if g.abs() <= tolerance {
            return Ok(ThresholdSolution { tau: mid, residual: g, iterations });
        }
        if (g < 0.0) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * mid {
            return Err(AnalysisError::NoConvergence { tau: mid, residual: g });
        }
    }
    let mid = 0.5 * (lo + hi);
    Err(AnalysisError::NoConvergence { tau: mid, residual: balance(mid) })
}

/// Max-abs error on `grid` for each candidate threshold of `kind`.
pub fn threshold_sweep(
    kind: ActivationKind,
    candidates: &[f32],
    grid: &Grid,
) -> Result<Vec<(f32, ErrorReport)>, AnalysisError> {
    candidates
        .iter()
        .map(|&tau| {
            let t = Thresholds::DEFAULT.with(kind, tau);
            error_metrics_with(kind, grid, &t).map(|r| (tau, r))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Root of the balancing equation, from a high-precision solve.
    const TAU_EXACT: f64 = 4.971_786_858_527_936;

    #[test]
    fn relu_is_rejected() {
        assert_eq!(error_metrics(ActivationKind::Relu, &Grid::NARROW), Err(AnalysisError::NotApplicable));
    }

    #[test]
    fn single_exact_point() {
        let r = error_metrics(ActivationKind::Tanh, &Grid::new(0.0, 0.0, 1.0).unwrap()).unwrap();
        assert_eq!((r.mse, r.rmse, r.max_abs, r.points), (0.0, 0.0, 0.0, 1));
        assert_eq!(r.argmax_input, 0.0);
    }

    #[test]
    fn invalid_grid_is_rejected() {
        let bad = Grid { lo: -1.0, hi: 1.0, step: 0.0 };
        assert!(matches!(error_metrics(ActivationKind::Tanh, &bad), Err(AnalysisError::Grid(_))));
    }

    #[test]
    fn sigmoid_narrow_bound() {
        let r = error_metrics(ActivationKind::Sigmoid, &Grid::NARROW).unwrap();
        assert!(r.max_abs <= 1.2e-5, "{r:?}");
        assert_eq!(r.points, 1601);
    }

    #[test]
    fn swish_wide_bound_and_location() {
        let r = error_metrics(ActivationKind::Swish, &Grid::WIDE).unwrap();
        assert!(r.max_abs <= 1.7e-3, "{r:?}");
        let tau = Thresholds::DEFAULT.tau_swish;
        assert!((r.argmax_input.abs() - tau).abs() <= 2.0);
    }

    #[test]
    fn report_self_consistency() {
        for kind in ActivationKind::NONLINEAR {
            for grid in [Grid::NARROW, Grid::WIDE] {
                let r = error_metrics(kind, &grid).unwrap();
                assert!(r.max_abs >= r.rmse);
                assert!((r.rmse * r.rmse - r.mse).abs() <= 4.0 * f64::EPSILON * r.mse);
                assert!((grid.lo..=grid.hi).contains(&(r.argmax_input as f64)));
            }
        }
    }

    #[test]
    fn solver_finds_threshold_in_range() {
        let s = solve_tau_tanh(1e-9).unwrap();
        assert!((4.96..=4.98).contains(&s.tau));
        assert!((9.92..=9.96).contains(&(2.0 * s.tau)));
        assert!(s.residual.abs() <= 1e-9);
        assert!((s.tau - TAU_EXACT).abs() < 1e-4);
        let (e_r, e_sat) = balancing_errors(s.tau);
        assert!((e_r - e_sat).abs() <= 1e-9);
    }

    #[test]
    fn solver_rejects_bad_tolerance() {
        assert_eq!(solve_tau_tanh(0.0), Err(AnalysisError::Tolerance(0.0)));
        assert!(solve_tau_tanh(-1.0).is_err());
        assert!(solve_tau_tanh(f64::NAN).is_err());
    }

    #[test]
    fn binary32_constant_matches_solver() {
        let s = solve_tau_tanh(1e-12).unwrap();
        assert!(((s.tau as f32) - Thresholds::DEFAULT.tau_tanh).abs() <= 1e-3);
    }

    #[test]
    fn balancing_error_examples() {
        let (e_r, e_sat) = balancing_errors(0.0);
        assert_eq!((e_r, e_sat), (0.0, 1.0));
        let (_, e_sat) = balancing_errors(1.0);
        assert!((e_sat - 0.238_405_844_044_235_1).abs() < 1e-12);
    }

    #[test]
    fn balancing_terms_are_monotone_on_bracket() {
        let mut prev = balancing_errors(SOLVER_BRACKET.0);
        for i in 1..=400 {
            let t = SOLVER_BRACKET.0 + i as f64 * 0.01;
            let cur = balancing_errors(t);
            assert!(cur.1 < prev.1, "e_sat not decreasing at {t}");
            assert!(cur.0 >= prev.0, "e_R decreasing at {t}");
            prev = cur;
        }
    }

    #[test]
    fn sweep_reports_each_candidate() {
        let sweep = threshold_sweep(ActivationKind::Gelu, &[3.0, 3.6, 4.2], &Grid::WIDE).unwrap();
        assert_eq!(sweep.len(), 3);
        let default = error_metrics(ActivationKind::Gelu, &Grid::WIDE).unwrap();
        assert_eq!(sweep[1].1, default);
    }
}
