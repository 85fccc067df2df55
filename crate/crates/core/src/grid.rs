//! Evaluation grids with inclusive endpoints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid step must be positive and finite, got {0}")]
    Step(f64),
    #[error("grid interval [{lo}, {hi}] is not well-ordered and finite")]
    Interval { lo: f64, hi: f64 },
    #[error("grid would contain {0} points (limit {MAX_POINTS})")]
    TooLarge(f64),
}

const MAX_POINTS: f64 = 1.0e8;

/// `lo + i * step` for `i = 0..n`, rounded to binary32. Points are computed
/// from the index so no drift accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Grid {
    /// `[-8, 8]` step `0.01`, 1601 points.
    pub const NARROW: Grid = Grid { lo: -8.0, hi: 8.0, step: 0.01 };
    /// `[-500, 500]` step `1.0`, 1001 points.
    pub const WIDE: Grid = Grid { lo: -500.0, hi: 500.0, step: 1.0 };

    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Grid, GridError> {
        if !(step.is_finite() && step > 0.0) {
            return Err(GridError::Step(step));
        }
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(GridError::Interval { lo, hi });
        }
        let n = ((hi - lo) / step).floor() + 1.0;
        if n > MAX_POINTS {
            return Err(GridError::TooLarge(n));
        }
        Ok(Grid { lo, hi, step })
    }

    pub fn len(&self) -> usize {
        // tolerate representation error in (hi - lo) / step
        (((self.hi - self.lo) / self.step) + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, i: usize) -> f32 {
        (self.lo + i as f64 * self.step) as f32
    }

    pub fn points(&self) -> Vec<f32> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_sizes() {
        assert_eq!(Grid::NARROW.len(), 1601);
        assert_eq!(Grid::WIDE.len(), 1001);
        let p = Grid::NARROW.points();
        assert_eq!(p[0], -8.0);
        assert_eq!(*p.last().unwrap(), 8.0);
        assert_eq!(p[800], 0.0);
        assert_eq!(p[1300], 5.0f32);
    }

    #[test]
    fn degenerate_and_invalid() {
        assert_eq!(Grid::new(0.0, 0.0, 1.0).unwrap().points(), vec![0.0]);
        assert!(matches!(Grid::new(0.0, 1.0, 0.0), Err(GridError::Step(_))));
        assert!(matches!(Grid::new(0.0, 1.0, -1.0), Err(GridError::Step(_))));
        assert!(matches!(Grid::new(1.0, 0.0, 0.1), Err(GridError::Interval { .. })));
        assert!(Grid::new(f64::NAN, 0.0, 0.1).is_err());
        assert!(Grid::new(0.0, 1.0e9, 1e-3).is_err());
    }

    #[test]
    fn non_dividing_step_stops_before_hi() {
        let g = Grid::new(0.0, 1.0, 0.3).unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.point(3) <= 1.0);
    }
}
