//! faer-backed Cholesky with jitter escalation for kernel matrices.

use std::sync::Once;

use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, Par, Side};

use crate::{Error, Result};

/// First jitter tried (relative to the signal variance) once the plain
/// factorization fails, and the last one.
pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-4;

static SEQUENTIAL: Once = Once::new();

/// Runs are parallelized across seeds, not inside a factorization.
fn sequential() {
    SEQUENTIAL.call_once(|| faer::set_global_parallelism(Par::Seq));
}

pub struct Factor {
    llt: Llt<f64>,
    /// Absolute jitter that was added to the diagonal.
    pub jitter: f64,
}

impl std::fmt::Debug for Factor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factor")
            .field("n", &self.llt.L().nrows())
            .field("jitter", &self.jitter)
            .finish()
    }
}

impl Factor {
    /// Factor `k` (lower triangle read). Tries `start_jitter` first (zero
    /// means no jitter), then escalates by 10x from `JITTER_START * scale`
    /// up to `JITTER_MAX * scale`.
    pub fn new(k: &Mat<f64>, scale: f64, start_jitter: f64) -> Result<Self> {
        sequential();
        let mut jitter = start_jitter;
        loop {
            let attempt = if jitter > 0.0 {
                let mut kj = k.clone();
                for i in 0..kj.nrows() {
                    kj[(i, i)] += jitter;
                }
                Llt::new(kj.as_ref(), Side::Lower)
            } else {
                Llt::new(k.as_ref(), Side::Lower)
            };
            if let Ok(llt) = attempt {
                let diag_ok = (0..llt.L().nrows()).all(|i| {
                    let d = llt.L()[(i, i)];
                    d.is_finite() && d > 0.0
                });
                if diag_ok {
                    return Ok(Self { llt, jitter });
                }
            }
            let next = if jitter <= 0.0 {
                JITTER_START * scale
            } else {
                jitter * 10.0
            };
            if next > JITTER_MAX * scale * (1.0 + 1e-9) {
                return Err(Error::Cholesky {
                    max_jitter: JITTER_MAX * scale,
                });
            }
            jitter = next;
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        self.llt.solve_in_place(rhs.as_mut());
        (0..b.len()).map(|i| rhs[(i, 0)]).collect()
    }

    /// `log det(K) = 2 sum log L_ii`.
    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> Mat<f64> {
        self.llt.inverse()
    }

    /// `L^-1 B` in place.
    pub fn half_solve(&self, b: &mut Mat<f64>) {
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(self.llt.L(), b.as_mut(), Par::Seq);
    }
}
