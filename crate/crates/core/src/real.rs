use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Floating-point scalar the geometry kernels and the tape are generic over.
pub trait Real: Float + Debug + Default + Sum + Send + Sync + 'static {
    fn of(x: f64) -> Self;

    fn f64(self) -> f64;

    /// Below this value of `‖v‖/√k` the radial maps switch to their Taylor expansions.
    fn series_cutoff() -> Self {
        // eps^(1/6): balances O(ρ⁶) truncation against eps/ρ² cancellation.
        Self::epsilon().powf(Self::of(1.0 / 6.0))
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}
