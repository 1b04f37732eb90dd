//! Scalar abstraction for the metric arithmetic.
//!
//! Mean negative log-likelihood, the IFD ratio and BLEU are written once
//! against [`Scalar`] so they can be evaluated in `f32` or `f64`. The
//! pipeline itself stores `f64` (see the aliases at the crate root).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub trait Scalar: Float + FromPrimitive + Sum + Debug + Display + Send + Sync + 'static {
    /// Lossy conversion of a count. Counts in this crate stay far below 2^24.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable as float")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
