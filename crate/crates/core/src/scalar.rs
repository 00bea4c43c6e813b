//! Scalar abstraction: every numeric module is generic over `Scalar`,
//! instantiated as `f64` for verification and `f32` for training.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + std::iter::Sum + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    /// Convert an `f64` constant. Panics only on NaN-free conversion failure,
    /// which cannot happen for f32/f64.
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant conversion")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}
