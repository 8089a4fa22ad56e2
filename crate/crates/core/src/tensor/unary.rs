use super::Scalar;

/// sqrt(2 / pi), the tanh-approximation GELU constant.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-approximation GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Pointwise activation functions recorded as a single tape primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Unary {
    Identity,
    Sigmoid,
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
    Silu,
    Square,
}

impl Unary {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Identity => x,
            Unary::Sigmoid => sigmoid(x),
            Unary::Gelu => gelu(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Square => x * x,
        }
    }

    /// Derivative at `x`.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Identity => T::one(),
            Unary::Sigmoid => {
                let s = sigmoid(x);
                if super::fault::active(super::fault::Fault::SigmoidBackward) {
                    return s;
                }
                s * (T::one() - s)
            }
            Unary::Gelu => gelu_derivative(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Square => x + x,
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    // exp(-|x|) never overflows; only the numerator depends on the sign.
    let e = (-x.abs()).exp_fast();
    let num = if x >= T::zero() { T::one() } else { e };
    num / (T::one() + e)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let u = c * (x + a * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh_fast())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let u = c * (x + a * x * x * x);
    let th = u.tanh_fast();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_points() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(gelu(0.0f64), 0.0);
        assert_eq!(Unary::Silu.apply(0.0f64), 0.0);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!(sigmoid(-800.0f32).is_finite());
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for kind in [Unary::Sigmoid, Unary::Gelu, Unary::Silu, Unary::Square] {
            for &x in &[-2.0f64, -0.7, 0.0, 0.3, 1.9] {
                let fd = (kind.apply(x + h) - kind.apply(x - h)) / (2.0 * h);
                let an = kind.derivative(x);
                assert!((fd - an).abs() < 1e-8, "{kind:?} at {x}: {fd} vs {an}");
            }
        }
    }
}
