//! Soft leaky ReLU: `σ(x) = αx + ((1-α)/β)·log(1 + e^{βx})`.
//!
//! Convex and strictly increasing for `α ∈ [0, 1)`, `β > 0`; tends to leaky
//! ReLU with slope `α` as `β → ∞`.

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 20.0;

/// `log(1 + e^t)` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn activation(x: f64, alpha: f64, beta: f64) -> f64 {
    alpha * x + (1.0 - alpha) / beta * softplus(beta * x)
}

#[inline]
pub fn activation_d1(x: f64, alpha: f64, beta: f64) -> f64 {
    alpha + (1.0 - alpha) * sigmoid(beta * x)
}

#[inline]
pub fn activation_d2(x: f64, alpha: f64, beta: f64) -> f64 {
    let s = sigmoid(beta * x);
    (1.0 - alpha) * beta * s * (1.0 - s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: f64 = DEFAULT_ALPHA;
    const B: f64 = DEFAULT_BETA;

    // Reference values evaluated at 40 significant digits.
    #[test]
    fn high_precision_reference_values() {
        assert!((activation(0.0, A, B) - 0.031_191_623_125_197_538_9).abs() < 1e-16);
        assert!((activation(1.0, A, B) - 1.000_000_000_092_751_913).abs() < 1e-15);
        assert!((activation(-1.0, A, B) - -0.099_999_999_907_248_087_09).abs() < 1e-16);
        assert!((activation(0.3, A, B) - 0.300_111_405_831_197_870_2).abs() < 1e-15);
        assert!((activation(-0.05, A, B) - 0.009_096_775_938_320_027_53).abs() < 1e-16);
    }

    #[test]
    fn no_overflow_at_extremes() {
        assert_eq!(activation(1e6, A, B), 1e6);
        assert!((activation(-1e6, A, B) - -1e5).abs() < 1e-9);
        assert!(activation(800.0, 0.0, 1.0).is_finite());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for &x in &[-0.7, -0.05, 0.0, 0.02, 0.4, 1.3] {
            let fd1 = (activation(x + h, A, B) - activation(x - h, A, B)) / (2.0 * h);
            assert!((fd1 - activation_d1(x, A, B)).abs() < 1e-7, "x={x}");
            let fd2 = (activation_d1(x + h, A, B) - activation_d1(x - h, A, B)) / (2.0 * h);
            assert!((fd2 - activation_d2(x, A, B)).abs() < 1e-5, "x={x}");
        }
    }

    #[test]
    fn increasing_and_convex() {
        let xs: Vec<f64> = (-200..=200).map(|i| i as f64 * 0.01).collect();
        for w in xs.windows(3) {
            let (a, b, c) = (activation(w[0], A, B), activation(w[1], A, B), activation(w[2], A, B));
            assert!(a < b && b < c);
            assert!(b <= 0.5 * (a + c) + 1e-15);
        }
    }
}
