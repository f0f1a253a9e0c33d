use serde::{Deserialize, Serialize};

/// Smoothing width used for the smoothed ReLU.
pub const SMOOTHED_RELU_EPS: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    SmoothedRelu,
    Identity,
}

/// Non-decreasing Lipschitz activation `σ` with first and second derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub kind: ActivationKind,
    /// Only used by the smoothed ReLU.
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    SMOOTHED_RELU_EPS
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Activation { kind, eps: SMOOTHED_RELU_EPS }
    }

    pub fn sigmoid() -> Self {
        Self::new(ActivationKind::Sigmoid)
    }

    pub fn tanh() -> Self {
        Self::new(ActivationKind::Tanh)
    }

    pub fn smoothed_relu() -> Self {
        Self::new(ActivationKind::SmoothedRelu)
    }

    pub fn identity() -> Self {
        Self::new(ActivationKind::Identity)
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Sigmoid => logistic(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::SmoothedRelu => 0.5 * (x + x.hypot(self.eps)) - 0.5 * self.eps,
            ActivationKind::Identity => x,
        }
    }

    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Sigmoid => {
                let s = logistic(x);
                s * (1.0 - s)
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::SmoothedRelu => 0.5 * (1.0 + x / x.hypot(self.eps)),
            ActivationKind::Identity => 1.0,
        }
    }

    #[inline]
    pub fn second_deriv(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Sigmoid => {
                let s = logistic(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            ActivationKind::SmoothedRelu => {
                let r = x.hypot(self.eps);
                0.5 * self.eps * self.eps / (r * r * r)
            }
            ActivationKind::Identity => 0.0,
        }
    }

    /// Global Lipschitz constant `L` with `0 ≤ σ' ≤ L`.
    pub fn lipschitz(&self) -> f64 {
        match self.kind {
            ActivationKind::Sigmoid => 0.25,
            _ => 1.0,
        }
    }

    /// `σ' > 0` everywhere in exact arithmetic.
    pub fn strictly_increasing(&self) -> bool {
        true
    }

    /// Sampled check of `0 ≤ σ' ≤ L` and monotonicity on a lattice over `[-50, 50]`.
    pub fn check_invariants(&self) -> bool {
        let n = 10_000;
        let l = self.lipschitz();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=n {
            let x = -50.0 + 100.0 * i as f64 / n as f64;
            let d = self.deriv(x);
            let v = self.eval(x);
            if !(d >= 0.0 && d <= l + 1e-15) || v < prev {
                return false;
            }
            prev = v;
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [ActivationKind; 4] =
        [ActivationKind::Sigmoid, ActivationKind::Tanh, ActivationKind::SmoothedRelu, ActivationKind::Identity];

    #[test]
    fn invariants_hold_on_lattice() {
        for k in ALL {
            assert!(Activation::new(k).check_invariants(), "{k:?}");
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-5;
        for k in ALL {
            let s = Activation::new(k);
            for &x in &[-3.0, -0.4, 0.0, 0.2, 1.7, 6.0] {
                let d1 = (s.eval(x + h) - s.eval(x - h)) / (2.0 * h);
                let d2 = (s.deriv(x + h) - s.deriv(x - h)) / (2.0 * h);
                assert!((d1 - s.deriv(x)).abs() < 1e-8, "{k:?} at {x}");
                assert!((d2 - s.second_deriv(x)).abs() < 1e-5 * (1.0 + s.second_deriv(x).abs()), "{k:?} at {x}");
            }
        }
    }

    #[test]
    fn sigmoid_is_overflow_safe() {
        let s = Activation::sigmoid();
        assert_eq!(s.eval(-1000.0), 0.0);
        assert_eq!(s.eval(1000.0), 1.0);
        assert!(s.deriv(800.0).is_finite());
    }

    #[test]
    fn smoothed_relu_flat_part_is_nearly_zero() {
        // σ'(x) ≈ 0 forces σ(x) ≈ 0 up to the smoothing width
        let s = Activation::smoothed_relu();
        assert_eq!(s.eval(0.0), 0.0);
        for i in 0..=10_000 {
            let x = -50.0 + 0.01 * i as f64;
            if s.deriv(x) < 1e-6 {
                assert!(s.eval(x).abs() <= SMOOTHED_RELU_EPS);
            }
        }
    }
}
