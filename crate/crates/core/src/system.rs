//! The slow-fast system and the frozen fast equation.
//!
//! A slow-fast system couples a fast component X in R^{d1} driven at rate
//! 1/eps with a slow component Y in R^{d2}:
//!
//! ```text
//! dX = (1/eps)   b(X, Y) dt + (1/sqrt(eps)) sigma(X, Y) dW1
//! dY = F(t, X, Y) dt       +                G(t, X, Y) dW2
//! ```
//!
//! Freezing the slow variable at a point y and rescaling time by eps gives
//! the frozen equation `dX = b(X, y) dt + sigma(X, y) dW`, whose invariant
//! measure defines the averaged coefficients of the effective slow dynamics.

use crate::error::{SfError, SfResult};
use crate::field::{CoefficientField, OutputShape};

/// A fully specified slow-fast system.
#[derive(Debug, Clone)]
pub struct SlowFastSystem {
    /// Fast-state dimension.
    pub d1: usize,
    /// Slow-state dimension.
    pub d2: usize,
    /// Fast drift b(x, y), vector of length d1.
    pub b: CoefficientField,
    /// Fast diffusion sigma(x, y), d1 x d1 matrix.
    pub sigma: CoefficientField,
    /// Slow drift F(t, x, y), vector of length d2.
    pub f: CoefficientField,
    /// Slow diffusion G(t, x, y), d2 x d2 matrix.
    pub g: CoefficientField,
    /// Time-scale separation parameter; must be positive.
    pub epsilon: f64,
    /// Whether G actually reads the fast variable. When it does, strong
    /// pathwise comparison with the effective equation is not supported and
    /// only weak (distributional) comparisons are meaningful.
    pub g_depends_on_x: bool,
    /// Human-readable tag for reports.
    pub label: String,
}

impl SlowFastSystem {
    /// Build a system, checking that all four fields have the shapes the
    /// dimensions imply.
    pub fn new(
        d1: usize,
        d2: usize,
        b: CoefficientField,
        sigma: CoefficientField,
        f: CoefficientField,
        g: CoefficientField,
        epsilon: f64,
        label: &str,
    ) -> SfResult<Self> {
        if d1 == 0 || d2 == 0 {
            return Err(SfError::Argument(
                "both state dimensions must be positive".into(),
            ));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(SfError::Argument(format!(
                "epsilon must be a positive finite number, got {epsilon}"
            )));
        }
        Self::expect_shape(&b, OutputShape::Vector { rows: d1 })?;
        Self::expect_shape(&sigma, OutputShape::Matrix { rows: d1, cols: d1 })?;
        Self::expect_shape(&f, OutputShape::Vector { rows: d2 })?;
        Self::expect_shape(&g, OutputShape::Matrix { rows: d2, cols: d2 })?;
        let g_depends_on_x = g.reads().x;
        Ok(SlowFastSystem {
            d1,
            d2,
            b,
            sigma,
            f,
            g,
            epsilon,
            g_depends_on_x,
            label: label.to_string(),
        })
    }

    fn expect_shape(field: &CoefficientField, want: OutputShape) -> SfResult<()> {
        if field.shape() != want {
            return Err(SfError::Structural(format!(
                "field '{}' has shape {:?}, expected {:?}",
                field.name(),
                field.shape(),
                want
            )));
        }
        Ok(())
    }

    /// Same dynamics with a different time-scale parameter.
    pub fn with_epsilon(&self, epsilon: f64) -> SfResult<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(SfError::Argument(format!(
                "epsilon must be a positive finite number, got {epsilon}"
            )));
        }
        let mut sys = self.clone();
        sys.epsilon = epsilon;
        Ok(sys)
    }

    /// Fast generator diffusion coefficient a = sigma sigma^T / 2 at (x, y),
    /// written row-major into `out` (length d1*d1).
    pub fn fast_a(&self, x: &[f64], y: &[f64], scratch: &mut [f64], out: &mut [f64]) -> SfResult<()> {
        let d = self.d1;
        if scratch.len() != d * d || out.len() != d * d {
            return Err(SfError::Structural(
                "fast_a needs d1*d1 scratch and output buffers".into(),
            ));
        }
        self.sigma.eval(0.0, x, y, scratch)?;
        half_gram(scratch, d, out);
        Ok(())
    }

    /// Slow second-order coefficient H = G G^T / 2 at (t, x, y), row-major
    /// into `out` (length d2*d2).
    pub fn slow_h(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        scratch: &mut [f64],
        out: &mut [f64],
    ) -> SfResult<()> {
        let d = self.d2;
        if scratch.len() != d * d || out.len() != d * d {
            return Err(SfError::Structural(
                "slow_h needs d2*d2 scratch and output buffers".into(),
            ));
        }
        self.g.eval(t, x, y, scratch)?;
        half_gram(scratch, d, out);
        Ok(())
    }

    /// The frozen fast equation at slow state `y`, run at unit speed.
    pub fn freeze(&self, y: &[f64]) -> SfResult<FrozenSystem> {
        if y.len() != self.d2 {
            return Err(SfError::Structural(format!(
                "freeze point has dimension {}, system slow dimension is {}",
                y.len(),
                self.d2
            )));
        }
        Ok(FrozenSystem {
            d1: self.d1,
            b: self.b.clone(),
            sigma: self.sigma.clone(),
            y: y.to_vec(),
        })
    }
}

/// The fast equation with the slow variable frozen at `y`:
/// `dX = b(X, y) dt + sigma(X, y) dW` at unit speed.
#[derive(Debug, Clone)]
pub struct FrozenSystem {
    pub d1: usize,
    pub b: CoefficientField,
    pub sigma: CoefficientField,
    pub y: Vec<f64>,
}

impl FrozenSystem {
    /// Drift at x, length d1.
    pub fn drift(&self, x: &[f64], out: &mut [f64]) -> SfResult<()> {
        self.b.eval(0.0, x, &self.y, out)
    }

    /// Diffusion matrix at x, row-major d1 x d1.
    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) -> SfResult<()> {
        self.sigma.eval(0.0, x, &self.y, out)
    }

    /// Generator diffusion coefficient a = sigma sigma^T / 2 at x.
    pub fn a(&self, x: &[f64], scratch: &mut [f64], out: &mut [f64]) -> SfResult<()> {
        let d = self.d1;
        if scratch.len() != d * d || out.len() != d * d {
            return Err(SfError::Structural(
                "a needs d1*d1 scratch and output buffers".into(),
            ));
        }
        self.sigma.eval(0.0, x, &self.y, scratch)?;
        half_gram(scratch, d, out);
        Ok(())
    }

    /// Apply the generator to a function given its gradient and Hessian at x:
    /// `L f = <b, grad f> + tr(a Hess f)` with a = sigma sigma^T / 2.
    pub fn apply_generator(
        &self,
        x: &[f64],
        grad: &[f64],
        hess: &[f64],
    ) -> SfResult<f64> {
        let d = self.d1;
        if grad.len() != d || hess.len() != d * d {
            return Err(SfError::Structural(
                "gradient/Hessian buffers have the wrong length".into(),
            ));
        }
        let mut bx = vec![0.0; d];
        self.drift(x, &mut bx)?;
        let mut sig = vec![0.0; d * d];
        let mut a = vec![0.0; d * d];
        self.sigma.eval(0.0, x, &self.y, &mut sig)?;
        half_gram(&sig, d, &mut a);
        let mut val = 0.0;
        for i in 0..d {
            val += bx[i] * grad[i];
            for j in 0..d {
                val += a[i * d + j] * hess[i * d + j];
            }
        }
        Ok(val)
    }
}

/// out = m m^T / 2 for a row-major d x d matrix m.
pub(crate) fn half_gram(m: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += m[i * d + k] * m[j * d + k];
            }
            out[i * d + j] = 0.5 * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{matrix_field, vector_field, HolderMeta, Reads};

    fn toy_system(eps: f64) -> SlowFastSystem {
        let b = vector_field("b", 1, Reads::XY, HolderMeta::lipschitz(), |_, x, y, out| {
            out[0] = y[0] - x[0];
        });
        let sigma = matrix_field(
            "sigma",
            1,
            1,
            Reads::XY,
            HolderMeta::lipschitz(),
            |_, _, _, out| out[0] = std::f64::consts::SQRT_2,
        );
        let f = vector_field("f", 1, Reads::ALL, HolderMeta::lipschitz(), |_, x, y, out| {
            out[0] = x[0] - y[0];
        });
        let g = matrix_field("g", 1, 1, Reads::Y_ONLY, HolderMeta::lipschitz(), |_, _, _, out| {
            out[0] = 1.0;
        });
        SlowFastSystem::new(1, 1, b, sigma, f, g, eps, "toy").unwrap()
    }

    #[test]
    fn construction_validates_shapes_and_epsilon() {
        let sys = toy_system(0.1);
        assert_eq!(sys.d1, 1);
        assert!(!sys.g_depends_on_x);
        assert!(sys.with_epsilon(0.0).is_err());
        assert!(sys.with_epsilon(-1.0).is_err());
        assert!(sys.with_epsilon(f64::NAN).is_err());

        let bad_sigma = matrix_field(
            "sigma",
            2,
            2,
            Reads::XY,
            HolderMeta::lipschitz(),
            |_, _, _, out| out.fill(0.0),
        );
        let sys2 = SlowFastSystem::new(
            1,
            1,
            toy_system(0.1).b,
            bad_sigma,
            toy_system(0.1).f,
            toy_system(0.1).g,
            0.1,
            "bad",
        );
        assert!(sys2.is_err());
    }

    #[test]
    fn half_gram_matches_hand_computation() {
        // m = [[1, 2], [3, 4]], m m^T = [[5, 11], [11, 25]]
        let m = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 4];
        half_gram(&m, 2, &mut out);
        assert_eq!(out, [2.5, 5.5, 5.5, 12.5]);
    }

    #[test]
    fn fast_a_halves_sigma_squared() {
        let sys = toy_system(0.1);
        let mut scratch = [0.0; 1];
        let mut out = [0.0; 1];
        sys.fast_a(&[0.0], &[0.0], &mut scratch, &mut out).unwrap();
        // sigma = sqrt(2) so a = 1
        assert!((out[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_generator_on_quadratic() {
        // For b = y - x, sigma = sqrt(2): L f = (y - x) f' + f''.
        // With f(x) = x^2 at x = 2, y = 1: L f = (1 - 2) * 4 + 2 = -2.
        let sys = toy_system(0.1);
        let frozen = sys.freeze(&[1.0]).unwrap();
        let grad = [4.0];
        let hess = [2.0];
        let lf = frozen.apply_generator(&[2.0], &grad, &hess).unwrap();
        assert!((lf - (-2.0)).abs() < 1e-14);
    }

    #[test]
    fn freeze_checks_dimension() {
        let sys = toy_system(0.1);
        assert!(sys.freeze(&[1.0, 2.0]).is_err());
    }
}
