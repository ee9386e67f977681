//! Coefficient fields: closures over (t, x, y) with declared shape and
//! regularity metadata.
//!
//! Every drift and diffusion coefficient in the toolkit is wrapped in a
//! [`CoefficientField`]. The wrapper records which arguments the closure
//! actually reads, what shape it writes, and the Hölder exponents the
//! modeller claims for it. The exponents drive the convergence-rate
//! predictions downstream; the library never differentiates a field
//! symbolically, so smoothness is declared, not inferred.

use std::fmt;
use std::sync::Arc;

use crate::error::{SfError, SfResult};

/// Declared regularity of a coefficient.
///
/// `delta` is the exponent in the slow (x) variable, `alpha` the exponent in
/// the fast (y) variable, and `time_exponent` the exponent in t. Values of
/// 1.0 mean Lipschitz; `alpha` up to 2.0 encodes "differentiable with
/// Hölder derivative".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderMeta {
    pub delta: f64,
    pub alpha: f64,
    pub time_exponent: f64,
}

impl HolderMeta {
    pub fn new(delta: f64, alpha: f64, time_exponent: f64) -> SfResult<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(SfError::Argument(format!(
                "delta must lie in (0, 1], got {delta}"
            )));
        }
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(SfError::Argument(format!(
                "alpha must lie in (0, 2], got {alpha}"
            )));
        }
        if !(time_exponent >= 0.0 && time_exponent <= 1.0) {
            return Err(SfError::Argument(format!(
                "time_exponent must lie in [0, 1], got {time_exponent}"
            )));
        }
        Ok(HolderMeta {
            delta,
            alpha,
            time_exponent,
        })
    }

    /// Lipschitz in every argument; the default for smooth cases.
    pub fn lipschitz() -> Self {
        HolderMeta {
            delta: 1.0,
            alpha: 1.0,
            time_exponent: 1.0,
        }
    }
}

/// Which arguments a field reads. Flags a field never looks at can stay
/// false so callers may pass empty slices there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reads {
    pub t: bool,
    pub x: bool,
    pub y: bool,
}

impl Reads {
    pub const ALL: Reads = Reads {
        t: true,
        x: true,
        y: true,
    };
    pub const XY: Reads = Reads {
        t: false,
        x: true,
        y: true,
    };
    pub const Y_ONLY: Reads = Reads {
        t: false,
        x: false,
        y: true,
    };
    pub const TY: Reads = Reads {
        t: true,
        x: false,
        y: true,
    };
}

/// Output shape of a field: a vector of length `rows` or a `rows` x `cols`
/// matrix stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputShape {
    Vector { rows: usize },
    Matrix { rows: usize, cols: usize },
}

impl OutputShape {
    pub fn len(&self) -> usize {
        match *self {
            OutputShape::Vector { rows } => rows,
            OutputShape::Matrix { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type FieldFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// A coefficient of the system: an evaluation closure plus metadata.
///
/// The closure writes its value into the output slice; the wrapper checks
/// finiteness on every call so a NaN surfaces as an error at its source
/// rather than three modules later.
#[derive(Clone)]
pub struct CoefficientField {
    name: String,
    eval: Arc<FieldFn>,
    shape: OutputShape,
    reads: Reads,
    meta: HolderMeta,
    sup_bound: Option<f64>,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("name", &self.name)
            .field("shape", &self.shape)
            .field("reads", &self.reads)
            .field("meta", &self.meta)
            .field("sup_bound", &self.sup_bound)
            .finish_non_exhaustive()
    }
}

impl CoefficientField {
    pub fn new<F>(name: &str, shape: OutputShape, reads: Reads, meta: HolderMeta, eval: F) -> Self
    where
        F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        CoefficientField {
            name: name.to_string(),
            eval: Arc::new(eval),
            shape,
            reads,
            meta,
            sup_bound: None,
        }
    }

    /// Declare a uniform bound `sup |field| <= bound`. Validation probes
    /// will treat any observed violation as a hard error.
    pub fn with_sup_bound(mut self, bound: f64) -> Self {
        self.sup_bound = Some(bound);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> OutputShape {
        self.shape
    }

    pub fn reads(&self) -> Reads {
        self.reads
    }

    pub fn meta(&self) -> HolderMeta {
        self.meta
    }

    pub fn sup_bound(&self) -> Option<f64> {
        self.sup_bound
    }

    /// Evaluate into `out`, checking the output length and finiteness.
    pub fn eval(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) -> SfResult<()> {
        if out.len() != self.shape.len() {
            return Err(SfError::Structural(format!(
                "field '{}' writes {} values but was given a buffer of length {}",
                self.name,
                self.shape.len(),
                out.len()
            )));
        }
        (self.eval)(t, x, y, out);
        for (i, v) in out.iter().enumerate() {
            if !v.is_finite() {
                return Err(SfError::Evaluation(format!(
                    "field '{}' produced non-finite entry {} = {} at t = {}, x = {:?}, y = {:?}",
                    self.name, i, v, t, x, y
                )));
            }
        }
        Ok(())
    }

    /// Evaluate without the checks. Hot loops use this after validation has
    /// probed the field; blow-up detection in the integrator still catches
    /// divergence.
    #[inline]
    pub fn eval_unchecked(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.eval)(t, x, y, out);
    }
}

/// Convenience constructor for a vector field of length `rows`.
pub fn vector_field<F>(
    name: &str,
    rows: usize,
    reads: Reads,
    meta: HolderMeta,
    eval: F,
) -> CoefficientField
where
    F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
{
    CoefficientField::new(name, OutputShape::Vector { rows }, reads, meta, eval)
}

/// Convenience constructor for a matrix field, row-major.
pub fn matrix_field<F>(
    name: &str,
    rows: usize,
    cols: usize,
    reads: Reads,
    meta: HolderMeta,
    eval: F,
) -> CoefficientField
where
    F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
{
    CoefficientField::new(name, OutputShape::Matrix { rows, cols }, reads, meta, eval)
}
