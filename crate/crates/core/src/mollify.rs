//! Smoothing of coefficient fields by convolution with compactly
//! supported bump kernels, using an anisotropic scaling: level n smooths
//! the slow variable on scale 1/n and the time variable on scale 1/n².
//!
//! The scans quantify the two sides of that trade: how fast the smoothed
//! field approaches the original as n grows, and how fast its derivatives
//! blow up while doing so. Both report fitted log-log slopes against n.

use crate::error::{SfError, SfResult};
use crate::field::CoefficientField;
use rayon::prelude::*;

/// Tensor Gauss-Legendre order used when the caller does not pick one.
/// Normalizes the 1-d bump to about 1e-10 and the 2-d bump (whose support
/// circle cuts the tensor square and slows convergence) to about 3e-8,
/// both inside the 1e-6 contract.
pub const DEFAULT_QUAD_ORDER: usize = 48;

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1);
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let pk = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = pk;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

fn bump(s_sq: f64) -> f64 {
    if s_sq < 1.0 {
        (-1.0 / (1.0 - s_sq)).exp()
    } else {
        0.0
    }
}

/// The smooth compactly supported kernel pair at level `n`: a 1-d bump for
/// the time variable on scale n^-2, and a radial d2-dimensional bump for
/// the slow variable on scale n^-1. Normalization is numerical, against
/// the same quadrature rule the convolution uses, so constants survive
/// mollification exactly.
#[derive(Debug, Clone)]
pub struct MollifierKernel {
    /// Mollification level.
    pub n: u32,
    d2: usize,
}

impl MollifierKernel {
    pub fn new(n: u32, d2: usize) -> SfResult<Self> {
        if n == 0 {
            return Err(SfError::Argument("mollification level must be >= 1".into()));
        }
        if d2 == 0 {
            return Err(SfError::Argument("kernel dimension must be >= 1".into()));
        }
        Ok(MollifierKernel { n, d2 })
    }

    pub fn dim(&self) -> usize {
        self.d2
    }

    /// Unnormalized 1-d bump value.
    pub fn rho1_raw(&self, r: f64) -> f64 {
        bump(r * r)
    }

    /// Unnormalized d2-dimensional bump value.
    pub fn rho2_raw(&self, u: &[f64]) -> f64 {
        bump(u.iter().map(|v| v * v).sum())
    }

    /// Discrete mass of each bump under a tensor Gauss-Legendre rule of the
    /// given order, before normalization.
    pub fn raw_masses(&self, order: usize) -> (f64, f64) {
        let (nodes, weights) = gauss_legendre(order);
        let m1: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| w * self.rho1_raw(x))
            .sum();
        let mut m2 = 0.0;
        let mut idx = vec![0usize; self.d2];
        let mut u = vec![0.0; self.d2];
        loop {
            let mut w = 1.0;
            for (k, &i) in idx.iter().enumerate() {
                u[k] = nodes[i];
                w *= weights[i];
            }
            m2 += w * self.rho2_raw(&u);
            let mut carry = 0;
            loop {
                idx[carry] += 1;
                if idx[carry] < order {
                    break;
                }
                idx[carry] = 0;
                carry += 1;
                if carry == self.d2 {
                    return (m1, m2);
                }
            }
        }
    }

    /// Relative distance of the order-`order` discrete kernel masses from
    /// their converged values, for the time and space kernels. The scaled
    /// kernels inherit the same numbers because rescaling is an exact
    /// change of variables in the quadrature.
    pub fn normalization_error(&self, order: usize) -> (f64, f64) {
        let reference = order.max(96) + 25;
        let (m1, m2) = self.raw_masses(order);
        let (r1, r2) = self.raw_masses(reference);
        (((m1 - r1) / r1).abs(), ((m2 - r2) / r2).abs())
    }
}

/// A coefficient field convolved with the scaled kernels: in y when the
/// field reads y, additionally in t when it reads t, pass-through
/// otherwise. The x argument is never convolved.
pub struct MollifiedField {
    base: CoefficientField,
    n: u32,
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// Convolve `field` with the level-`n` kernels using a tensor
/// Gauss-Legendre rule of the given order (at least 8; see
/// [`DEFAULT_QUAD_ORDER`]).
pub fn mollify_field(
    field: &CoefficientField,
    n: u32,
    order: usize,
) -> SfResult<MollifiedField> {
    if n == 0 {
        return Err(SfError::Argument("mollification level must be >= 1".into()));
    }
    if order < 8 {
        return Err(SfError::Argument(format!(
            "quadrature order must be at least 8, got {order}"
        )));
    }
    let (nodes, weights) = gauss_legendre(order);
    Ok(MollifiedField {
        base: field.clone(),
        n,
        order,
        nodes,
        weights,
    })
}

impl MollifiedField {
    pub fn base(&self) -> &CoefficientField {
        &self.base
    }

    pub fn level(&self) -> u32 {
        self.n
    }

    /// Evaluate the smoothed field at (t, x, y).
    ///
    /// The quadrature works in kernel coordinates (the integration variable
    /// is the unscaled bump argument), and the accumulated discrete kernel
    /// mass divides the sum at the end, so the rule never has to chase the
    /// shrinking support and constants are reproduced to rounding.
    pub fn eval(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) -> SfResult<()> {
        let reads = self.base.reads();
        if !reads.y && !reads.t {
            return self.base.eval(t, x, y, out);
        }
        let len = self.base.shape().len();
        if out.len() != len {
            return Err(SfError::Structural(format!(
                "output buffer length {} does not match field output {len}",
                out.len()
            )));
        }
        let n = self.n as f64;
        let order = self.order;
        let mut buf = vec![0.0; len];
        out.fill(0.0);
        let mut total_w = 0.0;

        let t_plan: Vec<(f64, f64)> = if reads.t {
            self.nodes
                .iter()
                .zip(&self.weights)
                .map(|(&v, &w)| (t - v / (n * n), w * bump(v * v)))
                .collect()
        } else {
            vec![(t, 1.0)]
        };

        if reads.y && !y.is_empty() {
            let d2 = y.len();
            let mut idx = vec![0usize; d2];
            let mut shifted = vec![0.0; d2];
            let mut u = vec![0.0; d2];
            'tensor: loop {
                let mut w = 1.0;
                for (k, &i) in idx.iter().enumerate() {
                    u[k] = self.nodes[i];
                    w *= self.weights[i];
                }
                let rho = bump(u.iter().map(|v| v * v).sum());
                if rho > 0.0 {
                    let wy = w * rho;
                    for k in 0..d2 {
                        shifted[k] = y[k] - u[k] / n;
                    }
                    for &(ts, wt) in &t_plan {
                        self.base.eval(ts, x, &shifted, &mut buf)?;
                        let wtot = wy * wt;
                        total_w += wtot;
                        for (o, v) in out.iter_mut().zip(&buf) {
                            *o += wtot * v;
                        }
                    }
                }
                let mut carry = 0;
                loop {
                    idx[carry] += 1;
                    if idx[carry] < order {
                        break;
                    }
                    idx[carry] = 0;
                    carry += 1;
                    if carry == d2 {
                        break 'tensor;
                    }
                }
            }
        } else {
            for &(ts, wt) in &t_plan {
                self.base.eval(ts, x, y, &mut buf)?;
                total_w += wt;
                for (o, v) in out.iter_mut().zip(&buf) {
                    *o += wt * v;
                }
            }
        }
        for o in out.iter_mut() {
            *o /= total_w;
        }
        Ok(())
    }
}

/// Probe set for the scans: the cartesian product of time points and slow
/// points, with a fixed fast-variable probe passed through to the field.
#[derive(Debug, Clone)]
pub struct ScanGrid {
    pub t_points: Vec<f64>,
    pub y_points: Vec<Vec<f64>>,
    pub x_probe: Vec<f64>,
}

impl ScanGrid {
    /// Uniform 1-d slow grid over [lo, hi], time fixed at 0.
    pub fn line(lo: f64, hi: f64, count: usize) -> Self {
        let y_points = (0..count)
            .map(|i| vec![lo + (hi - lo) * i as f64 / (count - 1) as f64])
            .collect();
        ScanGrid {
            t_points: vec![0.0],
            y_points,
            x_probe: Vec::new(),
        }
    }

    fn check(&self) -> SfResult<()> {
        if self.t_points.is_empty() || self.y_points.is_empty() {
            return Err(SfError::Argument("scan grid must be nonempty".into()));
        }
        Ok(())
    }
}

/// Outcome of one log-log scan over mollification levels.
#[derive(Debug, Clone)]
pub struct ScanResult {
    pub ns: Vec<u32>,
    /// Per-level sup over the grid of the scanned quantity.
    pub values: Vec<f64>,
    /// Fitted slope of ln(value) against ln(n); NaN when degenerate.
    pub slope: f64,
    pub intercept: f64,
    /// Largest absolute log-residual of the fit.
    pub residual: f64,
    /// Slope bound the pass verdict applied (an upper bound).
    pub threshold: f64,
    /// True when the quantity sat at rounding level on every level, so the
    /// slope is meaningless and the check holds trivially.
    pub degenerate: bool,
    pub pass: bool,
    /// Wall-clock time the scan took.
    pub seconds: f64,
}

impl ScanResult {
    /// CSV rows `n, value`, preceded by the fit summary as comments.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> SfResult<()> {
        if self.degenerate {
            writeln!(w, "# slope: degenerate (values at rounding level)")?;
        } else {
            writeln!(w, "# slope: {:.6}", self.slope)?;
        }
        writeln!(w, "# threshold: {:.6}", self.threshold)?;
        writeln!(w, "# pass: {}", self.pass)?;
        writeln!(w, "n,value")?;
        for (n, v) in self.ns.iter().zip(&self.values) {
            writeln!(w, "{n},{v}")?;
        }
        Ok(())
    }
}

fn check_levels(ns: &[u32]) -> SfResult<()> {
    if ns.len() < 3 {
        return Err(SfError::Argument(
            "at least 3 mollification levels are required for a slope fit".into(),
        ));
    }
    if ns[0] == 0 {
        return Err(SfError::Argument("mollification levels must be >= 1".into()));
    }
    for w in ns.windows(2) {
        if w[1] <= w[0] {
            return Err(SfError::Argument(
                "mollification levels must be strictly increasing".into(),
            ));
        }
    }
    Ok(())
}

/// Values below this are treated as zero by the scans: coefficient fields
/// are order one, so anything smaller is quadrature and rounding residue.
const SCAN_FLOOR: f64 = 1e-12;

fn fit_scan(ns: &[u32], values: &[f64], threshold: f64, seconds: f64) -> ScanResult {
    let degenerate = values.iter().all(|&v| v.abs() <= SCAN_FLOOR);
    if degenerate {
        return ScanResult {
            ns: ns.to_vec(),
            values: values.to_vec(),
            slope: f64::NAN,
            intercept: f64::NAN,
            residual: 0.0,
            threshold,
            degenerate: true,
            pass: true,
            seconds,
        };
    }
    let logs: Vec<(f64, f64)> = ns
        .iter()
        .zip(values)
        .map(|(&n, &v)| ((n as f64).ln(), v.abs().max(SCAN_FLOOR * 1e-3).ln()))
        .collect();
    let k = logs.len() as f64;
    let sx: f64 = logs.iter().map(|p| p.0).sum();
    let sy: f64 = logs.iter().map(|p| p.1).sum();
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    let slope = (sxy - sx * sy / k) / (sxx - sx * sx / k);
    let intercept = (sy - slope * sx) / k;
    let residual = logs
        .iter()
        .fold(0.0f64, |a, p| a.max((p.1 - intercept - slope * p.0).abs()));
    ScanResult {
        ns: ns.to_vec(),
        values: values.to_vec(),
        slope,
        intercept,
        residual,
        threshold,
        degenerate: false,
        pass: slope <= threshold,
        seconds,
    }
}

fn sup_over_grid<Q>(grid: &ScanGrid, quantity: Q) -> SfResult<f64>
where
    Q: Fn(f64, &[f64]) -> SfResult<f64> + Send + Sync,
{
    let points: Vec<(f64, &Vec<f64>)> = grid
        .t_points
        .iter()
        .flat_map(|&t| grid.y_points.iter().map(move |y| (t, y)))
        .collect();
    points
        .par_iter()
        .map(|&(t, y)| quantity(t, y))
        .try_reduce(|| 0.0f64, |a, b| Ok(a.max(b)))
}

/// For each level, the sup over the grid of |field - mollified field|,
/// with a fitted decay slope. Passes when the error decays at least like
/// n^-(alpha - 0.2), alpha taken from the field's metadata.
pub fn sup_error_scan(
    field: &CoefficientField,
    ns: &[u32],
    grid: &ScanGrid,
    order: usize,
) -> SfResult<ScanResult> {
    check_levels(ns)?;
    grid.check()?;
    let t0 = std::time::Instant::now();
    let len = field.shape().len();
    let mut values = Vec::with_capacity(ns.len());
    for &n in ns {
        let smooth = mollify_field(field, n, order)?;
        let sup = sup_over_grid(grid, |t, y| {
            let mut exact = vec![0.0; len];
            let mut approx = vec![0.0; len];
            field.eval(t, &grid.x_probe, y, &mut exact)?;
            smooth.eval(t, &grid.x_probe, y, &mut approx)?;
            Ok(exact
                .iter()
                .zip(&approx)
                .fold(0.0f64, |a, (e, m)| a.max((e - m).abs())))
        })?;
        values.push(sup);
    }
    let alpha = field.meta().alpha;
    Ok(fit_scan(
        ns,
        &values,
        -(alpha - 0.2),
        t0.elapsed().as_secs_f64(),
    ))
}

/// Per-level sups of the finite-difference time derivative and of the
/// diagonal second y-derivatives of the mollified field.
#[derive(Debug, Clone)]
pub struct GrowthScan {
    /// Scan of sup |d/dt of the mollified field|.
    pub time: ScanResult,
    /// Scan of sup |second y-derivatives of the mollified field|.
    pub space: ScanResult,
}

impl GrowthScan {
    pub fn pass(&self) -> bool {
        self.time.pass && self.space.pass
    }
}

/// Zero out a finite difference whose numerator is at rounding level
/// relative to the operands; dividing such residue by a tiny step would
/// manufacture spurious derivative growth for flat fields.
fn clamp_fd(numer: f64, scale: f64) -> f64 {
    if numer.abs() <= 64.0 * f64::EPSILON * scale {
        0.0
    } else {
        numer
    }
}

/// Measure how fast derivatives of the mollified field grow with the
/// level. Both slopes must stay at or below (2 - alpha) + 0.2. The
/// finite-difference step shrinks like n^-2 so it keeps resolving the
/// scale on which the mollified field varies.
pub fn derivative_growth_scan(
    field: &CoefficientField,
    ns: &[u32],
    grid: &ScanGrid,
    order: usize,
) -> SfResult<GrowthScan> {
    check_levels(ns)?;
    grid.check()?;
    let t0 = std::time::Instant::now();
    let len = field.shape().len();
    let reads = field.reads();
    let mut t_values = Vec::with_capacity(ns.len());
    let mut y_values = Vec::with_capacity(ns.len());
    for &n in ns {
        let smooth = mollify_field(field, n, order)?;
        let h = 1e-3 / (n as f64 * n as f64);
        let t_sup = if reads.t {
            sup_over_grid(grid, |t, y| {
                let mut lo = vec![0.0; len];
                let mut hi = vec![0.0; len];
                smooth.eval(t - h, &grid.x_probe, y, &mut lo)?;
                smooth.eval(t + h, &grid.x_probe, y, &mut hi)?;
                Ok(lo.iter().zip(&hi).fold(0.0f64, |a, (l, u)| {
                    let numer = clamp_fd(u - l, u.abs() + l.abs());
                    a.max((numer / (2.0 * h)).abs())
                }))
            })?
        } else {
            0.0
        };
        t_values.push(t_sup);
        let y_sup = if reads.y {
            sup_over_grid(grid, |t, y| {
                let mut mid = vec![0.0; len];
                let mut lo = vec![0.0; len];
                let mut hi = vec![0.0; len];
                let mut shifted = y.to_vec();
                smooth.eval(t, &grid.x_probe, y, &mut mid)?;
                let mut worst = 0.0f64;
                for axis in 0..y.len() {
                    shifted.copy_from_slice(y);
                    shifted[axis] = y[axis] - h;
                    smooth.eval(t, &grid.x_probe, &shifted, &mut lo)?;
                    shifted[axis] = y[axis] + h;
                    smooth.eval(t, &grid.x_probe, &shifted, &mut hi)?;
                    for c in 0..len {
                        let numer = clamp_fd(
                            hi[c] - 2.0 * mid[c] + lo[c],
                            hi[c].abs() + 2.0 * mid[c].abs() + lo[c].abs(),
                        );
                        worst = worst.max((numer / (h * h)).abs());
                    }
                }
                Ok(worst)
            })?
        } else {
            0.0
        };
        y_values.push(y_sup);
    }
    let alpha = field.meta().alpha;
    let bound = (2.0 - alpha) + 0.2;
    let seconds = t0.elapsed().as_secs_f64();
    Ok(GrowthScan {
        time: fit_scan(ns, &t_values, bound, seconds),
        space: fit_scan(ns, &y_values, bound, seconds),
    })
}
