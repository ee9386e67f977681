//! Monte Carlo solution of the Poisson equation attached to the frozen
//! fast dynamics: find u with L u = -f, where L is the frozen generator at
//! a fixed slow parameter and f has mean zero under the invariant measure.
//!
//! The solver runs the probabilistic representation u(x) = integral over
//! time of E f(X_t) started at x, truncated at a finite horizon justified
//! by exponential mixing. Common random numbers across starting points make
//! spatial differences of the estimate far more accurate than the values
//! themselves, which the finite-difference residual check exploits.

use crate::averaging::InvariantMeasureEstimate;
use crate::error::{SfError, SfResult};
use crate::field::{CoefficientField, OutputShape};
use crate::integrate::FrozenStepper;
use crate::system::FrozenSystem;
use rayon::prelude::*;

/// Paths per parallel work unit; results are folded in chunk order so the
/// output is identical for any worker count.
const CHUNK: u64 = 64;

/// The data of one Poisson solve: the frozen dynamics supplying the
/// generator, and a scalar data field f(x, y) assumed centered under the
/// invariant measure at the frozen parameter.
#[derive(Debug, Clone)]
pub struct PoissonProblem {
    frozen: FrozenSystem,
    data: CoefficientField,
}

impl PoissonProblem {
    pub fn new(frozen: FrozenSystem, data: CoefficientField) -> SfResult<Self> {
        if data.shape() != (OutputShape::Vector { rows: 1 }) {
            return Err(SfError::Structural(format!(
                "Poisson data field '{}' must be scalar, has shape {:?}",
                data.name(),
                data.shape()
            )));
        }
        Ok(PoissonProblem { frozen, data })
    }

    pub fn frozen(&self) -> &FrozenSystem {
        &self.frozen
    }

    pub fn data(&self) -> &CoefficientField {
        &self.data
    }

    /// The slow parameter the equation is frozen at.
    pub fn y_param(&self) -> &[f64] {
        &self.frozen.y
    }

    fn eval_data(&self, x: &[f64], out: &mut [f64; 1]) -> f64 {
        self.data.eval_unchecked(0.0, x, &self.frozen.y, out);
        out[0]
    }
}

/// Estimate the mean of `f` under the measure and report whether it is
/// statistically indistinguishable from zero: (estimate, standard error,
/// pass). Pass means |estimate| <= 3 SE.
pub fn check_centering(
    f: &CoefficientField,
    mu: &InvariantMeasureEstimate,
) -> SfResult<(f64, f64, bool)> {
    if f.shape() != (OutputShape::Vector { rows: 1 }) {
        return Err(SfError::Structural(format!(
            "centering check needs a scalar field, '{}' has shape {:?}",
            f.name(),
            f.shape()
        )));
    }
    let mut buf = [0.0];
    let (est, se) = mu.expectation(|x| {
        f.eval_unchecked(0.0, x, &mu.y_param, &mut buf);
        buf[0]
    })?;
    Ok((est, se, est.abs() <= 3.0 * se))
}

/// Subtract the measured mean, returning a field that passes
/// [`check_centering`] against the same measure by construction.
pub fn center(
    f: &CoefficientField,
    mu: &InvariantMeasureEstimate,
) -> SfResult<CoefficientField> {
    let (mean, _, _) = check_centering(f, mu)?;
    let base = f.clone();
    let name = format!("{}-centered", f.name());
    Ok(CoefficientField::new(
        &name,
        f.shape(),
        f.reads(),
        f.meta(),
        move |t, x, y, out| {
            base.eval_unchecked(t, x, y, out);
            out[0] -= mean;
        },
    ))
}

/// A Poisson solution on a set of evaluation points.
#[derive(Debug, Clone)]
pub struct PoissonSolution {
    pub points: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub se: Vec<f64>,
    /// Per-point |u at the full horizon - u at half the horizon|; large
    /// values relative to the SE mean the truncation is biting.
    pub tail_gap: Vec<f64>,
    /// The horizon actually integrated (the requested one rounded to an
    /// even number of steps).
    pub t_max: f64,
    pub n_paths: usize,
    pub warnings: Vec<String>,
}

impl PoissonSolution {
    /// CSV rows: point coordinates, value, standard error, tail gap.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> SfResult<()> {
        let d = self.points.first().map_or(0, |p| p.len());
        for k in 0..d {
            write!(w, "x{k},")?;
        }
        writeln!(w, "u,se,tail_gap")?;
        for (j, p) in self.points.iter().enumerate() {
            for c in p {
                write!(w, "{c},")?;
            }
            writeln!(w, "{},{},{}", self.u[j], self.se[j], self.tail_gap[j])?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Default)]
struct PointAcc {
    sum: f64,
    sq: f64,
    half: f64,
}

/// Solve the Poisson equation by Monte Carlo at each starting point.
///
/// Every path index drives one noise stream shared across all starting
/// points (the stream rewinds between points), so differences u(x) - u(x')
/// carry strongly correlated noise and mostly cancel it. The time integral
/// is a trapezoid on the step grid, cut at `t_max` and compared against the
/// half-horizon value for the tail diagnostic.
///
/// The caller is responsible for centering `problem.data` first (see
/// [`center`]); an uncentered f makes the representation diverge linearly
/// in the horizon instead of converging.
pub fn solve_poisson_mc(
    problem: &PoissonProblem,
    points: &[Vec<f64>],
    t_max: f64,
    n_paths: usize,
    dt: f64,
    master_seed: u64,
) -> SfResult<PoissonSolution> {
    if points.is_empty() {
        return Err(SfError::Argument("no evaluation points given".into()));
    }
    let d = problem.frozen.d1;
    for p in points {
        if p.len() != d {
            return Err(SfError::Structural(format!(
                "evaluation point of dimension {} in a dimension-{d} problem",
                p.len()
            )));
        }
    }
    if !(t_max >= 1.0) || !t_max.is_finite() {
        return Err(SfError::Argument(format!(
            "t_max must be at least 1, got {t_max}"
        )));
    }
    if !(dt > 0.0) || dt > t_max / 4.0 {
        return Err(SfError::Argument(format!(
            "dt must be positive and at most t_max/4, got {dt}"
        )));
    }
    if n_paths < 2 {
        return Err(SfError::Argument("need at least 2 paths".into()));
    }
    let mut steps = (t_max / dt).round() as usize;
    if steps % 2 == 1 {
        steps += 1;
    }
    let half_steps = steps / 2;
    let horizon = steps as f64 * dt;

    let starts: Vec<u64> = (0..n_paths as u64).step_by(CHUNK as usize).collect();
    let chunks: SfResult<Vec<Vec<PointAcc>>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n_paths as u64);
            let mut acc = vec![PointAcc::default(); points.len()];
            let mut buf = [0.0];
            for p in start..end {
                let mut stepper =
                    FrozenStepper::new(&problem.frozen, &points[0], dt, master_seed, p)?;
                for (j, x0) in points.iter().enumerate() {
                    stepper.restart(x0);
                    let mut fx = problem.eval_data(x0, &mut buf);
                    let mut full = 0.5 * fx;
                    let mut half = 0.5 * fx;
                    for i in 1..=steps {
                        stepper.step()?;
                        fx = problem.eval_data(stepper.state(), &mut buf);
                        full += if i == steps { 0.5 * fx } else { fx };
                        if i < half_steps {
                            half += fx;
                        } else if i == half_steps {
                            half += 0.5 * fx;
                        }
                    }
                    let a = &mut acc[j];
                    a.sum += dt * full;
                    a.sq += (dt * full) * (dt * full);
                    a.half += dt * half;
                }
            }
            Ok(acc)
        })
        .collect();
    let chunks = chunks?;

    let n = n_paths as f64;
    let mut u = vec![0.0; points.len()];
    let mut se = vec![0.0; points.len()];
    let mut tail_gap = vec![0.0; points.len()];
    for j in 0..points.len() {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut half = 0.0;
        for c in &chunks {
            sum += c[j].sum;
            sq += c[j].sq;
            half += c[j].half;
        }
        let mean = sum / n;
        let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
        u[j] = mean;
        se[j] = (var / n).sqrt();
        tail_gap[j] = (mean - half / n).abs();
        if !u[j].is_finite() || !se[j].is_finite() {
            return Err(SfError::Evaluation(format!(
                "Poisson estimate is not finite at point {:?}; data field '{}' \
                 or the dynamics degenerated along a path",
                points[j],
                problem.data.name()
            )));
        }
    }

    let mut warnings = Vec::new();
    let suspects: Vec<usize> = (0..points.len())
        .filter(|&j| tail_gap[j] > 5.0 * se[j])
        .collect();
    if !suspects.is_empty() {
        let worst = suspects
            .iter()
            .copied()
            .max_by(|&a, &b| tail_gap[a].total_cmp(&tail_gap[b]))
            .unwrap();
        warnings.push(format!(
            "tail truncation suspect at {} of {} points (worst gap {:.3e} vs 5 SE = {:.3e}); \
             consider a larger t_max",
            suspects.len(),
            points.len(),
            tail_gap[worst],
            5.0 * se[worst]
        ));
    }

    Ok(PoissonSolution {
        points: points.to_vec(),
        u,
        se,
        tail_gap,
        t_max: horizon,
        n_paths,
        warnings,
    })
}

/// Outcome of applying the generator to the solution by finite differences
/// and comparing against -f.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// |L u + f| at each interior grid point.
    pub residuals: Vec<f64>,
    /// Residuals divided by the sup of |f| over the interior grid.
    pub relative: Vec<f64>,
    pub median_relative: f64,
    /// True when the median relative residual is at most 0.1 (loose: Monte
    /// Carlo noise dominates the solution values).
    pub pass: bool,
    /// How much the residuals may move under a constant shift of u, from
    /// rounding in the stencils alone; the generator itself kills
    /// constants exactly.
    pub shift_tolerance: f64,
}

/// Check L u = -f on a uniform one-dimensional grid of solved points by
/// applying the generator to the local quadratic interpolant of u.
///
/// The interpolant's derivatives at the center are the standard central
/// stencils and do not depend on `fd_step`; the parameter is validated
/// against the grid spacing to keep the stencil assumption honest.
pub fn residual_check(
    problem: &PoissonProblem,
    solution: &PoissonSolution,
    fd_step: f64,
) -> SfResult<ResidualReport> {
    if problem.frozen.d1 != 1 {
        return Err(SfError::Argument(
            "residual check needs a one-dimensional fast state".into(),
        ));
    }
    let pts = &solution.points;
    if pts.len() < 3 {
        return Err(SfError::Argument(
            "residual check needs at least 3 grid points".into(),
        ));
    }
    let xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
    let h = xs[1] - xs[0];
    if !(h > 0.0) {
        return Err(SfError::Argument(
            "residual grid must be strictly increasing".into(),
        ));
    }
    for w in xs.windows(2) {
        if ((w[1] - w[0]) - h).abs() > 1e-9 * h {
            return Err(SfError::Argument(
                "residual check needs a uniform grid".into(),
            ));
        }
    }
    if !(fd_step > 0.0) || fd_step > h {
        return Err(SfError::Argument(format!(
            "fd_step must lie in (0, grid spacing {h}], got {fd_step}"
        )));
    }

    let mut buf = [0.0];
    let mut scratch = [0.0];
    let mut aval = [0.0];
    let mut residuals = Vec::with_capacity(xs.len() - 2);
    let mut f_sup = 0.0f64;
    let mut a_max = 0.0f64;
    let mut b_max = 0.0f64;
    for j in 1..xs.len() - 1 {
        let x = [xs[j]];
        problem.frozen.a(&x, &mut scratch, &mut aval)?;
        let mut bval = [0.0];
        problem.frozen.drift(&x, &mut bval)?;
        let fj = problem.eval_data(&x, &mut buf);
        let upp = (solution.u[j + 1] - 2.0 * solution.u[j] + solution.u[j - 1]) / (h * h);
        let up = (solution.u[j + 1] - solution.u[j - 1]) / (2.0 * h);
        residuals.push((aval[0] * upp + bval[0] * up + fj).abs());
        f_sup = f_sup.max(fj.abs());
        a_max = a_max.max(aval[0].abs());
        b_max = b_max.max(bval[0].abs());
    }
    let scale = if f_sup > 1e-300 { f_sup } else { 1.0 };
    let relative: Vec<f64> = residuals.iter().map(|r| r / scale).collect();
    let mut sorted = relative.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median_relative = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    let u_max = solution.u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let shift_tolerance =
        64.0 * f64::EPSILON * u_max.max(1.0) * (4.0 * a_max / (h * h) + 2.0 * b_max / h + 1.0);
    Ok(ResidualReport {
        residuals,
        relative,
        median_relative,
        pass: median_relative <= 0.1,
        shift_tolerance,
    })
}

/// Fitted polynomial growth of |u| in |x|; informational only, since the
/// theory guarantees some polynomial bound without naming the degree.
#[derive(Debug, Clone)]
pub struct GrowthProbe {
    /// Fitted log-log slope of |u| against |x|; NaN when degenerate.
    pub degree: f64,
    /// Set when u vanishes (or nearly) everywhere, leaving nothing to fit.
    pub degenerate: bool,
    /// The (radius, |u|) pairs that entered the fit.
    pub pairs: Vec<(f64, f64)>,
}

pub fn growth_probe(solution: &PoissonSolution) -> SfResult<GrowthProbe> {
    let radii: Vec<f64> = solution
        .points
        .iter()
        .map(|p| p.iter().map(|c| c * c).sum::<f64>().sqrt())
        .collect();
    let mut distinct: Vec<f64> = radii.iter().copied().filter(|&r| r > 0.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
    if distinct.len() < 4 {
        return Err(SfError::Argument(format!(
            "growth probe needs at least 4 distinct nonzero radii, got {}",
            distinct.len()
        )));
    }
    let u_max = solution.u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if u_max <= 1e-10 {
        return Ok(GrowthProbe {
            degree: f64::NAN,
            degenerate: true,
            pairs: Vec::new(),
        });
    }
    let mut pairs = Vec::new();
    for (j, &r) in radii.iter().enumerate() {
        let a = solution.u[j].abs();
        if r > 0.0 && a > 1e-12 * u_max {
            pairs.push((r, a));
        }
    }
    if pairs.len() < 4 {
        return Ok(GrowthProbe {
            degree: f64::NAN,
            degenerate: true,
            pairs,
        });
    }
    let k = pairs.len() as f64;
    let sx: f64 = pairs.iter().map(|p| p.0.ln()).sum();
    let sy: f64 = pairs.iter().map(|p| p.1.ln()).sum();
    let sxx: f64 = pairs.iter().map(|p| p.0.ln() * p.0.ln()).sum();
    let sxy: f64 = pairs.iter().map(|p| p.0.ln() * p.1.ln()).sum();
    let degree = (sxy - sx * sy / k) / (sxx - sx * sx / k);
    Ok(GrowthProbe {
        degree,
        degenerate: false,
        pairs,
    })
}

/// Monte Carlo estimate of E f(X_t) for the frozen dynamics started at x0:
/// (mean, standard error). `path_offset` shifts the noise stream indices so
/// different estimators on the same seed stay independent.
pub fn estimate_semigroup(
    frozen: &FrozenSystem,
    observable: &CoefficientField,
    x0: &[f64],
    t: f64,
    n_paths: usize,
    dt: f64,
    master_seed: u64,
    path_offset: u64,
) -> SfResult<(f64, f64)> {
    if observable.shape() != (OutputShape::Vector { rows: 1 }) {
        return Err(SfError::Structural(format!(
            "semigroup observable '{}' must be scalar",
            observable.name()
        )));
    }
    if !(t > 0.0) || !(dt > 0.0) || dt > t {
        return Err(SfError::Argument(format!(
            "need 0 < dt <= t, got dt = {dt}, t = {t}"
        )));
    }
    if n_paths < 2 {
        return Err(SfError::Argument("need at least 2 paths".into()));
    }
    let steps = (t / dt).round().max(1.0) as usize;
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut buf = [0.0];
    for p in 0..n_paths as u64 {
        let mut stepper = FrozenStepper::new(frozen, x0, dt, master_seed, path_offset + p)?;
        for _ in 0..steps {
            stepper.step()?;
        }
        observable.eval_unchecked(0.0, stepper.state(), &frozen.y, &mut buf);
        sum += buf[0];
        sq += buf[0] * buf[0];
    }
    let n = n_paths as f64;
    let mean = sum / n;
    let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
    let se = (var / n).sqrt();
    if !mean.is_finite() {
        return Err(SfError::Evaluation(format!(
            "semigroup estimate for '{}' is not finite",
            observable.name()
        )));
    }
    Ok((mean, se))
}
