//! Hypothesis checks for a slow-fast system: uniform ellipticity of both
//! diffusion blocks, the recurrence trend of the fast drift, declared
//! sup-norm bounds, and consistency of the `g_depends_on_x` flag.
//!
//! Coefficients are opaque callables, so everything is verified by
//! sampling on a deterministic probe set rather than symbolically.

use crate::error::{SfError, SfResult};
use crate::field::CoefficientField;
use crate::system::SlowFastSystem;
use nalgebra::DMatrix;

/// Ellipticity ratios at or above this are reported as violations.
pub const ELLIPTICITY_RATIO_LIMIT: f64 = 1e6;

/// Deterministic probe layout used by [`validate_system`].
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    /// Half-width of the probe box, centered at the origin.
    pub box_halfwidth: f64,
    /// Points per axis-aligned probe line.
    pub points_per_axis: usize,
    /// Strictly increasing radii for the recurrence probe.
    pub recurrence_radii: Vec<f64>,
    /// Times at which the time-dependent slow coefficients are sampled.
    pub t_samples: Vec<f64>,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            box_halfwidth: 3.0,
            points_per_axis: 64,
            recurrence_radii: vec![10.0, 20.0, 40.0, 80.0],
            t_samples: vec![0.0, 0.5, 1.0],
        }
    }
}

impl SamplingPlan {
    fn check(&self) -> SfResult<()> {
        if !(self.box_halfwidth > 0.0) || !self.box_halfwidth.is_finite() {
            return Err(SfError::Argument(format!(
                "box_halfwidth must be positive and finite, got {}",
                self.box_halfwidth
            )));
        }
        if self.points_per_axis < 2 {
            return Err(SfError::Argument(
                "points_per_axis must be at least 2".into(),
            ));
        }
        if self.recurrence_radii.is_empty() {
            return Err(SfError::Argument("recurrence_radii must be nonempty".into()));
        }
        for w in self.recurrence_radii.windows(2) {
            if !(w[1] > w[0]) {
                return Err(SfError::Argument(
                    "recurrence_radii must be strictly increasing".into(),
                ));
            }
        }
        if !(self.recurrence_radii[0] > 0.0) {
            return Err(SfError::Argument("recurrence_radii must be positive".into()));
        }
        if self.t_samples.is_empty() || self.t_samples.iter().any(|t| !t.is_finite()) {
            return Err(SfError::Argument(
                "t_samples must be nonempty and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of [`validate_system`]. `violations` is empty exactly when every
/// check passed.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    /// Max-to-min eigenvalue ratio of sigma sigma* over the probe set.
    pub lambda_hat: f64,
    /// Max-to-min eigenvalue ratio of G G* over the probe set.
    pub hg_lambda_hat: f64,
    /// Whether sup_y <x, b(x,y)> decreases along the probe radii and is
    /// negative at the largest one.
    pub recurrence_ok: bool,
    /// Human-readable descriptions of failed checks, with sample points.
    pub violations: Vec<String>,
    /// (radius, sup over directions and y probes of <x, b(x,y)>).
    pub recurrence_trend: Vec<(f64, f64)>,
    /// Probe points examined for the ellipticity scans.
    pub n_probes: usize,
    /// Non-fatal notes (skipped corner probes and the like).
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Plain-text rendering, one line per item.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("ellipticity ratio (fast block):  {:.6e}\n", self.lambda_hat));
        s.push_str(&format!("ellipticity ratio (slow block):  {:.6e}\n", self.hg_lambda_hat));
        s.push_str(&format!("recurrence trend ok:             {}\n", self.recurrence_ok));
        for (r, v) in &self.recurrence_trend {
            s.push_str(&format!("  radius {r:>6.1}: sup <x,b> = {v:.6e}\n"));
        }
        s.push_str(&format!("probe points:                    {}\n", self.n_probes));
        if self.violations.is_empty() {
            s.push_str("result: PASS\n");
        } else {
            s.push_str("result: FAIL\n");
            for v in &self.violations {
                s.push_str(&format!("  violation: {v}\n"));
            }
        }
        for w in &self.warnings {
            s.push_str(&format!("  note: {w}\n"));
        }
        s
    }
}

fn fmt_point(x: &[f64], y: &[f64]) -> String {
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|a| format!("{a:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    format!("x = [{}], y = [{}]", fmt(x), fmt(y))
}

/// Axis-aligned probe lines through the origin, plus the origin itself and
/// (in low dimension) the box corners, in the combined (x, y) space.
fn probe_points(
    d1: usize,
    d2: usize,
    plan: &SamplingPlan,
    warnings: &mut Vec<String>,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let d = d1 + d2;
    let hw = plan.box_halfwidth;
    let n = plan.points_per_axis;
    let mut pts = Vec::new();
    let split = |v: Vec<f64>| {
        let y = v[d1..].to_vec();
        let x = v[..d1].to_vec();
        (x, y)
    };
    pts.push(split(vec![0.0; d]));
    for axis in 0..d {
        for j in 0..n {
            let c = -hw + 2.0 * hw * j as f64 / (n - 1) as f64;
            let mut v = vec![0.0; d];
            v[axis] = c;
            pts.push(split(v));
        }
    }
    if d <= 12 {
        for mask in 0..(1u32 << d) {
            let mut v = vec![0.0; d];
            for (axis, slot) in v.iter_mut().enumerate() {
                *slot = if mask >> axis & 1 == 1 { hw } else { -hw };
            }
            pts.push(split(v));
        }
    } else {
        warnings.push(format!(
            "corner probes skipped: 2^{d} corners exceed the probe budget"
        ));
    }
    pts
}

fn gram(m: &[f64], rows: usize, out: &mut [f64]) {
    for r in 0..rows {
        for c in 0..rows {
            let mut acc = 0.0;
            for k in 0..rows {
                acc += m[r * rows + k] * m[c * rows + k];
            }
            out[r * rows + c] = acc;
        }
    }
}

fn eigen_range(m: &[f64], d: usize) -> (f64, f64) {
    if d == 1 {
        return (m[0], m[0]);
    }
    let eig = DMatrix::from_row_slice(d, d, m).symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn check_symmetry(m: &[f64], d: usize, label: &str, point: &str) -> SfResult<()> {
    let scale: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    for r in 0..d {
        for c in (r + 1)..d {
            if (m[r * d + c] - m[c * d + r]).abs() > 1e-12 * scale {
                return Err(SfError::Structural(format!(
                    "{label} is not symmetric at {point}"
                )));
            }
        }
    }
    Ok(())
}

fn check_sup_bound(field: &CoefficientField, values: &[f64], point: &str) -> SfResult<()> {
    if let Some(bound) = field.sup_bound() {
        let worst = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if worst > bound * (1.0 + 1e-12) {
            return Err(SfError::Contract(format!(
                "field '{}' declares sup bound {bound} but reaches {worst:.6e} at {point}",
                field.name()
            )));
        }
    }
    Ok(())
}

struct EigenScan {
    min_eig: f64,
    max_eig: f64,
    min_point: String,
}

impl EigenScan {
    fn new() -> Self {
        EigenScan {
            min_eig: f64::INFINITY,
            max_eig: f64::NEG_INFINITY,
            min_point: String::new(),
        }
    }

    fn absorb(&mut self, lo: f64, hi: f64, point: &str) {
        if lo < self.min_eig {
            self.min_eig = lo;
            self.min_point = point.to_string();
        }
        self.max_eig = self.max_eig.max(hi);
    }

    fn finish(&self, label: &str, violations: &mut Vec<String>) -> f64 {
        if self.min_eig <= 0.0 {
            violations.push(format!(
                "{label} is degenerate (eigenvalue {:.3e}) at {}",
                self.min_eig, self.min_point
            ));
            return f64::INFINITY;
        }
        let ratio = self.max_eig / self.min_eig;
        if ratio >= ELLIPTICITY_RATIO_LIMIT {
            violations.push(format!(
                "{label} ellipticity ratio {ratio:.3e} exceeds {ELLIPTICITY_RATIO_LIMIT:.0e} \
                 (worst point {})",
                self.min_point
            ));
        }
        ratio
    }
}

/// Sample the system's hypotheses on a deterministic probe set.
///
/// Both diffusion blocks must be uniformly elliptic over the probes, the
/// fast drift must show the recurrence trend `sup_y <x, b(x,y)>` strictly
/// decreasing over the probe radii and negative at the largest one, and a
/// `g_depends_on_x = false` declaration must survive a two-point constancy
/// check. Failed checks land in `violations`; a declared-but-violated
/// sup-norm bound or a malformed evaluation is a hard error instead.
pub fn validate_system(sys: &SlowFastSystem, plan: &SamplingPlan) -> SfResult<ValidationReport> {
    plan.check()?;
    let d1 = sys.d1;
    let d2 = sys.d2;
    let mut warnings = Vec::new();
    let mut violations = Vec::new();
    let probes = probe_points(d1, d2, plan, &mut warnings);

    let mut sig = vec![0.0; d1 * d1];
    let mut gm = vec![0.0; d2 * d2];
    let mut a = vec![0.0; d1 * d1];
    let mut h = vec![0.0; d2 * d2];
    let mut bv = vec![0.0; d1];
    let mut fv = vec![0.0; d2];

    let mut scan_a = EigenScan::new();
    let mut scan_h = EigenScan::new();

    for (x, y) in &probes {
        let point = fmt_point(x, y);
        sys.b.eval(0.0, x, y, &mut bv)?;
        check_sup_bound(&sys.b, &bv, &point)?;
        sys.sigma.eval(0.0, x, y, &mut sig)?;
        check_sup_bound(&sys.sigma, &sig, &point)?;
        gram(&sig, d1, &mut a);
        check_symmetry(&a, d1, "sigma sigma*", &point)?;
        let (lo, hi) = eigen_range(&a, d1);
        scan_a.absorb(lo, hi, &point);

        for &t in &plan.t_samples {
            let tp = format!("t = {t:.3}, {point}");
            sys.f.eval(t, x, y, &mut fv)?;
            check_sup_bound(&sys.f, &fv, &tp)?;
            sys.g.eval(t, x, y, &mut gm)?;
            check_sup_bound(&sys.g, &gm, &tp)?;
            gram(&gm, d2, &mut h);
            check_symmetry(&h, d2, "G G*", &tp)?;
            let (lo, hi) = eigen_range(&h, d2);
            scan_h.absorb(lo, hi, &tp);
        }
    }

    let lambda_hat = scan_a.finish("fast diffusion", &mut violations);
    let hg_lambda_hat = scan_h.finish("slow diffusion", &mut violations);

    // y probes for the recurrence scan and the constancy check: the slow
    // parts of the probe set, deduplicated by the axis structure (origin
    // plus the y axis lines).
    let y_probes: Vec<Vec<f64>> = {
        let mut v = vec![vec![0.0; d2]];
        let n = plan.points_per_axis;
        for axis in 0..d2 {
            for j in 0..n {
                let c = -plan.box_halfwidth
                    + 2.0 * plan.box_halfwidth * j as f64 / (n - 1) as f64;
                let mut y = vec![0.0; d2];
                y[axis] = c;
                v.push(y);
            }
        }
        v
    };

    let mut recurrence_trend = Vec::with_capacity(plan.recurrence_radii.len());
    for &r in &plan.recurrence_radii {
        let mut sup = f64::NEG_INFINITY;
        for axis in 0..d1 {
            for sign in [-1.0, 1.0] {
                let mut x = vec![0.0; d1];
                x[axis] = sign * r;
                for y in &y_probes {
                    sys.b.eval(0.0, &x, y, &mut bv)?;
                    let point = fmt_point(&x, y);
                    check_sup_bound(&sys.b, &bv, &point)?;
                    let dot: f64 = x.iter().zip(bv.iter()).map(|(a, b)| a * b).sum();
                    sup = sup.max(dot);
                }
            }
        }
        recurrence_trend.push((r, sup));
    }
    let decreasing = recurrence_trend.windows(2).all(|w| w[1].1 < w[0].1);
    let negative_tail = recurrence_trend.last().map(|&(_, v)| v < 0.0).unwrap_or(false);
    let recurrence_ok = decreasing && negative_tail;
    if !recurrence_ok {
        violations.push(format!(
            "recurrence trend not confirmed: sup <x, b> over radii {:?} is {:?}",
            plan.recurrence_radii,
            recurrence_trend.iter().map(|&(_, v)| v).collect::<Vec<_>>()
        ));
    }

    if !sys.g_depends_on_x {
        let hw = plan.box_halfwidth;
        let xa = vec![0.37 * hw; d1];
        let xb = vec![-0.61 * hw; d1];
        let mut ga = vec![0.0; d2 * d2];
        'outer: for &t in &plan.t_samples {
            for y in &y_probes {
                sys.g.eval(t, &xa, y, &mut ga)?;
                sys.g.eval(t, &xb, y, &mut gm)?;
                if ga != gm {
                    violations.push(format!(
                        "G declared independent of x but differs between two x probes \
                         at t = {t:.3}, y = [{}]",
                        y.iter()
                            .map(|a| format!("{a:.4}"))
                            .collect::<Vec<_>>()
                            .join(", ")
                    ));
                    break 'outer;
                }
            }
        }
    }

    Ok(ValidationReport {
        lambda_hat,
        hg_lambda_hat,
        recurrence_ok,
        violations,
        recurrence_trend,
        n_probes: probes.len(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{matrix_field, vector_field, HolderMeta, Reads};

    fn ou_like() -> SlowFastSystem {
        let b = vector_field("b", 1, Reads::XY, HolderMeta::lipschitz(), |_, x, y, out| {
            out[0] = y[0].tanh() - x[0];
        });
        let sigma = matrix_field("sigma", 1, 1, Reads::XY, HolderMeta::lipschitz(), |_, _, _, out| {
            out[0] = std::f64::consts::SQRT_2;
        });
        let f = vector_field("f", 1, Reads::ALL, HolderMeta::lipschitz(), |_, x, y, out| {
            out[0] = x[0].sin() - y[0];
        });
        let g = matrix_field("g", 1, 1, Reads::Y_ONLY, HolderMeta::lipschitz(), |_, _, _, out| {
            out[0] = 1.0;
        });
        SlowFastSystem::new(1, 1, b, sigma, f, g, 0.1, "ou-like").unwrap()
    }

    #[test]
    fn well_posed_system_passes_with_unit_ratios() {
        let report = validate_system(&ou_like(), &SamplingPlan::default()).unwrap();
        assert!(report.passed(), "violations: {:?}", report.violations);
        assert!((report.lambda_hat - 1.0).abs() < 1e-12);
        assert!((report.hg_lambda_hat - 1.0).abs() < 1e-12);
        assert!(report.recurrence_ok);
        assert!(report.lambda_hat >= 1.0);
        let text = report.render();
        assert!(text.contains("PASS"));
    }

    #[test]
    fn repelling_drift_fails_recurrence() {
        let mut sys = ou_like();
        sys.b = vector_field("b", 1, Reads::XY, HolderMeta::lipschitz(), |_, x, _, out| {
            out[0] = x[0];
        });
        let report = validate_system(&sys, &SamplingPlan::default()).unwrap();
        assert!(!report.recurrence_ok);
        assert!(!report.passed());
        assert!(report.violations.iter().any(|v| v.contains("recurrence")));
        // The trend values are increasing and positive.
        assert!(report.recurrence_trend.windows(2).all(|w| w[1].1 > w[0].1));
    }

    #[test]
    fn degenerate_diffusion_is_reported_at_the_point() {
        // sigma = diag(x_0, 1): zero eigenvalue on the x_0 = 0 slice.
        let b = vector_field("b", 2, Reads::XY, HolderMeta::lipschitz(), |_, x, _, out| {
            out[0] = -x[0];
            out[1] = -x[1];
        });
        let sigma = matrix_field("sigma", 2, 2, Reads::XY, HolderMeta::lipschitz(), |_, x, _, out| {
            out.fill(0.0);
            out[0] = x[0];
            out[3] = 1.0;
        });
        let f = vector_field("f", 1, Reads::ALL, HolderMeta::lipschitz(), |_, _, y, out| {
            out[0] = -y[0];
        });
        let g = matrix_field("g", 1, 1, Reads::Y_ONLY, HolderMeta::lipschitz(), |_, _, _, out| {
            out[0] = 1.0;
        });
        let sys = SlowFastSystem::new(2, 1, b, sigma, f, g, 0.1, "degenerate").unwrap();
        let report = validate_system(&sys, &SamplingPlan::default()).unwrap();
        assert!(!report.passed());
        assert!(report.lambda_hat.is_infinite());
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("fast diffusion") && v.contains("degenerate")));
    }

    #[test]
    fn huge_ellipticity_ratio_is_a_violation() {
        let mut sys = ou_like();
        sys.g = matrix_field("g", 1, 1, Reads::Y_ONLY, HolderMeta::lipschitz(), |_, _, y, out| {
            out[0] = 0.002 + 2.0 * y[0] * y[0];
        });
        // G spans [0.002, 18] over the probe box, so H spans ~ 8 orders.
        let report = validate_system(&sys, &SamplingPlan::default()).unwrap();
        assert!(report.hg_lambda_hat >= ELLIPTICITY_RATIO_LIMIT);
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("slow diffusion")));
    }

    #[test]
    fn violated_sup_bound_is_a_hard_error() {
        let mut sys = ou_like();
        sys.f = vector_field("f", 1, Reads::ALL, HolderMeta::lipschitz(), |_, _, y, out| {
            out[0] = y[0];
        })
        .with_sup_bound(0.5);
        let err = validate_system(&sys, &SamplingPlan::default()).unwrap_err();
        assert!(matches!(err, SfError::Contract(_)), "got {err:?}");
    }

    #[test]
    fn undeclared_x_dependence_of_g_is_caught() {
        let mut sys = ou_like();
        // Declared as reading y only, but the closure peeks at x.
        sys.g = matrix_field("g", 1, 1, Reads::Y_ONLY, HolderMeta::lipschitz(), |_, x, _, out| {
            out[0] = 1.0 + 0.1 * x[0];
        });
        assert!(!sys.g.reads().x);
        let report = validate_system(&sys, &SamplingPlan::default()).unwrap();
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("declared independent of x")));
    }

    #[test]
    fn ratio_matches_direct_recomputation() {
        // Scalar slow diffusion with known value at every probe: the ratio
        // must equal (max value / min value)^2 over the same probe set.
        let val = |x: &[f64], y: &[f64]| {
            (1.0 + 0.5 * (-x[0] * x[0]).exp() + 0.5 * y[0].tanh() * y[0].tanh()).sqrt()
        };
        let mut sys = ou_like();
        sys.g = matrix_field("g", 1, 1, Reads::XY, HolderMeta::lipschitz(), move |_, x, y, out| {
            out[0] = val(x, y);
        });
        sys.g_depends_on_x = true;
        let plan = SamplingPlan::default();
        let mut warnings = Vec::new();
        let probes = probe_points(1, 1, &plan, &mut warnings);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (x, y) in &probes {
            let v = val(x, y);
            lo = lo.min(v * v);
            hi = hi.max(v * v);
        }
        let report = validate_system(&sys, &plan).unwrap();
        let expected = hi / lo;
        assert!(
            (report.hg_lambda_hat - expected).abs() <= 0.01 * expected,
            "ratio {} vs direct {expected}",
            report.hg_lambda_hat
        );
    }

    #[test]
    fn plan_validation_rejects_bad_radii() {
        let mut plan = SamplingPlan::default();
        plan.recurrence_radii = vec![10.0, 10.0];
        assert!(validate_system(&ou_like(), &plan).is_err());
        plan.recurrence_radii = vec![];
        assert!(validate_system(&ou_like(), &plan).is_err());
    }

    #[test]
    fn validation_is_deterministic() {
        let a = validate_system(&ou_like(), &SamplingPlan::default()).unwrap();
        let b = validate_system(&ou_like(), &SamplingPlan::default()).unwrap();
        assert_eq!(a.lambda_hat.to_bits(), b.lambda_hat.to_bits());
        assert_eq!(a.hg_lambda_hat.to_bits(), b.hg_lambda_hat.to_bits());
        assert_eq!(a.recurrence_trend, b.recurrence_trend);
    }
}
