//! Invariant-measure estimation for the frozen fast equation and the
//! averaged (effective) slow coefficients built from it.
//!
//! The invariant measure is sampled by time-averaging one long frozen
//! trajectory: burn-in, then every `thinning`-th state is kept. Standard
//! errors of sample averages account for the chain's autocorrelation via
//! the initial-monotone-sequence estimator of the integrated
//! autocorrelation time, so a slowly mixing chain reports honestly wide
//! uncertainties instead of optimistic ones.

use crate::error::{SfError, SfResult};
use crate::field::CoefficientField;
use crate::integrate::{EffectiveDynamics, FrozenStepper};
use crate::linalg::spd_sqrt;
use crate::noise::mix64;
use crate::system::{FrozenSystem, SlowFastSystem};
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

/// Largest |y - y_param| (per coordinate) accepted when averaging a field
/// against a measure estimated at a nearby slow state.
pub const Y_MATCH_TOL: f64 = 1e-2;

/// Sampling schedule for one invariant-measure estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureConfig {
    /// Chain step size.
    pub dt: f64,
    /// Time discarded before sampling starts.
    pub burn_in: f64,
    /// Number of kept samples.
    pub count: usize,
    /// Chain steps between kept samples.
    pub thinning: usize,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig {
            dt: 1e-3,
            burn_in: 10.0,
            count: 10_000,
            thinning: 10,
        }
    }
}

impl MeasureConfig {
    fn check(&self) -> SfResult<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(SfError::Argument(format!(
                "measure dt must be positive and finite, got {}",
                self.dt
            )));
        }
        if !(self.burn_in >= 0.0) || !self.burn_in.is_finite() {
            return Err(SfError::Argument(format!(
                "burn_in must be nonnegative and finite, got {}",
                self.burn_in
            )));
        }
        if self.count == 0 {
            return Err(SfError::Argument("sample count must be at least 1".into()));
        }
        if self.thinning == 0 {
            return Err(SfError::Argument("thinning must be at least 1".into()));
        }
        Ok(())
    }
}

/// Thinned sample cloud approximating the invariant measure of a frozen
/// system, with its sampling provenance.
#[derive(Debug, Clone)]
pub struct InvariantMeasureEstimate {
    /// Slow state the fast equation was frozen at.
    pub y_param: Vec<f64>,
    d1: usize,
    samples: Vec<f64>,
    /// Chain step size used.
    pub dt: f64,
    /// Burn-in time discarded.
    pub burn_in: f64,
    /// Chain steps between kept samples.
    pub thinning: usize,
    /// Number of kept samples.
    pub count: usize,
    /// Effective sample size of the first coordinate.
    pub ess: f64,
    /// Time between kept samples.
    pub spacing: f64,
    /// Non-fatal diagnostics (slow mixing).
    pub warnings: Vec<String>,
}

impl InvariantMeasureEstimate {
    /// Wrap an externally produced sample cloud (flat, sample-major).
    pub fn from_samples(
        y_param: Vec<f64>,
        d1: usize,
        samples: Vec<f64>,
        spacing: f64,
    ) -> SfResult<Self> {
        if d1 == 0 {
            return Err(SfError::Argument("d1 must be positive".into()));
        }
        if samples.len() % d1 != 0 {
            return Err(SfError::Structural(format!(
                "sample buffer length {} is not a multiple of d1 = {d1}",
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(SfError::Numerical("non-finite sample in measure".into()));
        }
        let count = samples.len() / d1;
        let ess = if count == 0 {
            0.0
        } else {
            let first: Vec<f64> = samples.iter().step_by(d1).copied().collect();
            effective_sample_size(&first)
        };
        Ok(InvariantMeasureEstimate {
            y_param,
            d1,
            samples,
            dt: f64::NAN,
            burn_in: f64::NAN,
            thinning: 1,
            count,
            ess,
            spacing,
            warnings: Vec::new(),
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.d1
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.d1..(i + 1) * self.d1]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.d1)
    }

    /// Per-coordinate sample mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d1];
        for s in self.samples() {
            for (acc, v) in m.iter_mut().zip(s) {
                *acc += v;
            }
        }
        for v in m.iter_mut() {
            *v /= self.count as f64;
        }
        m
    }

    /// Sample average of `f` with an autocorrelation-aware standard error.
    pub fn expectation<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> SfResult<(f64, f64)> {
        if self.count == 0 {
            return Err(SfError::Argument("empty sample set".into()));
        }
        let series: Vec<f64> = self.samples().map(|s| f(s)).collect();
        if series.iter().any(|v| !v.is_finite()) {
            return Err(SfError::Evaluation(
                "test function returned a non-finite value".into(),
            ));
        }
        Ok(mean_and_se(&series))
    }

    /// Copy of coordinate `c` as a contiguous series (chain order).
    pub fn coordinate_series(&self, c: usize) -> Vec<f64> {
        self.samples[c..].iter().step_by(self.d1).copied().collect()
    }

    /// Dump the samples as CSV: `index, x_0, .., x_{d1-1}`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> SfResult<()> {
        write!(w, "index")?;
        for c in 0..self.d1 {
            write!(w, ",x_{c}")?;
        }
        writeln!(w)?;
        for (i, s) in self.samples().enumerate() {
            write!(w, "{i}")?;
            for v in s {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn mean_and_se(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let tau = autocorr_time(series);
    (mean, (var * tau / n).sqrt())
}

/// Integrated autocorrelation time by the initial-monotone-sequence rule:
/// autocovariances are summed in adjacent pairs, the running pair sums are
/// forced non-increasing, and summation stops at the first non-positive
/// pair. Always at least 1; at most `2 * lag cap`.
pub fn autocorr_time(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return 1.0;
    }
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let acov = |k: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n - k {
            s += (series[i] - mean) * (series[i + k] - mean);
        }
        s / nf
    };
    let c0 = acov(0);
    if c0 <= 0.0 {
        return 1.0;
    }
    let max_lag = (n / 2).min(2000);
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0usize;
    loop {
        let l0 = 2 * m;
        let l1 = 2 * m + 1;
        if l1 > max_lag {
            break;
        }
        let gamma = (acov(l0) + acov(l1)) / c0;
        if gamma <= 0.0 {
            break;
        }
        let gamma = gamma.min(prev);
        sum += gamma;
        prev = gamma;
        m += 1;
    }
    (2.0 * sum - 1.0).max(1.0)
}

/// `n / autocorrelation time`: how many independent draws the correlated
/// series is worth.
pub fn effective_sample_size(series: &[f64]) -> f64 {
    series.len() as f64 / autocorr_time(series)
}

/// Fraction of `count` below which a mixing warning is attached.
const MIXING_WARNING_FRACTION: f64 = 0.01;

/// Estimate the invariant measure of `frozen` by time-averaging one chain
/// started at the origin. The noise stream is derived from
/// `(master_seed, path_index)` on a channel reserved for sampling, so
/// estimates never share randomness with simulated paths.
pub fn estimate_invariant_measure(
    frozen: &FrozenSystem,
    config: &MeasureConfig,
    master_seed: u64,
    path_index: u64,
) -> SfResult<InvariantMeasureEstimate> {
    config.check()?;
    let d1 = frozen.d1;
    let x0 = vec![0.0; d1];
    let mut stepper = FrozenStepper::with_channel(
        frozen,
        &x0,
        config.dt,
        master_seed,
        path_index,
        crate::noise::Channel::Aux(0),
    )?;
    let burn_steps = (config.burn_in / config.dt).round() as usize;
    for _ in 0..burn_steps {
        stepper.step()?;
    }
    let mut samples = Vec::with_capacity(config.count * d1);
    for _ in 0..config.count {
        for _ in 0..config.thinning {
            stepper.step()?;
        }
        samples.extend_from_slice(stepper.state());
    }
    let first: Vec<f64> = samples.iter().step_by(d1).copied().collect();
    let ess = effective_sample_size(&first);
    let mut warnings = Vec::new();
    if ess < MIXING_WARNING_FRACTION * config.count as f64 {
        warnings.push(format!(
            "slow mixing: effective sample size {ess:.1} is below 1% of {} kept samples; \
             increase thinning or burn-in",
            config.count
        ));
    }
    Ok(InvariantMeasureEstimate {
        y_param: frozen.y.clone(),
        d1,
        samples,
        dt: config.dt,
        burn_in: config.burn_in,
        thinning: config.thinning,
        count: config.count,
        ess,
        spacing: config.dt * config.thinning as f64,
        warnings,
    })
}

fn check_measure_match(
    y: &[f64],
    mu: &InvariantMeasureEstimate,
    d2: usize,
) -> SfResult<()> {
    if y.len() != d2 || mu.y_param.len() != d2 {
        return Err(SfError::Structural(format!(
            "slow state dim {} and measure parameter dim {} must both be {d2}",
            y.len(),
            mu.y_param.len()
        )));
    }
    if mu.count == 0 {
        return Err(SfError::Argument("empty sample set".into()));
    }
    let dist = y
        .iter()
        .zip(&mu.y_param)
        .fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
    if dist > Y_MATCH_TOL + 1e-12 {
        return Err(SfError::Argument(format!(
            "measure was estimated at a slow state {dist:.3e} away from the query \
             (tolerance {Y_MATCH_TOL:.0e})"
        )));
    }
    Ok(())
}

/// Average the slow drift over the measure: sample mean of `F(t, x_i, y)`
/// plus per-component standard errors.
pub fn averaged_drift(
    f_field: &CoefficientField,
    t: f64,
    y: &[f64],
    mu: &InvariantMeasureEstimate,
) -> SfResult<(Vec<f64>, Vec<f64>)> {
    let d2 = y.len();
    check_measure_match(y, mu, d2)?;
    if f_field.shape().len() != d2 {
        return Err(SfError::Structural(format!(
            "drift field produces {} values, expected {d2}",
            f_field.shape().len()
        )));
    }
    let n = mu.count();
    let mut series = vec![vec![0.0; n]; d2];
    let mut buf = vec![0.0; d2];
    for (i, x) in mu.samples().enumerate() {
        f_field.eval(t, x, y, &mut buf)?;
        for c in 0..d2 {
            series[c][i] = buf[c];
        }
    }
    let mut mean = vec![0.0; d2];
    let mut se = vec![0.0; d2];
    for c in 0..d2 {
        let (m, s) = mean_and_se(&series[c]);
        mean[c] = m;
        se[c] = s;
    }
    Ok((mean, se))
}

/// Average the slow diffusion over the measure:
/// `spd_sqrt(mean of G(t, x_i, y) G(t, x_i, y)*)`, row-major, plus the
/// standard error of every averaged Gram entry.
pub fn averaged_diffusion(
    g_field: &CoefficientField,
    t: f64,
    y: &[f64],
    mu: &InvariantMeasureEstimate,
) -> SfResult<(Vec<f64>, Vec<f64>)> {
    let d2 = y.len();
    check_measure_match(y, mu, d2)?;
    if g_field.shape().len() != d2 * d2 {
        return Err(SfError::Structural(format!(
            "diffusion field produces {} values, expected {}",
            g_field.shape().len(),
            d2 * d2
        )));
    }
    let n = mu.count();
    let mut series = vec![vec![0.0; n]; d2 * d2];
    let mut gm = vec![0.0; d2 * d2];
    for (i, x) in mu.samples().enumerate() {
        g_field.eval(t, x, y, &mut gm)?;
        for r in 0..d2 {
            for c in 0..d2 {
                let mut acc = 0.0;
                for k in 0..d2 {
                    acc += gm[r * d2 + k] * gm[c * d2 + k];
                }
                series[r * d2 + c][i] = acc;
            }
        }
    }
    let mut mean_gram = vec![0.0; d2 * d2];
    let mut se = vec![0.0; d2 * d2];
    for e in 0..d2 * d2 {
        let (m, s) = mean_and_se(&series[e]);
        mean_gram[e] = m;
        se[e] = s;
    }
    let mut root = vec![0.0; d2 * d2];
    spd_sqrt(&mean_gram, d2, &mut root)?;
    Ok((root, se))
}

/// Where an effective system's coefficients come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Analytically known averaged coefficients.
    ClosedForm,
    /// Coefficients computed by cached invariant-measure averaging.
    NumericallyAveraged,
}

/// Configuration of the numerically averaged effective system.
#[derive(Debug, Clone)]
pub struct AveragingOptions {
    /// Per-node invariant-measure schedule.
    pub measure: MeasureConfig,
    /// Cache grid pitch in the slow variable.
    pub h_cache: f64,
    /// Seed for the per-node sampling streams.
    pub master_seed: u64,
}

impl Default for AveragingOptions {
    fn default() -> Self {
        AveragingOptions {
            measure: MeasureConfig {
                dt: 1e-3,
                burn_in: 5.0,
                count: 4000,
                thinning: 50,
            },
            h_cache: 1e-2,
            master_seed: 0x5eed_ab1e,
        }
    }
}

struct NodeValue {
    f_bar: Vec<f64>,
    g_sqrt: Vec<f64>,
}

/// Effective slow equation built by on-demand averaging on a y-grid of
/// pitch `h_cache`, with multilinear interpolation between grid nodes.
/// Node values are cached; distinct nodes draw disjoint noise streams
/// derived from the node coordinates, so values are independent of query
/// order and worker count.
pub struct AveragedEffective {
    sys: SlowFastSystem,
    opts: AveragingOptions,
    t_keyed: bool,
    measures: RwLock<HashMap<Vec<i64>, Arc<InvariantMeasureEstimate>>>,
    values: RwLock<HashMap<(u64, Vec<i64>), Arc<NodeValue>>>,
}

impl AveragedEffective {
    fn new(sys: SlowFastSystem, opts: AveragingOptions) -> SfResult<Self> {
        if !(opts.h_cache > 0.0) || !opts.h_cache.is_finite() {
            return Err(SfError::Argument(format!(
                "h_cache must be positive and finite, got {}",
                opts.h_cache
            )));
        }
        opts.measure.check()?;
        let t_keyed = sys.f.reads().t || sys.g.reads().t;
        Ok(AveragedEffective {
            sys,
            opts,
            t_keyed,
            measures: RwLock::new(HashMap::new()),
            values: RwLock::new(HashMap::new()),
        })
    }

    fn node_y(&self, node: &[i64]) -> Vec<f64> {
        node.iter()
            .map(|&k| k as f64 * self.opts.h_cache)
            .collect()
    }

    fn node_path_index(node: &[i64]) -> u64 {
        let mut h = 0x9e37_79b9_7f4a_7c15u64;
        for &k in node {
            h = mix64(h ^ (k as u64));
        }
        h
    }

    fn measure_at(&self, node: &[i64]) -> SfResult<Arc<InvariantMeasureEstimate>> {
        if let Some(m) = self.measures.read().unwrap().get(node) {
            return Ok(m.clone());
        }
        let y = self.node_y(node);
        let frozen = self.sys.freeze(&y)?;
        let mu = estimate_invariant_measure(
            &frozen,
            &self.opts.measure,
            self.opts.master_seed,
            Self::node_path_index(node),
        )?;
        let mut map = self.measures.write().unwrap();
        let entry = map
            .entry(node.to_vec())
            .or_insert_with(|| Arc::new(mu));
        Ok(entry.clone())
    }

    fn node_value(&self, t: f64, node: &[i64]) -> SfResult<Arc<NodeValue>> {
        let t_key = if self.t_keyed { t.to_bits() } else { 0 };
        let key = (t_key, node.to_vec());
        if let Some(v) = self.values.read().unwrap().get(&key) {
            return Ok(v.clone());
        }
        let mu = self.measure_at(node)?;
        let y = self.node_y(node);
        let (f_bar, _) = averaged_drift(&self.sys.f, t, &y, &mu)?;
        let (g_sqrt, _) = averaged_diffusion(&self.sys.g, t, &y, &mu)?;
        let mut map = self.values.write().unwrap();
        let entry = map
            .entry(key)
            .or_insert_with(|| Arc::new(NodeValue { f_bar, g_sqrt }));
        Ok(entry.clone())
    }

    fn interpolate(&self, t: f64, y: &[f64], drift: bool, out: &mut [f64]) -> SfResult<()> {
        let d2 = self.sys.d2;
        let h = self.opts.h_cache;
        let mut base = vec![0i64; d2];
        let mut frac = vec![0.0; d2];
        for i in 0..d2 {
            let u = y[i] / h;
            let fl = u.floor();
            base[i] = fl as i64;
            frac[i] = u - fl;
        }
        out.fill(0.0);
        let mut node = vec![0i64; d2];
        for corner in 0..(1usize << d2) {
            let mut w = 1.0;
            for i in 0..d2 {
                if corner >> i & 1 == 1 {
                    node[i] = base[i] + 1;
                    w *= frac[i];
                } else {
                    node[i] = base[i];
                    w *= 1.0 - frac[i];
                }
            }
            if w == 0.0 {
                continue;
            }
            let nv = self.node_value(t, &node)?;
            let vals = if drift { &nv.f_bar } else { &nv.g_sqrt };
            for (o, v) in out.iter_mut().zip(vals) {
                *o += w * v;
            }
        }
        Ok(())
    }

    /// Estimate every node needed to cover `[lo, hi]` (per coordinate) at
    /// the given times, in parallel. Returns the number of nodes primed.
    pub fn prime_cache(&self, lo: &[f64], hi: &[f64], ts: &[f64]) -> SfResult<usize> {
        use rayon::prelude::*;
        let d2 = self.sys.d2;
        if lo.len() != d2 || hi.len() != d2 {
            return Err(SfError::Argument("bounds must have the slow dimension".into()));
        }
        let h = self.opts.h_cache;
        let mut ranges = Vec::with_capacity(d2);
        for i in 0..d2 {
            let a = (lo[i] / h).floor() as i64;
            let b = (hi[i] / h).ceil() as i64;
            if b < a {
                return Err(SfError::Argument("upper bound below lower bound".into()));
            }
            ranges.push(a..=b);
        }
        let mut nodes = vec![Vec::new()];
        for r in &ranges {
            let mut next = Vec::new();
            for partial in &nodes {
                for k in r.clone() {
                    let mut n = partial.clone();
                    n.push(k);
                    next.push(n);
                }
            }
            nodes = next;
        }
        let ts = if self.t_keyed { ts.to_vec() } else { vec![0.0] };
        nodes
            .par_iter()
            .try_for_each(|node| -> SfResult<()> {
                for &t in &ts {
                    self.node_value(t, node)?;
                }
                Ok(())
            })?;
        Ok(nodes.len())
    }
}

type ClosedFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

enum EffectiveKind {
    Closed { drift: ClosedFn, diffusion: ClosedFn },
    Averaged(AveragedEffective),
}

/// The slow equation with averaged coefficients, either closed-form or
/// numerically averaged. Implements [`EffectiveDynamics`], so it can be
/// integrated directly.
pub struct EffectiveSystem {
    d2: usize,
    provenance: Provenance,
    kind: EffectiveKind,
}

impl EffectiveSystem {
    /// Wrap analytically known averaged coefficients. `drift` fills a
    /// d2-vector, `diffusion` a row-major d2 x d2 matrix.
    pub fn closed_form<F, G>(d2: usize, drift: F, diffusion: G) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        G: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        EffectiveSystem {
            d2,
            provenance: Provenance::ClosedForm,
            kind: EffectiveKind::Closed {
                drift: Arc::new(drift),
                diffusion: Arc::new(diffusion),
            },
        }
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Access the averaging cache of a numerically averaged system.
    pub fn averaged(&self) -> Option<&AveragedEffective> {
        match &self.kind {
            EffectiveKind::Averaged(a) => Some(a),
            EffectiveKind::Closed { .. } => None,
        }
    }
}

impl EffectiveDynamics for EffectiveSystem {
    fn dim(&self) -> usize {
        self.d2
    }

    fn drift(&self, t: f64, y: &[f64], out: &mut [f64]) -> SfResult<()> {
        match &self.kind {
            EffectiveKind::Closed { drift, .. } => {
                drift(t, y, out);
                Ok(())
            }
            EffectiveKind::Averaged(a) => a.interpolate(t, y, true, out),
        }
    }

    fn diffusion(&self, t: f64, y: &[f64], out: &mut [f64]) -> SfResult<()> {
        match &self.kind {
            EffectiveKind::Closed { diffusion, .. } => {
                diffusion(t, y, out);
                Ok(())
            }
            EffectiveKind::Averaged(a) => a.interpolate(t, y, false, out),
        }
    }
}

/// Build the numerically averaged effective system for `sys`.
pub fn build_effective_system(
    sys: &SlowFastSystem,
    opts: AveragingOptions,
) -> SfResult<EffectiveSystem> {
    let d2 = sys.d2;
    Ok(EffectiveSystem {
        d2,
        provenance: Provenance::NumericallyAveraged,
        kind: EffectiveKind::Averaged(AveragedEffective::new(sys.clone(), opts)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{matrix_field, vector_field, HolderMeta, Reads};
    use crate::integrate::{simulate_effective, StepPlan};
    use crate::noise::{Channel, NoiseSource, StreamId};

    fn frozen_ou(mean: f64) -> FrozenSystem {
        let b = vector_field("b", 1, Reads::XY, HolderMeta::lipschitz(), move |_, x, _, out| {
            out[0] = mean - x[0];
        });
        let sigma = matrix_field("sigma", 1, 1, Reads::XY, HolderMeta::lipschitz(), |_, _, _, out| {
            out[0] = std::f64::consts::SQRT_2;
        });
        FrozenSystem {
            d1: 1,
            b,
            sigma,
            y: vec![mean.atanh()],
        }
    }

    fn gaussian_samples(m: f64, n: usize, seed: u64) -> InvariantMeasureEstimate {
        let src = NoiseSource::new(
            seed,
            StreamId {
                path_index: 0,
                channel: Channel::Aux(7),
            },
            1,
        );
        let mut z = [0.0];
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            src.gaussians_at(i as u64, &mut z);
            samples.push(m + z[0]);
        }
        InvariantMeasureEstimate::from_samples(vec![m], 1, samples, 1.0).unwrap()
    }

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    /// E sin(X) for X ~ N(m, 1), by quadrature.
    fn e_sin_quadrature(m: f64) -> f64 {
        let density = move |x: f64| {
            ((x - m) * (x - m) / -2.0).exp() / (std::f64::consts::TAU).sqrt()
        };
        simpson(|x| x.sin() * density(x), m - 8.0, m + 8.0, 4000)
    }

    #[test]
    fn gaussian_sine_closed_form_matches_quadrature() {
        for &m in &[-1.3f64, 0.0, 0.7617, 2.0] {
            let closed = m.sin() * (-0.5f64).exp();
            let quad = e_sin_quadrature(m);
            assert!(
                (closed - quad).abs() < 1e-10,
                "m = {m}: closed {closed} vs quadrature {quad}"
            );
        }
    }

    #[test]
    fn gaussian_squared_exponential_closed_form_matches_quadrature() {
        // E exp(-X^2) for X ~ N(m,1) is exp(-m^2/3)/sqrt(3).
        for &m in &[-0.8f64, 0.0, 1.1] {
            let closed = (-m * m / 3.0).exp() / 3.0f64.sqrt();
            let density = move |x: f64| {
                ((x - m) * (x - m) / -2.0).exp() / (std::f64::consts::TAU).sqrt()
            };
            let quad = simpson(|x| (-x * x).exp() * density(x), m - 8.0, m + 8.0, 4000);
            assert!(
                (closed - quad).abs() < 1e-10,
                "m = {m}: closed {closed} vs quadrature {quad}"
            );
        }
    }

    #[test]
    fn ou_measure_mean_and_variance() {
        let m = 1.0f64.tanh();
        let frozen = frozen_ou(m);
        let config = MeasureConfig {
            dt: 1e-3,
            burn_in: 10.0,
            count: 100_000,
            thinning: 50,
        };
        let mu = estimate_invariant_measure(&frozen, &config, 11, 0).unwrap();
        assert_eq!(mu.count(), 100_000);
        assert!(mu.ess <= mu.count as f64);
        let (mean, se) = mu.expectation(|x| x[0]).unwrap();
        assert!(
            (mean - m).abs() < 3.0 * se,
            "mean {mean} vs {m} (se {se:.2e})"
        );
        let (second, _) = mu.expectation(|x| (x[0] - mean) * (x[0] - mean)).unwrap();
        assert!(
            (second - 1.0).abs() < 0.05,
            "variance {second} not within 5% of 1"
        );
        assert!(mu.warnings.is_empty(), "{:?}", mu.warnings);
    }

    #[test]
    fn quartic_gradient_chain_matches_stationary_density() {
        // b = -x^3, sigma = sqrt(2): stationary density is proportional to
        // exp(-x^4 / 4). Compare the empirical CDF against a quadrature CDF.
        let b = vector_field("b", 1, Reads::XY, HolderMeta::lipschitz(), |_, x, _, out| {
            out[0] = -x[0] * x[0] * x[0];
        });
        let sigma = matrix_field("sigma", 1, 1, Reads::XY, HolderMeta::lipschitz(), |_, _, _, out| {
            out[0] = std::f64::consts::SQRT_2;
        });
        let frozen = FrozenSystem {
            d1: 1,
            b,
            sigma,
            y: vec![0.0],
        };
        let config = MeasureConfig {
            dt: 1e-3,
            burn_in: 10.0,
            count: 40_000,
            thinning: 500,
        };
        let mu = estimate_invariant_measure(&frozen, &config, 29, 0).unwrap();
        // Quadrature CDF on a fine grid.
        let density = |x: f64| (-x * x * x * x / 4.0).exp();
        let lo = -4.0;
        let hi = 4.0;
        let n_grid = 4001;
        let h = (hi - lo) / (n_grid - 1) as f64;
        let mut cdf = vec![0.0; n_grid];
        for i in 1..n_grid {
            let x0 = lo + (i - 1) as f64 * h;
            let x1 = lo + i as f64 * h;
            cdf[i] = cdf[i - 1] + 0.5 * h * (density(x0) + density(x1));
        }
        let total = cdf[n_grid - 1];
        for v in cdf.iter_mut() {
            *v /= total;
        }
        let cdf_at = |x: f64| -> f64 {
            if x <= lo {
                return 0.0;
            }
            if x >= hi {
                return 1.0;
            }
            let u = (x - lo) / h;
            let i = u.floor() as usize;
            let frac = u - i as f64;
            cdf[i] + frac * (cdf[i + 1] - cdf[i])
        };
        let mut xs: Vec<f64> = mu.samples().map(|s| s[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let mut d = 0.0f64;
        for (i, &x) in xs.iter().enumerate() {
            let f = cdf_at(x);
            d = d.max((f - i as f64 / n).abs());
            d = d.max(((i + 1) as f64 / n - f).abs());
        }
        assert!(d < 0.02, "KS distance {d}");
    }

    #[test]
    fn autocorr_time_of_iid_series_is_one() {
        let n = 50_000;
        let src = NoiseSource::new(
            3,
            StreamId {
                path_index: 9,
                channel: Channel::Aux(2),
            },
            1,
        );
        let mut z = [0.0];
        let series: Vec<f64> = (0..n)
            .map(|i| {
                src.gaussians_at(i as u64, &mut z);
                z[0]
            })
            .collect();
        let tau = autocorr_time(&series);
        assert!((0.8..1.3).contains(&tau), "tau {tau}");
        let ess = effective_sample_size(&series);
        assert!(ess > 0.75 * n as f64);
    }

    #[test]
    fn autocorr_time_of_ar1_matches_closed_form() {
        // x_{k+1} = phi x_k + sqrt(1 - phi^2) z_k has integrated
        // autocorrelation time (1 + phi) / (1 - phi).
        let phi = 0.9f64;
        let n = 200_000;
        let src = NoiseSource::new(
            4,
            StreamId {
                path_index: 2,
                channel: Channel::Aux(2),
            },
            1,
        );
        let mut z = [0.0];
        let mut series = Vec::with_capacity(n);
        let mut x = 0.0;
        for i in 0..n {
            src.gaussians_at(i as u64, &mut z);
            x = phi * x + (1.0 - phi * phi).sqrt() * z[0];
            series.push(x);
        }
        let tau = autocorr_time(&series);
        let expected = (1.0 + phi) / (1.0 - phi);
        assert!(
            (tau - expected).abs() < 0.4 * expected,
            "tau {tau} vs {expected}"
        );
    }

    #[test]
    fn constant_series_has_unit_autocorr_time() {
        assert_eq!(autocorr_time(&[2.5; 100]), 1.0);
        assert_eq!(autocorr_time(&[1.0, 2.0]), 1.0);
    }

    #[test]
    fn averaged_drift_of_constant_is_exact() {
        let mu = gaussian_samples(0.3, 500, 5);
        let f = vector_field("f", 1, Reads::ALL, HolderMeta::lipschitz(), |_, _, _, out| {
            out[0] = 2.75;
        });
        let y = mu.y_param.clone();
        let (mean, se) = averaged_drift(&f, 0.0, &y, &mu).unwrap();
        assert_eq!(mean, vec![2.75]);
        assert_eq!(se, vec![0.0]);
    }

    #[test]
    fn averaged_drift_first_moment() {
        let m = 0.7617;
        let mu = gaussian_samples(m, 40_000, 6);
        let f = vector_field("f", 1, Reads::ALL, HolderMeta::lipschitz(), |_, x, _, out| {
            out[0] = x[0];
        });
        let y = mu.y_param.clone();
        let (mean, se) = averaged_drift(&f, 0.0, &y, &mu).unwrap();
        assert!(
            (mean[0] - m).abs() < 3.0 * se[0],
            "mean {} vs {m} (se {:.2e})",
            mean[0],
            se[0]
        );
    }

    #[test]
    fn averaged_drift_sine_matches_gaussian_integral() {
        let m = 0.7617;
        let mu = gaussian_samples(m, 40_000, 7);
        let f = vector_field("f", 1, Reads::ALL, HolderMeta::lipschitz(), |_, x, _, out| {
            out[0] = x[0].sin();
        });
        let y = mu.y_param.clone();
        let (mean, se) = averaged_drift(&f, 0.0, &y, &mu).unwrap();
        let oracle = e_sin_quadrature(m);
        assert!(
            (mean[0] - oracle).abs() < 4.0 * se[0],
            "mean {} vs oracle {oracle} (se {:.2e})",
            mean[0],
            se[0]
        );
    }

    #[test]
    fn averaged_drift_rejects_mismatched_measure() {
        let mu = gaussian_samples(0.0, 100, 8);
        let f = vector_field("f", 1, Reads::ALL, HolderMeta::lipschitz(), |_, _, _, out| {
            out[0] = 0.0;
        });
        let err = averaged_drift(&f, 0.0, &[0.5], &mu).unwrap_err();
        assert!(matches!(err, SfError::Argument(_)));
        let empty = InvariantMeasureEstimate::from_samples(vec![0.0], 1, vec![], 1.0).unwrap();
        let err = averaged_drift(&f, 0.0, &[0.0], &empty).unwrap_err();
        assert!(matches!(err, SfError::Argument(_)));
    }

    #[test]
    fn averaged_diffusion_of_constant_spd_matrix_is_identity_map() {
        // d2 = 2 constant symmetric PSD C: sqrt(C C*) = C.
        let c = [2.0, 1.0, 1.0, 2.0];
        let g = matrix_field("g", 2, 2, Reads::Y_ONLY, HolderMeta::lipschitz(), move |_, _, _, out| {
            out.copy_from_slice(&c);
        });
        let samples: Vec<f64> = (0..50).map(|i| i as f64 * 0.01).collect();
        let mu = InvariantMeasureEstimate::from_samples(vec![0.0, 0.0], 1, samples, 1.0).unwrap();
        // Reshape: d1 = 1 fast samples, slow dim 2.
        let (root, se) = averaged_diffusion(&g, 0.0, &[0.0, 0.0], &mu).unwrap();
        for (a, b) in root.iter().zip(&c) {
            assert!((a - b).abs() < 1e-8, "{root:?} vs {c:?}");
        }
        assert!(se.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn averaged_diffusion_second_moment() {
        // G(x) = sqrt(1 + x^2) under N(0,1): mean Gram is E(1 + X^2) = 2.
        let mu = gaussian_samples(0.0, 40_000, 9);
        let g = matrix_field("g", 1, 1, Reads::ALL, HolderMeta::lipschitz(), |_, x, _, out| {
            out[0] = (1.0 + x[0] * x[0]).sqrt();
        });
        let y = mu.y_param.clone();
        let (root, se) = averaged_diffusion(&g, 0.0, &y, &mu).unwrap();
        let expected = 2.0f64.sqrt();
        // Delta method: se of the root is se of the Gram over 2 sqrt.
        let root_se = se[0] / (2.0 * expected);
        assert!(
            (root[0] - expected).abs() < 4.0 * root_se,
            "root {} vs {expected} (se {root_se:.2e})",
            root[0]
        );
    }

    #[test]
    fn measure_se_scales_as_inverse_sqrt_count() {
        let frozen = frozen_ou(0.0);
        let mut logs = Vec::new();
        for (i, &count) in [1000usize, 10_000, 100_000].iter().enumerate() {
            let config = MeasureConfig {
                dt: 1e-2,
                burn_in: 5.0,
                count,
                thinning: 100,
            };
            let mu = estimate_invariant_measure(&frozen, &config, 31, i as u64).unwrap();
            let (_, se) = mu.expectation(|x| x[0]).unwrap();
            logs.push(((count as f64).ln(), se.ln()));
        }
        let n = logs.len() as f64;
        let sx: f64 = logs.iter().map(|p| p.0).sum();
        let sy: f64 = logs.iter().map(|p| p.1).sum();
        let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
        let slope = (sxy - sx * sy / n) / (sxx - sx * sx / n);
        assert!(
            (slope + 0.5).abs() < 0.1,
            "standard error decay slope {slope}"
        );
    }

    #[test]
    fn one_extra_step_leaves_measure_statistics_in_place() {
        let m = 1.0f64.tanh();
        let frozen = frozen_ou(m);
        let config = MeasureConfig {
            dt: 1e-3,
            burn_in: 10.0,
            count: 20_000,
            thinning: 50,
        };
        let mu = estimate_invariant_measure(&frozen, &config, 17, 0).unwrap();
        let dt = config.dt;
        let src = NoiseSource::new(
            999,
            StreamId {
                path_index: 0,
                channel: Channel::Aux(3),
            },
            1,
        );
        let mut z = [0.0];
        let mut pushed = Vec::with_capacity(mu.count());
        for (i, s) in mu.samples().enumerate() {
            src.gaussians_at(i as u64, &mut z);
            let x = s[0];
            pushed.push(x + dt * (m - x) + (2.0 * dt).sqrt() * z[0]);
        }
        let (mean0, se0) = mu.expectation(|x| x[0]).unwrap();
        let pushed_mu =
            InvariantMeasureEstimate::from_samples(mu.y_param.clone(), 1, pushed, mu.spacing)
                .unwrap();
        let (mean1, se1) = pushed_mu.expectation(|x| x[0]).unwrap();
        let se = (se0 * se0 + se1 * se1).sqrt();
        assert!(
            (mean0 - mean1).abs() < 3.0 * se,
            "means {mean0} vs {mean1} (se {se:.2e})"
        );
        let (var0, vse0) = mu.expectation(|x| (x[0] - mean0) * (x[0] - mean0)).unwrap();
        let (var1, vse1) = pushed_mu
            .expectation(|x| (x[0] - mean1) * (x[0] - mean1))
            .unwrap();
        let vse = (vse0 * vse0 + vse1 * vse1).sqrt();
        assert!(
            (var0 - var1).abs() < 3.0 * vse,
            "variances {var0} vs {var1} (se {vse:.2e})"
        );
    }

    fn ou_sin_system() -> SlowFastSystem {
        let b = vector_field("b", 1, Reads::XY, HolderMeta::lipschitz(), |_, x, y, out| {
            out[0] = y[0].tanh() - x[0];
        });
        let sigma = matrix_field("sigma", 1, 1, Reads::XY, HolderMeta::lipschitz(), |_, _, _, out| {
            out[0] = std::f64::consts::SQRT_2;
        });
        let f = vector_field("f", 1, Reads::XY, HolderMeta::lipschitz(), |_, x, y, out| {
            out[0] = x[0].sin() - y[0];
        });
        let g = matrix_field("g", 1, 1, Reads::Y_ONLY, HolderMeta::lipschitz(), |_, _, _, out| {
            out[0] = 1.0;
        });
        SlowFastSystem::new(1, 1, b, sigma, f, g, 0.1, "ou-sin").unwrap()
    }

    #[test]
    fn averaged_system_matches_sine_oracle_at_a_node() {
        let sys = ou_sin_system();
        let eff = build_effective_system(&sys, AveragingOptions::default()).unwrap();
        assert_eq!(eff.provenance(), Provenance::NumericallyAveraged);
        let y = 0.5;
        let mut out = [0.0];
        eff.drift(0.0, &[y], &mut out).unwrap();
        // Oracle: E sin(X) - y under X ~ N(tanh(y), 1), X sampled by the
        // node chain. Use the node's own reported standard error.
        let frozen = sys.freeze(&[y]).unwrap();
        let opts = AveragingOptions::default();
        let mu = estimate_invariant_measure(
            &frozen,
            &opts.measure,
            opts.master_seed,
            AveragedEffective::node_path_index(&[50]),
        )
        .unwrap();
        let (_, se) = averaged_drift(&sys.f, 0.0, &[y], &mu).unwrap();
        let oracle = e_sin_quadrature(y.tanh()) - y;
        assert!(
            (out[0] - oracle).abs() < 4.0 * se[0],
            "drift {} vs oracle {oracle} (se {:.2e})",
            out[0],
            se[0]
        );
        let mut gm = [0.0];
        eff.diffusion(0.0, &[y], &mut gm).unwrap();
        assert!((gm[0] - 1.0).abs() < 1e-12, "diffusion {gm:?}");
    }

    #[test]
    fn averaged_system_is_query_order_independent() {
        let sys = ou_sin_system();
        let mut opts = AveragingOptions::default();
        opts.measure.count = 500;
        opts.measure.burn_in = 1.0;
        let eff_a = build_effective_system(&sys, opts.clone()).unwrap();
        let eff_b = build_effective_system(&sys, opts).unwrap();
        let ys = [[0.31], [-0.17], [0.04]];
        let mut va = Vec::new();
        for y in &ys {
            let mut out = [0.0];
            eff_a.drift(0.0, y, &mut out).unwrap();
            va.push(out[0]);
        }
        let mut vb = vec![0.0; ys.len()];
        for (i, y) in ys.iter().enumerate().rev() {
            let mut out = [0.0];
            eff_b.drift(0.0, y, &mut out).unwrap();
            vb[i] = out[0];
        }
        for (a, b) in va.iter().zip(&vb) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Second query of the same point hits the cache and is identical.
        let mut again = [0.0];
        eff_a.drift(0.0, &ys[0], &mut again).unwrap();
        assert_eq!(again[0].to_bits(), va[0].to_bits());
    }

    #[test]
    fn interpolation_is_linear_between_nodes() {
        let sys = ou_sin_system();
        let mut opts = AveragingOptions::default();
        opts.measure.count = 500;
        opts.measure.burn_in = 1.0;
        let eff = build_effective_system(&sys, opts).unwrap();
        let mut v0 = [0.0];
        let mut v1 = [0.0];
        let mut mid = [0.0];
        eff.drift(0.0, &[0.0], &mut v0).unwrap();
        eff.drift(0.0, &[0.01], &mut v1).unwrap();
        eff.drift(0.0, &[0.005], &mut mid).unwrap();
        let expected = 0.5 * v0[0] + 0.5 * v1[0];
        assert_eq!(mid[0].to_bits(), expected.to_bits());
    }

    #[test]
    fn x_free_coefficients_average_to_themselves() {
        let b = vector_field("b", 1, Reads::XY, HolderMeta::lipschitz(), |_, x, _, out| {
            out[0] = -x[0];
        });
        let sigma = matrix_field("sigma", 1, 1, Reads::XY, HolderMeta::lipschitz(), |_, _, _, out| {
            out[0] = std::f64::consts::SQRT_2;
        });
        let f = vector_field("f", 1, Reads::TY, HolderMeta::lipschitz(), |_, _, y, out| {
            out[0] = -y[0];
        });
        let g = matrix_field("g", 1, 1, Reads::Y_ONLY, HolderMeta::lipschitz(), |_, _, _, out| {
            out[0] = 1.5;
        });
        let sys = SlowFastSystem::new(1, 1, b, sigma, f, g, 0.1, "x-free").unwrap();
        let mut opts = AveragingOptions::default();
        opts.measure.count = 200;
        opts.measure.burn_in = 0.5;
        let eff = build_effective_system(&sys, opts).unwrap();
        for &y in &[-0.737, 0.0, 0.42] {
            let mut out = [0.0];
            eff.drift(0.3, &[y], &mut out).unwrap();
            assert!((out[0] + y).abs() < 1e-12, "drift at {y}: {}", out[0]);
            eff.diffusion(0.3, &[y], &mut out).unwrap();
            assert!((out[0] - 1.5).abs() < 1e-12, "diffusion at {y}: {}", out[0]);
        }
        // Zero Monte Carlo variance in the averaged drift at a node.
        let frozen = sys.freeze(&[0.0]).unwrap();
        let mu = estimate_invariant_measure(
            &frozen,
            &MeasureConfig {
                dt: 1e-3,
                burn_in: 0.5,
                count: 200,
                thinning: 5,
            },
            1,
            0,
        )
        .unwrap();
        let (_, se) = averaged_drift(&sys.f, 0.0, &[0.0], &mu).unwrap();
        assert_eq!(se, vec![0.0]);
    }

    #[test]
    fn effective_closed_form_ou_reaches_unit_variance() {
        let eff = EffectiveSystem::closed_form(
            1,
            |_, y, out: &mut [f64]| out[0] = -y[0],
            |_, _, out: &mut [f64]| out[0] = std::f64::consts::SQRT_2,
        );
        assert_eq!(eff.provenance(), Provenance::ClosedForm);
        let plan = StepPlan::new(0.01, 1, 10.0).unwrap();
        let n_paths = 20_000u64;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for p in 0..n_paths {
            let traj = simulate_effective(&eff, &[0.0], &plan, 515, p).unwrap();
            let v = traj.last()[0];
            sum += v;
            sum2 += v * v;
        }
        let nf = n_paths as f64;
        let var = sum2 / nf - (sum / nf) * (sum / nf);
        assert!((var - 1.0).abs() < 0.05, "stationary variance {var}");
    }

    #[test]
    fn prime_cache_counts_nodes_and_enables_hits() {
        let sys = ou_sin_system();
        let mut opts = AveragingOptions::default();
        opts.measure.count = 200;
        opts.measure.burn_in = 0.5;
        let eff = build_effective_system(&sys, opts).unwrap();
        let primed = eff
            .averaged()
            .unwrap()
            .prime_cache(&[-0.05], &[0.05], &[0.0])
            .unwrap();
        assert!((11..=13).contains(&primed), "primed {primed}");
        let mut out = [0.0];
        eff.drift(0.0, &[0.013], &mut out).unwrap();
        assert!(out[0].is_finite());
    }

    // Stationarity probe: pushing every retained sample through one
    // discrete step of the frozen dynamics must leave the sampled law
    // unchanged up to O(dt) step bias and resampling noise.
    #[test]
    fn one_frozen_step_preserves_the_estimated_measure() {
        let m = 0.4f64;
        let frozen = frozen_ou(m);
        let config = MeasureConfig {
            dt: 1e-2,
            burn_in: 5.0,
            count: 4000,
            thinning: 100,
        };
        let mu = estimate_invariant_measure(&frozen, &config, 19, 0).unwrap();
        let dt = 1e-2;
        let noise = NoiseSource::new(
            19,
            StreamId {
                path_index: 1,
                channel: Channel::Aux(7),
            },
            1,
        );
        let mut z = [0.0];
        let mut pushed = Vec::with_capacity(mu.count());
        for (i, x) in mu.samples().enumerate() {
            noise.gaussians_at(i as u64, &mut z);
            pushed.push(x[0] + dt * (m - x[0]) + (2.0 * dt).sqrt() * z[0]);
        }
        let n = pushed.len() as f64;
        let (mean0, se0) = mu.expectation(|x| x[0]).unwrap();
        let mean1 = pushed.iter().sum::<f64>() / n;
        // The fresh-noise contribution to the mean difference has standard
        // deviation sqrt(2 dt / n); the drift part contracts the gap.
        let slack = 4.0 * (2.0 * dt / n).sqrt() + dt * (m - mean0).abs() + 4.0 * dt * se0;
        assert!(
            (mean1 - mean0).abs() <= slack,
            "pushed mean {mean1} vs {mean0} (slack {slack:.2e})"
        );
        let (var0, _) = mu.expectation(|x| (x[0] - mean0) * (x[0] - mean0)).unwrap();
        let var1 = pushed.iter().map(|v| (v - mean1) * (v - mean1)).sum::<f64>() / n;
        // One step maps var to (1-dt)^2 var + 2dt; at var near 1 the shift
        // is O(dt * |1 - var|), far below this band.
        assert!(
            (var1 / var0 - 1.0).abs() < 0.02,
            "pushed variance {var1} vs {var0}"
        );
    }
}
