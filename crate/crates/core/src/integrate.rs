//! Euler-Maruyama integration of the coupled, frozen, and effective
//! equations.
//!
//! The slow component is recorded on a macro grid of spacing `macro_dt`;
//! the fast component is advanced with `micro_substeps` Euler substeps per
//! macro step so the integrator resolves the 1/eps time scale. The slow
//! Brownian increments are defined on the macro grid and split across
//! substeps by conditioning (see [`crate::noise::split_macro_increment`]),
//! so the averaged equation can be driven by the identical slow noise and
//! the slow Brownian path does not depend on how finely the fast scale is
//! resolved.

use crate::error::{SfError, SfResult};
use crate::noise::{split_macro_increment, Channel, NoiseSource, StreamId};
use crate::system::{FrozenSystem, SlowFastSystem};

/// Micro steps must satisfy `micro_dt <= STABILITY_FACTOR * epsilon` so the
/// explicit scheme stays inside the stability region of the fast dynamics.
pub const STABILITY_FACTOR: f64 = 0.05;

/// A trajectory left the admissible region when its norm exceeds this.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

/// Discretization plan for one simulation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPlan {
    /// Recording grid spacing for the slow component.
    pub macro_dt: f64,
    /// Fast substeps per macro step.
    pub micro_substeps: usize,
    /// Final time; must be an integer number of macro steps (zero allowed).
    pub horizon: f64,
}

impl StepPlan {
    pub fn new(macro_dt: f64, micro_substeps: usize, horizon: f64) -> SfResult<Self> {
        if !(macro_dt > 0.0) || !macro_dt.is_finite() {
            return Err(SfError::Argument(format!(
                "macro_dt must be positive and finite, got {macro_dt}"
            )));
        }
        if micro_substeps == 0 {
            return Err(SfError::Argument("micro_substeps must be at least 1".into()));
        }
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(SfError::Argument(format!(
                "horizon must be nonnegative and finite, got {horizon}"
            )));
        }
        let steps = horizon / macro_dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(SfError::Argument(format!(
                "horizon {horizon} is not an integer multiple of macro_dt {macro_dt}"
            )));
        }
        Ok(StepPlan {
            macro_dt,
            micro_substeps,
            horizon,
        })
    }

    /// Smallest number of substeps that keeps the fast step stable for the
    /// given time-scale parameter.
    pub fn for_epsilon(macro_dt: f64, horizon: f64, epsilon: f64) -> SfResult<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(SfError::Argument(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        let needed = macro_dt / (STABILITY_FACTOR * epsilon);
        let substeps = (needed - 1e-9).ceil().max(1.0) as usize;
        StepPlan::new(macro_dt, substeps, horizon)
    }

    pub fn n_macro_steps(&self) -> usize {
        (self.horizon / self.macro_dt).round() as usize
    }

    pub fn micro_dt(&self) -> f64 {
        self.macro_dt / self.micro_substeps as f64
    }

    /// Check the micro step against the fast time scale. A small relative
    /// slack absorbs rounding in the substep computation.
    pub fn check_stability(&self, epsilon: f64) -> SfResult<()> {
        let micro = self.micro_dt();
        if micro > STABILITY_FACTOR * epsilon * (1.0 + 1e-9) {
            let suggested = (self.macro_dt / (STABILITY_FACTOR * epsilon)).ceil() as usize;
            return Err(SfError::Contract(format!(
                "micro step {micro:.3e} exceeds {STABILITY_FACTOR} * epsilon = {:.3e}; \
                 use at least {suggested} substeps",
                STABILITY_FACTOR * epsilon
            )));
        }
        Ok(())
    }
}

/// States recorded on a uniform time grid, stored flat.
#[derive(Debug, Clone)]
pub struct Trajectory {
    state_dim: usize,
    dt: f64,
    t0: f64,
    data: Vec<f64>,
    /// Free-form provenance note (system label, seed) for export headers.
    pub meta: String,
}

impl Trajectory {
    pub fn with_capacity(state_dim: usize, dt: f64, t0: f64, n_states: usize) -> Self {
        Trajectory {
            state_dim,
            dt,
            t0,
            data: Vec::with_capacity(n_states * state_dim),
            meta: String::new(),
        }
    }

    pub fn push(&mut self, state: &[f64]) {
        debug_assert_eq!(state.len(), self.state_dim);
        self.data.extend_from_slice(state);
    }

    /// Number of recorded states (grid points, including the initial one).
    pub fn len(&self) -> usize {
        self.data.len() / self.state_dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn state(&self, j: usize) -> &[f64] {
        &self.data[j * self.state_dim..(j + 1) * self.state_dim]
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.state_dim)
    }

    /// Raw flat storage, state-major.
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Write `t, s_0, .., s_{d-1}` rows to `w`, preceded by the meta note
    /// as a comment line when present.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W, header: &str) -> SfResult<()> {
        if !self.meta.is_empty() {
            writeln!(w, "# {}", self.meta)?;
        }
        writeln!(w, "{header}")?;
        for j in 0..self.len() {
            write!(w, "{}", self.time(j))?;
            for v in self.state(j) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Noise streams used by one coupled path.
#[derive(Debug, Clone)]
pub struct CoupledNoise {
    pub w1: NoiseSource,
    pub w2: NoiseSource,
    pub bridge: NoiseSource,
}

impl CoupledNoise {
    pub fn new(master_seed: u64, path_index: u64, d1: usize, d2: usize) -> Self {
        let mk = |channel, dim| {
            NoiseSource::new(
                master_seed,
                StreamId {
                    path_index,
                    channel,
                },
                dim,
            )
        };
        CoupledNoise {
            w1: mk(Channel::FastW1, d1),
            w2: mk(Channel::SlowW2, d2),
            bridge: mk(Channel::SlowBridge, d2),
        }
    }
}

#[derive(Debug)]
struct StepBuffers {
    bx: Vec<f64>,
    sig: Vec<f64>,
    fv: Vec<f64>,
    gm: Vec<f64>,
    x_next: Vec<f64>,
    y_next: Vec<f64>,
}

impl StepBuffers {
    fn new(d1: usize, d2: usize) -> Self {
        StepBuffers {
            bx: vec![0.0; d1],
            sig: vec![0.0; d1 * d1],
            fv: vec![0.0; d2],
            gm: vec![0.0; d2 * d2],
            x_next: vec![0.0; d1],
            y_next: vec![0.0; d2],
        }
    }
}

#[inline]
fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn blowup_error(t: f64, x: &[f64], y: &[f64]) -> SfError {
    let mut state = Vec::with_capacity(x.len() + y.len());
    state.extend_from_slice(x);
    state.extend_from_slice(y);
    SfError::Blowup {
        t,
        magnitude: norm_sq(&state).sqrt(),
        state,
    }
}

/// One Euler-Maruyama micro step of the coupled system, writing the new
/// state into the buffers. `dw1` and `dw2` are raw Brownian increments
/// over `micro_dt`; the fast-block scalings 1/eps and 1/sqrt(eps) are
/// applied here.
#[inline]
fn micro_step_into(
    sys: &SlowFastSystem,
    t: f64,
    x: &[f64],
    y: &[f64],
    micro_dt: f64,
    dw1: &[f64],
    dw2: &[f64],
    buf: &mut StepBuffers,
) -> SfResult<()> {
    let d1 = sys.d1;
    let d2 = sys.d2;
    let drift_scale = micro_dt / sys.epsilon;
    let noise_scale = 1.0 / sys.epsilon.sqrt();

    sys.b.eval_unchecked(t, x, y, &mut buf.bx);
    sys.sigma.eval_unchecked(t, x, y, &mut buf.sig);
    for r in 0..d1 {
        let mut acc = x[r] + drift_scale * buf.bx[r];
        for c in 0..d1 {
            acc += noise_scale * buf.sig[r * d1 + c] * dw1[c];
        }
        buf.x_next[r] = acc;
    }

    sys.f.eval_unchecked(t, x, y, &mut buf.fv);
    sys.g.eval_unchecked(t, x, y, &mut buf.gm);
    for r in 0..d2 {
        let mut acc = y[r] + micro_dt * buf.fv[r];
        for c in 0..d2 {
            acc += buf.gm[r * d2 + c] * dw2[c];
        }
        buf.y_next[r] = acc;
    }

    let mag = norm_sq(&buf.x_next) + norm_sq(&buf.y_next);
    if !(mag <= BLOWUP_THRESHOLD * BLOWUP_THRESHOLD) {
        return Err(blowup_error(t + micro_dt, &buf.x_next, &buf.y_next));
    }
    Ok(())
}

/// One Euler-Maruyama step of the coupled system at time `t`:
///
/// ```text
/// x' = x + (1/eps) b(x,y) dt + (1/sqrt(eps)) sigma(x,y) dW1
/// y' = y + F(t,x,y) dt      +                G(t,x,y) dW2
/// ```
///
/// `dw1` and `dw2` are raw Brownian increments over `micro_dt` (the
/// 1/sqrt(eps) scaling of the fast noise is applied internally). Returns
/// the new state or a blow-up error carrying time and state.
pub fn em_step_coupled(
    sys: &SlowFastSystem,
    t: f64,
    x: &[f64],
    y: &[f64],
    micro_dt: f64,
    dw1: &[f64],
    dw2: &[f64],
) -> SfResult<(Vec<f64>, Vec<f64>)> {
    if !(micro_dt > 0.0) || !micro_dt.is_finite() {
        return Err(SfError::Argument(format!(
            "micro_dt must be positive and finite, got {micro_dt}"
        )));
    }
    if x.len() != sys.d1 || y.len() != sys.d2 || dw1.len() != sys.d1 || dw2.len() != sys.d2 {
        return Err(SfError::Structural(
            "state or increment dimensions do not match the system".into(),
        ));
    }
    let mut buf = StepBuffers::new(sys.d1, sys.d2);
    micro_step_into(sys, t, x, y, micro_dt, dw1, dw2, &mut buf)?;
    Ok((buf.x_next, buf.y_next))
}

/// Simulate the coupled slow-fast system, recording both components on the
/// macro grid. Returns the fast and slow trajectories. The slow Brownian
/// increments are read on the macro grid and split across micro substeps,
/// so the same (seed, path_index) drives the matching effective path.
pub fn simulate_coupled(
    sys: &SlowFastSystem,
    x0: &[f64],
    y0: &[f64],
    plan: &StepPlan,
    master_seed: u64,
    path_index: u64,
) -> SfResult<(Trajectory, Trajectory)> {
    if x0.len() != sys.d1 || y0.len() != sys.d2 {
        return Err(SfError::Structural(format!(
            "initial condition dims ({}, {}) do not match system ({}, {})",
            x0.len(),
            y0.len(),
            sys.d1,
            sys.d2
        )));
    }
    plan.check_stability(sys.epsilon)?;
    let n = plan.n_macro_steps();
    let m = plan.micro_substeps;
    let micro_dt = plan.micro_dt();
    let sqrt_micro = micro_dt.sqrt();
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let noise = CoupledNoise::new(master_seed, path_index, sys.d1, sys.d2);
    let mut buf = StepBuffers::new(sys.d1, sys.d2);
    let mut dw1 = vec![0.0; sys.d1];
    let mut s_macro = vec![0.0; sys.d2];
    let mut deltas = vec![0.0; m * sys.d2];
    let mut traj_x = Trajectory::with_capacity(sys.d1, plan.macro_dt, 0.0, n + 1);
    let mut traj_y = Trajectory::with_capacity(sys.d2, plan.macro_dt, 0.0, n + 1);
    traj_x.push(&x);
    traj_y.push(&y);
    for j in 0..n as u64 {
        split_macro_increment(
            &noise.w2,
            &noise.bridge,
            j,
            m,
            plan.macro_dt,
            &mut s_macro,
            &mut deltas,
        )?;
        let t_base = j as f64 * plan.macro_dt;
        let micro_base = j * m as u64;
        for i in 0..m {
            let t = t_base + i as f64 * micro_dt;
            noise.w1.gaussians_at(micro_base + i as u64, &mut dw1);
            for v in dw1.iter_mut() {
                *v *= sqrt_micro;
            }
            let dw2 = &deltas[i * sys.d2..(i + 1) * sys.d2];
            micro_step_into(sys, t, &x, &y, micro_dt, &dw1, dw2, &mut buf)?;
            x.copy_from_slice(&buf.x_next);
            y.copy_from_slice(&buf.y_next);
        }
        traj_x.push(&x);
        traj_y.push(&y);
    }
    Ok((traj_x, traj_y))
}

/// Step-by-step simulator for the frozen fast equation at unit speed.
///
/// Useful when the caller wants to consume states as they stream by,
/// without storing a full trajectory.
#[derive(Debug)]
pub struct FrozenStepper {
    frozen: FrozenSystem,
    dt: f64,
    sqrt_dt: f64,
    x: Vec<f64>,
    bx: Vec<f64>,
    sig: Vec<f64>,
    z: Vec<f64>,
    x_next: Vec<f64>,
    noise: NoiseSource,
    step_index: u64,
}

impl FrozenStepper {
    pub fn new(
        frozen: &FrozenSystem,
        x0: &[f64],
        dt: f64,
        master_seed: u64,
        path_index: u64,
    ) -> SfResult<Self> {
        Self::with_channel(frozen, x0, dt, master_seed, path_index, Channel::FastW1)
    }

    /// As `new` but drawing from an explicit channel, for samplers that
    /// must not collide with path noise.
    pub fn with_channel(
        frozen: &FrozenSystem,
        x0: &[f64],
        dt: f64,
        master_seed: u64,
        path_index: u64,
        channel: Channel,
    ) -> SfResult<Self> {
        if x0.len() != frozen.d1 {
            return Err(SfError::Structural(format!(
                "initial condition dim {} does not match fast dim {}",
                x0.len(),
                frozen.d1
            )));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SfError::Argument(format!(
                "dt must be positive and finite, got {dt}"
            )));
        }
        let d = frozen.d1;
        Ok(FrozenStepper {
            frozen: frozen.clone(),
            dt,
            sqrt_dt: dt.sqrt(),
            x: x0.to_vec(),
            bx: vec![0.0; d],
            sig: vec![0.0; d * d],
            z: vec![0.0; d],
            x_next: vec![0.0; d],
            noise: NoiseSource::new(
                master_seed,
                StreamId {
                    path_index,
                    channel,
                },
                d,
            ),
            step_index: 0,
        })
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.dt
    }

    /// Reset to a new start state, rewinding the noise stream.
    pub fn restart(&mut self, x0: &[f64]) {
        self.x.copy_from_slice(x0);
        self.step_index = 0;
        self.noise.rewind();
    }

    pub fn step(&mut self) -> SfResult<()> {
        let d = self.frozen.d1;
        self.frozen
            .b
            .eval_unchecked(0.0, &self.x, &self.frozen.y, &mut self.bx);
        self.frozen
            .sigma
            .eval_unchecked(0.0, &self.x, &self.frozen.y, &mut self.sig);
        self.noise.gaussians_at(self.step_index, &mut self.z);
        for r in 0..d {
            let mut acc = self.x[r] + self.dt * self.bx[r];
            for c in 0..d {
                acc += self.sqrt_dt * self.sig[r * d + c] * self.z[c];
            }
            self.x_next[r] = acc;
        }
        self.x.copy_from_slice(&self.x_next);
        self.step_index += 1;
        let mag = norm_sq(&self.x);
        if !(mag <= BLOWUP_THRESHOLD * BLOWUP_THRESHOLD) {
            return Err(SfError::Blowup {
                t: self.time(),
                magnitude: mag.sqrt(),
                state: self.x.clone(),
            });
        }
        Ok(())
    }
}

/// Simulate the frozen fast equation, recording every `record_every`-th
/// state (1 records all).
pub fn simulate_frozen(
    frozen: &FrozenSystem,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
    record_every: usize,
    master_seed: u64,
    path_index: u64,
) -> SfResult<Trajectory> {
    if record_every == 0 {
        return Err(SfError::Argument("record_every must be at least 1".into()));
    }
    let mut stepper = FrozenStepper::new(frozen, x0, dt, master_seed, path_index)?;
    let mut traj = Trajectory::with_capacity(
        frozen.d1,
        dt * record_every as f64,
        0.0,
        n_steps / record_every + 1,
    );
    traj.push(stepper.state());
    for s in 1..=n_steps {
        stepper.step()?;
        if s % record_every == 0 {
            traj.push(stepper.state());
        }
    }
    Ok(traj)
}

/// Time-dependent drift and diffusion for a slow equation on its own,
/// as produced by averaging. Implemented by the effective system.
pub trait EffectiveDynamics {
    fn dim(&self) -> usize;
    fn drift(&self, t: f64, y: &[f64], out: &mut [f64]) -> SfResult<()>;
    /// The diffusion matrix multiplying the Brownian increment, row-major.
    fn diffusion(&self, t: f64, y: &[f64], out: &mut [f64]) -> SfResult<()>;
}

/// Simulate the effective slow equation on the macro grid, driven by the
/// same slow noise channel a coupled path with the same seed and path index
/// would see. `plan.micro_substeps` is ignored: the effective equation has
/// no fast scale, so its trajectory depends only on the macro grid.
pub fn simulate_effective<D: EffectiveDynamics>(
    dynamics: &D,
    y0: &[f64],
    plan: &StepPlan,
    master_seed: u64,
    path_index: u64,
) -> SfResult<Trajectory> {
    let d = dynamics.dim();
    if y0.len() != d {
        return Err(SfError::Structural(format!(
            "initial condition dim {} does not match effective dim {}",
            y0.len(),
            d
        )));
    }
    let n = plan.n_macro_steps();
    let dt = plan.macro_dt;
    let sqrt_dt = dt.sqrt();
    let noise = NoiseSource::new(
        master_seed,
        StreamId {
            path_index,
            channel: Channel::SlowW2,
        },
        d,
    );
    let mut y = y0.to_vec();
    let mut fv = vec![0.0; d];
    let mut gm = vec![0.0; d * d];
    let mut z = vec![0.0; d];
    let mut y_next = vec![0.0; d];
    let mut traj = Trajectory::with_capacity(d, dt, 0.0, n + 1);
    traj.push(&y);
    for j in 0..n {
        let t = j as f64 * dt;
        dynamics.drift(t, &y, &mut fv)?;
        dynamics.diffusion(t, &y, &mut gm)?;
        noise.gaussians_at(j as u64, &mut z);
        for r in 0..d {
            let mut acc = y[r] + dt * fv[r];
            for c in 0..d {
                acc += sqrt_dt * gm[r * d + c] * z[c];
            }
            y_next[r] = acc;
        }
        y.copy_from_slice(&y_next);
        let mag = norm_sq(&y);
        if !(mag <= BLOWUP_THRESHOLD * BLOWUP_THRESHOLD) {
            return Err(SfError::Blowup {
                t: (j + 1) as f64 * dt,
                magnitude: mag.sqrt(),
                state: y.clone(),
            });
        }
        traj.push(&y);
    }
    Ok(traj)
}
