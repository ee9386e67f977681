//! Counter-based Gaussian noise streams.
//!
//! Every Brownian increment in the toolkit is a pure function of
//! (master seed, stream id, step index). That buys three things at once:
//! runs are reproducible bit for bit regardless of thread count or
//! evaluation order, the same underlying Brownian path can be replayed
//! against different discretizations, and coupled simulations (a slow-fast
//! trajectory and its averaged counterpart) can share the exact same slow
//! noise without any bookkeeping.
//!
//! Scalar draws use the splitmix64 finisher as a keyed hash and Box-Muller
//! to map two 64-bit words to one standard normal. A macro-step increment
//! can be split into conditioned micro increments with
//! [`split_macro_increment`]: the micro increments are `xi_i - mean(xi) +
//! S/m` with `xi_i ~ N(0, dt/m)` drawn from an auxiliary stream, which
//! reproduces the conditional law of the Brownian path given its macro
//! increment S, so the macro grid carries the same Brownian motion however
//! finely it is subdivided.

use crate::error::{SfError, SfResult};

const INV_2_53: f64 = 1.0 / 9007199254740992.0;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const INDEX_SALT: u64 = 0x6a09_e667_f3bc_c909;
const MASTER_SALT: u64 = 0xa5a5_5a5a_1234_8765;
const CHANNEL_MULT: u64 = 0xd134_2543_de82_ef95;

#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    z
}

#[inline]
fn word(key: u64, index: u64) -> u64 {
    mix64(key ^ mix64(index.wrapping_mul(GOLDEN).wrapping_add(INDEX_SALT)))
}

/// Uniform in (0, 1]; safe as the log argument in Box-Muller.
#[inline]
fn unit_open(w: u64) -> f64 {
    ((w >> 11) + 1) as f64 * INV_2_53
}

/// Uniform in [0, 1).
#[inline]
fn unit_half_open(w: u64) -> f64 {
    (w >> 11) as f64 * INV_2_53
}

/// The n-th standard normal of the stream with the given key.
#[inline]
pub fn standard_normal(key: u64, n: u64) -> f64 {
    let u1 = unit_open(word(key, 2 * n));
    let u2 = unit_half_open(word(key, 2 * n + 1));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Logical noise channels of one simulated path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    /// Brownian motion driving the fast component.
    FastW1,
    /// Brownian motion driving the slow component, indexed on the macro grid.
    SlowW2,
    /// Auxiliary draws used to condition micro increments on a macro one.
    SlowBridge,
    /// Extra streams for module-specific sampling needs.
    Aux(u32),
}

impl Channel {
    fn code(self) -> u64 {
        match self {
            Channel::FastW1 => 1,
            Channel::SlowW2 => 2,
            Channel::SlowBridge => 3,
            Channel::Aux(k) => 0x1_0000 + k as u64,
        }
    }
}

/// Identifies one noise stream: which path and which channel within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub path_index: u64,
    pub channel: Channel,
}

/// Derive the stream key from the master seed and stream identity.
pub fn stream_key(master_seed: u64, stream: StreamId) -> u64 {
    let mut k = mix64(master_seed ^ MASTER_SALT);
    k = mix64(k ^ mix64(stream.path_index.wrapping_mul(GOLDEN)));
    k = mix64(k ^ mix64(stream.channel.code().wrapping_mul(CHANNEL_MULT)));
    k
}

/// A vector-valued Gaussian increment stream.
///
/// Step index s covers scalar draws `s*dim .. (s+1)*dim`, so random access
/// by step and sequential iteration see the same numbers in the same order.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    key: u64,
    dim: usize,
    position: u64,
}

impl NoiseSource {
    pub fn new(master_seed: u64, stream: StreamId, dim: usize) -> Self {
        NoiseSource {
            key: stream_key(master_seed, stream),
            dim,
            position: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unscaled standard normals for the given step, written into `out`.
    #[inline]
    pub fn gaussians_at(&self, step: u64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let base = step * self.dim as u64;
        for (i, o) in out.iter_mut().enumerate() {
            *o = standard_normal(self.key, base + i as u64);
        }
    }

    /// The Brownian increment over step `step` of length `dt`: a vector of
    /// independent N(0, dt) entries, identical on every call.
    pub fn increment_at(&self, step: u64, dt: f64, out: &mut [f64]) -> SfResult<()> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SfError::Argument(format!(
                "increment step dt must be positive and finite, got {dt}"
            )));
        }
        self.gaussians_at(step, out);
        let s = dt.sqrt();
        for o in out.iter_mut() {
            *o *= s;
        }
        Ok(())
    }

    /// Sequential interface: the next increment in stream order, advancing
    /// the position by one step.
    pub fn next_increment(&mut self, dt: f64, out: &mut [f64]) -> SfResult<()> {
        let step = self.position;
        self.increment_at(step, dt, out)?;
        self.position += 1;
        Ok(())
    }

    /// Current sequential position (number of steps consumed).
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Reset the sequential cursor to the start of the stream.
    pub fn rewind(&mut self) {
        self.position = 0;
    }
}

/// Two sources that replay the identical slow-noise increment sequence:
/// one to drive the coupled system, one to drive the effective equation.
/// This is the coupling device behind pathwise error measurements; both
/// processes see one Brownian motion on the macro grid.
pub fn coupled_pair(master_seed: u64, path_index: u64, dim: usize) -> (NoiseSource, NoiseSource) {
    let stream = StreamId {
        path_index,
        channel: Channel::SlowW2,
    };
    (
        NoiseSource::new(master_seed, stream, dim),
        NoiseSource::new(master_seed, stream, dim),
    )
}

/// Produce a macro increment and the micro increments that refine it.
///
/// `macro_out` (length dim) receives the increment of W over macro step
/// `macro_step` of length `macro_dt`, read from `slow`. `micro_out` (length
/// `substeps * dim`, substep-major) receives increments over the uniform
/// sub-partition, conditioned to sum to the macro increment: each micro
/// increment is N(0, macro_dt/substeps) marginally, distinct micro
/// increments are independent, and their sum reproduces `macro_out` up to
/// rounding. With one substep the macro increment is passed through
/// unchanged.
pub fn split_macro_increment(
    slow: &NoiseSource,
    bridge: &NoiseSource,
    macro_step: u64,
    substeps: usize,
    macro_dt: f64,
    macro_out: &mut [f64],
    micro_out: &mut [f64],
) -> SfResult<()> {
    let dim = slow.dim();
    debug_assert_eq!(bridge.dim(), dim);
    debug_assert_eq!(macro_out.len(), dim);
    debug_assert_eq!(micro_out.len(), substeps * dim);
    slow.increment_at(macro_step, macro_dt, macro_out)?;
    if substeps == 1 {
        micro_out.copy_from_slice(macro_out);
        return Ok(());
    }
    let m = substeps as f64;
    let sqrt_micro = (macro_dt / m).sqrt();
    let base = macro_step * substeps as u64;
    for i in 0..substeps {
        let row = &mut micro_out[i * dim..(i + 1) * dim];
        bridge.gaussians_at(base + i as u64, row);
        for v in row.iter_mut() {
            *v *= sqrt_micro;
        }
    }
    for c in 0..dim {
        let mut mean = 0.0;
        for i in 0..substeps {
            mean += micro_out[i * dim + c];
        }
        mean /= m;
        let shift = macro_out[c] / m - mean;
        for i in 0..substeps {
            micro_out[i * dim + c] += shift;
        }
    }
    Ok(())
}
