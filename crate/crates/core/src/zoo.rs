//! Built-in benchmark systems with known effective dynamics.
//!
//! Every entry pairs a [`SlowFastSystem`] factory with the closed form of
//! its averaged equation (when one exists), so experiments can measure
//! convergence against an exact target instead of a self-referential fit.
//! The fast component of each entry is an Ornstein-Uhlenbeck process pulled
//! toward a bounded function of the slow state; its frozen invariant measure
//! is the unit-variance Gaussian centered at that target, which is what makes
//! the averaged coefficients computable by hand.

use std::sync::OnceLock;

use crate::averaging::EffectiveSystem;
use crate::error::{SfError, SfResult};
use crate::field::{matrix_field, vector_field, CoefficientField, HolderMeta, Reads};
use crate::system::SlowFastSystem;

const NO_ARGS: Reads = Reads {
    t: false,
    x: false,
    y: false,
};

/// Factories build systems at this time-scale parameter; callers tune it
/// with [`SlowFastSystem::with_epsilon`].
pub const DEFAULT_EPSILON: f64 = 0.1;

/// A registered benchmark system.
#[derive(Debug)]
pub struct ZooEntry {
    /// Registry key, accepted by every CLI subcommand.
    pub id: &'static str,
    /// Hölder exponent of the slow drift in the slow variable.
    pub alpha: f64,
    /// Hölder exponent of the fast coefficients in the fast variable.
    pub delta: f64,
    /// Default fast initial state.
    pub x0: Vec<f64>,
    /// Default slow initial state.
    pub y0: Vec<f64>,
    /// One-line description for reports.
    pub notes: &'static str,
    make_system: fn() -> SlowFastSystem,
    make_effective: Option<fn() -> EffectiveSystem>,
}

impl ZooEntry {
    /// Build a fresh copy of the system at [`DEFAULT_EPSILON`].
    pub fn system(&self) -> SlowFastSystem {
        (self.make_system)()
    }

    /// The exact averaged equation, when the entry has one.
    pub fn closed_form_effective(&self) -> Option<EffectiveSystem> {
        self.make_effective.map(|f| f())
    }
}

/// Look up a benchmark by id.
pub fn get_zoo(id: &str) -> SfResult<&'static ZooEntry> {
    registry().iter().find(|e| e.id == id).ok_or_else(|| {
        SfError::Lookup(format!(
            "unknown system id '{id}'; known ids: {}",
            list_zoo().join(", ")
        ))
    })
}

/// Ids of every registered benchmark, in registry order.
pub fn list_zoo() -> Vec<&'static str> {
    registry().iter().map(|e| e.id).collect()
}

static REGISTRY: OnceLock<Vec<ZooEntry>> = OnceLock::new();

fn registry() -> &'static [ZooEntry] {
    REGISTRY.get_or_init(|| {
        vec![
            ZooEntry {
                id: "ou-smooth",
                alpha: 2.0,
                delta: 1.0,
                x0: vec![0.0],
                y0: vec![0.3],
                notes: "smooth scalar benchmark; averaged drift and diffusion \
                        known in closed form",
                make_system: ou_smooth_system,
                make_effective: Some(ou_smooth_effective),
            },
            ZooEntry {
                id: "ou-holder-0.5",
                alpha: 0.5,
                delta: 1.0,
                x0: vec![0.0],
                y0: vec![-0.5],
                notes: "slow drift with a |y|^(1/2) cusp at the origin; \
                        expected strong and weak rates 1/4",
                make_system: ou_holder_half_system,
                make_effective: Some(ou_holder_half_effective),
            },
            ZooEntry {
                id: "ou-holder-1.0",
                alpha: 1.0,
                delta: 1.0,
                x0: vec![0.0],
                y0: vec![-0.5],
                notes: "slow drift with a |y| kink at the origin; expected \
                        strong and weak rates 1/2",
                make_system: ou_holder_one_system,
                make_effective: Some(ou_holder_one_effective),
            },
            ZooEntry {
                id: "fully-coupled-weak",
                alpha: 2.0,
                delta: 1.0,
                x0: vec![0.0],
                y0: vec![0.3],
                notes: "slow diffusion reads the fast state, so pathwise \
                        comparison is unsupported; weak experiments only",
                make_system: fully_coupled_system,
                make_effective: Some(fully_coupled_effective),
            },
            ZooEntry {
                id: "unbounded-local",
                alpha: 2.0,
                delta: 1.0,
                x0: vec![0.0],
                y0: vec![0.3, -0.2],
                notes: "linearly growing slow drift in two slow dimensions; \
                        exercises the localized convergence fallback",
                make_system: unbounded_local_system,
                make_effective: Some(unbounded_local_effective),
            },
        ]
    })
}

/// Fast OU pair pulled toward `target(y)`: drift target − x, diffusion √2.
/// The frozen invariant measure is N(target(y), 1) for any bounded target.
fn ou_fast(target: fn(&[f64]) -> f64) -> (CoefficientField, CoefficientField) {
    let b = vector_field(
        "ou-pull",
        1,
        Reads::XY,
        HolderMeta::lipschitz(),
        move |_t, x, y, out| {
            out[0] = target(y) - x[0];
        },
    );
    let sigma = matrix_field(
        "root-two",
        1,
        1,
        NO_ARGS,
        HolderMeta::lipschitz(),
        |_t, _x, _y, out| {
            out[0] = std::f64::consts::SQRT_2;
        },
    );
    (b, sigma)
}

fn identity_matrix(d2: usize) -> CoefficientField {
    matrix_field(
        "identity",
        d2,
        d2,
        NO_ARGS,
        HolderMeta::lipschitz(),
        move |_t, _x, _y, out| {
            out.fill(0.0);
            for i in 0..d2 {
                out[i * d2 + i] = 1.0;
            }
        },
    )
}

fn scalar_target(y: &[f64]) -> f64 {
    y[0].tanh()
}

fn planar_target(y: &[f64]) -> f64 {
    (0.5 * (y[0] + y[1])).tanh()
}

/// E sin(X) for X ~ N(m, 1).
fn gaussian_sine_mean(m: f64) -> f64 {
    m.sin() * (-0.5f64).exp()
}

/// E exp(−X²) for X ~ N(m, 1).
fn gaussian_sq_exp_mean(m: f64) -> f64 {
    (-m * m / 3.0).exp() / 3.0f64.sqrt()
}

fn holder_term(y: f64, alpha: f64) -> f64 {
    y.abs().powf(alpha).min(1.0)
}

fn ou_smooth_system() -> SlowFastSystem {
    let (b, sigma) = ou_fast(scalar_target);
    let f = vector_field(
        "sine-minus-y",
        1,
        Reads::XY,
        HolderMeta::new(1.0, 2.0, 1.0).unwrap(),
        |_t, x, y, out| {
            out[0] = x[0].sin() - y[0];
        },
    );
    SlowFastSystem::new(1, 1, b, sigma, f, identity_matrix(1), DEFAULT_EPSILON, "ou-smooth")
        .expect("static construction")
}

fn ou_smooth_effective() -> EffectiveSystem {
    EffectiveSystem::closed_form(
        1,
        |_t, y, out| {
            out[0] = gaussian_sine_mean(y[0].tanh()) - y[0];
        },
        |_t, _y, out| {
            out[0] = 1.0;
        },
    )
}

fn ou_holder_system(alpha: f64, label: &str) -> SlowFastSystem {
    let (b, sigma) = ou_fast(scalar_target);
    let f = vector_field(
        "sine-plus-cusp",
        1,
        Reads::XY,
        HolderMeta::new(1.0, alpha, 1.0).unwrap(),
        move |_t, x, y, out| {
            out[0] = x[0].sin() + holder_term(y[0], alpha) - y[0];
        },
    );
    SlowFastSystem::new(1, 1, b, sigma, f, identity_matrix(1), DEFAULT_EPSILON, label)
        .expect("static construction")
}

fn ou_holder_effective(alpha: f64) -> EffectiveSystem {
    EffectiveSystem::closed_form(
        1,
        move |_t, y, out| {
            out[0] = gaussian_sine_mean(y[0].tanh()) + holder_term(y[0], alpha) - y[0];
        },
        |_t, _y, out| {
            out[0] = 1.0;
        },
    )
}

fn ou_holder_half_system() -> SlowFastSystem {
    ou_holder_system(0.5, "ou-holder-0.5")
}

fn ou_holder_half_effective() -> EffectiveSystem {
    ou_holder_effective(0.5)
}

fn ou_holder_one_system() -> SlowFastSystem {
    ou_holder_system(1.0, "ou-holder-1.0")
}

fn ou_holder_one_effective() -> EffectiveSystem {
    ou_holder_effective(1.0)
}

fn fully_coupled_system() -> SlowFastSystem {
    let (b, sigma) = ou_fast(scalar_target);
    // The coupling amplitude sets the size of the weak-error constant;
    // 4 keeps a measurable gap above the Monte Carlo floor without the
    // saturation curvature that bends the fitted rate at larger values.
    let f = vector_field(
        "scaled-sine-minus-y",
        1,
        Reads::XY,
        HolderMeta::new(1.0, 2.0, 1.0).unwrap(),
        |_t, x, y, out| {
            out[0] = 4.0 * x[0].sin() - y[0];
        },
    );
    let g = matrix_field(
        "coupled-amplitude",
        1,
        1,
        Reads::XY,
        HolderMeta::new(1.0, 2.0, 1.0).unwrap(),
        |_t, x, y, out| {
            let h = 0.5 * y[0].tanh().powi(2);
            out[0] = (1.0 + 0.5 * (-x[0] * x[0]).exp() + h).sqrt();
        },
    );
    SlowFastSystem::new(1, 1, b, sigma, f, g, DEFAULT_EPSILON, "fully-coupled-weak")
        .expect("static construction")
}

fn fully_coupled_effective() -> EffectiveSystem {
    EffectiveSystem::closed_form(
        1,
        |_t, y, out| {
            out[0] = 4.0 * gaussian_sine_mean(y[0].tanh()) - y[0];
        },
        |_t, y, out| {
            let m = y[0].tanh();
            let h = 0.5 * m.powi(2);
            out[0] = (1.0 + 0.5 * gaussian_sq_exp_mean(m) + h).sqrt();
        },
    )
}

fn unbounded_local_system() -> SlowFastSystem {
    let (b, sigma) = ou_fast(planar_target);
    let f = vector_field(
        "sine-minus-each",
        2,
        Reads::XY,
        HolderMeta::new(1.0, 2.0, 1.0).unwrap(),
        |_t, x, y, out| {
            out[0] = x[0].sin() - y[0];
            out[1] = x[0].sin() - y[1];
        },
    );
    SlowFastSystem::new(1, 2, b, sigma, f, identity_matrix(2), DEFAULT_EPSILON, "unbounded-local")
        .expect("static construction")
}

fn unbounded_local_effective() -> EffectiveSystem {
    EffectiveSystem::closed_form(
        2,
        |_t, y, out| {
            let s = gaussian_sine_mean((0.5 * (y[0] + y[1])).tanh());
            out[0] = s - y[0];
            out[1] = s - y[1];
        },
        |_t, _y, out| {
            out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        },
    )
}
