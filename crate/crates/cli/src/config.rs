//! Flat experiment configuration: one TOML file, flag overrides, and a
//! content hash stamped into every output file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slowfast_core::MeasureConfig;

/// Every knob of every subcommand in one flat record. A subcommand reads
/// the fields it needs and ignores the rest, so a single file can drive a
/// whole campaign. Unknown keys are rejected, missing keys take defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Zoo entry the experiment runs on.
    pub zoo: String,
    /// Decreasing time-scale ladder; empty means the subcommand default.
    pub epsilons: Vec<f64>,
    /// Slow (macro) step size.
    pub macro_dt: f64,
    /// Lower bound on micro substeps per macro step; the stability rule
    /// raises it per rung as needed.
    pub micro_substeps: usize,
    /// Simulated horizon.
    pub horizon: f64,
    /// Monte Carlo paths per rung.
    pub n_mc: u64,
    /// Root of every noise stream in the run.
    pub master_seed: u64,
    /// Time-scale for single-path simulation.
    pub epsilon: f64,
    /// Observation time of the weak experiment.
    pub t_probe: f64,
    /// Backward probe time for the pde-limit experiment.
    pub pde_probe_t: f64,
    /// Exponent of the synthetic kink field in mollify-check.
    pub alpha: f64,
    /// Mollification levels.
    pub levels: Vec<u32>,
    /// Slow value the Poisson check freezes the fast equation at.
    pub freeze_y: f64,
    /// Horizon of the time-integral representation in poisson-check.
    pub t_max: f64,
    /// Grid size for the averaging and Poisson grids.
    pub points: usize,
    /// Grid bounds: slow values for `average`, fast values for
    /// `poisson-check`.
    pub grid_lo: f64,
    pub grid_hi: f64,
    /// Step size of the frozen chain (measure estimation, Poisson paths).
    pub chain_dt: f64,
    /// Chain time discarded before sampling.
    pub burn_in: f64,
    /// Thinned samples kept per measure estimate.
    pub samples: usize,
    /// Chain steps between kept samples.
    pub thinning: usize,
    /// Output directory.
    pub outdir: PathBuf,
    /// Rayon pool size; 0 keeps the library default.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            zoo: "ou-smooth".into(),
            epsilons: Vec::new(),
            macro_dt: 1e-2,
            micro_substeps: 1,
            horizon: 1.0,
            n_mc: 1000,
            master_seed: 42,
            epsilon: 0.1,
            t_probe: 1.0,
            pde_probe_t: 0.5,
            alpha: 0.5,
            levels: vec![4, 8, 16, 32, 64],
            freeze_y: 0.0,
            t_max: 20.0,
            points: 21,
            grid_lo: -2.0,
            grid_hi: 2.0,
            chain_dt: 1e-2,
            burn_in: 5.0,
            samples: 4000,
            thinning: 20,
            outdir: PathBuf::from("out"),
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("malformed config file {}", path.display()))?;
        Ok(cfg)
    }

    /// Range checks, each diagnostic naming the offending field.
    pub fn check(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if !(v > 0.0) || !v.is_finite() {
                bail!("field `{name}` must be positive and finite, got {v}");
            }
            Ok(())
        }
        positive("macro_dt", self.macro_dt)?;
        positive("horizon", self.horizon)?;
        positive("epsilon", self.epsilon)?;
        positive("t_probe", self.t_probe)?;
        positive("pde_probe_t", self.pde_probe_t)?;
        positive("chain_dt", self.chain_dt)?;
        if !(self.alpha > 0.0 && self.alpha <= 2.0) {
            bail!("field `alpha` must lie in (0, 2], got {}", self.alpha);
        }
        if self.n_mc < 2 {
            bail!("field `n_mc` must be at least 2, got {}", self.n_mc);
        }
        if !self.freeze_y.is_finite() {
            bail!("field `freeze_y` must be finite, got {}", self.freeze_y);
        }
        if !(self.t_max >= 1.0) || !self.t_max.is_finite() {
            bail!("field `t_max` must be at least 1, got {}", self.t_max);
        }
        if self.points < 3 {
            bail!("field `points` must be at least 3, got {}", self.points);
        }
        if !(self.grid_lo < self.grid_hi)
            || !self.grid_lo.is_finite()
            || !self.grid_hi.is_finite()
        {
            bail!(
                "fields `grid_lo` < `grid_hi` must bound a finite interval, got [{}, {}]",
                self.grid_lo,
                self.grid_hi
            );
        }
        if !(self.burn_in >= 0.0) || !self.burn_in.is_finite() {
            bail!("field `burn_in` must be nonnegative, got {}", self.burn_in);
        }
        if self.samples == 0 {
            bail!("field `samples` must be at least 1");
        }
        if self.thinning == 0 {
            bail!("field `thinning` must be at least 1");
        }
        for (i, &e) in self.epsilons.iter().enumerate() {
            if !(e > 0.0) || !e.is_finite() {
                bail!("field `epsilons` must be positive and finite, got {e}");
            }
            if i > 0 && e >= self.epsilons[i - 1] {
                bail!("field `epsilons` must be strictly decreasing");
            }
        }
        Ok(())
    }

    /// Hash of the scientific content: `workers` and `outdir` never change
    /// a result byte, so they are pinned to neutral values first.
    pub fn content_hash(&self) -> String {
        let mut neutral = self.clone();
        neutral.workers = 0;
        neutral.outdir = PathBuf::from("out");
        let text = toml::to_string(&neutral).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        let mut hex = String::with_capacity(16);
        for b in &digest[..8] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    pub fn measure_config(&self) -> MeasureConfig {
        MeasureConfig {
            dt: self.chain_dt,
            burn_in: self.burn_in,
            count: self.samples,
            thinning: self.thinning,
        }
    }

    /// The ladder to run: the configured one, or `fallback` when empty.
    pub fn ladder(&self, fallback: &[f64]) -> Vec<f64> {
        if self.epsilons.is_empty() {
            fallback.to_vec()
        } else {
            self.epsilons.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml_losslessly() {
        let mut cfg = ExperimentConfig::default();
        cfg.zoo = "ou-holder-0.5".into();
        cfg.epsilons = vec![0.25, 0.125, 0.0625];
        cfg.n_mc = 777;
        cfg.levels = vec![4, 16, 64];
        cfg.workers = 3;
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn missing_keys_take_defaults_and_unknown_keys_are_rejected() {
        let cfg: ExperimentConfig = toml::from_str("zoo = \"unbounded-local\"").unwrap();
        assert_eq!(cfg.zoo, "unbounded-local");
        assert_eq!(cfg.n_mc, ExperimentConfig::default().n_mc);
        let err = toml::from_str::<ExperimentConfig>("zo = \"x\"").unwrap_err();
        assert!(err.to_string().contains("zo"));
    }

    #[test]
    fn check_names_the_broken_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.macro_dt = -1.0;
        let msg = cfg.check().unwrap_err().to_string();
        assert!(msg.contains("macro_dt"), "{msg}");

        let mut cfg = ExperimentConfig::default();
        cfg.epsilons = vec![0.1, 0.2];
        let msg = cfg.check().unwrap_err().to_string();
        assert!(msg.contains("epsilons"), "{msg}");
    }

    #[test]
    fn hash_ignores_workers_and_outdir_only() {
        let base = ExperimentConfig::default();
        let mut moved = base.clone();
        moved.workers = 8;
        moved.outdir = PathBuf::from("elsewhere");
        assert_eq!(base.content_hash(), moved.content_hash());

        let mut changed = base.clone();
        changed.master_seed = 43;
        assert_ne!(base.content_hash(), changed.content_hash());
        assert_eq!(base.content_hash().len(), 16);
    }
}
