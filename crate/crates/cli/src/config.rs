//! Run configuration: JSON with five optional blocks. Missing keys take the
//! defaults below; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mfg_inverse::forward::{ForwardSettings, PhiMetric, StepSizes};
use mfg_inverse::inverse::InversionConfig;
use mfg_inverse::params::InverseSettings;
use mfg_inverse::{Error, Grid, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridBlock,
    pub model: ModelBlock,
    pub solver: SolverBlock,
    pub inverse: InverseBlock,
    pub scenario: ScenarioBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridBlock {
    /// `[x_min, x_max, y_min, y_max]`.
    pub domain: [f64; 4],
    pub h_space: f64,
    pub h_time: f64,
    pub t_end: f64,
    pub inner: [f64; 4],
}

impl Default for GridBlock {
    fn default() -> Self {
        Self {
            domain: [-1.0, 1.0, -1.0, 1.0],
            h_space: 0.05,
            h_time: 0.04,
            t_end: 1.0,
            inner: [-0.5, 0.5, -0.5, 0.5],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum K0Policy {
    /// Chosen so the kernel integrates to one over the domain.
    Normalise,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub nu: f64,
    pub kappa0: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub k0: K0Policy,
    /// Lattice `{(k₁π, k₂π) : 0 ≤ k₁ ≤ k1_max, |k₂| ≤ k2_max}`.
    pub k1_max: usize,
    pub k2_max: usize,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            nu: 0.1,
            kappa0: 2.0,
            eps1: 2.0,
            eps2: 1.0,
            k0: K0Policy::Normalise,
            k1_max: 2,
            k2_max: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Parabolic,
    H1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverBlock {
    pub alpha_rho: f64,
    pub alpha_m: f64,
    pub alpha_phi: f64,
    pub alpha_a: f64,
    pub e_tol: f64,
    pub max_iter: usize,
    pub metric: MetricName,
    pub conserve_mass: bool,
}

impl Default for SolverBlock {
    fn default() -> Self {
        let f = ForwardSettings::<f64>::default();
        Self {
            alpha_rho: f.steps.alpha_rho,
            alpha_m: f.steps.alpha_m,
            alpha_phi: f.steps.alpha_phi,
            alpha_a: f.steps.alpha_a,
            e_tol: f.e_tol,
            max_iter: f.max_iter,
            metric: MetricName::Parabolic,
            conserve_mass: f.conserve_mass,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverseBlock {
    pub gamma_kappa: f64,
    pub gamma_mu: f64,
    pub alpha_kappa: f64,
    pub alpha_mu: f64,
    pub alpha_lambda: f64,
    pub n_max: usize,
    pub mask_zero_cells: f64,
    pub mask_one_cells: f64,
    pub psi_sigma_cells: f64,
    pub psi_radius: usize,
    pub checkpoint_stride: usize,
    pub max_flagged: usize,
}

impl Default for InverseBlock {
    fn default() -> Self {
        let s = InverseSettings::<f64>::default();
        let c = InversionConfig::<f64>::default();
        Self {
            gamma_kappa: s.gamma_kappa,
            gamma_mu: s.gamma_mu,
            alpha_kappa: s.alpha_kappa,
            alpha_mu: s.alpha_mu,
            alpha_lambda: s.alpha_lambda,
            n_max: c.n_max,
            mask_zero_cells: s.mask_zero_cells,
            mask_one_cells: s.mask_one_cells,
            psi_sigma_cells: s.psi_sigma_cells,
            psi_radius: s.psi_radius,
            checkpoint_stride: c.checkpoint_stride,
            max_flagged: c.max_flagged,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioBlock {
    pub example: u8,
    pub events: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ScenarioBlock {
    fn default() -> Self {
        Self {
            example: 1,
            events: 16,
            noise: 0.1,
            seed: 2024,
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(what.to_string()))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn nonneg(v: f64) -> bool {
    v >= 0.0 && v.is_finite()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        check(
            positive(g.h_space) && positive(g.h_time) && positive(g.t_end),
            "grid steps must be positive",
        )?;
        check(
            g.domain.iter().chain(&g.inner).all(|v| v.is_finite()),
            "grid bounds must be finite",
        )?;
        let m = &self.model;
        check(nonneg(m.nu), "model.nu must be non-negative")?;
        check(
            positive(m.kappa0) && positive(m.eps1),
            "model.kappa0 and model.eps1 must be positive",
        )?;
        check(m.eps1 <= m.kappa0, "model.eps1 must not exceed model.kappa0")?;
        check(m.eps2.is_finite(), "model.eps2 must be finite")?;
        check(m.k1_max + m.k2_max > 0, "frequency lattice is empty")?;
        if let K0Policy::Fixed(v) = m.k0 {
            check(v.is_finite(), "model.k0 must be finite")?;
        }
        let s = &self.solver;
        check(
            [s.alpha_rho, s.alpha_m, s.alpha_phi, s.alpha_a, s.e_tol]
                .iter()
                .all(|v| positive(*v)),
            "solver steps and tolerance must be positive",
        )?;
        check(s.max_iter > 0, "solver.max_iter must be positive")?;
        let i = &self.inverse;
        check(
            [i.alpha_kappa, i.alpha_mu, i.alpha_lambda, i.psi_sigma_cells]
                .iter()
                .all(|v| positive(*v)),
            "inverse steps and smoothing width must be positive",
        )?;
        check(
            [i.gamma_kappa, i.gamma_mu, i.mask_zero_cells]
                .iter()
                .all(|v| nonneg(*v)),
            "inverse weights must be non-negative",
        )?;
        check(
            i.mask_one_cells > i.mask_zero_cells,
            "inverse.mask_one_cells must exceed mask_zero_cells",
        )?;
        check(
            i.checkpoint_stride > 0 && i.max_flagged > 0,
            "checkpoint stride and flag limit must be positive",
        )?;
        let c = &self.scenario;
        check((1..=3).contains(&c.example), "scenario.example must be 1, 2 or 3")?;
        check(c.events > 0, "scenario.events must be positive")?;
        check(nonneg(c.noise), "scenario.noise must be non-negative")?;
        self.grid()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        let g = &self.grid;
        Grid::new(g.domain, g.h_space, g.t_end, g.h_time, g.inner)
    }

    /// SHA-256 over the grid block, as hex.
    pub fn grid_hash(&self) -> String {
        let text = serde_json::to_string(&self.grid).expect("grid block serialises");
        format!("{:x}", Sha256::digest(text.as_bytes()))
    }

    pub fn forward_settings(&self) -> ForwardSettings<f64> {
        let s = &self.solver;
        ForwardSettings {
            steps: StepSizes {
                alpha_rho: s.alpha_rho,
                alpha_m: s.alpha_m,
                alpha_phi: s.alpha_phi,
                alpha_a: s.alpha_a,
            },
            e_tol: s.e_tol,
            max_iter: s.max_iter,
            metric: match s.metric {
                MetricName::Parabolic => PhiMetric::Parabolic,
                MetricName::H1 => PhiMetric::H1,
            },
            conserve_mass: s.conserve_mass,
            ..ForwardSettings::default()
        }
    }

    pub fn inversion_config(&self) -> InversionConfig<f64> {
        let i = &self.inverse;
        InversionConfig {
            n_max: i.n_max,
            forward: self.forward_settings(),
            inverse: InverseSettings {
                eps1: self.model.eps1,
                eps2: self.model.eps2,
                gamma_kappa: i.gamma_kappa,
                gamma_mu: i.gamma_mu,
                alpha_kappa: i.alpha_kappa,
                alpha_mu: i.alpha_mu,
                alpha_lambda: i.alpha_lambda,
                mask_zero_cells: i.mask_zero_cells,
                mask_one_cells: i.mask_one_cells,
                psi_sigma_cells: i.psi_sigma_cells,
                psi_radius: i.psi_radius,
            },
            checkpoint_stride: i.checkpoint_stride,
            max_flagged: i.max_flagged,
        }
    }
}
