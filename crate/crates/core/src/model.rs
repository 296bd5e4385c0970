//! Model parameters and the precomputed discretisation shared by all solves.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;
use crate::kernel::{FeatureTable, FrequencySet};
use crate::real::Real;

/// Speed field, interaction kernel coefficients and their known background.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// `κ(x)`, one spatial slice.
    pub kappa: Array2<T>,
    /// Reduced kernel coefficients, one per lattice frequency.
    pub mu: Vec<T>,
    /// Viscosity `ν`.
    pub nu: T,
    /// Constant kernel offset; it shifts the value function by a spatial
    /// constant only and does not enter the discrete dynamics.
    pub k0: T,
    pub kappa0: Array2<T>,
    pub mu0: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    /// Parameters equal to the background `(κ₀, μ₀)`.
    pub fn background(kappa0: Array2<T>, mu0: Vec<T>, nu: T, k0: T) -> Self {
        Self {
            kappa: kappa0.clone(),
            mu: mu0.clone(),
            nu,
            k0,
            kappa0,
            mu0,
        }
    }

    pub fn validate(&self, grid: &SpaceTimeGrid<T>, freqs: &FrequencySet<T>) -> Result<()> {
        let shape = (grid.nx, grid.ny);
        if self.kappa.dim() != shape || self.kappa0.dim() != shape {
            return Err(Error::Shape(format!(
                "speed field has shape {:?}, grid is {:?}",
                self.kappa.dim(),
                shape
            )));
        }
        if self.mu.len() != freqs.len() || self.mu0.len() != freqs.len() {
            return Err(Error::Config(format!(
                "{} kernel coefficients for {} frequencies",
                self.mu.len(),
                freqs.len()
            )));
        }
        if self.kappa.iter().any(|k| !(*k > T::zero()) || !k.is_finite()) {
            return Err(Error::Config("speed field must be positive and finite".into()));
        }
        if self.mu.iter().any(|m| !m.is_finite()) || !self.nu.is_finite() || self.nu < T::zero() {
            return Err(Error::Config("kernel coefficients and viscosity must be finite".into()));
        }
        Ok(())
    }
}

/// Grid, frequency lattice and the operators precomputed from them.
#[derive(Clone, Debug)]
pub struct MfgContext<T> {
    pub grid: SpaceTimeGrid<T>,
    pub freqs: FrequencySet<T>,
    pub features: FeatureTable<T>,
}

impl<T: Real> MfgContext<T> {
    pub fn new(grid: SpaceTimeGrid<T>, freqs: FrequencySet<T>) -> Self {
        let features = FeatureTable::new(&grid, &freqs);
        Self { grid, freqs, features }
    }
}
