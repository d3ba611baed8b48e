//! Units and datasets: treatment, covariates and an estimated quantile
//! function per unit.

use crate::distspace::{QuantileFunction, QuantileGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub id: String,
    pub a: f64,
    pub x: Vec<f64>,
    pub yq: QuantileFunction,
}

impl Unit {
    pub fn new(id: impl Into<String>, a: f64, x: Vec<f64>, yq: QuantileFunction) -> Result<Self> {
        let id = id.into();
        if !a.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "unit {id}: treatment and covariates must be finite"
            )));
        }
        Ok(Self { id, a, x, yq })
    }
}

/// N independent units sharing a covariate dimension and quantile grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    units: Vec<Unit>,
    grid: QuantileGrid,
    d: usize,
}

impl Dataset {
    pub fn new(units: Vec<Unit>) -> Result<Self> {
        let first = units
            .first()
            .ok_or_else(|| Error::Data("dataset has no units".into()))?;
        let grid = first.yq.grid().clone();
        let d = first.x.len();
        for u in &units {
            if u.x.len() != d {
                return Err(Error::Data(format!(
                    "unit {} has {} covariates, expected {d}",
                    u.id,
                    u.x.len()
                )));
            }
            if !u.yq.grid().same_as(&grid) {
                return Err(Error::GridMismatch);
            }
        }
        Ok(Self { units, grid, d })
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    pub fn covariate_dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn treatments(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.a).collect()
    }

    /// A new dataset holding the units at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.units[i].clone()).collect())
    }
}
