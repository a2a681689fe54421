//! The observed running variable, outcome, treatment and covariates.

use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::kernels::Side;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub t: Option<Vec<f64>>,
    /// Covariates stored column-wise.
    pub z: Option<Vec<Vec<f64>>>,
    pub cutoff: f64,
}

/// Observations on one side of the cutoff, with the running variable centered.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SideData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub t: Option<Vec<f64>>,
}

impl SideData {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Same side with the treatment indicator as the outcome.
    pub fn treatment_as_outcome(&self) -> Option<SideData> {
        self.t.as_ref().map(|t| SideData {
            x: self.x.clone(),
            y: t.clone(),
            t: None,
        })
    }
}

impl RdSample {
    pub fn new(x: Vec<f64>, y: Vec<f64>, cutoff: f64) -> Result<Self> {
        let s = RdSample {
            x,
            y,
            t: None,
            z: None,
            cutoff,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_treatment(mut self, t: Vec<f64>) -> Result<Self> {
        self.t = Some(t);
        self.validate()?;
        Ok(self)
    }

    pub fn with_covariates(mut self, z: Vec<Vec<f64>>) -> Result<Self> {
        self.z = Some(z);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.len();
        if n == 0 {
            return Err(RdError::EmptyAfterFiltering);
        }
        if self.y.len() != n {
            return Err(RdError::InvalidInput("x and y lengths differ".into()));
        }
        if !self.cutoff.is_finite() {
            return Err(RdError::InvalidInput("cutoff must be finite".into()));
        }
        if let Some(i) = (0..n).find(|&i| !self.x[i].is_finite() || !self.y[i].is_finite()) {
            return Err(RdError::InvalidInput(format!(
                "non-finite value at index {i}"
            )));
        }
        if let Some(t) = &self.t {
            if t.len() != n {
                return Err(RdError::InvalidInput("treatment length differs".into()));
            }
            if t.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(RdError::InvalidInput(
                    "treatment entries must be 0 or 1".into(),
                ));
            }
        }
        if let Some(z) = &self.z {
            for (j, col) in z.iter().enumerate() {
                if col.len() != n {
                    return Err(RdError::InvalidInput(format!(
                        "covariate {j} length differs"
                    )));
                }
                if col.iter().any(|v| !v.is_finite()) {
                    return Err(RdError::InvalidInput(format!(
                        "covariate {j} has non-finite values"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Points with `x >= cutoff` (above) or `x < cutoff` (below).
    pub fn side(&self, side: Side) -> SideData {
        let mut out = SideData {
            t: self.t.as_ref().map(|_| Vec::new()),
            ..Default::default()
        };
        for i in 0..self.x.len() {
            let xc = self.x[i] - self.cutoff;
            let keep = match side {
                Side::Above => xc >= 0.0,
                Side::Below => xc < 0.0,
            };
            if keep {
                out.x.push(xc);
                out.y.push(self.y[i]);
                if let (Some(dst), Some(src)) = (out.t.as_mut(), self.t.as_ref()) {
                    dst.push(src[i]);
                }
            }
        }
        out
    }

    pub fn n_side(&self, side: Side) -> usize {
        self.x
            .iter()
            .filter(|&&v| match side {
                Side::Above => v >= self.cutoff,
                Side::Below => v < self.cutoff,
            })
            .count()
    }
}
