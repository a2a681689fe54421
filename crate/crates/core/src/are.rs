//! Asymptotic relative efficiency of the composite quantile estimator
//! against local linear regression at a boundary point.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernels::{one_sided_moments, KernelSpec, Side};
use crate::laws::ErrorLaw;
use crate::lcqr::quantile_levels;
use crate::nuisance::QuantileGrid;
use crate::sandwich::{b_y, build_asymptotic};

/// Exact quantile grid of a known law.
pub fn grid_from_law(law: &ErrorLaw, q: usize) -> Result<QuantileGrid> {
    let mut c = Vec::with_capacity(q);
    let mut f = Vec::with_capacity(q);
    for tau in quantile_levels(q) {
        let ck = law.quantile(tau)?;
        c.push(ck);
        f.push(law.pdf(ck));
    }
    Ok(QuantileGrid::from_parts(c, f))
}

/// `(b_Y / b)^(-4/5)`.
pub fn compute_are(law: &ErrorLaw, q: usize, kernel: &KernelSpec) -> Result<f64> {
    let moments = one_sided_moments(kernel, Side::Above, 7)?;
    let grid = grid_from_law(law, q)?;
    let set = build_asymptotic(&moments, &grid, 1)?;
    Ok((b_y(&set) / moments.b()).powf(-0.8))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreTable {
    pub qs: Vec<usize>,
    pub laws: Vec<String>,
    /// `values[law][q]`.
    pub values: Vec<Vec<f64>>,
}

pub fn are_table(laws: &[ErrorLaw], qs: &[usize], kernel: &KernelSpec) -> Result<AreTable> {
    let mut values = Vec::with_capacity(laws.len());
    for law in laws {
        let row: Result<Vec<f64>> = qs.iter().map(|&q| compute_are(law, q, kernel)).collect();
        values.push(row?);
    }
    Ok(AreTable {
        qs: qs.to_vec(),
        laws: laws.iter().map(|l| l.label()).collect(),
        values,
    })
}

impl AreTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("law");
        for q in &self.qs {
            out.push_str(&format!(",q={q}"));
        }
        out.push('\n');
        for (law, row) in self.laws.iter().zip(&self.values) {
            out.push_str(law);
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| law |");
        for q in &self.qs {
            out.push_str(&format!(" q={q} |"));
        }
        out.push_str("\n|---|");
        for _ in &self.qs {
            out.push_str("---|");
        }
        out.push('\n');
        for (law, row) in self.laws.iter().zip(&self.values) {
            out.push_str(&format!("| {law} |"));
            for v in row {
                out.push_str(&format!(" {v:.6} |"));
            }
            out.push('\n');
        }
        out
    }
}
