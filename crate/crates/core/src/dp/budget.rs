//! Privacy budgets and their textual forms.
//!
//! Budgets are always totals over the whole image. `inf` skips noise; a
//! trailing `xD` multiplies by the latent dimension, so `1e1xD` on a 16×16
//! image is `10 · 256 = 2560` with a per-element share of 10.

use std::fmt;

use super::DpError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    Finite(f64),
    Infinite,
}

impl Epsilon {
    pub fn finite(value: f64) -> Result<Self, DpError> {
        if value.is_finite() && value > 0.0 {
            Ok(Epsilon::Finite(value))
        } else {
            Err(DpError::Usage(format!(
                "privacy budget must be a positive finite number or inf, got {value}"
            )))
        }
    }

    /// Parses `inf`, a plain number, or `<A>xD` meaning `A · dim`.
    pub fn parse(expr: &str, dim: usize) -> Result<Self, DpError> {
        let e = expr.trim();
        if matches!(e.to_ascii_lowercase().as_str(), "inf" | "infinity" | "∞") {
            return Ok(Epsilon::Infinite);
        }
        let bad = || {
            DpError::Usage(format!(
                "cannot parse privacy budget {expr:?} (use inf, a number, or AxD such as 1e2xD)"
            ))
        };
        let value = match e.strip_suffix("xD").or_else(|| e.strip_suffix("xd")) {
            Some(a) => a.parse::<f64>().map_err(|_| bad())? * dim as f64,
            None => e.parse::<f64>().map_err(|_| bad())?,
        };
        Self::finite(value)
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Epsilon::Infinite)
    }

    /// Total budget; `f64::INFINITY` for the sentinel.
    pub fn total(&self) -> f64 {
        match *self {
            Epsilon::Finite(v) => v,
            Epsilon::Infinite => f64::INFINITY,
        }
    }

    /// Equal share ε/D.
    pub fn per_element(&self, dim: usize) -> f64 {
        self.total() / dim as f64
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::Finite(v) => write!(f, "{v}"),
            Epsilon::Infinite => f.write_str("inf"),
        }
    }
}

/// Per-element budget split.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetTable {
    pub total: Epsilon,
    pub per_element: Vec<f64>,
}

impl BudgetTable {
    pub fn sum(&self) -> f64 {
        self.per_element.iter().sum()
    }
}

pub fn epsilon_decompose(epsilon: Epsilon, dim: usize) -> BudgetTable {
    BudgetTable {
        total: epsilon,
        per_element: vec![epsilon.per_element(dim); dim],
    }
}
