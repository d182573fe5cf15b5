use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Every constant entering the stability and contraction estimates.
///
/// Inputs are the assumption constants (`c` through `L_h`); `mu`, `M_Y`,
/// `L_Y`, `M_muT` and `L_muT` are normally filled by
/// [`derive_constants`](crate::analysis::derive_constants), which lists the
/// names it computed in `derived`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsLedger<T> {
    /// One-sided Lipschitz constant of the drift in x (may be negative).
    #[serde(default)]
    pub c: Option<T>,
    #[serde(default, rename = "L_b_alpha")]
    pub l_b_alpha: Option<T>,
    #[serde(default, rename = "L_sigma_x")]
    pub l_sigma_x: Option<T>,
    #[serde(default)]
    pub mu: Option<T>,
    /// Bound on `‖D_xψ‖`.
    #[serde(default, rename = "M")]
    pub m_psi: Option<T>,
    /// Bound on `‖D_xφ‖`.
    #[serde(default, rename = "a")]
    pub a_phi: Option<T>,
    #[serde(default, rename = "L_phi_grad")]
    pub l_phi_grad: Option<T>,
    #[serde(default, rename = "L_b_jac")]
    pub l_b_jac: Option<T>,
    #[serde(default, rename = "L_psi_grad")]
    pub l_psi_grad: Option<T>,
    #[serde(default, rename = "M_Y")]
    pub m_y: Option<T>,
    #[serde(default, rename = "L_h")]
    pub l_h: Option<T>,
    #[serde(default, rename = "L_Y")]
    pub l_y: Option<T>,
    #[serde(default, rename = "M_muT")]
    pub m_mu_t: Option<T>,
    #[serde(default, rename = "L_muT")]
    pub l_mu_t: Option<T>,
    #[serde(default)]
    pub horizon: Option<T>,
    #[serde(default)]
    pub derived: Vec<String>,
}

/// Ledger names in display order; also the accepted override keys.
pub const LEDGER_KEYS: [&str; 15] = [
    "c", "L_b_alpha", "L_sigma_x", "mu", "M", "a", "L_phi_grad", "L_b_jac", "L_psi_grad", "M_Y",
    "L_h", "L_Y", "M_muT", "L_muT", "horizon",
];

impl<T: Real> ConstantsLedger<T> {
    fn slot(&mut self, key: &str) -> Option<&mut Option<T>> {
        Some(match key {
            "c" => &mut self.c,
            "L_b_alpha" => &mut self.l_b_alpha,
            "L_sigma_x" => &mut self.l_sigma_x,
            "mu" => &mut self.mu,
            "M" => &mut self.m_psi,
            "a" => &mut self.a_phi,
            "L_phi_grad" => &mut self.l_phi_grad,
            "L_b_jac" => &mut self.l_b_jac,
            "L_psi_grad" => &mut self.l_psi_grad,
            "M_Y" => &mut self.m_y,
            "L_h" => &mut self.l_h,
            "L_Y" => &mut self.l_y,
            "M_muT" => &mut self.m_mu_t,
            "L_muT" => &mut self.l_mu_t,
            "horizon" => &mut self.horizon,
            _ => return None,
        })
    }

    pub fn get(&self, key: &str) -> Option<T> {
        let mut copy = self.clone();
        copy.slot(key).and_then(|s| *s)
    }

    /// Sets a constant by its ledger name. Explicitly set values are no
    /// longer marked as derived.
    pub fn set(&mut self, key: &str, value: T) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::InvalidParameter {
                key: key.into(),
                reason: "non-finite constant".into(),
            });
        }
        match self.slot(key) {
            Some(s) => *s = Some(value),
            None => {
                return Err(Error::Config(format!("unknown ledger constant `{key}`")));
            }
        }
        self.derived.retain(|d| d != key);
        Ok(())
    }

    /// `mu` if set, otherwise `-(c + L_sigma_x²/2)` when both inputs exist.
    pub fn mu_value(&self) -> Option<T> {
        self.mu.or_else(|| {
            let c = self.c?;
            let l = self.l_sigma_x?;
            Some(-(c + l * l / T::lit(2.0)))
        })
    }

    /// `Some(true)` when `L_muT < 1`.
    pub fn contractive(&self) -> Option<bool> {
        self.l_mu_t.map(|l| l < T::one())
    }

    pub fn require(&self, keys: &[&str]) -> Result<Vec<T>> {
        let mut missing = Vec::new();
        let mut vals = Vec::with_capacity(keys.len());
        for k in keys {
            let v = if *k == "mu" { self.mu_value() } else { self.get(k) };
            match v {
                Some(v) => vals.push(v),
                None => missing.push((*k).to_string()),
            }
        }
        if missing.is_empty() {
            Ok(vals)
        } else {
            Err(Error::MissingConstants(missing))
        }
    }

    pub fn entries(&self) -> Vec<(&'static str, Option<T>)> {
        LEDGER_KEYS.iter().map(|k| (*k, self.get(k))).collect()
    }
}
