//! Pure-dephasing qubit maps, parametrised by the coherence factor `k(t)`.
//!
//! With a stationary environment the conditional maps depend only on the
//! elapsed time, `Γ_{k|j} = D(k(t_k − t_j))`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, C64};
use crate::maps::{intermediate_map, is_cptp, GammaTable, Superoperator};
use crate::tt::{build_via_gamma, divisibility_report, multistep_profile, TTHierarchy};

const MODULUS_TOL: f64 = 1e-12;

/// `ρ ↦ ρ` on populations, `ρ₁₀ ↦ k ρ₁₀`, `ρ₀₁ ↦ k̄ ρ₀₁`.
pub fn dephasing_map(k: C64) -> Result<Superoperator> {
    if k.norm() > 1.0 + MODULUS_TOL {
        return Err(Error::InvalidParameter(format!("|k| = {} exceeds 1", k.norm())));
    }
    Ok(Superoperator::from_fn(2, |rho: &CMatrix| {
        let mut out = rho.clone();
        out[(1, 0)] *= k;
        out[(0, 1)] *= k.conj();
        out
    }))
}

#[derive(Clone)]
pub enum DephasingFamily {
    Function(Arc<dyn Fn(f64) -> C64 + Send + Sync>),
    /// Values of `k` at `t = 0, Δ, 2Δ, ...`.
    Tabulated { delta: f64, values: Vec<C64> },
}

impl std::fmt::Debug for DephasingFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Function(_) => f.write_str("DephasingFamily::Function"),
            Self::Tabulated { delta, values } => f
                .debug_struct("DephasingFamily::Tabulated")
                .field("delta", delta)
                .field("values", values)
                .finish(),
        }
    }
}

impl DephasingFamily {
    pub fn function(k: impl Fn(f64) -> C64 + Send + Sync + 'static) -> Self {
        Self::Function(Arc::new(k))
    }

    /// `k(t) = e^{−γ t}`.
    pub fn exponential(gamma: f64) -> Self {
        Self::function(move |t| C64::new((-gamma * t).exp(), 0.0))
    }

    pub fn tabulated(delta: f64, values: Vec<C64>) -> Result<Self> {
        if values.first().is_none_or(|v| (v - C64::new(1.0, 0.0)).norm() > MODULUS_TOL) {
            return Err(Error::InvalidParameter("tabulated k must start with k(0) = 1".into()));
        }
        if let Some(v) = values.iter().find(|v| v.norm() > 1.0 + MODULUS_TOL) {
            return Err(Error::InvalidParameter(format!("|k| = {} exceeds 1", v.norm())));
        }
        Ok(Self::Tabulated { delta, values })
    }

    /// `k` after `n` steps of length `delta`.
    pub fn at_step(&self, n: usize, delta: f64) -> Result<C64> {
        match self {
            Self::Function(k) => Ok(k(n as f64 * delta)),
            Self::Tabulated { delta: d, values } => {
                if (d - delta).abs() > 1e-12 * d.abs().max(1.0) {
                    return Err(Error::InvalidParameter(format!("table spacing {d}, requested {delta}")));
                }
                values.get(n).copied().ok_or(Error::MissingEntry(n, 0))
            }
        }
    }

    /// `Φ_0..=Φ_steps`.
    pub fn dynamical_maps(&self, delta: f64, steps: usize) -> Result<Vec<Superoperator>> {
        (0..=steps).map(|n| dephasing_map(self.at_step(n, delta)?)).collect()
    }

    pub fn gamma_table(&self, delta: f64, steps: usize) -> Result<GammaTable> {
        let mut table = GammaTable::new(steps);
        for k in 1..=steps {
            for j in 0..k {
                table.insert(k, j, dephasing_map(self.at_step(k - j, delta)?)?);
            }
        }
        Ok(table)
    }

    pub fn hierarchy(&self, delta: f64, steps: usize) -> Result<TTHierarchy> {
        build_via_gamma(&self.gamma_table(delta, steps)?)
    }

    /// Largest `‖T_{k,k−n}‖_F` with `n ≥ 2`.
    pub fn max_multistep_norm(&self, delta: f64, steps: usize) -> Result<f64> {
        Ok(multistep_profile(&self.hierarchy(delta, steps)?).max_norm())
    }

    pub fn is_cp_divisible(&self, delta: f64, steps: usize, tol: f64) -> Result<bool> {
        Ok(divisibility_report(&self.dynamical_maps(delta, steps)?, tol)?.cp_divisible())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterexampleReport {
    pub k1: C64,
    pub k2: C64,
    pub e21_cptp: bool,
    pub e21_min_choi_eig: f64,
    pub t20_norm: f64,
}

/// Two-step dephasing: CP status of `Φ₂Φ₁⁻¹` and `‖Φ₂ − Φ₁²‖_F`.
pub fn counterexample_report(k1: C64, k2: C64) -> Result<CounterexampleReport> {
    if k1.norm() == 0.0 {
        return Err(Error::InvalidParameter("k1 = 0 makes the first map non-invertible".into()));
    }
    let phi1 = dephasing_map(k1)?;
    let phi2 = dephasing_map(k2)?;
    let e21 = intermediate_map(&phi2, &phi1)?;
    let report = is_cptp(&e21.map, MODULUS_TOL);
    let t20 = phi2.sub(&phi1.compose(&phi1));
    Ok(CounterexampleReport {
        k1,
        k2,
        e21_cptp: report.is_cptp(),
        e21_min_choi_eig: report.min_choi_eig,
        t20_norm: t20.frobenius_norm(),
    })
}

/// Largest multi-step transfer-tensor norm for `k(t) = e^{−γ t}`.
pub fn semigroup_hierarchy_check(gamma_rate: f64, delta: f64, steps: usize) -> Result<f64> {
    if gamma_rate < 0.0 {
        return Err(Error::InvalidParameter(format!("negative rate {gamma_rate}")));
    }
    DephasingFamily::exponential(gamma_rate).max_multistep_norm(delta, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::hermitian_eigh;
    use crate::maps::choi;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn map_examples() {
        assert!(dephasing_map(c(1.0)).unwrap().distance(&Superoperator::identity(2)) < 1e-15);
        let rho = CMatrix::from_row_slice(2, 2, &[c(0.3), C64::new(0.1, 0.2), C64::new(0.1, -0.2), c(0.7)]);
        let out = dephasing_map(c(0.0)).unwrap().apply(&rho);
        assert_eq!(out[(0, 1)], c(0.0));
        assert_eq!(out[(1, 0)], c(0.0));
        assert_eq!(out[(1, 1)], c(0.7));
        let k = C64::new(0.6, 0.3);
        let out = dephasing_map(k).unwrap().apply(&rho);
        assert!((out[(1, 0)] - k * rho[(1, 0)]).norm() < 1e-15);
        assert!((out[(0, 1)] - k.conj() * rho[(0, 1)]).norm() < 1e-15);
        assert!(dephasing_map(c(1.01)).is_err());
    }

    #[test]
    fn choi_of_real_factor() {
        // Choi spectrum of D(k) for real k is {1 + k, 1 − k, 0, 0}.
        let k = (-0.3f64).exp();
        let eig = hermitian_eigh(choi(&dephasing_map(c(k)).unwrap()).matrix()).unwrap();
        assert!(eig.values[0] >= -1e-14);
        assert!((eig.values[3] - (1.0 + k)).abs() < 1e-12);
        assert!((eig.values[2] - (1.0 - k)).abs() < 1e-12);
    }

    #[test]
    fn counterexamples() {
        let g = 0.5f64;
        let semi = counterexample_report(c((-g).exp()), c((-2.0 * g).exp())).unwrap();
        assert!(semi.e21_cptp && semi.t20_norm <= 1e-12);
        let r = counterexample_report(c(0.8), c(0.7)).unwrap();
        assert!(r.e21_cptp);
        // Φ₂ − Φ₁² only differs on the two coherence entries by 0.06.
        assert!((r.t20_norm - 0.06 * 2f64.sqrt()).abs() < 1e-12);
        let bad = counterexample_report(c(0.3), c(0.5)).unwrap();
        assert!(!bad.e21_cptp);
        assert!((bad.e21_min_choi_eig - (1.0 - 0.5 / 0.3)).abs() < 1e-12);
        assert!(counterexample_report(c(0.0), c(0.5)).is_err());
    }

    #[test]
    fn semigroup_and_non_exponential() {
        assert_eq!(semigroup_hierarchy_check(0.0, 1.0, 4).unwrap(), 0.0);
        assert!(semigroup_hierarchy_check(0.5, 1.0, 4).unwrap() <= 1e-10);
        assert!(semigroup_hierarchy_check(-1.0, 1.0, 4).is_err());
        let osc = DephasingFamily::function(|t| c(t.cos() * (-0.1 * t).exp()));
        assert!(osc.max_multistep_norm(1.0, 4).unwrap() > 1e-4);
        assert!(DephasingFamily::exponential(0.5).is_cp_divisible(1.0, 4, 1e-10).unwrap());
    }

    #[test]
    fn tabulated_family() {
        let vals: Vec<C64> = (0..5).map(|n| c((-0.2 * n as f64).exp())).collect();
        let fam = DephasingFamily::tabulated(1.0, vals).unwrap();
        assert!(fam.max_multistep_norm(1.0, 4).unwrap() < 1e-10);
        assert!(fam.at_step(5, 1.0).is_err());
        assert!(fam.at_step(1, 0.5).is_err());
        assert!(DephasingFamily::tabulated(1.0, vec![c(0.9)]).is_err());
        assert!(DephasingFamily::tabulated(1.0, vec![c(1.0), c(1.2)]).is_err());
    }
}
