//! Inhomogeneous transfer tensors `T_{k,j}` and CP-divisibility analysis.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::maps::{self, is_cptp, GammaTable, Superoperator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    /// Every entry from the `Γ` recursion, including `T_{k,0}` via `Γ_{k|0} = Φ_k`.
    ViaGamma,
    /// Entries with `j ≥ 1` from the `Γ` recursion, `T_{k,0}` as the residual
    /// `Φ_k − Σ_{j≥1} T_{k,j} Φ_j`.
    ViaPhi,
}

/// Triangular table `T_{k,j}`, `0 ≤ j < k ≤ M`.
#[derive(Clone, Debug)]
pub struct TTHierarchy {
    rows: Vec<Vec<Superoperator>>,
    route: Route,
    /// `residuals[k-1] = ‖Φ_k − Σ_j T_{k,j} Φ_j‖_F`.
    pub residuals: Vec<f64>,
    /// Condition numbers of `Φ_1..Φ_M` (via-Φ route only).
    pub phi_conditioning: Option<Vec<f64>>,
}

impl TTHierarchy {
    pub fn from_rows(rows: Vec<Vec<Superoperator>>, route: Route) -> Self {
        Self { rows, route, residuals: Vec::new(), phi_conditioning: None }
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn route(&self) -> Route {
        self.route
    }

    /// `T_{k,j}`; panics outside `0 ≤ j < k ≤ M`.
    pub fn get(&self, k: usize, j: usize) -> &Superoperator {
        assert!(j < k && k <= self.rows.len(), "T_{{{k},{j}}} outside the hierarchy");
        &self.rows[k - 1][j]
    }

    pub fn try_get(&self, k: usize, j: usize) -> Option<&Superoperator> {
        if j < k && k >= 1 {
            self.rows.get(k - 1).and_then(|r| r.get(j))
        } else {
            None
        }
    }

    pub fn row(&self, k: usize) -> &[Superoperator] {
        &self.rows[k - 1]
    }

    pub fn max_entry_distance(&self, other: &TTHierarchy) -> f64 {
        self.rows
            .iter()
            .flatten()
            .zip(other.rows.iter().flatten())
            .map(|(a, b)| a.distance(b))
            .fold(0.0, f64::max)
    }
}

/// One row of the hierarchy:
/// `T_{k,k−n} = G(k, k−n) − Σ_{i=1}^{n−1} T_{k,k−i} · meas(k−i) · G(k−i, k−n)`
/// for `n = 1..=n_max`, filled in increasing `n`. Returns entries indexed by
/// `j = k − n` (entries below `k − n_max` are left as zero maps).
pub(crate) fn hierarchy_row<'a>(
    k: usize,
    n_max: usize,
    dim: usize,
    gamma: impl Fn(usize, usize) -> Result<&'a Superoperator>,
    meas: impl Fn(usize) -> Option<&'a Superoperator>,
) -> Result<Vec<Superoperator>> {
    let mut row: Vec<Superoperator> = vec![Superoperator::zero(dim); k];
    for n in 1..=n_max {
        let j = k - n;
        let mut t = gamma(k, j)?.clone();
        for i in 1..n {
            let g = gamma(k - i, j)?;
            let inner = match meas(k - i) {
                Some(m) => m.compose(g),
                None => g.clone(),
            };
            t = t.sub(&row[k - i].compose(&inner));
        }
        row[j] = t.with_label(format!("T_{k},{j}"));
    }
    Ok(row)
}

pub fn build_via_gamma(table: &GammaTable) -> Result<TTHierarchy> {
    let m = table.steps();
    let dim = table.get(1, 0)?.dim();
    let rows: Vec<Vec<Superoperator>> = (1..=m)
        .into_par_iter()
        .map(|k| hierarchy_row(k, k, dim, |a, b| table.get(a, b), |_| None))
        .collect::<Result<_>>()?;
    let mut tt = TTHierarchy::from_rows(rows, Route::ViaGamma);
    let mut phis = vec![Superoperator::identity(dim)];
    for k in 1..=m {
        phis.push(table.get(k, 0)?.clone());
    }
    tt.residuals = reconstruction_residuals(&tt, &phis)?;
    Ok(tt)
}

/// `phis = [Φ_0, ..., Φ_M]`.
pub fn build_via_phi(phis: &[Superoperator], table: &GammaTable) -> Result<TTHierarchy> {
    if phis.len() < 2 {
        return Err(Error::InvalidParameter("need at least Φ_0 and Φ_1".into()));
    }
    let m = phis.len() - 1;
    if table.steps() < m {
        return Err(Error::MissingEntry(m, 0));
    }
    let dim = phis[0].dim();
    let rows: Vec<Vec<Superoperator>> = (1..=m)
        .into_par_iter()
        .map(|k| {
            let mut row = hierarchy_row(k, k - 1, dim, |a, b| table.get(a, b), |_| None)?;
            let mut t0 = phis[k].clone();
            for (j, tkj) in row.iter().enumerate().skip(1) {
                t0 = t0.sub(&tkj.compose(&phis[j]));
            }
            row[0] = t0.with_label(format!("T_{k},0"));
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut tt = TTHierarchy::from_rows(rows, Route::ViaPhi);
    tt.phi_conditioning = Some(phis[1..].iter().map(maps::condition_number).collect());
    tt.residuals = reconstruction_residuals(&tt, phis)?;
    Ok(tt)
}

/// `‖Φ_k − Σ_j T_{k,j} Φ_j‖_F` for `k = 1..=M`.
pub fn reconstruction_residuals(tt: &TTHierarchy, phis: &[Superoperator]) -> Result<Vec<f64>> {
    if phis.len() < tt.steps() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} dynamical maps for a hierarchy of {} steps",
            phis.len(),
            tt.steps()
        )));
    }
    Ok((1..=tt.steps())
        .map(|k| {
            let sum = (0..k).fold(Superoperator::zero(phis[0].dim()), |acc, j| {
                acc.add(&tt.get(k, j).compose(&phis[j]))
            });
            phis[k].distance(&sum)
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct MultistepEntry {
    pub k: usize,
    pub n: usize,
    pub norm: f64,
}

#[derive(Clone, Debug)]
pub struct MultistepProfile {
    pub entries: Vec<MultistepEntry>,
    /// Largest one-step norm; "vanishing" is judged relative to it.
    pub one_step_scale: f64,
}

impl MultistepProfile {
    pub const DEFAULT_REL_TOL: f64 = 1e-8;

    pub fn max_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.norm).fold(0.0, f64::max)
    }

    pub fn all_vanish(&self, rel_tol: f64) -> bool {
        let scale = self.one_step_scale.max(f64::MIN_POSITIVE);
        self.entries.iter().all(|e| e.norm <= rel_tol * scale)
    }
}

/// `‖T_{k,k−n}‖_F` for every `n ≥ 2`.
pub fn multistep_profile(tt: &TTHierarchy) -> MultistepProfile {
    let mut entries = Vec::new();
    let mut one_step_scale: f64 = 0.0;
    for k in 1..=tt.steps() {
        one_step_scale = one_step_scale.max(tt.get(k, k - 1).frobenius_norm());
        for n in 2..=k {
            entries.push(MultistepEntry { k, n, norm: tt.get(k, k - n).frobenius_norm() });
        }
    }
    MultistepProfile { entries, one_step_scale }
}

#[derive(Clone, Debug, Serialize)]
pub struct DivisibilityEntry {
    pub k: usize,
    pub j: usize,
    pub min_choi_eig: f64,
    pub tp_residual: f64,
    pub cp: bool,
    pub tp: bool,
    pub invertible: bool,
    pub condition_number: f64,
}

#[derive(Clone, Debug)]
pub struct DivisibilityReport {
    pub entries: Vec<DivisibilityEntry>,
}

impl DivisibilityReport {
    pub fn cp_divisible(&self) -> bool {
        self.entries.iter().all(|e| e.cp && e.tp)
    }

    pub fn all_invertible(&self) -> bool {
        self.entries.iter().all(|e| e.invertible)
    }
}

/// CPTP test of `E_{k,j} = Φ_k Φ_j⁻¹` for every `0 ≤ j < k ≤ M`.
pub fn divisibility_report(phis: &[Superoperator], tol: f64) -> Result<DivisibilityReport> {
    let m = phis.len().saturating_sub(1);
    let pairs: Vec<(usize, usize)> = (1..=m).flat_map(|k| (0..k).map(move |j| (k, j))).collect();
    let entries = pairs
        .par_iter()
        .map(|&(k, j)| {
            let e = maps::intermediate_map(&phis[k], &phis[j])?;
            let r = is_cptp(&e.map, tol);
            Ok(DivisibilityEntry {
                k,
                j,
                min_choi_eig: r.min_choi_eig,
                tp_residual: r.tp_residual,
                cp: r.cp,
                tp: r.tp,
                invertible: e.invertible,
                condition_number: e.condition_number,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DivisibilityReport { entries })
}
