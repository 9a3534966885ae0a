//! Outcome-conditioned dynamics and stochastic transfer tensors.
//!
//! A [`Branch`] follows one outcome sequence `θ = (θ_1, ..., θ_L)` with the
//! measurement at `t_k` applied after the conditional map `Φ̃_k` has been
//! recorded, so `Φ̃_k` depends on `θ_1..θ_{k−1}`. As in the unconditional
//! case `Φ̃_0 = 1` and `Φ̃_1 = Φ_1`.
//!
//! The stochastic hierarchy satisfies
//! `Φ̃_k = Σ_{j<k} T̃_{k,j} 𝓜_{θ_j} Φ̃_j` with `𝓜_{θ_0} = 1`. Entries with
//! `j ≥ 1` follow the `Γ̃` recursion; `T̃_{k,0}` closes the identity, playing
//! the role `Γ_{k|0} = Φ_k` plays without measurements.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CVector};
use crate::maps::{self, gamma_from_env, NormKind, Superoperator};
use crate::model::{self, GlobalState, Instrument, Schedule, SpinBosonModel};
use crate::tt::{hierarchy_row, Route, TTHierarchy};

/// Population of the highest Fock level above which a branch is flagged.
pub const TRUNCATION_WARNING_LEVEL: f64 = 1e-6;

/// Largest number of measurement times for exhaustive branch enumeration.
pub const MAX_ENUMERATED_STEPS: usize = 10;

/// Normalization of the averaged multi-step contribution `𝒟_k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DkNormalization {
    /// `1/(k−1)`, the number of terms.
    #[default]
    TermCount,
    /// `1/(k−2)` for `k ≥ 3`, falling back to the term count at `k = 2`.
    PaperLiteral,
}

/// What the violation of the one-step composition law is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationLevel {
    /// Both sides applied to the actual initial system state.
    #[default]
    State,
    /// Difference of the two superoperators.
    Map,
}

#[derive(Clone, Debug)]
pub struct Branch {
    outcomes: Vec<usize>,
    label: String,
    rho0: CMatrix,
    /// `Φ̃_0..=Φ̃_K`, `K = min(L + 1, M)`.
    phi_tilde: Vec<Superoperator>,
    /// `𝓜_{θ_1}..𝓜_{θ_L}`.
    meas: Vec<Superoperator>,
    /// Factors of `σ̃_{E,j}` for `j = 0..=L` (`j = 0` is the vacuum).
    env_states: Vec<Vec<CVector>>,
    /// `q_0..=q_L`.
    weights: Vec<f64>,
    /// Conditional global state right after the last measurement (the
    /// initial state for an empty sequence).
    final_state: GlobalState,
    pub max_top_fock: f64,
}

impl Branch {
    pub fn outcomes(&self) -> &[usize] {
        &self.outcomes
    }

    /// Concatenated outcome labels, `"∅"` for the empty sequence.
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    /// Largest `k` with `Φ̃_k` available.
    pub fn depth(&self) -> usize {
        self.phi_tilde.len() - 1
    }

    pub fn phi_tilde(&self, k: usize) -> &Superoperator {
        &self.phi_tilde[k]
    }

    pub fn phi_tildes(&self) -> &[Superoperator] {
        &self.phi_tilde
    }

    /// `𝓜_{θ_j}`, the identity for `j = 0`.
    pub fn meas(&self, j: usize) -> Option<&Superoperator> {
        if j == 0 {
            None
        } else {
            self.meas.get(j - 1)
        }
    }

    pub fn meas_or_identity(&self, j: usize) -> Superoperator {
        self.meas(j).cloned().unwrap_or_else(|| Superoperator::identity(self.rho0.nrows()))
    }

    pub fn env_factors(&self, j: usize) -> Result<&[CVector]> {
        self.env_states
            .get(j)
            .map(|v| v.as_slice())
            .ok_or(Error::MissingEntry(j, j))
    }

    /// `σ̃_{E,j}` as a dense matrix.
    pub fn env_state(&self, j: usize) -> Result<CMatrix> {
        let f = self.env_factors(j)?;
        let de = f[0].len();
        Ok(f.iter().fold(CMatrix::zeros(de, de), |acc, w| acc + w * w.adjoint()))
    }

    /// Probability `q_j` of the first `j` outcomes, from the global propagation.
    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn initial_system_state(&self) -> &CMatrix {
        &self.rho0
    }

    pub fn final_state(&self) -> &GlobalState {
        &self.final_state
    }

    pub fn truncation_warning(&self) -> bool {
        self.max_top_fock > TRUNCATION_WARNING_LEVEL
    }
}

pub fn sequence_label(inst: &Instrument, outcomes: &[usize]) -> String {
    if outcomes.is_empty() {
        "∅".to_string()
    } else {
        outcomes.iter().map(|&o| inst.labels()[o].as_str()).collect()
    }
}

/// Conditional evolution along `outcomes`, which may have up to `M` entries.
pub fn propagate_branch(
    model: &SpinBosonModel,
    schedule: &Schedule,
    inst: &Instrument,
    outcomes: &[usize],
) -> Result<Branch> {
    if outcomes.len() > schedule.steps {
        return Err(Error::InvalidParameter(format!(
            "{} outcomes for {} measurement times",
            outcomes.len(),
            schedule.steps
        )));
    }
    if let Some(&bad) = outcomes.iter().find(|&&o| o >= inst.len()) {
        return Err(Error::UnknownOutcome(bad.to_string()));
    }
    let d = model.system_dim();
    let prop = model.propagator();
    let label = sequence_label(inst, outcomes);
    let depth = (outcomes.len() + 1).min(schedule.steps);

    let mut basis: Vec<Vec<CVector>> = maps::input_kets(d, std::slice::from_ref(model.vacuum()));
    let mut state = model.initial_state().clone();
    let mut phi_tilde = vec![Superoperator::identity(d)];
    let mut env_states = vec![vec![model.vacuum().clone()]];
    let mut weights = vec![state.weight()];
    let mut max_top_fock = state.top_fock_population();
    let mut post_measurement = state.clone();

    for k in 1..=depth.max(outcomes.len()) {
        let dt = schedule.time(k) - schedule.time(k - 1);
        basis = basis
            .iter()
            .map(|row| row.iter().map(|v| prop.apply(dt, v)).collect())
            .collect();
        state = prop.evolve(dt, &state);
        max_top_fock = max_top_fock.max(state.top_fock_population() / state.weight());
        if k <= depth {
            phi_tilde.push(
                maps::superop_from_images(d, &basis)
                    .with_times(0.0, schedule.time(k))
                    .with_label(format!("Phi~_{k}[{}]", sequence_label(inst, &outcomes[..k - 1]))),
            );
        }
        if let Some(&theta) = outcomes.get(k - 1) {
            let m = inst.operator(theta);
            basis = basis
                .iter()
                .map(|row| row.iter().map(|v| model::apply_system_operator(m, v, d)).collect())
                .collect();
            state = model::apply_outcome(&state, inst, theta);
            let q = state.weight();
            if q <= 1e-300 {
                return Err(Error::ZeroProbability(sequence_label(inst, &outcomes[..k])));
            }
            weights.push(q);
            env_states.push(state.env_factors()?);
            post_measurement = state.clone();
        }
    }
    if max_top_fock > TRUNCATION_WARNING_LEVEL {
        log::debug!(
            "branch {label}: top Fock level population {max_top_fock:.2e} exceeds {TRUNCATION_WARNING_LEVEL:.0e}"
        );
    }
    let meas = outcomes
        .iter()
        .map(|&o| Superoperator::conjugation(inst.operator(o)))
        .collect();
    Ok(Branch {
        outcomes: outcomes.to_vec(),
        label,
        rho0: model.initial_state().reduced_system(),
        phi_tilde,
        meas,
        env_states,
        weights,
        final_state: post_measurement,
        max_top_fock,
    })
}

/// `q_k = Tr[𝓜_θ Φ̃_k[ρ_{S,0}]]` with `θ = final_outcome`; `q_0 = Tr ρ_{S,0}`.
pub fn joint_probability(branch: &Branch, inst: &Instrument, k: usize, final_outcome: Option<usize>) -> Result<f64> {
    let phi = branch
        .phi_tilde
        .get(k)
        .ok_or(Error::MissingEntry(k, 0))?;
    let state = phi.apply(&branch.rho0);
    Ok(match (k, final_outcome) {
        (0, _) | (_, None) => linalg::trace(&state).re,
        (_, Some(theta)) => linalg::trace(&(inst.effect(theta) * state)).re,
    })
}

/// `Γ̃_{k|from}` built on the post-measurement environment state `σ̃_{E,from}`.
pub fn gamma_tilde(model: &SpinBosonModel, schedule: &Schedule, branch: &Branch, k: usize, from: usize) -> Result<Superoperator> {
    if from >= k {
        return Err(Error::IndexOrder { from, to: k });
    }
    let env = branch.env_factors(from)?;
    Ok(gamma_from_env(model, schedule, k, from, env)
        .with_label(format!("Gamma~_{k}|{from}[{}]", branch.label)))
}

/// `Γ̃_{k|j}` for `0 ≤ j < k ≤ K` on one branch.
#[derive(Clone, Debug)]
pub struct GammaTildeTable {
    rows: Vec<Vec<Superoperator>>,
}

impl GammaTildeTable {
    pub fn get(&self, k: usize, from: usize) -> Result<&Superoperator> {
        if from >= k || k == 0 {
            return Err(Error::IndexOrder { from, to: k });
        }
        self.rows
            .get(k - 1)
            .and_then(|r| r.get(from))
            .ok_or(Error::MissingEntry(k, from))
    }

    pub fn depth(&self) -> usize {
        self.rows.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &Superoperator)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(k1, r)| r.iter().enumerate().map(move |(j, g)| (k1 + 1, j, g)))
    }
}

pub fn build_gamma_tilde_table(model: &SpinBosonModel, schedule: &Schedule, branch: &Branch) -> Result<GammaTildeTable> {
    let rows = (1..=branch.depth())
        .map(|k| (0..k).map(|j| gamma_tilde(model, schedule, branch, k, j)).collect())
        .collect::<Result<_>>()?;
    Ok(GammaTildeTable { rows })
}

#[derive(Clone, Debug)]
pub struct StochasticTTHierarchy {
    tt: TTHierarchy,
    /// `‖Φ̃_k − Σ_j T̃_{k,j} 𝓜_{θ_j} Φ̃_j‖_F` for `k = 1..=K`.
    pub residuals: Vec<f64>,
}

impl StochasticTTHierarchy {
    pub fn get(&self, k: usize, j: usize) -> &Superoperator {
        self.tt.get(k, j)
    }

    pub fn depth(&self) -> usize {
        self.tt.steps()
    }

    pub fn route(&self) -> Route {
        self.tt.route()
    }

    pub fn as_hierarchy(&self) -> &TTHierarchy {
        &self.tt
    }
}

pub fn build_stochastic_tt(branch: &Branch, table: &GammaTildeTable) -> Result<StochasticTTHierarchy> {
    build_stochastic_tt_with_route(branch, table, Route::ViaPhi)
}

/// `Route::ViaPhi` closes each row with the residual; `Route::ViaGamma`
/// runs the recursion over the full row with `Φ̃_k` standing in the `j = 0`
/// column. The two agree up to rounding.
pub fn build_stochastic_tt_with_route(branch: &Branch, table: &GammaTildeTable, route: Route) -> Result<StochasticTTHierarchy> {
    let depth = branch.depth();
    if table.depth() < depth {
        return Err(Error::MissingEntry(depth, 0));
    }
    let d = branch.rho0.nrows();
    let rows: Vec<Vec<Superoperator>> = (1..=depth)
        .map(|k| match route {
            Route::ViaPhi => {
                let mut row = hierarchy_row(k, k - 1, d, |a, b| table.get(a, b), |i| branch.meas(i))?;
                let mut t0 = branch.phi_tilde[k].clone();
                for (j, tkj) in row.iter().enumerate().skip(1) {
                    t0 = t0.sub(&tkj.compose(&branch.meas_or_identity(j).compose(&branch.phi_tilde[j])));
                }
                row[0] = t0.with_label(format!("T~_{k},0"));
                Ok(row)
            }
            Route::ViaGamma => hierarchy_row(
                k,
                k,
                d,
                |a, b| if b == 0 { Ok(&branch.phi_tilde[a]) } else { table.get(a, b) },
                |i| branch.meas(i),
            ),
        })
        .collect::<Result<_>>()?;
    let tt = TTHierarchy::from_rows(rows, route);
    let residuals = stochastic_residuals(&tt, branch);
    Ok(StochasticTTHierarchy { tt, residuals })
}

fn stochastic_residuals(tt: &TTHierarchy, branch: &Branch) -> Vec<f64> {
    let d = branch.rho0.nrows();
    (1..=tt.steps())
        .map(|k| {
            let sum = (0..k).fold(Superoperator::zero(d), |acc, j| {
                let fed = branch.meas_or_identity(j).compose(&branch.phi_tilde[j]);
                acc.add(&tt.get(k, j).compose(&fed))
            });
            branch.phi_tilde[k].distance(&sum)
        })
        .collect()
}

/// `Φ̃_0..=Φ̃_K` regenerated from the hierarchy alone.
pub fn phi_tilde_from_hierarchy(h: &StochasticTTHierarchy, branch: &Branch) -> Vec<Superoperator> {
    let d = branch.rho0.nrows();
    let mut out = vec![Superoperator::identity(d)];
    for k in 1..=h.depth() {
        let next = (0..k).fold(Superoperator::zero(d), |acc, j| {
            let fed = branch.meas_or_identity(j).compose(&out[j]);
            acc.add(&h.get(k, j).compose(&fed))
        });
        out.push(next);
    }
    out
}

/// `q_k` from the recursion through the stochastic transfer tensors.
pub fn joint_probability_via_tt(
    h: &StochasticTTHierarchy,
    branch: &Branch,
    inst: &Instrument,
    k: usize,
    final_outcome: Option<usize>,
) -> Result<f64> {
    if k > h.depth() {
        return Err(Error::MissingEntry(k, 0));
    }
    let phi = &phi_tilde_from_hierarchy(h, branch)[k];
    let state = phi.apply(&branch.rho0);
    Ok(match (k, final_outcome) {
        (0, _) | (_, None) => linalg::trace(&state).re,
        (_, Some(theta)) => linalg::trace(&(inst.effect(theta) * state)).re,
    })
}

/// `‖T̃_{k,0}‖`.
pub fn quantifier_tk0(h: &StochasticTTHierarchy, k: usize, norm: NormKind) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("the k-step quantifier needs k >= 2, got {k}")));
    }
    if k > h.depth() {
        return Err(Error::MissingEntry(k, 0));
    }
    Ok(h.get(k, 0).norm(norm))
}

/// Mean of `‖T̃_{k,ℓ} 𝓜_{θ_ℓ} Φ̃_ℓ‖` over `ℓ = 0..=k−2`.
pub fn quantifier_dk(
    h: &StochasticTTHierarchy,
    branch: &Branch,
    k: usize,
    norm: NormKind,
    normalization: DkNormalization,
) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("the averaged quantifier needs k >= 2, got {k}")));
    }
    if k > h.depth() {
        return Err(Error::MissingEntry(k, 0));
    }
    let sum: f64 = (0..=k - 2)
        .map(|l| {
            let fed = branch.meas_or_identity(l).compose(&branch.phi_tilde[l]);
            h.get(k, l).compose(&fed).norm(norm)
        })
        .sum();
    let denom = match normalization {
        DkNormalization::PaperLiteral if k >= 3 => (k - 2) as f64,
        _ => (k - 1) as f64,
    };
    Ok(sum / denom)
}

/// `Γ̃_{k|k−1} 𝓜_{θ_{k−1}} ⋯ Γ̃_{j+1|j} 𝓜_{θ_j} Φ̃_j`.
pub fn one_step_composition(branch: &Branch, table: &GammaTildeTable, k: usize, j: usize) -> Result<Superoperator> {
    if j >= k {
        return Err(Error::IndexOrder { from: j, to: k });
    }
    if k > branch.depth() {
        return Err(Error::MissingEntry(k, j));
    }
    let mut acc = branch.meas_or_identity(j).compose(&branch.phi_tilde[j]);
    for step in j + 1..=k {
        acc = table.get(step, step - 1)?.compose(&acc);
        if step < k {
            acc = branch.meas_or_identity(step).compose(&acc);
        }
    }
    Ok(acc)
}

/// Distance between `Φ̃_k` and its one-step composition from `t_j`.
pub fn violation_norm(
    branch: &Branch,
    table: &GammaTildeTable,
    k: usize,
    j: usize,
    norm: NormKind,
    level: ViolationLevel,
) -> Result<f64> {
    let chain = one_step_composition(branch, table, k, j)?;
    let diff = branch.phi_tilde[k].sub(&chain);
    Ok(match level {
        ViolationLevel::Map => diff.norm(norm),
        ViolationLevel::State => norm.of(&diff.apply(&branch.rho0)),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchAverage {
    pub mean: f64,
    pub per_branch: Vec<f64>,
    /// Weights after renormalization.
    pub weights: Vec<f64>,
}

pub fn branch_average(values: &[f64], weights: &[f64]) -> Result<BranchAverage> {
    if values.is_empty() {
        return Err(Error::EmptyBranchSet);
    }
    if values.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} values but {} weights",
            values.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidParameter("branch weights must be non-negative with positive sum".into()));
    }
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mean = values.iter().zip(&weights).map(|(v, w)| v * w).sum();
    Ok(BranchAverage { mean, per_branch: values.to_vec(), weights })
}

/// All outcome sequences of the given length, in lexicographic order.
pub fn enumerate_sequences(n_outcomes: usize, length: usize) -> Result<Vec<Vec<usize>>> {
    if length > MAX_ENUMERATED_STEPS {
        return Err(Error::BranchCap(length, MAX_ENUMERATED_STEPS));
    }
    let mut out: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..length {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..n_outcomes).map(move |o| {
                    let mut p = prefix.clone();
                    p.push(o);
                    p
                })
            })
            .collect();
    }
    Ok(out)
}

/// Everything computed for one conditioning sequence.
#[derive(Clone, Debug)]
pub struct BranchAnalysis {
    pub branch: Branch,
    pub gamma_tilde: GammaTildeTable,
    pub hierarchy: StochasticTTHierarchy,
}

impl BranchAnalysis {
    pub fn new(model: &SpinBosonModel, schedule: &Schedule, inst: &Instrument, outcomes: &[usize]) -> Result<Self> {
        let branch = propagate_branch(model, schedule, inst, outcomes)?;
        let gamma_tilde = build_gamma_tilde_table(model, schedule, &branch)?;
        let hierarchy = build_stochastic_tt(&branch, &gamma_tilde)?;
        Ok(Self { branch, gamma_tilde, hierarchy })
    }

    /// Probability of the conditioning sequence.
    pub fn probability(&self) -> f64 {
        *self.branch.weights.last().unwrap()
    }

    pub fn tk0(&self, k: usize, norm: NormKind) -> Result<f64> {
        quantifier_tk0(&self.hierarchy, k, norm)
    }

    pub fn dk(&self, k: usize, norm: NormKind, normalization: DkNormalization) -> Result<f64> {
        quantifier_dk(&self.hierarchy, &self.branch, k, norm, normalization)
    }

    pub fn violation(&self, k: usize, j: usize, norm: NormKind, level: ViolationLevel) -> Result<f64> {
        violation_norm(&self.branch, &self.gamma_tilde, k, j, norm, level)
    }
}

/// Analyses of every conditioning sequence of length `M − 1`, which is
/// what the hierarchy up to `t_M` depends on.
pub fn analyze_all_branches(model: &SpinBosonModel, schedule: &Schedule, inst: &Instrument) -> Result<Vec<BranchAnalysis>> {
    let sequences = enumerate_sequences(inst.len(), schedule.steps - 1)?;
    sequences
        .par_iter()
        .map(|seq| BranchAnalysis::new(model, schedule, inst, seq))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_norm;
    use crate::maps::{build_gamma_table, dynamical_maps, is_cptp};
    use crate::model::{SpinBosonParams, SpinInit};
    use crate::tt::build_via_gamma;

    fn small_model() -> SpinBosonModel {
        let p = SpinBosonParams { frequencies: vec![1.99, 0.73], couplings: vec![1.67, 1.32], d_osc: 3 };
        SpinBosonModel::new(p, &SpinInit::Plus).unwrap()
    }

    fn schedule(steps: usize) -> Schedule {
        Schedule::new(1.0, steps, 4).unwrap()
    }

    #[test]
    fn empty_sequence_reproduces_unconditional_maps() {
        let (m, s) = (small_model(), schedule(1));
        let b = propagate_branch(&m, &s, &Instrument::povm(0.5).unwrap(), &[]).unwrap();
        let phis = dynamical_maps(&m, &s);
        assert_eq!(b.depth(), 1);
        assert!(b.phi_tilde(1).distance(&phis[1]) < 1e-12);
        assert_eq!(b.label(), "∅");
    }

    #[test]
    fn identity_instrument_branch_is_unconditional() {
        let (m, s) = (small_model(), schedule(4));
        let inst = Instrument::identity(2);
        let b = propagate_branch(&m, &s, &inst, &[0, 0, 0]).unwrap();
        let phis = dynamical_maps(&m, &s);
        for k in 0..=4 {
            assert!(b.phi_tilde(k).distance(&phis[k]) < 1e-12);
        }
        let a = BranchAnalysis::new(&m, &s, &inst, &[0, 0, 0]).unwrap();
        let tt = build_via_gamma(&build_gamma_table(&m, &s).unwrap()).unwrap();
        assert!(a.hierarchy.as_hierarchy().max_entry_distance(&tt) < 1e-10);
    }

    #[test]
    fn unit_lambda_scales_conditional_maps() {
        let (m, s) = (small_model(), schedule(4));
        let inst = Instrument::povm(1.0).unwrap();
        let b = propagate_branch(&m, &s, &inst, &[0, 1, 1]).unwrap();
        let phis = dynamical_maps(&m, &s);
        for k in 1..=4 {
            let scaled = b.phi_tilde(k).scaled(2f64.powi(k as i32 - 1));
            assert!(scaled.distance(&phis[k]) < 1e-10);
        }
    }

    #[test]
    fn projective_measurement_leaves_product_state() {
        let (m, s) = (small_model(), schedule(3));
        let inst = Instrument::povm(0.0).unwrap();
        let b = propagate_branch(&m, &s, &inst, &[1, 0]).unwrap();
        let rho = b.final_state().density_matrix() / linalg::real(b.final_state().weight());
        let rs = b.final_state().reduced_system() / linalg::real(b.final_state().weight());
        let re = b.env_state(2).unwrap();
        assert!(frobenius_norm(&(rho - linalg::kron(&rs, &re))) < 1e-12);
    }

    #[test]
    fn conditional_maps_are_cp_not_tp() {
        let (m, s) = (small_model(), schedule(3));
        let inst = Instrument::povm(0.25).unwrap();
        let b = propagate_branch(&m, &s, &inst, &[0, 1]).unwrap();
        for k in 2..=3 {
            let r = is_cptp(b.phi_tilde(k), 1e-9);
            assert!(r.cp && !r.tp);
        }
        for j in 0..=2 {
            let env = b.env_state(j).unwrap();
            assert!((linalg::trace(&env).re - 1.0).abs() < 1e-10);
            assert!(linalg::hermitian_eigh(&env).unwrap().values[0] > -1e-10);
        }
    }

    #[test]
    fn probabilities() {
        let (m, s) = (small_model(), schedule(3));
        let inst = Instrument::povm(0.5).unwrap();
        let mut total = 0.0;
        for seq in enumerate_sequences(2, 3).unwrap() {
            let b = propagate_branch(&m, &s, &inst, &seq).unwrap();
            let q = joint_probability(&b, &inst, 3, Some(seq[2])).unwrap();
            assert!((q - b.weight(3)).abs() < 1e-12);
            total += q;
        }
        assert!((total - 1.0).abs() < 1e-10);
        let b = propagate_branch(&m, &s, &inst, &[0]).unwrap();
        assert!((joint_probability(&b, &inst, 0, None).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn stochastic_hierarchy_identities() {
        let (m, s) = (small_model(), schedule(4));
        for lambda in [0.0, 0.3, 1.0] {
            let inst = Instrument::povm(lambda).unwrap();
            let a = BranchAnalysis::new(&m, &s, &inst, &[0, 1, 0]).unwrap();
            assert!(a.hierarchy.residuals.iter().all(|&r| r < 1e-8), "{lambda}: {:?}", a.hierarchy.residuals);
            for k in 1..=4 {
                assert!(a.hierarchy.get(k, k - 1).distance(a.gamma_tilde.get(k, k - 1).unwrap()) < 1e-10);
            }
            let other = build_stochastic_tt_with_route(&a.branch, &a.gamma_tilde, Route::ViaGamma).unwrap();
            assert!(other.as_hierarchy().max_entry_distance(a.hierarchy.as_hierarchy()) < 1e-8);
            for k in 1..=4 {
                let direct = joint_probability(&a.branch, &inst, k, Some(0)).unwrap();
                let rec = joint_probability_via_tt(&a.hierarchy, &a.branch, &inst, k, Some(0)).unwrap();
                assert!((direct - rec).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn second_row_closed_form() {
        let (m, s) = (small_model(), schedule(3));
        let inst = Instrument::povm(0.4).unwrap();
        let a = BranchAnalysis::new(&m, &s, &inst, &[1, 0]).unwrap();
        let g = |k, j| a.gamma_tilde.get(k, j).unwrap();
        let m1 = a.branch.meas(1).unwrap();
        let m2 = a.branch.meas(2).unwrap();
        // T̃_{3,1} = Γ̃_{3|1} − Γ̃_{3|2} 𝓜_2 Γ̃_{2|1}
        let t31 = g(3, 1).sub(&g(3, 2).compose(&m2.compose(g(2, 1))));
        assert!(a.hierarchy.get(3, 1).distance(&t31) < 1e-12);
        // T̃_{2,0} = Φ̃_2 − Γ̃_{2|1} 𝓜_1 Φ̃_1
        let t20 = a.branch.phi_tilde(2).sub(&g(2, 1).compose(&m1.compose(a.branch.phi_tilde(1))));
        assert!(a.hierarchy.get(2, 0).distance(&t20) < 1e-12);
    }

    #[test]
    fn projective_one_step_composition_holds_on_state() {
        let (m, s) = (small_model(), schedule(4));
        let inst = Instrument::povm(0.0).unwrap();
        let a = BranchAnalysis::new(&m, &s, &inst, &[0, 1, 1]).unwrap();
        for k in 1..=4 {
            for j in 0..k {
                let v = a.violation(k, j, NormKind::Frobenius, ViolationLevel::State).unwrap();
                assert!(v < 1e-8, "({k},{j}) -> {v}");
            }
        }
        let free = BranchAnalysis::new(&m, &s, &Instrument::povm(1.0).unwrap(), &[0, 0, 0]).unwrap();
        assert!(free.violation(3, 0, NormKind::Frobenius, ViolationLevel::State).unwrap() > 1e-6);
        assert!(matches!(a.violation(2, 2, NormKind::Frobenius, ViolationLevel::State), Err(Error::IndexOrder { .. })));
    }

    #[test]
    fn quantifier_domains_and_k2() {
        let (m, s) = (small_model(), schedule(3));
        let a = BranchAnalysis::new(&m, &s, &Instrument::povm(0.5).unwrap(), &[0, 0]).unwrap();
        assert!(a.tk0(1, NormKind::Frobenius).is_err());
        assert!(a.dk(1, NormKind::Frobenius, DkNormalization::TermCount).is_err());
        let t20 = a.tk0(2, NormKind::Frobenius).unwrap();
        let d2 = a.dk(2, NormKind::Frobenius, DkNormalization::TermCount).unwrap();
        assert!((t20 - d2).abs() < 1e-14);
        let lit = a.dk(2, NormKind::Frobenius, DkNormalization::PaperLiteral).unwrap();
        assert_eq!(lit, d2);
        let d3 = a.dk(3, NormKind::Frobenius, DkNormalization::TermCount).unwrap();
        let d3_lit = a.dk(3, NormKind::Frobenius, DkNormalization::PaperLiteral).unwrap();
        assert!((d3_lit - 2.0 * d3).abs() < 1e-14);
    }

    #[test]
    fn branch_average_examples() {
        assert_eq!(branch_average(&[4.0], &[0.3]).unwrap().mean, 4.0);
        assert_eq!(branch_average(&[1.0, 3.0], &[0.5, 0.5]).unwrap().mean, 2.0);
        assert!(matches!(branch_average(&[], &[]), Err(Error::EmptyBranchSet)));
        assert!(branch_average(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn sequence_enumeration() {
        let seqs = enumerate_sequences(2, 3).unwrap();
        assert_eq!(seqs.len(), 8);
        assert_eq!(seqs[0], vec![0, 0, 0]);
        assert_eq!(seqs[5], vec![1, 0, 1]);
        assert!(matches!(enumerate_sequences(2, 11), Err(Error::BranchCap(11, 10))));
        assert_eq!(enumerate_sequences(2, 0).unwrap(), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn branch_rejects_bad_input() {
        let (m, s) = (small_model(), schedule(2));
        let inst = Instrument::povm(0.5).unwrap();
        assert!(propagate_branch(&m, &s, &inst, &[0, 0, 0]).is_err());
        assert!(matches!(propagate_branch(&m, &s, &inst, &[2]), Err(Error::UnknownOutcome(_))));
    }
}
