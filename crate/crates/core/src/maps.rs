//! Superoperators on the open system and the maps built from global dynamics.
//!
//! # Convention
//!
//! Operators are vectorized by stacking columns: `vec(ρ)[i + d·j] = ρ[i, j]`.
//! A superoperator `S` is the `d² × d²` matrix with `vec(S[ρ]) = S · vec(ρ)`,
//! so column `i + d·j` holds `vec(S[|i⟩⟨j|])`, composition is the matrix
//! product and `ρ ↦ AρB` is `Bᵀ ⊗ A`. The (unnormalized) Choi matrix is
//! `C = Σ_ij |i⟩⟨j| ⊗ S[|i⟩⟨j|]`, input factor first.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CVector, DimensionLayout, C64};
use crate::model::{GlobalState, Schedule, SpinBosonModel};

pub const VEC_CONVENTION: &str = "column-stacking";

/// Which matrix norm to use for superoperator and operator sizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    #[default]
    Frobenius,
    Spectral,
}

impl NormKind {
    pub fn of(self, m: &CMatrix) -> f64 {
        match self {
            NormKind::Frobenius => linalg::frobenius_norm(m),
            NormKind::Spectral => linalg::spectral_norm(m),
        }
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frobenius" => Ok(NormKind::Frobenius),
            "spectral" => Ok(NormKind::Spectral),
            other => Err(Error::Config(format!("unknown norm `{other}`"))),
        }
    }
}

pub fn vectorize(rho: &CMatrix) -> CVector {
    // nalgebra stores column-major, which is exactly column stacking
    CVector::from_column_slice(rho.as_slice())
}

pub fn unvectorize(v: &CVector, d: usize) -> CMatrix {
    CMatrix::from_column_slice(d, d, v.as_slice())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Superoperator {
    dim: usize,
    matrix: CMatrix,
    /// `(t_from, t_to)` when the map describes evolution between two times.
    pub times: Option<(f64, f64)>,
    /// Free-form tag, e.g. the outcome sequence a conditional map belongs to.
    pub label: Option<String>,
}

impl Superoperator {
    pub fn from_matrix(dim: usize, matrix: CMatrix) -> Result<Self> {
        if matrix.nrows() != dim * dim || matrix.ncols() != dim * dim {
            return Err(Error::DimensionMismatch(format!(
                "superoperator on dimension {dim} needs a {0}x{0} matrix, got {1}x{2}",
                dim * dim,
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self { dim, matrix, times: None, label: None })
    }

    /// Tabulates a linear map by its action on the matrix units.
    pub fn from_fn(dim: usize, f: impl Fn(&CMatrix) -> CMatrix) -> Self {
        let n = dim * dim;
        let mut matrix = CMatrix::zeros(n, n);
        for j in 0..dim {
            for i in 0..dim {
                let out = f(&linalg::matrix_unit(dim, i, j));
                matrix.set_column(i + dim * j, &vectorize(&out));
            }
        }
        Self { dim, matrix, times: None, label: None }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_matrix(dim, linalg::identity(dim * dim)).unwrap()
    }

    pub fn zero(dim: usize) -> Self {
        Self::from_matrix(dim, CMatrix::zeros(dim * dim, dim * dim)).unwrap()
    }

    /// `ρ ↦ A ρ A†`.
    pub fn conjugation(a: &CMatrix) -> Self {
        let dim = a.nrows();
        Self::from_matrix(dim, linalg::kron(&a.conjugate(), a)).unwrap()
    }

    pub fn transpose_map(dim: usize) -> Self {
        Self::from_fn(dim, |x| x.transpose())
    }

    /// `ρ ↦ Tr(ρ) I/d`.
    pub fn depolarizing(dim: usize) -> Self {
        let id = linalg::identity(dim) / linalg::real(dim as f64);
        Self::from_fn(dim, |x| &id * linalg::trace(x))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        unvectorize(&(&self.matrix * vectorize(rho)), self.dim)
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Superoperator) -> Superoperator {
        debug_assert_eq!(self.dim, other.dim);
        Superoperator {
            dim: self.dim,
            matrix: &self.matrix * &other.matrix,
            times: None,
            label: None,
        }
    }

    pub fn add(&self, other: &Superoperator) -> Superoperator {
        Superoperator::from_matrix(self.dim, &self.matrix + &other.matrix).unwrap()
    }

    pub fn sub(&self, other: &Superoperator) -> Superoperator {
        Superoperator::from_matrix(self.dim, &self.matrix - &other.matrix).unwrap()
    }

    pub fn scaled(&self, factor: f64) -> Superoperator {
        Superoperator::from_matrix(self.dim, &self.matrix * linalg::real(factor)).unwrap()
    }

    pub fn frobenius_norm(&self) -> f64 {
        linalg::frobenius_norm(&self.matrix)
    }

    pub fn norm(&self, kind: NormKind) -> f64 {
        kind.of(&self.matrix)
    }

    pub fn distance(&self, other: &Superoperator) -> f64 {
        linalg::frobenius_norm(&(&self.matrix - &other.matrix))
    }

    /// `‖vec(I)† S − vec(I)†‖_F`: zero iff the map preserves traces.
    pub fn tp_residual(&self) -> f64 {
        let d = self.dim;
        (0..d * d)
            .map(|col| {
                let tr: C64 = (0..d).map(|i| self.matrix[(i + d * i, col)]).sum();
                let (i, j) = (col % d, col / d);
                let want = if i == j { 1.0 } else { 0.0 };
                (tr - linalg::real(want)).norm_sqr()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn with_times(mut self, from: f64, to: f64) -> Self {
        self.times = Some((from, to));
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn to_record(&self) -> SuperoperatorRecord {
        SuperoperatorRecord {
            convention: VEC_CONVENTION.to_string(),
            dim: self.dim,
            times: self.times,
            label: self.label.clone(),
            entries: (0..self.matrix.nrows())
                .flat_map(|r| (0..self.matrix.ncols()).map(move |c| (r, c)))
                .map(|(r, c)| [self.matrix[(r, c)].re, self.matrix[(r, c)].im])
                .collect(),
        }
    }

    pub fn from_record(rec: &SuperoperatorRecord) -> Result<Self> {
        if rec.convention != VEC_CONVENTION {
            return Err(Error::InvalidParameter(format!(
                "unsupported vectorization convention `{}`",
                rec.convention
            )));
        }
        let n = rec.dim * rec.dim;
        if rec.entries.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "record holds {} entries, expected {}",
                rec.entries.len(),
                n * n
            )));
        }
        let m = CMatrix::from_row_iterator(n, n, rec.entries.iter().map(|&[re, im]| C64::new(re, im)));
        let mut s = Self::from_matrix(rec.dim, m)?;
        s.times = rec.times;
        s.label = rec.label.clone();
        Ok(s)
    }
}

/// Flattened, convention-tagged form used in JSON result files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperoperatorRecord {
    pub convention: String,
    pub dim: usize,
    pub times: Option<(f64, f64)>,
    pub label: Option<String>,
    /// Row-major `[re, im]` pairs of the `d² × d²` matrix.
    pub entries: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChoiMatrix {
    dim: usize,
    matrix: CMatrix,
}

impl ChoiMatrix {
    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Partial trace over the output factor; the identity for TP maps.
    pub fn output_trace(&self) -> CMatrix {
        let layout = DimensionLayout::new(vec![self.dim, self.dim]).unwrap();
        linalg::partial_trace(&self.matrix, &layout, &[0]).unwrap()
    }
}

pub fn choi(s: &Superoperator) -> ChoiMatrix {
    let d = s.dim;
    let m = &s.matrix;
    let c = CMatrix::from_fn(d * d, d * d, |row, col| {
        let (i, p) = (row / d, row % d);
        let (j, q) = (col / d, col % d);
        m[(p + d * q, i + d * j)]
    });
    ChoiMatrix { dim: d, matrix: c }
}

pub fn unchoi(c: &ChoiMatrix) -> Superoperator {
    let d = c.dim;
    let m = CMatrix::from_fn(d * d, d * d, |row, col| {
        let (p, q) = (row % d, row / d);
        let (i, j) = (col % d, col / d);
        c.matrix[(i * d + p, j * d + q)]
    });
    Superoperator::from_matrix(d, m).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CptpReport {
    pub cp: bool,
    pub tp: bool,
    pub min_choi_eig: f64,
    pub tp_residual: f64,
    /// `‖C − C†‖_F`; a map that does not preserve Hermiticity cannot be CP.
    pub hermiticity_residual: f64,
}

impl CptpReport {
    pub fn is_cptp(&self) -> bool {
        self.cp && self.tp
    }

    pub fn passes(&self, psd_tol: f64, tp_tol: f64) -> bool {
        self.hermiticity_residual <= psd_tol && self.min_choi_eig >= -psd_tol && self.tp_residual <= tp_tol
    }
}

pub fn is_cptp(s: &Superoperator, tol: f64) -> CptpReport {
    let c = choi(s);
    let herm_res = linalg::hermiticity_residual(c.matrix());
    let herm = (c.matrix() + c.matrix().adjoint()) * linalg::real(0.5);
    let min_choi_eig = linalg::hermitian_eigh(&herm)
        .map(|e| e.values[0])
        .unwrap_or(f64::NEG_INFINITY);
    let tp_residual = s.tp_residual();
    CptpReport {
        cp: herm_res <= tol && min_choi_eig >= -tol,
        tp: tp_residual <= tol,
        min_choi_eig,
        tp_residual,
        hermiticity_residual: herm_res,
    }
}

/// Dense route: `σ ↦ Tr_E[U (σ ⊗ env) U†]`.
pub fn superop_from_global(u: &CMatrix, env_state: &CMatrix, layout: &DimensionLayout) -> Result<Superoperator> {
    let n = layout.total();
    let (d, de) = (layout.system_dim(), layout.env_dim());
    if u.nrows() != n || u.ncols() != n {
        return Err(Error::DimensionMismatch(format!("unitary is {}x{}, layout total {n}", u.nrows(), u.ncols())));
    }
    if env_state.nrows() != de || env_state.ncols() != de {
        return Err(Error::DimensionMismatch(format!(
            "environment state is {}x{}, environment dimension {de}",
            env_state.nrows(),
            env_state.ncols()
        )));
    }
    let bipartite = DimensionLayout::new(vec![d, de])?;
    let mut matrix = CMatrix::zeros(d * d, d * d);
    for b in 0..d {
        let ub = u.columns(b * de, de);
        // σ_E U_b†, reused for every a
        let x = env_state * ub.adjoint();
        for a in 0..d {
            let ua = u.columns(a * de, de);
            let global = ua * &x;
            let out = linalg::partial_trace(&global, &bipartite, &[0])?;
            matrix.set_column(a + d * b, &vectorize(&out));
        }
    }
    Superoperator::from_matrix(d, matrix)
}

/// Ket route: `σ ↦ Σ_w Tr_E[K (σ ⊗ |w⟩⟨w|) K†]` for a linear operator `K`
/// on the composite space given by its action on vectors.
///
/// `K` may be any product of unitaries and local measurement operators, so
/// this builds both the `Γ`-type maps and outcome-conditioned maps.
pub fn superop_from_kets(dim_s: usize, env_factors: &[CVector], k: impl Fn(&CVector) -> CVector) -> Superoperator {
    let images: Vec<Vec<CVector>> = input_kets(dim_s, env_factors)
        .iter()
        .map(|row| row.iter().map(&k).collect())
        .collect();
    superop_from_images(dim_s, &images)
}

/// `|a⟩ ⊗ |w⟩` for every system basis index `a` (outer) and factor `w` (inner).
pub fn input_kets(dim_s: usize, env_factors: &[CVector]) -> Vec<Vec<CVector>> {
    (0..dim_s)
        .map(|a| {
            let mut unit = CVector::zeros(dim_s);
            unit[a] = linalg::ONE;
            env_factors.iter().map(|w| linalg::kron_vec(&unit, w)).collect()
        })
        .collect()
}

/// Map whose action on `|a⟩⟨b|` is `Σ_i Tr_E |ψ_{a,i}⟩⟨ψ_{b,i}|`, with
/// `images[a][i] = ψ_{a,i}`.
pub fn superop_from_images(dim_s: usize, images: &[Vec<CVector>]) -> Superoperator {
    let mut matrix = CMatrix::zeros(dim_s * dim_s, dim_s * dim_s);
    for a in 0..dim_s {
        for b in 0..dim_s {
            let out = images[a]
                .iter()
                .zip(&images[b])
                .fold(CMatrix::zeros(dim_s, dim_s), |acc, (pa, pb)| acc + linalg::reduced_outer(pa, pb, dim_s));
            matrix.set_column(a + dim_s * b, &vectorize(&out));
        }
    }
    Superoperator { dim: dim_s, matrix, times: None, label: None }
}

/// Unmeasured global state at `t_k`.
pub fn unmeasured_state(model: &SpinBosonModel, schedule: &Schedule, k: usize) -> GlobalState {
    model.evolve(schedule.time(k), model.initial_state())
}

/// `Φ_k`; `Φ_0` is the identity.
pub fn dynamical_map(model: &SpinBosonModel, schedule: &Schedule, k: usize) -> Superoperator {
    let t = schedule.time(k);
    let prop = model.propagator();
    superop_from_kets(model.system_dim(), std::slice::from_ref(model.vacuum()), |v| prop.apply(t, v))
        .with_times(0.0, t)
        .with_label(format!("Phi_{k}"))
}

/// `Γ_{k|from}` with the environment state of the unmeasured evolution at `t_from`.
pub fn gamma_map(model: &SpinBosonModel, schedule: &Schedule, k: usize, from: usize) -> Result<Superoperator> {
    if from >= k {
        return Err(Error::IndexOrder { from, to: k });
    }
    let env = unmeasured_state(model, schedule, from).env_factors()?;
    Ok(gamma_from_env(model, schedule, k, from, &env).with_label(format!("Gamma_{k}|{from}")))
}

/// `Tr_E[U_{t_from:t_k} (σ ⊗ Σ w w†) U†]`.
pub fn gamma_from_env(model: &SpinBosonModel, schedule: &Schedule, k: usize, from: usize, env: &[CVector]) -> Superoperator {
    let dt = schedule.time(k) - schedule.time(from);
    let prop = model.propagator();
    superop_from_kets(model.system_dim(), env, |v| prop.apply(dt, v))
        .with_times(schedule.time(from), schedule.time(k))
}

/// `Γ_{k|j}` for `0 ≤ j < k ≤ M`.
#[derive(Clone, Debug, Default)]
pub struct GammaTable {
    entries: BTreeMap<(usize, usize), Superoperator>,
    steps: usize,
}

impl GammaTable {
    pub fn new(steps: usize) -> Self {
        Self { entries: BTreeMap::new(), steps }
    }

    pub fn insert(&mut self, k: usize, from: usize, map: Superoperator) {
        self.entries.insert((k, from), map);
    }

    pub fn get(&self, k: usize, from: usize) -> Result<&Superoperator> {
        self.entries.get(&(k, from)).ok_or(Error::MissingEntry(k, from))
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &Superoperator)> {
        self.entries.iter()
    }
}

pub fn build_gamma_table(model: &SpinBosonModel, schedule: &Schedule) -> Result<GammaTable> {
    let envs: Vec<Vec<CVector>> = (0..schedule.steps)
        .map(|j| unmeasured_state(model, schedule, j).env_factors())
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (1..=schedule.steps).flat_map(|k| (0..k).map(move |j| (k, j))).collect();
    let maps: Vec<Superoperator> = pairs
        .par_iter()
        .map(|&(k, j)| gamma_from_env(model, schedule, k, j, &envs[j]).with_label(format!("Gamma_{k}|{j}")))
        .collect();
    let mut table = GammaTable::new(schedule.steps);
    for ((k, j), m) in pairs.into_iter().zip(maps) {
        table.insert(k, j, m);
    }
    Ok(table)
}

/// `[Φ_0, Φ_1, ..., Φ_M]`.
pub fn dynamical_maps(model: &SpinBosonModel, schedule: &Schedule) -> Vec<Superoperator> {
    (0..=schedule.steps)
        .into_par_iter()
        .map(|k| dynamical_map(model, schedule, k))
        .collect()
}

pub const INVERSION_CONDITION_LIMIT: f64 = 1e12;

#[derive(Clone, Debug)]
pub struct IntermediateMap {
    pub map: Superoperator,
    /// False when the pseudo-inverse path was taken.
    pub invertible: bool,
    pub condition_number: f64,
}

pub fn condition_number(s: &Superoperator) -> f64 {
    let sv = s.matrix.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `E_{k,j} = Φ_k Φ_j⁻¹`.
pub fn intermediate_map(phi_k: &Superoperator, phi_j: &Superoperator) -> Result<IntermediateMap> {
    if phi_k.dim != phi_j.dim {
        return Err(Error::DimensionMismatch("maps act on different dimensions".into()));
    }
    let cond = condition_number(phi_j);
    let direct = if cond <= INVERSION_CONDITION_LIMIT {
        phi_j.matrix.clone().try_inverse()
    } else {
        None
    };
    let (inverse, invertible) = match direct {
        Some(inv) => (inv, true),
        None => {
            let svd = phi_j.matrix.clone().svd(true, true);
            let max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
            let pinv = svd
                .pseudo_inverse(max * 1e-12)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            (pinv, false)
        }
    };
    Ok(IntermediateMap {
        map: Superoperator::from_matrix(phi_k.dim, &phi_k.matrix * inverse)?,
        invertible,
        condition_number: cond,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius_norm, ONE, ZERO};
    use crate::model::{SpinBosonParams, SpinInit};

    fn small_model(couplings: Vec<f64>, init: SpinInit) -> SpinBosonModel {
        let p = SpinBosonParams {
            frequencies: vec![1.99, 0.73],
            couplings,
            d_osc: 3,
        };
        SpinBosonModel::new(p, &init).unwrap()
    }

    fn test_rho() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[linalg::real(0.65), C64::new(0.2, -0.15), C64::new(0.2, 0.15), linalg::real(0.35)])
    }

    #[test]
    fn vectorization_round_trip_and_order() {
        let rho = CMatrix::from_row_slice(2, 2, &[linalg::real(1.0), linalg::real(2.0), linalg::real(3.0), linalg::real(4.0)]);
        let v = vectorize(&rho);
        // column stacking: ρ00, ρ10, ρ01, ρ11
        let want: Vec<f64> = vec![1.0, 3.0, 2.0, 4.0];
        assert_eq!(v.iter().map(|z| z.re).collect::<Vec<_>>(), want);
        assert_eq!(unvectorize(&v, 2), rho);
    }

    #[test]
    fn conjugation_matches_direct_action() {
        let a = CMatrix::from_row_slice(2, 2, &[C64::new(0.3, 0.1), C64::new(-0.2, 0.5), ONE, C64::new(0.0, -0.7)]);
        let s = Superoperator::conjugation(&a);
        let rho = test_rho();
        let want = &a * &rho * a.adjoint();
        assert!(frobenius_norm(&(s.apply(&rho) - want)) < 1e-14);
        let tab = Superoperator::from_fn(2, |x| &a * x * a.adjoint());
        assert!(s.distance(&tab) < 1e-14);
    }

    #[test]
    fn choi_examples() {
        let id = choi(&Superoperator::identity(2));
        let eig = linalg::hermitian_eigh(id.matrix()).unwrap();
        assert!((eig.values[3] - 2.0).abs() < 1e-14);
        assert!(eig.values[..3].iter().all(|l| l.abs() < 1e-14));
        let dep = choi(&Superoperator::depolarizing(2));
        assert!(frobenius_norm(&(dep.matrix() - linalg::identity(4) * linalg::real(0.5))) < 1e-15);
        // Tr_out C = I for TP maps
        assert!(frobenius_norm(&(id.output_trace() - linalg::identity(2))) < 1e-15);
    }

    #[test]
    fn cptp_examples() {
        let t = is_cptp(&Superoperator::transpose_map(2), 1e-10);
        assert!(!t.cp && t.tp);
        assert!((t.min_choi_eig + 1.0).abs() < 1e-12);
        let z = is_cptp(&Superoperator::zero(2), 1e-10);
        assert!(z.cp && !z.tp);
        assert!(is_cptp(&Superoperator::identity(3), 1e-12).is_cptp());
    }

    #[test]
    fn superop_from_global_identity_unitary() {
        let layout = DimensionLayout::new(vec![2, 3]).unwrap();
        let env = CMatrix::from_diagonal(&CVector::from_vec(vec![linalg::real(0.5), linalg::real(0.3), linalg::real(0.2)]));
        let s = superop_from_global(&linalg::identity(6), &env, &layout).unwrap();
        assert!(s.distance(&Superoperator::identity(2)) < 1e-15);
        assert!(superop_from_global(&linalg::identity(5), &env, &layout).is_err());
    }

    #[test]
    fn decoupled_model_gives_free_precession() {
        let model = small_model(vec![0.0, 0.0], SpinInit::Plus);
        let schedule = Schedule::new(0.7, 3, 4).unwrap();
        let t = schedule.time(2);
        // oracle: conjugation by exp(-i t σz/2) with σz = diag(-1, 1)
        let u = CMatrix::from_diagonal(&CVector::from_vec(vec![C64::from_polar(1.0, t / 2.0), C64::from_polar(1.0, -t / 2.0)]));
        let want = Superoperator::conjugation(&u);
        let phi = dynamical_map(&model, &schedule, 2);
        assert!(phi.distance(&want) < 1e-12);
    }

    #[test]
    fn ket_route_matches_dense_route() {
        let model = small_model(vec![1.67, 1.32], SpinInit::Plus);
        let schedule = Schedule::new(1.0, 3, 4).unwrap();
        let u = model.propagator().matrix(2.0);
        let state = unmeasured_state(&model, &schedule, 1);
        let env = state.reduced_env() / linalg::real(state.weight());
        let dense = superop_from_global(&u, &env, model.layout()).unwrap();
        let ket = gamma_map(&model, &schedule, 3, 1).unwrap();
        assert!(dense.distance(&ket) < 1e-12);
    }

    #[test]
    fn dynamical_maps_are_cptp_and_consistent() {
        let model = small_model(vec![1.67, 1.32], SpinInit::Plus);
        let schedule = Schedule::new(1.0, 4, 4).unwrap();
        let phis = dynamical_maps(&model, &schedule);
        assert!(phis[0].distance(&Superoperator::identity(2)) < 1e-14);
        for (k, phi) in phis.iter().enumerate() {
            assert!(is_cptp(phi, 1e-9).is_cptp(), "Phi_{k}");
            // two-path consistency on the actual initial state
            let direct = unmeasured_state(&model, &schedule, k).reduced_system();
            let rho0 = model.initial_state().reduced_system();
            assert!(frobenius_norm(&(phi.apply(&rho0) - direct)) < 1e-10);
        }
        let table = build_gamma_table(&model, &schedule).unwrap();
        for k in 1..=4 {
            assert!(table.get(k, 0).unwrap().distance(&phis[k]) < 1e-12);
        }
        for (_, g) in table.iter() {
            assert!(is_cptp(g, 1e-9).is_cptp());
        }
    }

    #[test]
    fn gamma_rejects_bad_order() {
        let model = small_model(vec![1.0, 1.0], SpinInit::Plus);
        let schedule = Schedule::new(1.0, 3, 4).unwrap();
        assert!(matches!(gamma_map(&model, &schedule, 2, 2), Err(Error::IndexOrder { .. })));
        assert!(matches!(gamma_map(&model, &schedule, 1, 2), Err(Error::IndexOrder { .. })));
        let table = build_gamma_table(&model, &schedule).unwrap();
        assert!(matches!(table.get(2, 2), Err(Error::MissingEntry(2, 2))));
    }

    #[test]
    fn intermediate_map_identity_denominator() {
        let model = small_model(vec![1.67, 1.32], SpinInit::Plus);
        let schedule = Schedule::new(1.0, 2, 4).unwrap();
        let phi2 = dynamical_map(&model, &schedule, 2);
        let e = intermediate_map(&phi2, &Superoperator::identity(2)).unwrap();
        assert!(e.invertible);
        assert!(e.map.distance(&phi2) < 1e-12);
    }

    #[test]
    fn intermediate_map_singular_denominator_uses_pseudo_inverse() {
        let e = intermediate_map(&Superoperator::identity(2), &Superoperator::depolarizing(2)).unwrap();
        assert!(!e.invertible);
        assert!(e.condition_number.is_infinite() || e.condition_number > INVERSION_CONDITION_LIMIT);
    }

    #[test]
    fn record_round_trip() {
        let s = Superoperator::conjugation(&linalg::pauli_y()).with_times(0.0, 1.5).with_label("x");
        let json = serde_json::to_string(&s.to_record()).unwrap();
        let back: SuperoperatorRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(Superoperator::from_record(&back).unwrap(), s);
        let mut bad = back.clone();
        bad.convention = "row-stacking".into();
        assert!(Superoperator::from_record(&bad).is_err());
    }

    #[test]
    fn tp_residual_zero_for_unitary_conjugation() {
        let s = Superoperator::conjugation(&CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO]));
        assert!(s.tp_residual() < 1e-15);
        assert!((Superoperator::zero(2).tp_residual() - 2f64.sqrt()).abs() < 1e-15);
    }
}
