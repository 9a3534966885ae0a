//! Spin coupled to a truncated bank of harmonic oscillators, measured by a
//! two-outcome POVM at regular intervals.
//!
//! Spin basis: index 0 is the ground state `|0⟩` (energy −½), index 1 the
//! excited state `|1⟩` (energy +½), so `σ⁻ = |0⟩⟨1|`, `σ⁺ = |1⟩⟨0|` and the
//! spin Hamiltonian is `½[σ⁺, σ⁻]`. Oscillator `k` (0-based) is the factor
//! `k + 1` of the layout; its Fock levels are `0..d_osc`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CVector, DimensionLayout, Eigh, C64, ONE, ZERO};

pub const DEFAULT_FREQUENCIES: [f64; 5] = [1.99, 0.73, 0.89, 2.04, 1.58];
pub const DEFAULT_COUPLINGS: [f64; 5] = [1.67, 1.32, 2.15, 2.70, 1.07];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinBosonParams {
    pub frequencies: Vec<f64>,
    pub couplings: Vec<f64>,
    pub d_osc: usize,
}

impl Default for SpinBosonParams {
    fn default() -> Self {
        Self {
            frequencies: DEFAULT_FREQUENCIES.to_vec(),
            couplings: DEFAULT_COUPLINGS.to_vec(),
            d_osc: 3,
        }
    }
}

impl SpinBosonParams {
    pub fn validate(&self) -> Result<()> {
        if self.frequencies.len() != self.couplings.len() {
            return Err(Error::InvalidParameter(format!(
                "{} frequencies but {} couplings",
                self.frequencies.len(),
                self.couplings.len()
            )));
        }
        if self.frequencies.is_empty() {
            return Err(Error::InvalidParameter("at least one oscillator is required".into()));
        }
        if self.d_osc < 2 {
            return Err(Error::InvalidParameter(format!("d_osc must be >= 2, got {}", self.d_osc)));
        }
        if self.frequencies.iter().chain(&self.couplings).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite frequency or coupling".into()));
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        self.frequencies.len()
    }

    pub fn layout(&self) -> DimensionLayout {
        let mut dims = vec![2];
        dims.extend(std::iter::repeat_n(self.d_osc, self.modes()));
        DimensionLayout::new(dims).expect("validated dims are positive")
    }

    pub fn env_dim(&self) -> usize {
        self.d_osc.pow(self.modes() as u32)
    }
}

/// Equally spaced measurement times `t_k = k Δ`, `k = 1..=steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub delta: f64,
    pub steps: usize,
    /// Propagation points per interval for fine-grained traces.
    pub substeps: usize,
}

impl Schedule {
    pub fn new(delta: f64, steps: usize, substeps: usize) -> Result<Self> {
        let s = Self { delta, steps, substeps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("delta must be positive, got {}", self.delta)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("at least one measurement time is required".into()));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidParameter("substeps must be positive".into()));
        }
        Ok(())
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.delta
    }

    /// `t_0, t_1, ..., t_M`.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

/// Finite set of measurement operators `M_θ` with effects `F_θ = M_θ† M_θ`.
#[derive(Clone, Debug)]
pub struct Instrument {
    labels: Vec<String>,
    operators: Vec<CMatrix>,
    effects: Vec<CMatrix>,
}

impl Instrument {
    pub fn new(labels: Vec<String>, operators: Vec<CMatrix>) -> Result<Self> {
        if labels.is_empty() || labels.len() != operators.len() {
            return Err(Error::InvalidParameter(
                "an instrument needs one operator per outcome label".into(),
            ));
        }
        let d = operators[0].nrows();
        if operators.iter().any(|m| m.nrows() != d || m.ncols() != d) {
            return Err(Error::DimensionMismatch("measurement operators differ in shape".into()));
        }
        let effects: Vec<CMatrix> = operators.iter().map(|m| m.adjoint() * m).collect();
        let total = effects.iter().fold(CMatrix::zeros(d, d), |acc, f| acc + f);
        let residual = linalg::frobenius_norm(&(total - linalg::identity(d)));
        if residual > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "effects do not sum to the identity (residual {residual:.3e})"
            )));
        }
        Ok(Self { labels, operators, effects })
    }

    /// `F_± = (1−λ)|±⟩⟨±| + (λ/2) I`, `M_± = F_±^{1/2}`.
    pub fn povm(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidParameter(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        // |±⟩⟨±| = (I ± σx)/2, so F_± = ½ I ± ½(1−λ) σx with eigenvalues
        // 1 − λ/2 (on |±⟩) and λ/2 (on |∓⟩); the square root is closed form.
        let (hi, lo) = ((1.0 - lambda / 2.0).sqrt(), (lambda / 2.0).sqrt());
        let half = 0.5;
        let m = |sign: f64| {
            let diag = linalg::real(half * (hi + lo));
            let off = linalg::real(sign * half * (hi - lo));
            CMatrix::from_row_slice(2, 2, &[diag, off, off, diag])
        };
        Self::new(vec!["+".into(), "-".into()], vec![m(1.0), m(-1.0)])
    }

    /// Single-outcome instrument that leaves the state untouched.
    pub fn identity(d: usize) -> Self {
        Self::new(vec!["1".into()], vec![linalg::identity(d)]).expect("identity is complete")
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.operators[0].nrows()
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownOutcome(label.to_string()))
    }

    pub fn operator(&self, outcome: usize) -> &CMatrix {
        &self.operators[outcome]
    }

    pub fn effect(&self, outcome: usize) -> &CMatrix {
        &self.effects[outcome]
    }

    pub fn operators(&self) -> &[CMatrix] {
        &self.operators
    }
}

/// Initial spin state; the oscillators always start in the vacuum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpinInit {
    Ground,
    Excited,
    Plus,
    /// Row-major 2x2 density matrix as `[re, im]` pairs.
    Custom(Vec<[f64; 2]>),
}

impl SpinInit {
    /// Pure-state factors `{|v_i⟩}` with `ρ_S = Σ_i |v_i⟩⟨v_i|`.
    pub fn factors(&self) -> Result<Vec<CVector>> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Ok(match self {
            SpinInit::Ground => vec![CVector::from_vec(vec![ONE, ZERO])],
            SpinInit::Excited => vec![CVector::from_vec(vec![ZERO, ONE])],
            SpinInit::Plus => vec![CVector::from_vec(vec![linalg::real(s), linalg::real(s)])],
            SpinInit::Custom(entries) => {
                let rho = Self::custom_matrix(entries)?;
                let eig = linalg::hermitian_eigh(&rho)?;
                eig.values
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l > 1e-15)
                    .map(|(j, &l)| eig.vectors.column(j) * linalg::real(l.sqrt()))
                    .collect()
            }
        })
    }

    pub fn density_matrix(&self) -> Result<CMatrix> {
        Ok(self
            .factors()?
            .iter()
            .fold(CMatrix::zeros(2, 2), |acc, v| acc + v * v.adjoint()))
    }

    fn custom_matrix(entries: &[[f64; 2]]) -> Result<CMatrix> {
        if entries.len() != 4 {
            return Err(Error::InvalidParameter(format!(
                "custom spin state needs 4 entries, got {}",
                entries.len()
            )));
        }
        let rho = CMatrix::from_row_iterator(2, 2, entries.iter().map(|&[re, im]| C64::new(re, im)));
        if !linalg::is_hermitian(&rho, 1e-12) {
            return Err(Error::InvalidParameter("custom spin state is not Hermitian".into()));
        }
        let tr = linalg::trace(&rho);
        if (tr.re - 1.0).abs() > 1e-10 || tr.im.abs() > 1e-10 {
            return Err(Error::InvalidParameter(format!("custom spin state has trace {tr}")));
        }
        let eig = linalg::hermitian_eigh(&rho)?;
        if eig.values[0] < -1e-10 {
            return Err(Error::InvalidParameter(format!(
                "custom spin state has negative eigenvalue {}",
                eig.values[0]
            )));
        }
        Ok(rho)
    }
}

/// Composite-system state `ρ = Σ_i |ψ_i⟩⟨ψ_i|`, kept as unnormalized kets.
///
/// Along a measurement branch the kets are not renormalized, so
/// [`GlobalState::weight`] is the probability of the outcomes so far.
#[derive(Clone, Debug)]
pub struct GlobalState {
    layout: DimensionLayout,
    kets: Vec<CVector>,
}

impl GlobalState {
    pub fn from_kets(layout: DimensionLayout, kets: Vec<CVector>) -> Result<Self> {
        if kets.iter().any(|k| k.len() != layout.total()) {
            return Err(Error::DimensionMismatch("ket length differs from layout total".into()));
        }
        Ok(Self { layout, kets })
    }

    pub fn layout(&self) -> &DimensionLayout {
        &self.layout
    }

    pub fn kets(&self) -> &[CVector] {
        &self.kets
    }

    pub fn weight(&self) -> f64 {
        self.kets.iter().map(|k| k.norm_squared()).sum()
    }

    pub fn density_matrix(&self) -> CMatrix {
        let n = self.layout.total();
        self.kets
            .iter()
            .fold(CMatrix::zeros(n, n), |acc, k| acc + k * k.adjoint())
    }

    pub fn reduced_system(&self) -> CMatrix {
        let d = self.layout.system_dim();
        self.kets
            .iter()
            .fold(CMatrix::zeros(d, d), |acc, k| acc + linalg::reduced_outer(k, k, d))
    }

    pub fn reduced_env(&self) -> CMatrix {
        let (d, de) = (self.layout.system_dim(), self.layout.env_dim());
        self.kets
            .iter()
            .fold(CMatrix::zeros(de, de), |acc, k| acc + linalg::env_reduced_outer(k, k, d))
    }

    /// Vectors `{w}` with `Tr_S ρ / Tr ρ = Σ w w†`.
    pub fn env_factors(&self) -> Result<Vec<CVector>> {
        let weight = self.weight();
        if weight <= 0.0 {
            return Err(Error::ZeroProbability("<state>".into()));
        }
        let (d, de) = (self.layout.system_dim(), self.layout.env_dim());
        let scale = linalg::real(weight.sqrt().recip());
        Ok(self
            .kets
            .iter()
            .flat_map(|k| (0..d).map(move |s| k.rows(s * de, de) * scale))
            .filter(|w| w.norm_squared() > 0.0)
            .collect())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let f = linalg::real(factor.sqrt());
        Self {
            layout: self.layout.clone(),
            kets: self.kets.iter().map(|k| k * f).collect(),
        }
    }

    /// Largest population of the highest Fock level over all oscillators.
    pub fn top_fock_population(&self) -> f64 {
        let dims = self.layout.dims();
        let mut pops = vec![0.0; dims.len()];
        for ket in &self.kets {
            for (idx, amp) in ket.iter().enumerate() {
                let p = amp.norm_sqr();
                if p == 0.0 {
                    continue;
                }
                for (m, &digit) in self.layout.digits(idx).iter().enumerate().skip(1) {
                    if digit + 1 == dims[m] {
                        pops[m] += p;
                    }
                }
            }
        }
        pops.into_iter().skip(1).fold(0.0, f64::max)
    }
}

pub fn build_hamiltonian(p: &SpinBosonParams) -> Result<CMatrix> {
    p.validate()?;
    let n = p.layout().total();
    let de = p.env_dim();
    let d = p.d_osc;
    let modes = p.modes();
    let env_layout = DimensionLayout::new(vec![d; modes])?;
    let mut h = CMatrix::zeros(n, n);
    for e in 0..de {
        let occ = env_layout.digits(e);
        let bath: f64 = occ.iter().zip(&p.frequencies).map(|(&nk, &w)| nk as f64 * w).sum();
        h[(e, e)] = linalg::real(-0.5 + bath);
        h[(de + e, de + e)] = linalg::real(0.5 + bath);
        // g_k σ⁻ b_k†: |1, n⟩ -> √(n_k + 1) |0, n + e_k⟩
        for k in 0..modes {
            if occ[k] + 1 < d {
                let stride = d.pow((modes - 1 - k) as u32);
                let amp = linalg::real(p.couplings[k] * ((occ[k] + 1) as f64).sqrt());
                let (row, col) = (e + stride, de + e);
                h[(row, col)] += amp;
                h[(col, row)] += amp;
            }
        }
    }
    Ok(h)
}

/// Total excitation number `σ⁺σ⁻ ⊗ I + Σ_k I ⊗ b_k† b_k` (diagonal).
pub fn number_operator(p: &SpinBosonParams) -> CMatrix {
    let layout = p.layout();
    let diag = CVector::from_fn(layout.total(), |idx, _| {
        let digits = layout.digits(idx);
        linalg::real(digits.iter().sum::<usize>() as f64)
    });
    CMatrix::from_diagonal(&diag)
}

/// `exp(−iHt)` from one cached eigendecomposition of `H`.
#[derive(Clone, Debug)]
pub struct SpectralPropagator {
    eig: Eigh,
    vectors_adj: CMatrix,
}

impl SpectralPropagator {
    pub fn new(h: &CMatrix) -> Result<Self> {
        let eig = linalg::hermitian_eigh(h)?;
        let vectors_adj = eig.vectors.adjoint();
        Ok(Self { eig, vectors_adj })
    }

    pub fn dim(&self) -> usize {
        self.eig.values.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eig.values
    }

    pub fn matrix(&self, dt: f64) -> CMatrix {
        linalg::spectral_function(&self.eig, |l| C64::from_polar(1.0, -l * dt))
    }

    pub fn apply(&self, dt: f64, psi: &CVector) -> CVector {
        let mut coeffs = &self.vectors_adj * psi;
        for (c, &l) in coeffs.iter_mut().zip(&self.eig.values) {
            *c *= C64::from_polar(1.0, -l * dt);
        }
        &self.eig.vectors * coeffs
    }

    pub fn evolve(&self, dt: f64, state: &GlobalState) -> GlobalState {
        GlobalState {
            layout: state.layout.clone(),
            kets: state.kets.iter().map(|k| self.apply(dt, k)).collect(),
        }
    }
}

/// `exp(−iH dt)` as a dense matrix.
pub fn propagator(h: &CMatrix, dt: f64) -> Result<CMatrix> {
    Ok(SpectralPropagator::new(h)?.matrix(dt))
}

/// `(M ⊗ I_E)|ψ⟩` for a system operator `M`.
pub fn apply_system_operator(m: &CMatrix, psi: &CVector, dim_s: usize) -> CVector {
    let de = psi.len() / dim_s;
    let mut out = CVector::zeros(psi.len());
    for s in 0..dim_s {
        for sp in 0..dim_s {
            let c = m[(s, sp)];
            if c == ZERO {
                continue;
            }
            let src = psi.rows(sp * de, de);
            let mut dst = out.rows_mut(s * de, de);
            dst.axpy(c, &src, ONE);
        }
    }
    out
}

/// `(M_θ ⊗ I) ρ (M_θ† ⊗ I)`, left sub-normalized.
pub fn apply_measurement(state: &GlobalState, inst: &Instrument, outcome: &str) -> Result<GlobalState> {
    let idx = inst.index_of(outcome)?;
    Ok(apply_outcome(state, inst, idx))
}

pub fn apply_outcome(state: &GlobalState, inst: &Instrument, outcome: usize) -> GlobalState {
    let d = state.layout.system_dim();
    let m = inst.operator(outcome);
    GlobalState {
        layout: state.layout.clone(),
        kets: state.kets.iter().map(|k| apply_system_operator(m, k, d)).collect(),
    }
}

/// Non-selective update `Σ_θ (M_θ ⊗ I) ρ (M_θ ⊗ I)†`.
pub fn apply_nonselective(state: &GlobalState, inst: &Instrument) -> GlobalState {
    let d = state.layout.system_dim();
    let kets = inst
        .operators()
        .iter()
        .flat_map(|m| state.kets.iter().map(move |k| apply_system_operator(m, k, d)))
        .collect();
    GlobalState { layout: state.layout.clone(), kets }
}

/// The composite model: Hamiltonian, its propagator and the initial state.
#[derive(Clone, Debug)]
pub struct SpinBosonModel {
    params: SpinBosonParams,
    layout: DimensionLayout,
    hamiltonian: CMatrix,
    propagator: SpectralPropagator,
    initial: GlobalState,
    vacuum: CVector,
}

impl SpinBosonModel {
    pub fn new(params: SpinBosonParams, spin_init: &SpinInit) -> Result<Self> {
        let hamiltonian = build_hamiltonian(&params)?;
        let propagator = SpectralPropagator::new(&hamiltonian)?;
        let layout = params.layout();
        let mut vacuum = CVector::zeros(params.env_dim());
        vacuum[0] = ONE;
        let initial = build_initial_state(&params, spin_init)?;
        Ok(Self { params, layout, hamiltonian, propagator, initial, vacuum })
    }

    pub fn params(&self) -> &SpinBosonParams {
        &self.params
    }

    pub fn layout(&self) -> &DimensionLayout {
        &self.layout
    }

    pub fn system_dim(&self) -> usize {
        self.layout.system_dim()
    }

    pub fn hamiltonian(&self) -> &CMatrix {
        &self.hamiltonian
    }

    pub fn propagator(&self) -> &SpectralPropagator {
        &self.propagator
    }

    pub fn initial_state(&self) -> &GlobalState {
        &self.initial
    }

    /// Environment vacuum `|vac⟩`, the factor of `ρ_{E,0}`.
    pub fn vacuum(&self) -> &CVector {
        &self.vacuum
    }

    pub fn evolve(&self, dt: f64, state: &GlobalState) -> GlobalState {
        self.propagator.evolve(dt, state)
    }
}

/// `ρ_S,init ⊗ |vac⟩⟨vac|`.
pub fn build_initial_state(p: &SpinBosonParams, spin_init: &SpinInit) -> Result<GlobalState> {
    p.validate()?;
    let de = p.env_dim();
    let mut vacuum = CVector::zeros(de);
    vacuum[0] = ONE;
    let kets = spin_init
        .factors()?
        .iter()
        .map(|v| linalg::kron_vec(v, &vacuum))
        .collect();
    GlobalState::from_kets(p.layout(), kets)
}
