//! Dense complex linear algebra and tensor-product bookkeeping.
//!
//! Matrices are `nalgebra` dense matrices of `Complex64`; indexing `(i, j)`
//! is always row `i`, column `j` regardless of the storage order. Composite
//! Hilbert spaces are ordered system-major: the basis state
//! `|s⟩ ⊗ |e⟩` has index `s * dim_e + e`, matching [`kron`].

use nalgebra::{DMatrix, DVector};
pub use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Ordered tensor factorization of a Hilbert space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DimensionLayout {
    dims: Vec<usize>,
}

impl DimensionLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "subsystem dimensions must be positive, got {dims:?}"
            )));
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    /// Dimension of the first factor (the open system by convention).
    pub fn system_dim(&self) -> usize {
        self.dims[0]
    }

    /// Product of all factors after the first.
    pub fn env_dim(&self) -> usize {
        self.dims[1..].iter().product()
    }

    /// Mixed-radix digits of a flat index, most significant factor first.
    pub fn digits(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for (slot, &d) in out.iter_mut().zip(&self.dims).rev() {
            *slot = index % d;
            index /= d;
        }
        out
    }
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

pub fn kron_vec(a: &CVector, b: &CVector) -> CVector {
    a.kronecker(b)
}

pub fn dagger(a: &CMatrix) -> CMatrix {
    a.adjoint()
}

pub fn trace(a: &CMatrix) -> C64 {
    a.diagonal().iter().sum()
}

pub fn frobenius_norm(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest singular value.
pub fn spectral_norm(a: &CMatrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

pub fn hermiticity_residual(a: &CMatrix) -> f64 {
    frobenius_norm(&(a - a.adjoint()))
}

pub fn is_hermitian(a: &CMatrix, rel_tol: f64) -> bool {
    a.is_square() && hermiticity_residual(a) <= rel_tol * frobenius_norm(a).max(1.0)
}

/// Reduced operator on the subsystems listed in `keep` (sorted, unique).
pub fn partial_trace(rho: &CMatrix, layout: &DimensionLayout, keep: &[usize]) -> Result<CMatrix> {
    let n = layout.total();
    if rho.nrows() != n || rho.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "operator is {}x{}, layout total is {n}",
            rho.nrows(),
            rho.ncols()
        )));
    }
    if keep.windows(2).any(|w| w[0] >= w[1]) || keep.iter().any(|&k| k >= layout.len()) {
        return Err(Error::InvalidParameter(format!(
            "kept subsystems {keep:?} must be sorted, unique and below {}",
            layout.len()
        )));
    }
    let dims = layout.dims();
    let traced: Vec<usize> = (0..dims.len()).filter(|i| !keep.contains(i)).collect();
    let kept_dim: usize = keep.iter().map(|&i| dims[i]).product();
    let traced_dim: usize = traced.iter().map(|&i| dims[i]).product();

    // flat index of (kept digits, traced digits) in the full space
    let compose = |kept_idx: usize, traced_idx: usize| -> usize {
        let mut digits = vec![0; dims.len()];
        let mut r = kept_idx;
        for &i in keep.iter().rev() {
            digits[i] = r % dims[i];
            r /= dims[i];
        }
        let mut r = traced_idx;
        for &i in traced.iter().rev() {
            digits[i] = r % dims[i];
            r /= dims[i];
        }
        digits.iter().zip(dims).fold(0, |acc, (&d, &n)| acc * n + d)
    };

    let mut out = CMatrix::zeros(kept_dim, kept_dim);
    for t in 0..traced_dim {
        let rows: Vec<usize> = (0..kept_dim).map(|k| compose(k, t)).collect();
        for (i, &ri) in rows.iter().enumerate() {
            for (j, &rj) in rows.iter().enumerate() {
                out[(i, j)] += rho[(ri, rj)];
            }
        }
    }
    Ok(out)
}

/// `Tr_E |ψ⟩⟨φ|` for vectors on a bipartite `dim_s ⊗ dim_e` space.
pub fn reduced_outer(psi: &CVector, phi: &CVector, dim_s: usize) -> CMatrix {
    let dim_e = psi.len() / dim_s;
    let mut out = CMatrix::zeros(dim_s, dim_s);
    for a in 0..dim_s {
        let pa = psi.rows(a * dim_e, dim_e);
        for b in 0..dim_s {
            let pb = phi.rows(b * dim_e, dim_e);
            out[(a, b)] = pa.iter().zip(pb.iter()).map(|(x, y)| x * y.conj()).sum();
        }
    }
    out
}

/// `Tr_S |ψ⟩⟨φ|` for vectors on a bipartite `dim_s ⊗ dim_e` space.
pub fn env_reduced_outer(psi: &CVector, phi: &CVector, dim_s: usize) -> CMatrix {
    let dim_e = psi.len() / dim_s;
    let mut out = CMatrix::zeros(dim_e, dim_e);
    for s in 0..dim_s {
        let ps = psi.rows(s * dim_e, dim_e);
        let fs = phi.rows(s * dim_e, dim_e);
        out += ps * fs.adjoint();
    }
    out
}

/// Spectral decomposition of a Hermitian matrix.
#[derive(Clone, Debug)]
pub struct Eigh {
    /// Ascending.
    pub values: Vec<f64>,
    /// Columns are the corresponding orthonormal eigenvectors.
    pub vectors: CMatrix,
}

impl Eigh {
    pub fn reconstruct(&self) -> CMatrix {
        let mut scaled = self.vectors.clone();
        for (j, &l) in self.values.iter().enumerate() {
            scaled.column_mut(j).scale_mut(l);
        }
        scaled * self.vectors.adjoint()
    }
}

/// Hermitian eigendecomposition.
///
/// The sparsity pattern is split into connected components first, so a
/// Hamiltonian with conserved quantities is diagonalized block by block.
/// The result is identical to a dense decomposition up to the choice of
/// basis inside degenerate eigenspaces.
pub fn hermitian_eigh(a: &CMatrix) -> Result<Eigh> {
    let n = a.nrows();
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "eigh needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let residual = hermiticity_residual(a);
    let tol = 1e-12 * frobenius_norm(a).max(1.0);
    if residual > tol {
        return Err(Error::NotHermitian { residual, tol });
    }

    let mut pairs: Vec<(f64, CVector)> = Vec::with_capacity(n);
    for block in connected_blocks(a) {
        let m = block.len();
        let mut sub = CMatrix::zeros(m, m);
        for (i, &bi) in block.iter().enumerate() {
            for (j, &bj) in block.iter().enumerate() {
                // symmetrize so rounding noise in the input cannot bias the solver
                sub[(i, j)] = (a[(bi, bj)] + a[(bj, bi)].conj()) * 0.5;
            }
        }
        let eig = sub.symmetric_eigen();
        for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
            let mut v = CVector::zeros(n);
            for (i, &bi) in block.iter().enumerate() {
                v[bi] = eig.eigenvectors[(i, j)];
            }
            pairs.push((lambda, v));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut vectors = CMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (j, (lambda, v)) in pairs.into_iter().enumerate() {
        values.push(lambda);
        vectors.set_column(j, &v);
    }
    Ok(Eigh { values, vectors })
}

/// Index sets of the connected components of the nonzero pattern.
fn connected_blocks(a: &CMatrix) -> Vec<Vec<usize>> {
    let n = a.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for j in 0..n {
        for i in 0..n {
            if i != j && a[(i, j)] != ZERO {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = blocks.len();
            blocks.push(Vec::new());
        }
        blocks[slot[r]].push(i);
    }
    blocks
}

/// Matrix exponential.
///
/// Skew-Hermitian arguments `A = -i H` go through the spectral route
/// `V exp(-i Λ) V†`; anything else falls back to scaling and squaring.
pub fn matrix_exponential(a: &CMatrix) -> CMatrix {
    assert!(a.is_square(), "matrix_exponential needs a square matrix");
    let skew = frobenius_norm(&(a + a.adjoint()));
    if skew <= 1e-14 * frobenius_norm(a).max(1.0) {
        // A = -iH  <=>  H = iA
        let h = a.map(|z| I * z);
        if let Ok(eig) = hermitian_eigh(&h) {
            return spectral_function(&eig, |l| C64::from_polar(1.0, -l));
        }
    }
    a.clone().exp()
}

/// `V f(Λ) V†`.
pub fn spectral_function(eig: &Eigh, f: impl Fn(f64) -> C64) -> CMatrix {
    let mut scaled = eig.vectors.clone();
    for (j, &l) in eig.values.iter().enumerate() {
        let fl = f(l);
        for z in scaled.column_mut(j).iter_mut() {
            *z *= fl;
        }
    }
    scaled * eig.vectors.adjoint()
}

/// Positive square root of a positive semidefinite matrix; negative
/// eigenvalues from rounding are clamped to zero.
pub fn psd_sqrt(a: &CMatrix) -> Result<CMatrix> {
    let eig = hermitian_eigh(a)?;
    Ok(spectral_function(&eig, |l| C64::new(l.max(0.0).sqrt(), 0.0)))
}

pub fn pauli_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
}

pub fn pauli_y() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, -I, I, ZERO])
}

/// Standard `diag(1, -1)`.
pub fn pauli_z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE])
}

/// `|i⟩⟨j|` in dimension `n`.
pub fn matrix_unit(n: usize, i: usize, j: usize) -> CMatrix {
    let mut m = CMatrix::zeros(n, n);
    m[(i, j)] = ONE;
    m
}

pub fn real(x: f64) -> C64 {
    C64::new(x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &CMatrix, b: &CMatrix, tol: f64) -> bool {
        frobenius_norm(&(a - b)) <= tol
    }

    #[test]
    fn kron_of_identities_is_identity() {
        assert_eq!(kron(&identity(2), &identity(3)), identity(6));
    }

    #[test]
    fn kron_pauli_z_with_projector() {
        let p0 = matrix_unit(2, 0, 0);
        let got = kron(&pauli_z(), &p0);
        let want = CMatrix::from_diagonal(&CVector::from_vec(vec![ONE, ZERO, -ONE, ZERO]));
        assert_eq!(got, want);
    }

    #[test]
    fn kron_entry_formula() {
        let a = CMatrix::from_fn(2, 3, |i, j| C64::new(i as f64 + 1.0, j as f64));
        let b = CMatrix::from_fn(3, 2, |i, j| C64::new(j as f64, -(i as f64)));
        let k = kron(&a, &b);
        for i in 0..2 {
            for j in 0..3 {
                for p in 0..3 {
                    for q in 0..2 {
                        assert_eq!(k[(i * 3 + p, j * 2 + q)], a[(i, j)] * b[(p, q)]);
                    }
                }
            }
        }
    }

    #[test]
    fn frobenius_examples() {
        assert!((frobenius_norm(&identity(2)) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(frobenius_norm(&CMatrix::zeros(3, 3)), 0.0);
        assert!((frobenius_norm(&kron(&pauli_x(), &pauli_x())) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn partial_trace_bell_state() {
        let s = 0.5f64.sqrt();
        let phi = CVector::from_vec(vec![real(s), ZERO, ZERO, real(s)]);
        let rho = &phi * phi.adjoint();
        let layout = DimensionLayout::new(vec![2, 2]).unwrap();
        let red = partial_trace(&rho, &layout, &[0]).unwrap();
        assert!(close(&red, &(identity(2) * real(0.5)), 1e-15));
    }

    #[test]
    fn partial_trace_product_state() {
        let rs = CMatrix::from_row_slice(2, 2, &[real(0.7), C64::new(0.1, 0.2), C64::new(0.1, -0.2), real(0.3)]);
        let re = CMatrix::from_diagonal(&CVector::from_vec(vec![real(0.5), real(0.25), real(0.25)]));
        let layout = DimensionLayout::new(vec![2, 3]).unwrap();
        let rho = kron(&rs, &re);
        assert!(close(&partial_trace(&rho, &layout, &[0]).unwrap(), &rs, 1e-15));
        assert!(close(&partial_trace(&rho, &layout, &[1]).unwrap(), &re, 1e-15));
        assert!(close(&partial_trace(&rho, &layout, &[0, 1]).unwrap(), &rho, 0.0));
    }

    #[test]
    fn partial_trace_rejects_wrong_dimension() {
        let layout = DimensionLayout::new(vec![2, 3]).unwrap();
        assert!(matches!(
            partial_trace(&identity(5), &layout, &[0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn partial_trace_middle_factor() {
        // ρ_A ⊗ ρ_B ⊗ ρ_C, keep A and C
        let a = CMatrix::from_row_slice(2, 2, &[real(0.6), I * 0.1, -I * 0.1, real(0.4)]);
        let b = CMatrix::from_diagonal(&CVector::from_vec(vec![real(0.2), real(0.8)]));
        let c = CMatrix::from_row_slice(2, 2, &[real(0.5), real(0.5), real(0.5), real(0.5)]);
        let layout = DimensionLayout::new(vec![2, 2, 2]).unwrap();
        let rho = kron(&kron(&a, &b), &c);
        let got = partial_trace(&rho, &layout, &[0, 2]).unwrap();
        assert!(close(&got, &kron(&a, &c), 1e-15));
    }

    #[test]
    fn reduced_outer_matches_dense_partial_trace() {
        let psi = CVector::from_fn(6, |i, _| C64::new(i as f64 * 0.3 - 0.5, 0.2 * (i % 2) as f64));
        let phi = CVector::from_fn(6, |i, _| C64::new(1.0 - 0.1 * i as f64, -0.3));
        let layout = DimensionLayout::new(vec![2, 3]).unwrap();
        let dense = &psi * phi.adjoint();
        assert!(close(&reduced_outer(&psi, &phi, 2), &partial_trace(&dense, &layout, &[0]).unwrap(), 1e-14));
        assert!(close(&env_reduced_outer(&psi, &phi, 2), &partial_trace(&dense, &layout, &[1]).unwrap(), 1e-14));
    }

    #[test]
    fn eigh_pauli_x_and_diagonal() {
        let e = hermitian_eigh(&pauli_x()).unwrap();
        assert!((e.values[0] + 1.0).abs() < 1e-14 && (e.values[1] - 1.0).abs() < 1e-14);
        let d = CMatrix::from_diagonal(&CVector::from_vec(vec![real(3.0), real(1.0), real(2.0)]));
        let e = hermitian_eigh(&d).unwrap();
        assert_eq!(e.values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn eigh_rejects_non_hermitian() {
        let a = CMatrix::from_row_slice(2, 2, &[ONE, ONE, ZERO, ONE]);
        assert!(matches!(hermitian_eigh(&a), Err(Error::NotHermitian { .. })));
    }

    #[test]
    fn expm_zero_is_identity() {
        assert_eq!(matrix_exponential(&CMatrix::zeros(3, 3)), identity(3));
    }

    #[test]
    fn expm_half_turn_about_x() {
        // oracle: truncated power series
        let a = pauli_x() * (-I * std::f64::consts::FRAC_PI_2);
        let mut series = identity(2);
        let mut term = identity(2);
        for n in 1..40 {
            term = &term * &a / real(n as f64);
            series += &term;
        }
        let got = matrix_exponential(&a);
        assert!(close(&got, &series, 1e-12));
        assert!(close(&got, &(pauli_x() * -I), 1e-12));
    }

    #[test]
    fn expm_general_route_inverse() {
        let a = CMatrix::from_row_slice(2, 2, &[real(0.3), real(1.2), C64::new(-0.4, 0.5), real(-0.1)]);
        let prod = matrix_exponential(&a) * matrix_exponential(&(-&a));
        assert!(close(&prod, &identity(2), 1e-8));
    }

    #[test]
    fn eigh_splits_block_diagonal_input() {
        let mut a = CMatrix::zeros(4, 4);
        a[(0, 3)] = C64::new(0.5, 0.5);
        a[(3, 0)] = C64::new(0.5, -0.5);
        a[(1, 1)] = real(2.0);
        a[(2, 2)] = real(-1.0);
        let e = hermitian_eigh(&a).unwrap();
        assert!(close(&e.reconstruct(), &a, 1e-14));
        assert_eq!(connected_blocks(&a), vec![vec![0, 3], vec![1], vec![2]]);
    }

    #[test]
    fn layout_digits() {
        let l = DimensionLayout::new(vec![2, 3, 4]).unwrap();
        assert_eq!(l.total(), 24);
        assert_eq!(l.digits(1 * 12 + 2 * 4 + 3), vec![1, 2, 3]);
        assert_eq!(l.env_dim(), 12);
        assert!(DimensionLayout::new(vec![2, 0]).is_err());
    }
}
