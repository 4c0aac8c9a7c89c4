//! Dense complex linear algebra for small bipartite quantum systems:
//! states, measurement families, collapse and distances.
//!
//! Dimensions stay at desk scale (at most 16 per component), so everything
//! is exact dense arithmetic with Hermitian eigendecompositions where
//! spectra are needed.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

/// Dense complex matrix carrier used for all operators.
pub type CMat = DMatrix<Complex64>;

/// Hermiticity / trace / completeness / unitarity tolerance.
pub const TOL: f64 = 1e-9;
/// Probability tolerance for Born-rule sums.
pub const TOL_PROB: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum QmathError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not Hermitian within tolerance (max deviation {0:.3e})")]
    NotHermitian(f64),
    #[error("matrix is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("trace is {0}, expected 1 within tolerance")]
    BadTrace(f64),
    #[error("measurement family incomplete for input {input} (deviation {dev:.3e})")]
    IncompleteMeasurement { input: usize, dev: f64 },
    #[error("operator is not unitary within tolerance (deviation {0:.3e})")]
    NotUnitary(f64),
    #[error("collapse on outcome of zero probability")]
    ZeroProbabilityCollapse,
}

pub fn cnum(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Identity matrix of the given dimension.
pub fn identity(dim: usize) -> CMat {
    CMat::identity(dim, dim)
}

/// Kronecker product `a ⊗ b`.
pub fn tensor(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

fn hermiticity_deviation(m: &CMat) -> f64 {
    let adj = m.adjoint();
    (m - adj).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Real eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &CMat) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// A density matrix: Hermitian, positive semidefinite, unit trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    dim: usize,
    mat: CMat,
}

impl DensityMatrix {
    /// Validates all invariants (including the eigenvalue scan for
    /// positive semidefiniteness) before accepting the matrix.
    pub fn new(mat: CMat) -> Result<Self, QmathError> {
        let rho = Self::new_unvalidated(mat)?;
        rho.check_psd()?;
        Ok(rho)
    }

    /// Checks Hermiticity and trace only. Used on the per-round hot path,
    /// where positivity follows from the construction `K ρ K† / p`;
    /// tests re-validate states fully via [`DensityMatrix::validate`].
    pub fn new_unvalidated(mat: CMat) -> Result<Self, QmathError> {
        if mat.nrows() != mat.ncols() {
            return Err(QmathError::DimensionMismatch(format!(
                "{}x{} is not square",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let dev = hermiticity_deviation(&mat);
        if dev > TOL {
            return Err(QmathError::NotHermitian(dev));
        }
        let tr = mat.trace();
        if (tr.re - 1.0).abs() > TOL || tr.im.abs() > TOL {
            return Err(QmathError::BadTrace(tr.re));
        }
        Ok(Self { dim: mat.nrows(), mat })
    }

    fn check_psd(&self) -> Result<(), QmathError> {
        let min = hermitian_eigenvalues(&self.mat)[0];
        if min < -TOL {
            return Err(QmathError::NotPsd(min));
        }
        Ok(())
    }

    /// Full invariant check: Hermitian, PSD, unit trace.
    pub fn validate(&self) -> Result<(), QmathError> {
        Self::new_unvalidated(self.mat.clone())?;
        self.check_psd()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    /// Pure state |ψ⟩⟨ψ| from an (unnormalized) state vector.
    pub fn pure(psi: &[Complex64]) -> Result<Self, QmathError> {
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let dim = psi.len();
        let mut mat = CMat::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                mat[(i, j)] = psi[i] / norm * (psi[j] / norm).conj();
            }
        }
        Self::new(mat)
    }

    /// Classical diagonal state from a probability vector.
    pub fn diagonal(probs: &[f64]) -> Result<Self, QmathError> {
        let dim = probs.len();
        let mut mat = CMat::zeros(dim, dim);
        for (i, p) in probs.iter().enumerate() {
            mat[(i, i)] = cnum(*p, 0.0);
        }
        Self::new(mat)
    }

    /// Convex mixture Σ wᵢ ρᵢ.
    pub fn mix(parts: &[(f64, DensityMatrix)]) -> Result<Self, QmathError> {
        let dim = parts[0].1.dim;
        let mut mat = CMat::zeros(dim, dim);
        for (w, rho) in parts {
            mat += rho.matrix() * cnum(*w, 0.0);
        }
        Self::new(mat)
    }
}

/// A family of measurement operators indexed by (input, outcome),
/// acting on one subsystem. Completeness Σₐ Mₓᵃ† Mₓᵃ = 1 holds per input.
#[derive(Debug, Clone)]
pub struct MeasurementFamily {
    input_alphabet_size: usize,
    outcome_alphabet_size: usize,
    dim: usize,
    operators: Vec<CMat>, // index = input * outcomes + outcome
}

impl MeasurementFamily {
    pub fn new(
        input_alphabet_size: usize,
        outcome_alphabet_size: usize,
        operators: Vec<CMat>,
    ) -> Result<Self, QmathError> {
        assert_eq!(operators.len(), input_alphabet_size * outcome_alphabet_size);
        let dim = operators[0].nrows();
        for op in &operators {
            if op.nrows() != dim || op.ncols() != dim {
                return Err(QmathError::DimensionMismatch(
                    "measurement operators must share one square dimension".into(),
                ));
            }
        }
        let fam = Self { input_alphabet_size, outcome_alphabet_size, dim, operators };
        for x in 0..input_alphabet_size {
            let mut sum = CMat::zeros(dim, dim);
            for a in 0..outcome_alphabet_size {
                let k = fam.operator(x, a);
                sum += k.adjoint() * k;
            }
            let dev = (&sum - identity(dim)).iter().map(|z| z.norm()).fold(0.0, f64::max);
            if dev > TOL {
                return Err(QmathError::IncompleteMeasurement { input: x, dev });
            }
        }
        Ok(fam)
    }

    pub fn operator(&self, input: usize, outcome: usize) -> &CMat {
        &self.operators[input * self.outcome_alphabet_size + outcome]
    }

    pub fn inputs(&self) -> usize {
        self.input_alphabet_size
    }

    pub fn outcomes(&self) -> usize {
        self.outcome_alphabet_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// A unitary operator, U†U = 1 within tolerance.
#[derive(Debug, Clone)]
pub struct Unitary {
    dim: usize,
    mat: CMat,
}

impl Unitary {
    pub fn new(mat: CMat) -> Result<Self, QmathError> {
        let dim = mat.nrows();
        if mat.ncols() != dim {
            return Err(QmathError::DimensionMismatch("unitary must be square".into()));
        }
        let dev =
            (mat.adjoint() * &mat - identity(dim)).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if dev > TOL {
            return Err(QmathError::NotUnitary(dev));
        }
        Ok(Self { dim, mat })
    }

    pub fn identity(dim: usize) -> Self {
        Self { dim, mat: identity(dim) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }
}

/// Born probability tr((K_a ⊗ K_b) ρ (K_a ⊗ K_b)†), clamped to [0, 1].
pub fn born_prob(rho: &DensityMatrix, k_a: &CMat, k_b: &CMat) -> Result<f64, QmathError> {
    let k = tensor(k_a, k_b);
    born_prob_joint(rho, &k)
}

/// Born probability for a pre-tensored joint Kraus operator.
pub fn born_prob_joint(rho: &DensityMatrix, k: &CMat) -> Result<f64, QmathError> {
    if k.nrows() != rho.dim() || k.ncols() != rho.dim() {
        return Err(QmathError::DimensionMismatch(format!(
            "operator {}x{} vs state dim {}",
            k.nrows(),
            k.ncols(),
            rho.dim()
        )));
    }
    // tr(K ρ K†) = Σ_{i,j,l} K_ij ρ_jl conj(K_il)
    let d = rho.dim();
    let m = rho.matrix();
    let mut p = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let kij = k[(i, j)];
            if kij.norm_sqr() == 0.0 {
                continue;
            }
            let mut acc = Complex64::default();
            for l in 0..d {
                acc += m[(j, l)] * k[(i, l)].conj();
            }
            p += (kij * acc).re;
        }
    }
    if !(-TOL_PROB..=1.0 + TOL_PROB).contains(&p) {
        return Err(QmathError::DimensionMismatch(format!(
            "Born probability {p} outside [0,1] beyond tolerance"
        )));
    }
    Ok(p.clamp(0.0, 1.0))
}

/// Post-measurement state (K_a⊗K_b) ρ (K_a⊗K_b)† / p.
pub fn collapse(rho: &DensityMatrix, k_a: &CMat, k_b: &CMat) -> Result<DensityMatrix, QmathError> {
    let k = tensor(k_a, k_b);
    collapse_joint(rho, &k)
}

/// Collapse for a pre-tensored joint Kraus operator.
pub fn collapse_joint(rho: &DensityMatrix, k: &CMat) -> Result<DensityMatrix, QmathError> {
    let p = born_prob_joint(rho, k)?;
    if p <= 0.0 {
        return Err(QmathError::ZeroProbabilityCollapse);
    }
    let mut post = k * rho.matrix() * k.adjoint();
    post /= cnum(p, 0.0);
    // Symmetrize away round-off before the Hermiticity check.
    let post = (&post + post.adjoint()) * cnum(0.5, 0.0);
    DensityMatrix::new_unvalidated(post)
}

/// U ρ U†.
pub fn apply_unitary(rho: &DensityMatrix, u: &Unitary) -> Result<DensityMatrix, QmathError> {
    if u.dim() != rho.dim() {
        return Err(QmathError::DimensionMismatch(format!(
            "unitary dim {} vs state dim {}",
            u.dim(),
            rho.dim()
        )));
    }
    let m = u.matrix() * rho.matrix() * u.matrix().adjoint();
    let m = (&m + m.adjoint()) * cnum(0.5, 0.0);
    DensityMatrix::new_unvalidated(m)
}

/// Which subsystem of a bipartite state to keep under the partial trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subsystem {
    A,
    B,
}

/// Partial trace of a bipartite state with subsystem dimensions `dims`.
pub fn partial_trace(
    rho: &DensityMatrix,
    keep: Subsystem,
    dims: (usize, usize),
) -> Result<DensityMatrix, QmathError> {
    let (da, db) = dims;
    if da * db != rho.dim() {
        return Err(QmathError::DimensionMismatch(format!(
            "subsystem dims {da}x{db} do not factor state dim {}",
            rho.dim()
        )));
    }
    let m = rho.matrix();
    let out = match keep {
        Subsystem::A => {
            let mut r = CMat::zeros(da, da);
            for i in 0..da {
                for j in 0..da {
                    let mut acc = Complex64::default();
                    for k in 0..db {
                        acc += m[(i * db + k, j * db + k)];
                    }
                    r[(i, j)] = acc;
                }
            }
            r
        }
        Subsystem::B => {
            let mut r = CMat::zeros(db, db);
            for i in 0..db {
                for j in 0..db {
                    let mut acc = Complex64::default();
                    for k in 0..da {
                        acc += m[(k * db + i, k * db + j)];
                    }
                    r[(i, j)] = acc;
                }
            }
            r
        }
    };
    DensityMatrix::new_unvalidated(out)
}

/// Trace distance ½‖ρ−σ‖₁ via the spectrum of ρ−σ.
pub fn trace_distance(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64, QmathError> {
    if rho.dim() != sigma.dim() {
        return Err(QmathError::DimensionMismatch(format!(
            "state dims {} vs {}",
            rho.dim(),
            sigma.dim()
        )));
    }
    let diff = rho.matrix() - sigma.matrix();
    let ev = hermitian_eigenvalues(&diff);
    Ok(0.5 * ev.iter().map(|l| l.abs()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigma_x() -> CMat {
        CMat::from_row_slice(2, 2, &[cnum(0., 0.), cnum(1., 0.), cnum(1., 0.), cnum(0., 0.)])
    }

    fn ket(bits: &[usize], dim: usize) -> Vec<Complex64> {
        // computational basis vector of a multi-qubit register
        let mut idx = 0;
        for b in bits {
            idx = idx * 2 + b;
        }
        let mut v = vec![Complex64::default(); dim];
        v[idx] = cnum(1.0, 0.0);
        v
    }

    #[test]
    fn tensor_identity() {
        assert_eq!(tensor(&identity(2), &identity(2)), identity(4));
    }

    #[test]
    fn tensor_basis_projectors() {
        let p0 = DensityMatrix::pure(&ket(&[0], 2)).unwrap();
        let p1 = DensityMatrix::pure(&ket(&[1], 2)).unwrap();
        let t = tensor(p0.matrix(), p1.matrix());
        let expected = DensityMatrix::diagonal(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((t - expected.matrix()).norm() < 1e-12);
    }

    #[test]
    fn tensor_mixed_product_identity() {
        // (A⊗B)(C⊗D) = AC ⊗ BD, and σx⊗σx maps |00⟩ to |11⟩
        let xx = tensor(&sigma_x(), &sigma_x());
        let v00 = CMat::from_column_slice(4, 1, &ket(&[0, 0], 4));
        let v11 = CMat::from_column_slice(4, 1, &ket(&[1, 1], 4));
        assert!((&xx * v00 - v11).norm() < 1e-12);

        let a = sigma_x();
        let b = identity(2);
        let c = sigma_x();
        let d = sigma_x();
        let lhs = tensor(&a, &b) * tensor(&c, &d);
        let rhs = tensor(&(&a * &c), &(&b * &d));
        assert!((lhs - rhs).norm() < 1e-12);
    }

    fn singlet() -> DensityMatrix {
        let s = 1.0 / 2.0f64.sqrt();
        DensityMatrix::pure(&[cnum(0., 0.), cnum(s, 0.), cnum(-s, 0.), cnum(0., 0.)]).unwrap()
    }

    /// Projector onto the ±1 eigenvector of cosθ Z + sinθ X.
    fn angle_projector(theta: f64, outcome: usize) -> CMat {
        let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
        let v = if outcome == 0 { [cnum(c, 0.), cnum(s, 0.)] } else { [cnum(-s, 0.), cnum(c, 0.)] };
        let mut m = CMat::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                m[(i, j)] = v[i] * v[j].conj();
            }
        }
        m
    }

    #[test]
    fn born_prob_singlet_optimal_chsh() {
        // For the singlet measured at relative angle θ, outcomes are
        // anticorrelated with P(a=b) = sin²(θ/2)/2 per pair. The optimal
        // CHSH angles give winning pairs probability (1/4)(1+1/√2).
        let rho = singlet();
        // A measures at angle 0, B at angle π + π/4 (anti-aligned with the
        // π/4 direction); winning pair (0,0) then carries (1+1/√2)/4.
        let ka = angle_projector(0.0, 0);
        let kb = angle_projector(std::f64::consts::PI + std::f64::consts::FRAC_PI_4, 0);
        let p = born_prob(&rho, &ka, &kb).unwrap();
        assert!((p - 0.25 * (1.0 + 1.0 / 2.0f64.sqrt())).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn born_prob_trivial_cases() {
        let rho = DensityMatrix::pure(&ket(&[0, 0], 4)).unwrap();
        let p0 = angle_projector(0.0, 0);
        assert!((born_prob(&rho, &p0, &p0).unwrap() - 1.0).abs() < 1e-12);
        let zero = CMat::zeros(2, 2);
        assert_eq!(born_prob(&rho, &zero, &zero).unwrap(), 0.0);
    }

    #[test]
    fn born_prob_sums_to_one() {
        let rho = singlet();
        let mut total = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                total += born_prob(
                    &rho,
                    &angle_projector(0.3, a),
                    &angle_projector(1.1, b),
                )
                .unwrap();
            }
        }
        assert!((total - 1.0).abs() < TOL_PROB);
    }

    #[test]
    fn collapse_plus_onto_zero() {
        let plus = DensityMatrix::pure(&[cnum(1., 0.), cnum(1., 0.)]).unwrap();
        let joint = DensityMatrix::new(tensor(plus.matrix(), plus.matrix())).unwrap();
        let p0 = angle_projector(0.0, 0);
        let post = collapse(&joint, &p0, &identity(2)).unwrap();
        let marg = partial_trace(&post, Subsystem::A, (2, 2)).unwrap();
        let zero = DensityMatrix::pure(&ket(&[0], 2)).unwrap();
        assert!(trace_distance(&marg, &zero).unwrap() < 1e-12);
    }

    #[test]
    fn collapse_singlet_same_basis_anticorrelates() {
        let rho = singlet();
        let post = collapse(&rho, &angle_projector(0.0, 0), &identity(2)).unwrap();
        let marg_b = partial_trace(&post, Subsystem::B, (2, 2)).unwrap();
        let one = DensityMatrix::pure(&ket(&[1], 2)).unwrap();
        assert!(trace_distance(&marg_b, &one).unwrap() < 1e-12);
    }

    #[test]
    fn collapse_zero_probability_errors() {
        let rho = DensityMatrix::pure(&ket(&[0, 0], 4)).unwrap();
        let p1 = angle_projector(0.0, 1);
        assert!(matches!(
            collapse(&rho, &p1, &identity(2)),
            Err(QmathError::ZeroProbabilityCollapse)
        ));
    }

    #[test]
    fn unitary_identity_and_flip() {
        let rho = DensityMatrix::pure(&ket(&[0, 0], 4)).unwrap();
        let u_id = Unitary::identity(4);
        assert!(trace_distance(&apply_unitary(&rho, &u_id).unwrap(), &rho).unwrap() < 1e-12);

        let u = Unitary::new(tensor(&sigma_x(), &identity(2))).unwrap();
        let flipped = apply_unitary(&rho, &u).unwrap();
        let expected = DensityMatrix::pure(&ket(&[1, 0], 4)).unwrap();
        assert!(trace_distance(&flipped, &expected).unwrap() < 1e-12);
    }

    #[test]
    fn unitary_preserves_trace_on_random_state() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        // random 4x4 state: normalized mixture of random pure states
        let mut mat = CMat::zeros(4, 4);
        for _ in 0..3 {
            let psi: Vec<Complex64> =
                (0..4).map(|_| cnum(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
            let pure = DensityMatrix::pure(&psi).unwrap();
            mat += pure.matrix() / cnum(3.0, 0.0);
        }
        let rho = DensityMatrix::new(mat).unwrap();
        // random unitary from QR of a random complex matrix
        let g = CMat::from_fn(4, 4, |_, _| cnum(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let q = g.qr().q();
        let u = Unitary::new(q).unwrap();
        let out = apply_unitary(&rho, &u).unwrap();
        assert!((out.matrix().trace().re - 1.0).abs() < TOL);
        out.validate().unwrap();
    }

    #[test]
    fn partial_trace_product_state() {
        let a = DensityMatrix::diagonal(&[0.7, 0.3]).unwrap();
        let b = DensityMatrix::pure(&[cnum(1., 0.), cnum(1., 0.)]).unwrap();
        let joint = DensityMatrix::new(tensor(a.matrix(), b.matrix())).unwrap();
        let ra = partial_trace(&joint, Subsystem::A, (2, 2)).unwrap();
        let rb = partial_trace(&joint, Subsystem::B, (2, 2)).unwrap();
        assert!(trace_distance(&ra, &a).unwrap() < 1e-12);
        assert!(trace_distance(&rb, &b).unwrap() < 1e-12);
    }

    #[test]
    fn partial_trace_singlet_is_maximally_mixed() {
        let marg = partial_trace(&singlet(), Subsystem::A, (2, 2)).unwrap();
        let mixed = DensityMatrix::diagonal(&[0.5, 0.5]).unwrap();
        assert!(trace_distance(&marg, &mixed).unwrap() < 1e-12);
        assert!((marg.matrix().trace().re - 1.0).abs() < TOL);
    }

    #[test]
    fn trace_distance_basics() {
        let z0 = DensityMatrix::pure(&ket(&[0], 2)).unwrap();
        let z1 = DensityMatrix::pure(&ket(&[1], 2)).unwrap();
        assert_eq!(trace_distance(&z0, &z0).unwrap(), 0.0);
        assert!((trace_distance(&z0, &z1).unwrap() - 1.0).abs() < 1e-12);
        let p = DensityMatrix::diagonal(&[0.6, 0.4]).unwrap();
        let q = DensityMatrix::diagonal(&[0.5, 0.5]).unwrap();
        assert!((trace_distance(&p, &q).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn trace_distance_symmetry_and_triangle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let mut rand_state = || {
            let psi: Vec<Complex64> =
                (0..4).map(|_| cnum(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
            DensityMatrix::pure(&psi).unwrap()
        };
        for _ in 0..20 {
            let (r, s, t) = (rand_state(), rand_state(), rand_state());
            let drs = trace_distance(&r, &s).unwrap();
            let dsr = trace_distance(&s, &r).unwrap();
            let drt = trace_distance(&r, &t).unwrap();
            let dts = trace_distance(&t, &s).unwrap();
            assert!((drs - dsr).abs() < 1e-12);
            assert!(drs <= drt + dts + 1e-12);
        }
    }

    #[test]
    fn invalid_states_rejected() {
        // non-unit trace
        assert!(DensityMatrix::new(identity(2)).is_err());
        // non-Hermitian
        let mut m = CMat::zeros(2, 2);
        m[(0, 0)] = cnum(1.0, 0.0);
        m[(0, 1)] = cnum(0.5, 0.0);
        assert!(DensityMatrix::new(m).is_err());
        // not PSD
        let m = CMat::from_row_slice(
            2,
            2,
            &[cnum(0.5, 0.), cnum(0.7, 0.), cnum(0.7, 0.), cnum(0.5, 0.)],
        );
        assert!(matches!(DensityMatrix::new(m), Err(QmathError::NotPsd(_))));
    }

    #[test]
    fn measurement_family_completeness_enforced() {
        let ok = MeasurementFamily::new(
            1,
            2,
            vec![angle_projector(0.4, 0), angle_projector(0.4, 1)],
        );
        assert!(ok.is_ok());
        let bad = MeasurementFamily::new(1, 2, vec![angle_projector(0.4, 0), CMat::zeros(2, 2)]);
        assert!(matches!(bad, Err(QmathError::IncompleteMeasurement { input: 0, .. })));
    }
}
