//! Dense complex third-order tensors and the linear algebra the ALS needs.
//!
//! Storage and unfolding convention (used everywhere in the crate):
//!
//! * entry `(i1, i2, i3)` lives at linear index `i1 + i2*d1 + i3*d1*d2`;
//! * `khatri_rao(A, B)` has columns `A[:,l] ⊗ B[:,l]` with the `B` index fastest;
//! * for a PARAFAC tensor with factors `(F1, F2, F3)`:
//!   - `unfold(1) = F1 · khatri_rao(F3, F2)^T`
//!   - `unfold(2) = F2 · khatri_rao(F3, F1)^T`
//!   - `unfold(3) = F3 · khatri_rao(F2, F1)^T`
//!
//! The Khatri-Rao argument order differs from the one usually seen in the
//! literature. Any single consistent convention gives the same ALS iterates;
//! mixing two of them does not.

use nalgebra::DVector;

use crate::{CMatrix, CVector, Error, Result, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<C64>,
}

impl Tensor3 {
    pub fn new(dims: [usize; 3], data: Vec<C64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!(
                "tensor dimensions must be positive, got {dims:?}"
            )));
        }
        let len = dims.iter().product::<usize>();
        if data.len() != len {
            return Err(Error::mismatch("tensor data", len, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![C64::new(0.0, 0.0); dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn linear_index(&self, i1: usize, i2: usize, i3: usize) -> usize {
        i1 + self.dims[0] * (i2 + self.dims[1] * i3)
    }

    pub fn get(&self, i1: usize, i2: usize, i3: usize) -> C64 {
        self.data[self.linear_index(i1, i2, i3)]
    }

    pub fn set(&mut self, i1: usize, i2: usize, i3: usize, value: C64) {
        let idx = self.linear_index(i1, i2, i3);
        self.data[idx] = value;
    }

    pub fn norm_squared(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Squared Frobenius distance to another tensor of the same shape.
    pub fn distance_squared(&self, other: &Tensor3) -> f64 {
        debug_assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum()
    }

    /// Mode-n unfolding; see the module docs for the column ordering.
    pub fn unfold(&self, mode: usize) -> Result<CMatrix> {
        let [d1, d2, d3] = self.dims;
        match mode {
            1 => Ok(CMatrix::from_column_slice(d1, d2 * d3, &self.data)),
            2 => Ok(CMatrix::from_fn(d2, d1 * d3, |i2, c| {
                self.get(c % d1, i2, c / d1)
            })),
            3 => Ok(CMatrix::from_fn(d3, d1 * d2, |i3, c| {
                self.get(c % d1, c / d1, i3)
            })),
            m => Err(Error::InvalidMode(m)),
        }
    }
}

/// Inverse of [`Tensor3::unfold`].
pub fn fold(m: &CMatrix, mode: usize, dims: [usize; 3]) -> Result<Tensor3> {
    let [d1, d2, d3] = dims;
    let expected = match mode {
        1 => (d1, d2 * d3),
        2 => (d2, d1 * d3),
        3 => (d3, d1 * d2),
        other => return Err(Error::InvalidMode(other)),
    };
    if m.shape() != expected {
        return Err(Error::mismatch(
            "fold",
            format!("{}x{}", expected.0, expected.1),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    let mut t = Tensor3::zeros(dims);
    for i3 in 0..d3 {
        for i2 in 0..d2 {
            for i1 in 0..d1 {
                let v = match mode {
                    1 => m[(i1, i2 + i3 * d2)],
                    2 => m[(i2, i1 + i3 * d1)],
                    _ => m[(i3, i1 + i2 * d1)],
                };
                t.set(i1, i2, i3, v);
            }
        }
    }
    Ok(t)
}

/// Columnwise Kronecker product; column `l` is `a[:,l] ⊗ b[:,l]`.
pub fn khatri_rao(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::mismatch("khatri_rao column count", a.ncols(), b.ncols()));
    }
    let db = b.nrows();
    Ok(CMatrix::from_fn(a.nrows() * db, a.ncols(), |r, l| {
        a[(r / db, l)] * b[(r % db, l)]
    }))
}

/// Three factor matrices sharing `L` columns plus the superdiagonal weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorTriple {
    pub f1: CMatrix,
    pub f2: CMatrix,
    pub f3: CMatrix,
    pub weights: CVector,
}

impl FactorTriple {
    pub fn new(f1: CMatrix, f2: CMatrix, f3: CMatrix, weights: CVector) -> Result<Self> {
        let l = f1.ncols();
        if f2.ncols() != l || f3.ncols() != l || weights.len() != l {
            return Err(Error::mismatch(
                "factor triple rank",
                l,
                format!("{}/{}/{}", f2.ncols(), f3.ncols(), weights.len()),
            ));
        }
        Ok(Self { f1, f2, f3, weights })
    }

    /// Unit weights.
    pub fn unweighted(f1: CMatrix, f2: CMatrix, f3: CMatrix) -> Result<Self> {
        let l = f1.ncols();
        Self::new(f1, f2, f3, CVector::from_element(l, C64::new(1.0, 0.0)))
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.f1.nrows(), self.f2.nrows(), self.f3.nrows()]
    }
}

/// Sum of weighted rank-one terms `w_l · F1[:,l] ∘ F2[:,l] ∘ F3[:,l]`.
pub fn parafac_reconstruct(f: &FactorTriple) -> Tensor3 {
    let dims = f.dims();
    let mut t = Tensor3::zeros(dims);
    for l in 0..f.rank() {
        let w = f.weights[l];
        if w == C64::new(0.0, 0.0) {
            continue;
        }
        for i3 in 0..dims[2] {
            let c = w * f.f3[(i3, l)];
            for i2 in 0..dims[1] {
                let bc = c * f.f2[(i2, l)];
                for i1 in 0..dims[0] {
                    let idx = t.linear_index(i1, i2, i3);
                    t.data[idx] += bc * f.f1[(i1, l)];
                }
            }
        }
    }
    t
}

/// Least-squares solution together with the numerical rank of the system.
#[derive(Debug, Clone)]
pub struct LsSolution {
    pub x: CMatrix,
    pub rank: usize,
    /// Set when singular values were truncated below the cutoff.
    pub rank_deficient: bool,
}

/// Thin singular value decomposition `m = u · diag(singular_values) · v^H`,
/// singular values in nonincreasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: CMatrix,
    pub singular_values: DVector<f64>,
    pub v: CMatrix,
}

impl Svd {
    pub fn recompose(&self) -> CMatrix {
        let scaled = CMatrix::from_fn(self.u.nrows(), self.u.ncols(), |r, c| self.u[(r, c)] * self.singular_values[c]);
        scaled * self.v.adjoint()
    }
}

/// Thin SVD backed by `faer`. nalgebra's complex SVD returns wrong factors on
/// some exactly rank-deficient inputs, which the ALS produces routinely.
pub fn svd(m: &CMatrix) -> Result<Svd> {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(Svd {
            u: CMatrix::zeros(rows, 0),
            singular_values: DVector::zeros(0),
            v: CMatrix::zeros(cols, 0),
        });
    }
    let fm = faer::Mat::<C64>::from_fn(rows, cols, |r, c| m[(r, c)]);
    let dec = fm.thin_svd().map_err(|_| Error::NoConvergence)?;
    let (u, s, v) = (dec.U(), dec.S().column_vector(), dec.V());
    Ok(Svd {
        u: CMatrix::from_fn(rows, k, |r, c| u[(r, c)]),
        singular_values: DVector::from_fn(k, |i, _| s[i].re),
        v: CMatrix::from_fn(cols, k, |r, c| v[(r, c)]),
    })
}

/// Upper bound on `κ_F(R) = ‖R‖_F·‖R⁻¹‖_F` below which a triangular inverse is
/// used directly. Then `σ_min ≥ σ_max / κ_F` sits far above the SVD cutoff, so
/// the pseudo-inverse is the plain inverse and no value would be truncated.
const DIRECT_INVERSE_COND: f64 = 1e6;

fn well_conditioned_inverse(r: &CMatrix) -> Option<CMatrix> {
    let inv = r.solve_upper_triangular(&CMatrix::identity(r.nrows(), r.ncols()))?;
    let cond = r.norm() * inv.norm();
    (cond.is_finite() && cond <= DIRECT_INVERSE_COND).then_some(inv)
}

/// Moore-Penrose pseudo-inverse via SVD. Singular values below
/// `max(rows, cols) · eps · σ_max` are treated as zero. Returns the inverse
/// and the retained rank.
///
/// Strongly rectangular inputs are first reduced by a thin QR, which keeps the
/// singular values and is cheaper than a full SVD of the long side. A well
/// conditioned triangular factor is inverted directly.
pub fn pinv(m: &CMatrix) -> Result<(CMatrix, usize)> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok((CMatrix::zeros(cols, rows), 0));
    }
    let long = rows.max(cols);
    if cols >= 2 * rows {
        // m^H = Q R  =>  m^+ = Q (R^H)^+
        let qr = m.adjoint().qr();
        let r = qr.r();
        if let Some(inv) = well_conditioned_inverse(&r) {
            return Ok((qr.q() * inv.adjoint(), rows));
        }
        let (p, rank) = svd_pinv(&r.adjoint(), long)?;
        return Ok((qr.q() * p, rank));
    }
    if rows >= 2 * cols {
        // m = Q R  =>  m^+ = R^+ Q^H
        let qr = m.clone().qr();
        let r = qr.r();
        if let Some(inv) = well_conditioned_inverse(&r) {
            return Ok((inv * qr.q().adjoint(), cols));
        }
        let (p, rank) = svd_pinv(&r, long)?;
        return Ok((p * qr.q().adjoint(), rank));
    }
    svd_pinv(m, long)
}

fn svd_pinv(m: &CMatrix, long: usize) -> Result<(CMatrix, usize)> {
    let dec = svd(m)?;
    let smax = dec.singular_values.max();
    let cutoff = long as f64 * f64::EPSILON * smax;
    let rank = dec.singular_values.iter().filter(|&&s| s > cutoff && s > 0.0).count();
    // singular values are sorted, so the retained ones are the leading columns
    let v = dec.v.columns(0, rank);
    let u = dec.u.columns(0, rank);
    let inv = CMatrix::from_fn(rank, m.nrows(), |r, c| u[(c, r)].conj() / dec.singular_values[r]);
    Ok((v * inv, rank))
}

/// Minimum-norm `X` minimizing `‖X·coeff − rhs‖_F`.
pub fn ls_solve(coeff: &CMatrix, rhs: &CMatrix) -> Result<LsSolution> {
    if coeff.ncols() != rhs.ncols() {
        return Err(Error::mismatch("ls_solve", coeff.ncols(), rhs.ncols()));
    }
    let (p, rank) = pinv(coeff)?;
    Ok(LsSolution {
        x: rhs * p,
        rank,
        rank_deficient: rank < coeff.nrows().min(coeff.ncols()),
    })
}

/// Minimum-norm `X` minimizing `‖coeff·X − rhs‖_F`.
pub fn ls_solve_left(coeff: &CMatrix, rhs: &CMatrix) -> Result<LsSolution> {
    if coeff.nrows() != rhs.nrows() {
        return Err(Error::mismatch("ls_solve_left", coeff.nrows(), rhs.nrows()));
    }
    let (p, rank) = pinv(coeff)?;
    Ok(LsSolution {
        x: p * rhs,
        rank,
        rank_deficient: rank < coeff.nrows().min(coeff.ncols()),
    })
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn real(rows: usize, cols: usize, v: &[f64]) -> CMatrix {
        CMatrix::from_row_iterator(rows, cols, v.iter().map(|&x| c(x, 0.0)))
    }

    fn counting_tensor() -> Tensor3 {
        Tensor3::new([2, 2, 2], (1..=8).map(|x| c(x as f64, 0.0)).collect()).unwrap()
    }

    #[test]
    fn khatri_rao_small_cases() {
        let ones = khatri_rao(&real(2, 1, &[1.0, 1.0]), &real(3, 1, &[1.0; 3])).unwrap();
        assert_eq!(ones, real(6, 1, &[1.0; 6]));
        let kr = khatri_rao(&real(2, 1, &[1.0, 2.0]), &real(2, 1, &[3.0, 4.0])).unwrap();
        assert_eq!(kr, real(4, 1, &[3.0, 4.0, 6.0, 8.0]));
        assert!(khatri_rao(&real(2, 1, &[1.0, 2.0]), &real(1, 2, &[3.0, 4.0])).is_err());
    }

    #[test]
    fn khatri_rao_of_generic_factors_has_full_column_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (da, db, l) in [(2, 3, 4), (4, 4, 3), (2, 2, 4), (3, 5, 6)] {
            let kr = khatri_rao(&random_matrix(&mut rng, da, l), &random_matrix(&mut rng, db, l))
                .unwrap();
            assert_eq!(crate::channel::numerical_rank(&kr, 1e-9).unwrap(), l);
        }
    }

    #[test]
    fn khatri_rao_single_column_is_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 3, 1);
        let b = random_matrix(&mut rng, 4, 1);
        let d = random_matrix(&mut rng, 2, 1);
        assert!((khatri_rao(&a, &b).unwrap() - a.kronecker(&b)).norm() < 1e-14);
        // associativity on single columns
        let left = khatri_rao(&khatri_rao(&a, &b).unwrap(), &d).unwrap();
        let right = khatri_rao(&a, &khatri_rao(&b, &d).unwrap()).unwrap();
        assert!((left - right).norm() < 1e-14);
    }

    #[test]
    fn mode1_unfolding_of_counting_tensor() {
        let t = counting_tensor();
        let m = t.unfold(1).unwrap();
        assert_eq!(m, real(2, 4, &[1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]));
        assert_eq!(fold(&m, 1, [2, 2, 2]).unwrap(), t);
    }

    #[test]
    fn fold_rejects_bad_shapes_and_modes() {
        let m = real(2, 4, &[0.0; 8]);
        assert!(matches!(fold(&m, 2, [2, 3, 2]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(fold(&m, 4, [2, 2, 2]), Err(Error::InvalidMode(4))));
        assert!(matches!(counting_tensor().unfold(0), Err(Error::InvalidMode(0))));
    }

    #[test]
    fn rank_one_unfolding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b, cc) = (
            random_matrix(&mut rng, 3, 1),
            random_matrix(&mut rng, 4, 1),
            random_matrix(&mut rng, 2, 1),
        );
        let t = parafac_reconstruct(
            &FactorTriple::unweighted(a.clone(), b.clone(), cc.clone()).unwrap(),
        );
        let expected = &a * cc.kronecker(&b).transpose();
        assert!((t.unfold(1).unwrap() - expected).norm() < 1e-13);
    }

    #[test]
    fn parafac_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = FactorTriple::new(
            random_matrix(&mut rng, 3, 2),
            random_matrix(&mut rng, 2, 2),
            random_matrix(&mut rng, 4, 2),
            CVector::zeros(2),
        )
        .unwrap();
        assert_eq!(parafac_reconstruct(&f).norm_squared(), 0.0);
        assert!(FactorTriple::new(
            random_matrix(&mut rng, 3, 2),
            random_matrix(&mut rng, 2, 3),
            random_matrix(&mut rng, 4, 2),
            CVector::zeros(2),
        )
        .is_err());
    }

    #[test]
    fn unfolding_identities_on_random_parafac() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let dims = [
                rng.random_range(1..=5),
                rng.random_range(1..=5),
                rng.random_range(1..=5),
            ];
            let l = rng.random_range(1..=4);
            let f = FactorTriple::new(
                random_matrix(&mut rng, dims[0], l),
                random_matrix(&mut rng, dims[1], l),
                random_matrix(&mut rng, dims[2], l),
                CVector::from_element(l, c(1.0, 0.0)),
            )
            .unwrap();
            let t = parafac_reconstruct(&f);
            let e1 = &f.f1 * khatri_rao(&f.f3, &f.f2).unwrap().transpose();
            let e2 = &f.f2 * khatri_rao(&f.f3, &f.f1).unwrap().transpose();
            let e3 = &f.f3 * khatri_rao(&f.f2, &f.f1).unwrap().transpose();
            assert!((t.unfold(1).unwrap() - e1).norm() < 1e-12);
            assert!((t.unfold(2).unwrap() - e2).norm() < 1e-12);
            assert!((t.unfold(3).unwrap() - e3).norm() < 1e-12);
        }
    }

    #[test]
    fn ls_solve_identity_and_planted_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rhs = random_matrix(&mut rng, 3, 5);
        let id = CMatrix::identity(5, 5);
        let sol = ls_solve(&id, &rhs).unwrap();
        assert!((sol.x - &rhs).norm() < 1e-14);
        assert!(!sol.rank_deficient);

        // left solve: 8x3 well-conditioned system
        let coeff = random_matrix(&mut rng, 8, 3);
        let truth = random_matrix(&mut rng, 3, 2);
        let sol = ls_solve_left(&coeff, &(&coeff * &truth)).unwrap();
        assert!((sol.x - &truth).norm() < 1e-10);
        // right solve on the transposed system
        let coeff_t = coeff.transpose();
        let truth_t = truth.transpose();
        let sol = ls_solve(&coeff_t, &(&truth_t * &coeff_t)).unwrap();
        assert!((sol.x - truth_t).norm() < 1e-10);
    }

    #[test]
    fn ls_solve_rank_deficient_is_minimum_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // 8x3 left system of rank 2
        let base = random_matrix(&mut rng, 8, 2);
        let mix = random_matrix(&mut rng, 2, 3);
        let coeff = &base * &mix;
        let rhs = random_matrix(&mut rng, 8, 2);
        let sol = ls_solve_left(&coeff, &rhs).unwrap();
        assert!(sol.rank_deficient);
        assert_eq!(sol.rank, 2);
        // normal equations: residual orthogonal to the column space of coeff
        let resid = &rhs - &coeff * &sol.x;
        assert!((coeff.adjoint() * &resid).norm() < 1e-10);
        // minimum norm: solution lies in the row space of coeff, so it is
        // orthogonal to the null space
        let null = {
            svd(&coeff).unwrap().v.column(2).into_owned()
        };
        assert!((null.adjoint() * &sol.x).norm() < 1e-10);
    }

    #[test]
    fn direct_inverse_matches_svd_pinv() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for (rows, cols) in [(3, 64), (64, 3), (4, 9), (12, 5)] {
            let m = random_matrix(&mut rng, rows, cols);
            let (fast, rank) = pinv(&m).unwrap();
            let (slow, slow_rank) = svd_pinv(&m, rows.max(cols)).unwrap();
            assert_eq!(rank, slow_rank);
            assert!((&fast - &slow).norm() <= 1e-12 * slow.norm());
        }
        // near-singular input still goes through the truncating path
        let base = random_matrix(&mut rng, 40, 2);
        let m = (&base * random_matrix(&mut rng, 2, 3)).transpose();
        let (p, rank) = pinv(&m).unwrap();
        assert_eq!(rank, 2);
        assert!((&m * &p * &m - &m).norm() <= 1e-10 * m.norm());
    }

    #[test]
    fn svd_recomposes_rank_one_phase_ramps() {
        // outer products of unit-modulus ramps trip nalgebra's complex SVD
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5000 {
            let (a, b): (f64, f64) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let g = c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let m = CMatrix::from_fn(4, 4, |i, j| g * C64::from_polar(1.0, a * i as f64 + b * j as f64));
            let dec = svd(&m).unwrap();
            assert!((dec.recompose() - &m).norm() <= 1e-12 * m.norm().max(1.0));
            assert!(dec.singular_values[1] <= 1e-12 * dec.singular_values[0]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fold_inverts_unfold(d1 in 1usize..=6, d2 in 1usize..=6, d3 in 1usize..=6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = random_matrix(&mut rng, d1 * d2 * d3, 1).as_slice().to_vec();
            let t = Tensor3::new([d1, d2, d3], data).unwrap();
            for mode in 1..=3 {
                let back = fold(&t.unfold(mode).unwrap(), mode, [d1, d2, d3]).unwrap();
                prop_assert_eq!(&back, &t);
            }
        }

        #[test]
        fn linear_index_is_bijective(d1 in 1usize..=5, d2 in 1usize..=5, d3 in 1usize..=5) {
            let t = Tensor3::zeros([d1, d2, d3]);
            let mut seen = vec![false; d1 * d2 * d3];
            for i3 in 0..d3 { for i2 in 0..d2 { for i1 in 0..d1 {
                let idx = t.linear_index(i1, i2, i3);
                prop_assert!(!seen[idx]);
                seen[idx] = true;
            }}}
            prop_assert!(seen.into_iter().all(|s| s));
        }

        #[test]
        fn ls_residual_monotone_on_nested_designs(rows in 3usize..8, extra in 1usize..3, seed in any::<u64>()) {
            // coeff rows span the design; adding rows can only lower the residual
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols = rows + 4;
            let small = random_matrix(&mut rng, rows, cols);
            let big = CMatrix::from_rows(
                &small.row_iter()
                    .map(|r| r.into_owned())
                    .chain(random_matrix(&mut rng, extra, cols).row_iter().map(|r| r.into_owned()))
                    .collect::<Vec<_>>(),
            );
            let rhs = random_matrix(&mut rng, 2, cols);
            let r_small = (&rhs - ls_solve(&small, &rhs).unwrap().x * &small).norm();
            let r_big = (&rhs - ls_solve(&big, &rhs).unwrap().x * &big).norm();
            prop_assert!(r_big <= r_small + 1e-10);
        }
    }
}
