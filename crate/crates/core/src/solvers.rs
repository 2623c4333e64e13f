//! Linear kernels shared by both stages: a dense QR solve of small normal
//! equations and a fixed-budget block-Jacobi PCG on 3×3 block-sparse
//! systems.

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::reduce::{sum_by, Reduction};
use crate::{Error, Result, Vec3};

/// `A δ = b` with `A = JᵀJ` and `b = −JᵀF`.
#[derive(Clone, Debug)]
pub struct DenseNormalSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct DenseSolution {
    pub delta: DVector<f64>,
    /// Tikhonov damping that was added, zero when none was needed.
    pub damping: f64,
}

const RANK_TOL: f64 = 1e-10;
const DAMPING: f64 = 1e-6;

impl DenseNormalSystem {
    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if self.a.ncols() != n || self.b.len() != n {
            return Err(Error::Dimension(format!(
                "{}x{} system with {}-vector",
                n,
                self.a.ncols(),
                self.b.len()
            )));
        }
        if !self.a.iter().chain(self.b.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("dense normal system"));
        }
        let scale = self.a.amax().max(f64::MIN_POSITIVE);
        if (&self.a - self.a.transpose()).amax() > 1e-12 * scale {
            return Err(Error::invariant("dense normal system", 0, "matrix is not symmetric"));
        }
        Ok(())
    }
}

fn qr_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> (Option<DVector<f64>>, bool) {
    let qr = a.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = r.diagonal().iter().map(|d| d.abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let deficient = max == 0.0 || diag.iter().any(|&d| d < RANK_TOL * max);
    if deficient {
        return (None, true);
    }
    (qr.solve(b), false)
}

/// Solves the normal equations by QR. When the R factor is numerically
/// rank deficient, `1e-6 · trace(A) / n` is added to the diagonal.
pub fn dense_solve(system: &DenseNormalSystem) -> Result<DenseSolution> {
    system.validate()?;
    let n = system.a.nrows();
    if let (Some(delta), false) = qr_solve(&system.a, &system.b) {
        return Ok(DenseSolution { delta, damping: 0.0 });
    }
    let trace = system.a.trace();
    let damping = if trace > 0.0 { DAMPING * trace / n as f64 } else { DAMPING };
    let mut a = system.a.clone();
    for i in 0..n {
        a[(i, i)] += damping;
    }
    let delta = qr_solve(&a, &system.b)
        .0
        .ok_or_else(|| Error::invariant("dense normal system", 0, "singular after damping"))?;
    Ok(DenseSolution { delta, damping })
}

/// Rows per partial product when forming `JᵀJ`.
const ROW_CHUNK: usize = 64;

/// Forms `JᵀJ` and `−JᵀF` from row chunks. In deterministic mode the
/// partial products are combined by a fixed-shape pairwise tree.
pub fn dense_normal_equations(j: &DMatrix<f64>, f: &DVector<f64>, mode: Reduction) -> DenseNormalSystem {
    let (rows, n) = j.shape();
    let chunks = rows.div_ceil(ROW_CHUNK).max(1);
    let partial = |c: usize| {
        let lo = (c * ROW_CHUNK).min(rows);
        let hi = ((c + 1) * ROW_CHUNK).min(rows);
        let jc = j.rows(lo, hi - lo);
        let a = jc.transpose() * jc;
        let b = -(jc.transpose() * f.rows(lo, hi - lo));
        (a, b)
    };
    let zero = || (DMatrix::zeros(n, n), DVector::zeros(n));
    let (a, b) = match mode {
        Reduction::Deterministic => {
            let mut parts: Vec<(DMatrix<f64>, DVector<f64>)> = (0..chunks).into_par_iter().map(partial).collect();
            while parts.len() > 1 {
                parts = parts
                    .par_chunks(2)
                    .map(|p| match p {
                        [x, y] => (&x.0 + &y.0, &x.1 + &y.1),
                        [x] => x.clone(),
                        _ => unreachable!(),
                    })
                    .collect();
            }
            parts.pop().unwrap_or_else(zero)
        }
        Reduction::Unordered => (0..chunks)
            .into_par_iter()
            .map(partial)
            .reduce(zero, |x, y| (x.0 + y.0, x.1 + y.1)),
    };
    // Exact symmetry regardless of rounding in the partial products.
    let a = (&a + a.transpose()) * 0.5;
    DenseNormalSystem { a, b }
}

/// Symmetric block-sparse matrix in block-CSR form (every row stores its
/// diagonal block) plus a right-hand side.
#[derive(Clone, Debug)]
pub struct BlockSparseSystem {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub blocks: Vec<Matrix3<f64>>,
    pub rhs: Vec<Vec3>,
    diag: Vec<usize>,
}

impl BlockSparseSystem {
    /// Zero matrix with the block pattern `{i} ∪ neighbors[i]` per row.
    pub fn with_pattern(neighbors: &[Vec<usize>]) -> Result<Self> {
        let n = neighbors.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut diag = Vec::with_capacity(n);
        row_ptr.push(0);
        for (i, nb) in neighbors.iter().enumerate() {
            let mut row: Vec<usize> = nb.iter().copied().chain(std::iter::once(i)).collect();
            row.sort_unstable();
            row.dedup();
            if row.iter().any(|&j| j >= n) {
                return Err(Error::invariant("block row", i, "column out of range"));
            }
            diag.push(cols.len() + row.binary_search(&i).unwrap());
            cols.extend(row);
            row_ptr.push(cols.len());
        }
        let sys = BlockSparseSystem {
            blocks: vec![Matrix3::zeros(); cols.len()],
            rhs: vec![Vec3::zeros(); n],
            row_ptr,
            cols,
            diag,
        };
        for i in 0..n {
            for &j in sys.row(i).0 {
                if sys.find(j, i).is_none() {
                    return Err(Error::invariant("block row", i, format!("pattern not symmetric at column {j}")));
                }
            }
        }
        Ok(sys)
    }

    pub fn dim(&self) -> usize {
        self.rhs.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], std::ops::Range<usize>) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], r)
    }

    /// Storage index of block `(i, j)`.
    pub fn find(&self, i: usize, j: usize) -> Option<usize> {
        let (cols, r) = self.row(i);
        cols.binary_search(&j).ok().map(|k| r.start + k)
    }

    pub fn diag_index(&self, i: usize) -> usize {
        self.diag[i]
    }

    pub fn diagonal_block(&self, i: usize) -> &Matrix3<f64> {
        &self.blocks[self.diag[i]]
    }

    /// `out = A x`, parallel over block rows.
    pub fn mul(&self, x: &[Vec3], out: &mut [Vec3]) {
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let (cols, r) = self.row(i);
            let mut acc = Vec3::zeros();
            for (j, b) in cols.iter().zip(&self.blocks[r]) {
                acc += b * x[*j];
            }
            *o = acc;
        });
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(3 * n, 3 * n);
        for i in 0..n {
            let (cols, r) = self.row(i);
            for (j, b) in cols.iter().zip(&self.blocks[r]) {
                m.fixed_view_mut::<3, 3>(3 * i, 3 * j).copy_from(b);
            }
        }
        m
    }

    pub fn rhs_dense(&self) -> DVector<f64> {
        DVector::from_iterator(3 * self.dim(), self.rhs.iter().flat_map(|v| v.iter().copied()))
    }

    pub fn scale(&mut self, s: f64) {
        self.blocks.iter_mut().for_each(|b| *b *= s);
        self.rhs.iter_mut().for_each(|v| *v *= s);
    }
}

#[derive(Clone, Debug)]
pub struct PcgResult {
    pub delta: Vec<Vec3>,
    pub iterations: usize,
    /// Stopped early because `pᵀAp` vanished.
    pub breakdown: bool,
    /// Diagonal blocks that could not be inverted (identity used instead).
    pub singular_blocks: usize,
}

fn vdot(a: &[Vec3], b: &[Vec3], mode: Reduction) -> f64 {
    sum_by(a.len(), mode, |i| a[i].dot(&b[i]))
}

/// Fixed-budget PCG from zero with a block-Jacobi preconditioner. On SPD
/// systems the A-norm error decreases monotonically, so the last iterate
/// is also the best one.
pub fn pcg_solve(system: &BlockSparseSystem, iterations: usize, mode: Reduction) -> PcgResult {
    let n = system.dim();
    let mut singular = 0;
    let precond: Vec<Matrix3<f64>> = (0..n)
        .map(|i| {
            let d = system.diagonal_block(i);
            d.try_inverse()
                .filter(|m| m.iter().all(|x| x.is_finite()))
                .unwrap_or_else(|| {
                    singular += 1;
                    Matrix3::identity()
                })
        })
        .collect();
    let apply = |r: &[Vec3], z: &mut [Vec3]| {
        z.par_iter_mut()
            .zip(r.par_iter().zip(precond.par_iter()))
            .for_each(|(z, (r, m))| *z = m * r);
    };

    let mut x = vec![Vec3::zeros(); n];
    let mut r = system.rhs.clone();
    let mut z = vec![Vec3::zeros(); n];
    apply(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![Vec3::zeros(); n];
    let mut rz = vdot(&r, &z, mode);
    let mut breakdown = false;
    let mut done = 0;
    for _ in 0..iterations {
        if rz == 0.0 {
            break;
        }
        system.mul(&p, &mut ap);
        let pap = vdot(&p, &ap, mode);
        let pp = vdot(&p, &p, mode);
        if !(pap > 1e-14 * pp) {
            breakdown = true;
            break;
        }
        let alpha = rz / pap;
        x.par_iter_mut()
            .zip(r.par_iter_mut())
            .zip(p.par_iter().zip(ap.par_iter()))
            .for_each(|((x, r), (p, ap))| {
                *x += p * alpha;
                *r -= ap * alpha;
            });
        done += 1;
        apply(&r, &mut z);
        let rz_new = vdot(&r, &z, mode);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(z.par_iter()).for_each(|(p, z)| *p = z + *p * beta);
    }
    PcgResult {
        delta: x,
        iterations: done,
        breakdown,
        singular_blocks: singular,
    }
}

/// Random symmetric, strictly block-diagonally dominant (hence SPD) system
/// with `n` block rows and about `degree` neighbors per row.
pub fn random_spd_block_system(n: usize, degree: usize, seed: u64) -> BlockSparseSystem {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut nb = vec![Vec::new(); n];
    for i in 0..n {
        for _ in 0..degree / 2 {
            let j = rng.random_range(0..n);
            if j != i && !nb[i].contains(&j) {
                nb[i].push(j);
                nb[j].push(i);
            }
        }
    }
    let mut sys = BlockSparseSystem::with_pattern(&nb).expect("symmetric by construction");
    for i in 0..n {
        for &j in &nb[i] {
            if j > i {
                let b = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                let ij = sys.find(i, j).unwrap();
                let ji = sys.find(j, i).unwrap();
                sys.blocks[ij] = b;
                sys.blocks[ji] = b.transpose();
            }
        }
    }
    for i in 0..n {
        let (_, r) = sys.row(i);
        let off: f64 = r
            .clone()
            .filter(|&k| k != sys.diag[i])
            .map(|k| sys.blocks[k].abs().row_sum().max())
            .sum();
        let m = Matrix3::from_fn(|_, _| rng.random_range(-0.5..0.5));
        let d = sys.diag[i];
        sys.blocks[d] = m * m.transpose() + Matrix3::identity() * (off + 1.0 + rng.random_range(0.0..5.0));
        sys.rhs[i] = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    }
    sys
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_spd(n: usize, cond: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let q = m.qr().q();
        let eig = DVector::from_fn(n, |i, _| cond.powf(-(i as f64) / (n as f64 - 1.0)));
        &q * DMatrix::from_diagonal(&eig) * q.transpose()
    }

    fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn identity_system() {
        let mut b = DVector::zeros(36);
        b[0] = 1.0;
        let s = dense_solve(&DenseNormalSystem {
            a: DMatrix::identity(36, 36),
            b: b.clone(),
        })
        .unwrap();
        assert_eq!(s.delta, b);
        assert_eq!(s.damping, 0.0);
    }

    #[test]
    fn random_spd_residual() {
        for seed in 0..5 {
            let a = symmetrize(random_spd(36, 1e6, seed));
            let b = DVector::from_fn(36, |i, _| (i as f64 * 0.37).sin());
            let s = dense_solve(&DenseNormalSystem { a: a.clone(), b: b.clone() }).unwrap();
            assert!((&a * &s.delta - &b).norm() / b.norm() <= 1e-10);
        }
    }

    #[test]
    fn rank_deficient_is_damped() {
        let mut a = symmetrize(random_spd(36, 10.0, 1));
        for k in 0..36 {
            a[(5, k)] = 0.0;
            a[(k, 5)] = 0.0;
        }
        let b = DVector::from_element(36, 1.0);
        let s = dense_solve(&DenseNormalSystem { a: a.clone(), b }).unwrap();
        assert!(s.damping > 0.0);
        assert!((s.damping - 1e-6 * a.trace() / 36.0).abs() < 1e-18);
        assert!(s.delta.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn non_finite_and_asymmetric_inputs_fail() {
        let mut a = DMatrix::identity(4, 4);
        a[(0, 1)] = f64::NAN;
        assert!(dense_solve(&DenseNormalSystem { a, b: DVector::zeros(4) }).is_err());
        let mut a = DMatrix::identity(4, 4);
        a[(0, 1)] = 1.0;
        assert!(dense_solve(&DenseNormalSystem { a, b: DVector::zeros(4) }).is_err());
    }

    fn block_identity(n: usize) -> BlockSparseSystem {
        let mut s = BlockSparseSystem::with_pattern(&vec![Vec::new(); n]).unwrap();
        for i in 0..n {
            let d = s.diag_index(i);
            s.blocks[d] = Matrix3::identity();
            s.rhs[i] = Vec3::new(i as f64, 1.0, -2.0);
        }
        s
    }

    #[test]
    fn pcg_identity_one_iteration() {
        let s = block_identity(10);
        let r = pcg_solve(&s, 4, Reduction::Deterministic);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.delta, s.rhs);
    }

    #[test]
    fn pcg_block_diagonal_exact_after_one() {
        let mut s = block_identity(10);
        for i in 0..10 {
            let d = s.diag_index(i);
            let m = Matrix3::new(2.0, 0.5, 0.0, 0.5, 3.0, 0.2, 0.0, 0.2, 1.0 + i as f64);
            s.blocks[d] = m;
        }
        let r = pcg_solve(&s, 1, Reduction::Deterministic);
        let dense = s.to_dense().lu().solve(&s.rhs_dense()).unwrap();
        let got = DVector::from_iterator(30, r.delta.iter().flat_map(|v| v.iter().copied()));
        assert!((got - dense).norm() < 1e-12);
    }

    fn a_norm_error(a: &DMatrix<f64>, x: &[Vec3], exact: &DVector<f64>) -> f64 {
        let e = DVector::from_iterator(exact.len(), x.iter().flat_map(|v| v.iter().copied())) - exact;
        (e.transpose() * a * &e)[(0, 0)].sqrt()
    }

    #[test]
    fn pcg_a_norm_error_decreases_and_converges() {
        let s = random_spd_block_system(200, 6, 42);
        let a = s.to_dense();
        let exact = a.clone().lu().solve(&s.rhs_dense()).unwrap();
        let mut prev = f64::INFINITY;
        for it in 1..=4 {
            let r = pcg_solve(&s, it, Reduction::Deterministic);
            let e = a_norm_error(&a, &r.delta, &exact);
            assert!(e < prev, "iteration {it}: {e} >= {prev}");
            prev = e;
        }
        let r = pcg_solve(&s, 200, Reduction::Deterministic);
        let x = DVector::from_iterator(600, r.delta.iter().flat_map(|v| v.iter().copied()));
        assert!((&a * &x - s.rhs_dense()).norm() / s.rhs_dense().norm() < 1e-6);
    }

    #[test]
    fn pcg_breakdown_on_zero_operator() {
        let mut s = BlockSparseSystem::with_pattern(&vec![Vec::new(); 3]).unwrap();
        s.rhs[0] = Vec3::x();
        let r = pcg_solve(&s, 4, Reduction::Deterministic);
        assert!(r.breakdown);
        assert_eq!(r.singular_blocks, 3);
        assert!(r.delta.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn asymmetric_pattern_rejected() {
        assert!(BlockSparseSystem::with_pattern(&[vec![1], vec![]]).is_err());
    }

    #[test]
    fn pcg_deterministic_reduction_is_reproducible() {
        let s = random_spd_block_system(3000, 6, 5);
        let a = pcg_solve(&s, 4, Reduction::Deterministic);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| pcg_solve(&s, 4, Reduction::Deterministic));
        assert_eq!(a.delta, b.delta);
    }

    #[test]
    fn normal_equations_match_direct_product() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let j = DMatrix::from_fn(300, 36, |_, _| rng.random_range(-1.0..1.0));
        let f = DVector::from_fn(300, |_, _| rng.random_range(-1.0..1.0));
        let s = dense_normal_equations(&j, &f, Reduction::Deterministic);
        assert!((&s.a - j.transpose() * &j).amax() < 1e-10);
        assert!((&s.b + j.transpose() * &f).amax() < 1e-10);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        let t = pool.install(|| dense_normal_equations(&j, &f, Reduction::Deterministic));
        assert_eq!(s.a, t.a);
        assert_eq!(s.b, t.b);
    }

    proptest! {
        #[test]
        fn solvers_are_scale_equivariant(seed in 0u64..200, scale in 1e-3f64..1e3) {
            let a = symmetrize(random_spd(12, 1e3, seed));
            let b = DVector::from_fn(12, |i, _| (i as f64 + seed as f64).cos());
            let x = dense_solve(&DenseNormalSystem { a: a.clone(), b: b.clone() }).unwrap().delta;
            let y = dense_solve(&DenseNormalSystem { a: a * scale, b: b * scale }).unwrap().delta;
            prop_assert!((&x - &y).norm() <= 1e-8 * x.norm().max(1.0));

            let mut s = random_spd_block_system(30, 4, seed);
            let p = pcg_solve(&s, 4, Reduction::Deterministic).delta;
            s.scale(scale);
            let q = pcg_solve(&s, 4, Reduction::Deterministic).delta;
            for (u, v) in p.iter().zip(&q) {
                prop_assert!((u - v).norm() <= 1e-10 * u.norm().max(1.0));
            }
        }
    }
}
