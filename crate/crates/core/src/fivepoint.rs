//! Minimal five-point solver: all real essential matrices fitting exactly
//! five normalized correspondences (up to 10 solutions).
//!
//! Pipeline: nullspace of the 5x9 epipolar design matrix, the ten cubic
//! constraints (det E = 0 and the trace identity) reduced by Gauss-Jordan
//! with partial pivoting to a 3x3 polynomial matrix whose determinant is a
//! degree-10 univariate polynomial, roots via companion-matrix eigenvalues
//! with Newton polish. The elimination runs in several orthogonally
//! re-mixed nullspace charts and pools the candidates, since any single
//! chart loses solutions nearly orthogonal to its fixed basis matrix.

use nalgebra::{Complex, DMatrix, Matrix3, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::geometry::{EssentialMatrix, NormalizedPoint};

#[derive(Debug, Error)]
pub enum FivePointError {
    #[error("minimal sample is degenerate: epipolar design matrix has rank < 5")]
    DegenerateSample,
    #[error("constraint elimination is too ill-conditioned to trust")]
    PoorlyConditioned,
    #[error("zero polynomial has no well-defined roots")]
    InvalidPolynomial,
    #[error("eigenvalue computation failed")]
    EigenFailure,
}

/// Exactly five correspondence pairs.
#[derive(Debug, Clone)]
pub struct MinimalSample {
    pub x: [NormalizedPoint; 5],
    pub xp: [NormalizedPoint; 5],
    pub source_indices: [usize; 5],
}

impl MinimalSample {
    pub fn new(x: [NormalizedPoint; 5], xp: [NormalizedPoint; 5]) -> Self {
        MinimalSample { x, xp, source_indices: [0, 1, 2, 3, 4] }
    }
}

/// Real univariate polynomial, ascending coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        let mut p = Polynomial { coeffs };
        p.trim();
        p
    }

    fn trim(&mut self) {
        let max = self.coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        while let Some(&last) = self.coeffs.last() {
            if self.coeffs.len() > 1 && last.abs() <= 1e-13 * max {
                self.coeffs.pop();
            } else {
                break;
            }
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self) -> Polynomial {
        if self.coeffs.len() <= 1 {
            return Polynomial { coeffs: vec![0.0] };
        }
        Polynomial::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, &c)| c * i as f64)
                .collect(),
        )
    }

    fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }
}

/// All real roots, via companion-matrix eigenvalues plus Newton polish.
pub fn real_roots(p: &Polynomial) -> Result<Vec<f64>, FivePointError> {
    real_roots_tol(p, 1e-8)
}

/// Same as [`real_roots`] but keeping eigenvalues whose imaginary part is
/// below `im_tol` relative to magnitude. The five-point path uses a loose
/// tolerance: near-double roots drift off the real axis in ill-conditioned
/// eliminations, and spurious extras are rejected later by the essential
/// invariant checks.
fn real_roots_tol(p: &Polynomial, im_tol: f64) -> Result<Vec<f64>, FivePointError> {
    if p.is_zero() {
        return Err(FivePointError::InvalidPolynomial);
    }
    let n = p.degree();
    if n == 0 {
        return Ok(Vec::new());
    }
    let scale = p.coeffs[n];
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        companion[(i, n - 1)] = -p.coeffs[i] / scale;
    }
    let eigen: Vec<Complex<f64>> = companion.complex_eigenvalues().iter().copied().collect();
    let dp = p.derivative();
    let mut roots = Vec::new();
    for ev in eigen {
        if ev.im.abs() <= im_tol * (1.0 + ev.re.abs()) {
            let mut r = ev.re;
            for _ in 0..3 {
                let d = dp.eval(r);
                if d.abs() <= 1e-300 {
                    break;
                }
                let step = p.eval(r) / d;
                r -= step;
                if step.abs() <= 1e-15 * (1.0 + r.abs()) {
                    break;
                }
            }
            roots.push(r);
        }
    }
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(roots)
}

// --- trivariate cubic polynomial support -----------------------------------
//
// Degree <= 3 polynomials in (x, y, z), w = 1 implicit, represented over the
// 20-monomial basis in the elimination order used below.

const MONOMIALS: [(u8, u8, u8); 20] = [
    (3, 0, 0), // x^3
    (0, 3, 0), // y^3
    (2, 1, 0), // x^2 y
    (1, 2, 0), // x y^2
    (2, 0, 1), // x^2 z
    (2, 0, 0), // x^2
    (0, 2, 1), // y^2 z
    (0, 2, 0), // y^2
    (1, 1, 1), // x y z
    (1, 1, 0), // x y
    (1, 0, 2), // x z^2
    (1, 0, 1), // x z
    (1, 0, 0), // x
    (0, 1, 2), // y z^2
    (0, 1, 1), // y z
    (0, 1, 0), // y
    (0, 0, 3), // z^3
    (0, 0, 2), // z^2
    (0, 0, 1), // z
    (0, 0, 0), // 1
];

fn monomial_index(e: (u8, u8, u8)) -> usize {
    MONOMIALS
        .iter()
        .position(|&m| m == e)
        .expect("monomial degree exceeds 3")
}

#[derive(Clone, Copy)]
struct Poly3 {
    c: [f64; 20],
}

impl Poly3 {
    fn zero() -> Self {
        Poly3 { c: [0.0; 20] }
    }

    /// a x + b y + c z + d
    fn linear(a: f64, b: f64, c: f64, d: f64) -> Self {
        let mut p = Poly3::zero();
        p.c[monomial_index((1, 0, 0))] = a;
        p.c[monomial_index((0, 1, 0))] = b;
        p.c[monomial_index((0, 0, 1))] = c;
        p.c[monomial_index((0, 0, 0))] = d;
        p
    }

    fn add(&self, other: &Poly3) -> Poly3 {
        let mut out = *self;
        for i in 0..20 {
            out.c[i] += other.c[i];
        }
        out
    }

    fn sub(&self, other: &Poly3) -> Poly3 {
        let mut out = *self;
        for i in 0..20 {
            out.c[i] -= other.c[i];
        }
        out
    }

    fn scale(&self, s: f64) -> Poly3 {
        let mut out = *self;
        for v in out.c.iter_mut() {
            *v *= s;
        }
        out
    }

    fn mul(&self, other: &Poly3) -> Poly3 {
        let mut out = Poly3::zero();
        for i in 0..20 {
            if self.c[i] == 0.0 {
                continue;
            }
            let (a1, b1, c1) = MONOMIALS[i];
            for j in 0..20 {
                if other.c[j] == 0.0 {
                    continue;
                }
                let (a2, b2, c2) = MONOMIALS[j];
                let e = (a1 + a2, b1 + b2, c1 + c2);
                debug_assert!(e.0 + e.1 + e.2 <= 3, "product degree exceeds 3");
                out.c[monomial_index(e)] += self.c[i] * other.c[j];
            }
        }
        out
    }
}

/// Univariate polynomial arithmetic on small fixed-degree coefficient
/// vectors (ascending), used while expanding det B(z).
fn uni_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

fn uni_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    let mut out = vec![0.0; n];
    for (i, &v) in a.iter().enumerate() {
        out[i] += v;
    }
    for (i, &v) in b.iter().enumerate() {
        out[i] += v;
    }
    out
}

fn uni_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    let mut out = vec![0.0; n];
    for (i, &v) in a.iter().enumerate() {
        out[i] += v;
    }
    for (i, &v) in b.iter().enumerate() {
        out[i] -= v;
    }
    out
}

/// Multiply by z (shift coefficients up by one).
fn uni_shift(a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + 1];
    out[1..].copy_from_slice(a);
    out
}

fn uni_eval(a: &[f64], z: f64) -> f64 {
    a.iter().rev().fold(0.0, |acc, &c| acc * z + c)
}

/// Orthonormal basis of the (at least) 4-dimensional nullspace of the
/// epipolar design matrix, as 3x3 matrices.
fn nullspace_basis(sample: &MinimalSample) -> Result<[Matrix3<f64>; 4], FivePointError> {
    // 5x9 design matrix, rows kron(x', x) for vec(E) row-major.
    let mut design = DMatrix::<f64>::zeros(5, 9);
    for r in 0..5 {
        let x = sample.x[r].vector();
        let xp = sample.xp[r].vector();
        for i in 0..3 {
            for j in 0..3 {
                design[(r, 3 * i + j)] = xp[i] * x[j];
            }
        }
    }

    // Nullspace via the symmetric eigendecomposition of A^T A.
    let ata = design.transpose() * &design;
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let lam_max = eig.eigenvalues[order[8]].abs().max(1e-300);
    // rank 5 requires the 5th-smallest eigenvalue to be significant
    if eig.eigenvalues[order[4]].abs() <= 1e-16 * lam_max {
        return Err(FivePointError::DegenerateSample);
    }

    let mut basis = [Matrix3::zeros(); 4];
    for (k, &idx) in order[..4].iter().enumerate() {
        let v = eig.eigenvectors.column(idx);
        basis[k] = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
    }
    Ok(basis)
}

/// Orthogonal 4x4 re-mixings of the nullspace basis. The elimination sets
/// the coefficient of the fourth basis matrix to 1, so a true solution that
/// is nearly orthogonal to that matrix escapes to infinity in (x, y, z) and
/// its root is lost. No single chart covers every geometry; solving in a
/// few rotated charts and pooling the candidates does.
fn basis_mixes() -> [[[f64; 4]; 4]; 5] {
    fn givens(q: &mut [[f64; 4]; 4], i: usize, j: usize, angle: f64) {
        let (s, c) = angle.sin_cos();
        for col in 0..4 {
            let a = q[i][col];
            let b = q[j][col];
            q[i][col] = c * a - s * b;
            q[j][col] = s * a + c * b;
        }
    }
    let identity = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let mut mixes = [identity; 5];
    for (m, angles) in mixes[1..].iter_mut().zip([
        [0.6, 1.1, 0.9, 1.7],
        [2.3, 0.4, 1.9, 0.8],
        [1.3, 2.1, 0.5, 2.6],
        [0.2, 1.5, 2.8, 1.2],
    ]) {
        givens(m, 0, 1, angles[0]);
        givens(m, 1, 2, angles[1]);
        givens(m, 2, 3, angles[2]);
        givens(m, 0, 3, angles[3]);
    }
    mixes
}

/// Gauss-Newton refinement of a candidate (x, y, z) against the ten
/// original cubic constraints, recovering precision lost to conditioning
/// in the elimination.
fn polish_xyz(constraints: &[[f64; 20]; 10], mut x: f64, mut y: f64, mut z: f64) -> (f64, f64, f64) {
    for _ in 0..4 {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for row in constraints.iter() {
            let mut r = 0.0;
            let mut g = Vector3::zeros();
            for (coef, &(a, b, c)) in row.iter().zip(MONOMIALS.iter()) {
                if *coef == 0.0 {
                    continue;
                }
                let (a, b, c) = (a as i32, b as i32, c as i32);
                let m = x.powi(a) * y.powi(b) * z.powi(c);
                r += coef * m;
                if a > 0 {
                    g.x += coef * a as f64 * x.powi(a - 1) * y.powi(b) * z.powi(c);
                }
                if b > 0 {
                    g.y += coef * b as f64 * x.powi(a) * y.powi(b - 1) * z.powi(c);
                }
                if c > 0 {
                    g.z += coef * c as f64 * x.powi(a) * y.powi(b) * z.powi(c - 1);
                }
            }
            jtj += g * g.transpose();
            jtr += g * r;
        }
        let Some(step) = jtj.lu().solve(&jtr) else { break };
        x -= step.x;
        y -= step.y;
        z -= step.z;
        if step.norm() <= 1e-14 * (1.0 + Vector3::new(x, y, z).norm()) {
            break;
        }
    }
    (x, y, z)
}

/// Run the elimination and back-substitution in the chart defined by one
/// nullspace basis (fourth coefficient fixed to 1).
fn solve_in_chart(basis: &[Matrix3<f64>; 4]) -> Result<Vec<EssentialMatrix>, FivePointError> {
    // E = x*B0 + y*B1 + z*B2 + B3 entrywise as degree-1 polynomials.
    let mut e_poly = [[Poly3::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            e_poly[i][j] = Poly3::linear(
                basis[0][(i, j)],
                basis[1][(i, j)],
                basis[2][(i, j)],
                basis[3][(i, j)],
            );
        }
    }

    // Ten cubic constraints: det(E) = 0 and 2 E E^T E - tr(E E^T) E = 0.
    let mut constraints = [[0.0f64; 20]; 10];
    {
        let det = e_poly[0][0]
            .mul(&e_poly[1][1].mul(&e_poly[2][2]).sub(&e_poly[1][2].mul(&e_poly[2][1])))
            .sub(
                &e_poly[0][1]
                    .mul(&e_poly[1][0].mul(&e_poly[2][2]).sub(&e_poly[1][2].mul(&e_poly[2][0]))),
            )
            .add(
                &e_poly[0][2]
                    .mul(&e_poly[1][0].mul(&e_poly[2][1]).sub(&e_poly[1][1].mul(&e_poly[2][0]))),
            );
        constraints[0] = det.c;

        // P = E E^T (degree 2)
        let mut p = [[Poly3::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = Poly3::zero();
                for k in 0..3 {
                    acc = acc.add(&e_poly[i][k].mul(&e_poly[j][k]));
                }
                p[i][j] = acc;
            }
        }
        let trace = p[0][0].add(&p[1][1]).add(&p[2][2]);
        for i in 0..3 {
            for j in 0..3 {
                let mut pe = Poly3::zero();
                for k in 0..3 {
                    pe = pe.add(&p[i][k].mul(&e_poly[k][j]));
                }
                let t = pe.scale(2.0).sub(&trace.mul(&e_poly[i][j]));
                constraints[1 + 3 * i + j] = t.c;
            }
        }
    }

    // Gauss-Jordan with partial pivoting over the 10 leading monomials.
    let mut a = constraints;
    for col in 0..10 {
        let mut pivot = col;
        for row in col..10 {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        let scale = a
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if a[pivot][col].abs() <= 1e-14 * scale.max(1e-300) {
            return Err(FivePointError::PoorlyConditioned);
        }
        a.swap(col, pivot);
        let inv = 1.0 / a[col][col];
        for v in a[col].iter_mut() {
            *v *= inv;
        }
        for row in 0..10 {
            if row != col {
                let f = a[row][col];
                if f != 0.0 {
                    for k in 0..20 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }

    // Trailing monomials (columns 10..20): [xz^2, xz, x, yz^2, yz, y, z^3, z^2, z, 1].
    // Reduced row r states: leading_monomial_r + Tx(z) x + Ty(z) y + T1(z) = 0.
    let trailing = |row: usize| -> ([f64; 3], [f64; 3], [f64; 4]) {
        let r = &a[row];
        // ascending coefficient order
        ([r[12], r[11], r[10]], [r[15], r[14], r[13]], [r[19], r[18], r[17], r[16]])
    };

    // Rows with leading monomials x^2 z (4), x^2 (5), y^2 z (6), y^2 (7),
    // xyz (8), xy (9). Pairwise differences (e - z f) cancel the leading
    // monomials and leave polynomials linear in x and y.
    let mut b_rows = Vec::with_capacity(3);
    for pair in [(4usize, 5usize), (6, 7), (8, 9)] {
        let (ex, ey, e1) = trailing(pair.0);
        let (fx, fy, f1) = trailing(pair.1);
        let kx = uni_sub(&ex, &uni_shift(&fx)); // degree <= 3
        let ky = uni_sub(&ey, &uni_shift(&fy));
        let k1 = uni_sub(&e1, &uni_shift(&f1)); // degree <= 4
        b_rows.push((kx, ky, k1));
    }

    // n(z) = det B(z), degree 10.
    let (kx, ky, k1) = &b_rows[0];
    let (lx, ly, l1) = &b_rows[1];
    let (mx, my, m1) = &b_rows[2];
    let c0 = uni_sub(&uni_mul(ly, m1), &uni_mul(l1, my));
    let c1 = uni_sub(&uni_mul(lx, m1), &uni_mul(l1, mx));
    let c2 = uni_sub(&uni_mul(lx, my), &uni_mul(ly, mx));
    let n = uni_add(
        &uni_sub(&uni_mul(kx, &c0), &uni_mul(ky, &c1)),
        &uni_mul(k1, &c2),
    );
    let n_poly = Polynomial::new(n);
    if n_poly.degree() == 0 {
        return Err(FivePointError::PoorlyConditioned);
    }

    let roots = real_roots_tol(&n_poly, 1e-2)?;
    let mut solutions = Vec::new();
    for z in roots {
        // Null vector of B(z) for (x, y, 1): cross product of the two
        // best-conditioned rows.
        let rows = [
            Vector3::new(uni_eval(kx, z), uni_eval(ky, z), uni_eval(k1, z)),
            Vector3::new(uni_eval(lx, z), uni_eval(ly, z), uni_eval(l1, z)),
            Vector3::new(uni_eval(mx, z), uni_eval(my, z), uni_eval(m1, z)),
        ];
        let candidates = [
            rows[0].cross(&rows[1]),
            rows[0].cross(&rows[2]),
            rows[1].cross(&rows[2]),
        ];
        let nullvec = candidates
            .iter()
            .max_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap())
            .copied()
            .unwrap();
        if nullvec.z.abs() <= 1e-12 * nullvec.norm() {
            continue; // solution with w = 0; not representable in this chart
        }
        let x = nullvec.x / nullvec.z;
        let y = nullvec.y / nullvec.z;
        let (x, y, z) = polish_xyz(&constraints, x, y, z);
        let m = basis[0] * x + basis[1] * y + basis[2] * z + basis[3];
        let e = EssentialMatrix::from_matrix(m);
        if e.det_residual() < 1e-8 && e.trace_constraint_residual() < 1e-8 {
            solutions.push(EssentialMatrix::from_matrix(e.canonical()));
        }
    }
    Ok(solutions)
}

/// Largest epipolar residual of a candidate over the five pairs; used to
/// pick the better of two near-duplicate candidates from different charts.
fn sample_misfit(sample: &MinimalSample, e: &EssentialMatrix) -> f64 {
    (0..5)
        .map(|k| crate::geometry::epipolar_residual(&sample.x[k], &sample.xp[k], e).abs())
        .fold(0.0f64, f64::max)
}

/// Solve for all essential matrices consistent with the five pairs.
pub fn solve_five_point(sample: &MinimalSample) -> Result<Vec<EssentialMatrix>, FivePointError> {
    let basis = nullspace_basis(sample)?;
    let mut solutions: Vec<EssentialMatrix> = Vec::new();
    let mut first_err = None;
    let mut any_ok = false;
    for mix in basis_mixes() {
        let mut mixed = [Matrix3::zeros(); 4];
        for k in 0..4 {
            for l in 0..4 {
                mixed[k] += basis[l] * mix[k][l];
            }
        }
        match solve_in_chart(&mixed) {
            Ok(sols) => {
                any_ok = true;
                for e in sols {
                    match solutions
                        .iter_mut()
                        .find(|s| s.canonical_distance(&e) < 1e-4)
                    {
                        Some(existing) => {
                            if sample_misfit(sample, &e) < sample_misfit(sample, existing) {
                                *existing = e;
                            }
                        }
                        None => solutions.push(e),
                    }
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    if !any_ok {
        return Err(first_err.unwrap_or(FivePointError::PoorlyConditioned));
    }
    solutions.truncate(10);
    Ok(solutions)
}
