//! Minimal and linear essential-matrix solvers plus pose decomposition.
//!
//! Convention: a source point `x` and destination point `x'` (normalized,
//! homogeneous with z = 1) satisfy `x'ᵀ E x = 0` with `E = [t]ₓ R` and
//! `X_dst = R X_src + t`.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector2, Vector3};

use super::InitError;
use crate::geometry::skew;

pub type PointPair = (Vector2<f64>, Vector2<f64>);

fn homog(p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

fn design_row(pair: &PointPair) -> [f64; 9] {
    let (x, xp) = (homog(&pair.0), homog(&pair.1));
    std::array::from_fn(|k| xp[k / 3] * x[k % 3])
}

/// Right singular vectors of `rows` (padded to square) sorted by ascending
/// singular value, with the sorted singular values.
fn sorted_right_singular(rows: &[[f64; 9]]) -> (Vec<f64>, Vec<[f64; 9]>) {
    let n = rows.len().max(9);
    let mut a = DMatrix::<f64>::zeros(n, 9);
    for (i, r) in rows.iter().enumerate() {
        for k in 0..9 {
            a[(i, k)] = r[k];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested v_t");
    let mut idx: Vec<usize> = (0..9).collect();
    idx.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let values = idx.iter().map(|&i| svd.singular_values[i]).collect();
    let vectors = idx
        .iter()
        .map(|&i| std::array::from_fn(|k| vt[(i, k)]))
        .collect();
    (values, vectors)
}

fn mat_from(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

// Monomials in (x, y, z) up to degree three. The first ten are eliminated
// by Gauss-Jordan; the last ten are x·{z², z, 1}, y·{z², z, 1}, {z³, z², z, 1}.
const MONOMIALS: [(u8, u8, u8); 20] = [
    (3, 0, 0),
    (0, 3, 0),
    (2, 1, 0),
    (1, 2, 0),
    (2, 0, 1),
    (2, 0, 0),
    (0, 2, 1),
    (0, 2, 0),
    (1, 1, 1),
    (1, 1, 0),
    (1, 0, 2),
    (1, 0, 1),
    (1, 0, 0),
    (0, 1, 2),
    (0, 1, 1),
    (0, 1, 0),
    (0, 0, 3),
    (0, 0, 2),
    (0, 0, 1),
    (0, 0, 0),
];

fn monomial_index(e: (u8, u8, u8)) -> usize {
    MONOMIALS
        .iter()
        .position(|&m| m == e)
        .expect("degree at most three")
}

#[derive(Clone, Copy)]
struct Poly([f64; 20]);

impl Poly {
    fn zero() -> Self {
        Poly([0.0; 20])
    }

    fn linear(x: f64, y: f64, z: f64, w: f64) -> Self {
        let mut p = Self::zero();
        p.0[monomial_index((1, 0, 0))] = x;
        p.0[monomial_index((0, 1, 0))] = y;
        p.0[monomial_index((0, 0, 1))] = z;
        p.0[monomial_index((0, 0, 0))] = w;
        p
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (i, &a) in self.0.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let ma = MONOMIALS[i];
            for (j, &b) in other.0.iter().enumerate() {
                if b == 0.0 {
                    continue;
                }
                let mb = MONOMIALS[j];
                let e = (ma.0 + mb.0, ma.1 + mb.1, ma.2 + mb.2);
                assert!(e.0 + e.1 + e.2 <= 3, "product exceeds degree three");
                out.0[monomial_index(e)] += a * b;
            }
        }
        out
    }

    fn add(&self, other: &Poly) -> Poly {
        Poly(std::array::from_fn(|k| self.0[k] + other.0[k]))
    }

    fn scale(&self, s: f64) -> Poly {
        Poly(self.0.map(|c| c * s))
    }

    /// Value and gradient at `(x, y, z)`.
    fn eval_grad(&self, v: &[f64; 3]) -> (f64, [f64; 3]) {
        let pow = |b: f64, e: u8| if e == 0 { 1.0 } else { b.powi(e as i32) };
        let mut value = 0.0;
        let mut grad = [0.0; 3];
        for (&c, &m) in self.0.iter().zip(&MONOMIALS) {
            if c == 0.0 {
                continue;
            }
            let e = [m.0, m.1, m.2];
            let p = [pow(v[0], e[0]), pow(v[1], e[1]), pow(v[2], e[2])];
            value += c * p[0] * p[1] * p[2];
            for k in 0..3 {
                if e[k] > 0 {
                    let dk = e[k] as f64 * pow(v[k], e[k] - 1);
                    grad[k] += c * dk * p[(k + 1) % 3] * p[(k + 2) % 3];
                }
            }
        }
        (value, grad)
    }
}

/// Gauss-Newton on the ten cubic constraints, starting from a root of the
/// eliminated polynomial. Stops when the residual stops shrinking.
fn polish_solution(constraints: &[Poly; 10], start: [f64; 3]) -> [f64; 3] {
    let residual = |v: &[f64; 3]| {
        let mut f = SMatrix::<f64, 10, 1>::zeros();
        let mut j = SMatrix::<f64, 10, 3>::zeros();
        for (i, c) in constraints.iter().enumerate() {
            let (value, grad) = c.eval_grad(v);
            f[i] = value;
            for k in 0..3 {
                j[(i, k)] = grad[k];
            }
        }
        (f, j)
    };
    let mut v = start;
    let (mut f, mut j) = residual(&v);
    for _ in 0..6 {
        let Ok(step) = j.svd(true, true).solve(&(-f), 1e-14) else {
            break;
        };
        let next = [v[0] + step[0], v[1] + step[1], v[2] + step[2]];
        let (fn_, jn) = residual(&next);
        if !(fn_.norm() < f.norm()) {
            break;
        }
        (v, f, j) = (next, fn_, jn);
    }
    v
}

type PolyMat = [[Poly; 3]; 3];

fn poly_matmul_t(a: &PolyMat, b: &PolyMat, transpose_b: bool) -> PolyMat {
    std::array::from_fn(|r| {
        std::array::from_fn(|c| {
            (0..3).fold(Poly::zero(), |acc, k| {
                let bk = if transpose_b { &b[c][k] } else { &b[k][c] };
                acc.add(&a[r][k].mul(bk))
            })
        })
    })
}

// Univariate polynomials in z, ascending coefficients.
fn upoly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn upoly_add(a: &[f64], b: &[f64], sign: f64) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|k| a.get(k).copied().unwrap_or(0.0) + sign * b.get(k).copied().unwrap_or(0.0))
        .collect()
}

fn upoly_eval(p: &[f64], z: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * z + c)
}

fn upoly_deriv(p: &[f64]) -> Vec<f64> {
    p.iter()
        .enumerate()
        .skip(1)
        .map(|(k, &c)| k as f64 * c)
        .collect()
}

/// Real roots of an ascending-coefficient polynomial via companion-matrix
/// eigenvalues, polished by Newton steps.
pub(crate) fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut p: Vec<f64> = coeffs.iter().map(|c| c / scale).collect();
    while p.len() > 1 && p.last().unwrap().abs() < 1e-13 {
        p.pop();
    }
    let n = p.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    let lead = p[n];
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        companion[(0, k)] = -p[n - 1 - k] / lead;
    }
    for k in 1..n {
        companion[(k, k - 1)] = 1.0;
    }
    let dp = upoly_deriv(&p);
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|c| c.im.abs() <= 1e-6 * c.re.abs().max(1.0))
        .map(|c| {
            let mut z = c.re;
            for _ in 0..8 {
                let d = upoly_eval(&dp, z);
                if d == 0.0 {
                    break;
                }
                let step = upoly_eval(&p, z) / d;
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            z
        })
        .filter(|z| z.is_finite())
        .collect()
}

fn normalized(e: Matrix3<f64>) -> Matrix3<f64> {
    let n = e.norm();
    if n > 0.0 {
        e / n
    } else {
        e
    }
}

/// Five-point minimal solver. Returns every real solution, each scaled to
/// unit Frobenius norm.
pub fn estimate_essential_fivepoint(pairs: &[PointPair]) -> Result<Vec<Matrix3<f64>>, InitError> {
    if pairs.len() != 5 {
        return Err(InitError::DegenerateConfiguration(format!(
            "minimal solver needs exactly 5 pairs, got {}",
            pairs.len()
        )));
    }
    let rows: Vec<[f64; 9]> = pairs.iter().map(design_row).collect();
    let (sv, basis) = sorted_right_singular(&rows);
    // A five-row design matrix has rank five unless the sample is degenerate.
    if sv[8] == 0.0 || sv[4] <= 1e-10 * sv[8] {
        return Err(InitError::DegenerateConfiguration(
            "epipolar design matrix nullspace exceeds four dimensions".into(),
        ));
    }
    let [xb, yb, zb, wb] = [0, 1, 2, 3].map(|k| mat_from(&basis[k]));
    let e: PolyMat = std::array::from_fn(|r| {
        std::array::from_fn(|c| Poly::linear(xb[(r, c)], yb[(r, c)], zb[(r, c)], wb[(r, c)]))
    });

    let eet = poly_matmul_t(&e, &e, true);
    let trace = eet[0][0].add(&eet[1][1]).add(&eet[2][2]);
    let eete = poly_matmul_t(&eet, &e, false);
    let mut constraints = [Poly::zero(); 10];
    let det = e[0][0]
        .mul(
            &e[1][1]
                .mul(&e[2][2])
                .add(&e[1][2].mul(&e[2][1]).scale(-1.0)),
        )
        .add(
            &e[0][1].mul(
                &e[1][2]
                    .mul(&e[2][0])
                    .add(&e[1][0].mul(&e[2][2]).scale(-1.0)),
            ),
        )
        .add(
            &e[0][2].mul(
                &e[1][0]
                    .mul(&e[2][1])
                    .add(&e[1][1].mul(&e[2][0]).scale(-1.0)),
            ),
        );
    constraints[0] = det;
    for r in 0..3 {
        for c in 0..3 {
            constraints[1 + 3 * r + c] =
                eete[r][c].scale(2.0).add(&trace.mul(&e[r][c]).scale(-1.0));
        }
    }
    let mut system = DMatrix::<f64>::from_fn(10, 20, |r, k| constraints[r].0[k]);

    // Gauss-Jordan on the leading ten columns with partial pivoting.
    for col in 0..10 {
        let pivot = (col..10)
            .max_by(|&a, &b| system[(a, col)].abs().total_cmp(&system[(b, col)].abs()))
            .unwrap();
        if system[(pivot, col)].abs() < 1e-14 {
            return Err(InitError::DegenerateConfiguration(
                "cubic constraint system is singular".into(),
            ));
        }
        system.swap_rows(col, pivot);
        let p = system[(col, col)];
        for k in 0..20 {
            system[(col, k)] /= p;
        }
        for row in 0..10 {
            if row != col {
                let f = system[(row, col)];
                if f != 0.0 {
                    for k in 0..20 {
                        system[(row, k)] -= f * system[(col, k)];
                    }
                }
            }
        }
    }

    // Row r reads lead_r + x·px(z) + y·py(z) + p1(z) = 0.
    let parts = |r: usize| {
        let b = |k: usize| system[(r, k)];
        (
            vec![b(12), b(11), b(10)],
            vec![b(15), b(14), b(13)],
            vec![b(19), b(18), b(17), b(16)],
        )
    };
    // lead(e) = z·lead(f) for (e, f) in {(x²z, x²), (y²z, y²), (xyz, xy)}.
    let reduce = |e: usize, f: usize| {
        let (ex, ey, e1) = parts(e);
        let (fx, fy, f1) = parts(f);
        let z = [0.0, 1.0];
        [
            upoly_add(&ex, &upoly_mul(&z, &fx), -1.0),
            upoly_add(&ey, &upoly_mul(&z, &fy), -1.0),
            upoly_add(&e1, &upoly_mul(&z, &f1), -1.0),
        ]
    };
    let b = [reduce(4, 5), reduce(6, 7), reduce(8, 9)];
    let minor = |r0: usize, r1: usize, c0: usize, c1: usize| {
        upoly_add(
            &upoly_mul(&b[r0][c0], &b[r1][c1]),
            &upoly_mul(&b[r0][c1], &b[r1][c0]),
            -1.0,
        )
    };
    let det_b = upoly_add(
        &upoly_add(
            &upoly_mul(&b[0][0], &minor(1, 2, 1, 2)),
            &upoly_mul(&b[0][1], &minor(1, 2, 0, 2)),
            -1.0,
        ),
        &upoly_mul(&b[0][2], &minor(1, 2, 0, 1)),
        1.0,
    );

    let mut out = Vec::new();
    for z in real_roots(&det_b) {
        let bz = Matrix3::from_fn(|r, c| upoly_eval(&b[r][c], z));
        let rows = [
            bz.row(0).transpose(),
            bz.row(1).transpose(),
            bz.row(2).transpose(),
        ];
        let v = [(0, 1), (0, 2), (1, 2)]
            .iter()
            .map(|&(a, c)| rows[a].cross(&rows[c]))
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .unwrap();
        if v.z.abs() <= 1e-14 * v.norm() || !v.iter().all(|c| c.is_finite()) {
            continue;
        }
        let [x, y, z] = polish_solution(&constraints, [v.x / v.z, v.y / v.z, z]);
        out.push(normalized(xb * x + yb * y + zb * z + wb));
    }
    Ok(out)
}

fn hartley_transform(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let spread = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 0.0 {
        std::f64::consts::SQRT_2 / spread
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

/// Projects a matrix onto the essential manifold (two equal singular
/// values, one zero), unit Frobenius norm.
pub fn project_to_essential(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let d = SMatrix::<f64, 3, 3>::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
    let u = Matrix3::from_columns(&idx.map(|i| u.column(i).into_owned()));
    let vt = Matrix3::from_rows(&idx.map(|i| vt.row(i).into_owned()));
    normalized(u * d * vt)
}

/// Normalized eight-point solver for eight or more pairs.
pub fn estimate_essential_eightpoint(pairs: &[PointPair]) -> Result<Matrix3<f64>, InitError> {
    if pairs.len() < 8 {
        return Err(InitError::DegenerateConfiguration(format!(
            "eight-point solver needs at least 8 pairs, got {}",
            pairs.len()
        )));
    }
    let src: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let (t1, t2) = (hartley_transform(&src), hartley_transform(&dst));
    let rows: Vec<[f64; 9]> = pairs
        .iter()
        .map(|(a, b)| {
            let a = (t1 * homog(a)).xy();
            let b = (t2 * homog(b)).xy();
            design_row(&(a, b))
        })
        .collect();
    let (sv, basis) = sorted_right_singular(&rows);
    if sv[8] == 0.0 || sv[1] <= 1e-12 * sv[8] {
        return Err(InitError::DegenerateConfiguration(
            "eight-point design matrix has a multi-dimensional nullspace".into(),
        ));
    }
    let f = mat_from(&basis[0]);
    Ok(project_to_essential(&(t2.transpose() * f * t1)))
}

/// The four `(R, t)` factorizations of `E`, with unit `t`.
pub fn decompose_essential(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.svd(true, true);
    let (mut u, mut vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let smallest = (0..3)
        .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
        .unwrap();
    // Move the null direction to the third slot.
    if smallest != 2 {
        u.swap_columns(smallest, 2);
        vt.swap_rows(smallest, 2);
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t = u.column(2).normalize();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Midpoint triangulation; returns the depths along each camera's z axis.
pub fn triangulate_midpoint(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    src: &Vector2<f64>,
    dst: &Vector2<f64>,
) -> Option<(f64, f64)> {
    // Source camera at the origin; destination center at -Rᵀt.
    let d1 = homog(src);
    let d2 = r.transpose() * homog(dst);
    let c2 = -r.transpose() * t;
    let (a, b, c) = (d1.dot(&d1), d1.dot(&d2), d2.dot(&d2));
    let denom = a * c - b * b;
    if denom.abs() <= 1e-14 * a * c {
        return None;
    }
    let (p, q) = (d1.dot(&c2), d2.dot(&c2));
    let l1 = (p * c - b * q) / denom;
    let l2 = (b * p - a * q) / denom;
    let x = 0.5 * (d1 * l1 + (c2 + d2 * l2));
    let z_dst = (r * x + t).z;
    Some((x.z, z_dst))
}

/// Picks the decomposition with the most points in front of both cameras.
/// Returns `(R, t, positive_count)`.
pub fn select_pose<'a>(
    e: &Matrix3<f64>,
    pairs: impl Iterator<Item = &'a PointPair> + Clone,
) -> (Matrix3<f64>, Vector3<f64>, usize) {
    decompose_essential(e)
        .into_iter()
        .map(|(r, t)| {
            let count = pairs
                .clone()
                .filter(|(a, b)| matches!(triangulate_midpoint(&r, &t, a, b), Some((z1, z2)) if z1 > 0.0 && z2 > 0.0))
                .count();
            (r, t, count)
        })
        .fold(None, |best: Option<(Matrix3<f64>, Vector3<f64>, usize)>, cand| match best {
            Some(b) if b.2 >= cand.2 => Some(b),
            _ => Some(cand),
        })
        .unwrap()
}

fn signed_sampson(e: &Matrix3<f64>, pair: &PointPair) -> f64 {
    let (x, xp) = (homog(&pair.0), homog(&pair.1));
    let ex = e * x;
    let etxp = e.transpose() * xp;
    let den = ex.x * ex.x + ex.y * ex.y + etxp.x * etxp.x + etxp.y * etxp.y;
    if den <= 0.0 {
        return 0.0;
    }
    xp.dot(&ex) / den.sqrt()
}

fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if t.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let b1 = t.cross(&helper).normalize();
    (b1, t.cross(&b1))
}

fn perturb(r: &Matrix3<f64>, t: &Vector3<f64>, d: &[f64; 5]) -> (Matrix3<f64>, Vector3<f64>) {
    let w = Vector3::new(d[0], d[1], d[2]);
    let r = nalgebra::Rotation3::new(w).into_inner() * r;
    let (b1, b2) = tangent_basis(t);
    (r, (t + b1 * d[3] + b2 * d[4]).normalize())
}

fn sampson_cost(r: &Matrix3<f64>, t: &Vector3<f64>, pairs: &[PointPair]) -> f64 {
    let e = skew(t) * r;
    pairs.iter().map(|p| signed_sampson(&e, p).powi(2)).sum()
}

/// Levenberg-Marquardt on the Sampson distance over a rotation and a unit
/// translation direction. Returns the refined `(R, t)`.
pub fn refine_relative_pose(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    pairs: &[PointPair],
    iterations: usize,
) -> (Matrix3<f64>, Vector3<f64>) {
    let (mut r, mut t) = (*r, t.normalize());
    if pairs.len() < 5 {
        return (r, t);
    }
    let mut cost = sampson_cost(&r, &t, pairs);
    let mut lambda = 1e-3;
    let h = 1e-7;
    for _ in 0..iterations {
        let e0 = skew(&t) * r;
        let res: Vec<f64> = pairs.iter().map(|p| signed_sampson(&e0, p)).collect();
        let mut jac = vec![[0.0; 5]; pairs.len()];
        for k in 0..5 {
            let mut d = [0.0; 5];
            d[k] = h;
            let (rp, tp) = perturb(&r, &t, &d);
            d[k] = -h;
            let (rm, tm) = perturb(&r, &t, &d);
            let (ep, em) = (skew(&tp) * rp, skew(&tm) * rm);
            for (row, p) in jac.iter_mut().zip(pairs) {
                row[k] = (signed_sampson(&ep, p) - signed_sampson(&em, p)) / (2.0 * h);
            }
        }
        let mut jtj = SMatrix::<f64, 5, 5>::zeros();
        let mut jtr = SMatrix::<f64, 5, 1>::zeros();
        for (row, &e) in jac.iter().zip(&res) {
            let j = SMatrix::<f64, 5, 1>::from_row_slice(row);
            jtj += j * j.transpose();
            jtr += j * e;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for k in 0..5 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let d: [f64; 5] = std::array::from_fn(|k| step[k]);
            let (rn, tn) = perturb(&r, &t, &d);
            let c = sampson_cost(&rn, &tn, pairs);
            if c < cost {
                let converged = (cost - c) <= 1e-12 * cost;
                (r, t, cost) = (rn, tn, c);
                lambda = (lambda * 0.1).max(1e-12);
                improved = !converged;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (r, t)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::{axis_angle, rotation_angle_deg, skew, vector_angle_deg};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_problem(
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> (Matrix3<f64>, Vector3<f64>, Vec<PointPair>) {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let r = axis_angle(&axis, rng.random_range(0.05..0.5));
        let t = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..0.3),
        )
        .normalize();
        let mut pairs = Vec::new();
        while pairs.len() < n {
            let x = Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(3.0..8.0),
            );
            let y = r * x + t;
            if y.z > 0.1 {
                pairs.push((x.xy() / x.z, y.xy() / y.z));
            }
        }
        (r, t, pairs)
    }

    fn essential_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        let (a, b) = (normalized(*a), normalized(*b));
        (a - b).norm().min((a + b).norm())
    }

    #[test]
    fn fivepoint_recovers_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (r, t, pairs) = random_problem(&mut rng, 5);
            let truth = skew(&t) * r;
            let sols = estimate_essential_fivepoint(&pairs).unwrap();
            assert!(!sols.is_empty());
            for e in &sols {
                for (a, b) in &pairs {
                    assert!((homog(b).transpose() * e * homog(a))[0].abs() < 1e-8);
                }
            }
            let best = sols
                .iter()
                .map(|e| essential_distance(e, &truth))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "{best}");
        }
    }

    #[test]
    fn fivepoint_pure_rotation_is_degenerate_or_null() {
        let r = axis_angle(&Vector3::new(0.2, 1.0, 0.1), 0.3);
        let pts = [
            (0.1, 0.2),
            (-0.3, 0.1),
            (0.4, -0.2),
            (0.0, 0.5),
            (-0.2, -0.4),
        ];
        let pairs: Vec<PointPair> = pts
            .iter()
            .map(|&(u, v)| {
                let x = Vector3::new(u, v, 1.0);
                let y = r * x;
                (x.xy(), y.xy() / y.z)
            })
            .collect();
        // With t = 0 the true E is zero; any returned candidate is spurious and
        // callers reject it because the rank-2 structure cannot be verified.
        match estimate_essential_fivepoint(&pairs) {
            Err(InitError::DegenerateConfiguration(_)) => {}
            Ok(sols) => {
                for e in sols {
                    for (a, b) in &pairs {
                        assert!((homog(b).transpose() * e * homog(a))[0].abs() < 1e-8);
                    }
                }
            }
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn fivepoint_identical_pairs_degenerate() {
        let p = (Vector2::new(0.1, 0.2), Vector2::new(0.15, 0.2));
        assert!(matches!(
            estimate_essential_fivepoint(&[p; 5]),
            Err(InitError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn eightpoint_and_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (r, t, pairs) = random_problem(&mut rng, 30);
        let e = estimate_essential_eightpoint(&pairs).unwrap();
        assert!(essential_distance(&e, &(skew(&t) * r)) < 1e-9);
        let (r_est, t_est, count) = select_pose(&e, pairs.iter());
        assert_eq!(count, 30);
        assert!(rotation_angle_deg(&r_est, &r) < 1e-6);
        assert!(vector_angle_deg(&t_est, &t) < 1e-6);
    }

    #[test]
    fn roots_of_known_polynomial() {
        // (z - 1)(z + 2)(z - 3)(z² + 1)
        let p = upoly_mul(
            &upoly_mul(&upoly_mul(&[-1.0, 1.0], &[2.0, 1.0]), &[-3.0, 1.0]),
            &[1.0, 0.0, 1.0],
        );
        let mut roots = real_roots(&p);
        roots.sort_by(f64::total_cmp);
        assert_eq!(roots.len(), 3);
        for (a, b) in roots.iter().zip([-2.0, 1.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn midpoint_depths() {
        let r = Matrix3::identity();
        let t = Vector3::new(-1.0, 0.0, 0.0);
        let x = Vector3::new(0.5, 0.2, 4.0);
        let y = r * x + t;
        let (z1, z2) = triangulate_midpoint(&r, &t, &(x.xy() / x.z), &(y.xy() / y.z)).unwrap();
        assert!((z1 - 4.0).abs() < 1e-12 && (z2 - 4.0).abs() < 1e-12);
    }
}
