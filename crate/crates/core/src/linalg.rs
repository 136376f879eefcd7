//! Small dense linear-algebra kernels used by the tangent-cocycle code.
//!
//! Frames are `d × k` matrices with orthonormal columns. Long cocycle products
//! are never formed explicitly; [`ScaledTriangular`] keeps the accumulated
//! triangular factor with one log-scale per row so that products spanning
//! hundreds of orders of magnitude stay representable.

use nalgebra::DMatrix;

/// Thin QR by modified Gram–Schmidt with one reorthogonalisation pass.
///
/// On return `a` holds the orthonormal factor and `r` the upper-triangular
/// factor with a positive diagonal. Returns `false` on rank collapse (a zero
/// or non-finite diagonal entry); `a` is then left partially processed.
pub fn thin_qr_in_place(a: &mut DMatrix<f64>, r: &mut DMatrix<f64>) -> bool {
    let (d, k) = a.shape();
    debug_assert_eq!(r.shape(), (k, k));
    r.fill(0.0);
    for j in 0..k {
        for _ in 0..2 {
            for i in 0..j {
                let mut dot = 0.0;
                for row in 0..d {
                    dot += a[(row, i)] * a[(row, j)];
                }
                for row in 0..d {
                    let qi = a[(row, i)];
                    a[(row, j)] -= dot * qi;
                }
                r[(i, j)] += dot;
            }
        }
        let mut norm = 0.0;
        for row in 0..d {
            norm += a[(row, j)] * a[(row, j)];
        }
        let norm = norm.sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return false;
        }
        r[(j, j)] = norm;
        for row in 0..d {
            a[(row, j)] /= norm;
        }
    }
    true
}

/// Orthonormalises the columns of `a`, returning `None` if they are dependent.
pub fn orthonormalize(mut a: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let k = a.ncols();
    let mut r = DMatrix::zeros(k, k);
    thin_qr_in_place(&mut a, &mut r).then_some(a)
}

/// Largest deviation of `qᵀq` from the identity.
pub fn orthonormality_defect(q: &DMatrix<f64>) -> f64 {
    let g = q.transpose() * q;
    let k = g.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Principal angles between `span(a)` and `span(b)`, both with orthonormal
/// columns, in increasing order. Only `min(p, q)` angles exist; when
/// `a` has fewer columns this measures how far `span(a)` is from lying in
/// `span(b)`.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let m = a.transpose() * b;
    let sv = m.singular_values();
    let mut angles: Vec<f64> = sv.iter().map(|s| s.clamp(-1.0, 1.0).acos()).collect();
    angles.sort_by(|x, y| x.total_cmp(y));
    angles
}

pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    principal_angles(a, b).last().copied().unwrap_or(0.0)
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Determinant of the square submatrix `m[rows, cols]`.
pub fn minor(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    let sub = DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])]);
    sub.determinant()
}

/// `½·log det(bᵀb)` together with the Cholesky factor of the Gram matrix.
pub fn half_log_gram_det(b: &DMatrix<f64>) -> Option<(f64, DMatrix<f64>)> {
    let gram = b.transpose() * b;
    let chol = gram.cholesky()?;
    let l = chol.l();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        let v = l[(i, i)];
        if !(v > 0.0 && v.is_finite()) {
            return None;
        }
        acc += v.ln();
    }
    Some((acc, l))
}

/// A square matrix stored as `diag(exp(log_scale)) · body`, with the rows of
/// `body` normalised to unit length (or zero).
#[derive(Debug, Clone)]
pub struct ScaledTriangular {
    log_scale: Vec<f64>,
    body: DMatrix<f64>,
}

impl ScaledTriangular {
    pub fn identity(k: usize) -> Self {
        Self {
            log_scale: vec![0.0; k],
            body: DMatrix::identity(k, k),
        }
    }

    pub fn dim(&self) -> usize {
        self.log_scale.len()
    }

    pub fn log_scale(&self) -> &[f64] {
        &self.log_scale
    }

    pub fn body(&self) -> &DMatrix<f64> {
        &self.body
    }

    /// Replaces `self` by `r · self`.
    pub fn left_mul(&mut self, r: &DMatrix<f64>) {
        let k = self.dim();
        let mut new_body = DMatrix::<f64>::zeros(k, k);
        let mut new_scale = vec![f64::NEG_INFINITY; k];
        for i in 0..k {
            let mut top = f64::NEG_INFINITY;
            for j in 0..k {
                let c = r[(i, j)];
                if c != 0.0 && self.log_scale[j].is_finite() {
                    top = top.max(self.log_scale[j] + c.abs().ln());
                }
            }
            if !top.is_finite() {
                continue;
            }
            for j in 0..k {
                let c = r[(i, j)];
                if c == 0.0 || !self.log_scale[j].is_finite() {
                    continue;
                }
                let w = c.signum() * (self.log_scale[j] + c.abs().ln() - top).exp();
                for col in 0..k {
                    new_body[(i, col)] += w * self.body[(j, col)];
                }
            }
            let norm = new_body.row(i).norm();
            if norm > 0.0 {
                for col in 0..k {
                    new_body[(i, col)] /= norm;
                }
                new_scale[i] = top + norm.ln();
            }
        }
        self.body = new_body;
        self.log_scale = new_scale;
    }

    /// The plain matrix; overflows for long products.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut m = self.body.clone();
        for i in 0..self.dim() {
            let s = self.log_scale[i].exp();
            for j in 0..self.dim() {
                m[(i, j)] *= s;
            }
        }
        m
    }

    /// `log σ_1 ≥ … ≥ log σ_k`, computed from compound matrices so that
    /// each partial sum `log(σ_1⋯σ_p)` is the log of a top singular value of
    /// a matrix whose rows have been rescaled into floating range.
    pub fn log_singular_values(&self) -> Vec<f64> {
        let k = self.dim();
        let mut prefix = Vec::with_capacity(k + 1);
        prefix.push(0.0);
        for p in 1..=k {
            let subsets = combinations(k, p);
            let scales: Vec<f64> = subsets
                .iter()
                .map(|s| s.iter().map(|&i| self.log_scale[i]).sum::<f64>())
                .collect();
            let top = scales.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !top.is_finite() {
                prefix.push(f64::NEG_INFINITY);
                continue;
            }
            let n = subsets.len();
            let compound = DMatrix::from_fn(n, n, |a, b| {
                let w = (scales[a] - top).exp();
                if w == 0.0 {
                    0.0
                } else {
                    w * minor(&self.body, &subsets[a], &subsets[b])
                }
            });
            let smax = compound.singular_values().max();
            prefix.push(if smax > 0.0 {
                top + smax.ln()
            } else {
                f64::NEG_INFINITY
            });
        }
        (1..=k)
            .map(|p| {
                if prefix[p].is_finite() {
                    prefix[p] - prefix[p - 1]
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }

    /// Right singular vectors, columns ordered by decreasing singular value.
    ///
    /// Rows are sorted by scale, the unscaled body is factored as
    /// `bodyᵀ = Q'R'`, and only the graded triangle `diag(e^{l−max})·R'ᵀ`
    /// goes through a floating-point SVD.
    pub fn right_singular_vectors(&self) -> DMatrix<f64> {
        let k = self.dim();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| self.log_scale[b].total_cmp(&self.log_scale[a]));
        let sorted = DMatrix::from_fn(k, k, |i, j| self.body[(order[i], j)]);
        let qr = sorted.transpose().qr();
        let q = qr.q();
        let r = qr.r();
        let top = self.log_scale[order[0]];
        let graded = DMatrix::from_fn(k, k, |i, j| {
            let w = if top.is_finite() {
                (self.log_scale[order[i]] - top).exp()
            } else {
                0.0
            };
            w * r[(j, i)]
        });
        let svd = graded.svd(false, true);
        let v_t = svd.v_t.expect("requested right vectors");
        let mut idx: Vec<usize> = (0..k).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let v = &q * v_t.transpose();
        DMatrix::from_fn(k, k, |i, j| v[(i, idx[j])])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn qr_reconstructs_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 5, 3);
        let mut q = a.clone();
        let mut r = DMatrix::zeros(3, 3);
        assert!(thin_qr_in_place(&mut q, &mut r));
        assert!(orthonormality_defect(&q) < 1e-14);
        assert!((&q * &r - &a).norm() < 1e-13);
        for i in 0..3 {
            assert!(r[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn qr_detects_rank_collapse() {
        let mut a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let mut r = DMatrix::zeros(2, 2);
        // Dependent columns leave a zero residual after projection.
        let ok = thin_qr_in_place(&mut a, &mut r);
        assert!(!ok || r[(1, 1)] < 1e-15);
    }

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(4, 0), vec![Vec::<usize>::new()]);
        assert_eq!(binomial(6, 3), 20);
        assert!(combinations(2, 3).is_empty());
    }

    #[test]
    fn scaled_product_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut acc = ScaledTriangular::identity(3);
        let mut direct = DMatrix::<f64>::identity(3, 3);
        for _ in 0..20 {
            let m = random_matrix(&mut rng, 3, 3) * 2.0;
            acc.left_mul(&m);
            direct = &m * direct;
        }
        let rebuilt = acc.to_matrix();
        assert!((&rebuilt - &direct).norm() / direct.norm() < 1e-12);
    }

    #[test]
    fn scaled_log_singular_values_match_svd() {
        // Short product: a direct SVD stays accurate in the smallest value.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut acc = ScaledTriangular::identity(3);
        let mut direct = DMatrix::<f64>::identity(3, 3);
        for _ in 0..5 {
            let m = random_matrix(&mut rng, 3, 3);
            acc.left_mul(&m);
            direct = &m * direct;
        }
        let mut logs: Vec<f64> = direct.singular_values().iter().map(|s| s.ln()).collect();
        logs.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in acc.log_singular_values().iter().zip(&logs) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn graded_singular_vectors_match_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut acc = ScaledTriangular::identity(3);
        let mut direct = DMatrix::<f64>::identity(3, 3);
        for _ in 0..8 {
            let m = random_matrix(&mut rng, 3, 3);
            acc.left_mul(&m);
            direct = &m * direct;
        }
        let v = acc.right_singular_vectors();
        let svd = direct.clone().svd(false, true);
        let vt = svd.v_t.unwrap();
        let mut idx: Vec<usize> = (0..3).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        for (col, &j) in idx.iter().enumerate() {
            let expected = vt.row(j).transpose();
            let got = v.column(col);
            assert!((got.dot(&expected).abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn principal_angle_of_axes() {
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let e2 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!((max_principal_angle(&e1, &e2) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(max_principal_angle(&e1, &e1) < 1e-12);
        let plane = DMatrix::identity(2, 2);
        assert!(max_principal_angle(&e2, &plane) < 1e-7);
    }

    #[test]
    fn gram_volume_of_diagonal() {
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let (v, _) = half_log_gram_det(&b).unwrap();
        assert!((v - 6f64.ln()).abs() < 1e-14);
    }
}
