//! Blocked LDL' factorization without pivoting.
//!
//! Specialized for the quasi-definite saddle systems produced by the
//! interior-point loop: every diagonal entry has a known expected sign,
//! and pivots are clamped toward that sign at a small floor instead of
//! being permuted. Panels are factored unblocked; the cross-panel update
//! runs as one matrix product per panel so the bulk of the work is done
//! at gemm speed.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const PANEL: usize = 64;

/// Unit lower factor packed in the strict lower triangle; pivots on the
/// diagonal. Only the lower triangle of the input is ever read.
pub struct LdlFactor {
    w: DMatrix<f64>,
}

pub struct FactorStats {
    /// Pivots that had to be moved to the floor to keep their sign.
    pub clamped: usize,
}

/// Factors `K = L D L'` in the given elimination order, forcing pivot
/// `j` to be at least `floor` when `signs[j] > 0` and at most `-floor`
/// otherwise.
pub fn factor_signed(
    k: &DMatrix<f64>,
    signs: &[i8],
    floor: f64,
) -> Result<(LdlFactor, FactorStats)> {
    let n = k.nrows();
    assert_eq!(k.ncols(), n, "matrix must be square");
    assert_eq!(signs.len(), n, "one expected sign per pivot");
    let mut w = k.clone();
    let mut clamped = 0usize;

    let mut p0 = 0;
    while p0 < n {
        let p1 = (p0 + PANEL).min(n);
        let pb = p1 - p0;

        if p0 > 0 {
            // Trailing update from all previous panels in one product:
            // W[p0.., p0..p1] -= L[p0.., 0..p0] * (D L[p0..p1, 0..p0]').
            let mut m_panel = DMatrix::zeros(p0, pb);
            for c in 0..p0 {
                let d = w[(c, c)];
                for jj in 0..pb {
                    m_panel[(c, jj)] = w[(p0 + jj, c)] * d;
                }
            }
            let (prev, mut cur) = w.columns_range_pair_mut(0..p0, p0..p1);
            let lv = prev.rows_range(p0..n);
            let mut tv = cur.rows_range_mut(p0..n);
            tv.gemm(-1.0, &lv, &m_panel, 1.0);
        }

        let s = w.as_mut_slice();
        for j in p0..p1 {
            let raw = s[j * n + j];
            if !raw.is_finite() {
                return Err(Error::SolverFailure(
                    "factorization broke down: non-finite pivot".into(),
                ));
            }
            let d = if signs[j] > 0 {
                if raw < floor {
                    clamped += 1;
                    floor
                } else {
                    raw
                }
            } else if raw > -floor {
                clamped += 1;
                -floor
            } else {
                raw
            };
            s[j * n + j] = d;
            let inv = 1.0 / d;
            for i in j + 1..n {
                s[j * n + i] *= inv;
            }
            for col in j + 1..p1 {
                let coef = s[j * n + col] * d;
                if coef != 0.0 {
                    let (left, right) = s.split_at_mut(col * n);
                    let colj = &left[j * n..j * n + n];
                    let colk = &mut right[col..n];
                    colk.iter_mut().zip(&colj[col..]).for_each(|(a, &b)| *a -= coef * b);
                }
            }
        }
        p0 = p1;
    }

    Ok((LdlFactor { w }, FactorStats { clamped }))
}

impl LdlFactor {
    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn solve_in_place(&self, x: &mut DVector<f64>) {
        let n = self.dim();
        assert_eq!(x.len(), n);
        let s = self.w.as_slice();
        let xs = x.as_mut_slice();
        // Forward: L v = b.
        for j in 0..n {
            let xj = xs[j];
            if xj != 0.0 {
                let colj = &s[j * n..(j + 1) * n];
                let (_, tail) = xs.split_at_mut(j + 1);
                tail.iter_mut().zip(&colj[j + 1..]).for_each(|(a, &b)| *a -= xj * b);
            }
        }
        // Diagonal: D w = v.
        for j in 0..n {
            xs[j] /= s[j * n + j];
        }
        // Backward: L' x = w.
        for j in (0..n).rev() {
            let colj = &s[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (a, &b) in xs[j + 1..].iter().zip(&colj[j + 1..]) {
                acc += a * b;
            }
            xs[j] -= acc;
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }
}

/// Unpivoted LDL' probe for a direction of negative curvature.
///
/// Returns `Some((curvature, direction))` with `direction' H direction =
/// curvature < 0` when the matrix is detectably not positive
/// semidefinite; pivots within the tolerance of zero are treated as zero
/// (semidefinite) and clamped so the factorization can continue.
pub fn negative_curvature_probe(h: &DMatrix<f64>) -> Option<(f64, DVector<f64>)> {
    let n = h.nrows();
    let scale = (0..n).map(|i| h[(i, i)].abs()).fold(0.0f64, f64::max);
    let tol = 1e-10 * (1.0 + scale);
    let mut w = h.clone();
    let s = w.as_mut_slice();
    for j in 0..n {
        let d = s[j * n + j];
        if !d.is_finite() || d < -tol {
            // Column j of the partial factor certifies the curvature:
            // solve L' dir = e_j on the leading (j+1)-block.
            let mut dir = DVector::zeros(n);
            dir[j] = 1.0;
            for i in (0..=j).rev() {
                let coli = &s[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for k in i + 1..=j {
                    acc += coli[k] * dir[k];
                }
                dir[i] -= acc;
            }
            let denom = dir.norm_squared();
            let curvature = if d.is_finite() { d / denom } else { f64::NEG_INFINITY };
            return Some((curvature, dir / denom.sqrt()));
        }
        let d = d.max(tol);
        s[j * n + j] = d;
        let inv = 1.0 / d;
        for i in j + 1..n {
            s[j * n + i] *= inv;
        }
        for col in j + 1..n {
            let coef = s[j * n + col] * d;
            if coef != 0.0 {
                let (left, right) = s.split_at_mut(col * n);
                let colj = &left[j * n..j * n + n];
                let colk = &mut right[col..n];
                colk.iter_mut().zip(&colj[col..]).for_each(|(a, &b)| *a -= coef * b);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_quasidefinite(n_pos: usize, n_neg: usize, seed: u64) -> (DMatrix<f64>, Vec<i8>) {
        let n = n_pos + n_neg;
        let mut rng = crate::scenario::stream_rng(seed, 0);
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut k = DMatrix::zeros(n, n);
        // Positive-definite block, negative-definite block, random coupling.
        let g = &b * b.transpose();
        for i in 0..n {
            for j in 0..n {
                let same_side = (i < n_pos) == (j < n_pos);
                if same_side {
                    let sgn = if i < n_pos { 1.0 } else { -1.0 };
                    k[(i, j)] = sgn * (g[(i, j)] + if i == j { 0.5 } else { 0.0 });
                } else {
                    k[(i, j)] = b[(i.min(j), i.max(j))];
                    k[(j, i)] = k[(i, j)];
                }
            }
        }
        let mut signs = vec![1i8; n_pos];
        signs.extend(std::iter::repeat(-1i8).take(n_neg));
        (k, signs)
    }

    #[test]
    fn factor_solve_round_trip() {
        for (np, nn, seed) in [(5, 0, 1), (0, 5, 2), (7, 6, 3), (130, 70, 4)] {
            let (k, signs) = random_quasidefinite(np, nn, seed);
            let (f, stats) = factor_signed(&k, &signs, 1e-12).unwrap();
            assert_eq!(stats.clamped, 0, "well-scaled quasidefinite needs no clamping");
            let mut rng = crate::scenario::stream_rng(seed, 1);
            let b = DVector::from_fn(np + nn, |_, _| rng.gen_range(-1.0..1.0));
            let x = f.solve(&b);
            let r = &k * &x - &b;
            assert!(
                r.amax() <= 1e-8 * (1.0 + b.amax()),
                "residual {} too large",
                r.amax()
            );
        }
    }

    #[test]
    fn clamping_reported_for_singular_block() {
        let mut k = DMatrix::zeros(3, 3);
        k[(2, 2)] = -1.0;
        k[(0, 1)] = 1.0;
        k[(1, 0)] = 1.0;
        // Leading 2x2 block is singular with zero diagonal.
        let (f, stats) = factor_signed(&k, &[1, 1, -1], 1e-10).unwrap();
        assert!(stats.clamped >= 1);
        let _ = f.solve(&DVector::from_vec(vec![1.0, 1.0, 1.0]));
    }

    #[test]
    fn probe_accepts_psd_and_rejects_indefinite() {
        let mut rng = crate::scenario::stream_rng(9, 0);
        let b = DMatrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
        let psd = &b * b.transpose(); // rank 4, singular PSD
        assert!(negative_curvature_probe(&psd).is_none());

        let mut indef = psd.clone();
        indef[(5, 5)] -= 10.0;
        let (curv, dir) = negative_curvature_probe(&indef).expect("indefinite");
        assert!(curv < 0.0);
        let q = (dir.transpose() * &indef * &dir)[(0, 0)];
        assert!(q < 0.0, "witness direction must have negative curvature, got {q}");
        assert_abs_diff_eq!(q, curv, epsilon = 1e-8 * (1.0 + curv.abs()));
    }

    #[test]
    fn zero_matrix_probe_is_semidefinite() {
        let z = DMatrix::zeros(8, 8);
        assert!(negative_curvature_probe(&z).is_none());
    }
}
