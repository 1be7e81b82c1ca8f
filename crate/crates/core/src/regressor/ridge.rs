//! Weighted ridge regression from sparse binary features to shape updates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Global linear map `ΔS = W Φ`, stored transposed: row `j` holds the
/// `2L`-vector contributed by active feature `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalLinearStage {
    pub feature_dim: usize,
    pub output_dim: usize,
    pub mu: f64,
    pub weights: Vec<f64>,
}

impl GlobalLinearStage {
    pub fn zeros(feature_dim: usize, output_dim: usize) -> Self {
        GlobalLinearStage { feature_dim, output_dim, mu: 0.0, weights: vec![0.0; feature_dim * output_dim] }
    }

    /// Entry `W[o][j]`.
    pub fn weight(&self, o: usize, j: usize) -> f64 {
        self.weights[j * self.output_dim + o]
    }

    pub fn feature_row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.output_dim..(j + 1) * self.output_dim]
    }

    /// `W Φ` for a sparse binary `Φ` given by its active indices, summed in index order.
    pub fn apply(&self, active: &[u32]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim];
        for &j in active {
            for (o, w) in out.iter_mut().zip(self.feature_row(j as usize)) {
                *o += w;
            }
        }
        out
    }

    /// `Σ v_i ||ΔS_i − W Φ_i||² + μ ||W||²`.
    pub fn objective(&self, phi: &[Vec<u32>], targets: &[Vec<f64>], survives: &[bool]) -> f64 {
        let fit: f64 = phi
            .iter()
            .zip(targets)
            .zip(survives)
            .filter(|(_, &v)| v)
            .map(|((p, t), _)| self.apply(p).iter().zip(t).map(|(a, b)| (b - a) * (b - a)).sum::<f64>())
            .sum();
        fit + self.mu * self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Solves `(Φ V Φᵀ + μI) Wᵀ = Φ V ΔSᵀ` by Cholesky factorization, in kernel
/// form when there are fewer surviving rows than features and `μ > 0`.
///
/// Rows with `survives == false` contribute nothing, so the result equals the
/// solve on the survivor subset exactly. The Gram matrix holds integer
/// co-occurrence counts, which are exact in any accumulation order.
pub fn train_global_regression(
    phi: &[Vec<u32>],
    targets: &[Vec<f64>],
    survives: &[bool],
    feature_dim: usize,
    mu: f64,
) -> Result<GlobalLinearStage> {
    if phi.len() != targets.len() || phi.len() != survives.len() {
        return Err(Error::DimensionMismatch { expected: phi.len(), found: targets.len().min(survives.len()) });
    }
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::config("ridge weight mu must be finite and nonnegative"));
    }
    let rows: Vec<usize> = (0..phi.len()).filter(|&i| survives[i]).collect();
    if rows.is_empty() {
        return Err(Error::NoSurvivors);
    }
    let output_dim = targets[rows[0]].len();
    for &i in &rows {
        if targets[i].len() != output_dim {
            return Err(Error::DimensionMismatch { expected: output_dim, found: targets[i].len() });
        }
        if let Some(&j) = phi[i].iter().find(|&&j| j as usize >= feature_dim) {
            return Err(Error::DimensionMismatch { expected: feature_dim, found: j as usize + 1 });
        }
        if phi[i].windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("active feature indices must be strictly increasing"));
        }
    }

    let weights = if mu > 0.0 && rows.len() < feature_dim {
        solve_dual(phi, targets, &rows, feature_dim, output_dim, mu)?
    } else {
        solve_primal(phi, targets, &rows, feature_dim, output_dim, mu)?
    };
    Ok(GlobalLinearStage { feature_dim, output_dim, mu, weights })
}

fn solve_primal(
    phi: &[Vec<u32>],
    targets: &[Vec<f64>],
    rows: &[usize],
    d: usize,
    output_dim: usize,
    mu: f64,
) -> Result<Vec<f64>> {
    let mut gram = vec![0.0f64; d * d];
    let mut rhs = vec![0.0f64; d * output_dim];
    for &i in rows {
        let p = &phi[i];
        for &a in p {
            let a = a as usize;
            for &b in p {
                let b = b as usize;
                if b <= a {
                    gram[a * d + b] += 1.0;
                }
            }
            for (r, t) in rhs[a * output_dim..(a + 1) * output_dim].iter_mut().zip(&targets[i]) {
                *r += t;
            }
        }
    }
    for j in 0..d {
        gram[j * d + j] += mu;
    }
    cholesky_in_place(&mut gram, d)?;
    solve_factored(&gram, d, &mut rhs, output_dim);
    Ok(rhs)
}

/// Kernel form `Wᵀ = Φᵀ (Φ Φᵀ + μI)⁻¹ ΔS`, the same minimizer when there are fewer rows than features.
fn solve_dual(
    phi: &[Vec<u32>],
    targets: &[Vec<f64>],
    rows: &[usize],
    d: usize,
    output_dim: usize,
    mu: f64,
) -> Result<Vec<f64>> {
    let n = rows.len();
    // |Φ_i ∩ Φ_k| accumulated feature by feature; integer counts are exact
    let mut holders: Vec<Vec<u32>> = vec![Vec::new(); d];
    for (r, &i) in rows.iter().enumerate() {
        for &j in &phi[i] {
            holders[j as usize].push(r as u32);
        }
    }
    let mut counts = vec![0u32; n * n];
    for h in &holders {
        for (x, &a) in h.iter().enumerate() {
            let row = &mut counts[a as usize * n..];
            for &b in &h[..=x] {
                row[b as usize] += 1;
            }
        }
    }
    let mut kernel: Vec<f64> = counts.into_iter().map(f64::from).collect();
    for r in 0..n {
        kernel[r * n + r] += mu;
    }
    let mut alpha = vec![0.0f64; n * output_dim];
    for (r, &i) in rows.iter().enumerate() {
        alpha[r * output_dim..(r + 1) * output_dim].copy_from_slice(&targets[i]);
    }
    cholesky_in_place(&mut kernel, n)?;
    solve_factored(&kernel, n, &mut alpha, output_dim);
    let mut weights = vec![0.0f64; d * output_dim];
    for (r, &i) in rows.iter().enumerate() {
        let a = &alpha[r * output_dim..(r + 1) * output_dim];
        for &j in &phi[i] {
            for (w, v) in weights[j as usize * output_dim..(j as usize + 1) * output_dim].iter_mut().zip(a) {
                *w += v;
            }
        }
    }
    Ok(weights)
}

/// Dot product with a fixed four-way accumulation order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

const BLOCK: usize = 64;
const DEPTH: usize = 512;

/// Overwrites the lower triangle of the row-major SPD matrix `a` with its
/// Cholesky factor `L` (`a = L Lᵀ`). The upper triangle is ignored.
///
/// Left-looking by column blocks: each block of columns is first updated
/// with the finished columns to its left, then factored. Every entry is
/// accumulated in a fixed order, so the result does not depend on the
/// number of threads.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<()> {
    let mut panel = Vec::new();
    let mut diag = Vec::new();
    for jb in (0..n).step_by(BLOCK) {
        let je = (jb + BLOCK).min(n);
        let w = je - jb;
        panel.clear();
        for j in jb..je {
            panel.extend_from_slice(&a[j * n..j * n + jb]);
        }
        a[jb * n..].par_chunks_mut(BLOCK * n).enumerate().for_each(|(c, rows)| {
            subtract_products(rows, n, jb + c * BLOCK, &panel, jb, w);
        });

        for j in jb..je {
            let (head, tail) = a.split_at_mut((j + 1) * n);
            let row_j = &mut head[j * n..];
            let s = row_j[j] - dot(&row_j[jb..j], &row_j[jb..j]);
            if !(s > row_j[j].abs() * 1e-12) {
                return Err(Error::SingularSystem);
            }
            let pivot = s.sqrt();
            row_j[j] = pivot;
            let row_j = &head[j * n + jb..j * n + j];
            for row_i in tail[..(je - j - 1) * n].chunks_mut(n) {
                row_i[j] = (row_i[j] - dot(&row_i[jb..j], row_j)) / pivot;
            }
        }

        diag.clear();
        for j in jb..je {
            diag.extend_from_slice(&a[j * n + jb..j * n + je]);
        }
        a[je * n..].par_chunks_mut(n).for_each(|row_i| {
            for (c, j) in (jb..je).enumerate() {
                let l_j = &diag[c * w..c * w + c];
                row_i[j] = (row_i[j] - dot(&row_i[jb..j], l_j)) / diag[c * w + c];
            }
        });
    }
    Ok(())
}

/// `a[i][jb + c] -= Σ_{k < jb} a[i][k] · panel[c][k]` for every row `i` of `rows`
/// (the first being `first`) and `jb + c <= i`.
fn subtract_products(rows: &mut [f64], n: usize, first: usize, panel: &[f64], jb: usize, w: usize) {
    if jb == 0 {
        return;
    }
    let h = rows.len() / n;
    let mut acc = vec![0.0f64; h * w];
    for k0 in (0..jb).step_by(DEPTH) {
        let k1 = (k0 + DEPTH).min(jb);
        let mut r = 0;
        while r < h {
            let rh = (h - r).min(4);
            let mut c = 0;
            while c < w {
                let cw = (w - c).min(4);
                if rh == 4 && cw == 4 {
                    let a_rows: [&[f64]; 4] = std::array::from_fn(|x| &rows[(r + x) * n + k0..(r + x) * n + k1]);
                    let b_rows: [&[f64]; 4] = std::array::from_fn(|y| &panel[(c + y) * jb + k0..(c + y) * jb + k1]);
                    let s = kernel4x4(a_rows, b_rows);
                    for x in 0..4 {
                        for y in 0..4 {
                            acc[(r + x) * w + c + y] += s[x][y];
                        }
                    }
                } else {
                    for x in r..r + rh {
                        for y in c..c + cw {
                            let a_row = &rows[x * n + k0..x * n + k1];
                            acc[x * w + y] += dot(a_row, &panel[y * jb + k0..y * jb + k1]);
                        }
                    }
                }
                c += 4;
            }
            r += 4;
        }
    }
    for x in 0..h {
        let i = first + x;
        for y in 0..w.min((i + 1).saturating_sub(jb)) {
            rows[x * n + jb + y] -= acc[x * w + y];
        }
    }
}

/// Sixteen dot products of four rows against four rows of equal length.
#[inline]
fn kernel4x4(a: [&[f64]; 4], b: [&[f64]; 4]) -> [[f64; 4]; 4] {
    let len = a[0].len();
    let (a0, a1, a2, a3) = (&a[0][..len], &a[1][..len], &a[2][..len], &a[3][..len]);
    let (b0, b1, b2, b3) = (&b[0][..len], &b[1][..len], &b[2][..len], &b[3][..len]);
    let mut s = [[0.0f64; 4]; 4];
    for k in 0..len {
        let av = [a0[k], a1[k], a2[k], a3[k]];
        let bv = [b0[k], b1[k], b2[k], b3[k]];
        for x in 0..4 {
            for y in 0..4 {
                s[x][y] += av[x] * bv[y];
            }
        }
    }
    s
}

/// Solves `L Lᵀ X = B` in place for a row-major `n × m` right-hand side.
pub fn solve_factored(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for i in 0..n {
        let (done, rest) = b.split_at_mut(i * m);
        let row = &mut rest[..m];
        for k in 0..i {
            let c = l[i * n + k];
            if c != 0.0 {
                for (r, y) in row.iter_mut().zip(&done[k * m..(k + 1) * m]) {
                    *r -= c * y;
                }
            }
        }
        let inv = l[i * n + i];
        row.iter_mut().for_each(|r| *r /= inv);
    }
    for i in (0..n).rev() {
        let (head, rest) = b.split_at_mut((i + 1) * m);
        let row = &mut head[i * m..];
        for k in i + 1..n {
            let c = l[k * n + i];
            if c != 0.0 {
                for (r, y) in row.iter_mut().zip(&rest[(k - i - 1) * m..(k - i) * m]) {
                    *r -= c * y;
                }
            }
        }
        let inv = l[i * n + i];
        row.iter_mut().for_each(|r| *r /= inv);
    }
}
