//! Projection of raw kernels onto the equivariant subspace.
//!
//! Kernel entry `(a, b)` of a `k x k` kernel (row `a`, column `b`, centre
//! `c = (k-1)/2`) multiplies the input pixel at offset `v = (b - c, c - a)`
//! in the `x`-right / `y`-up frame of [`crate::group`]. For the
//! cross-correlation `out(x) = sum_v K(v) F(x + v)` and the action
//! `(gF)(x) = rho(g) F(g^-1 x)`, a layer is equivariant iff
//!
//! ```text
//! K(g v) = rho_out(g) K(v) rho_in(g)^-1      for all g, v,
//! ```
//!
//! and `P K (v) = 1/n sum_g rho_out(g)^-1 K(g v) rho_in(g)` is the
//! orthogonal projector onto those kernels. For `C_n` with `n | 8` the
//! spatial part `v -> g v` is a permutation of the kernel grid (eighth
//! turns act by shifting square rings, see [`rotated_taps`]). Other orders
//! read `K(g v)` bilinearly (zero outside the grid), which makes the
//! projection approximate.

use crate::group::{block_matrix, BlockKind, FieldType, GroupElement, Rotation};
use crate::tensor::{SparseMatrix, Tensor};
use crate::{Error, Result};

fn check_fields(in_field: &FieldType, out_field: &FieldType, k: usize) -> Result<usize> {
    if k % 2 == 0 {
        return Err(Error::EvenKernel(k));
    }
    if in_field.order() != out_field.order() {
        return Err(Error::GroupOrderMismatch {
            expected: out_field.order(),
            actual: in_field.order(),
        });
    }
    Ok(in_field.order())
}

/// Bilinear taps `(a, b, weight)` of the grid point nearest to offset `(x, y)`.
fn taps(x: f64, y: f64, k: usize) -> Vec<(usize, usize, f64)> {
    let c = (k - 1) as f64 / 2.0;
    let (fa, fb) = (c - y, x + c);
    let (a0, b0) = (fa.floor(), fb.floor());
    let (da, db) = (fa - a0, fb - b0);
    let mut out = Vec::with_capacity(4);
    for (a, b, w) in [
        (a0, b0, (1.0 - da) * (1.0 - db)),
        (a0, b0 + 1.0, (1.0 - da) * db),
        (a0 + 1.0, b0, da * (1.0 - db)),
        (a0 + 1.0, b0 + 1.0, da * db),
    ] {
        if w.abs() < 1e-12 || a < 0.0 || b < 0.0 || a > (k - 1) as f64 || b > (k - 1) as f64 {
            continue;
        }
        out.push((a as usize, b as usize, w));
    }
    out
}

/// Position of `(x, y)` along its square ring of Chebyshev radius `r`,
/// counter-clockwise from `(r, 0)`; the ring has `8 r` points.
fn ring_index(x: i64, y: i64, r: i64) -> i64 {
    if x == r && y >= 0 {
        y
    } else if y == r {
        2 * r - x
    } else if x == -r {
        4 * r - y
    } else if y == -r {
        x + 6 * r
    } else {
        y + 8 * r
    }
}

fn ring_point(t: i64, r: i64) -> (i64, i64) {
    match t {
        t if t <= r => (r, t),
        t if t <= 3 * r => (2 * r - t, r),
        t if t <= 5 * r => (-r, 4 * r - t),
        t if t <= 7 * r => (t - 6 * r, -r),
        t => (r, t - 8 * r),
    }
}

/// Spatial position `(a, b)` rotated by `rot`, as interpolation taps.
///
/// Quarter turns land on grid points. Eighth turns shift every square ring
/// of the kernel by `r` of its `8 r` points, the discrete 45 degree rotation
/// of a square grid (it agrees with the exact quarter turns when applied
/// twice). Other angles are read bilinearly.
fn rotated_taps(a: usize, b: usize, k: usize, rot: &Rotation) -> Vec<(usize, usize, f64)> {
    let c = (k - 1) as f64 / 2.0;
    let (x, y) = rot.apply(b as f64 - c, c - a as f64);
    if rot.as_quarter_turns().is_some() {
        let (ra, rb) = ((c - y).round() as usize, (x + c).round() as usize);
        return vec![(ra, rb, 1.0)];
    }
    let eighths = rot.angle() / std::f64::consts::FRAC_PI_4;
    if (eighths - eighths.round()).abs() < 1e-12 {
        let ci = c as i64;
        let (px, py) = (b as i64 - ci, ci - a as i64);
        let r = px.abs().max(py.abs());
        if r == 0 {
            return vec![(a, b, 1.0)];
        }
        let q = (eighths.round() as i64).rem_euclid(8);
        let (qx, qy) = ring_point((ring_index(px, py, r) + q * r).rem_euclid(8 * r), r);
        return vec![((ci - qy) as usize, (qx + ci) as usize, 1.0)];
    }
    taps(x, y, k)
}

/// Sparse nonzeros `(row, col, value)` of a block matrix for `g`.
fn block_entries(kind: BlockKind, g: &GroupElement) -> Vec<(usize, usize, f64)> {
    let d = kind.dim(g.order());
    block_matrix(kind, g)
        .into_iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > 1e-15)
        .map(|(i, v)| (i / d, i % d, v))
        .collect()
}

/// Linear map `K -> T_g K` with `(T_g K)(v) = rho_out(g)^-1 K(g v) rho_in(g)`
/// on kernels flattened as `(out, in, k, k)`, as triplets scaled by `scale`.
fn transform_triplets(
    in_field: &FieldType,
    out_field: &FieldType,
    k: usize,
    g: &GroupElement,
    scale: f64,
    triplets: &mut Vec<(usize, usize, f64)>,
) {
    let n_in = in_field.total_dim();
    let idx = |o: usize, i: usize, a: usize, b: usize| ((o * n_in + i) * k + a) * k + b;
    let rot = g.rotation();
    let ginv = g.inverse();
    let spatial: Vec<Vec<(usize, usize, f64)>> = (0..k * k)
        .map(|p| rotated_taps(p / k, p % k, k, &rot))
        .collect();
    for (o_off, o_kind) in out_field.block_offsets() {
        // rho_out(g)^-1 [r, s]
        let out_entries = block_entries(o_kind, &ginv);
        for (i_off, i_kind) in in_field.block_offsets() {
            // rho_in(g) [s', t]
            let in_entries = block_entries(i_kind, g);
            for &(r, s, vo) in &out_entries {
                for &(s2, t, vi) in &in_entries {
                    let (o, o_src) = (o_off + r, o_off + s);
                    let (i, i_src) = (i_off + t, i_off + s2);
                    for (p, sp) in spatial.iter().enumerate() {
                        let (a, b) = (p / k, p % k);
                        for &(ra, rb, w) in sp {
                            triplets.push((idx(o, i, a, b), idx(o_src, i_src, ra, rb), scale * vo * vi * w));
                        }
                    }
                }
            }
        }
    }
}

/// Highest angular frequency kept on each kernel ring when eighth turns act
/// by ring shifts.
pub const RING_MAX_FREQUENCY: i64 = 2;

/// Orthogonal projector of one `k x k` kernel onto ring functions with
/// angular frequency `|m| <= RING_MAX_FREQUENCY`, as `(row, col, value)`.
///
/// Ring points sit at alternating radii (1 and sqrt 2 on the innermost
/// ring), which couples frequency `m` to `m +- 4` in the kernel's moments;
/// removing the high band makes the first moment rotate correctly under the
/// ring-shift eighth turn. The map is a Fourier multiplier on every ring, so
/// it commutes with the ring shifts and with the quarter turns.
fn ring_bandlimit(k: usize) -> Vec<(usize, usize, f64)> {
    let c = ((k - 1) / 2) as i64;
    let mut rings: Vec<Vec<(usize, i64)>> = vec![Vec::new(); c as usize + 1];
    for a in 0..k {
        for b in 0..k {
            let (x, y) = (b as i64 - c, c - a as i64);
            let r = x.abs().max(y.abs());
            let t = if r == 0 { 0 } else { ring_index(x, y, r) };
            rings[r as usize].push((a * k + b, t));
        }
    }
    let mut out = Vec::new();
    for ring in &rings {
        let len = ring.len() as i64;
        for &(p, t) in ring {
            for &(q, u) in ring {
                let v: f64 = (-RING_MAX_FREQUENCY..=RING_MAX_FREQUENCY)
                    .filter(|m| 2 * m.abs() < len || (len == 1 && *m == 0))
                    .map(|m| (2.0 * std::f64::consts::PI * (m * (t - u)) as f64 / len as f64).cos())
                    .sum::<f64>()
                    / len as f64;
                out.push((p, q, v));
            }
        }
    }
    out
}

/// The group-averaging projector as a sparse matrix acting on flattened
/// `(out_dim, in_dim, k, k)` kernels. For groups containing the eighth turn
/// it also band-limits every kernel ring (see [`RING_MAX_FREQUENCY`]).
pub fn kernel_projector(in_field: &FieldType, out_field: &FieldType, k: usize) -> Result<SparseMatrix> {
    let n = check_fields(in_field, out_field, k)?;
    let size = out_field.total_dim() * in_field.total_dim() * k * k;
    let mut triplets = Vec::new();
    for g in GroupElement::elements(n) {
        transform_triplets(in_field, out_field, k, &g, 1.0 / n as f64, &mut triplets);
    }
    let average = SparseMatrix::from_triplets(size, size, triplets, 1e-14);
    if n % 8 != 0 || k == 1 {
        return Ok(average);
    }
    let band = ring_bandlimit(k);
    let pairs = out_field.total_dim() * in_field.total_dim();
    let limiter = SparseMatrix::from_triplets(
        size,
        size,
        (0..pairs).flat_map(|pair| band.iter().map(move |&(p, q, v)| (pair * k * k + p, pair * k * k + q, v))),
        1e-14,
    );
    Ok(average.matmul(&limiter))
}

/// Projects a raw `(out_dim, in_dim, k, k)` kernel onto the equivariant
/// subspace.
pub fn project_kernel(raw: &Tensor<f64>, in_field: &FieldType, out_field: &FieldType) -> Result<Tensor<f64>> {
    let shape = raw.shape();
    if shape.len() != 4 || shape[2] != shape[3] || shape[0] != out_field.total_dim() || shape[1] != in_field.total_dim() {
        return Err(Error::shape(
            "project_kernel",
            &[shape, &[out_field.total_dim(), in_field.total_dim()]],
        ));
    }
    let p = kernel_projector(in_field, out_field, shape[2])?;
    Tensor::new(shape.to_vec(), p.apply(raw.data()))
}

/// Largest deviation from `K(g v) = rho_out(g) K(v) rho_in(g)^-1` over all
/// `g` whose rotation permutes the grid.
pub fn kernel_constraint_residual(kernel: &Tensor<f64>, in_field: &FieldType, out_field: &FieldType) -> Result<f64> {
    let k = kernel.shape()[2];
    let n = check_fields(in_field, out_field, k)?;
    let mut worst = 0.0f64;
    for g in GroupElement::elements(n) {
        if !permutes_grid(&g) && k > 1 {
            continue;
        }
        let mut triplets = Vec::new();
        transform_triplets(in_field, out_field, k, &g, 1.0, &mut triplets);
        let size = kernel.numel();
        let t = SparseMatrix::from_triplets(size, size, triplets, 0.0);
        let moved = t.apply(kernel.data());
        for (a, b) in moved.iter().zip(kernel.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn permutes_grid(g: &GroupElement) -> bool {
    (g.index() * 8) % g.order() == 0
}

/// Dimension of the space of equivariant `k x k` kernels between the two
/// field types: the nullity of `I - T_r` for the generator `r` of `C_n`,
/// found by Gaussian elimination with partial pivoting.
///
/// Supported whenever the rotations permute the kernel grid, i.e. `k == 1`
/// or `n` divides 8.
pub fn basis_dimension(in_field: &FieldType, out_field: &FieldType, k: usize, n: usize) -> Result<usize> {
    if in_field.order() != n {
        return Err(Error::GroupOrderMismatch {
            expected: n,
            actual: in_field.order(),
        });
    }
    check_fields(in_field, out_field, k)?;
    if k > 1 && 8 % n != 0 {
        return Err(Error::Unsupported(format!(
            "exact kernel basis for C_{n} needs k = 1 (got k = {k})"
        )));
    }
    let size = out_field.total_dim() * in_field.total_dim() * k * k;
    let mut triplets = Vec::new();
    transform_triplets(in_field, out_field, k, &GroupElement::generator(n), -1.0, &mut triplets);
    triplets.extend((0..size).map(|i| (i, i, 1.0)));
    let constraint = SparseMatrix::from_triplets(size, size, triplets, 1e-14);
    Ok(size - rank(&constraint, 1e-9))
}

/// Row-echelon rank of a sparse matrix (dense elimination).
fn rank(m: &SparseMatrix, tol: f64) -> usize {
    let (rows, cols) = (m.rows(), m.cols());
    let mut a = vec![0.0; rows * cols];
    for r in 0..rows {
        for (c, v) in m.row(r) {
            a[r * cols + c] = v;
        }
    }
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let (pivot, best) = (rank..rows)
            .map(|r| (r, a[r * cols + col].abs()))
            .fold((rank, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best <= tol {
            continue;
        }
        if pivot != rank {
            for c in 0..cols {
                a.swap(pivot * cols + c, rank * cols + c);
            }
        }
        let p = a[rank * cols + col];
        for r in rank + 1..rows {
            let f = a[r * cols + col] / p;
            if f == 0.0 {
                continue;
            }
            for c in col..cols {
                a[r * cols + c] -= f * a[rank * cols + c];
            }
        }
        rank += 1;
    }
    rank
}
