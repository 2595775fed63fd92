//! Dense matrix helpers shared by every other module.
//!
//! Matrices are `nalgebra::DMatrix<f64>`; the functions here add the
//! symmetric-eigenvalue, definiteness, pseudoinverse and block-assembly
//! conventions the LMI code relies on.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative asymmetry accepted before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Relative rank cutoff used by [`pinv`].
pub const PINV_RCOND: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("block ({row}, {col}): {reason}")]
    BlockLayout { row: usize, col: usize, reason: String },
    #[error("empty block layout")]
    EmptyLayout,
}

/// Extreme eigenvalues of a symmetric matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymEigReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub tolerance_used: f64,
}

fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Checks shape, finiteness and symmetry, returning `(M + Mᵀ) / 2`.
pub fn symmetrized(m: &Mat) -> Result<Mat, NumericsError> {
    if m.nrows() != m.ncols() {
        return Err(NumericsError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    let scale = max_abs(m).max(1.0);
    let asym = max_abs(&(m - m.transpose())) / scale;
    if asym > SYMMETRY_TOL {
        return Err(NumericsError::NotSymmetric { asymmetry: asym });
    }
    Ok((m + m.transpose()) * 0.5)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eig_bounds(m: &Mat) -> Result<SymEigReport, NumericsError> {
    let sym = symmetrized(m)?;
    if sym.nrows() == 0 {
        return Ok(SymEigReport {
            lambda_min: 0.0,
            lambda_max: 0.0,
            tolerance_used: SYMMETRY_TOL,
        });
    }
    let eig = sym.symmetric_eigenvalues();
    let lambda_min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda_max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SymEigReport {
        lambda_min,
        lambda_max,
        tolerance_used: SYMMETRY_TOL,
    })
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max(m: &Mat) -> Result<f64, NumericsError> {
    Ok(sym_eig_bounds(m)?.lambda_max)
}

/// `true` iff `λ_max(M) ≤ tol`.
pub fn is_nsd(m: &Mat, tol: f64) -> Result<bool, NumericsError> {
    Ok(sym_eig_bounds(m)?.lambda_max <= tol)
}

/// Cholesky factor of a symmetric positive definite matrix.
///
/// `Ok(None)` is the ordinary "not positive definite" answer; errors are
/// reserved for malformed input.
pub fn cholesky_pd(m: &Mat) -> Result<Option<Mat>, NumericsError> {
    let sym = symmetrized(m)?;
    let n = sym.nrows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = sym[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Ok(None);
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = sym[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(Some(l))
}

/// Moore–Penrose pseudoinverse from a complete orthogonal decomposition
/// `A = Q₁ Uᵀ Zᵀ`, with the rank read off the column-pivoted QR diagonal.
pub fn pinv(m: &Mat) -> Mat {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Mat::zeros(c, r);
    }
    // nalgebra's SVD occasionally returns inconsistent factors for
    // rank-deficient input, so avoid it here
    let qr = m.clone().col_piv_qr();
    let rf = qr.r();
    let lead = rf[(0, 0)].abs();
    let rank = (0..r.min(c)).take_while(|&i| rf[(i, i)].abs() > PINV_RCOND * lead && rf[(i, i)] != 0.0).count();
    if rank == 0 {
        return Mat::zeros(c, r);
    }
    let q1 = qr.q().columns(0, rank).into_owned();
    let mut top = rf.rows(0, rank).into_owned();
    qr.p().inv_permute_columns(&mut top);
    let second = top.transpose().qr();
    let z = second.q();
    let u = second.r();
    let x = u
        .transpose()
        .solve_lower_triangular(&q1.transpose())
        .expect("leading diagonal is nonzero");
    z * x
}

/// One cell of a block layout.
#[derive(Debug, Clone)]
pub enum Block {
    Dense(Mat),
    /// Zero block; its shape is inferred from the rest of the row and column.
    Zero,
    /// Identity block (square, size inferred).
    Identity,
    /// The transpose of the mirrored cell `(col, row)`.
    Mirror,
}

impl From<Mat> for Block {
    fn from(m: Mat) -> Self {
        Block::Dense(m)
    }
}

fn mirror_shape(layout: &[Vec<Block>], row: usize, col: usize) -> Option<(usize, usize)> {
    match layout.get(col).and_then(|r| r.get(row)) {
        Some(Block::Dense(m)) => Some((m.ncols(), m.nrows())),
        _ => None,
    }
}

/// Resolves row heights and column widths of a block grid.
pub(crate) fn resolve_layout<T>(
    layout: &[Vec<T>],
    shape_of: impl Fn(usize, usize) -> Option<(usize, usize)>,
    square_hint: impl Fn(usize, usize) -> bool,
) -> Result<(Vec<usize>, Vec<usize>), NumericsError> {
    let nr = layout.len();
    if nr == 0 {
        return Err(NumericsError::EmptyLayout);
    }
    let nc = layout[0].len();
    for (i, row) in layout.iter().enumerate() {
        if row.len() != nc {
            return Err(NumericsError::BlockLayout {
                row: i,
                col: row.len().min(nc),
                reason: format!("row has {} cells, expected {nc}", row.len()),
            });
        }
    }
    let mut heights: Vec<Option<usize>> = vec![None; nr];
    let mut widths: Vec<Option<usize>> = vec![None; nc];
    for i in 0..nr {
        for j in 0..nc {
            if let Some((h, w)) = shape_of(i, j) {
                for (slot, val, what) in [(&mut heights[i], h, "height"), (&mut widths[j], w, "width")] {
                    match slot {
                        Some(prev) if *prev != val => {
                            return Err(NumericsError::BlockLayout {
                                row: i,
                                col: j,
                                reason: format!("{what} {val} conflicts with {prev}"),
                            })
                        }
                        _ => *slot = Some(val),
                    }
                }
            }
        }
    }
    // square identity cells can transfer one known side to the other
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..nr {
            for j in 0..nc {
                if square_hint(i, j) {
                    match (heights[i], widths[j]) {
                        (Some(h), None) => {
                            widths[j] = Some(h);
                            changed = true;
                        }
                        (None, Some(w)) => {
                            heights[i] = Some(w);
                            changed = true;
                        }
                        (Some(h), Some(w)) if h != w => {
                            return Err(NumericsError::BlockLayout {
                                row: i,
                                col: j,
                                reason: format!("identity block would be {h}x{w}"),
                            })
                        }
                        _ => {}
                    }
                }
            }
        }
    }
    let heights = heights
        .into_iter()
        .enumerate()
        .map(|(i, h)| {
            h.ok_or(NumericsError::BlockLayout {
                row: i,
                col: 0,
                reason: "row height cannot be inferred".into(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let widths = widths
        .into_iter()
        .enumerate()
        .map(|(j, w)| {
            w.ok_or(NumericsError::BlockLayout {
                row: 0,
                col: j,
                reason: "column width cannot be inferred".into(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((heights, widths))
}

/// Places blocks into one dense matrix.
///
/// `Mirror` cells are filled with the transpose of the opposite cell, so a
/// layout that spells out only its upper triangle comes back exactly
/// symmetric provided the diagonal blocks are symmetric.
pub fn assemble_blocks(layout: &[Vec<Block>]) -> Result<Mat, NumericsError> {
    let shape_of = |i: usize, j: usize| match &layout[i][j] {
        Block::Dense(m) => Some(m.shape()),
        Block::Mirror => mirror_shape(layout, i, j),
        _ => None,
    };
    let square = |i: usize, j: usize| matches!(layout[i][j], Block::Identity);
    let (heights, widths) = resolve_layout(layout, shape_of, square)?;
    let total_r: usize = heights.iter().sum();
    let total_c: usize = widths.iter().sum();
    let mut out = Mat::zeros(total_r, total_c);
    let mut r0 = 0;
    for (i, row) in layout.iter().enumerate() {
        let mut c0 = 0;
        for (j, cell) in row.iter().enumerate() {
            let (h, w) = (heights[i], widths[j]);
            match cell {
                Block::Dense(m) => {
                    if m.iter().any(|v| !v.is_finite()) {
                        return Err(NumericsError::NonFinite);
                    }
                    out.view_mut((r0, c0), (h, w)).copy_from(m);
                }
                Block::Identity => out.view_mut((r0, c0), (h, w)).fill_with_identity(),
                Block::Mirror => match &layout[j][i] {
                    Block::Dense(m) => out.view_mut((r0, c0), (h, w)).copy_from(&m.transpose()),
                    Block::Zero => {}
                    Block::Identity => out.view_mut((r0, c0), (h, w)).fill_with_identity(),
                    Block::Mirror => {
                        return Err(NumericsError::BlockLayout {
                            row: i,
                            col: j,
                            reason: "mirror of a mirror".into(),
                        })
                    }
                },
                Block::Zero => {}
            }
            c0 += w;
        }
        r0 += heights[i];
    }
    Ok(out)
}

/// Block-diagonal concatenation (blocks need not be square).
pub fn block_diag(blocks: &[Mat]) -> Mat {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(r, c);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), b.shape()).copy_from(b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}

/// Builds a matrix from row slices.
pub fn mat_from_rows(rows: &[Vec<f64>]) -> Mat {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    Mat::from_fn(r, c, |i, j| rows[i][j])
}

/// Row-major nested-array (de)serialization for matrices in public file formats.
/// `f64` fields that may be non-finite: finite values stay JSON numbers,
/// the rest are written as `"inf"`, `"-inf"` or `"nan"`.
pub mod serde_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            v if v.is_finite() => s.serialize_f64(v),
            v if v.is_nan() => s.serialize_str("nan"),
            v if v > 0.0 => s.serialize_str("inf"),
            _ => s.serialize_str("-inf"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("expected a number, got {other:?}"))),
            },
        }
    }
}

pub mod serde_mat {
    use super::Mat;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect()
    }

    pub fn from_rows<E: serde::de::Error>(rows: Vec<Vec<f64>>) -> Result<Mat, E> {
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return Err(E::custom("ragged matrix rows"));
            }
        }
        Ok(super::mat_from_rows(&rows))
    }

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_and_diagonal_eigs() {
        let r = sym_eig_bounds(&Mat::identity(3, 3)).unwrap();
        assert_abs_diff_eq!(r.lambda_min, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.lambda_max, 1.0, epsilon = 1e-14);
        let d = Mat::from_diagonal(&Vector::from_vec(vec![-2.0, 0.0, 5.0]));
        let r = sym_eig_bounds(&d).unwrap();
        assert_abs_diff_eq!(r.lambda_min, -2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.lambda_max, 5.0, epsilon = 1e-14);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            sym_eig_bounds(&Mat::zeros(2, 3)),
            Err(NumericsError::NotSquare { rows: 2, cols: 3 })
        ));
        let m = mat_from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(matches!(sym_eig_bounds(&m), Err(NumericsError::NotSymmetric { .. })));
    }

    #[test]
    fn nsd_examples() {
        assert!(is_nsd(&Mat::zeros(3, 3), 0.0).unwrap());
        assert!(!is_nsd(&(Mat::identity(2, 2) * 1e-6), 1e-7).unwrap());
        let v = Vector::from_vec(vec![0.3, -1.2, 2.0]);
        assert!(is_nsd(&-(&v * v.transpose()), 1e-14).unwrap());
    }

    #[test]
    fn cholesky_examples() {
        assert_eq!(cholesky_pd(&Mat::identity(3, 3)).unwrap().unwrap(), Mat::identity(3, 3));
        let l = cholesky_pd(&mat_from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]))
            .unwrap()
            .unwrap();
        assert_abs_diff_eq!(l[(0, 0)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(1, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(0, 1)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(1, 1)], 2f64.sqrt(), epsilon = 1e-15);
        assert!(cholesky_pd(&mat_from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]))
            .unwrap()
            .is_none());
    }

    #[test]
    fn pinv_examples() {
        assert_abs_diff_eq!(pinv(&Mat::identity(3, 3)), Mat::identity(3, 3), epsilon = 1e-14);
        let col = mat_from_rows(&[vec![0.0], vec![1.0]]);
        assert_abs_diff_eq!(pinv(&col), mat_from_rows(&[vec![0.0, 1.0]]), epsilon = 1e-14);
        assert_eq!(pinv(&Mat::zeros(2, 3)), Mat::zeros(3, 2));
        let wide = mat_from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]);
        let wp = pinv(&wide);
        assert_abs_diff_eq!(&wide * &wp * &wide, wide, epsilon = 1e-12);
        assert_abs_diff_eq!(wp[(0, 0)], 1.0 / 70.0, epsilon = 1e-15);
    }

    #[test]
    fn serde_float_round_trips_non_finite() {
        #[derive(serde::Serialize, serde::Deserialize)]
        struct W(#[serde(with = "serde_float")] f64);
        for v in [1.5, -0.0, f64::INFINITY, f64::NEG_INFINITY] {
            let text = serde_json::to_string(&W(v)).unwrap();
            assert_eq!(serde_json::from_str::<W>(&text).unwrap().0, v);
        }
        assert_eq!(serde_json::to_string(&W(f64::INFINITY)).unwrap(), "\"inf\"");
        assert!(serde_json::from_str::<W>("\"nan\"").unwrap().0.is_nan());
        assert!(serde_json::from_str::<W>("\"big\"").is_err());
    }

    #[test]
    fn pinv_rank_deficient_square() {
        // rank 2; nalgebra's SVD mis-factors this one
        let a = Mat::from_column_slice(
            3,
            6,
            &[
                -3.344409569910314, -6.475260080177728, 2.183998720667085, -1.1388009571523312, -2.20488317084753,
                0.7436708278471528, 6.50866037569102, -4.560472029237552, -8.451806031538428, 3.0036912465488066,
                2.2367502074810326, -2.8376297013666134, 1.5146672913395725, 2.9326146936677606, -0.9891227008451048,
                -2.050226950891932, -9.327207623900946, 0.027252159971483447,
            ],
        );
        for m in [a.clone(), a.transpose() * &a] {
            let p = pinv(&m);
            assert!((&m * &p * &m - &m).amax() < 1e-10);
            assert!((&p * &m * &p - &p).amax() < 1e-10);
            let (mp, pm) = (&m * &p, &p * &m);
            assert!((&mp - mp.transpose()).amax() < 1e-10);
            assert!((&pm - pm.transpose()).amax() < 1e-10);
        }
    }

    #[test]
    fn block_examples() {
        let m = mat_from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(assemble_blocks(&[vec![Block::Dense(m.clone())]]).unwrap(), m);
        let eye = assemble_blocks(&[
            vec![Block::Dense(Mat::identity(2, 2)), Block::Zero],
            vec![Block::Zero, Block::Dense(Mat::identity(3, 3))],
        ])
        .unwrap();
        assert_eq!(eye, Mat::identity(5, 5));
        let off = mat_from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let sym = assemble_blocks(&[
            vec![Block::Dense(Mat::identity(2, 2)), Block::Dense(off.clone())],
            vec![Block::Mirror, Block::Identity],
        ])
        .unwrap();
        assert_eq!(sym.shape(), (5, 5));
        assert_eq!(sym, sym.transpose());
        assert_eq!(sym.view((2, 0), (3, 2)).clone_owned(), off.transpose());
    }

    #[test]
    fn block_mismatch_names_the_block() {
        let err = assemble_blocks(&[
            vec![Block::Dense(Mat::zeros(2, 2)), Block::Dense(Mat::zeros(3, 1))],
            vec![Block::Zero, Block::Zero],
        ])
        .unwrap_err();
        match err {
            NumericsError::BlockLayout { row, col, .. } => assert_eq!((row, col), (0, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
