//! Dense row-major matrices and the small least-squares solver behind the
//! forecasters.
//!
//! Every system solved here is `d × d` with `d` at most a handful of basis
//! functions, so the solver is plain normal equations with a Cholesky
//! factorization. When the factorization breaks down, a ridge of
//! `1e-8 · trace(G) / d` is added once and the factorization retried.

use crate::error::{Error, Result};

const JITTER_SCALE: f64 = 1e-8;
/// A Cholesky pivot smaller than this fraction of the largest diagonal entry
/// is treated as a breakdown.
const PIVOT_TOLERANCE: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn diagonal(entries: &[f64]) -> Self {
        let mut m = Self::zeros(entries.len(), entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self[(i, l)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(l, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `diag(scales) · self`: row `i` multiplied by `scales[i]`.
    pub fn scale_rows(&self, scales: &[f64]) -> Result<Matrix> {
        if scales.len() != self.rows {
            return Err(Error::Dimension(format!(
                "{} row scales for {} rows",
                scales.len(),
                self.rows
            )));
        }
        let mut out = self.clone();
        for (i, &s) in scales.iter().enumerate() {
            for v in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *v *= s;
            }
        }
        Ok(out)
    }

    /// `selfᵀ · diag(weights) · self`, or `selfᵀ · self` without weights.
    pub fn weighted_gram(&self, weights: Option<&[f64]>) -> Matrix {
        let d = self.cols;
        let mut g = Self::zeros(d, d);
        for i in 0..self.rows {
            let w = weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                continue;
            }
            let row = self.row(i);
            for a in 0..d {
                let ra = w * row[a];
                for b in a..d {
                    g.data[a * d + b] += ra * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                g.data[a * d + b] = g.data[b * d + a];
            }
        }
        g
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factorizes a symmetric positive definite matrix. Returns `None` on
    /// breakdown.
    pub fn factor(a: &Matrix) -> Option<Self> {
        let n = a.rows();
        debug_assert_eq!(n, a.cols());
        let max_diag = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
        let mut lower = vec![0.0; n * n];
        for j in 0..n {
            let mut pivot = a[(j, j)];
            for k in 0..j {
                pivot -= lower[j * n + k] * lower[j * n + k];
            }
            if !(pivot > PIVOT_TOLERANCE * max_diag) {
                return None;
            }
            let root = pivot.sqrt();
            lower[j * n + j] = root;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= lower[i * n + k] * lower[j * n + k];
                }
                lower[i * n + j] = s / root;
            }
        }
        Some(Self { n, lower })
    }

    /// Factorizes `a`, retrying once with a trace-scaled ridge on failure.
    pub fn factor_with_jitter(a: &Matrix) -> Result<Self> {
        if let Some(c) = Self::factor(a) {
            return Ok(c);
        }
        let n = a.rows().max(1);
        let jitter = JITTER_SCALE * a.trace() / n as f64;
        let mut shifted = a.clone();
        for i in 0..a.rows() {
            shifted[(i, i)] += jitter;
        }
        Self::factor(&shifted).ok_or(Error::Singular)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.lower[i * n + k] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.lower[k * n + i] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
        y
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.n;
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        // Symmetrize away rounding asymmetry.
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = m;
                inv[(j, i)] = m;
            }
        }
        inv
    }
}

fn check_weights(weights: &[f64], rows: usize) -> Result<()> {
    if weights.len() != rows {
        return Err(Error::Dimension(format!(
            "{} row weights for {rows} rows",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Domain(format!(
            "row weight {w} is not a nonnegative real"
        )));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::DegenerateWeights);
    }
    Ok(())
}

/// A factorized (weighted) least-squares problem `min Σ wᵢ (yᵢ − c·φᵢ)²`.
///
/// Keeps the Gram factorization around so that one design can be solved
/// against several target vectors, and so that callers can form
/// `(ΦᵀΛΦ)⁻¹` for gradient computations.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    gram: Matrix,
    factor: Cholesky,
}

impl LeastSquares {
    pub fn new(design: &Matrix, row_weights: Option<&[f64]>) -> Result<Self> {
        if design.rows() < design.cols() {
            return Err(Error::Dimension(format!(
                "least squares needs at least as many rows as columns, got {}x{}",
                design.rows(),
                design.cols()
            )));
        }
        if let Some(w) = row_weights {
            check_weights(w, design.rows())?;
        }
        let gram = design.weighted_gram(row_weights);
        let factor = Cholesky::factor_with_jitter(&gram)?;
        Ok(Self { gram, factor })
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    pub fn gram_inverse(&self) -> Matrix {
        self.factor.inverse()
    }

    /// Solves `G x = b` with the factorized Gram matrix.
    pub fn solve_gram(&self, b: &[f64]) -> Vec<f64> {
        self.factor.solve(b)
    }

    /// Coefficients for `targets` given the design and weights this problem
    /// was built from.
    pub fn coefficients(
        &self,
        design: &Matrix,
        targets: &[f64],
        row_weights: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        if targets.len() != design.rows() {
            return Err(Error::Dimension(format!(
                "{} targets for {} rows",
                targets.len(),
                design.rows()
            )));
        }
        let d = design.cols();
        let mut rhs = vec![0.0; d];
        for (i, &y) in targets.iter().enumerate() {
            let w = row_weights.map_or(1.0, |w| w[i]);
            let wy = w * y;
            for (r, &phi) in rhs.iter_mut().zip(design.row(i)) {
                *r += wy * phi;
            }
        }
        Ok(self.factor.solve(&rhs))
    }
}

/// Returns `argmin_c Σᵢ wᵢ (yᵢ − c·φ(i))²`, i.e. `(ΦᵀΛΦ)⁻¹ΦᵀΛY`.
pub fn solve_least_squares(
    design: &Matrix,
    targets: &[f64],
    row_weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if targets.len() != design.rows() {
        return Err(Error::Dimension(format!(
            "{} targets for {} rows",
            targets.len(),
            design.rows()
        )));
    }
    if let Some(y) = targets.iter().find(|y| !y.is_finite()) {
        return Err(Error::NonFinite(format!("target {y}")));
    }
    LeastSquares::new(design, row_weights)?.coefficients(design, targets, row_weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_times_vector() {
        assert_eq!(
            Matrix::identity(2).matvec(&[3.0, 4.0]).unwrap(),
            vec![3.0, 4.0]
        );
    }

    #[test]
    fn transpose_swaps_off_diagonal() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.transpose(), m(&[&[1.0, 3.0], &[2.0, 4.0]]));
    }

    #[test]
    fn diagonal_scaling_of_rows() {
        let a = m(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let expected = m(&[&[2.0, 2.0], &[3.0, 3.0]]);
        assert_eq!(a.scale_rows(&[2.0, 3.0]).unwrap(), expected);
        assert_eq!(Matrix::diagonal(&[2.0, 3.0]).matmul(&a).unwrap(), expected);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = m(&[&[1.0, 2.0]]);
        assert!(matches!(a.matvec(&[1.0]), Err(Error::Dimension(_))));
        assert!(matches!(a.matmul(&a), Err(Error::Dimension(_))));
        assert!(matches!(
            Matrix::new(2, 2, vec![0.0; 3]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn exact_linear_fit() {
        let design = m(&[&[1.0, 1.0], &[2.0, 1.0], &[3.0, 1.0]]);
        let c = solve_least_squares(&design, &[2.0, 4.0, 6.0], None).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-12 && c[1].abs() < 1e-12, "{c:?}");
    }

    #[test]
    fn constant_design_with_weights_is_weighted_mean() {
        let design = m(&[&[1.0], &[1.0]]);
        let c = solve_least_squares(&design, &[2.0, 6.0], Some(&[1.0, 3.0])).unwrap();
        assert!((c[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn constant_targets_fit_constant() {
        let design = m(&[&[1.0], &[1.0], &[1.0]]);
        let c = solve_least_squares(&design, &[1.7, 1.7, 1.7], None).unwrap();
        assert!((c[0] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_are_degenerate() {
        let design = m(&[&[1.0], &[1.0]]);
        assert_eq!(
            solve_least_squares(&design, &[1.0, 2.0], Some(&[0.0, 0.0])),
            Err(Error::DegenerateWeights)
        );
    }

    #[test]
    fn repeated_rows_recover_with_jitter() {
        // Rank one design: jitter makes the Gram matrix invertible.
        let design = m(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let c = solve_least_squares(&design, &[2.0, 2.0, 2.0], None).unwrap();
        assert!((c[0] + c[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn zero_design_is_singular() {
        let design = Matrix::zeros(3, 2);
        assert_eq!(
            solve_least_squares(&design, &[1.0, 2.0, 3.0], None),
            Err(Error::Singular)
        );
    }

    #[test]
    fn solving_is_deterministic() {
        let design = m(&[&[1.0, 1.0], &[2.0, 1.0], &[3.0, 1.0]]);
        let a = solve_least_squares(&design, &[2.0, 4.0, 6.0], None).unwrap();
        let b = solve_least_squares(&design, &[2.0, 4.0, 6.0], None).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn inverse_is_symmetric() {
        let design = m(&[&[1.0, 1.0], &[2.0, 1.0], &[3.0, 1.0]]);
        let ls = LeastSquares::new(&design, None).unwrap();
        let inv = ls.gram_inverse();
        assert!((inv[(0, 1)] - inv[(1, 0)]).abs() < 1e-15);
        let prod = ls.gram().matmul(&inv).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - e).abs() < 1e-12);
            }
        }
    }

    fn design_strategy() -> impl Strategy<Value = (Matrix, Vec<f64>, Vec<f64>)> {
        (1usize..5).prop_flat_map(|d| {
            (d + 2..d + 12).prop_flat_map(move |k| {
                (
                    proptest::collection::vec(-2.0f64..2.0, k * (d - 1)),
                    proptest::collection::vec(-5.0f64..5.0, k),
                    proptest::collection::vec(0.1f64..3.0, k),
                )
                    .prop_map(move |(entries, y, w)| {
                        let mut data = Vec::with_capacity(k * d);
                        for i in 0..k {
                            data.extend_from_slice(&entries[i * (d - 1)..(i + 1) * (d - 1)]);
                            data.push(1.0);
                        }
                        (Matrix::new(k, d, data).unwrap(), y, w)
                    })
            })
        })
    }

    proptest! {
        #[test]
        fn residuals_are_orthogonal_to_design((design, y, w) in design_strategy()) {
            let ls = LeastSquares::new(&design, Some(&w));
            prop_assume!(ls.is_ok());
            let g = design.weighted_gram(Some(&w));
            // Skip ill-conditioned random draws.
            prop_assume!(Cholesky::factor(&g).is_some());
            let inv = Cholesky::factor(&g).unwrap().inverse();
            let norm: f64 = inv.as_slice().iter().map(|v| v.abs()).sum();
            prop_assume!(norm < 1e4);
            let c = solve_least_squares(&design, &y, Some(&w)).unwrap();
            for j in 0..design.cols() {
                let s: f64 = (0..design.rows())
                    .map(|i| w[i] * design[(i, j)] * (y[i] - dot(design.row(i), &c)))
                    .sum();
                prop_assert!(s.abs() < 1e-8, "column {} residual {}", j, s);
            }
        }

        #[test]
        fn unit_weights_match_unweighted((design, y, _w) in design_strategy()) {
            let ones = vec![1.0; design.rows()];
            let plain = solve_least_squares(&design, &y, None);
            let weighted = solve_least_squares(&design, &y, Some(&ones));
            prop_assume!(plain.is_ok());
            let (p, q) = (plain.unwrap(), weighted.unwrap());
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
