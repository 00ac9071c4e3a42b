use crate::scalar::Scalar;

/// Dense row-major matrix. The workhorse container for parameters,
/// activations, and gradients; all products go through [`Scalar::gemm`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "Mat::from_vec: {rows}x{cols} needs {} elements, got {}",
            rows * cols,
            data.len()
        );
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        debug_assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        debug_assert!(r < self.rows);
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    /// self += other, elementwise.
    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// C = alpha * op(A)·op(B) + beta * C, where `ta`/`tb` select transposition.
    pub fn gemm_into(c: &mut Mat<T>, alpha: T, a: &Mat<T>, ta: bool, b: &Mat<T>, tb: bool, beta: T) {
        let (m, ka) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
        assert_eq!(ka, kb, "gemm_into: inner dimensions differ ({ka} vs {kb})");
        assert_eq!(
            (c.rows, c.cols),
            (m, n),
            "gemm_into: output is {}x{}, expected {m}x{n}",
            c.rows,
            c.cols
        );
        let (rsa, csa) = if ta {
            (1, a.cols as isize)
        } else {
            (a.cols as isize, 1)
        };
        let (rsb, csb) = if tb {
            (1, b.cols as isize)
        } else {
            (b.cols as isize, 1)
        };
        T::gemm(
            m,
            ka,
            n,
            alpha,
            &a.data,
            rsa,
            csa,
            &b.data,
            rsb,
            csb,
            beta,
            &mut c.data,
            c.cols as isize,
            1,
        );
    }

    /// A·B into a fresh matrix.
    pub fn matmul(&self, other: &Mat<T>) -> Mat<T> {
        let mut out = Mat::zeros(self.rows, other.cols);
        Mat::gemm_into(&mut out, T::one(), self, false, other, false, T::zero());
        out
    }

    /// A·Bᵀ into a fresh matrix.
    pub fn matmul_nt(&self, other: &Mat<T>) -> Mat<T> {
        let mut out = Mat::zeros(self.rows, other.rows);
        Mat::gemm_into(&mut out, T::one(), self, false, other, true, T::zero());
        out
    }

    /// Aᵀ·B into a fresh matrix.
    pub fn matmul_tn(&self, other: &Mat<T>) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, other.cols);
        Mat::gemm_into(&mut out, T::one(), self, true, other, false, T::zero());
        out
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, T> {
        self.data.iter_mut()
    }
}

/// Numerically stable in-place softmax over a slice (max-subtracted).
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Numerically stable log(Σ exp(x_i)).
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return T::neg_infinity();
    }
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known_product() {
        let a = Mat::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_nt_and_tn_agree_with_explicit_transpose() {
        let a = Mat::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -2.0]);
        let bt = Mat::from_fn(3, 2, |r, c| b.get(c, r));
        let want = a.matmul(&bt);
        let got = a.matmul_nt(&b);
        assert_eq!(got.as_slice(), want.as_slice());

        let at = Mat::from_fn(3, 2, |r, c| a.get(c, r));
        let want2 = at.matmul(&b);
        let got2 = a.matmul_tn(&b);
        assert_eq!(got2.as_slice(), want2.as_slice());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut row = vec![1.0f64, 2.0, 3.0];
        softmax_in_place(&mut row);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        let mut shifted = vec![1001.0f64, 1002.0, 1003.0];
        softmax_in_place(&mut shifted);
        for (a, b) in row.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_matches_naive_on_small_values() {
        let row = [0.1f64, -0.4, 0.7];
        let naive = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&row) - naive).abs() < 1e-12);
    }

    #[test]
    fn add_assign_and_scale() {
        let mut a = Mat::from_vec(1, 3, vec![1.0f32, 2.0, 3.0]);
        let b = Mat::from_vec(1, 3, vec![0.5, 0.5, 0.5]);
        a.add_assign(&b);
        a.scale(2.0);
        assert_eq!(a.as_slice(), &[3.0, 5.0, 7.0]);
    }
}
