//! Safe wrapper around `matrixmultiply::dgemm` for strided row-major views.

#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows × cols`.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a [f64],
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Self {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * row_stride + (cols - 1) * col_stride;
            assert!(last < data.len(), "matrix view out of bounds");
        }
        Self {
            data,
            rows,
            cols,
            row_stride,
            col_stride,
        }
    }

    /// The transpose of a view, without copying.
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = a · b + beta · c`, with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    if m == 1 || n == 1 {
        gemv(a, b, beta, &mut c[..m * n]);
        return;
    }
    // SAFETY: every view was bounds-checked at construction and `c` holds
    // at least m·n elements laid out with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl MatRef<'_> {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.row_stride + j * self.col_stride]
    }

    /// Row `i` as a contiguous slice when the columns are unit-strided.
    fn row(&self, i: usize) -> Option<&[f64]> {
        (self.col_stride == 1 || self.cols == 1)
            .then(|| &self.data[i * self.row_stride..i * self.row_stride + self.cols])
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let xs = x.chunks_exact(4);
    let ys = y.chunks_exact(4);
    let tail: f64 = xs.remainder().iter().zip(ys.remainder()).map(|(a, b)| a * b).sum();
    for (xc, yc) in xs.zip(ys) {
        for l in 0..4 {
            acc[l] += xc[l] * yc[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Matrix-vector products, where packing for the blocked kernel costs more
/// than the arithmetic.
fn gemv(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if beta == 0.0 {
        c.fill(0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
    if m == 1 {
        // c[j] += sum_k a[0,k] b[k,j]
        let bt = b.t();
        match (a.row(0), bt.row(0)) {
            (Some(x), Some(_)) => {
                for (j, cj) in c.iter_mut().enumerate() {
                    *cj += dot(x, bt.row(j).expect("unit stride"));
                }
            }
            _ if b.row(0).is_some() => {
                for kk in 0..k {
                    axpy(a.at(0, kk), b.row(kk).expect("unit stride"), c);
                }
            }
            _ => {
                for (j, cj) in c.iter_mut().enumerate() {
                    *cj += (0..k).map(|kk| a.at(0, kk) * b.at(kk, j)).sum::<f64>();
                }
            }
        }
    } else {
        debug_assert_eq!(n, 1);
        let bt = b.t();
        let at = a.t();
        match (a.row(0), bt.row(0)) {
            (Some(_), Some(y)) => {
                for (i, ci) in c.iter_mut().enumerate() {
                    *ci += dot(a.row(i).expect("unit stride"), y);
                }
            }
            _ if at.row(0).is_some() => {
                for kk in 0..k {
                    axpy(b.at(kk, 0), at.row(kk).expect("unit stride"), c);
                }
            }
            _ => {
                for (i, ci) in c.iter_mut().enumerate() {
                    *ci += (0..k).map(|kk| a.at(i, kk) * b.at(kk, 0)).sum::<f64>();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product() {
        let a: Vec<f64> = (0..6).map(f64::from).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|x| f64::from(x) * 0.5).collect(); // 3×4
        let mut c = vec![1.0; 8];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), 1.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum::<f64>() + 1.0;
                assert_eq!(c[i * 4 + j], expect);
            }
        }
        // aᵀ·aa: 3×2 · 2×3
        let mut d = vec![0.0; 9];
        gemm(MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), 0.0, &mut d);
        assert_eq!(d[0], 0.0 * 0.0 + 3.0 * 3.0);
        assert_eq!(d[4], 1.0 * 1.0 + 4.0 * 4.0);
    }

    fn naive(a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..a.rows {
            for j in 0..b.cols {
                out.push((0..a.cols).map(|k| a.at(i, k) * b.at(k, j)).sum());
            }
        }
        out
    }

    #[test]
    fn vector_shapes_match_naive_for_every_stride() {
        let data: Vec<f64> = (0..35).map(|x| (f64::from(x) * 0.37).sin()).collect();
        let row = MatRef::new(&data[..7], 1, 7);
        let col = MatRef::new(&data[..7], 7, 1);
        let mat = MatRef::new(&data, 7, 5);
        let mat_t = MatRef::new(&data, 5, 7).t();
        let cases = [
            (row, mat),
            (row, mat_t),
            (col.t(), mat),
            (mat.t(), col),
            (mat_t.t(), col),
            (MatRef::new(&data, 5, 7), row.t()),
        ];
        for (a, b) in cases {
            let mut c = vec![0.5; a.rows * b.cols];
            gemm(a, b, 2.0, &mut c);
            let want = naive(a, b);
            for (got, w) in c.iter().zip(&want) {
                assert!((got - (w + 1.0)).abs() < 1e-12);
            }
        }
    }
}
