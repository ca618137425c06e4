//! Row-major 2-D tensors. Vectors are `[1, n]`, scalars `[1, 1]`.

use super::Scalar;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dims must be positive, got {rows}x{cols}");
        Tensor { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length {} != {rows}x{cols}", data.len());
        assert!(rows > 0 && cols > 0, "tensor dims must be positive, got {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    /// I.i.d. normal entries with the given standard deviation (Box-Muller).
    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        while data.len() < rows * cols {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
            data.push(S::from_f64(r * c * std));
            if data.len() < rows * cols {
                data.push(S::from_f64(r * s * std));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    /// Value of a `[1, 1]` tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn transposed(&self) -> Tensor<S> {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn assert_finite(&self, what: &str) {
        for &v in &self.data {
            assert!(v.is_finite(), "{what}: non-finite value {v}");
        }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`, row-major. The `k`-outer loop keeps the inner
/// accumulation a broadcast-times-row pass that vectorizes.
pub fn matmul_acc<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, c: &mut Tensor<S>) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
    assert_eq!(c.shape(), (m, n), "matmul: out shape {:?} != ({m},{n})", c.shape());
    for i in 0..m {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = b.row(kk);
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// Dot product over 16 independent accumulator lanes combined in a fixed
/// order. The per-lane chains let the autovectorizer emit vector FMAs
/// without reassociating a single float chain; results stay deterministic.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    const LANES: usize = 16;
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / LANES;
    let mut acc = [S::zero(); LANES];
    for c in 0..chunks {
        let i = c * LANES;
        let av = &a[i..i + LANES];
        let bv = &b[i..i + LANES];
        for l in 0..LANES {
            acc[l] += av[l] * bv[l];
        }
    }
    let mut sum = S::zero();
    for l in 0..LANES {
        sum += acc[l];
    }
    for i in chunks * LANES..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// `c[m,n] += a[m,k] * b[n,k]^T`; each output entry is a dot of two rows.
pub fn matmul_nt_acc<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, c: &mut Tensor<S>) {
    let (m, k) = a.shape();
    let (n, k2) = b.shape();
    assert_eq!(k, k2, "matmul_nt: inner dims {k} vs {k2}");
    assert_eq!(c.shape(), (m, n), "matmul_nt: out shape {:?} != ({m},{n})", c.shape());
    for i in 0..m {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, b.row(j));
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
pub fn matmul_tn_acc<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, c: &mut Tensor<S>) {
    let (m, k) = a.shape();
    let (m2, n) = b.shape();
    assert_eq!(m, m2, "matmul_tn: outer dims {m} vs {m2}");
    assert_eq!(c.shape(), (k, n), "matmul_tn: out shape {:?} != ({k},{n})", c.shape());
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (kk, &aik) in arow.iter().enumerate() {
            let crow = c.row_mut(kk);
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut c = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.at(i, k) * b.at(k, j);
                }
                c.set(i, j, acc);
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 7, 3), (8, 8, 8)] {
            let a = Tensor::<f64>::randn(m, k, 1.0, &mut rng);
            let b = Tensor::<f64>::randn(k, n, 1.0, &mut rng);
            let mut c = Tensor::zeros(m, n);
            matmul_acc(&a, &b, &mut c);
            let want = naive_matmul(&a, &b);
            for (x, y) in c.data().iter().zip(want.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_identity() {
        // [[1,2],[3,4]] x I = itself
        let a = Tensor::from_vec(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]);
        let id = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let mut c = Tensor::zeros(2, 2);
        matmul_acc(&a, &id, &mut c);
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(4, 6, 1.0, &mut rng);
        let b = Tensor::<f64>::randn(6, 5, 1.0, &mut rng);
        let mut c_plain = Tensor::zeros(4, 5);
        matmul_acc(&a, &b, &mut c_plain);

        let mut c_nt = Tensor::zeros(4, 5);
        matmul_nt_acc(&a, &b.transposed(), &mut c_nt);
        let mut c_tn = Tensor::zeros(4, 5);
        matmul_tn_acc(&a.transposed(), &b, &mut c_tn);
        for i in 0..20 {
            assert!((c_plain.data()[i] - c_nt.data()[i]).abs() < 1e-12);
            assert!((c_plain.data()[i] - c_tn.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_matches_plain_sum_at_odd_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [0usize, 1, 7, 15, 16, 17, 33, 128, 131] {
            let a = Tensor::<f64>::randn(1, n.max(1), 1.0, &mut rng);
            let b = Tensor::<f64>::randn(1, n.max(1), 1.0, &mut rng);
            let (a, b) = (&a.data()[..n], &b.data()[..n]);
            let want: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            assert!((dot(a, b) - want).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    #[should_panic(expected = "matmul: inner dims")]
    fn matmul_shape_mismatch_panics() {
        let a = Tensor::<f32>::zeros(2, 3);
        let b = Tensor::<f32>::zeros(4, 2);
        let mut c = Tensor::zeros(2, 2);
        matmul_acc(&a, &b, &mut c);
    }

    #[test]
    fn randn_moments_roughly_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::<f64>::randn(100, 100, 0.02, &mut rng);
        let mean: f64 = t.data().iter().sum::<f64>() / 10_000.0;
        let var: f64 = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - 0.02).abs() < 2e-3);
    }
}
