use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major f64 tensor.
///
/// Matrices are `[rows, cols]`; the raster encoder also uses `[c, h, w]`.
/// Matmul accumulates along `k` in ascending order with a single accumulator,
/// so loop-based oracles that do the same are bit-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    /// Uniform init in `[-a, a]`.
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, a: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `a [m,k] · b [k,n] -> [m,n]`, inner loop over `k` ascending.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    // ikj order: b rows are contiguous, the compiler vectorizes the j loop.
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a [m,k] · bᵀ where b is [n,k] -> [m,n]`. Dot products of contiguous rows.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (n, k2) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` where a is [m,k], b is [m,n] -> [k,n].
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (m2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(m, m2, "matmul_tn outer dims {m} vs {m2}");
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

/// Row-wise softmax of a matrix, numerically stabilized by the row max.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &a.data[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Sinusoidal features of 2-D coordinates.
///
/// For each coordinate, `pairs` frequencies on a geometric ladder
/// `w_m = 1 / temperature^(m/pairs)` produce interleaved `sin`/`cos`
/// features; x features come first, then y. Output is `[n, 4*pairs]`.
pub fn sin_cos_features(locations: &Tensor, pairs: usize, temperature: f64) -> Tensor {
    assert_eq!(locations.shape[1], 2, "expected [n,2] locations");
    let n = locations.shape[0];
    let dim = 4 * pairs;
    let freqs: Vec<f64> = (0..pairs)
        .map(|m| 1.0 / temperature.powf(m as f64 / pairs as f64))
        .collect();
    let mut out = vec![0.0; n * dim];
    for i in 0..n {
        let x = locations.data[i * 2];
        let y = locations.data[i * 2 + 1];
        let orow = &mut out[i * dim..(i + 1) * dim];
        for (m, &w) in freqs.iter().enumerate() {
            orow[2 * m] = (x * w).sin();
            orow[2 * m + 1] = (x * w).cos();
            orow[2 * pairs + 2 * m] = (y * w).sin();
            orow[2 * pairs + 2 * m + 1] = (y * w).cos();
        }
    }
    Tensor::new(vec![n, dim], out)
}

/// Smooth GELU (tanh approximation).
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit of `p` after clamping into `[eps, 1-eps]`.
pub fn inverse_sigmoid(p: f64, eps: f64) -> f64 {
    let q = p.clamp(eps, 1.0 - eps);
    (q / (1.0 - q)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_explicit_loops() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        // oracle: same ascending-k accumulation
        let mut expect = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.at2(i, k) * b.at2(k, j);
                }
                expect[i * 2 + j] = acc;
            }
        }
        assert_eq!(c.data(), expect.as_slice());
    }

    #[test]
    fn matmul_variants_agree() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::rand_uniform(vec![4, 5], 1.0, &mut rng);
        let b = Tensor::rand_uniform(vec![5, 3], 1.0, &mut rng);
        let c = matmul(&a, &b);
        // b transposed manually, fed through matmul_nt
        let mut bt = Tensor::zeros(vec![3, 5]);
        for i in 0..5 {
            for j in 0..3 {
                bt.data_mut()[j * 5 + i] = b.at2(i, j);
            }
        }
        let c2 = matmul_nt(&a, &bt);
        for (x, y) in c.data().iter().zip(c2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // same product via the transposed-a variant
        let mut at = Tensor::zeros(vec![5, 4]);
        for i in 0..4 {
            for j in 0..5 {
                at.data_mut()[j * 4 + i] = a.at2(i, j);
            }
        }
        let c3 = matmul_tn(&at, &b);
        for (x, y) in c.data().iter().zip(c3.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let s = softmax_rows(&a);
        for i in 0..2 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sin_cos_features_layout() {
        let loc = Tensor::new(vec![1, 2], vec![0.5, -1.0]);
        let f = sin_cos_features(&loc, 2, 100.0);
        assert_eq!(f.shape(), &[1, 8]);
        assert!((f.data()[0] - 0.5f64.sin()).abs() < 1e-15);
        assert!((f.data()[1] - 0.5f64.cos()).abs() < 1e-15);
        let w1 = 1.0 / 100.0f64.powf(0.5);
        assert!((f.data()[2] - (0.5 * w1).sin()).abs() < 1e-15);
        assert!((f.data()[4] - (-1.0f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn gelu_deriv_matches_finite_difference() {
        for &x in &[-2.5, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_deriv(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
