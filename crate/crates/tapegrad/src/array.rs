//! Dense row-major float64 arrays of rank 1 to 3.

use rand::Rng;

/// A dense array. Rank is at most 3; scalars are modelled as shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert!(
            (1..=3).contains(&shape.len()),
            "rank must be 1..=3, got {:?}",
            shape
        );
        let expect: usize = shape.iter().product();
        assert_eq!(
            expect,
            data.len(),
            "shape {:?} needs {} values, got {}",
            shape,
            expect,
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len: usize = shape.iter().product();
        Self::new(shape, vec![value; len])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value])
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::new(&[values.len()], values.to_vec())
    }

    /// Builds a rank-2 array from rows; all rows must be the same length.
    pub fn matrix(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        assert!(r > 0, "matrix needs at least one row");
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(&[r, c], data)
    }

    /// Normal(0, std^2) entries drawn from `rng`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        // Box-Muller keeps the dependency surface small and is deterministic
        // for a fixed RNG stream.
        let mut data = Vec::with_capacity(len);
        while data.len() < len {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(std * r * theta.cos());
            if data.len() < len {
                data.push(std * r * theta.sin());
            }
        }
        Self::new(shape, data)
    }

    /// Glorot/Xavier uniform init for a weight of the given fan pair.
    pub fn xavier<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn to_scalar(&self) -> f64 {
        assert_eq!(self.len(), 1, "expected scalar, shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows of a rank-2 array.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "expected rank 2, shape {:?}", self.shape);
        self.shape[0]
    }

    /// Columns of a rank-2 array.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "expected rank 2, shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let c = self.cols();
        self.data[i * c + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array::new(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
        assert_eq!(
            self.shape, other.shape,
            "shape mismatch {:?} vs {:?}",
            self.shape, other.shape
        );
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Array::new(&self.shape, data)
    }

    /// In-place `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Array, scale: f64) {
        assert_eq!(
            self.shape, other.shape,
            "shape mismatch {:?} vs {:?}",
            self.shape, other.shape
        );
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn matmul(&self, other: &Array) -> Array {
        assert_eq!(self.rank(), 2, "matmul lhs rank");
        assert_eq!(other.rank(), 2, "matmul rhs rank");
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Array::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Array {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Array::new(&[c, r], out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
