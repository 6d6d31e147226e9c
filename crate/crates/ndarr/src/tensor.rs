//! Immutable row-major tensors and the raw kernels shared by the tape.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result, TensorError};

/// Dense n-dimensional array of `f64`, row-major.
///
/// Values are checked for finiteness at construction; there is no way to
/// mutate a tensor in place once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return contract(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Numeric { op: "construct" });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernel outputs whose length is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    /// Uniform values in `[lo, hi)` from a seeded stream.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return contract(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => contract(format!("expected a rank-2 tensor, got shape {s:?}")),
        }
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return contract(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return contract(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        let d = self.zip_map(other, |a, b| (a - b).abs())?;
        Ok(d.data.iter().cloned().fold(0.0, f64::max))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place accumulation for the tape's private gradient buffers.
    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copy with one coordinate replaced; used by finite-difference probes.
    pub fn with_value(&self, index: usize, value: f64) -> Result<Self> {
        if index >= self.numel() {
            return contract(format!("index {index} out of range {}", self.numel()));
        }
        let mut data = self.data.clone();
        data[index] = value;
        Tensor::new(&self.shape, data)
    }
}

const MR: usize = 4;
const NR: usize = 4;

/// `out[m,n] = a[m,k] · b[k,n]`, optionally with either operand transposed.
///
/// Both operands are packed into panels and multiplied with a 4×4 register
/// tile; every output is accumulated over `k` in increasing order.
pub(crate) fn matmul_kernel(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    a_t: bool,
    b_t: bool,
) -> Vec<f64> {
    let at = |i: usize, p: usize| if a_t { a[p * m + i] } else { a[i * k + p] };
    let bt = |p: usize, j: usize| if b_t { b[j * k + p] } else { b[p * n + j] };
    let mp = m.div_ceil(MR);
    let np = n.div_ceil(NR);
    // a panels: [mp][k][MR], b panels: [np][k][NR], zero padded
    let mut pa = vec![0.0; mp * k * MR];
    for i in 0..m {
        let (panel, r) = (i / MR, i % MR);
        for p in 0..k {
            pa[(panel * k + p) * MR + r] = at(i, p);
        }
    }
    let mut pb = vec![0.0; np * k * NR];
    for p in 0..k {
        for j in 0..n {
            let (panel, c) = (j / NR, j % NR);
            pb[(panel * k + p) * NR + c] = bt(p, j);
        }
    }
    let mut out = vec![0.0; m * n];
    for ip in 0..mp {
        let apanel = &pa[ip * k * MR..(ip + 1) * k * MR];
        for jp in 0..np {
            let bpanel = &pb[jp * k * NR..(jp + 1) * k * NR];
            let mut acc = [[0.0f64; NR]; MR];
            for (av, bv) in apanel.chunks_exact(MR).zip(bpanel.chunks_exact(NR)) {
                let bv: [f64; NR] = bv.try_into().unwrap();
                for (row, &a) in acc.iter_mut().zip(av) {
                    *row = [
                        row[0] + a * bv[0],
                        row[1] + a * bv[1],
                        row[2] + a * bv[2],
                        row[3] + a * bv[3],
                    ];
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let i = ip * MR + r;
                if i >= m {
                    break;
                }
                for (c, &v) in row.iter().enumerate() {
                    let j = jp * NR + c;
                    if j < n {
                        out[i * n + j] = v;
                    }
                }
            }
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
