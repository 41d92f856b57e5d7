use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Transpose flags for [`Tensor::matmul_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Trans {
    No,
    Yes,
}

impl<E: Element> Tensor<E> {
    /// Standard matrix product of `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_with(Trans::No, other, Trans::No)
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_with(Trans::Yes, other, Trans::No)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        self.matmul_with(Trans::No, other, Trans::Yes)
    }

    pub(crate) fn matmul_with(&self, ta: Trans, other: &Self, tb: Trans) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (ar, ac) = (self.shape[0], self.shape[1]);
        let (br, bc) = (other.shape[0], other.shape[1]);
        let (m, k, rsa, csa) = match ta {
            Trans::No => (ar, ac, ac as isize, 1),
            Trans::Yes => (ac, ar, 1, ac as isize),
        };
        let (k2, n, rsb, csb) = match tb {
            Trans::No => (br, bc, bc as isize, 1),
            Trans::Yes => (bc, br, 1, bc as isize),
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = vec![E::zero(); m * n];
        gemm_into(
            m,
            k,
            n,
            E::one(),
            (&self.data, rsa, csa),
            (&other.data, rsb, csb),
            E::zero(),
            &mut out,
        );
        Tensor::new(&[m, n], out)
    }

    pub fn transpose2d(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose2d needs a rank-2 tensor"));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(&self.shape, data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: E) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > E::zero() { v } else { E::zero() })
    }

    /// Sum of all elements, accumulated in 64-bit.
    pub fn sum_all(&self) -> f64 {
        self.data.iter().map(|v| v.widen()).sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.len() as f64
    }

    /// Mean over the listed axes; the remaining axes keep their order.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor<f64>> {
        let (sums, count, shape) = self.reduce_axes(axes, |v| v)?;
        Tensor::new(&shape, sums.into_iter().map(|s| s / count as f64).collect())
    }

    /// Population variance (divide by count) over the listed axes, two-pass.
    pub fn var_axes(&self, axes: &[usize]) -> Result<Tensor<f64>> {
        let mean = self.mean_axes(axes)?;
        let keep = kept_axes(self.rank(), axes);
        let mut acc = vec![0.0; mean.len()];
        for_each_index(&self.shape, |flat, idx| {
            let o = out_index(idx, &keep, &self.shape);
            let d = self.data[flat].widen() - mean.data[o];
            acc[o] += d * d;
        });
        let count = (self.len() / mean.len()) as f64;
        Tensor::new(mean.shape(), acc.into_iter().map(|s| s / count).collect())
    }

    fn reduce_axes(&self, axes: &[usize], f: impl Fn(f64) -> f64) -> Result<(Vec<f64>, usize, Vec<usize>)> {
        if axes.iter().any(|&a| a >= self.rank()) {
            return Err(Error::shape(format!("axes {axes:?} out of range for rank {}", self.rank())));
        }
        let keep = kept_axes(self.rank(), axes);
        let mut shape: Vec<usize> = keep.iter().map(|&a| self.shape[a]).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let out_len: usize = shape.iter().product();
        let mut sums = vec![0.0; out_len];
        for_each_index(&self.shape, |flat, idx| {
            let o = out_index(idx, &keep, &self.shape);
            sums[o] += f(self.data[flat].widen());
        });
        let count = self.len() / out_len;
        Ok((sums, count, shape))
    }

    /// `N x C x H x W -> N x C` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Self> {
        if self.rank() != 4 {
            return Err(Error::shape("global_avg_pool needs N x C x H x W"));
        }
        let (n, c, hw) = (self.shape[0], self.shape[1], self.shape[2] * self.shape[3]);
        let inv = E::lit(1.0 / hw as f64);
        let data = self
            .data
            .chunks(hw)
            .map(|plane| plane.iter().copied().fold(E::zero(), |a, b| a + b) * inv)
            .collect();
        Tensor::new(&[n, c], data)
    }

    /// Index of the maximum along the last axis, per row of a rank-2 tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            return Err(Error::shape("argmax_rows needs a rank-2 tensor"));
        }
        let c = self.shape[1];
        Ok(self
            .data
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: (&[E], isize, isize),
    b: (&[E], isize, isize),
    beta: E,
    c: &mut [E],
) {
    assert!(c.len() >= m * n);
    assert!(a.0.len() >= m * k && b.0.len() >= k * n);
    // SAFETY: bounds checked above; strides describe dense row- or column-major
    // views of buffers holding at least m*k, k*n and m*n elements.
    unsafe {
        E::gemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn kept_axes(rank: usize, reduced: &[usize]) -> Vec<usize> {
    (0..rank).filter(|a| !reduced.contains(a)).collect()
}

fn out_index(idx: &[usize], keep: &[usize], shape: &[usize]) -> usize {
    keep.iter().fold(0, |acc, &a| acc * shape[a] + idx[a])
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..total {
        f(flat, &idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
