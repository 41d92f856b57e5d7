use serde_json::json;

use super::{he_init, no_cache, Layer, LayerKind, Mode, Param};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{col2im_ld, conv2d, conv_output_hw, gemm_into, im2col_ld, images_per_gemm, ConvGeometry, Element, Padding, Tensor};

/// Bias-free 2-D convolution (every conv in these networks feeds or follows a
/// normalization with its own shift).
#[derive(Debug, Clone)]
pub struct Conv2d<E: Element> {
    pub kernel: Param<E>,
    pub stride: usize,
    pub padding: Padding,
    input: Option<Tensor<E>>,
}

impl<E: Element> Conv2d<E> {
    pub fn new(
        rng: &mut Rng,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let fan_in = in_channels * size * size;
        let kernel = he_init(rng, &[out_channels, in_channels, size, size], fan_in)?;
        Self::from_kernel(kernel, stride, padding)
    }

    pub fn from_kernel(kernel: Tensor<E>, stride: usize, padding: Padding) -> Result<Self> {
        if kernel.rank() != 4 {
            return Err(Error::Shape("conv kernel must be F x C x kh x kw".into()));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv stride must be >= 1".into()));
        }
        Ok(Self {
            kernel: Param::new("kernel", kernel),
            stride,
            padding,
            input: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.value.shape()[0]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let s = self.kernel.value.shape();
        (s[2], s[3])
    }
}

impl<E: Element> Layer<E> for Conv2d<E> {
    fn kind(&self) -> LayerKind {
        LayerKind::Conv2d
    }

    fn forward(&mut self, x: &Tensor<E>, mode: Mode, _rng: &mut Rng) -> Result<Tensor<E>> {
        let y = conv2d(x, &self.kernel.value, self.stride, self.padding)?;
        self.input = mode.is_training().then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<E>) -> Result<Tensor<E>> {
        let x = self.input.as_ref().ok_or_else(|| no_cache("conv2d"))?;
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let f = self.out_channels();
        let g = ConvGeometry::new(c, (h, w), self.kernel_size(), self.stride, self.padding)?;
        if grad.shape() != [n, f, g.out_h, g.out_w] {
            return Err(Error::Shape(format!(
                "conv2d backward: expected gradient [{n}, {f}, {}, {}], got {:?}",
                g.out_h,
                g.out_w,
                grad.shape()
            )));
        }
        let rows = g.col_rows();
        let ncols = g.col_cols();
        let per_in = c * h * w;
        let chunk = images_per_gemm(ncols, n);
        let mut cols = vec![E::zero(); rows * chunk * ncols];
        let mut dcols = vec![E::zero(); rows * chunk * ncols];
        let mut gbuf = vec![E::zero(); f * chunk * ncols];
        let mut dkernel = vec![E::zero(); f * rows];
        let mut dx = vec![E::zero(); x.len()];
        for start in (0..n).step_by(chunk) {
            let b = chunk.min(n - start);
            let width = b * ncols;
            for j in 0..b {
                let i = start + j;
                im2col_ld(&x.data()[i * per_in..(i + 1) * per_in], &g, &mut cols[j * ncols..], width);
                if b > 1 {
                    for o in 0..f {
                        let src = (i * f + o) * ncols;
                        gbuf[o * width + j * ncols..o * width + (j + 1) * ncols]
                            .copy_from_slice(&grad.data()[src..src + ncols]);
                    }
                }
            }
            // A single image's gradient is already laid out as F x cols.
            let gmat = if b > 1 { &gbuf[..] } else { &grad.data()[start * f * ncols..(start + 1) * f * ncols] };
            // dK += G * cols^T
            gemm_into(
                f,
                width,
                rows,
                E::one(),
                (gmat, width as isize, 1),
                (&cols, 1, width as isize),
                E::one(),
                &mut dkernel,
            );
            // dcols = K^T * G
            gemm_into(
                rows,
                f,
                width,
                E::one(),
                (self.kernel.value.data(), 1, rows as isize),
                (gmat, width as isize, 1),
                E::zero(),
                &mut dcols,
            );
            for j in 0..b {
                let i = start + j;
                col2im_ld(&dcols[j * ncols..], &g, &mut dx[i * per_in..(i + 1) * per_in], width);
            }
        }
        self.kernel.grad = Tensor::new(self.kernel.value.shape(), dkernel)?;
        Tensor::new(s, dx)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [n, c, h, w] if *c == self.in_channels() => {
                let (oh, ow) = conv_output_hw((*h, *w), self.kernel_size(), self.stride, self.padding)?;
                Ok(vec![*n, self.out_channels(), oh, ow])
            }
            _ => Err(Error::Shape(format!(
                "conv2d expects [N, {}, H, W], got {input:?}",
                self.in_channels()
            ))),
        }
    }

    fn params(&self) -> Vec<&Param<E>> {
        vec![&self.kernel]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.kernel]
    }

    fn hyper(&self) -> serde_json::Value {
        let (kh, kw) = self.kernel_size();
        json!({
            "in_channels": self.in_channels(),
            "out_channels": self.out_channels(),
            "kernel": [kh, kw],
            "stride": self.stride,
            "padding": self.padding,
        })
    }

    fn weighted(&self) -> bool {
        true
    }
}
