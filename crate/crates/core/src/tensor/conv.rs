//! 2-D cross-correlation (no kernel flip) via im2col + GEMM.

use super::ops::gemm_into;
use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that the output is `ceil(H / stride)` x `ceil(W / stride)`.
    Same,
    Valid,
}

/// Output size and padding for a single conv application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        (in_h, in_w): (usize, usize),
        (k_h, k_w): (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Parameter("conv stride must be >= 1".into()));
        }
        let (out_h, out_w) = conv_output_hw((in_h, in_w), (k_h, k_w), stride, padding)?;
        let (pad_top, pad_left) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => (
                same_padding(in_h, k_h, stride).0,
                same_padding(in_w, k_w, stride).0,
            ),
        };
        Ok(Self {
            channels,
            in_h,
            in_w,
            k_h,
            k_w,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k_h * self.k_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input row hit by output row `oy` and kernel row `ky`.
    #[inline]
    fn source_y(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky).checked_sub(self.pad_top).filter(|&y| y < self.in_h)
    }

    /// Half-open range of output columns whose tap `kx` lands inside the input.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad_left.saturating_sub(kx).div_ceil(s);
        // largest ox with ox*s + kx - pad_left <= in_w - 1
        let hi = (self.in_w + self.pad_left)
            .checked_sub(kx + 1)
            .map_or(0, |m| (m / s + 1).min(self.out_w));
        (lo.min(hi), hi)
    }
}

/// `(before, after)` zero padding along one axis for `same` mode. Any odd
/// remainder goes after, matching the common framework convention.
pub fn same_padding(size: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let needed = ((out - 1) * stride + k).saturating_sub(size);
    (needed / 2, needed - needed / 2)
}

pub fn conv_output_hw(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Parameter("conv stride must be >= 1".into()));
    }
    match padding {
        Padding::Same => Ok((h.div_ceil(stride), w.div_ceil(stride))),
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::shape(format!(
                    "kernel {kh}x{kw} larger than input {h}x{w} with valid padding"
                )));
            }
            Ok(((h - kh) / stride + 1, (w - kw) / stride + 1))
        }
    }
}

/// Unfolds one `C x H x W` image into a `(C*kh*kw) x (out_h*out_w)` matrix.
pub fn im2col<E: Element>(image: &[E], g: &ConvGeometry, cols: &mut [E]) {
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    im2col_ld(image, g, cols, g.col_cols());
}

/// [`im2col`] into a matrix whose rows are `ld` apart, so several images can
/// share one wide column buffer.
pub(crate) fn im2col_ld<E: Element>(image: &[E], g: &ConvGeometry, cols: &mut [E], ld: usize) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut cols[row * ld..row * ld + ncols];
                let (lo, hi) = g.valid_ox(kx);
                if g.stride == 1 && g.out_w == g.in_w && hi > lo {
                    copy_shifted(plane, g, ky, kx, (lo, hi), dst);
                    continue;
                }
                for oy in 0..g.out_h {
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let Some(y) = g.source_y(oy, ky) else {
                        out_row.fill(E::zero());
                        continue;
                    };
                    out_row[..lo].fill(E::zero());
                    out_row[hi..].fill(E::zero());
                    let src = &plane[y * g.in_w..(y + 1) * g.in_w];
                    let x0 = lo * g.stride + kx - g.pad_left;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (j, v) in out_row[lo..hi].iter_mut().enumerate() {
                            *v = src[x0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// One im2col row for a stride-1 tap when input and output rows have the
/// same width: the source offset is a constant shift of the destination, so
/// the valid rows move in a single copy and only the border columns, which
/// picked up neighbouring pixels, are zeroed afterwards.
fn copy_shifted<E: Element>(plane: &[E], g: &ConvGeometry, ky: usize, kx: usize, (lo, hi): (usize, usize), dst: &mut [E]) {
    let w = g.out_w;
    let oy0 = g.pad_top.saturating_sub(ky);
    let oy1 = (g.in_h + g.pad_top).saturating_sub(ky).min(g.out_h);
    dst[..oy0 * w].fill(E::zero());
    dst[oy1.max(oy0) * w..g.out_h * w].fill(E::zero());
    if oy1 <= oy0 {
        return;
    }
    let y0 = oy0 + ky - g.pad_top;
    let x0 = lo + kx - g.pad_left;
    let len = (oy1 - oy0 - 1) * w + (hi - lo);
    dst[oy0 * w + lo..oy0 * w + lo + len].copy_from_slice(&plane[y0 * w + x0..y0 * w + x0 + len]);
    for oy in oy0..oy1 {
        let row = &mut dst[oy * w..(oy + 1) * w];
        row[..lo].fill(E::zero());
        row[hi..].fill(E::zero());
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
pub fn col2im<E: Element>(cols: &[E], g: &ConvGeometry, image: &mut [E]) {
    col2im_ld(cols, g, image, g.col_cols());
}

pub(crate) fn col2im_ld<E: Element>(cols: &[E], g: &ConvGeometry, image: &mut [E], ld: usize) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src = &cols[row * ld..row * ld + ncols];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.out_h {
                    let Some(y) = g.source_y(oy, ky) else { continue };
                    let dst = &mut plane[y * g.in_w..(y + 1) * g.in_w];
                    let x0 = lo * g.stride + kx - g.pad_left;
                    let vals = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[x0..x0 + vals.len()].iter_mut().zip(vals) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in vals.iter().enumerate() {
                            let x = x0 + j * g.stride;
                            dst[x] = dst[x] + v;
                        }
                    }
                }
            }
        }
    }
}

/// How many images to unfold side by side so each GEMM sees a few thousand
/// columns; small feature maps otherwise give tiny, inefficient products.
pub(crate) fn images_per_gemm(cols_per_image: usize, batch: usize) -> usize {
    1024usize.div_ceil(cols_per_image).clamp(1, batch.max(1))
}

/// Cross-correlates `N x C x H x W` input with an `F x C x kh x kw` kernel.
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<E>> {
    if input.rank() != 4 || kernel.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d needs rank-4 input and kernel, got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (f, kc, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    if kc != c {
        return Err(Error::shape(format!(
            "conv2d kernel expects {kc} channels, input has {c}"
        )));
    }
    let g = ConvGeometry::new(c, (h, w), (kh, kw), stride, padding)?;
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let chunk = images_per_gemm(ncols, n);
    let mut cols = vec![E::zero(); rows * chunk * ncols];
    let mut ybuf = vec![E::zero(); f * chunk * ncols];
    let mut out = Vec::with_capacity(n * f * ncols);
    let per_in = c * h * w;
    for start in (0..n).step_by(chunk) {
        let b = chunk.min(n - start);
        let width = b * ncols;
        for j in 0..b {
            let i = start + j;
            im2col_ld(&input.data()[i * per_in..(i + 1) * per_in], &g, &mut cols[j * ncols..], width);
        }
        gemm_into(
            f,
            rows,
            width,
            E::one(),
            (kernel.data(), rows as isize, 1),
            (&cols, width as isize, 1),
            E::zero(),
            &mut ybuf,
        );
        for j in 0..b {
            for o in 0..f {
                out.extend_from_slice(&ybuf[o * width + j * ncols..o * width + (j + 1) * ncols]);
            }
        }
    }
    Tensor::new(&[n, f, g.out_h, g.out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct six-loop cross-correlation with the same padding convention.
    fn direct_conv(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Tensor {
        let s = input.shape();
        let k = kernel.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (f, kh, kw) = (k[0], k[2], k[3]);
        let (oh, ow, pt, pl) = match padding {
            Padding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
            Padding::Same => {
                let oh = (h + stride - 1) / stride;
                let ow = (w + stride - 1) / stride;
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        let mut out = Tensor::<f64>::zeros(&[n, f, oh, ow]);
        for b in 0..n {
            for o in 0..f {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pt as isize;
                                    let ix = (x * stride + kx) as isize - pl as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += input.at(&[b, ch, iy as usize, ix as usize])
                                            * kernel.at(&[o, ch, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * f + o) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_kernel() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f64>::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &k, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn averaging_kernel_valid() {
        let mut rng = Rng::new(9);
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |_| rng.normal());
        let k = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert!((y.data()[0] - x.mean_all()).abs() < 1e-12);
    }

    #[test]
    fn strided_same_matches_direct() {
        let mut rng = Rng::new(10);
        let x = Tensor::<f64>::from_fn(&[2, 3, 8, 8], |_| rng.normal());
        let k = Tensor::<f64>::from_fn(&[4, 3, 3, 3], |_| rng.normal());
        let y = conv2d(&x, &k, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        assert!(y.max_abs_diff(&direct_conv(&x, &k, 2, Padding::Same)) < 1e-10);
    }

    #[test]
    fn random_shapes_match_direct() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let n = 1 + rng.index(2);
            let c = 1 + rng.index(3);
            let f = 1 + rng.index(3);
            let h = 3 + rng.index(5);
            let w = 3 + rng.index(5);
            let k = [1, 3][rng.index(2)];
            let stride = 1 + rng.index(2);
            let padding = if rng.bernoulli(0.5) { Padding::Same } else { Padding::Valid };
            let x = Tensor::<f64>::from_fn(&[n, c, h, w], |_| rng.normal());
            let kern = Tensor::<f64>::from_fn(&[f, c, k, k], |_| rng.normal());
            let y = conv2d(&x, &kern, stride, padding).unwrap();
            let expected = direct_conv(&x, &kern, stride, padding);
            assert_eq!(y.shape(), expected.shape());
            assert!(y.max_abs_diff(&expected) < 1e-10);
        }
    }

    #[test]
    fn same_output_is_ceil() {
        assert_eq!(conv_output_hw((7, 9), (3, 3), 2, Padding::Same).unwrap(), (4, 5));
        assert_eq!(conv_output_hw((32, 32), (1, 1), 2, Padding::Same).unwrap(), (16, 16));
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, Padding::Same), Err(Error::Shape(_))));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = Rng::new(12);
        let g = ConvGeometry::new(2, (5, 6), (3, 3), 2, Padding::Same).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 6).map(|_| rng.normal()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|_| rng.normal()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
