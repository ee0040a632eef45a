//! Tape-free numeric kernels shared by the graph ops and the tests.

/// Output extent of a strided, padded window along one axis, or `None` when
/// the padded input is shorter than the kernel.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `C×H×W` into a `(C·kh·kw) × (H'·W')` patch matrix.
pub fn im2col(
    input: &[f64],
    (channels, height, width): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> Option<(Vec<f64>, usize, usize)> {
    let out_h = conv_output_extent(height, kh, sh, ph)?;
    let out_w = conv_output_extent(width, kw, sw, pw)?;
    let g = ConvGeom {
        channels,
        height,
        width,
        kh,
        kw,
        sh,
        sw,
        ph,
        pw,
        out_h,
        out_w,
    };
    let mut cols = vec![0.0; g.rows() * g.cols()];
    im2col_into(input, &g, &mut cols);
    Some((cols, out_h, out_w))
}

pub(crate) fn im2col_into(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.sh + i) as isize - g.ph as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.sw + j) as isize - g.pw as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im(
    cols: &[f64],
    (channels, height, width): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> Option<Vec<f64>> {
    let out_h = conv_output_extent(height, kh, sh, ph)?;
    let out_w = conv_output_extent(width, kw, sw, pw)?;
    let g = ConvGeom {
        channels,
        height,
        width,
        kh,
        kw,
        sh,
        sw,
        ph,
        pw,
        out_h,
        out_w,
    };
    let mut out = vec![0.0; channels * height * width];
    col2im_add(cols, &g, &mut out);
    Some(out)
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.sh + i) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.sw + j) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise log-softmax of a `rows × cols` buffer, max-subtracted.
pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + src.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_formula() {
        assert_eq!(conv_output_extent(64, 3, 2, 1), Some(32));
        assert_eq!(conv_output_extent(2, 2, 2, 0), Some(1));
        assert_eq!(conv_output_extent(1, 5, 1, 1), None);
        assert_eq!(conv_output_extent(5, 3, 0, 0), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for any x, y.
        let dims = (2, 5, 6);
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.3).sin()).collect();
        let (cols, oh, ow) = im2col(&x, dims, (3, 2), (2, 1), (1, 1)).unwrap();
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let back = col2im(&y, dims, (3, 2), (2, 1), (1, 1)).unwrap();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert_eq!((oh, ow), (3, 7));
    }

    #[test]
    fn log_softmax_uniform_and_stable() {
        let out = log_softmax_rows(&[0.5; 4], 4);
        for v in out {
            assert!((v - 0.25f64.ln()).abs() < 1e-15);
        }
        let out = log_softmax_rows(&[1000.0, 0.0], 2);
        assert!(out[0].abs() < 1e-12);
        assert!((out[1] + 1000.0).abs() < 1e-9);
    }
}
