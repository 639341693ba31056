//! Raw numeric kernels shared by the forward and backward passes.

use super::tensor::Real;

/// How a convolution reads pixels outside the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    /// Out-of-range taps read zero.
    #[default]
    Zero,
    /// Out-of-range taps read the nearest edge pixel.
    Replicate,
}

#[inline]
fn tap(i: isize, len: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < len {
        Some(i as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(i.clamp(0, len as isize - 1) as usize),
        }
    }
}

/// Output extent of a 3x3 window.
pub fn conv_out_extent(size: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < 3 {
        return None;
    }
    Some((padded - 3) / stride + 1)
}

/// Unfold a `cin x h x w` image into a `(cin*9) x (ho*wo)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    padding: usize,
    mode: PadMode,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let n = ho * wo;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 3 + ky) * 3 + kx) * n..][..n];
                for oy in 0..ho {
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    let Some(iy) = tap((oy * stride + ky) as isize - padding as isize, h, mode) else {
                        dst.fill(T::zero());
                        continue;
                    };
                    let src = &plane[iy * w..(iy + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = match tap((ox * stride + kx) as isize - padding as isize, w, mode) {
                            Some(ix) => src[ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the image gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    padding: usize,
    mode: PadMode,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let n = ho * wo;
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 3 + ky) * 3 + kx) * n..][..n];
                for oy in 0..ho {
                    let Some(iy) = tap((oy * stride + ky) as isize - padding as isize, h, mode) else {
                        continue;
                    };
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    for ox in 0..wo {
                        if let Some(ix) = tap((ox * stride + kx) as isize - padding as isize, w, mode) {
                            dst[ix] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for 2x bilinear upsampling with half-pixel centres
/// (align-corners false), clamped at the borders.
pub fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
