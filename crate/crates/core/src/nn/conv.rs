//! 3D convolution over `[C, D, H, W]` arrays via im2col and GEMM.

use super::gemm::{gemm_acc, gemm_nt, transpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(ci: usize, co: usize, k: usize, stride: usize, pad: usize, input: [usize; 3]) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad;
            if span < k {
                return None;
            }
            output[a] = (span - k) / stride + 1;
        }
        Some(ConvGeom { ci, co, k, stride, pad, input, output })
    }

    /// Output indices `o` in `[lo, hi)` with `0 <= o*stride + kk - pad < n`.
    #[inline]
    fn valid(&self, kk: usize, n: usize, out_n: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kk { (self.pad - kk).div_ceil(s) } else { 0 };
        let hi = if n + self.pad > kk { ((n - 1 + self.pad - kk) / s + 1).min(out_n) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Unfolds receptive fields into `[ci * k^3, out_spatial]` rows (zero padded).
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [d, h, wd] = g.input;
    let [od, oh, ow] = g.output;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let out_sp = od * oh * ow;
    let in_sp = d * h * wd;
    let mut col = vec![0.0; g.ci * k * k * k * out_sp];
    for ci in 0..g.ci {
        let in_c = &x[ci * in_sp..(ci + 1) * in_sp];
        for kz in 0..k {
            let (z0, z1) = g.valid(kz, d, od);
            for ky in 0..k {
                let (y0, y1) = g.valid(ky, h, oh);
                for kx in 0..k {
                    let (x0, x1) = g.valid(kx, wd, ow);
                    if x0 >= x1 {
                        continue;
                    }
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &mut col[r * out_sp..(r + 1) * out_sp];
                    for oz in z0..z1 {
                        let iz = oz * s + kz - p;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let dst = &mut row[(oz * oh + oy) * ow..][x0..x1];
                            let src = &in_c[(iz * h + iy) * wd..];
                            if s == 1 {
                                let start = x0 + kx - p;
                                dst.copy_from_slice(&src[start..start + (x1 - x0)]);
                            } else {
                                for (j, o) in dst.iter_mut().enumerate() {
                                    *o = src[(x0 + j) * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds rows back into `dx`.
fn col2im_add(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let [d, h, wd] = g.input;
    let [od, oh, ow] = g.output;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let out_sp = od * oh * ow;
    let in_sp = d * h * wd;
    for ci in 0..g.ci {
        let dx_c = &mut dx[ci * in_sp..(ci + 1) * in_sp];
        for kz in 0..k {
            let (z0, z1) = g.valid(kz, d, od);
            for ky in 0..k {
                let (y0, y1) = g.valid(ky, h, oh);
                for kx in 0..k {
                    let (x0, x1) = g.valid(kx, wd, ow);
                    if x0 >= x1 {
                        continue;
                    }
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &col[r * out_sp..(r + 1) * out_sp];
                    for oz in z0..z1 {
                        let iz = oz * s + kz - p;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let src = &row[(oz * oh + oy) * ow..][x0..x1];
                            let base = (iz * h + iy) * wd;
                            if s == 1 {
                                let start = base + x0 + kx - p;
                                axpy(&mut dx_c[start..start + (x1 - x0)], 1.0, src);
                            } else {
                                for (j, v) in src.iter().enumerate() {
                                    dx_c[base + (x0 + j) * s + kx - p] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (o, i) in y.iter_mut().zip(x) {
        *o += a * i;
    }
}

pub(crate) fn forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let out_sp: usize = g.output.iter().product();
    let rows = g.ci * g.k * g.k * g.k;
    let col = im2col(x, g);
    let mut out = vec![0.0; g.co * out_sp];
    for co in 0..g.co {
        out[co * out_sp..(co + 1) * out_sp].iter_mut().for_each(|v| *v = b[co]);
    }
    gemm_acc(&mut out, w, &col, g.co, out_sp, rows);
    out
}

/// Accumulates input, weight and bias gradients.
pub(crate) fn backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let out_sp: usize = g.output.iter().product();
    let rows = g.ci * g.k * g.k * g.k;
    if let Some(db) = db {
        for co in 0..g.co {
            db[co] += dout[co * out_sp..(co + 1) * out_sp].iter().sum::<f64>();
        }
    }
    if let Some(dw) = dw {
        gemm_nt(dw, dout, &im2col(x, g), g.co, rows, out_sp);
    }
    if let Some(dx) = dx {
        let mut dcol = vec![0.0; rows * out_sp];
        gemm_acc(&mut dcol, &transpose(w, g.co, rows), dout, rows, out_sp, g.co);
        col2im_add(&dcol, g, dx);
    }
}
