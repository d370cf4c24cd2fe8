//! Direct-loop 2-D convolution and 3x3 pooling kernels on `(N, C, H, W)` data.
//!
//! Padding is always "same": `dilation * (k - 1) / 2` on each side, so a
//! stride-1 convolution with an odd kernel preserves spatial size and a
//! stride-2 one yields `ceil(H / 2)`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            dilation,
            groups,
        }
    }

    pub fn plain() -> Self {
        Self::new(1, 1, 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub ho: usize,
    pub wo: usize,
}

fn out_size(size: usize, k: usize, stride: usize, dilation: usize, pad: usize) -> usize {
    (size + 2 * pad - dilation * (k - 1) - 1) / stride + 1
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let (&[n, cin, h, wd], &[cout, cin_g, kh, kw]) = (x, w) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-D input and weight, got {x:?} and {w:?}"),
            ));
        };
        let Conv2dSpec {
            stride,
            dilation,
            groups,
        } = spec;
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::shape(
                "conv2d",
                "stride, dilation and groups must be positive",
            ));
        }
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::shape(
                "conv2d",
                format!("input {x:?} / weight {w:?} incompatible with {groups} groups"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                "same padding needs odd kernel sizes",
            ));
        }
        let pad_h = dilation * (kh - 1) / 2;
        let pad_w = dilation * (kw - 1) / 2;
        Ok(Self {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            dilation,
            groups,
            pad_h,
            pad_w,
            ho: out_size(h, kh, stride, dilation, pad_h),
            wo: out_size(wd, kw, stride, dilation, pad_w),
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }

    /// Valid `[lo, hi)` output range along one axis for kernel tap `k`.
    fn out_range(&self, k: usize, pad: usize, size: usize, out: usize) -> (usize, usize) {
        let off = (k * self.dilation) as isize - pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = size as isize - 1 - off;
        let hi = if last < 0 {
            0
        } else {
            (last / s + 1).min(out as isize)
        };
        (lo as usize, hi.max(lo) as usize)
    }

    /// Walks every (input index, weight index, output index) triple.
    /// Calls `f(x_plane, w_index, out_plane, ky, kx)` for every kernel tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let cin_g = self.cin / self.groups;
        let cout_g = self.cout / self.groups;
        for n in 0..self.n {
            for g in 0..self.groups {
                for ocl in 0..cout_g {
                    let oc = g * cout_g + ocl;
                    let out_base = (n * self.cout + oc) * self.ho * self.wo;
                    for icl in 0..cin_g {
                        let ic = g * cin_g + icl;
                        let x_base = (n * self.cin + ic) * self.h * self.w;
                        for ky in 0..self.kh {
                            for kx in 0..self.kw {
                                let wi = ((oc * cin_g + icl) * self.kh + ky) * self.kw + kx;
                                f(x_base, wi, out_base, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.cout * self.ho * self.wo];
        self.for_each_tap(|x_base, wi, out_base, ky, kx| {
            let wv = w[wi];
            let (oy_lo, oy_hi) = self.out_range(ky, self.pad_h, self.h, self.ho);
            let (ox_lo, ox_hi) = self.out_range(kx, self.pad_w, self.w, self.wo);
            for oy in oy_lo..oy_hi {
                let iy = oy * self.stride + ky * self.dilation - self.pad_h;
                let xrow = x_base + iy * self.w;
                let orow = out_base + oy * self.wo;
                for ox in ox_lo..ox_hi {
                    let ix = ox * self.stride + kx * self.dilation - self.pad_w;
                    out[orow + ox] += wv * x[xrow + ix];
                }
            }
        });
        out
    }

    pub fn backward_input(&self, w: &[f64], dout: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.n * self.cin * self.h * self.w];
        self.for_each_tap(|x_base, wi, out_base, ky, kx| {
            let wv = w[wi];
            let (oy_lo, oy_hi) = self.out_range(ky, self.pad_h, self.h, self.ho);
            let (ox_lo, ox_hi) = self.out_range(kx, self.pad_w, self.w, self.wo);
            for oy in oy_lo..oy_hi {
                let iy = oy * self.stride + ky * self.dilation - self.pad_h;
                let xrow = x_base + iy * self.w;
                let orow = out_base + oy * self.wo;
                for ox in ox_lo..ox_hi {
                    let ix = ox * self.stride + kx * self.dilation - self.pad_w;
                    dx[xrow + ix] += wv * dout[orow + ox];
                }
            }
        });
        dx
    }

    pub fn backward_weight(&self, x: &[f64], dout: &[f64], wlen: usize) -> Vec<f64> {
        let mut dw = vec![0.0; wlen];
        self.for_each_tap(|x_base, wi, out_base, ky, kx| {
            let (oy_lo, oy_hi) = self.out_range(ky, self.pad_h, self.h, self.ho);
            let (ox_lo, ox_hi) = self.out_range(kx, self.pad_w, self.w, self.wo);
            let mut acc = 0.0;
            for oy in oy_lo..oy_hi {
                let iy = oy * self.stride + ky * self.dilation - self.pad_h;
                let xrow = x_base + iy * self.w;
                let orow = out_base + oy * self.wo;
                for ox in ox_lo..ox_hi {
                    let ix = ox * self.stride + kx * self.dilation - self.pad_w;
                    acc += x[xrow + ix] * dout[orow + ox];
                }
            }
            dw[wi] += acc;
        });
        dw
    }
}

/// Geometry of a 3x3 pooling window with padding 1.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(x: &[usize], stride: usize, op: &'static str) -> Result<Self> {
        let &[n, c, h, w] = x else {
            return Err(Error::shape(op, format!("expected 4-D input, got {x:?}")));
        };
        if stride == 0 {
            return Err(Error::shape(op, "stride must be positive"));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            stride,
            ho: out_size(h, 3, stride, 1, 1),
            wo: out_size(w, 3, stride, 1, 1),
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.ho, self.wo]
    }

    /// Calls `f(out_index, window)` where `window` lists the in-bounds input indices.
    pub fn for_each_window(&self, mut f: impl FnMut(usize, &[usize])) {
        let mut window = Vec::with_capacity(9);
        for plane in 0..self.n * self.c {
            let x_base = plane * self.h * self.w;
            let o_base = plane * self.ho * self.wo;
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    window.clear();
                    for dy in 0..3 {
                        let iy = (oy * self.stride + dy) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let ix = (ox * self.stride + dx) as isize - 1;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            window.push(x_base + iy as usize * self.w + ix as usize);
                        }
                    }
                    f(o_base + oy * self.wo + ox, &window);
                }
            }
        }
    }
}
