//! Raw loops behind the graph ops. Everything here works on flat slices in
//! row-major NCHW order; shape validation happens in the callers.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        let &[n, c_in, h, w] = input else {
            return Err(Error::dim("conv2d", format!("input must be NCHW, got {input:?}")));
        };
        let &[c_out, c_in_g, kh, kw] = kernel else {
            return Err(Error::dim("conv2d", format!("kernel must be [c_out, c_in/groups, k, k], got {kernel:?}")));
        };
        if kh != kw {
            return Err(Error::dim("conv2d", format!("only square kernels are supported, got {kh}x{kw}")));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::Config("conv2d stride and groups must be positive".into()));
        }
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!("groups {groups} must divide c_in {c_in} and c_out {c_out}")));
        }
        if c_in / groups != c_in_g {
            return Err(Error::dim(
                "conv2d",
                format!("kernel expects {c_in_g} channels per group, input provides {}", c_in / groups),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kh {
            return Err(Error::dim(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {kh}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kh) / stride + 1;
        Ok(Self { n, c_in, h, w, c_out, k: kh, stride, pad, groups, ho, wo })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.ho, self.wo]
    }

    /// Multiplies (equivalently adds) of the direct convolution.
    pub fn macs(&self) -> u64 {
        (self.n * self.c_out * self.ho * self.wo * (self.c_in / self.groups) * self.k * self.k) as u64
    }

    /// Output positions `[lo, hi)` along one axis whose input tap at kernel
    /// offset `kk` lands inside the unpadded extent `len`.
    fn valid(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(s) };
        if len + self.pad <= kk {
            return (0, 0);
        }
        let hi = ((len - 1 + self.pad - kk) / s + 1).min(out_len);
        (lo.min(hi), hi)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = alpha · a·b + beta · c` over strided row-major views, where
/// `a` is `m × k`, `b` is `k × n` and `c` is `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], usize, usize), b: (&[f64], usize, usize), beta: f64, c: &mut [f64]) {
    let (a, rsa, csa) = a;
    let (b, rsb, csb) = b;
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dot product with four independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Sum with four independent partial sums.
#[inline]
pub(crate) fn sum(a: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let chunks = a.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().sum();
    for x in chunks {
        for l in 0..4 {
            lanes[l] += x[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// `Σ (v − center)²` with four independent partial sums.
#[inline]
pub(crate) fn centered_square_sum(a: &[f64], center: f64) -> f64 {
    let mut lanes = [0.0; 4];
    let chunks = a.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().map(|v| (v - center) * (v - center)).sum();
    for x in chunks {
        for l in 0..4 {
            let d = x[l] - center;
            lanes[l] += d * d;
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// `y += alpha · x`.
#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, i) in y.iter_mut().zip(x) {
        *o += alpha * i;
    }
}

/// Visits every output row segment touched by one kernel tap.
/// `f(in_offset, out_offset, len)` gets flat offsets into one input plane and
/// one output plane; the input segment advances by `stride` per output.
#[inline]
fn for_each_tap(geom: &ConvGeom, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (oh_lo, oh_hi) = geom.valid(kh, geom.h, geom.ho);
    let (ow_lo, ow_hi) = geom.valid(kw, geom.w, geom.wo);
    if ow_hi <= ow_lo {
        return;
    }
    let len = ow_hi - ow_lo;
    for oh in oh_lo..oh_hi {
        let ih = oh * geom.stride + kh - geom.pad;
        let iw0 = ow_lo * geom.stride + kw - geom.pad;
        f(ih * geom.w + iw0, oh * geom.wo + ow_lo, len);
    }
}

pub(crate) fn conv2d_forward(geom: &ConvGeom, x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let ConvGeom { n, c_in, h, w, c_out, k, stride, groups, ho, wo, .. } = *geom;
    let cin_g = c_in / groups;
    let cout_g = c_out / groups;
    let (hw, howo) = (h * w, ho * wo);
    let mut y = vec![0.0; n * c_out * howo];
    if geom.is_pointwise() && groups == 1 {
        for b in 0..n {
            let out = &mut y[b * c_out * howo..][..c_out * howo];
            gemm(c_out, c_in, hw, (kernel, c_in, 1), (&x[b * c_in * hw..][..c_in * hw], hw, 1), 0.0, out);
        }
        return y;
    }
    for b in 0..n {
        for co in 0..c_out {
            let g = co / cout_g;
            let out = &mut y[(b * c_out + co) * howo..][..howo];
            if geom.is_pointwise() {
                let taps = &kernel[co * cin_g..][..cin_g];
                let plane = |cil: usize| &x[(b * c_in + g * cin_g + cil) * hw..][..hw];
                let mut cil = 0;
                while cil + 4 <= cin_g {
                    let (w0, w1, w2, w3) = (taps[cil], taps[cil + 1], taps[cil + 2], taps[cil + 3]);
                    let (p0, p1, p2, p3) = (plane(cil), plane(cil + 1), plane(cil + 2), plane(cil + 3));
                    for i in 0..hw {
                        out[i] += w0 * p0[i] + w1 * p1[i] + w2 * p2[i] + w3 * p3[i];
                    }
                    cil += 4;
                }
                for cil in cil..cin_g {
                    axpy(out, taps[cil], plane(cil));
                }
                continue;
            }
            for cil in 0..cin_g {
                let ci = g * cin_g + cil;
                let inp = &x[(b * c_in + ci) * hw..][..hw];
                let taps = &kernel[(co * cin_g + cil) * k * k..][..k * k];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = taps[kh * k + kw];
                        for_each_tap(geom, kh, kw, |io, oo, len| {
                            let orow = &mut out[oo..oo + len];
                            if stride == 1 {
                                axpy(orow, wv, &inp[io..io + len]);
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += wv * inp[io + j * stride];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    y
}

/// Returns `(grad_input, grad_kernel)` for upstream gradient `gy`.
pub(crate) fn conv2d_backward(geom: &ConvGeom, x: &[f64], kernel: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let ConvGeom { n, c_in, h, w, c_out, k, stride, groups, ho, wo, .. } = *geom;
    let cin_g = c_in / groups;
    let cout_g = c_out / groups;
    let (hw, howo) = (h * w, ho * wo);
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    if geom.is_pointwise() && groups == 1 {
        for b in 0..n {
            let go = &gy[b * c_out * hw..][..c_out * hw];
            let xb = &x[b * c_in * hw..][..c_in * hw];
            gemm(c_in, c_out, hw, (kernel, 1, c_in), (go, hw, 1), 0.0, &mut gx[b * c_in * hw..][..c_in * hw]);
            gemm(c_out, hw, c_in, (go, hw, 1), (xb, 1, hw), 1.0, &mut gk);
        }
        return (gx, gk);
    }
    for b in 0..n {
        for co in 0..c_out {
            let g = co / cout_g;
            let go = &gy[(b * c_out + co) * howo..][..howo];
            for cil in 0..cin_g {
                let ci = g * cin_g + cil;
                let inp = &x[(b * c_in + ci) * hw..][..hw];
                let gin = &mut gx[(b * c_in + ci) * hw..][..hw];
                let base = (co * cin_g + cil) * k * k;
                if geom.is_pointwise() {
                    axpy(gin, kernel[base], go);
                    gk[base] += dot(inp, go);
                    continue;
                }
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = kernel[base + kh * k + kw];
                        let mut acc = 0.0;
                        for_each_tap(geom, kh, kw, |io, oo, len| {
                            let orow = &go[oo..oo + len];
                            if stride == 1 {
                                axpy(&mut gin[io..io + len], wv, orow);
                                acc += dot(&inp[io..io + len], orow);
                            } else {
                                for (j, o) in orow.iter().enumerate() {
                                    let idx = io + j * stride;
                                    gin[idx] += wv * o;
                                    acc += inp[idx] * o;
                                }
                            }
                        });
                        gk[base + kh * k + kw] += acc;
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// `a[m,k] · b[k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, (a, k, 1), (b, n, 1), 0.0, &mut c);
    c
}

/// `g[m,n] · b[k,n]ᵀ` → `[m,k]`.
pub(crate) fn matmul_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    gemm(m, n, k, (g, n, 1), (b, 1, n), 0.0, &mut out);
    out
}

/// `a[m,k]ᵀ · g[m,n]` → `[k,n]`.
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    gemm(k, m, n, (a, 1, k), (g, n, 1), 0.0, &mut out);
    out
}
