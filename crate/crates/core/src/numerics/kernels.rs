//! Loop kernels behind the heavier graph ops. All kernels are direct
//! (no im2col / FFT) and accumulate in a fixed order, so results are
//! bit-reproducible.

use super::tensor::Scalar;

/// Stride and zero padding of a 2-D convolution, as (height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dParams {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { stride, padding }
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self::new((1, 1), (0, 0))
    }
}

/// `floor((input - kernel + 2 * pad) / stride) + 1`, or `None` if the padded
/// input is shorter than the kernel.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output positions `o` in `0..out` for which `o * stride + k - pad` lands
/// inside `0..len`.
#[inline]
fn valid_range(out: usize, len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if len + pad <= k {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - k) / stride + 1).min(out);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub p: Conv2dParams,
}

impl ConvDims {
    /// Calls `f(oh, ih, ow0, ow1, iw0)` for every output row touched by
    /// kernel tap `(kh, kw)`; `iw0` is the input column of `ow0` and the
    /// column stride is `p.stride.1`.
    #[inline]
    fn for_tap(&self, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (sh, sw) = self.p.stride;
        let (ph, pw) = self.p.padding;
        let (ow0, ow1) = valid_range(self.ow, self.w, sw, kw, pw);
        if ow0 >= ow1 {
            return;
        }
        let iw0 = ow0 * sw + kw - pw;
        let (oh0, oh1) = valid_range(self.oh, self.h, sh, kh, ph);
        for oh in oh0..oh1 {
            let ih = oh * sh + kh - ph;
            f(oh, ih, ow0, ow1, iw0);
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    out: &mut [T],
) {
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let sw = d.p.stride.1;
    for n in 0..d.n {
        for co in 0..d.c_out {
            let o = &mut out[(n * d.c_out + co) * out_plane..][..out_plane];
            let b = bias.map_or(T::zero(), |b| b[co]);
            o.iter_mut().for_each(|v| *v = b);
            for ci in 0..d.c_in {
                let xin = &x[(n * d.c_in + ci) * in_plane..][..in_plane];
                let wk = &weight[(co * d.c_in + ci) * d.kh * d.kw..][..d.kh * d.kw];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = wk[kh * d.kw + kw];
                        d.for_tap(kh, kw, |oh, ih, ow0, ow1, iw0| {
                            let orow = &mut o[oh * d.ow + ow0..oh * d.ow + ow1];
                            let irow = &xin[ih * d.w..(ih + 1) * d.w];
                            if sw == 1 {
                                for (ov, &iv) in orow.iter_mut().zip(&irow[iw0..]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    *ov += wv * irow[iw0 + j * sw];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    d: &ConvDims,
    grad_x: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let sw = d.p.stride.1;

    if let Some(gb) = grad_b {
        for n in 0..d.n {
            for (co, g) in gb.iter_mut().enumerate() {
                let go = &grad_out[(n * d.c_out + co) * out_plane..][..out_plane];
                *g += go.iter().copied().sum::<T>();
            }
        }
    }

    if let Some(gw) = grad_w {
        for n in 0..d.n {
            for co in 0..d.c_out {
                let go = &grad_out[(n * d.c_out + co) * out_plane..][..out_plane];
                for ci in 0..d.c_in {
                    let xin = &x[(n * d.c_in + ci) * in_plane..][..in_plane];
                    let gk = &mut gw[(co * d.c_in + ci) * d.kh * d.kw..][..d.kh * d.kw];
                    for kh in 0..d.kh {
                        for kw in 0..d.kw {
                            let mut acc = T::zero();
                            d.for_tap(kh, kw, |oh, ih, ow0, ow1, iw0| {
                                let grow = &go[oh * d.ow + ow0..oh * d.ow + ow1];
                                let irow = &xin[ih * d.w..(ih + 1) * d.w];
                                if sw == 1 {
                                    for (&g, &iv) in grow.iter().zip(&irow[iw0..]) {
                                        acc += g * iv;
                                    }
                                } else {
                                    for (j, &g) in grow.iter().enumerate() {
                                        acc += g * irow[iw0 + j * sw];
                                    }
                                }
                            });
                            gk[kh * d.kw + kw] += acc;
                        }
                    }
                }
            }
        }
    }

    if let Some(gx) = grad_x {
        for n in 0..d.n {
            for ci in 0..d.c_in {
                let gxin = &mut gx[(n * d.c_in + ci) * in_plane..][..in_plane];
                for co in 0..d.c_out {
                    let go = &grad_out[(n * d.c_out + co) * out_plane..][..out_plane];
                    let wk = &weight[(co * d.c_in + ci) * d.kh * d.kw..][..d.kh * d.kw];
                    for kh in 0..d.kh {
                        for kw in 0..d.kw {
                            let wv = wk[kh * d.kw + kw];
                            d.for_tap(kh, kw, |oh, ih, ow0, ow1, iw0| {
                                let grow = &go[oh * d.ow + ow0..oh * d.ow + ow1];
                                let irow = &mut gxin[ih * d.w..(ih + 1) * d.w];
                                if sw == 1 {
                                    for (iv, &g) in irow[iw0..].iter_mut().zip(grow) {
                                        *iv += wv * g;
                                    }
                                } else {
                                    for (j, &g) in grow.iter().enumerate() {
                                        irow[iw0 + j * sw] += wv * g;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `grad_a[m×k] += grad_out[m×n] · bᵀ`.
pub(crate) fn matmul_grad_a<T: Scalar>(
    grad_out: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    grad_a: &mut [T],
) {
    for i in 0..m {
        let grow = &grad_out[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&g, &bv) in grow.iter().zip(brow) {
                acc += g * bv;
            }
            grad_a[i * k + p] += acc;
        }
    }
}

/// `grad_b[k×n] += aᵀ · grad_out[m×n]`.
pub(crate) fn matmul_grad_b<T: Scalar>(
    a: &[T],
    grad_out: &[T],
    m: usize,
    k: usize,
    n: usize,
    grad_b: &mut [T],
) {
    for i in 0..m {
        let grow = &grad_out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &mut grad_b[p * n..(p + 1) * n];
            for (o, &g) in brow.iter_mut().zip(grow) {
                *o += av * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_length_formula() {
        assert_eq!(conv_out_len(60, 9, 3, 0), Some(18));
        assert_eq!(conv_out_len(400, 9, 1, 4), Some(400));
        assert_eq!(conv_out_len(18, 3, 2, 1), Some(9));
        assert_eq!(conv_out_len(3, 3, 1, 0), Some(1));
        assert_eq!(conv_out_len(2, 3, 1, 0), None);
    }

    #[test]
    fn valid_range_matches_enumeration() {
        for len in 1..8 {
            for k in 0..4 {
                for pad in 0..3 {
                    for stride in 1..4 {
                        let Some(out) = conv_out_len(len, k + 1, stride, pad) else {
                            continue;
                        };
                        let expect: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - pad as isize;
                                i >= 0 && (i as usize) < len
                            })
                            .collect();
                        let (lo, hi) = valid_range(out, len, stride, k, pad);
                        assert_eq!((lo..hi).collect::<Vec<_>>(), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = [0.0f64; 4];
        matmul(&a, &b, 2, 3, 2, &mut out);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }
}
