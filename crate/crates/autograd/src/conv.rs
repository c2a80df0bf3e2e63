//! 2-D convolution (single image, CHW layout) with zero padding, lowered to
//! im2col + GEMM so the multiply-accumulate runs over contiguous rows.

use rayon::prelude::*;

use crate::tape::{BackwardOp, Var};
use crate::{Real, Tensor};

#[derive(Clone, Copy)]
struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Output-column range where the sampled input column is in bounds.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let hi_num = self.w + self.pad - kx;
        let hi = if hi_num == 0 {
            0
        } else {
            ((hi_num - 1) / self.stride + 1).min(self.wo)
        };
        (lo.min(hi), hi)
    }
}

/// Patch matrix [K, Ho*Wo] with zero padding materialized.
fn im2col<T: Real>(x: &[T], d: ConvDims) -> Vec<T> {
    let k = d.k();
    let hw = d.ho * d.wo;
    let mut pt = vec![T::zero(); k * hw];
    pt.par_chunks_mut(d.kh * d.kw * hw)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let xplane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let row = &mut chunk[(ky * d.kw + kx) * hw..(ky * d.kw + kx + 1) * hw];
                    let (ox_lo, ox_hi) = d.ox_range(kx);
                    let base = kx as isize - d.pad as isize;
                    for oy in 0..d.ho {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                        if d.stride == 1 {
                            let ix0 = (ox_lo as isize + base) as usize;
                            dst[ox_lo..ox_hi].copy_from_slice(&xrow[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for (ox, slot) in dst.iter_mut().enumerate().take(ox_hi).skip(ox_lo)
                            {
                                let ix = (ox * d.stride) as isize + base;
                                *slot = xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        });
    pt
}

/// Scatter-add of a patch-matrix gradient back into image layout.
fn col2im<T: Real>(dpt: &[T], d: ConvDims) -> Tensor<T> {
    let hw = d.ho * d.wo;
    let mut dx = Tensor::zeros(&[d.c_in, d.h, d.w]);
    dx.data_mut()
        .par_chunks_mut(d.h * d.w)
        .enumerate()
        .for_each(|(ci, plane)| {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let row =
                        &dpt[((ci * d.kh + ky) * d.kw + kx) * hw..((ci * d.kh + ky) * d.kw + kx + 1) * hw];
                    let (ox_lo, ox_hi) = d.ox_range(kx);
                    let base = kx as isize - d.pad as isize;
                    for oy in 0..d.ho {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let xrow = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let src = &row[oy * d.wo..(oy + 1) * d.wo];
                        if d.stride == 1 {
                            let ix0 = (ox_lo as isize + base) as usize;
                            for (xv, &gv) in
                                xrow[ix0..ix0 + (ox_hi - ox_lo)].iter_mut().zip(&src[ox_lo..ox_hi])
                            {
                                *xv += gv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * d.stride) as isize + base;
                                xrow[ix as usize] += src[ox];
                            }
                        }
                    }
                }
            }
        });
    dx
}

fn conv_forward<T: Real>(x: &[T], wgt: &[T], bias: &[T], d: ConvDims) -> Tensor<T> {
    let k = d.k();
    let hw = d.ho * d.wo;
    let pt = im2col(x, d);
    let mut out = Tensor::zeros(&[d.c_out, d.ho, d.wo]);
    out.data_mut().par_chunks_mut(hw).enumerate().for_each(|(co, plane)| {
        for v in plane.iter_mut() {
            *v = bias[co];
        }
        let wrow = &wgt[co * k..(co + 1) * k];
        for (p, &wv) in wrow.iter().enumerate() {
            if wv == T::zero() {
                continue;
            }
            let prow = &pt[p * hw..(p + 1) * hw];
            for (o, &pv) in plane.iter_mut().zip(prow) {
                *o += wv * pv;
            }
        }
    });
    out
}

struct ConvBack(ConvDims);

impl<T: Real> BackwardOp<T> for ConvBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let d = self.0;
        let k = d.k();
        let hw = d.ho * d.wo;
        let x = inputs[0].data();
        let wgt = inputs[1].data();
        let gd = g.data();

        let needs_pt = needs[1];
        let pt = if needs_pt { im2col(x, d) } else { Vec::new() };

        let dx = needs[0].then(|| {
            // dPT = W^T G, rows parallel over K
            let mut dpt = vec![T::zero(); k * hw];
            dpt.par_chunks_mut(hw).enumerate().for_each(|(p, row)| {
                for co in 0..d.c_out {
                    let wv = wgt[co * k + p];
                    if wv == T::zero() {
                        continue;
                    }
                    let grow = &gd[co * hw..(co + 1) * hw];
                    for (r, &gv) in row.iter_mut().zip(grow) {
                        *r += wv * gv;
                    }
                }
            });
            col2im(&dpt, d)
        });

        let dw = needs[1].then(|| {
            // dW = G PT^T, rows parallel over Cout
            let mut dw = Tensor::zeros(&[d.c_out, d.c_in, d.kh, d.kw]);
            dw.data_mut().par_chunks_mut(k).enumerate().for_each(|(co, wrow)| {
                let grow = &gd[co * hw..(co + 1) * hw];
                for (p, slot) in wrow.iter_mut().enumerate() {
                    let prow = &pt[p * hw..(p + 1) * hw];
                    let mut acc = T::zero();
                    for (&gv, &pv) in grow.iter().zip(prow) {
                        acc += gv * pv;
                    }
                    *slot = acc;
                }
            });
            dw
        });

        let db = needs[2].then(|| {
            let mut db = Tensor::zeros(&[d.c_out]);
            for co in 0..d.c_out {
                let mut s = T::zero();
                for &gv in &gd[co * hw..(co + 1) * hw] {
                    s += gv;
                }
                db.data_mut()[co] = s;
            }
            db
        });

        vec![dx, dw, db]
    }
}

/// `x: [Cin,H,W]`, `w: [Cout,Cin,kh,kw]`, `b: [Cout]`.
pub fn conv2d<'t, T: Real>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Var<'t, T>,
    stride: usize,
    pad: usize,
) -> Var<'t, T> {
    let tape = x.tape;
    let (out, dims) = {
        let vx = tape.value(x);
        let vw = tape.value(w);
        let vb = tape.value(b);
        let xs = vx.shape();
        let ws = vw.shape();
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout,Cin,kh,kw]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        assert_eq!(vb.numel(), ws[0]);
        let (h, w_) = (xs[1], xs[2]);
        let (kh, kw) = (ws[2], ws[3]);
        assert!(h + 2 * pad >= kh && w_ + 2 * pad >= kw, "kernel larger than input");
        let dims = ConvDims {
            c_in: xs[0],
            h,
            w: w_,
            c_out: ws[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w_ + 2 * pad - kw) / stride + 1,
        };
        (conv_forward(vx.data(), vw.data(), vb.data(), dims), dims)
    };
    tape.custom(&[x, w, b], out, Box::new(ConvBack(dims)))
}

struct MeanSpatialBack {
    c: usize,
    h: usize,
    w: usize,
}
impl<T: Real> BackwardOp<T> for MeanSpatialBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let d = needs[0].then(|| {
            let inv = T::one() / T::from_f64_lossy((self.h * self.w) as f64);
            let mut t = Tensor::zeros(&[self.c, self.h, self.w]);
            for c in 0..self.c {
                let gv = g.data()[c] * inv;
                for x in &mut t.data_mut()[c * self.h * self.w..(c + 1) * self.h * self.w] {
                    *x = gv;
                }
            }
            t
        });
        vec![d]
    }
}

/// Global average pool `[C,H,W] -> [C]`.
pub fn mean_spatial<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let tape = x.tape;
    let (out, c, h, w) = {
        let v = tape.value(x);
        let s = v.shape();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let inv = T::from_f64_lossy((h * w) as f64).recip();
        let mut out = Tensor::zeros(&[c]);
        for ch in 0..c {
            let mut acc = T::zero();
            for &v in &v.data()[ch * h * w..(ch + 1) * h * w] {
                acc += v;
            }
            out.data_mut()[ch] = acc * inv;
        }
        (out, c, h, w)
    };
    tape.custom(&[x], out, Box::new(MeanSpatialBack { c, h, w }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;
    use crate::Tape;

    #[test]
    fn conv_identity_kernel() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 3, 3], (1..=9).map(|v| v as f64).collect()));
        let w = tape.leaf(Tensor::new(&[1, 1, 1, 1], vec![2.0]));
        let b = tape.leaf(Tensor::new(&[1], vec![1.0]));
        let y = conv2d(x, w, b, 1, 0);
        let v = y.value_clone();
        assert_eq!(v.shape(), &[1, 3, 3]);
        assert_eq!(v.data()[0], 3.0);
        assert_eq!(v.data()[8], 19.0);
        tape.backward(sum_all(y));
        let gw = tape.grad(w).unwrap();
        assert_eq!(gw.data()[0], 45.0);
        let gb = tape.grad(b).unwrap();
        assert_eq!(gb.data()[0], 9.0);
        let gx = tape.grad(x).unwrap();
        assert!(gx.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_stride_and_pad_shapes() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 8, 8]));
        let w = tape.leaf(Tensor::zeros(&[4, 2, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = conv2d(x, w, b, 2, 1);
        assert_eq!(y.value().shape(), &[4, 4, 4]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        use crate::gradcheck::{max_rel_error, numeric_grads};
        use crate::ops::mean_all;
        let mut state = 1u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0), (2, 0)] {
            let x0 = Tensor::new(&[2, 6, 6], (0..72).map(|_| next()).collect());
            let w0 = Tensor::new(&[3, 2, 3, 3], (0..54).map(|_| next()).collect());
            let b0 = Tensor::new(&[3], (0..3).map(|_| next()).collect());
            let inputs = vec![x0, w0, b0];
            let mut f = |inp: &[Tensor<f64>]| {
                let tape: Tape<f64> = Tape::new();
                let x = tape.leaf(inp[0].clone());
                let w = tape.leaf(inp[1].clone());
                let b = tape.leaf(inp[2].clone());
                mean_all(conv2d(x, w, b, stride, pad)).value_clone().data()[0]
            };
            let numeric = numeric_grads(&mut f, &inputs, 1e-6);
            let tape: Tape<f64> = Tape::new();
            let x = tape.leaf(inputs[0].clone());
            let w = tape.leaf(inputs[1].clone());
            let b = tape.leaf(inputs[2].clone());
            tape.backward(mean_all(conv2d(x, w, b, stride, pad)));
            for (i, var) in [x, w, b].into_iter().enumerate() {
                let err = max_rel_error(&var.grad().unwrap(), &numeric[i], 1e-10);
                assert!(err < 1e-6, "stride {stride} pad {pad} input {i}: {err}");
            }
        }
    }

    #[test]
    fn mean_spatial_grad() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]));
        let y = mean_spatial(x);
        assert_eq!(y.value_clone().data(), &[2.0, 6.0]);
        tape.backward(sum_all(y));
        assert_eq!(tape.grad(x).unwrap().data(), &[0.5, 0.5, 0.5, 0.5]);
    }
}
