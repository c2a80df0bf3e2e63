//! Elementwise, reduction, and structural ops on tape variables.

use rayon::prelude::*;

use crate::tape::{BackwardOp, Var};
use crate::{real, Real, Tensor};

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

struct AddBack;
impl<T: Real> BackwardOp<T> for AddBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| g.clone()),
        ]
    }
}

struct SubBack;
impl<T: Real> BackwardOp<T> for SubBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| g.map(|x| -x)),
        ]
    }
}

struct MulBack;
impl<T: Real> BackwardOp<T> for MulBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let da = needs[0].then(|| {
            let mut d = g.clone();
            for (x, b) in d.data_mut().iter_mut().zip(inputs[1].data()) {
                *x *= *b;
            }
            d
        });
        let db = needs[1].then(|| {
            let mut d = g.clone();
            for (x, a) in d.data_mut().iter_mut().zip(inputs[0].data()) {
                *x *= *a;
            }
            d
        });
        vec![da, db]
    }
}

fn binary_same_shape<'t, T: Real>(
    a: Var<'t, T>,
    b: Var<'t, T>,
    f: impl Fn(T, T) -> T,
    op: Box<dyn BackwardOp<T>>,
) -> Var<'t, T> {
    let tape = a.tape;
    let out = {
        let va = tape.value(a);
        let vb = tape.value(b);
        assert_eq!(va.shape(), vb.shape(), "shape mismatch in binary op");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    };
    tape.custom(&[a, b], out, op)
}

pub fn add<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    binary_same_shape(a, b, |x, y| x + y, Box::new(AddBack))
}

pub fn sub<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    binary_same_shape(a, b, |x, y| x - y, Box::new(SubBack))
}

pub fn mul<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    binary_same_shape(a, b, |x, y| x * y, Box::new(MulBack))
}

// ---------------------------------------------------------------------------
// elementwise with constants
// ---------------------------------------------------------------------------

struct ScaleBack<T>(T);
impl<T: Real> BackwardOp<T> for ScaleBack<T> {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let s = self.0;
        vec![needs[0].then(|| g.map(|x| x * s))]
    }
}

pub fn scale<'t, T: Real>(a: Var<'t, T>, s: T) -> Var<'t, T> {
    let out = a.value().map(|x| x * s);
    a.tape.custom(&[a], out, Box::new(ScaleBack(s)))
}

pub fn add_scalar<'t, T: Real>(a: Var<'t, T>, c: T) -> Var<'t, T> {
    let out = a.value().map(|x| x + c);
    a.tape.custom(&[a], out, Box::new(ScaleBack(T::one())))
}

struct MulConstBack<T>(Tensor<T>);
impl<T: Real> BackwardOp<T> for MulConstBack<T> {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let d = needs[0].then(|| {
            let mut d = g.clone();
            for (x, k) in d.data_mut().iter_mut().zip(self.0.data()) {
                *x *= *k;
            }
            d
        });
        vec![d]
    }
}

/// Hadamard product with a constant tensor (masks, fixed noise, ...).
pub fn mul_const<'t, T: Real>(a: Var<'t, T>, k: &Tensor<T>) -> Var<'t, T> {
    let out = {
        let va = a.value();
        assert_eq!(va.shape(), k.shape());
        let data = va.data().iter().zip(k.data()).map(|(&x, &y)| x * y).collect();
        Tensor::new(va.shape(), data)
    };
    a.tape.custom(&[a], out, Box::new(MulConstBack(k.clone())))
}

/// `a + k` for a constant tensor `k`.
pub fn add_const<'t, T: Real>(a: Var<'t, T>, k: &Tensor<T>) -> Var<'t, T> {
    let out = {
        let va = a.value();
        assert_eq!(va.shape(), k.shape());
        let data = va.data().iter().zip(k.data()).map(|(&x, &y)| x + y).collect();
        Tensor::new(va.shape(), data)
    };
    a.tape.custom(&[a], out, Box::new(ScaleBack(T::one())))
}

/// Multiply an entire tensor by a scalar variable (shape `[1]`).
struct MulScalarVarBack;
impl<T: Real> BackwardOp<T> for MulScalarVarBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let s = inputs[1].data()[0];
        let da = needs[0].then(|| g.map(|x| x * s));
        let ds = needs[1].then(|| {
            let dot = g
                .data()
                .iter()
                .zip(inputs[0].data())
                .map(|(&gx, &ax)| gx * ax)
                .sum();
            Tensor::scalar(dot)
        });
        vec![da, ds]
    }
}

pub fn mul_scalar_var<'t, T: Real>(a: Var<'t, T>, s: Var<'t, T>) -> Var<'t, T> {
    let tape = a.tape;
    let out = {
        let va = tape.value(a);
        let vs = tape.value(s);
        assert_eq!(vs.numel(), 1);
        va.map(|x| x * vs.data()[0])
    };
    tape.custom(&[a, s], out, Box::new(MulScalarVarBack))
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Clamp(f64, f64),
}

struct UnaryBack(Unary);
impl<T: Real> BackwardOp<T> for UnaryBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        inputs: &[&Tensor<T>],
        out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let mut d = g.clone();
        match self.0 {
            Unary::Relu => {
                for (x, &y) in d.data_mut().iter_mut().zip(out.data()) {
                    if y <= T::zero() {
                        *x = T::zero();
                    }
                }
            }
            Unary::Tanh => {
                for (x, &y) in d.data_mut().iter_mut().zip(out.data()) {
                    *x *= T::one() - y * y;
                }
            }
            Unary::Sigmoid => {
                for (x, &y) in d.data_mut().iter_mut().zip(out.data()) {
                    *x *= y * (T::one() - y);
                }
            }
            Unary::Softplus => {
                // d softplus(x) = sigmoid(x)
                for (x, &v) in d.data_mut().iter_mut().zip(inputs[0].data()) {
                    *x *= sigmoid_scalar(v);
                }
            }
            Unary::Clamp(lo, hi) => {
                let lo = real::<T>(lo);
                let hi = real::<T>(hi);
                for (x, &v) in d.data_mut().iter_mut().zip(inputs[0].data()) {
                    if v < lo || v > hi {
                        *x = T::zero();
                    }
                }
            }
        }
        vec![Some(d)]
    }
}

fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_scalar<T: Real>(x: T) -> T {
    // ln(1 + e^x), stable for large |x|
    if x > real(30.0) {
        x
    } else if x < real(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn relu<'t, T: Real>(a: Var<'t, T>) -> Var<'t, T> {
    let out = a.value().map(|x| if x > T::zero() { x } else { T::zero() });
    a.tape.custom(&[a], out, Box::new(UnaryBack(Unary::Relu)))
}

pub fn tanh<'t, T: Real>(a: Var<'t, T>) -> Var<'t, T> {
    let out = a.value().map(|x| x.tanh());
    a.tape.custom(&[a], out, Box::new(UnaryBack(Unary::Tanh)))
}

pub fn sigmoid<'t, T: Real>(a: Var<'t, T>) -> Var<'t, T> {
    let out = a.value().map(sigmoid_scalar);
    a.tape.custom(&[a], out, Box::new(UnaryBack(Unary::Sigmoid)))
}

pub fn softplus<'t, T: Real>(a: Var<'t, T>) -> Var<'t, T> {
    let out = a.value().map(softplus_scalar);
    a.tape.custom(&[a], out, Box::new(UnaryBack(Unary::Softplus)))
}

/// Clamp with zero gradient outside `[lo, hi]`.
pub fn clamp<'t, T: Real>(a: Var<'t, T>, lo: f64, hi: f64) -> Var<'t, T> {
    let tlo = real::<T>(lo);
    let thi = real::<T>(hi);
    let out = a.value().map(|x| x.max(tlo).min(thi));
    a.tape.custom(&[a], out, Box::new(UnaryBack(Unary::Clamp(lo, hi))))
}

pub fn clamp_min<'t, T: Real>(a: Var<'t, T>, lo: f64) -> Var<'t, T> {
    clamp(a, lo, f64::INFINITY)
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

struct MeanBack<T>(T, Vec<usize>);
impl<T: Real> BackwardOp<T> for MeanBack<T> {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let gv = g.data()[0] * self.0;
        vec![needs[0].then(|| Tensor::full(&self.1, gv))]
    }
}

pub fn sum_all<'t, T: Real>(a: Var<'t, T>) -> Var<'t, T> {
    let (out, shape) = {
        let v = a.value();
        (Tensor::scalar(v.sum()), v.shape().to_vec())
    };
    a.tape.custom(&[a], out, Box::new(MeanBack(T::one(), shape)))
}

pub fn mean_all<'t, T: Real>(a: Var<'t, T>) -> Var<'t, T> {
    let (out, shape, n) = {
        let v = a.value();
        let n = real::<T>(v.numel() as f64);
        (Tensor::scalar(v.sum() / n), v.shape().to_vec(), n)
    };
    a.tape.custom(&[a], out, Box::new(MeanBack(T::one() / n, shape)))
}

/// Mean squared error between two same-shape variables (scalar output).
pub fn mse<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    let d = sub(a, b);
    mean_all(mul(d, d))
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

struct MatmulBack;
impl<T: Real> BackwardOp<T> for MatmulBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let a = inputs[0];
        let b = inputs[1];
        let (n, k) = (a.rows(), a.cols());
        let m = b.cols();
        // dA = G B^T
        let da = needs[0].then(|| {
            let mut out = Tensor::zeros(&[n, k]);
            matmul_nt(g.data(), b.data(), out.data_mut(), n, m, k);
            out
        });
        // dB = A^T G
        let db = needs[1].then(|| {
            let mut out = Tensor::zeros(&[k, m]);
            matmul_tn(a.data(), g.data(), out.data_mut(), n, k, m);
            out
        });
        vec![da, db]
    }
}

/// c[n,m] = a[n,k] * b[k,m]
fn matmul_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], _n: usize, k: usize, m: usize) {
    c.par_chunks_mut(m).enumerate().for_each(|(i, crow)| {
        for x in crow.iter_mut() {
            *x = T::zero();
        }
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (x, &bv) in crow.iter_mut().zip(brow) {
                *x += av * bv;
            }
        }
    });
}

/// c[n,k] = g[n,m] * b[k,m]^T
fn matmul_nt<T: Real>(g: &[T], b: &[T], c: &mut [T], _n: usize, m: usize, k: usize) {
    c.par_chunks_mut(k).enumerate().for_each(|(i, crow)| {
        let grow = &g[i * m..(i + 1) * m];
        for (p, x) in crow.iter_mut().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            let mut s = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *x = s;
        }
    });
}

/// c[k,m] = a[n,k]^T * g[n,m]
fn matmul_tn<T: Real>(a: &[T], g: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    c.par_chunks_mut(m).enumerate().for_each(|(p, crow)| {
        for x in crow.iter_mut() {
            *x = T::zero();
        }
        for i in 0..n {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let grow = &g[i * m..(i + 1) * m];
            for (x, &gv) in crow.iter_mut().zip(grow) {
                *x += av * gv;
            }
        }
    });
}

pub fn matmul<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    let tape = a.tape;
    let out = {
        let va = tape.value(a);
        let vb = tape.value(b);
        let (n, k) = (va.rows(), va.cols());
        assert_eq!(k, vb.rows(), "matmul inner dim mismatch");
        let m = vb.cols();
        let mut out = Tensor::zeros(&[n, m]);
        matmul_nn(va.data(), vb.data(), out.data_mut(), n, k, m);
        out
    };
    tape.custom(&[a, b], out, Box::new(MatmulBack))
}

struct AddRowBiasBack;
impl<T: Real> BackwardOp<T> for AddRowBiasBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let da = needs[0].then(|| g.clone());
        let db = needs[1].then(|| {
            let d = g.cols();
            let mut acc = Tensor::zeros(&[d]);
            for r in 0..g.rows() {
                for (x, &gv) in acc.data_mut().iter_mut().zip(g.row(r)) {
                    *x += gv;
                }
            }
            acc
        });
        vec![da, db]
    }
}

/// `[n,d] + [d]` with row broadcast.
pub fn add_row_bias<'t, T: Real>(a: Var<'t, T>, bias: Var<'t, T>) -> Var<'t, T> {
    let tape = a.tape;
    let out = {
        let va = tape.value(a);
        let vb = tape.value(bias);
        assert_eq!(va.cols(), vb.numel());
        let mut out = va.clone();
        let d = vb.numel();
        for r in 0..out.rows() {
            for (x, &b) in out.row_mut(r).iter_mut().zip(&vb.data()[..d]) {
                *x += b;
            }
        }
        out
    };
    tape.custom(&[a, bias], out, Box::new(AddRowBiasBack))
}

/// Fully connected layer: `x[n,din] * w[din,dout] + b[dout]`.
pub fn linear<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    add_row_bias(matmul(x, w), b)
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

struct ConcatColsBack(Vec<usize>);
impl<T: Real> BackwardOp<T> for ConcatColsBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let n = g.rows();
        let mut outs = Vec::with_capacity(self.0.len());
        let mut start = 0;
        for (i, &w) in self.0.iter().enumerate() {
            if needs[i] {
                let mut t = Tensor::zeros(&[n, w]);
                for r in 0..n {
                    t.row_mut(r).copy_from_slice(&g.row(r)[start..start + w]);
                }
                outs.push(Some(t));
            } else {
                outs.push(None);
            }
            start += w;
        }
        outs
    }
}

pub fn concat_cols<'t, T: Real>(parts: &[Var<'t, T>]) -> Var<'t, T> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let (out, widths) = {
        let vals: Vec<_> = parts.iter().map(|p| tape.value(*p)).collect();
        let n = vals[0].rows();
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, total]);
        for r in 0..n {
            let mut start = 0;
            for v in &vals {
                let w = v.cols();
                out.row_mut(r)[start..start + w].copy_from_slice(v.row(r));
                start += w;
            }
        }
        (out, widths)
    };
    tape.custom(parts, out, Box::new(ConcatColsBack(widths)))
}

struct SliceColsBack {
    start: usize,
    full: usize,
}
impl<T: Real> BackwardOp<T> for SliceColsBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let d = needs[0].then(|| {
            let n = g.rows();
            let w = g.cols();
            let mut t = Tensor::zeros(&[n, self.full]);
            for r in 0..n {
                t.row_mut(r)[self.start..self.start + w].copy_from_slice(g.row(r));
            }
            t
        });
        vec![d]
    }
}

pub fn slice_cols<'t, T: Real>(a: Var<'t, T>, start: usize, end: usize) -> Var<'t, T> {
    let tape = a.tape;
    let (out, full) = {
        let v = tape.value(a);
        let n = v.rows();
        let full = v.cols();
        assert!(start <= end && end <= full);
        let mut out = Tensor::zeros(&[n, end - start]);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..end]);
        }
        (out, full)
    };
    tape.custom(&[a], out, Box::new(SliceColsBack { start, full }))
}

struct GatherRowsBack {
    idx: Vec<usize>,
    full_rows: usize,
}
impl<T: Real> BackwardOp<T> for GatherRowsBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let d = needs[0].then(|| {
            let w = g.cols();
            let mut t = Tensor::zeros(&[self.full_rows, w]);
            for (r, &src) in self.idx.iter().enumerate() {
                for (x, &gv) in t.row_mut(src).iter_mut().zip(g.row(r)) {
                    *x += gv;
                }
            }
            t
        });
        vec![d]
    }
}

/// Select (and possibly repeat) rows; backward scatter-adds.
pub fn gather_rows<'t, T: Real>(a: Var<'t, T>, idx: &[usize]) -> Var<'t, T> {
    let tape = a.tape;
    let (out, full_rows) = {
        let v = tape.value(a);
        let w = v.cols();
        let mut out = Tensor::zeros(&[idx.len(), w]);
        for (r, &src) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(v.row(src));
        }
        (out, v.rows())
    };
    tape.custom(
        &[a],
        out,
        Box::new(GatherRowsBack { idx: idx.to_vec(), full_rows }),
    )
}

struct SegmentMaxBack {
    argmax: Vec<usize>, // flat [n_seg * d] row index of winner
    in_rows: usize,
}
impl<T: Real> BackwardOp<T> for SegmentMaxBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let d = needs[0].then(|| {
            let w = g.cols();
            let mut t = Tensor::zeros(&[self.in_rows, w]);
            for s in 0..g.rows() {
                for c in 0..w {
                    let winner = self.argmax[s * w + c];
                    if winner != usize::MAX {
                        let v = t.at2(winner, c) + g.at2(s, c);
                        t.set2(winner, c, v);
                    }
                }
            }
            t
        });
        vec![d]
    }
}

/// Column-wise max over row segments. Empty segments yield zeros and get no
/// gradient. Ties go to the lowest row index, which keeps backward
/// deterministic.
pub fn segment_max<'t, T: Real>(a: Var<'t, T>, seg: &[usize], n_seg: usize) -> Var<'t, T> {
    let tape = a.tape;
    let (out, argmax, in_rows) = {
        let v = tape.value(a);
        assert_eq!(seg.len(), v.rows());
        let w = v.cols();
        let mut out = Tensor::zeros(&[n_seg, w]);
        let mut argmax = vec![usize::MAX; n_seg * w];
        for (r, &s) in seg.iter().enumerate() {
            assert!(s < n_seg);
            for c in 0..w {
                let val = v.at2(r, c);
                let slot = s * w + c;
                if argmax[slot] == usize::MAX || val > out.at2(s, c) {
                    out.set2(s, c, val);
                    argmax[slot] = r;
                }
            }
        }
        (out, argmax, v.rows())
    };
    tape.custom(&[a], out, Box::new(SegmentMaxBack { argmax, in_rows }))
}

struct ReshapeBack(Vec<usize>);
impl<T: Real> BackwardOp<T> for ReshapeBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| g.clone().reshaped(&self.0))]
    }
}

pub fn reshape<'t, T: Real>(a: Var<'t, T>, shape: &[usize]) -> Var<'t, T> {
    let (out, old) = {
        let v = a.value();
        (v.clone().reshaped(shape), v.shape().to_vec())
    };
    a.tape.custom(&[a], out, Box::new(ReshapeBack(old)))
}

struct PermuteBack {
    // dst index -> src index of the forward permutation
    fwd: Vec<usize>,
    in_shape: Vec<usize>,
}
impl<T: Real> BackwardOp<T> for PermuteBack {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let d = needs[0].then(|| {
            let mut t = Tensor::zeros(&self.in_shape);
            for (dst, &src) in self.fwd.iter().enumerate() {
                t.data_mut()[src] = g.data()[dst];
            }
            t
        });
        vec![d]
    }
}

/// Stack two matrices with equal column counts along dim 0. Row-major data
/// makes this a flat concatenation.
pub fn concat_rows<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    let (ra, rb, c) = {
        let va = a.value();
        let vb = b.value();
        assert_eq!(va.cols(), vb.cols(), "concat_rows column mismatch");
        (va.rows(), vb.rows(), va.cols())
    };
    let flat = concat_cols(&[reshape(a, &[1, ra * c]), reshape(b, &[1, rb * c])]);
    reshape(flat, &[ra + rb, c])
}

/// `[C,H,W]` feature layout back to an `[H,W,C]` image.
pub fn chw_to_hwc<'t, T: Real>(a: Var<'t, T>) -> Var<'t, T> {
    let (out, fwd, in_shape) = {
        let v = a.value();
        let s = v.shape();
        assert_eq!(s.len(), 3, "expected [C,H,W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut fwd = vec![0usize; h * w * c];
        let mut out = Tensor::zeros(&[h, w, c]);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let dst = (y * w + x) * c + ch;
                    let src = ch * h * w + y * w + x;
                    fwd[dst] = src;
                    out.data_mut()[dst] = v.data()[src];
                }
            }
        }
        (out, fwd, s.to_vec())
    };
    a.tape.custom(&[a], out, Box::new(PermuteBack { fwd, in_shape }))
}

/// `[H,W,3]` image to `[3,H,W]` feature layout.
pub fn hwc_to_chw<'t, T: Real>(a: Var<'t, T>) -> Var<'t, T> {
    let (out, fwd, in_shape) = {
        let v = a.value();
        let s = v.shape();
        assert_eq!(s.len(), 3, "expected [H,W,C]");
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut fwd = vec![0usize; h * w * c];
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let dst = ch * h * w + y * w + x;
                    let src = (y * w + x) * c + ch;
                    fwd[dst] = src;
                    out.data_mut()[dst] = v.data()[src];
                }
            }
        }
        (out, fwd, s.to_vec())
    };
    a.tape.custom(&[a], out, Box::new(PermuteBack { fwd, in_shape }))
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
