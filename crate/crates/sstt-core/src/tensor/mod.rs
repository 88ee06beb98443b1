//! Dense float tensors with tape-based reverse-mode differentiation.
//!
//! Every model computation goes through this module. The design is the
//! minimal one that is correct for a static-shape classifier: operations
//! record their inputs and a backward closure on construction; calling
//! [`Tensor::backward`] on a scalar loss walks the recorded graph once in
//! reverse topological order.
//!
//! Broadcasting is supported only right-aligned (numpy style) and only in
//! the shapes the model actually uses; anything else is a shape error.
//! Reduction order inside every kernel is fixed (ascending index), so
//! results are bitwise reproducible run to run. The row-parallel matmul
//! path does not change any per-element reduction order.

pub mod scalar;
pub mod serialize;

use rayon::prelude::*;
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

pub use scalar::Scalar;

const PAR_MATMUL_THRESHOLD: usize = 1 << 16;

type BackFn<E> = Box<dyn Fn(&[E])>;

struct Node<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    needs_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackFn<E>>,
}

/// Handle to one tensor in the compute graph. Cloning is cheap (shared node).
pub struct Tensor<E: Scalar>(Rc<RefCell<Node<E>>>);

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn assert_finite<E: Scalar>(op: &str, data: &[E]) {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            panic!("{op}: non-finite value {v} at flat index {i}");
        }
    }
}

/// Right-aligned broadcast of two shapes; None if incompatible.
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Strides of `shape` aligned to `out_rank`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Evaluate `f(a[i], b[i])` over the broadcast of the two operands.
fn broadcast_eval<E: Scalar>(
    a: &[E],
    a_shape: &[usize],
    b: &[E],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(E, E) -> E,
) -> Vec<E> {
    let n = numel(out_shape);
    let rank = out_shape.len();
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..n {
        out.push(f(a[ia], b[ib]));
        // odometer increment
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
        }
    }
    out
}

/// Sum `g` (of shape `from`) down to `to`, undoing a right-aligned broadcast.
fn reduce_to_shape<E: Scalar>(g: &[E], from: &[usize], to: &[usize]) -> Vec<E> {
    if from == to {
        return g.to_vec();
    }
    let rank = from.len();
    let strides = broadcast_strides(to, from);
    let mut out = vec![E::zero(); numel(to)];
    let mut coords = vec![0usize; rank];
    let mut it = 0usize;
    for v in g {
        out[it] += *v;
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            it += strides[ax];
            if coords[ax] < from[ax] {
                break;
            }
            coords[ax] = 0;
            it -= strides[ax] * from[ax];
        }
    }
    out
}

// --- raw matmul kernels, fixed reduction order over the contracted axis ---

fn mm<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    let body = |i: usize, row: &mut [E]| {
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..kk * n + n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    };
    if m * k * n >= PAR_MATMUL_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
fn mm_nt<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    let body = |i: usize, row: &mut [E]| {
        let arow = &a[i * k..i * k + k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..j * k + k];
            let mut acc = E::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            *o += acc;
        }
    };
    if m * k * n >= PAR_MATMUL_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
fn mm_tn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let brow = &b[i * n..i * n + n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let orow = &mut out[kk * n..kk * n + n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
}

fn permute_raw<E: Scalar>(data: &[E], shape: &[usize], axes: &[usize]) -> (Vec<E>, Vec<usize>) {
    let rank = shape.len();
    assert_eq!(axes.len(), rank, "permute: axes {axes:?} vs shape {shape:?}");
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // stride of output axis ax in the input layout
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..n {
        out.push(data[idx]);
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            idx += strides[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
            idx -= strides[ax] * out_shape[ax];
        }
    }
    (out, out_shape)
}

fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<E: Scalar> Tensor<E> {
    fn new_node(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        assert_eq!(numel(&shape), data.len(), "tensor: shape {shape:?} vs {} values", data.len());
        Tensor(Rc::new(RefCell::new(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            needs_grad: requires_grad,
            parents: Vec::new(),
            backward: None,
        })))
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Self {
        assert_finite("from_vec", &data);
        Self::new_node(shape.to_vec(), data, false)
    }

    /// Leaf tensor participating in gradient computation.
    pub fn param(shape: &[usize], data: Vec<E>) -> Self {
        assert_finite("param", &data);
        Self::new_node(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_node(shape.to_vec(), vec![E::zero(); numel(shape)], false)
    }

    pub fn scalar(v: E) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    fn make(op: &'static str, shape: Vec<usize>, data: Vec<E>, parents: Vec<Tensor<E>>, back: BackFn<E>) -> Self {
        assert_finite(op, &data);
        let needs = parents.iter().any(|p| p.0.borrow().needs_grad);
        let t = Self::new_node(shape, data, false);
        {
            let mut n = t.0.borrow_mut();
            n.needs_grad = needs;
            if needs {
                n.parents = parents;
                n.backward = Some(back);
            }
        }
        t
    }

    fn accum(target: &Tensor<E>, contrib: &[E]) {
        let mut n = target.0.borrow_mut();
        if !n.needs_grad {
            return;
        }
        let len = n.data.len();
        let g = n.grad.get_or_insert_with(|| vec![E::zero(); len]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += *ci;
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn data(&self) -> Vec<E> {
        self.0.borrow().data.clone()
    }

    pub fn item(&self) -> E {
        let n = self.0.borrow();
        assert_eq!(n.data.len(), 1, "item: tensor has shape {:?}", n.shape);
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Gradient buffer; zeros when the leaf was never reached by backward.
    pub fn grad(&self) -> Vec<E> {
        let n = self.0.borrow();
        n.grad.clone().unwrap_or_else(|| vec![E::zero(); n.data.len()])
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Overwrite the gradient buffer (gradient clipping path).
    pub fn set_grad(&self, grad: Vec<E>) {
        let mut n = self.0.borrow_mut();
        assert_eq!(n.data.len(), grad.len(), "set_grad: length mismatch");
        n.grad = Some(grad);
    }

    /// Replace the stored values (optimizer update path). Shape-preserving.
    pub fn set_data(&self, data: Vec<E>) {
        assert_finite("set_data", &data);
        let mut n = self.0.borrow_mut();
        assert_eq!(n.data.len(), data.len(), "set_data: length mismatch");
        n.data = data;
    }

    // ---- ops ----

    pub fn add(&self, other: &Tensor<E>) -> Tensor<E> {
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shapes(&sa, &sb)
            .unwrap_or_else(|| panic!("add: shapes {sa:?} and {sb:?} do not broadcast"));
        let data = {
            let (na, nb) = (self.0.borrow(), other.0.borrow());
            broadcast_eval(&na.data, &sa, &nb.data, &sb, &out_shape, |x, y| x + y)
        };
        let (pa, pb) = (self.clone(), other.clone());
        let os = out_shape.clone();
        Tensor::make(
            "add",
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                Tensor::accum(&pa, &reduce_to_shape(g, &os, &pa.shape()));
                Tensor::accum(&pb, &reduce_to_shape(g, &os, &pb.shape()));
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<E>) -> Tensor<E> {
        self.add(&other.scale(-E::one()))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Tensor<E> {
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shapes(&sa, &sb)
            .unwrap_or_else(|| panic!("mul: shapes {sa:?} and {sb:?} do not broadcast"));
        let data = {
            let (na, nb) = (self.0.borrow(), other.0.borrow());
            broadcast_eval(&na.data, &sa, &nb.data, &sb, &out_shape, |x, y| x * y)
        };
        let (pa, pb) = (self.clone(), other.clone());
        let os = out_shape.clone();
        Tensor::make(
            "mul",
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let (sa, sb) = (pa.shape(), pb.shape());
                let ga = {
                    let nb = pb.0.borrow();
                    broadcast_eval(g, &os, &nb.data, &sb, &os, |x, y| x * y)
                };
                Tensor::accum(&pa, &reduce_to_shape(&ga, &os, &sa));
                let gb = {
                    let na = pa.0.borrow();
                    broadcast_eval(g, &os, &na.data, &sa, &os, |x, y| x * y)
                };
                Tensor::accum(&pb, &reduce_to_shape(&gb, &os, &sb));
            }),
        )
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let data: Vec<E> = self.0.borrow().data.iter().map(|&x| x * c).collect();
        let p = self.clone();
        Tensor::make(
            "scale",
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let contrib: Vec<E> = g.iter().map(|&x| x * c).collect();
                Tensor::accum(&p, &contrib);
            }),
        )
    }

    fn matmul_inner(&self, other: &Tensor<E>, transpose_b: bool) -> Tensor<E> {
        let sa = self.shape();
        let sb = other.shape();
        assert!(sa.len() >= 2, "matmul: lhs shape {sa:?} has rank < 2");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_shared = sb.len() == 2;
        if !b_shared {
            assert_eq!(
                &sa[..sa.len() - 2],
                &sb[..sb.len() - 2],
                "matmul: batch dims of {sa:?} and {sb:?} disagree"
            );
        }
        let (bk, n) = if transpose_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        assert_eq!(k, bk, "matmul: inner dims disagree: {sa:?} vs {sb:?}");
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![E::zero(); batch * m * n];
        {
            let (na, nb) = (self.0.borrow(), other.0.borrow());
            for bi in 0..batch {
                let a_sl = &na.data[bi * m * k..(bi + 1) * m * k];
                let b_off = if b_shared { 0 } else { bi * k * n };
                let b_sl = &nb.data[b_off..b_off + k * n];
                let o_sl = &mut data[bi * m * n..(bi + 1) * m * n];
                if transpose_b {
                    mm_nt(a_sl, b_sl, m, k, n, o_sl);
                } else {
                    mm(a_sl, b_sl, m, k, n, o_sl);
                }
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::make(
            "matmul",
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let na = pa.0.borrow();
                let nb = pb.0.borrow();
                let mut ga = vec![E::zero(); na.data.len()];
                let mut gb = vec![E::zero(); nb.data.len()];
                for bi in 0..batch {
                    let g_sl = &g[bi * m * n..(bi + 1) * m * n];
                    let a_sl = &na.data[bi * m * k..(bi + 1) * m * k];
                    let b_off = if b_shared { 0 } else { bi * k * n };
                    let b_sl = &nb.data[b_off..b_off + k * n];
                    let ga_sl = &mut ga[bi * m * k..(bi + 1) * m * k];
                    let gb_sl = &mut gb[b_off..b_off + k * n];
                    if transpose_b {
                        // C = A·Bᵀ with B stored [n,k]: dA = dC·B, dB = dCᵀ·A
                        mm(g_sl, b_sl, m, n, k, ga_sl);
                        mm_tn(g_sl, a_sl, m, n, k, gb_sl);
                    } else {
                        mm_nt(g_sl, b_sl, m, n, k, ga_sl);
                        mm_tn(a_sl, g_sl, m, k, n, gb_sl);
                    }
                }
                drop(na);
                drop(nb);
                Tensor::accum(&pa, &ga);
                Tensor::accum(&pb, &gb);
            }),
        )
    }

    /// `[..., m, k] · [k, n]` (shared) or `[..., m, k] · [..., k, n]`.
    pub fn matmul(&self, other: &Tensor<E>) -> Tensor<E> {
        self.matmul_inner(other, false)
    }

    /// Same contraction with the last two axes of `other` transposed
    /// (`other` stored `[..., n, k]`), e.g. attention logits `q·kᵀ`.
    pub fn matmul_nt(&self, other: &Tensor<E>) -> Tensor<E> {
        self.matmul_inner(other, true)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<E> {
        assert_eq!(
            numel(&self.shape()),
            numel(shape),
            "reshape: {:?} -> {shape:?} changes element count",
            self.shape()
        );
        let data = self.0.borrow().data.clone();
        let p = self.clone();
        Tensor::make(
            "reshape",
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| Tensor::accum(&p, g)),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor<E> {
        let (data, out_shape) = {
            let n = self.0.borrow();
            permute_raw(&n.data, &n.shape, axes)
        };
        let p = self.clone();
        let inv = invert_axes(axes);
        let os = out_shape.clone();
        Tensor::make(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let (gp, _) = permute_raw(g, &os, &inv);
                Tensor::accum(&p, &gp);
            }),
        )
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<E> {
        let sa = self.shape();
        let out = broadcast_shapes(&sa, shape)
            .unwrap_or_else(|| panic!("broadcast_to: {sa:?} -> {shape:?}"));
        assert_eq!(&out, shape, "broadcast_to: {sa:?} does not expand to {shape:?}");
        let zero = Tensor::zeros(shape);
        self.add(&zero)
    }

    pub fn concat(&self, other: &Tensor<E>, axis: usize) -> Tensor<E> {
        let sa = self.shape();
        let sb = other.shape();
        assert_eq!(sa.len(), sb.len(), "concat: rank mismatch {sa:?} vs {sb:?}");
        for (i, (da, db)) in sa.iter().zip(&sb).enumerate() {
            if i != axis {
                assert_eq!(da, db, "concat: shapes {sa:?} and {sb:?} differ off axis {axis}");
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (la, lb) = (sa[axis], sb[axis]);
        let mut out_shape = sa.clone();
        out_shape[axis] = la + lb;
        let mut data = Vec::with_capacity(numel(&out_shape));
        {
            let (na, nb) = (self.0.borrow(), other.0.borrow());
            for o in 0..outer {
                data.extend_from_slice(&na.data[o * la * inner..(o + 1) * la * inner]);
                data.extend_from_slice(&nb.data[o * lb * inner..(o + 1) * lb * inner]);
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::make(
            "concat",
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut ga = Vec::with_capacity(outer * la * inner);
                let mut gb = Vec::with_capacity(outer * lb * inner);
                let chunk = (la + lb) * inner;
                for o in 0..outer {
                    let sl = &g[o * chunk..(o + 1) * chunk];
                    ga.extend_from_slice(&sl[..la * inner]);
                    gb.extend_from_slice(&sl[la * inner..]);
                }
                Tensor::accum(&pa, &ga);
                Tensor::accum(&pb, &gb);
            }),
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<E> {
        let s = self.shape();
        assert!(axis < s.len() && start + len <= s[axis], "narrow: axis {axis} [{start}..{}] out of {s:?}", start + len);
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = s[axis];
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        {
            let n = self.0.borrow();
            for o in 0..outer {
                let base = o * d * inner + start * inner;
                data.extend_from_slice(&n.data[base..base + len * inner]);
            }
        }
        let p = self.clone();
        Tensor::make(
            "narrow",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![E::zero(); outer * d * inner];
                for o in 0..outer {
                    let base = o * d * inner + start * inner;
                    gp[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                Tensor::accum(&p, &gp);
            }),
        )
    }

    /// Mean over one axis (axis removed from the shape).
    pub fn mean_axis(&self, axis: usize) -> Tensor<E> {
        let s = self.shape();
        assert!(axis < s.len(), "mean_axis: axis {axis} out of {s:?}");
        let outer: usize = s[..axis].iter().product();
        let mid = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let inv = E::one() / E::from_f64c(mid as f64);
        let mut data = vec![E::zero(); outer * inner];
        {
            let n = self.0.borrow();
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    for i in 0..inner {
                        data[o * inner + i] += n.data[base + i];
                    }
                }
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let p = self.clone();
        Tensor::make(
            "mean_axis",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![E::zero(); outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            gp[base + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                Tensor::accum(&p, &gp);
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let mut acc = E::zero();
        for v in &self.0.borrow().data {
            acc += *v;
        }
        let p = self.clone();
        let n = self.numel();
        Tensor::make(
            "sum_all",
            vec![1],
            vec![acc],
            vec![self.clone()],
            Box::new(move |g| {
                Tensor::accum(&p, &vec![g[0]; n]);
            }),
        )
    }

    /// Softmax along `axis`; logits are max-subtracted before exponentiation.
    pub fn softmax(&self, axis: usize) -> Tensor<E> {
        let s = self.shape();
        assert!(axis < s.len(), "softmax: axis {axis} out of {s:?}");
        if axis != s.len() - 1 {
            let mut axes: Vec<usize> = (0..s.len()).collect();
            axes.swap(axis, s.len() - 1);
            return self.permute(&axes).softmax_last().permute(&axes);
        }
        self.softmax_last()
    }

    fn softmax_last(&self) -> Tensor<E> {
        let s = self.shape();
        let lane = *s.last().expect("softmax: scalar input");
        let lanes = numel(&s) / lane;
        let mut data = Vec::with_capacity(numel(&s));
        {
            let n = self.0.borrow();
            for l in 0..lanes {
                let sl = &n.data[l * lane..(l + 1) * lane];
                let mx = sl.iter().cloned().fold(E::neg_infinity(), E::max);
                let mut sum = E::zero();
                let start = data.len();
                for &x in sl {
                    let e = (x - mx).exp();
                    sum += e;
                    data.push(e);
                }
                for v in &mut data[start..] {
                    *v = *v / sum;
                }
            }
        }
        let y = data.clone();
        let p = self.clone();
        Tensor::make(
            "softmax",
            s,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![E::zero(); y.len()];
                for l in 0..lanes {
                    let ys = &y[l * lane..(l + 1) * lane];
                    let gs = &g[l * lane..(l + 1) * lane];
                    let mut dot = E::zero();
                    for (yi, gi) in ys.iter().zip(gs) {
                        dot += *yi * *gi;
                    }
                    for i in 0..lane {
                        gp[l * lane + i] = ys[i] * (gs[i] - dot);
                    }
                }
                Tensor::accum(&p, &gp);
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta` of
    /// length C. Variance is the biased estimate.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: E) -> Tensor<E> {
        let s = self.shape();
        let c = *s.last().expect("layer_norm: scalar input");
        assert_eq!(gamma.shape(), vec![c], "layer_norm: gamma shape {:?} vs C={c}", gamma.shape());
        assert_eq!(beta.shape(), vec![c], "layer_norm: beta shape {:?} vs C={c}", beta.shape());
        assert!(eps > E::zero(), "layer_norm: eps must be positive");
        let lanes = numel(&s) / c;
        let mut xhat = Vec::with_capacity(numel(&s));
        let mut inv_std = Vec::with_capacity(lanes);
        let mut data = Vec::with_capacity(numel(&s));
        {
            let n = self.0.borrow();
            let ng = gamma.0.borrow();
            let nb = beta.0.borrow();
            let cf = E::from_f64c(c as f64);
            for l in 0..lanes {
                let sl = &n.data[l * c..(l + 1) * c];
                let mut mean = E::zero();
                for &x in sl {
                    mean += x;
                }
                mean = mean / cf;
                let mut var = E::zero();
                for &x in sl {
                    let d = x - mean;
                    var += d * d;
                }
                var = var / cf;
                let istd = E::one() / (var + eps).sqrt();
                inv_std.push(istd);
                for (i, &x) in sl.iter().enumerate() {
                    let xh = (x - mean) * istd;
                    xhat.push(xh);
                    data.push(xh * ng.data[i] + nb.data[i]);
                }
            }
        }
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::make(
            "layer_norm",
            s,
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let cf = E::from_f64c(c as f64);
                let mut gx = vec![E::zero(); xhat.len()];
                let mut gg = vec![E::zero(); c];
                let mut gb = vec![E::zero(); c];
                let gamma_data = pg.0.borrow().data.clone();
                for l in 0..lanes {
                    let xs = &xhat[l * c..(l + 1) * c];
                    let gs = &g[l * c..(l + 1) * c];
                    let istd = inv_std[l];
                    let mut mean_dxh = E::zero();
                    let mut mean_dxh_xh = E::zero();
                    for i in 0..c {
                        gg[i] += gs[i] * xs[i];
                        gb[i] += gs[i];
                        let dxh = gs[i] * gamma_data[i];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xs[i];
                    }
                    mean_dxh = mean_dxh / cf;
                    mean_dxh_xh = mean_dxh_xh / cf;
                    for i in 0..c {
                        let dxh = gs[i] * gamma_data[i];
                        gx[l * c + i] = istd * (dxh - mean_dxh - xs[i] * mean_dxh_xh);
                    }
                }
                Tensor::accum(&px, &gx);
                Tensor::accum(&pg, &gg);
                Tensor::accum(&pb, &gb);
            }),
        )
    }

    /// Exact GELU: x·Φ(x) with Φ the standard normal CDF in erf form.
    pub fn gelu(&self) -> Tensor<E> {
        let half = E::from_f64c(0.5);
        let inv_sqrt2 = E::from_f64c(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = E::from_f64c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let x = self.data();
        let data: Vec<E> = x.iter().map(|&v| v * half * (E::one() + (v * inv_sqrt2).erf())).collect();
        let p = self.clone();
        Tensor::make(
            "gelu",
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let contrib: Vec<E> = p
                    .0
                    .borrow()
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let cdf = half * (E::one() + (v * inv_sqrt2).erf());
                        let pdf = (-(v * v) * half).exp() * inv_sqrt_2pi;
                        gi * (cdf + v * pdf)
                    })
                    .collect();
                Tensor::accum(&p, &contrib);
            }),
        )
    }

    /// Toeplitz bias matrix `[H, t, t]` from per-offset entries `[H, 2K+1]`:
    /// `out[h, i, j] = offsets[h, clip(i - j, -K, K) + K]`.
    pub fn toeplitz(&self, t: usize) -> Tensor<E> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "toeplitz: expected [H, 2K+1], got {s:?}");
        let (h, w) = (s[0], s[1]);
        assert!(w % 2 == 1, "toeplitz: offset table width {w} must be odd");
        let k = (w - 1) / 2;
        let idx = move |i: usize, j: usize| -> usize {
            let off = (i as isize - j as isize).clamp(-(k as isize), k as isize);
            (off + k as isize) as usize
        };
        let mut data = Vec::with_capacity(h * t * t);
        {
            let n = self.0.borrow();
            for hh in 0..h {
                for i in 0..t {
                    for j in 0..t {
                        data.push(n.data[hh * w + idx(i, j)]);
                    }
                }
            }
        }
        let p = self.clone();
        Tensor::make(
            "toeplitz",
            vec![h, t, t],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![E::zero(); h * w];
                for hh in 0..h {
                    for i in 0..t {
                        for j in 0..t {
                            gp[hh * w + idx(i, j)] += g[(hh * t + i) * t + j];
                        }
                    }
                }
                Tensor::accum(&p, &gp);
            }),
        )
    }

    /// Mean cross-entropy of `logits [B, K]` against class indices, with
    /// optional label smoothing spreading `smoothing/K` mass uniformly.
    pub fn cross_entropy(&self, labels: &[usize], smoothing: E) -> Tensor<E> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "cross_entropy: logits shape {s:?}, expected [B, K]");
        let (b, k) = (s[0], s[1]);
        assert_eq!(labels.len(), b, "cross_entropy: {} labels for batch {b}", labels.len());
        for &l in labels {
            assert!(l < k, "cross_entropy: label {l} out of range for {k} classes");
        }
        let bf = E::from_f64c(b as f64);
        let kf = E::from_f64c(k as f64);
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = E::zero();
        {
            let n = self.0.borrow();
            for (row, &label) in labels.iter().enumerate() {
                let sl = &n.data[row * k..(row + 1) * k];
                let mx = sl.iter().cloned().fold(E::neg_infinity(), E::max);
                let mut sum = E::zero();
                for &x in sl {
                    sum += (x - mx).exp();
                }
                let lse = mx + sum.ln();
                let mut row_loss = -(E::one() - smoothing) * (sl[label] - lse);
                if smoothing > E::zero() {
                    let mut acc = E::zero();
                    for &x in sl {
                        acc += x - lse;
                    }
                    row_loss = row_loss - smoothing / kf * acc;
                }
                loss += row_loss;
                for &x in sl {
                    probs.push((x - lse).exp());
                }
            }
        }
        loss = loss / bf;
        let p = self.clone();
        let labels = labels.to_vec();
        Tensor::make(
            "cross_entropy",
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g| {
                let g0 = g[0] / bf;
                let uniform = smoothing / kf;
                let mut gp = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    for (j, v) in gp[row * k..(row + 1) * k].iter_mut().enumerate() {
                        let target = if j == label { E::one() - smoothing + uniform } else { uniform };
                        *v = (*v - target) * g0;
                    }
                }
                Tensor::accum(&p, &gp);
            }),
        )
    }

    /// Reverse pass from a scalar loss. Accumulates into leaf `grad` buffers;
    /// repeated calls without `zero_grad` add up.
    pub fn backward(&self) {
        {
            let n = self.0.borrow();
            assert_eq!(n.data.len(), 1, "backward: loss must be scalar, got shape {:?}", n.shape);
        }
        // iterative postorder DFS, reversed = reverse topological order
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.0) as usize;
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            let parents = t.0.borrow().parents.clone();
            stack.push((t, true));
            for p in parents {
                if !visited.contains(&(Rc::as_ptr(&p.0) as usize)) {
                    stack.push((p, false));
                }
            }
        }
        {
            let mut n = self.0.borrow_mut();
            let g = n.grad.get_or_insert_with(|| vec![E::zero()]);
            g[0] += E::one();
        }
        for t in order.iter().rev() {
            let n = t.0.borrow();
            if !n.needs_grad {
                continue;
            }
            if let (Some(back), Some(grad)) = (&n.backward, &n.grad) {
                back(grad);
            }
        }
    }
}
