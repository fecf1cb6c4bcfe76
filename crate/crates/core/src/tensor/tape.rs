use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// Right operand repeats with period `len` (its shape is a suffix of the left one).
    Suffix(usize),
    /// Explicit index into the right operand for every element of the output.
    Map(Vec<usize>),
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        p: usize,
        q: usize,
        r: usize,
        /// (a offset, b offset) per output batch entry.
        offsets: Vec<(usize, usize)>,
    },
    Add {
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddConst {
        a: Var,
    },
    Permute {
        a: Var,
        /// Source flat index for every output element.
        gather: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Softmax {
        a: Var,
        width: usize,
    },
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        width: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    SumAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Huber {
        a: Var,
        delta: T,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// topological order for the backward sweep. A tape is single-threaded; run
/// independent forward passes on independent tapes.
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + fast_tanh(k * (x + c * x * x * x)))
}

// tanh through a single exp, cheaper than the libm routine
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / (T::one() + (two * u).exp())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = fast_tanh(k * (x + c * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

// c[p,r] += a[p,q] * b[q,r]
fn gemm_nn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], p: usize, q: usize, r: usize) {
    match r {
        16 => return gemm_nn_fixed::<T, 16>(c, a, b, p, q),
        32 => return gemm_nn_fixed::<T, 32>(c, a, b, p, q),
        _ => {}
    }
    for i in 0..p {
        let crow = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let av = a[i * q + k];
            if av == T::zero() {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// row accumulator kept in registers for the common narrow widths
fn gemm_nn_fixed<T: Scalar, const R: usize>(c: &mut [T], a: &[T], b: &[T], p: usize, q: usize) {
    for (crow, arow) in c.chunks_exact_mut(R).zip(a.chunks_exact(q)).take(p) {
        let mut acc = [T::zero(); R];
        for (&av, brow) in arow.iter().zip(b.chunks_exact(R)) {
            for j in 0..R {
                acc[j] += av * brow[j];
            }
        }
        for j in 0..R {
            crow[j] += acc[j];
        }
    }
}

// da[p,q] += dc[p,r] * b[q,r]^T, via an explicit transpose so the inner loop is an axpy
fn gemm_nt<T: Scalar>(da: &mut [T], dc: &[T], b: &[T], p: usize, q: usize, r: usize) {
    let mut bt = vec![T::zero(); q * r];
    for k in 0..q {
        for j in 0..r {
            bt[j * q + k] = b[k * r + j];
        }
    }
    gemm_nn(da, dc, &bt, p, r, q);
}

// db[q,r] += a[p,q]^T * dc[p,r]
fn gemm_tn<T: Scalar>(db: &mut [T], a: &[T], dc: &[T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let dcrow = &dc[i * r..(i + 1) * r];
        for k in 0..q {
            let av = a[i * q + k];
            if av == T::zero() {
                continue;
            }
            let dbrow = &mut db[k * r..(k + 1) * r];
            for (d, &g) in dbrow.iter_mut().zip(dcrow) {
                *d += av * g;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned broadcast of `small` into `big`; returns `None` when incompatible.
fn broadcast_plan(big: &[usize], small: &[usize]) -> Option<Bcast> {
    if big == small {
        return Some(Bcast::Same);
    }
    if small.len() > big.len() {
        return None;
    }
    let off = big.len() - small.len();
    for (i, &s) in small.iter().enumerate() {
        if s != big[off + i] && s != 1 {
            return None;
        }
    }
    if &big[off..] == small {
        return Some(Bcast::Suffix(numel(small)));
    }
    let n = numel(big);
    let sstr = strides(small);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; big.len()];
    for _ in 0..n {
        let mut j = 0;
        for (i, &s) in small.iter().enumerate() {
            if s != 1 {
                j += idx[off + i] * sstr[i];
            }
        }
        map.push(j);
        for ax in (0..big.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < big[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Some(Bcast::Map(map))
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; its gradient is tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a constant leaf from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Batched matrix product `[..., p, q] x [..., q, r] -> [..., p, r]`.
    /// Leading batch axes broadcast numpy-style.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(err());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let mut batch = vec![0usize; rank];
        for i in 0..rank {
            let da = if i + ba.len() >= rank { ba[i + ba.len() - rank] } else { 1 };
            let db = if i + bb.len() >= rank { bb[i + bb.len() - rank] } else { 1 };
            batch[i] = if da == db || db == 1 {
                da
            } else if da == 1 {
                db
            } else {
                return Err(err());
            };
        }
        let nbatch = numel(&batch);
        let astr = strides(ba);
        let bstr = strides(bb);
        // an unbatched right operand lets the whole left operand run as one product
        let collapse = numel(bb) == 1 && numel(ba) == nbatch;
        let rows = if collapse { nbatch * p } else { p };
        let mut offsets = Vec::with_capacity(if collapse { 1 } else { nbatch });
        let mut idx = vec![0usize; rank];
        for _ in 0..if collapse { 1 } else { nbatch } {
            let mut oa = 0;
            for (i, &d) in ba.iter().enumerate() {
                if d != 1 {
                    oa += idx[i + rank - ba.len()] * astr[i];
                }
            }
            let mut ob = 0;
            for (i, &d) in bb.iter().enumerate() {
                if d != 1 {
                    ob += idx[i + rank - bb.len()] * bstr[i];
                }
            }
            offsets.push((oa * p * q, ob * q * r));
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < batch[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let mut out = vec![T::zero(); nbatch * p * r];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                gemm_nn(
                    &mut out[bi * rows * r..(bi + 1) * rows * r],
                    &av[oa..oa + rows * q],
                    &bv[ob..ob + q * r],
                    rows,
                    q,
                    r,
                );
            }
        }
        let mut shape = batch;
        shape.push(p);
        shape.push(r);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                p: rows,
                q,
                r,
                offsets,
            },
            ng,
        ))
    }

    /// Elementwise sum; `b` may broadcast into `a` from the right.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bcast = broadcast_plan(&sa, &sb).ok_or(Error::Shape {
            op: "add",
            lhs: sa.clone(),
            rhs: sb,
        })?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out: Vec<T> = match &bcast {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| x + y).collect(),
            Bcast::Suffix(n) => {
                let mut out = av.clone();
                for chunk in out.chunks_exact_mut(*n) {
                    chunk.iter_mut().zip(bv).for_each(|(o, &y)| *o += y);
                }
                out
            }
            Bcast::Map(m) => av.iter().zip(m).map(|(&x, &j)| x + bv[j]).collect(),
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(sa, out, Op::Add { a, b, bcast }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, c }, ng)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| x + c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::AddConst { a }, ng)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len()
            || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape {
                op: "permute",
                lhs: sa,
                rhs: perm.to_vec(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let istr = strides(&sa);
        let n = numel(&sa);
        let mut gather = Vec::with_capacity(n);
        let mut idx = vec![0usize; sa.len()];
        let mut src = 0usize;
        for _ in 0..n {
            gather.push(src);
            for ax in (0..out_shape.len()).rev() {
                idx[ax] += 1;
                src += istr[perm[ax]];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= istr[perm[ax]] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        let av = &self.nodes[a.0].value;
        let out = gather.iter().map(|&j| av[j]).collect();
        let ng = self.ng(a);
        Ok(self.push(out_shape, out, Op::Permute { a, gather }, ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[a.0].value.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.nodes[a.0].value.clone();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let width = *sa.last().ok_or(Error::Shape {
            op: "softmax",
            lhs: sa.clone(),
            rhs: vec![],
        })?;
        let mut out = self.nodes[a.0].value.clone();
        if width > 0 {
            for row in out.chunks_mut(width) {
                let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(sa, out, Op::Softmax { a, width }, ng))
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let width = *sx.last().ok_or(Error::Shape {
            op: "layer_norm",
            lhs: sx.clone(),
            rhs: vec![],
        })?;
        for p in [scale, shift] {
            if self.shape(p) != [width] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[scale.0].value;
        let b = &self.nodes[shift.0].value;
        let rows = if width == 0 { 0 } else { xv.len() / width };
        let mut out = Vec::with_capacity(xv.len());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let w = T::from_usize_lossy(width);
        for row in xv.chunks(width.max(1)).take(rows) {
            let mean = row.iter().copied().sum::<T>() / w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / w;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (k, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rs;
                xhat.push(xh);
                out.push(xh * g[k] + b[k]);
            }
        }
        let ng = self.ng(x) || self.ng(scale) || self.ng(shift);
        Ok(self.push(
            sx,
            out,
            Op::LayerNorm {
                x,
                scale,
                shift,
                width,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| gelu_fwd(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a }, ng)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Shape {
                op: "sum_axis",
                lhs: sa,
                rhs: vec![axis],
            });
        }
        let outer = numel(&sa[..axis]);
        let len = sa[axis];
        let inner = numel(&sa[axis + 1..]);
        let av = &self.nodes[a.0].value;
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &av[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::SumAxis { a, outer, len, inner }, ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(a).get(axis).ok_or(Error::Shape {
            op: "mean_axis",
            lhs: self.shape(a).to_vec(),
            rhs: vec![axis],
        })?;
        if len == 0 {
            return Err(Error::EmptyPopulation("mean over an empty axis"));
        }
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, T::one() / T::from_usize_lossy(len)))
    }

    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![], vec![s], Op::SumAll { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    /// Concatenation along axis 0; trailing axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let fs = self.shape(*first).to_vec();
        if fs.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                lhs: fs,
                rhs: vec![],
            });
        }
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != fs.len() || sp[1..] != fs[1..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: fs,
                    rhs: sp.to_vec(),
                });
            }
            lead += sp[0];
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let mut shape = fs;
        shape[0] = lead;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&mut self, a: Var, delta: T) -> Var {
        let half = T::lit(0.5);
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| {
                if x.abs() <= delta {
                    half * x * x
                } else {
                    delta * (x.abs() - half * delta)
                }
            })
            .collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Huber { a, delta }, ng)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                p,
                q,
                r,
                offsets,
            } => {
                let (p, q, r) = (*p, *q, *r);
                if self.ng(*a) {
                    let mut da = vec![T::zero(); val(*a).len()];
                    for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                        gemm_nt(
                            &mut da[oa..oa + p * q],
                            &g[bi * p * r..(bi + 1) * p * r],
                            &val(*b)[ob..ob + q * r],
                            p,
                            q,
                            r,
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); val(*b).len()];
                    for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                        gemm_tn(
                            &mut db[ob..ob + q * r],
                            &val(*a)[oa..oa + p * q],
                            &g[bi * p * r..(bi + 1) * p * r],
                            p,
                            q,
                            r,
                        );
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b, bcast } => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.ng(*b) {
                    let db = match bcast {
                        Bcast::Same => g.to_vec(),
                        Bcast::Suffix(n) => {
                            let mut db = vec![T::zero(); *n];
                            for chunk in g.chunks_exact(*n) {
                                db.iter_mut().zip(chunk).for_each(|(d, &gv)| *d += gv);
                            }
                            db
                        }
                        Bcast::Map(m) => {
                            let mut db = vec![T::zero(); val(*b).len()];
                            for (&j, &gv) in m.iter().zip(g) {
                                db[j] += gv;
                            }
                            db
                        }
                    };
                    accumulate(grads, *b, db);
                }
            }
            Op::Sub { a, b } => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul { a, b } => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale { a, c } => accumulate(grads, *a, g.iter().map(|&x| x * *c).collect()),
            Op::AddConst { a } | Op::Reshape { a } => accumulate(grads, *a, g.to_vec()),
            Op::Permute { a, gather } => {
                let mut da = vec![T::zero(); gather.len()];
                for (&j, &gv) in gather.iter().zip(g) {
                    da[j] += gv;
                }
                accumulate(grads, *a, da);
            }
            Op::Softmax { a, width } => {
                let y = &node.value;
                let mut da = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in da
                    .chunks_mut(*width)
                    .zip(y.chunks(*width))
                    .zip(g.chunks(*width))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for k in 0..*width {
                        dr[k] = yr[k] * (gr[k] - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                width,
                xhat,
                rstd,
            } => {
                let w = *width;
                let gamma = val(*scale);
                if self.ng(*x) {
                    let wn = T::from_usize_lossy(w);
                    let mut dx = vec![T::zero(); xhat.len()];
                    for (row, rs) in rstd.iter().enumerate() {
                        let base = row * w;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for k in 0..w {
                            let dxh = g[base + k] * gamma[k];
                            s1 += dxh;
                            s2 += dxh * xhat[base + k];
                        }
                        for k in 0..w {
                            let dxh = g[base + k] * gamma[k];
                            dx[base + k] = *rs / wn * (wn * dxh - s1 - xhat[base + k] * s2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.ng(*scale) {
                    let mut dg = vec![T::zero(); w];
                    for (k, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        dg[k % w] += gv * xh;
                    }
                    accumulate(grads, *scale, dg);
                }
                if self.ng(*shift) {
                    let mut db = vec![T::zero(); w];
                    for (k, &gv) in g.iter().enumerate() {
                        db[k % w] += gv;
                    }
                    accumulate(grads, *shift, db);
                }
            }
            Op::Gelu { a } => accumulate(
                grads,
                *a,
                g.iter().zip(val(*a)).map(|(&gv, &x)| gv * gelu_grad(x)).collect(),
            ),
            Op::SumAxis { a, outer, len, inner } => {
                let mut da = vec![T::zero(); outer * len * inner];
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        da[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::SumAll { a } => accumulate(grads, *a, vec![g[0]; val(*a).len()]),
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if self.ng(p) {
                        accumulate(grads, p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::Huber { a, delta } => accumulate(
                grads,
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&gv, &x)| gv * x.max(-*delta).min(*delta))
                    .collect(),
            ),
        }
    }
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    gelu_fwd(x)
}
