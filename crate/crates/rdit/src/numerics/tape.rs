//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward computation as an arena of nodes. Each op
//! stores its output plus a closure that maps the incoming gradient to
//! gradients for its parents. [`Tape::backward`] walks the arena in reverse
//! creation order (a valid topological order, since every op only refers to
//! earlier nodes) and accumulates leaf gradients.
//!
//! The same kernels used for the forward pass power the standalone functions
//! in [`super::ops`], so the oracle tests there cover the training path too.

use std::rc::Rc;

use crate::error::{RditError, Result};
use super::ops;
use super::tensor::{cast, matmul, matmul_nt, matmul_tn, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<E> = Box<dyn Fn(&Tensor<E>) -> Vec<(Var, Tensor<E>)>>;

struct Node<E: Element> {
    value: Rc<Tensor<E>>,
    needs_grad: bool,
    back: Option<BackFn<E>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<E: Element> {
    g: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Grads<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Differentiable input (parameter or anything whose gradient is wanted).
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, true, None)
    }

    /// Non-differentiable input (data, fixed embeddings).
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn value_rc(&self, v: Var) -> Rc<Tensor<E>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, back: Option<BackFn<E>>) -> Var {
        self.nodes.push(Node { value: Rc::new(value), needs_grad, back });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<E>, needs: bool, back: BackFn<E>) -> Var {
        self.push(value, needs, if needs { Some(back) } else { None })
    }

    /// Accumulate gradients from a scalar root back to every leaf.
    pub fn backward(&self, root: Var) -> Grads<E> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut g: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Tensor::scalar(E::one()));
        for i in (0..=root.0).rev() {
            if g[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let Some(back) = &node.back else { continue }; // leaves keep their gradient
            let gi = g[i].take().expect("present");
            for (p, pg) in back(&gi) {
                match &mut g[p.0] {
                    Some(acc) => acc.axpy(E::one(), &pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Grads { g }
    }

    // -- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let out = av.add(&bv);
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push_op(
            out,
            na || nb,
            Box::new(move |g| {
                let mut v = Vec::new();
                if na {
                    v.push((a, g.clone()));
                }
                if nb {
                    v.push((b, g.clone()));
                }
                v
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let out = av.mul(&bv);
        let (na, nb) = (self.needs(a), self.needs(b));
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        self.push_op(
            out,
            na || nb,
            Box::new(move |g| {
                let mut v = Vec::new();
                if na {
                    v.push((a, g.mul(&bc)));
                }
                if nb {
                    v.push((b, g.mul(&ac)));
                }
                v
            }),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let av = self.value_rc(a);
        let sc = cast::<E>(s);
        let out = av.map(|x| x + sc);
        let na = self.needs(a);
        self.push_op(out, na, Box::new(move |g| vec![(a, g.clone())]))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let av = self.value_rc(a);
        let sc = cast::<E>(s);
        let out = av.scale(sc);
        let na = self.needs(a);
        self.push_op(out, na, Box::new(move |g| vec![(a, g.scale(sc))]))
    }

    /// Add a fixed tensor broadcast over the leading axis: `x[i] + c` for
    /// every leading index `i`. `c.numel()` must divide `x.numel()`.
    pub fn add_broadcast_const(&mut self, a: Var, c: &Tensor<E>) -> Var {
        let av = self.value_rc(a);
        let cn = c.numel();
        assert!(cn > 0 && av.numel() % cn == 0, "broadcast size mismatch");
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(cn) {
            for (d, &cv) in chunk.iter_mut().zip(c.data()) {
                *d = *d + cv;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data);
        let na = self.needs(a);
        self.push_op(out, na, Box::new(move |g| vec![(a, g.clone())]))
    }

    // -- linear algebra --------------------------------------------------

    /// `[.., k] @ [k, n] -> [.., n]` matrix product over the last dimension.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-D");
        let k = av.last_dim();
        assert_eq!(bv.shape()[0], k, "matmul inner dims");
        let n = bv.shape()[1];
        let rows = av.rows();
        let out = matmul(av.data(), bv.data(), rows, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let (na, nb) = (self.needs(a), self.needs(b));
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        self.push_op(
            Tensor::new(shape, out),
            na || nb,
            Box::new(move |g| {
                let mut v = Vec::new();
                if na {
                    let ga = matmul_nt(g.data(), bc.data(), rows, n, k);
                    v.push((a, Tensor::new(ac.shape().to_vec(), ga)));
                }
                if nb {
                    let gb = matmul_tn(ac.data(), g.data(), rows, k, n);
                    v.push((b, Tensor::new(vec![k, n], gb)));
                }
                v
            }),
        )
    }

    /// Add a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(bias));
        let n = av.last_dim();
        assert_eq!(bv.shape(), [n], "bias length mismatch");
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            for (d, &b) in row.iter_mut().zip(bv.data()) {
                *d = *d + b;
            }
        }
        let (na, nb) = (self.needs(a), self.needs(bias));
        self.push_op(
            Tensor::new(av.shape().to_vec(), data),
            na || nb,
            Box::new(move |g| {
                let mut v = Vec::new();
                if na {
                    v.push((a, g.clone()));
                }
                if nb {
                    let mut gb = vec![E::zero(); n];
                    for row in g.data().chunks(n) {
                        for (acc, &gv) in gb.iter_mut().zip(row) {
                            *acc = *acc + gv;
                        }
                    }
                    v.push((bias, Tensor::new(vec![n], gb)));
                }
                v
            }),
        )
    }

    /// Embedding lookup: rows of `table` selected by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value_rc(table);
        assert_eq!(tv.shape().len(), 2, "gather table must be 2-D");
        let (r, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < r, "gather index {i} out of range {r}");
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let nt = self.needs(table);
        let idx = idx.to_vec();
        self.push_op(
            Tensor::new(vec![idx.len(), d], out),
            nt,
            Box::new(move |g| {
                let mut gt = Tensor::zeros(vec![r, d]);
                for (b, &i) in idx.iter().enumerate() {
                    let src = &g.data()[b * d..(b + 1) * d];
                    let dst = &mut gt.data_mut()[i * d..(i + 1) * d];
                    for (acc, &gv) in dst.iter_mut().zip(src) {
                        *acc = *acc + gv;
                    }
                }
                vec![(table, gt)]
            }),
        )
    }

    // -- activations and norms -------------------------------------------

    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let out = ops::silu_fwd(&av);
        let na = self.needs(a);
        let ac = Rc::clone(&av);
        self.push_op(out, na, Box::new(move |g| vec![(a, ops::silu_bwd(&ac, g))]))
    }

    /// RMS norm over the last dimension with a learned gain.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: f64) -> Var {
        let (xv, wv) = (self.value_rc(x), self.value_rc(w));
        assert_eq!(wv.shape(), [xv.last_dim()], "rmsnorm weight length");
        let (out, inv_rms) = ops::rmsnorm_fwd(&xv, wv.data(), cast(eps));
        let (nx, nw) = (self.needs(x), self.needs(w));
        let (xc, wc) = (Rc::clone(&xv), Rc::clone(&wv));
        self.push_op(
            out,
            nx || nw,
            Box::new(move |g| {
                let (gx, gw) = ops::rmsnorm_bwd(&xc, wc.data(), &inv_rms, g);
                let mut v = Vec::new();
                if nx {
                    v.push((x, gx));
                }
                if nw {
                    v.push((w, Tensor::new(vec![wc.numel()], gw)));
                }
                v
            }),
        )
    }

    /// Scaled dot-product attention over `[b, h, n, d]` vars. Returns the
    /// output var and the post-softmax weights (shared with backward).
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> (Var, Rc<Tensor<E>>) {
        let (qv, kv, vv) = (self.value_rc(q), self.value_rc(k), self.value_rc(v));
        assert_eq!(qv.shape(), kv.shape(), "attention k shape");
        assert_eq!(qv.shape(), vv.shape(), "attention v shape");
        let (out, probs) = ops::attention_fwd(&qv, &kv, &vv);
        let probs = Rc::new(probs);
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let (nq, nk, nv) = (self.needs(q), self.needs(k), self.needs(v));
        let (qc, kc, vc, pc) = (qv, kv, vv, Rc::clone(&probs));
        let var = self.push_op(
            out,
            needs,
            Box::new(move |g| {
                let (gq, gk, gv) = ops::attention_bwd(&qc, &kc, &vc, &pc, g);
                let mut out = Vec::new();
                if nq {
                    out.push((q, gq));
                }
                if nk {
                    out.push((k, gk));
                }
                if nv {
                    out.push((v, gv));
                }
                out
            }),
        );
        (var, probs)
    }

    // -- shape and stream plumbing ----------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let av = self.value_rc(a);
        let old = av.shape().to_vec();
        let out = av.as_ref().clone().reshaped(shape);
        let na = self.needs(a);
        self.push_op(
            out,
            na,
            Box::new(move |g| vec![(a, g.clone().reshaped(old.clone()))]),
        )
    }

    /// Select tokens `[start, start+len)` along axis 1 of `[b, n, d]`.
    pub fn narrow_tokens(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value_rc(a);
        let (b, n, d) = dims3(&av);
        assert!(start + len <= n, "token slice out of range");
        let mut out = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            let base = bi * n * d;
            out.extend_from_slice(&av.data()[base + start * d..base + (start + len) * d]);
        }
        let na = self.needs(a);
        self.push_op(
            Tensor::new(vec![b, len, d], out),
            na,
            Box::new(move |g| {
                let mut ga = Tensor::zeros(vec![b, n, d]);
                for bi in 0..b {
                    let src = &g.data()[bi * len * d..(bi + 1) * len * d];
                    let base = bi * n * d + start * d;
                    ga.data_mut()[base..base + len * d].copy_from_slice(src);
                }
                vec![(a, ga)]
            }),
        )
    }

    /// Concatenate along axis 1 of `[b, n, d]`.
    pub fn concat_tokens(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let (ba, na_tok, d) = dims3(&av);
        let (bb, nb_tok, db) = dims3(&bv);
        assert_eq!((ba, d), (bb, db), "concat_tokens batch/width mismatch");
        let n = na_tok + nb_tok;
        let mut out = Vec::with_capacity(ba * n * d);
        for bi in 0..ba {
            out.extend_from_slice(&av.data()[bi * na_tok * d..(bi + 1) * na_tok * d]);
            out.extend_from_slice(&bv.data()[bi * nb_tok * d..(bi + 1) * nb_tok * d]);
        }
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push_op(
            Tensor::new(vec![ba, n, d], out),
            na || nb,
            Box::new(move |g| {
                let mut v = Vec::new();
                if na {
                    let mut ga = Vec::with_capacity(ba * na_tok * d);
                    for bi in 0..ba {
                        let base = bi * n * d;
                        ga.extend_from_slice(&g.data()[base..base + na_tok * d]);
                    }
                    v.push((a, Tensor::new(vec![ba, na_tok, d], ga)));
                }
                if nb {
                    let mut gb = Vec::with_capacity(ba * nb_tok * d);
                    for bi in 0..ba {
                        let base = bi * n * d + na_tok * d;
                        gb.extend_from_slice(&g.data()[base..base + nb_tok * d]);
                    }
                    v.push((b, Tensor::new(vec![ba, nb_tok, d], gb)));
                }
                v
            }),
        )
    }

    /// `y = x` with `delta` added to token rows `[at, at+l)`.
    pub fn add_to_tokens(&mut self, x: Var, delta: Var, at: usize) -> Var {
        let (xv, dv) = (self.value_rc(x), self.value_rc(delta));
        let (b, n, d) = dims3(&xv);
        let (bd, l, dd) = dims3(&dv);
        assert_eq!((b, d), (bd, dd), "add_to_tokens batch/width mismatch");
        assert!(at + l <= n, "add_to_tokens out of range");
        let mut out = xv.data().to_vec();
        for bi in 0..b {
            let base = bi * n * d + at * d;
            let src = &dv.data()[bi * l * d..(bi + 1) * l * d];
            for (o, &s) in out[base..base + l * d].iter_mut().zip(src) {
                *o = *o + s;
            }
        }
        let (nx, nd) = (self.needs(x), self.needs(delta));
        self.push_op(
            Tensor::new(vec![b, n, d], out),
            nx || nd,
            Box::new(move |g| {
                let mut v = Vec::new();
                if nx {
                    v.push((x, g.clone()));
                }
                if nd {
                    let mut gd = Vec::with_capacity(b * l * d);
                    for bi in 0..b {
                        let base = bi * n * d + at * d;
                        gd.extend_from_slice(&g.data()[base..base + l * d]);
                    }
                    v.push((delta, Tensor::new(vec![b, l, d], gd)));
                }
                v
            }),
        )
    }

    /// Select `[start, start+len)` of the last dimension.
    pub fn narrow_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value_rc(a);
        let d = av.last_dim();
        assert!(start + len <= d, "narrow_last out of range");
        let rows = av.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let na = self.needs(a);
        let full = av.shape().to_vec();
        self.push_op(
            Tensor::new(shape, out),
            na,
            Box::new(move |g| {
                let mut ga = Tensor::zeros(full.clone());
                for r in 0..rows {
                    let src = &g.data()[r * len..(r + 1) * len];
                    ga.data_mut()[r * d + start..r * d + start + len].copy_from_slice(src);
                }
                vec![(a, ga)]
            }),
        )
    }

    /// Broadcast a `[b, d]` vector over the token axis: `y[b,n,:] = x[b,n,:] * v[b,:]`.
    pub fn mul_rowvec(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value_rc(x), self.value_rc(v));
        let (b, n, d) = dims3(&xv);
        assert_eq!(vv.shape(), [b, d], "mul_rowvec vector shape");
        let mut out = xv.data().to_vec();
        for bi in 0..b {
            let vrow = &vv.data()[bi * d..(bi + 1) * d];
            for t in 0..n {
                let base = bi * n * d + t * d;
                for (o, &s) in out[base..base + d].iter_mut().zip(vrow) {
                    *o = *o * s;
                }
            }
        }
        let (nx, nv) = (self.needs(x), self.needs(v));
        let (xc, vc) = (Rc::clone(&xv), Rc::clone(&vv));
        self.push_op(
            Tensor::new(vec![b, n, d], out),
            nx || nv,
            Box::new(move |g| {
                let mut res = Vec::new();
                if nx {
                    let mut gx = g.data().to_vec();
                    for bi in 0..b {
                        let vrow = &vc.data()[bi * d..(bi + 1) * d];
                        for t in 0..n {
                            let base = bi * n * d + t * d;
                            for (o, &s) in gx[base..base + d].iter_mut().zip(vrow) {
                                *o = *o * s;
                            }
                        }
                    }
                    res.push((x, Tensor::new(vec![b, n, d], gx)));
                }
                if nv {
                    let mut gv = vec![E::zero(); b * d];
                    for bi in 0..b {
                        for t in 0..n {
                            let base = bi * n * d + t * d;
                            for j in 0..d {
                                gv[bi * d + j] =
                                    gv[bi * d + j] + g.data()[base + j] * xc.data()[base + j];
                            }
                        }
                    }
                    res.push((v, Tensor::new(vec![b, d], gv)));
                }
                res
            }),
        )
    }

    /// Broadcast-add a `[b, d]` vector over the token axis.
    pub fn add_rowvec(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value_rc(x), self.value_rc(v));
        let (b, n, d) = dims3(&xv);
        assert_eq!(vv.shape(), [b, d], "add_rowvec vector shape");
        let mut out = xv.data().to_vec();
        for bi in 0..b {
            let vrow = &vv.data()[bi * d..(bi + 1) * d];
            for t in 0..n {
                let base = bi * n * d + t * d;
                for (o, &s) in out[base..base + d].iter_mut().zip(vrow) {
                    *o = *o + s;
                }
            }
        }
        let (nx, nv) = (self.needs(x), self.needs(v));
        self.push_op(
            Tensor::new(vec![b, n, d], out),
            nx || nv,
            Box::new(move |g| {
                let mut res = Vec::new();
                if nx {
                    res.push((x, g.clone()));
                }
                if nv {
                    let mut gv = vec![E::zero(); b * d];
                    for bi in 0..b {
                        for t in 0..n {
                            let base = bi * n * d + t * d;
                            for j in 0..d {
                                gv[bi * d + j] = gv[bi * d + j] + g.data()[base + j];
                            }
                        }
                    }
                    res.push((v, Tensor::new(vec![b, d], gv)));
                }
                res
            }),
        )
    }

    /// Repeat a `[n, d]` tensor across a new leading batch axis.
    pub fn broadcast_to_batch(&mut self, a: Var, batch: usize) -> Var {
        let av = self.value_rc(a);
        assert_eq!(av.shape().len(), 2, "broadcast_to_batch expects [n, d]");
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let mut out = Vec::with_capacity(batch * n * d);
        for _ in 0..batch {
            out.extend_from_slice(av.data());
        }
        let na = self.needs(a);
        self.push_op(
            Tensor::new(vec![batch, n, d], out),
            na,
            Box::new(move |g| {
                let mut ga = Tensor::zeros(vec![n, d]);
                for bi in 0..batch {
                    let src = &g.data()[bi * n * d..(bi + 1) * n * d];
                    for (acc, &gv) in ga.data_mut().iter_mut().zip(src) {
                        *acc = *acc + gv;
                    }
                }
                vec![(a, ga)]
            }),
        )
    }

    /// `[b, n, d] -> [b, h, n, d/h]` head split.
    pub fn to_heads(&mut self, a: Var, heads: usize) -> Var {
        let av = self.value_rc(a);
        let (b, n, d) = dims3(&av);
        assert_eq!(d % heads, 0, "heads must divide width");
        let hd = d / heads;
        let out = split_heads(av.data(), b, n, heads, hd);
        let na = self.needs(a);
        self.push_op(
            Tensor::new(vec![b, heads, n, hd], out),
            na,
            Box::new(move |g| {
                let ga = merge_heads(g.data(), b, n, heads, hd);
                vec![(a, Tensor::new(vec![b, n, d], ga))]
            }),
        )
    }

    /// `[b, h, n, d/h] -> [b, n, d]` head merge.
    pub fn from_heads(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let s = av.shape();
        assert_eq!(s.len(), 4, "from_heads expects [b, h, n, hd]");
        let (b, h, n, hd) = (s[0], s[1], s[2], s[3]);
        let out = merge_heads(av.data(), b, n, h, hd);
        let na = self.needs(a);
        self.push_op(
            Tensor::new(vec![b, n, h * hd], out),
            na,
            Box::new(move |g| {
                let ga = split_heads(g.data(), b, n, h, hd);
                vec![(a, Tensor::new(vec![b, h, n, hd], ga))]
            }),
        )
    }

    /// `[b, c, e, e] image -> [b, (e/p)^2, p*p*c]` patch tokens in row-major
    /// patch order; features are laid out channel-major within a patch.
    pub fn patchify(&mut self, img: Var, patch: usize) -> Var {
        let iv = self.value_rc(img);
        let s = iv.shape().to_vec();
        assert_eq!(s.len(), 4, "patchify expects [b, c, h, w]");
        let (b, c, hh, ww) = (s[0], s[1], s[2], s[3]);
        assert!(hh % patch == 0 && ww % patch == 0, "image not divisible by patch");
        let out = patchify_data(iv.data(), b, c, hh, ww, patch);
        let np = (hh / patch) * (ww / patch);
        let na = self.needs(img);
        self.push_op(
            Tensor::new(vec![b, np, patch * patch * c], out),
            na,
            Box::new(move |g| {
                let gi = unpatchify_data(g.data(), b, c, hh, ww, patch);
                vec![(img, Tensor::new(vec![b, c, hh, ww], gi))]
            }),
        )
    }

    /// Inverse of [`Tape::patchify`].
    pub fn unpatchify(&mut self, tokens: Var, channels: usize, edge: usize, patch: usize) -> Var {
        let tv = self.value_rc(tokens);
        let s = tv.shape().to_vec();
        assert_eq!(s.len(), 3, "unpatchify expects [b, np, p*p*c]");
        let b = s[0];
        assert_eq!(s[1], (edge / patch) * (edge / patch), "token count mismatch");
        assert_eq!(s[2], patch * patch * channels, "token width mismatch");
        let out = unpatchify_data(tv.data(), b, channels, edge, edge, patch);
        let na = self.needs(tokens);
        self.push_op(
            Tensor::new(vec![b, channels, edge, edge], out),
            na,
            Box::new(move |g| {
                let gt = patchify_data(g.data(), b, channels, edge, edge, patch);
                let np = (edge / patch) * (edge / patch);
                vec![(tokens, Tensor::new(vec![b, np, patch * patch * channels], gt))]
            }),
        )
    }

    // -- losses ------------------------------------------------------------

    /// Mean squared error against a fixed target: scalar output.
    pub fn mse(&mut self, x: Var, target: &Tensor<E>) -> Var {
        let xv = self.value_rc(x);
        assert_eq!(xv.shape(), target.shape(), "mse shape mismatch");
        let n = cast::<E>(xv.numel() as f64);
        let mut acc = E::zero();
        for (&a, &b) in xv.data().iter().zip(target.data()) {
            let d = a - b;
            acc = acc + d * d;
        }
        let out = Tensor::scalar(acc / n);
        let nx = self.needs(x);
        let tc = target.clone();
        self.push_op(
            out,
            nx,
            Box::new(move |g| {
                let s = g.data()[0] * cast::<E>(2.0) / n;
                let gx = xv.zip_map(&tc, |a, b| (a - b) * s);
                vec![(x, gx)]
            }),
        )
    }

    /// Sum of all elements: scalar output.
    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let out = Tensor::scalar(xv.sum());
        let nx = self.needs(x);
        let shape = xv.shape().to_vec();
        self.push_op(
            out,
            nx,
            Box::new(move |g| {
                vec![(x, Tensor::full(shape.clone(), g.data()[0]))]
            }),
        )
    }
}

fn dims3<E: Element>(t: &Tensor<E>) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected [batch, tokens, width], got {s:?}");
    (s[0], s[1], s[2])
}

fn split_heads<E: Element>(x: &[E], b: usize, n: usize, h: usize, hd: usize) -> Vec<E> {
    let d = h * hd;
    let mut out = vec![E::zero(); x.len()];
    for bi in 0..b {
        for hi in 0..h {
            for t in 0..n {
                let src = bi * n * d + t * d + hi * hd;
                let dst = ((bi * h + hi) * n + t) * hd;
                out[dst..dst + hd].copy_from_slice(&x[src..src + hd]);
            }
        }
    }
    out
}

fn merge_heads<E: Element>(x: &[E], b: usize, n: usize, h: usize, hd: usize) -> Vec<E> {
    let d = h * hd;
    let mut out = vec![E::zero(); x.len()];
    for bi in 0..b {
        for hi in 0..h {
            for t in 0..n {
                let src = ((bi * h + hi) * n + t) * hd;
                let dst = bi * n * d + t * d + hi * hd;
                out[dst..dst + hd].copy_from_slice(&x[src..src + hd]);
            }
        }
    }
    out
}

pub(crate) fn patchify_data<E: Element>(
    x: &[E],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Vec<E> {
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![E::zero(); x.len()];
    let fdim = p * p * c;
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let t = gy * gw + gx;
                for ci in 0..c {
                    for py in 0..p {
                        let src = bi * c * h * w + ci * h * w + (gy * p + py) * w + gx * p;
                        let dst = bi * gh * gw * fdim + t * fdim + ci * p * p + py * p;
                        out[dst..dst + p].copy_from_slice(&x[src..src + p]);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn unpatchify_data<E: Element>(
    x: &[E],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Vec<E> {
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![E::zero(); x.len()];
    let fdim = p * p * c;
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let t = gy * gw + gx;
                for ci in 0..c {
                    for py in 0..p {
                        let src = bi * gh * gw * fdim + t * fdim + ci * p * p + py * p;
                        let dst = bi * c * h * w + ci * h * w + (gy * p + py) * w + gx * p;
                        out[dst..dst + p].copy_from_slice(&x[src..src + p]);
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
// ---------------------------------------------------------------------------

/// Compare analytic gradients of a scalar-valued tape program against central
/// finite differences, in `f64`.
///
/// Returns the max over all parameter components of
/// `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn grad_check<F>(build: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = build(&mut tape, &vars);
        let v = tape.value(root);
        assert_eq!(v.numel(), 1, "grad_check target must be scalar");
        let l = v.data()[0];
        if !l.is_finite() {
            return Err(RditError::NonFinite("grad_check loss".into()));
        }
        Ok(l)
    };
    eval(params)?; // fail fast on non-finite loss

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let lp = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let lm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let ana = analytic[i].data()[j];
            let rel = (ana - numeric).abs() / (ana.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let err = grad_check(
            |t, vs| {
                let sq = t.mul(vs[0], vs[0]);
                t.sum(sq)
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn rmsnorm_then_sum_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(vec![3, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![6], 0.5, &mut rng);
        let err = grad_check(
            |t, vs| {
                let y = t.rmsnorm(vs[0], vs[1], 1e-6);
                t.sum(y)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn matmul_bias_silu_mse_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(vec![4, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![5, 3], 0.5, &mut rng);
        let b = Tensor::<f64>::randn(vec![3], 0.5, &mut rng);
        let target = Tensor::<f64>::randn(vec![4, 3], 1.0, &mut rng);
        let err = grad_check(
            |t, vs| {
                let y = t.matmul(vs[0], vs[1]);
                let y = t.add_bias(y, vs[2]);
                let y = t.silu(y);
                t.mse(y, &target)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::<f64>::randn(vec![1, 2, 3, 4], 0.8, &mut rng);
        let k = Tensor::<f64>::randn(vec![1, 2, 3, 4], 0.8, &mut rng);
        let v = Tensor::<f64>::randn(vec![1, 2, 3, 4], 0.8, &mut rng);
        let target = Tensor::<f64>::randn(vec![1, 2, 3, 4], 1.0, &mut rng);
        let err = grad_check(
            |t, vs| {
                let (o, _) = t.attention(vs[0], vs[1], vs[2]);
                t.mse(o, &target)
            },
            &[q, k, v],
            1e-5,
        )
        .unwrap();
        // Relative error is dominated by near-zero components; absolute
        // agreement is ~1e-10 here.
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn stream_ops_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(vec![2, 5, 4], 1.0, &mut rng);
        let m = Tensor::<f64>::randn(vec![2, 4], 0.7, &mut rng);
        let target = Tensor::<f64>::randn(vec![2, 5, 4], 1.0, &mut rng);
        let err = grad_check(
            |t, vs| {
                let reg = t.narrow_tokens(vs[0], 0, 2);
                let patch = t.narrow_tokens(vs[0], 2, 3);
                let patch = t.mul_rowvec(patch, vs[1]);
                let patch = t.add_rowvec(patch, vs[1]);
                let y = t.concat_tokens(reg, patch);
                t.mse(y, &target)
            },
            &[x, m],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn gather_rows_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = Tensor::<f64>::randn(vec![5, 3], 1.0, &mut rng);
        let target = Tensor::<f64>::randn(vec![4, 3], 1.0, &mut rng);
        let err = grad_check(
            |t, vs| {
                let y = t.gather_rows(vs[0], &[0, 2, 2, 4]);
                t.mse(y, &target)
            },
            &[table],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn heads_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(vec![2, 3, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let h = tape.to_heads(v, 4);
        let back = tape.from_heads(h);
        assert_eq!(tape.value(back).data(), x.data());
    }

    #[test]
    fn patchify_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Tensor::<f64>::randn(vec![2, 3, 8, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(img.clone());
        let tokens = tape.patchify(v, 4);
        assert_eq!(tape.value(tokens).shape(), &[2, 4, 48]);
        let back = tape.unpatchify(tokens, 3, 8, 4);
        assert_eq!(tape.value(back).data(), img.data());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full(vec![2, 2], 3.0));
        let l = tape.leaf(Tensor::full(vec![2, 2], 2.0));
        let y = tape.mul(c, l);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(l).unwrap().data(), &[3.0, 3.0, 3.0, 3.0]);
    }
}
