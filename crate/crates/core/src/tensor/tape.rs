//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] is an arena of nodes; every operation appends its output and,
//! when gradients are enabled, enough context to propagate cotangents back to
//! its inputs. [`Tape::backward`] walks the arena in reverse once.

use std::collections::BTreeMap;

use super::kernels::{self, GroupStats};
use super::params::{ParamId, ParameterStore};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddChannel { x: Var, v: Var },
    Conv2d { x: Var, w: Var, b: Var, cols: Tensor<F> },
    GroupNorm { x: Var, gamma: Var, beta: Var, stats: GroupStats<F> },
    Silu(Var),
    Upsample(Var),
    Downsample(Var),
    ConcatDim0(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceDim0 { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Softmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    param: Option<ParamId>,
}

pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

/// Parameter gradients produced by one backward pass.
pub struct Gradients<F> {
    pub by_param: BTreeMap<ParamId, Tensor<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that only evaluates; `backward` is unavailable.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let op = if self.grad_enabled { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; its gradient is reported under `id`.
    pub fn param(&mut self, store: &ParameterStore<F>, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = Tensor::matmul_t(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds `v[c]` to every element of channel `c` of `x` (`x: [C, ...]`,
    /// `v` holding `C` values in any shape).
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.value(x);
        let vs = self.value(v);
        let c = xs.shape().first().copied().unwrap_or(0);
        if vs.len() != c {
            return Err(Error::dim(
                "add_channel",
                format!("{:?} + {:?}", xs.shape(), vs.shape()),
            ));
        }
        let per = xs.len() / c.max(1);
        let mut out = xs.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate().take(c) {
            let add = vs.data()[ch];
            for e in chunk {
                *e += add;
            }
        }
        Ok(self.push(out, Op::AddChannel { x, v }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (c, h, wd) = kernels::chw(self.value(x), "conv2d")?;
        kernels::check_conv_weights(self.value(w), self.value(b), c)?;
        let cols = kernels::im2col3(self.value(x).data(), c, h, wd);
        let out = kernels::conv_from_cols(&cols, self.value(w), self.value(b), h, wd)?;
        let cols = if self.grad_enabled {
            cols
        } else {
            Tensor::zeros(&[0])
        };
        Ok(self.push(out, Op::Conv2d { x, w, b, cols }))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (out, stats) = kernels::group_norm_with_stats(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            groups,
        )?;
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                stats,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::silu);
        self.push(out, Op::Silu(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample2(self.value(x))?;
        Ok(self.push(out, Op::Upsample(x)))
    }

    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let out = kernels::downsample2(self.value(x))?;
        Ok(self.push(out, Op::Downsample(x)))
    }

    /// Concatenate along the leading dimension; trailing dims must agree.
    pub fn concat_dim0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::dim(
                    "concat_dim0",
                    format!("{first:?} with {s:?}"),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::ConcatDim0(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&refs)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Slice `[start, start + len)` of the leading dimension.
    pub fn slice_dim0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x);
        let lead = xs.shape()[0];
        if start + len > lead {
            return Err(Error::dim(
                "slice_dim0",
                format!("{start}+{len} > {lead}"),
            ));
        }
        let per = xs.len() / lead.max(1);
        let mut shape = xs.shape().to_vec();
        shape[0] = len;
        let out = Tensor::from_vec(shape, xs.data()[start * per..(start + len) * per].to_vec())?;
        Ok(self.push(out, Op::SliceDim0 { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape().len() != 2 || start + len > xs.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("{:?} [{start}, {})", xs.shape(), start + len),
            ));
        }
        let out = xs.slice_cols(start, len);
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Rows `ids` of a `[V, D]` table, stacked into `[ids.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::dim("gather_rows", format!("{:?}", t.shape())));
        }
        let (v, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::dim("gather_rows", format!("row {id} of {v}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_vec(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x))
    }

    /// Propagate from a scalar `loss`. Gradients of every parameter leaf on the
    /// tape are returned; unreachable parameters receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |v: Var, d: Tensor<F>| accumulate(&mut grads, v, d);
            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::MatMul { a, b, ta, tb } => {
                    let av = self.value(a);
                    let bv = self.value(b);
                    // C = op(A)·op(B): dA = dC·op(B)ᵀ (transposed back if ta).
                    let da = if ta {
                        Tensor::matmul_t(bv, &g, tb, true)?
                    } else {
                        Tensor::matmul_t(&g, bv, false, !tb)?
                    };
                    let db = if tb {
                        Tensor::matmul_t(&g, av, true, ta)?
                    } else {
                        Tensor::matmul_t(av, &g, !ta, false)?
                    };
                    acc(a, da);
                    acc(b, db);
                }
                &Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g);
                }
                &Op::Sub(a, b) => {
                    acc(b, g.scale(-F::one()));
                    acc(a, g);
                }
                &Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(b), |x, y| x * y)?;
                    let db = g.zip_map(self.value(a), |x, y| x * y)?;
                    acc(a, da);
                    acc(b, db);
                }
                &Op::Scale(a, s) => acc(a, g.scale(s)),
                &Op::AddChannel { x, v } => {
                    let vs = self.value(v);
                    let c = vs.len();
                    let per = g.len() / c.max(1);
                    let sums: Vec<F> = (0..c)
                        .map(|ch| g.data()[ch * per..(ch + 1) * per].iter().copied().sum())
                        .collect();
                    acc(v, Tensor::from_vec(vs.shape().to_vec(), sums)?);
                    acc(x, g);
                }
                Op::Conv2d { x, w, b, cols } => {
                    let ws = self.value(*w);
                    let (co, ci) = (ws.shape()[0], ws.shape()[1]);
                    let (h, wd) = (g.shape()[1], g.shape()[2]);
                    let gm = g.clone().reshape(&[co, h * wd])?;
                    let dw = Tensor::matmul_t(&gm, cols, false, true)?.reshape(ws.shape())?;
                    let db: Vec<F> = gm.data().chunks(h * wd).map(|r| r.iter().copied().sum()).collect();
                    let wm = ws.clone().reshape(&[co, ci * 9])?;
                    let dcols = Tensor::matmul_t(&wm, &gm, true, false)?;
                    let dx = kernels::col2im3(&dcols, ci, h, wd);
                    acc(*x, Tensor::from_vec(vec![ci, h, wd], dx)?);
                    acc(*w, dw);
                    acc(*b, Tensor::from_vec(vec![co], db)?);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (dx, dg, db) = kernels::group_norm_backward(stats, self.value(*gamma), &g);
                    acc(*x, dx);
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                &Op::Silu(x) => {
                    let d = g.zip_map(self.value(x), |gv, xv| gv * kernels::silu_grad(xv))?;
                    acc(x, d);
                }
                &Op::Upsample(x) => acc(x, kernels::upsample2_backward(&g)),
                &Op::Downsample(x) => acc(x, kernels::downsample2_backward(&g)),
                Op::ConcatDim0(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let piece = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        acc(p, Tensor::from_vec(self.shape(p).to_vec(), piece)?);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).cols();
                        acc(p, g.slice_cols(offset, n));
                        offset += n;
                    }
                }
                &Op::SliceDim0 { x, start } => {
                    let xs = self.value(x);
                    let per = xs.len() / xs.shape()[0].max(1);
                    let mut d = Tensor::zeros(xs.shape());
                    d.data_mut()[start * per..start * per + g.len()].copy_from_slice(g.data());
                    acc(x, d);
                }
                &Op::SliceCols { x, start } => {
                    let xs = self.value(x);
                    let mut d = Tensor::zeros(xs.shape());
                    let (rows, len) = (g.rows(), g.cols());
                    for r in 0..rows {
                        for c in 0..len {
                            d.set2(r, start + c, g.get2(r, c));
                        }
                    }
                    acc(x, d);
                }
                &Op::Reshape(x) => acc(x, g.reshape(self.shape(x))?),
                &Op::Softmax(x) => acc(x, kernels::softmax_rows_backward(&node.value, &g)),
                Op::Gather { table, ids } => {
                    let ts = self.value(*table);
                    let d = ts.cols();
                    let mut dt = Tensor::zeros(ts.shape());
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(&g.data()[row * d..(row + 1) * d]) {
                            *o += v;
                        }
                    }
                    acc(*table, dt);
                }
                &Op::Sum(x) => acc(x, Tensor::full(self.shape(x), g.data()[0])),
                &Op::Mean(x) => {
                    let n = self.value(x).len().max(1);
                    acc(x, Tensor::full(self.shape(x), g.data()[0] / F::lit(n as f64)));
                }
            }
        }

        let mut by_param: BTreeMap<ParamId, Tensor<F>> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match by_param.get_mut(&id) {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                            *e += *v;
                        }
                    }
                    None => {
                        by_param.insert(id, g);
                    }
                }
            }
        }
        Ok(Gradients { by_param })
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], v: Var, d: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}
