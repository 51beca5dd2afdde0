//! The recording tape and the differentiable primitives.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation on [`Var`]
//! handles pushes one node holding the forward value and a closure with the
//! local backward rule. [`backward`] walks the nodes in reverse id order
//! (which is a topological order by construction) and accumulates gradients
//! additively, so a value used several times receives the sum of all its
//! downstream contributions.
//!
//! Shape rules are strict: elementwise ops require identical shapes, and the
//! only broadcasts are the explicit `add_row_vec` / `add_col_vec` forms.
//! Shape violations panic; they are bugs in the calling code, not runtime
//! conditions.

use crate::{Array, Param};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

type BackwardFn = Box<dyn Fn(&Array, &mut Sink)>;

struct Node {
    value: Rc<Array>,
    backward: Option<BackwardFn>,
    op: &'static str,
}

struct TapeInner {
    nodes: Vec<Node>,
    grad_enabled: bool,
    param_vars: BTreeMap<String, usize>,
}

/// Accumulates gradient contributions per node during the backward sweep.
pub struct Sink<'a> {
    grads: &'a mut Vec<Option<Array>>,
}

impl Sink<'_> {
    pub fn add(&mut self, id: usize, delta: Array) {
        match &mut self.grads[id] {
            Some(g) => g.add_scaled(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        }
    }
}

/// A recording tape. Cloning the handle shares the same arena.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward rules (for training).
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A tape that only evaluates forward; `backward` on it panics. Useful
    /// for inference loops where closures would be dead weight.
    pub fn inference() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grad_enabled,
                param_vars: BTreeMap::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, backward: Option<BackwardFn>, op: &'static str) -> Var {
        debug_assert!(value.all_finite(), "non-finite values produced by {op}");
        let mut inner = self.inner.borrow_mut();
        let backward = if inner.grad_enabled { backward } else { None };
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            backward,
            op,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Inserts a value that participates in the graph but receives no
    /// gradient of its own (inputs, masks, targets).
    pub fn constant(&self, value: Array) -> Var {
        self.push(value, None, "constant")
    }

    pub fn constant_scalar(&self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    /// Inserts a parameter leaf. Repeated calls for the same parameter on one
    /// tape return the same node, so its gradient accumulates in one slot.
    pub fn param(&self, param: &Param) -> Var {
        if let Some(&id) = self.inner.borrow().param_vars.get(param.name()) {
            return Var {
                tape: self.clone(),
                id,
            };
        }
        let snapshot = param.value();
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: snapshot,
            backward: None,
            op: "param",
        });
        inner.param_vars.insert(param.name().to_string(), id);
        Var {
            tape: self.clone(),
            id,
        }
    }
}

/// Handle to one node on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

/// Gradients produced by [`backward`], addressable by variable or by
/// parameter name.
pub struct Gradients {
    by_var: Vec<Option<Array>>,
    by_name: BTreeMap<String, Array>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Array> {
        self.by_var.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&Array> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(|s| s.as_str())
    }
}

/// Runs reverse accumulation from a scalar loss.
pub fn backward(loss: &Var) -> Gradients {
    let inner = loss.tape.inner.borrow();
    assert!(
        inner.grad_enabled,
        "backward called on an inference-only tape"
    );
    assert_eq!(
        inner.nodes[loss.id].value.len(),
        1,
        "backward needs a scalar loss, got shape {:?}",
        inner.nodes[loss.id].value.shape()
    );
    let mut grads: Vec<Option<Array>> = vec![None; loss.id + 1];
    grads[loss.id] = Some(Array::scalar(1.0));
    for id in (0..=loss.id).rev() {
        let g = match &grads[id] {
            Some(g) => g.clone(),
            None => continue,
        };
        if let Some(bw) = &inner.nodes[id].backward {
            let mut sink = Sink { grads: &mut grads };
            bw(&g, &mut sink);
        }
    }
    let mut by_name = BTreeMap::new();
    for (name, &id) in &inner.param_vars {
        if id <= loss.id {
            if let Some(g) = &grads[id] {
                by_name.insert(name.clone(), g.clone());
            }
        }
    }
    Gradients {
        by_var: grads,
        by_name,
    }
}

fn same_tape(a: &Var, b: &Var) {
    assert!(
        Rc::ptr_eq(&a.tape.inner, &b.tape.inner),
        "variables belong to different tapes"
    );
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn scalar_value(&self) -> f64 {
        self.value().to_scalar()
    }

    pub fn op(&self) -> &'static str {
        self.tape.inner.borrow().nodes[self.id].op
    }

    pub fn add(&self, other: &Var) -> Var {
        same_tape(self, other);
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        let (a, b) = (self.id, other.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            })),
            "add",
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        same_tape(self, other);
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        let (a, b) = (self.id, other.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.map(|x| -x));
            })),
            "sub",
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        same_tape(self, other);
        let av = self.value();
        let bv = other.value();
        let out = av.zip_map(&bv, |a, b| a * b);
        let (a, b) = (self.id, other.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&bv, |x, y| x * y));
                sink.add(b, g.zip_map(&av, |x, y| x * y));
            })),
            "mul",
        )
    }

    pub fn neg(&self) -> Var {
        let out = self.value().map(|x| -x);
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| sink.add(a, g.map(|x| -x)))),
            "neg",
        )
    }

    pub fn scale(&self, k: f64) -> Var {
        let out = self.value().map(|x| k * x);
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| sink.add(a, g.map(|x| k * x)))),
            "scale",
        )
    }

    pub fn add_scalar(&self, k: f64) -> Var {
        let out = self.value().map(|x| x + k);
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| sink.add(a, g.clone()))),
            "add_scalar",
        )
    }

    pub fn matmul(&self, other: &Var) -> Var {
        same_tape(self, other);
        let av = self.value();
        let bv = other.value();
        let out = av.matmul(&bv);
        let (a, b) = (self.id, other.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.matmul(&bv.transpose()));
                sink.add(b, av.transpose().matmul(g));
            })),
            "matmul",
        )
    }

    pub fn transpose(&self) -> Var {
        let out = self.value().transpose();
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| sink.add(a, g.transpose()))),
            "transpose",
        )
    }

    pub fn exp(&self) -> Var {
        let out = self.value().map(f64::exp);
        let saved = out.clone();
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&saved, |x, y| x * y))
            })),
            "exp",
        )
    }

    /// Natural log; inputs must be strictly positive.
    pub fn ln(&self) -> Var {
        let av = self.value();
        let out = av.map(f64::ln);
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&av, |x, y| x / y))
            })),
            "ln",
        )
    }

    /// Square root; inputs must be strictly positive for a finite gradient.
    pub fn sqrt(&self) -> Var {
        let out = self.value().map(f64::sqrt);
        let saved = out.clone();
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&saved, |x, y| x / (2.0 * y)))
            })),
            "sqrt",
        )
    }

    pub fn sin(&self) -> Var {
        let av = self.value();
        let out = av.map(f64::sin);
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&av, |x, v| x * v.cos()))
            })),
            "sin",
        )
    }

    /// Elementwise reciprocal; inputs must be nonzero.
    pub fn recip(&self) -> Var {
        let av = self.value();
        let out = av.map(|x| 1.0 / x);
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&av, |x, v| -x / (v * v)))
            })),
            "recip",
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let av = self.value();
        let out = av.map(|x| if x > 0.0 { x } else { slope * x });
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&av, |x, v| if v > 0.0 { x } else { slope * x }))
            })),
            "leaky_relu",
        )
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn elu(&self) -> Var {
        let av = self.value();
        let out = av.map(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(
                    a,
                    g.zip_map(&av, |x, v| if v > 0.0 { x } else { x * v.exp() }),
                )
            })),
            "elu",
        )
    }

    /// Clamps values into `[lo, hi]`; gradient passes through strictly
    /// inside the interval and is zero at and beyond the bounds.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        assert!(lo < hi, "clamp bounds");
        let av = self.value();
        let out = av.map(|x| x.clamp(lo, hi));
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(
                    a,
                    g.zip_map(&av, |x, v| if v > lo && v < hi { x } else { 0.0 }),
                )
            })),
            "clamp",
        )
    }

    /// Row-wise softmax of a rank-2 array.
    pub fn softmax_rows(&self) -> Var {
        let av = self.value();
        let (r, c) = (av.rows(), av.cols());
        let mut out = Array::zeros(&[r, c]);
        for i in 0..r {
            let row = av.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let mut exps = vec![0.0; c];
            for j in 0..c {
                let e = (row[j] - m).exp();
                exps[j] = e;
                sum += e;
            }
            for j in 0..c {
                out.set2(i, j, exps[j] / sum);
            }
        }
        let saved = out.clone();
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let (r, c) = (saved.rows(), saved.cols());
                let mut dx = Array::zeros(&[r, c]);
                for i in 0..r {
                    let s = saved.row(i);
                    let gr = g.row(i);
                    let dot: f64 = s.iter().zip(gr).map(|(&sv, &gv)| sv * gv).sum();
                    for j in 0..c {
                        dx.set2(i, j, s[j] * (gr[j] - dot));
                    }
                }
                sink.add(a, dx);
            })),
            "softmax_rows",
        )
    }

    /// Row-wise log-softmax of a rank-2 array (numerically stable).
    pub fn log_softmax_rows(&self) -> Var {
        let av = self.value();
        let (r, c) = (av.rows(), av.cols());
        let mut out = Array::zeros(&[r, c]);
        for i in 0..r {
            let row = av.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out.set2(i, j, row[j] - lse);
            }
        }
        let saved = out.clone();
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let (r, c) = (saved.rows(), saved.cols());
                let mut dx = Array::zeros(&[r, c]);
                for i in 0..r {
                    let gr = g.row(i);
                    let gsum: f64 = gr.iter().sum();
                    let lr = saved.row(i);
                    for j in 0..c {
                        dx.set2(i, j, gr[j] - lr[j].exp() * gsum);
                    }
                }
                sink.add(a, dx);
            })),
            "log_softmax_rows",
        )
    }

    pub fn sum_all(&self) -> Var {
        let av = self.value();
        let out = Array::scalar(av.data().iter().sum());
        let a = self.id;
        let shape = av.shape().to_vec();
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, Array::full(&shape, g.to_scalar()));
            })),
            "sum_all",
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Per-row sums of a rank-2 array: `[r, c] -> [r]`.
    pub fn row_sums(&self) -> Var {
        let av = self.value();
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; r];
        for i in 0..r {
            out[i] = av.row(i).iter().sum();
        }
        let a = self.id;
        self.tape.push(
            Array::vector(&out),
            Some(Box::new(move |g, sink| {
                let mut dx = Array::zeros(&[r, c]);
                for i in 0..r {
                    let gi = g.data()[i];
                    for j in 0..c {
                        dx.set2(i, j, gi);
                    }
                }
                sink.add(a, dx);
            })),
            "row_sums",
        )
    }

    /// Per-column sums of a rank-2 array: `[r, c] -> [c]`.
    pub fn col_sums(&self) -> Var {
        let av = self.value();
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (j, o) in out.iter_mut().enumerate() {
                *o += av.at2(i, j);
            }
        }
        let a = self.id;
        self.tape.push(
            Array::vector(&out),
            Some(Box::new(move |g, sink| {
                let mut dx = Array::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        dx.set2(i, j, g.data()[j]);
                    }
                }
                sink.add(a, dx);
            })),
            "col_sums",
        )
    }

    /// Adds a length-`c` vector to every row of a `[r, c]` array.
    pub fn add_row_vec(&self, v: &Var) -> Var {
        same_tape(self, v);
        let av = self.value();
        let vv = v.value();
        let (r, c) = (av.rows(), av.cols());
        assert_eq!(vv.shape(), &[c], "row vector length");
        let mut out = av.as_ref().clone();
        for i in 0..r {
            for j in 0..c {
                let x = out.at2(i, j) + vv.data()[j];
                out.set2(i, j, x);
            }
        }
        let (a, b) = (self.id, v.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for (j, d) in dv.iter_mut().enumerate() {
                        *d += g.at2(i, j);
                    }
                }
                sink.add(b, Array::vector(&dv));
            })),
            "add_row_vec",
        )
    }

    /// Adds `v[i]` to every entry of row `i` of a `[r, c]` array.
    pub fn add_col_vec(&self, v: &Var) -> Var {
        same_tape(self, v);
        let av = self.value();
        let vv = v.value();
        let (r, c) = (av.rows(), av.cols());
        assert_eq!(vv.shape(), &[r], "column vector length");
        let mut out = av.as_ref().clone();
        for i in 0..r {
            for j in 0..c {
                let x = out.at2(i, j) + vv.data()[i];
                out.set2(i, j, x);
            }
        }
        let (a, b) = (self.id, v.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                let mut dv = vec![0.0; r];
                for (i, d) in dv.iter_mut().enumerate() {
                    for j in 0..c {
                        *d += g.at2(i, j);
                    }
                }
                sink.add(b, Array::vector(&dv));
            })),
            "add_col_vec",
        )
    }

    /// Multiplies every row of a `[r, c]` array elementwise by a length-`c`
    /// vector.
    pub fn mul_row_vec(&self, v: &Var) -> Var {
        same_tape(self, v);
        let av = self.value();
        let vv = v.value();
        let (r, c) = (av.rows(), av.cols());
        assert_eq!(vv.shape(), &[c], "row vector length");
        let mut out = av.as_ref().clone();
        for i in 0..r {
            for j in 0..c {
                let x = out.at2(i, j) * vv.data()[j];
                out.set2(i, j, x);
            }
        }
        let (a, b) = (self.id, v.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = Array::zeros(&[r, c]);
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        da.set2(i, j, g.at2(i, j) * vv.data()[j]);
                        dv[j] += g.at2(i, j) * av.at2(i, j);
                    }
                }
                sink.add(a, da);
                sink.add(b, Array::vector(&dv));
            })),
            "mul_row_vec",
        )
    }

    /// Multiplies row `i` of a `[r, c]` array by `v[i]`.
    pub fn mul_col_vec(&self, v: &Var) -> Var {
        same_tape(self, v);
        let av = self.value();
        let vv = v.value();
        let (r, c) = (av.rows(), av.cols());
        assert_eq!(vv.shape(), &[r], "column vector length");
        let mut out = av.as_ref().clone();
        for i in 0..r {
            for j in 0..c {
                let x = out.at2(i, j) * vv.data()[i];
                out.set2(i, j, x);
            }
        }
        let (a, b) = (self.id, v.id);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = Array::zeros(&[r, c]);
                let mut dv = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        da.set2(i, j, g.at2(i, j) * vv.data()[i]);
                        dv[i] += g.at2(i, j) * av.at2(i, j);
                    }
                }
                sink.add(a, da);
                sink.add(b, Array::vector(&dv));
            })),
            "mul_col_vec",
        )
    }

    /// Stacks rank-2 parts with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let tape = parts[0].tape.clone();
        for p in parts {
            same_tape(parts[0], p);
        }
        let c = parts[0].value().cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::new();
        for p in parts {
            let v = p.value();
            assert_eq!(v.cols(), c, "concat_rows column mismatch");
            row_counts.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let total: usize = row_counts.iter().sum();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(
            Array::new(&[total, c], data),
            Some(Box::new(move |g, sink| {
                let mut start = 0;
                for (&id, &rows) in ids.iter().zip(&row_counts) {
                    let mut part = Array::zeros(&[rows, c]);
                    part.data_mut()
                        .copy_from_slice(&g.data()[start * c..(start + rows) * c]);
                    sink.add(id, part);
                    start += rows;
                }
            })),
            "concat_rows",
        )
    }

    /// Takes rows `start..start+len` of a rank-2 array.
    pub fn slice_rows(&self, start: usize, len: usize) -> Var {
        let av = self.value();
        let (r, c) = (av.rows(), av.cols());
        assert!(start + len <= r, "slice_rows out of range");
        let mut out = Array::zeros(&[len, c]);
        out.data_mut()
            .copy_from_slice(&av.data()[start * c..(start + len) * c]);
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = Array::zeros(&[r, c]);
                dx.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                sink.add(a, dx);
            })),
            "slice_rows",
        )
    }

    /// Concatenates rank-2 parts with equal row counts side by side.
    pub fn concat_cols(parts: &[&Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let tape = parts[0].tape.clone();
        for p in parts {
            same_tape(parts[0], p);
        }
        let r = parts[0].value().rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = p.value();
                assert_eq!(v.rows(), r, "concat_cols row mismatch");
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Array::zeros(&[r, total]);
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = p.value();
            for i in 0..r {
                for j in 0..w {
                    out.set2(i, offset + j, v.at2(i, j));
                }
            }
            offset += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut offset = 0;
                for (&id, &w) in ids.iter().zip(&widths) {
                    let mut part = Array::zeros(&[r, w]);
                    for i in 0..r {
                        for j in 0..w {
                            part.set2(i, j, g.at2(i, offset + j));
                        }
                    }
                    sink.add(id, part);
                    offset += w;
                }
            })),
            "concat_cols",
        )
    }

    /// Looks up rows of a `[v, d]` table: the output row `i` is
    /// `table[indices[i]]`. The backward pass scatter-adds into the table.
    pub fn gather_rows(&self, indices: &[usize]) -> Var {
        let av = self.value();
        let (v, d) = (av.rows(), av.cols());
        let mut out = Array::zeros(&[indices.len(), d]);
        for (i, &ix) in indices.iter().enumerate() {
            assert!(ix < v, "gather index {ix} out of range {v}");
            for j in 0..d {
                out.set2(i, j, av.at2(ix, j));
            }
        }
        let idx = indices.to_vec();
        let a = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = Array::zeros(&[v, d]);
                for (i, &ix) in idx.iter().enumerate() {
                    for j in 0..d {
                        let val = dx.at2(ix, j) + g.at2(i, j);
                        dx.set2(ix, j, val);
                    }
                }
                sink.add(a, dx);
            })),
            "gather_rows",
        )
    }

    /// Picks one entry per row of a `[n, c]` array: output `[n]` with
    /// `out[i] = a[i, indices[i]]`.
    pub fn select_per_row(&self, indices: &[usize]) -> Var {
        let av = self.value();
        let (n, c) = (av.rows(), av.cols());
        assert_eq!(indices.len(), n, "one index per row");
        let mut out = vec![0.0; n];
        for (i, &ix) in indices.iter().enumerate() {
            assert!(ix < c, "select index {ix} out of range {c}");
            out[i] = av.at2(i, ix);
        }
        let idx = indices.to_vec();
        let a = self.id;
        self.tape.push(
            Array::vector(&out),
            Some(Box::new(move |g, sink| {
                let mut dx = Array::zeros(&[n, c]);
                for (i, &ix) in idx.iter().enumerate() {
                    dx.set2(i, ix, g.data()[i]);
                }
                sink.add(a, dx);
            })),
            "select_per_row",
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let av = self.value();
        let expect: usize = shape.iter().product();
        assert_eq!(expect, av.len(), "reshape element count");
        let out = Array::new(shape, av.data().to_vec());
        let a = self.id;
        let old = av.shape().to_vec();
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, Array::new(&old, g.data().to_vec()));
            })),
            "reshape",
        )
    }
}
