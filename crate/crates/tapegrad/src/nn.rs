//! Neural building blocks on top of the tape: linear, layer norm, pre-norm
//! multi-head self-attention with feed-forward, and graph attention.
//!
//! Blocks register their parameters in a [`ParamStore`] under a caller-chosen
//! name prefix, so whole models can be checkpointed and optimized by name.

use crate::{Array, Param, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;

/// Additive mask value for positions that must not be attended to. Large
/// enough that the softmax weight underflows to zero, small enough that the
/// logits stay finite.
pub const MASK_NEG: f64 = -1.0e20;

/// Fully connected layer `x W + b`.
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.create(
            &format!("{prefix}.w"),
            Array::xavier(&[d_in, d_out], d_in, d_out, rng),
        );
        let b = store.create(&format!("{prefix}.b"), Array::zeros(&[d_out]));
        Linear { w, b }
    }

    /// Same layer with the weight initialised to zero. Useful for output
    /// heads that should start as a uniform predictor.
    pub fn new_zeroed(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.create(&format!("{prefix}.w"), Array::zeros(&[d_in, d_out]));
        let b = store.create(&format!("{prefix}.b"), Array::zeros(&[d_out]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Var {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        x.matmul(&w).add_row_vec(&b)
    }
}

/// Per-row layer normalisation with a learned affine transform.
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-12;

    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gamma = store.create(&format!("{prefix}.g"), Array::full(&[dim], 1.0));
        let beta = store.create(&format!("{prefix}.b"), Array::zeros(&[dim]));
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Var {
        let c = self.dim as f64;
        assert_eq!(x.value().cols(), self.dim, "layer norm width");
        let mean = x.row_sums().scale(1.0 / c);
        let centered = x.add_col_vec(&mean.neg());
        let var = centered.mul(&centered).row_sums().scale(1.0 / c);
        let inv_std = var.add_scalar(Self::EPS).sqrt().recip();
        let xhat = centered.mul_col_vec(&inv_std);
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        xhat.mul_row_vec(&gamma).add_row_vec(&beta)
    }
}

struct AttentionHead {
    wq: Param,
    wk: Param,
    wv: Param,
}

/// One pre-norm transformer encoder layer: multi-head self-attention with a
/// residual connection, then a feed-forward block with a residual connection.
/// Layer norm is applied before each sublayer.
pub struct EncoderLayer {
    heads: Vec<AttentionHead>,
    wo: Linear,
    ff1: Linear,
    ff2: Linear,
    ln1: LayerNorm,
    ln2: LayerNorm,
    dim: usize,
    head_dim: usize,
}

impl EncoderLayer {
    /// Hidden width of the feed-forward block relative to the model width.
    pub const FF_MULT: usize = 4;

    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        num_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(num_heads > 0 && dim % num_heads == 0, "heads must divide dim");
        let head_dim = dim / num_heads;
        let heads = (0..num_heads)
            .map(|h| AttentionHead {
                wq: store.create(
                    &format!("{prefix}.h{h}.wq"),
                    Array::xavier(&[dim, head_dim], dim, head_dim, rng),
                ),
                wk: store.create(
                    &format!("{prefix}.h{h}.wk"),
                    Array::xavier(&[dim, head_dim], dim, head_dim, rng),
                ),
                wv: store.create(
                    &format!("{prefix}.h{h}.wv"),
                    Array::xavier(&[dim, head_dim], dim, head_dim, rng),
                ),
            })
            .collect();
        let ff_hidden = Self::FF_MULT * dim;
        EncoderLayer {
            heads,
            wo: Linear::new(store, &format!("{prefix}.wo"), dim, dim, rng),
            ff1: Linear::new(store, &format!("{prefix}.ff1"), dim, ff_hidden, rng),
            ff2: Linear::new(store, &format!("{prefix}.ff2"), ff_hidden, dim, rng),
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), dim),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), dim),
            dim,
            head_dim,
        }
    }

    /// `x` is `[seq, dim]`. `key_mask`, when given, holds one additive logit
    /// per key position: 0.0 for positions that may be attended to and
    /// [`MASK_NEG`] for padding. Masked positions then contribute nothing to
    /// the outputs at unmasked positions.
    pub fn forward(&self, tape: &Tape, x: &Var, key_mask: Option<&Array>) -> Var {
        assert_eq!(x.value().cols(), self.dim, "encoder layer width");
        let normed = self.ln1.forward(tape, x);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mask_var = key_mask.map(|m| {
            assert_eq!(m.shape(), &[x.value().rows()], "key mask length");
            tape.constant(m.clone())
        });
        let mut head_outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = normed.matmul(&tape.param(&head.wq));
            let k = normed.matmul(&tape.param(&head.wk));
            let v = normed.matmul(&tape.param(&head.wv));
            let mut logits = q.matmul(&k.transpose()).scale(scale);
            if let Some(mask) = &mask_var {
                logits = logits.add_row_vec(mask);
            }
            let attn = logits.softmax_rows();
            head_outs.push(attn.matmul(&v));
        }
        let refs: Vec<&Var> = head_outs.iter().collect();
        let concat = Var::concat_cols(&refs);
        let x = x.add(&self.wo.forward(tape, &concat));
        let normed2 = self.ln2.forward(tape, &x);
        let ff = self
            .ff2
            .forward(tape, &self.ff1.forward(tape, &normed2).relu());
        x.add(&ff)
    }
}

/// How a multi-head graph-attention layer combines its heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatMerge {
    /// Concatenate head outputs (hidden layers).
    Concat,
    /// Average head outputs (final layer).
    Average,
}

/// Neighbourhood structure for graph attention: a dense additive mask over
/// node pairs. Node `i` may attend to `j` iff `(i, j)` is an edge; edges are
/// undirected. A node with no neighbours falls back to a self-loop so its
/// attention row stays well defined.
pub struct Adjacency {
    n: usize,
    mask: Array,
}

impl Adjacency {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut mask = Array::full(&[n, n], MASK_NEG);
        let mut degree = vec![0usize; n];
        for &(a, b) in edges {
            assert!(a < n && b < n, "edge ({a}, {b}) out of range {n}");
            mask.set2(a, b, 0.0);
            mask.set2(b, a, 0.0);
            degree[a] += 1;
            degree[b] += 1;
        }
        for i in 0..n {
            if degree[i] == 0 {
                mask.set2(i, i, 0.0);
            }
        }
        Adjacency { n, mask }
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }
}

struct GatHead {
    w: Param,
    a_src: Param,
    a_dst: Param,
}

/// One graph-attention layer. Scores for an edge `(i, j)` follow the usual
/// leaky-ReLU form `leaky(a_src . W h_i + a_dst . W h_j)`, normalised by a
/// softmax over each node's neighbourhood.
pub struct GatLayer {
    heads: Vec<GatHead>,
    merge: GatMerge,
    d_in: usize,
    head_dim: usize,
}

impl GatLayer {
    pub const LEAKY_SLOPE: f64 = 0.2;

    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        head_dim: usize,
        num_heads: usize,
        merge: GatMerge,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let heads = (0..num_heads)
            .map(|h| GatHead {
                w: store.create(
                    &format!("{prefix}.h{h}.w"),
                    Array::xavier(&[d_in, head_dim], d_in, head_dim, rng),
                ),
                a_src: store.create(
                    &format!("{prefix}.h{h}.as"),
                    Array::xavier(&[head_dim, 1], head_dim, 1, rng),
                ),
                a_dst: store.create(
                    &format!("{prefix}.h{h}.ad"),
                    Array::xavier(&[head_dim, 1], head_dim, 1, rng),
                ),
            })
            .collect();
        GatLayer {
            heads,
            merge,
            d_in,
            head_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.merge {
            GatMerge::Concat => self.head_dim * self.heads.len(),
            GatMerge::Average => self.head_dim,
        }
    }

    pub fn forward(&self, tape: &Tape, features: &Var, adj: &Adjacency) -> Var {
        self.forward_inner(tape, features, adj, None)
    }

    /// Like [`forward`](Self::forward) but also captures each head's
    /// attention matrix (rows = nodes, columns = attended nodes).
    pub fn forward_with_attention(
        &self,
        tape: &Tape,
        features: &Var,
        adj: &Adjacency,
    ) -> (Var, Vec<Array>) {
        let mut attn = Vec::new();
        let out = self.forward_inner(tape, features, adj, Some(&mut attn));
        (out, attn)
    }

    fn forward_inner(
        &self,
        tape: &Tape,
        features: &Var,
        adj: &Adjacency,
        mut capture: Option<&mut Vec<Array>>,
    ) -> Var {
        let n = features.value().rows();
        assert_eq!(n, adj.n, "feature rows vs adjacency nodes");
        assert_eq!(features.value().cols(), self.d_in, "gat input width");
        let mask = tape.constant(adj.mask.clone());
        let zeros = tape.constant(Array::zeros(&[n, n]));
        let mut head_outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let wh = features.matmul(&tape.param(&head.w));
            let s_src = wh.matmul(&tape.param(&head.a_src)).reshape(&[n]);
            let s_dst = wh.matmul(&tape.param(&head.a_dst)).reshape(&[n]);
            let scores = zeros
                .add_col_vec(&s_src)
                .add_row_vec(&s_dst)
                .leaky_relu(Self::LEAKY_SLOPE);
            let attn = scores.add(&mask).softmax_rows();
            if let Some(capture) = capture.as_deref_mut() {
                capture.push(attn.value().as_ref().clone());
            }
            head_outs.push(attn.matmul(&wh));
        }
        match self.merge {
            GatMerge::Concat => {
                let refs: Vec<&Var> = head_outs.iter().collect();
                Var::concat_cols(&refs)
            }
            GatMerge::Average => {
                let mut sum = head_outs[0].clone();
                for h in &head_outs[1..] {
                    sum = sum.add(h);
                }
                sum.scale(1.0 / head_outs.len() as f64)
            }
        }
    }
}

/// Mean cross-entropy of integer targets under row logits.
pub fn cross_entropy_mean(logits: &Var, targets: &[usize]) -> Var {
    logits
        .log_softmax_rows()
        .select_per_row(targets)
        .mean_all()
        .neg()
}

/// Mean squared error over all elements.
pub fn mse_mean(a: &Var, b: &Var) -> Var {
    let d = a.sub(b);
    d.mul(&d).mean_all()
}
