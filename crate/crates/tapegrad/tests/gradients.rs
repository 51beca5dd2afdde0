//! Finite-difference validation of every primitive and every neural block.
//!
//! Each case builds a scalar loss from randomly initialised parameters and
//! compares the tape's gradients against central differences (step 1e-5,
//! relative tolerance 1e-4, absolute floor 1 — see `gradcheck::check_params`).
//! Inputs are drawn bounded away from kinks (relu/elu/clamp corners) so the
//! symmetric quotient is meaningful. Five random instances per case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::nn::{
    cross_entropy_mean, mse_mean, Adjacency, EncoderLayer, GatLayer, GatMerge, LayerNorm, Linear,
    MASK_NEG,
};
use tapegrad::{Array, ParamStore, Tape, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 5;

/// Random values with |x| in [0.05, 2], random sign: smooth territory for
/// every piecewise op under a 1e-5 perturbation.
fn away_from_kinks(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let mag = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Array::new(shape, data)
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(0.2..3.0)).collect();
    Array::new(shape, data)
}

/// Weighted sum with fixed random weights, so every output element receives
/// a distinct gradient contribution.
fn weighted_sum(v: &Var, weights: &Array) -> Var {
    let wc = v.tape().constant(weights.clone());
    v.mul(&wc).sum_all()
}

fn run_case<F>(name: &str, build: F)
where
    F: Fn(&mut ParamStore, &mut ChaCha8Rng) -> Box<dyn Fn() -> Var>,
{
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 * seed + 7);
        let mut store = ParamStore::new();
        let loss_fn = build(&mut store, &mut rng);
        let report = tapegrad::gradcheck::check_params(&store, &*loss_fn, STEP, TOL);
        assert!(
            report.is_ok(),
            "{name} seed {seed}: {} of {} elements failed, worst {:.3e}, first {:?}",
            report.mismatches.len(),
            report.checked,
            report.worst_rel_error,
            report.mismatches.first()
        );
    }
}

fn rand_dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(2..=5), rng.gen_range(2..=6))
}

#[test]
fn elementwise_arithmetic() {
    run_case("add/sub/mul/neg/scale", |store, rng| {
        let (r, c) = rand_dims(rng);
        let a = store.create("a", away_from_kinks(&[r, c], rng));
        let b = store.create("b", away_from_kinks(&[r, c], rng));
        let w = Array::randn(&[r, c], 1.0, rng);
        Box::new(move || {
            let tape = Tape::new();
            let (x, y) = (tape.param(&a), tape.param(&b));
            let out = x
                .add(&y)
                .mul(&x.sub(&y.neg()))
                .scale(0.7)
                .add_scalar(0.3);
            weighted_sum(&out, &w)
        })
    });
}

#[test]
fn exp_ln_sqrt_recip() {
    run_case("exp/ln/sqrt/recip", |store, rng| {
        let n = rng.gen_range(3..=8);
        let a = store.create("a", positive(&[n], rng));
        let w = Array::randn(&[n], 1.0, rng);
        Box::new(move || {
            let tape = Tape::new();
            let x = tape.param(&a);
            let out = x.ln().exp().sqrt().recip().add(&x.exp().scale(0.1));
            weighted_sum(&out, &w)
        })
    });
}

#[test]
fn sin_composite() {
    run_case("sin", |store, rng| {
        let (r, c) = rand_dims(rng);
        let a = store.create("a", Array::randn(&[r, c], 1.0, rng));
        let w = Array::randn(&[r, c], 1.0, rng);
        Box::new(move || {
            let tape = Tape::new();
            let x = tape.param(&a);
            let out = x.sin().add(&x.scale(0.3).sin().mul(&x.sin()));
            weighted_sum(&out, &w)
        })
    });
}

#[test]
fn piecewise_activations() {
    run_case("leaky_relu/relu/elu/clamp", |store, rng| {
        let (r, c) = rand_dims(rng);
        let a = store.create("a", away_from_kinks(&[r, c], rng));
        let w = Array::randn(&[r, c], 1.0, rng);
        Box::new(move || {
            let tape = Tape::new();
            let x = tape.param(&a);
            // Clamp bounds well away from the sampled values' neighbourhood.
            let out = x
                .leaky_relu(0.2)
                .add(&x.relu())
                .add(&x.elu())
                .clamp(-10.0, 10.0);
            weighted_sum(&out, &w)
        })
    });
}

#[test]
fn matmul_transpose_reshape() {
    run_case("matmul/transpose/reshape", |store, rng| {
        let (m, k) = rand_dims(rng);
        let n = rng.gen_range(2..=4);
        let a = store.create("a", away_from_kinks(&[m, k], rng));
        let b = store.create("b", away_from_kinks(&[k, n], rng));
        let w = Array::randn(&[n, m], 1.0, rng);
        Box::new(move || {
            let tape = Tape::new();
            let (x, y) = (tape.param(&a), tape.param(&b));
            let out = x.matmul(&y).transpose();
            let flat = out.reshape(&[out.value().len()]);
            let back = flat.reshape(&[n, m]);
            weighted_sum(&back, &w)
        })
    });
}

#[test]
fn softmax_and_log_softmax() {
    run_case("softmax_rows/log_softmax_rows", |store, rng| {
        let (r, c) = rand_dims(rng);
        let a = store.create("a", Array::randn(&[r, c], 2.0, rng));
        let w1 = Array::randn(&[r, c], 1.0, rng);
        let w2 = Array::randn(&[r, c], 1.0, rng);
        Box::new(move || {
            let tape = Tape::new();
            let x = tape.param(&a);
            let s = weighted_sum(&x.softmax_rows(), &w1);
            let l = weighted_sum(&x.log_softmax_rows(), &w2);
            s.add(&l)
        })
    });
}

#[test]
fn reductions_and_broadcasts() {
    run_case("sums/row-col vec ops", |store, rng| {
        let (r, c) = rand_dims(rng);
        let a = store.create("a", away_from_kinks(&[r, c], rng));
        let rv = store.create("rv", away_from_kinks(&[c], rng));
        let cv = store.create("cv", away_from_kinks(&[r], rng));
        let wr = Array::randn(&[r], 1.0, rng);
        let wc = Array::randn(&[c], 1.0, rng);
        Box::new(move || {
            let tape = Tape::new();
            let x = tape.param(&a);
            let rvv = tape.param(&rv);
            let cvv = tape.param(&cv);
            let y = x
                .add_row_vec(&rvv)
                .add_col_vec(&cvv)
                .mul_row_vec(&rvv)
                .mul_col_vec(&cvv);
            let row_part = weighted_sum(&y.row_sums(), &wr);
            let col_part = weighted_sum(&y.col_sums(), &wc);
            row_part.add(&col_part).add(&y.mean_all())
        })
    });
}

#[test]
fn concat_slice_gather_select() {
    run_case("concat/slice/gather/select", |store, rng| {
        let c = rng.gen_range(2..=5);
        let a = store.create("a", away_from_kinks(&[3, c], rng));
        let b = store.create("b", away_from_kinks(&[2, c], rng));
        let table = store.create("t", away_from_kinks(&[6, c], rng));
        let gather_idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
        let select_idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..c)).collect();
        let w = Array::randn(&[4, 2 * c], 1.0, rng);
        let wv = Array::randn(&[4], 1.0, rng);
        Box::new(move || {
            let tape = Tape::new();
            let (x, y, t) = (tape.param(&a), tape.param(&b), tape.param(&table));
            let stacked = Var::concat_rows(&[&x, &y]);
            let sliced = stacked.slice_rows(1, 4);
            let gathered = t.gather_rows(&gather_idx);
            let side = Var::concat_cols(&[&sliced, &gathered]);
            let picked = gathered.select_per_row(&select_idx);
            weighted_sum(&side, &w).add(&weighted_sum(&picked, &wv))
        })
    });
}

#[test]
fn linear_block() {
    run_case("linear", |store, rng| {
        let (n, d_in) = rand_dims(rng);
        let d_out = rng.gen_range(2..=4);
        let layer = Linear::new(store, "lin", d_in, d_out, rng);
        let x_param = store.create("x", away_from_kinks(&[n, d_in], rng));
        let w = Array::randn(&[n, d_out], 1.0, rng);
        Box::new(move || {
            let tape = Tape::new();
            let x = tape.param(&x_param);
            weighted_sum(&layer.forward(&tape, &x), &w)
        })
    });
}

#[test]
fn layer_norm_block() {
    run_case("layer_norm", |store, rng| {
        let (n, d) = rand_dims(rng);
        let ln = LayerNorm::new(store, "ln", d);
        let x_param = store.create("x", Array::randn(&[n, d], 1.5, rng));
        let w = Array::randn(&[n, d], 1.0, rng);
        Box::new(move || {
            let tape = Tape::new();
            let x = tape.param(&x_param);
            weighted_sum(&ln.forward(&tape, &x), &w)
        })
    });
}

#[test]
fn encoder_layer_block() {
    run_case("encoder layer (pre-norm attention + ffn)", |store, rng| {
        let seq = rng.gen_range(3..=5);
        let layer = EncoderLayer::new(store, "enc", 6, 2, rng);
        let x_param = store.create("x", Array::randn(&[seq, 6], 1.0, rng));
        let w = Array::randn(&[seq, 6], 1.0, rng);
        Box::new(move || {
            let tape = Tape::new();
            let x = tape.param(&x_param);
            weighted_sum(&layer.forward(&tape, &x, None), &w)
        })
    });
}

#[test]
fn encoder_layer_block_with_padding_mask() {
    run_case("encoder layer with key mask", |store, rng| {
        let layer = EncoderLayer::new(store, "enc", 6, 3, rng);
        let x_param = store.create("x", Array::randn(&[5, 6], 1.0, rng));
        // Two padded positions; only real rows feed the loss, as in training.
        let mask = Array::vector(&[0.0, 0.0, 0.0, MASK_NEG, MASK_NEG]);
        let w = Array::randn(&[3, 6], 1.0, rng);
        Box::new(move || {
            let tape = Tape::new();
            let x = tape.param(&x_param);
            let out = layer.forward(&tape, &x, Some(&mask)).slice_rows(0, 3);
            weighted_sum(&out, &w)
        })
    });
}

#[test]
fn gat_layer_blocks() {
    for merge in [GatMerge::Concat, GatMerge::Average] {
        run_case("graph attention layer", |store, rng| {
            let n = rng.gen_range(4..=7);
            let layer = GatLayer::new(store, "gat", 5, 3, 2, merge, rng);
            let mut edges = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.gen_bool(0.4) {
                        edges.push((i, j));
                    }
                }
            }
            let adj = Adjacency::new(n, &edges);
            let x_param = store.create("x", Array::randn(&[n, 5], 1.0, rng));
            let out_dim = layer.output_dim();
            let w = Array::randn(&[n, out_dim], 1.0, rng);
            Box::new(move || {
                let tape = Tape::new();
                let x = tape.param(&x_param);
                weighted_sum(&layer.forward(&tape, &x, &adj), &w)
            })
        });
    }
}

#[test]
fn loss_helpers() {
    run_case("cross entropy + mse", |store, rng| {
        let n = rng.gen_range(2..=5);
        let v = rng.gen_range(3..=6);
        let logits = store.create("logits", Array::randn(&[n, v], 1.0, rng));
        let a = store.create("a", away_from_kinks(&[n, v], rng));
        let b = store.create("b", away_from_kinks(&[n, v], rng));
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
        Box::new(move || {
            let tape = Tape::new();
            let l = tape.param(&logits);
            let ce = cross_entropy_mean(&l, &targets);
            let m = mse_mean(&tape.param(&a), &tape.param(&b));
            ce.add(&m)
        })
    });
}

#[test]
fn two_layer_composite_network() {
    // A small end-to-end composite: embedding gather, two linear layers with
    // norm and activation, softmax head. Exercises interaction effects the
    // per-op cases cannot.
    run_case("composite network", |store, rng| {
        let lin1 = Linear::new(store, "l1", 4, 6, rng);
        let ln = LayerNorm::new(store, "ln", 6, );
        let lin2 = Linear::new(store, "l2", 6, 3, rng);
        let table = store.create("emb", Array::randn(&[5, 4], 0.5, rng));
        let idx: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
        let targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
        Box::new(move || {
            let tape = Tape::new();
            let x = tape.param(&table).gather_rows(&idx);
            let h = ln.forward(&tape, &lin1.forward(&tape, &x)).elu();
            let logits = lin2.forward(&tape, &h);
            cross_entropy_mean(&logits, &targets)
        })
    });
}
