//! Central finite-difference checks of every differentiable op and loss.
//!
//! Quantized paths are checked against their straight-through surrogate:
//! the same graph with each quantizer replaced by the identity.
//!
//! Shared by the `gradcheck` test target and the acceptance harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tern_core::loss::action_l1_loss_batch;
use tern_core::nn::LN_EPS;
use tern_core::{action_l1_loss, aux_loss, fake_quant_acts, fake_quant_weights, lm_loss, total_loss, LossWeights, Tape, Tensor, Var};

const N: usize = 64;
const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;
/// Coordinates probed per input; all of them when the input is smaller.
const PROBES: usize = 96;

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Builds a scalar from `inputs` on a fresh tape; `inputs[i]` are params.
type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Relative error `|g_a - g_n| / max(|g_a|, |g_n|)` over probed coordinates.
fn check(name: &str, inputs: &[Tensor], build: &Build, seed: u64) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let l = build(&mut tape, &vars);
        tape.value(l).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("gradient for every input").clone();
        assert_eq!(analytic.shape(), x.shape(), "{name}: gradient shape");
        let coords: Vec<usize> = if x.len() <= PROBES {
            (0..x.len()).collect()
        } else {
            (0..PROBES).map(|_| rng.random_range(0..x.len())).collect()
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic.data()[j];
            diff += (a - numeric).powi(2);
            norm += a.abs().max(numeric.abs()).powi(2);
        }
    }
    let rel = diff.sqrt() / norm.sqrt().max(1e-12);
    assert!(rel <= TOL, "{name}: relative gradient error {rel:e}");
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let (r, c) = tape.value(y).dims2();
    let w = rand_matrix(&mut ChaCha8Rng::seed_from_u64(seed), r, c, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matmul_variants() {
    let mut r = rng(1);
    let a = rand_matrix(&mut r, 8, N, 1.0);
    let b = rand_matrix(&mut r, N, N, 1.0);
    check("matmul", &[a.clone(), b.clone()], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        probe(t, y, 11)
    }, 1);
    check("matmul_nt", &[a, b], &|t, v| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        probe(t, y, 12)
    }, 2);
}

pub fn elementwise_binary() {
    let mut r = rng(2);
    let a = rand_matrix(&mut r, 4, N, 1.0);
    let b = rand_matrix(&mut r, 4, N, 1.0);
    let s = Tensor::scalar(0.7);
    check("add", &[a.clone(), b.clone()], &|t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        probe(t, y, 21)
    }, 3);
    check("sub", &[a.clone(), b.clone()], &|t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        probe(t, y, 22)
    }, 4);
    check("mul", &[a.clone(), b], &|t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        probe(t, y, 23)
    }, 5);
    check("mul by scalar", &[a.clone(), s], &|t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        probe(t, y, 24)
    }, 6);
    check("scale", &[a], &|t, v| {
        let y = t.scale(v[0], -1.75);
        probe(t, y, 25)
    }, 7);
}

pub fn row_broadcasts() {
    let mut r = rng(3);
    let x = rand_matrix(&mut r, 6, N, 1.0);
    let row = rand_matrix(&mut r, 1, N, 1.0);
    check("add_row", &[x.clone(), row.clone()], &|t, v| {
        let y = t.add_row(v[0], v[1]).unwrap();
        probe(t, y, 31)
    }, 8);
    check("mul_row", &[x, row], &|t, v| {
        let y = t.mul_row(v[0], v[1]).unwrap();
        probe(t, y, 32)
    }, 9);
}

pub fn unary_ops() {
    let mut r = rng(4);
    let x = rand_matrix(&mut r, 6, N, 2.0);
    check("gelu", std::slice::from_ref(&x), &|t, v| {
        let y = t.gelu(v[0]);
        probe(t, y, 41)
    }, 10);
    check("layernorm", std::slice::from_ref(&x), &|t, v| {
        let y = t.layernorm(v[0], LN_EPS);
        probe(t, y, 42)
    }, 11);
    // Keep inputs away from the kink at zero.
    let away = x.map(|v| if v.abs() < 0.05 { v + 0.1_f64.copysign(v) } else { v });
    check("abs", &[away], &|t, v| {
        let y = t.abs(v[0]);
        probe(t, y, 43)
    }, 12);
    check("transpose", std::slice::from_ref(&x), &|t, v| {
        let y = t.transpose(v[0]);
        probe(t, y, 44)
    }, 13);
    check("sum", std::slice::from_ref(&x), &|t, v| {
        let y = t.gelu(v[0]);
        t.sum(y)
    }, 14);
    check("mean", &[x], &|t, v| {
        let y = t.gelu(v[0]);
        t.mean(y)
    }, 15);
}

pub fn row_selection_ops() {
    let mut r = rng(5);
    let table = rand_matrix(&mut r, 10, N, 1.0);
    let other = rand_matrix(&mut r, 3, N, 1.0);
    check("gather_rows", std::slice::from_ref(&table), &|t, v| {
        let y = t.gather_rows(v[0], &[3, 1, 3, 9, 0, 3]).unwrap();
        probe(t, y, 51)
    }, 16);
    check("concat_rows", &[table, other], &|t, v| {
        let y = t.concat_rows(&[v[1], v[0], v[1]]).unwrap();
        probe(t, y, 52)
    }, 17);
}

pub fn attention() {
    let mut r = rng(6);
    let rows = 2 * 5;
    let q = rand_matrix(&mut r, rows, N, 1.0);
    let k = rand_matrix(&mut r, rows, N, 1.0);
    let v = rand_matrix(&mut r, rows, N, 1.0);
    check("causal_attention", &[q, k, v], &|t, v| {
        let y = t.causal_attention(v[0], v[1], v[2], 4, 5).unwrap();
        probe(t, y, 61)
    }, 18);
}

pub fn cross_entropy_and_lm_loss() {
    let mut r = rng(7);
    let logits = rand_matrix(&mut r, 6, N, 3.0);
    let targets = [3, 17, 63, 0, 5, 40];
    let mask = [false, true, true, false, true, true];
    check("softmax_cross_entropy", std::slice::from_ref(&logits), &|t, v| {
        t.softmax_cross_entropy(v[0], &targets, &mask).unwrap()
    }, 19);
    check("lm_loss", &[logits], &|t, v| lm_loss(t, v[0], &targets, &mask).unwrap(), 20);
}

pub fn aux_and_total_loss() {
    let mut r = rng(8);
    let teacher: Vec<Tensor> = (0..2).map(|_| rand_matrix(&mut r, 6, N, 1.0)).collect();
    let student: Vec<Tensor> = (0..2).map(|_| rand_matrix(&mut r, 6, N, 1.0)).collect();
    let logits = rand_matrix(&mut r, 6, N, 2.0);
    let targets = [1, 2, 3, 4, 5, 6];
    let mask = [false, false, true, true, true, true];
    check("aux_loss", &student, &|t, v| {
        let tv: Vec<Var> = teacher.iter().map(|x| t.constant(x.clone())).collect();
        aux_loss(t, &tv, v).unwrap()
    }, 21);
    let mut inputs = student.clone();
    inputs.push(logits);
    check("total_loss", &inputs, &|t, v| {
        let tv: Vec<Var> = teacher.iter().map(|x| t.constant(x.clone())).collect();
        let aux = aux_loss(t, &tv, &v[..2]).unwrap();
        let lm = lm_loss(t, v[2], &targets, &mask).unwrap();
        total_loss(t, lm, aux, LossWeights::new(0.1).unwrap()).unwrap()
    }, 22);
}

pub fn action_l1() {
    let mut r = rng(9);
    let pred = rand_matrix(&mut r, 8, 2, 1.0);
    let target = rand_matrix(&mut r, 8, 2, 1.0);
    // Residuals far from zero so the L1 kink is never straddled.
    let pred = Tensor::matrix(
        8,
        2,
        pred.data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| if (p - t).abs() < 0.05 { t + 0.2 } else { *p })
            .collect(),
    );
    check("action_l1_loss", std::slice::from_ref(&pred), &|t, v| action_l1_loss(t, v[0], &target).unwrap(), 23);
    let stacked = Tensor::matrix(16, 2, [pred.data(), pred.data()].concat());
    let targets = Tensor::matrix(16, 2, [target.data(), target.data()].concat());
    check("action_l1_loss_batch", &[stacked], &|t, v| action_l1_loss_batch(t, v[0], &targets, 2).unwrap(), 24);
}

/// Fake-quant linear `y = Q_a(x) · Q_w(W)ᵀ` against `y = x · Wᵀ`.
pub fn fake_quant_linear_matches_surrogate() {
    let mut r = rng(10);
    let x = rand_matrix(&mut r, 8, N, 1.0);
    let w = rand_matrix(&mut r, N, N, 0.1);
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let wv = tape.param(w.clone());
    let xq = fake_quant_acts(&mut tape, xv).unwrap();
    let wq = fake_quant_weights(&mut tape, wv).unwrap();
    let y = tape.matmul_nt(xq, wq).unwrap();
    let loss = probe(&mut tape, y, 101);
    let grads = tape.backward(loss).unwrap();

    // The STE backward is the identity, so its gradient at the quantized
    // point equals the surrogate's gradient evaluated at the quantized values.
    let xq_val = tape.value(xq).clone();
    let wq_val = tape.value(wq).clone();
    let mut at_q = Tape::new();
    let xa = at_q.param(xq_val.clone());
    let wa = at_q.param(wq_val.clone());
    let ya = at_q.matmul_nt(xa, wa).unwrap();
    let la = probe(&mut at_q, ya, 101);
    let qgrads = at_q.backward(la).unwrap();
    assert_eq!(grads.get(xv).unwrap(), qgrads.get(xa).unwrap());
    assert_eq!(grads.get(wv).unwrap(), qgrads.get(wa).unwrap());

    check("surrogate linear", &[xq_val, wq_val], &|t, v| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        probe(t, y, 101)
    }, 25);
}

/// The full-precision sequence model through the composite distillation loss.
pub fn seq_model_total_loss() {
    use tern_core::nn::{EncoderConfig, Graph, Module, SeqModel};

    let cfg = EncoderConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        vocab: 12,
        max_seq: 6,
        quantized: false,
        mlp_ratio: 2,
        decoder_layers: 1,
    };
    let model = SeqModel::new(cfg, 3).unwrap();
    let teacher = SeqModel::new(cfg, 4).unwrap();
    let batch = vec![vec![1, 4, 2, 7, 3, 9], vec![0, 5, 5, 11, 2, 8]];
    let targets = [4, 2, 7, 3, 9, 0, 5, 5, 11, 2, 8, 1];
    let mask = [false, false, true, true, true, true, false, true, false, true, true, true];
    let t_hidden = teacher.encoder_hidden_states(&batch).unwrap();

    let loss_of = |m: &SeqModel| -> (f64, std::collections::BTreeMap<String, Tensor>) {
        let mut g = Graph::train();
        let out = m.forward(&mut g, &batch).unwrap();
        let tv: Vec<Var> = t_hidden.iter().map(|h| g.tape.constant(h.clone())).collect();
        let aux = aux_loss(&mut g.tape, &tv, &out.hiddens).unwrap();
        let lm = lm_loss(&mut g.tape, out.logits, &targets, &mask).unwrap();
        let total = total_loss(&mut g.tape, lm, aux, LossWeights::new(0.1).unwrap()).unwrap();
        let v = g.tape.value(total).item();
        let grads = g.tape.backward(total).unwrap();
        (v, g.param_grads(&grads))
    };
    let (_, grads) = loss_of(&model);
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    let mut r = rng(77);
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for name in &names {
        let analytic = &grads[name];
        for _ in 0..6 {
            let j = r.random_range(0..analytic.len());
            let bumped = |d: f64| {
                let mut m = model.clone();
                let p = m.params_mut().into_iter().find(|p| &p.name == name).unwrap();
                p.value.data_mut()[j] += d;
                loss_of(&m).0
            };
            let numeric = (bumped(STEP) - bumped(-STEP)) / (2.0 * STEP);
            let a = analytic.data()[j];
            diff += (a - numeric).powi(2);
            norm += a.abs().max(numeric.abs()).powi(2);
        }
    }
    let rel = diff.sqrt() / norm.sqrt();
    assert!(rel <= TOL, "seq model relative gradient error {rel:e}");
}

/// Every gradient check, by name.
#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("matmul_variants", matmul_variants),
    ("elementwise_binary", elementwise_binary),
    ("row_broadcasts", row_broadcasts),
    ("unary_ops", unary_ops),
    ("row_selection_ops", row_selection_ops),
    ("attention", attention),
    ("cross_entropy_and_lm_loss", cross_entropy_and_lm_loss),
    ("aux_and_total_loss", aux_and_total_loss),
    ("action_l1", action_l1),
    ("fake_quant_linear_matches_surrogate", fake_quant_linear_matches_surrogate),
    ("seq_model_total_loss", seq_model_total_loss),
];
