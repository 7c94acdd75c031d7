//! Finite-difference verification for every operator and for a composite
//! graph shaped like the real training losses (attention, mixture, switch).

use ndiff::{grad_check, Result, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in [-scale, scale], generated in f64 so the f32 and f64
/// variants of a test see the same underlying numbers.
fn fill<T: Scalar>(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<T> {
    let len: usize = dims.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * scale))
        .collect();
    Tensor::from_vec(dims, data)
}

/// Deterministic non-uniform weights so reductions don't cancel structure
/// (e.g. sum of a softmax row is constant; a weighted sum is not).
fn weights<T: Scalar>(tape: &mut Tape<T>, dims: &[usize], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = fill(&mut rng, dims, 1.0);
    tape.constant(w)
}

fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, x: Var, seed: u64) -> Result<Var> {
    let dims = tape.value(x).dims().to_vec();
    let w = weights(tape, &dims, seed);
    let p = tape.mul(x, w)?;
    Ok(tape.sum_all(p))
}

fn assert_grad_ok(
    inputs: &[Tensor<f64>],
    tol: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) {
    let report = grad_check(inputs, 1e-3, build).expect("graph construction");
    assert!(
        report.max_rel_err < tol,
        "gradient mismatch: {:?}",
        report
    );
}

#[test]
fn matmul_family_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Tensor<f64> = fill(&mut rng, &[3, 4], 0.9);
    let b: Tensor<f64> = fill(&mut rng, &[4, 5], 0.9);
    assert_grad_ok(&[a.clone(), b.clone()], 1e-5, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        weighted_sum(t, c, 11)
    });

    let bt: Tensor<f64> = fill(&mut rng, &[5, 4], 0.9);
    assert_grad_ok(&[a, bt], 1e-5, |t, v| {
        let c = t.matmul_nt(v[0], v[1])?;
        weighted_sum(t, c, 12)
    });

    let ba: Tensor<f64> = fill(&mut rng, &[2, 3, 4], 0.9);
    let bb: Tensor<f64> = fill(&mut rng, &[2, 4, 5], 0.9);
    assert_grad_ok(&[ba.clone(), bb], 1e-5, |t, v| {
        let c = t.bmm(v[0], v[1])?;
        weighted_sum(t, c, 13)
    });

    let bbt: Tensor<f64> = fill(&mut rng, &[2, 5, 4], 0.9);
    assert_grad_ok(&[ba, bbt], 1e-5, |t, v| {
        let c = t.bmm_nt(v[0], v[1])?;
        weighted_sum(t, c, 14)
    });
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Tensor<f64> = fill(&mut rng, &[3, 4], 1.0);
    let b: Tensor<f64> = fill(&mut rng, &[3, 4], 1.0);
    let bias: Tensor<f64> = fill(&mut rng, &[4], 1.0);
    let scale: Tensor<f64> = fill(&mut rng, &[3], 1.0);

    assert_grad_ok(&[a.clone(), b.clone()], 1e-5, |t, v| {
        let s = t.add(v[0], v[1])?;
        weighted_sum(t, s, 21)
    });
    assert_grad_ok(&[a.clone(), b], 1e-5, |t, v| {
        let s = t.mul(v[0], v[1])?;
        weighted_sum(t, s, 22)
    });
    assert_grad_ok(&[a.clone(), bias], 1e-5, |t, v| {
        let s = t.add_bias(v[0], v[1])?;
        weighted_sum(t, s, 23)
    });
    assert_grad_ok(&[a.clone(), scale], 1e-5, |t, v| {
        let s = t.row_scale(v[0], v[1])?;
        weighted_sum(t, s, 24)
    });
    assert_grad_ok(&[a], 1e-5, |t, v| {
        let s = t.mul_scalar(v[0], -1.7);
        let s = t.add_scalar(s, 0.3);
        weighted_sum(t, s, 25)
    });
}

#[test]
fn shape_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Tensor<f64> = fill(&mut rng, &[2, 3, 4], 1.0);
    assert_grad_ok(&[a], 1e-5, |t, v| {
        let tr = t.transpose_102(v[0])?;
        let rs = t.reshape(tr, &[6, 4])?;
        weighted_sum(t, rs, 31)
    });

    let p1: Tensor<f64> = fill(&mut rng, &[2, 3], 1.0);
    let p2: Tensor<f64> = fill(&mut rng, &[4, 3], 1.0);
    assert_grad_ok(&[p1.clone(), p2.clone()], 1e-5, |t, v| {
        let c = t.concat_rows(&[v[0], v[1], v[0]])?;
        weighted_sum(t, c, 32)
    });

    let q1: Tensor<f64> = fill(&mut rng, &[3, 2], 1.0);
    let q2: Tensor<f64> = fill(&mut rng, &[3, 5], 1.0);
    assert_grad_ok(&[q1, q2], 1e-5, |t, v| {
        let c = t.concat_cols(&[v[0], v[1]])?;
        weighted_sum(t, c, 33)
    });

    assert_grad_ok(&[p2], 1e-5, |t, v| {
        let s = t.slice_rows(v[0], 1, 2)?;
        weighted_sum(t, s, 34)
    });
}

#[test]
fn lookup_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table: Tensor<f64> = fill(&mut rng, &[5, 3], 1.0);
    assert_grad_ok(&[table.clone()], 1e-5, |t, v| {
        let g = t.gather(v[0], &[4, 0, 0, 2])?;
        weighted_sum(t, g, 41)
    });

    let m: Tensor<f64> = fill(&mut rng, &[4, 6], 1.0);
    assert_grad_ok(&[m.clone()], 1e-5, |t, v| {
        let p = t.pick(v[0], &[5, 0, 3, 3])?;
        weighted_sum(t, p, 42)
    });

    assert_grad_ok(&[m], 1e-5, |t, v| {
        let mr = t.mean_rows(v[0])?;
        weighted_sum(t, mr, 43)
    });
}

#[test]
fn nonlinearity_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a: Tensor<f64> = fill(&mut rng, &[3, 5], 2.0);

    assert_grad_ok(&[a.clone()], 1e-5, |t, v| {
        let s = t.softmax(v[0])?;
        weighted_sum(t, s, 51)
    });
    assert_grad_ok(&[a.clone()], 1e-5, |t, v| {
        let s = t.sigmoid(v[0]);
        weighted_sum(t, s, 52)
    });
    assert_grad_ok(&[a.clone()], 1e-5, |t, v| {
        let s = t.tanh(v[0]);
        weighted_sum(t, s, 53)
    });
    assert_grad_ok(&[a.clone()], 1e-5, |t, v| {
        let s = t.gelu(v[0]);
        weighted_sum(t, s, 54)
    });

    let gamma: Tensor<f64> = fill(&mut rng, &[5], 1.0);
    let beta: Tensor<f64> = fill(&mut rng, &[5], 1.0);
    assert_grad_ok(&[a, gamma, beta], 1e-5, |t, v| {
        let s = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, s, 55)
    });

    // log needs strictly positive inputs.
    let mut rng2 = ChaCha8Rng::seed_from_u64(6);
    let len = 12;
    let pos = Tensor::from_vec(
        &[3, 4],
        (0..len).map(|_| 0.5 + rng2.gen::<f64>()).collect(),
    );
    assert_grad_ok(&[pos], 1e-5, |t, v| {
        let s = t.log(v[0]);
        weighted_sum(t, s, 56)
    });
}

#[test]
fn reduction_and_dropout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a: Tensor<f64> = fill(&mut rng, &[4, 3], 1.0);
    assert_grad_ok(&[a.clone()], 1e-5, |t, v| Ok(t.sum_all(v[0])));
    assert_grad_ok(&[a.clone()], 1e-5, |t, v| Ok(t.mean_all(v[0])));

    assert_grad_ok(&[a], 1e-5, |t, v| {
        let mask = t.constant(Tensor::from_vec(
            &[4, 3],
            vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0],
        ));
        let d = t.dropout(v[0], mask, 0.75)?;
        weighted_sum(t, d, 71)
    });
}

// ---------------------------------------------------------------------------
// Composite graph: a miniature of the full training loss, covering embedding
// lookup, multi-head attention with a causal mask, an MLP, a copy-style
// attention over external rows, a sigmoid switch, the two-way mixture of
// distributions and the (1 - p) pressure term.
// ---------------------------------------------------------------------------

const SEQ: usize = 4;
const DIM: usize = 6;
const HEADS: usize = 2;
const VOCAB: usize = 9;
const TAB: usize = 3;
const HID: usize = 10;

fn composite_inputs<T: Scalar>(seed: u64) -> Vec<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Unit-scale embeddings and near-one norm gains keep the layer norms in
    // a gentle regime (normalizing rows of std << 1 blows up higher-order
    // derivatives by powers of 1/std), and an untied output head avoids the
    // derivative cancellation a tied head induces.  Together these keep
    // central differences at h = 1e-3 well inside the 1e-5 tolerance.
    let s = 0.4;
    let gain = |rng: &mut ChaCha8Rng| fill::<T>(rng, &[DIM], 0.25).map(|x| x + T::one());
    vec![
        fill(&mut rng, &[VOCAB, DIM], 1.0), // 0: input embeddings
        fill(&mut rng, &[DIM, DIM], s),     // 1: wq
        fill(&mut rng, &[DIM, DIM], s),     // 2: wk
        fill(&mut rng, &[DIM, DIM], s),     // 3: wv
        fill(&mut rng, &[DIM, DIM], s),     // 4: wo
        fill(&mut rng, &[DIM], s),          // 5: bo
        gain(&mut rng),                     // 6: ln1 gain
        fill(&mut rng, &[DIM], 0.2),        // 7: ln1 bias
        fill(&mut rng, &[DIM, HID], s),     // 8: mlp w1
        fill(&mut rng, &[HID], s),          // 9: mlp b1
        fill(&mut rng, &[HID, DIM], s),     // 10: mlp w2
        fill(&mut rng, &[DIM], s),          // 11: mlp b2
        gain(&mut rng),                     // 12: ln2 gain
        fill(&mut rng, &[DIM], 0.2),        // 13: ln2 bias
        fill(&mut rng, &[TAB, DIM], 1.0),   // 14: table rows
        fill(&mut rng, &[2 * DIM, 1], s),   // 15: switch weight
        fill(&mut rng, &[1], s),            // 16: switch bias
        fill(&mut rng, &[VOCAB, DIM], s),   // 17: output head
    ]
}

fn composite_loss<T: Scalar>(tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    let dh = DIM / HEADS;
    let ids = [2usize, 7, 1, 4];
    let targets = [7usize, 1, 4, 0];
    let matched = [0.0, 1.0, 1.0, 0.0];

    let x = tape.gather(v[0], &ids)?;
    let xn = tape.layer_norm(x, v[6], v[7], T::from_f64(1e-5))?;

    let split = |tape: &mut Tape<T>, m: Var| -> Result<Var> {
        let r = tape.reshape(m, &[SEQ, HEADS, dh])?;
        tape.transpose_102(r)
    };
    let q = tape.matmul(xn, v[1])?;
    let k = tape.matmul(xn, v[2])?;
    let val = tape.matmul(xn, v[3])?;
    let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, val)?);

    let scores = tape.bmm_nt(qh, kh)?;
    let scaled = tape.mul_scalar(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
    let mut mask = vec![T::zero(); HEADS * SEQ * SEQ];
    for h in 0..HEADS {
        for i in 0..SEQ {
            for j in (i + 1)..SEQ {
                mask[h * SEQ * SEQ + i * SEQ + j] = T::from_f64(-1e9);
            }
        }
    }
    let mask = tape.constant(Tensor::from_vec(&[HEADS, SEQ, SEQ], mask));
    let masked = tape.add(scaled, mask)?;
    let attnw = tape.softmax(masked)?;
    let ctx = tape.bmm(attnw, vh)?;
    let ctx = tape.transpose_102(ctx)?;
    let ctx = tape.reshape(ctx, &[SEQ, DIM])?;
    let proj = tape.linear(ctx, v[4], v[5])?;
    let x1 = tape.add(x, proj)?;

    let x1n = tape.layer_norm(x1, v[12], v[13], T::from_f64(1e-5))?;
    let h1 = tape.linear(x1n, v[8], v[9])?;
    let h1 = tape.gelu(h1);
    let h2 = tape.matmul(h1, v[10])?;
    let h2 = tape.add_bias(h2, v[11])?;
    let hidden = tape.add(x1, h2)?;

    let logits = tape.matmul_nt(hidden, v[17])?;
    let logits = tape.mul_scalar(logits, T::from_f64(0.4));
    let pvocab = tape.softmax(logits)?;

    // Copy distribution over table rows scattered to vocabulary slots.
    let scores_t = tape.matmul_nt(hidden, v[14])?;
    let scaled_t = tape.mul_scalar(scores_t, T::from_f64(1.0 / (DIM as f64).sqrt()));
    let a_t = tape.softmax(scaled_t)?;
    let mut scatter = vec![T::zero(); TAB * VOCAB];
    for (i, &slot) in [7usize, 1, 5].iter().enumerate() {
        scatter[i * VOCAB + slot] = T::one();
    }
    let scatter = tape.constant(Tensor::from_vec(&[TAB, VOCAB], scatter));
    let pcopy_dist = tape.matmul(a_t, scatter)?;

    // Switch probability from [hidden; input embedding].
    let sw_in = tape.concat_cols(&[hidden, x])?;
    let z = tape.matmul(sw_in, v[15])?;
    let z = tape.add_bias(z, v[16])?;
    let pc_col = tape.sigmoid(z);
    let pc = tape.reshape(pc_col, &[SEQ])?;

    let keep = tape.one_minus(pc);
    let gen_part = tape.row_scale(pvocab, keep)?;
    let copy_part = tape.row_scale(pcopy_dist, pc)?;
    let mixture = tape.add(gen_part, copy_part)?;

    let nll = tape.cross_entropy_from_probs(mixture, &targets)?;
    let nll_sum = tape.sum_all(nll);
    let nll_mean = tape.mul_scalar(nll_sum, T::from_f64(1.0 / SEQ as f64));

    let miss = tape.one_minus(pc);
    let mask_m = tape.constant(Tensor::from_vec(
        &[SEQ],
        matched.iter().map(|&m| T::from_f64(m)).collect(),
    ));
    let pressure = tape.mul(miss, mask_m)?;
    let pressure = tape.sum_all(pressure);
    let pressure = tape.mul_scalar(pressure, T::from_f64(0.7));

    tape.add(nll_mean, pressure)
}

/// 64-bit: every coordinate of every parameter within 1e-5 of central
/// differences at h = 1e-3, across 20 seeds.
#[test]
fn composite_graph_fd_64bit_20_seeds() {
    for seed in 0..20u64 {
        let inputs = composite_inputs::<f64>(seed);
        let report = grad_check(&inputs, 1e-3, composite_loss).expect("build");
        assert!(
            report.max_rel_err < 1e-5,
            "seed {}: {:?}",
            seed,
            report
        );
    }
}

/// 32-bit rules against 64-bit central differences: the comparison isolates
/// single-precision rule error from finite-difference roundoff.
#[test]
fn composite_graph_fd_32bit() {
    for seed in 0..5u64 {
        let inputs32 = composite_inputs::<f32>(seed);
        let mut tape: Tape<f32> = Tape::new();
        let vars: Vec<Var> = inputs32.iter().map(|t| tape.param(t.clone())).collect();
        let loss = composite_loss(&mut tape, &vars).expect("build");
        let grads = tape.backward(loss).expect("backward");

        let inputs64 = composite_inputs::<f64>(seed);
        let h = 1e-4;
        let eval = |tensors: &[Tensor<f64>]| -> f64 {
            let mut t: Tape<f64> = Tape::new();
            let vs: Vec<Var> = tensors.iter().map(|x| t.constant(x.clone())).collect();
            let l = composite_loss(&mut t, &vs).expect("build");
            t.value(l).item()
        };
        let mut work = inputs64.clone();
        let mut max_rel = 0.0f64;
        for (i, input) in inputs64.iter().enumerate() {
            for j in 0..input.len() {
                let orig = input.data()[j];
                work[i].data_mut()[j] = orig + h;
                let up = eval(&work);
                work[i].data_mut()[j] = orig - h;
                let down = eval(&work);
                work[i].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(vars[i]).unwrap().data()[j] as f64;
                let denom = analytic.abs().max(numeric.abs()).max(1e-4);
                max_rel = max_rel.max((analytic - numeric).abs() / denom);
            }
        }
        assert!(max_rel < 1e-3, "seed {}: max rel err {}", seed, max_rel);
    }
}

/// Identical graphs produce bit-identical values and gradients.
#[test]
fn replay_is_bit_identical() {
    let run = || {
        let inputs = composite_inputs::<f32>(99);
        let mut tape: Tape<f32> = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = composite_loss(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut flat = vec![tape.value(loss).item()];
        for &v in &vars {
            flat.extend_from_slice(grads.get(v).unwrap().data());
        }
        flat
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}
