use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unitabe::model::{ModelConfig, Preset, UniTabE};
use unitabe::numeric::gradcheck::check_coordinates;
use unitabe::numeric::{AdamState, GradBuffer, ParamSet, Real, Tape, Tensor, Var};
use unitabe::table::{Cell, Column, DataType, Table};
use unitabe::tokenizer::VocabBuilder;

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// Three dense layers with biases, 147 scalars in total.
fn toy_params(seed: u64) -> ParamSet<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for (name, shape) in [
        ("l1.w", vec![5, 8]),
        ("l1.b", vec![8]),
        ("l2.w", vec![8, 8]),
        ("l2.b", vec![8]),
        ("l3.w", vec![8, 3]),
        ("l3.b", vec![3]),
    ] {
        p.register(name, uniform(&mut r, &shape, 0.6)).unwrap();
    }
    p
}

fn dense<'p>(tape: &mut Tape<'p, f64>, x: Var, w: usize, b: usize) -> Var {
    let (w, b) = (tape.param(w), tape.param(b));
    let y = tape.matmul(x, w).unwrap();
    tape.add_row(y, b).unwrap()
}

fn toy_loss<'p>(tape: &mut Tape<'p, f64>, x: &[f64]) -> Var {
    let x = tape.input(4, 5, x.to_vec()).unwrap();
    let h = dense(tape, x, 0, 1);
    let h = tape.gelu(h);
    let h = dense(tape, h, 2, 3);
    let h = tape.tanh(h);
    let h = tape.layer_norm(h);
    let logits = dense(tape, h, 4, 5);
    tape.cross_entropy(logits, &[0, 2, 1, 2]).unwrap()
}

#[test]
fn toy_network_gradients_match_finite_differences_everywhere() {
    let params = toy_params(1);
    assert!(params.num_scalars() <= 500);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new(&params);
    let loss = toy_loss(&mut tape, &x);
    let grads = tape.backward(loss).unwrap();
    let coords: Vec<(usize, usize)> =
        (0..params.len()).flat_map(|id| (0..params.get(id).numel()).map(move |i| (id, i))).collect();
    let checks = check_coordinates(
        &params,
        &coords,
        1e-5,
        1e-7,
        |p| {
            let mut t = Tape::inference(p);
            let l = toy_loss(&mut t, &x);
            t.scalar(l)
        },
        |id, i| grads.param(id).unwrap()[i],
    );
    assert_eq!(checks.len(), 147);
    let worst = checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
    assert!(worst.rel_err < 1e-3, "{worst:?}");
}

#[test]
fn attention_and_pooling_gradients_match_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut p = ParamSet::new();
    p.register("emb", uniform(&mut r, &[6, 4], 1.0)).unwrap();
    p.register("wq", uniform(&mut r, &[4, 4], 0.8)).unwrap();
    p.register("gate", uniform(&mut r, &[4], 0.8)).unwrap();
    let loss_of = |t: &mut Tape<'_, f64>| {
        let (emb, wq, gate) = (t.param(0), t.param(1), t.param(2));
        let x = t.embedding_lookup(emb, &[1, 3, 3, 5, 0]).unwrap();
        let q = t.matmul(x, wq).unwrap();
        let a = t.attention(q, x, x, 2).unwrap();
        let s = t.sigmoid(gate);
        let g = t.mul_row(a, s).unwrap();
        let seg = t.segment_mean(g, &[2, 3]).unwrap();
        let u = t.slice_rows(seg, 0, 1).unwrap();
        let v = t.slice_rows(seg, 1, 1).unwrap();
        let c = t.cosine_similarity(u, v).unwrap();
        let sm = t.softmax(seg);
        let pooled = t.mean_pool(sm).unwrap();
        let relu = t.relu(pooled);
        let tail = t.sum(relu);
        t.add(c, tail).unwrap()
    };
    let mut tape = Tape::new(&p);
    let loss = loss_of(&mut tape);
    let grads = tape.backward(loss).unwrap();
    let coords: Vec<(usize, usize)> =
        (0..p.len()).flat_map(|id| (0..p.get(id).numel()).map(move |i| (id, i))).collect();
    let checks = check_coordinates(
        &p,
        &coords,
        1e-5,
        1e-7,
        |q| {
            let mut t = Tape::inference(q);
            let l = loss_of(&mut t);
            t.scalar(l)
        },
        |id, i| grads.param(id).map_or(0.0, |g| g[i]),
    );
    let worst = checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
    assert!(worst.rel_err < 1e-3, "{worst:?}");
}

#[test]
fn tiny_model_gradients_match_on_sampled_coordinates() {
    let t = Table::new(
        vec![
            Column::new("age", DataType::Numerical),
            Column::new("city", DataType::Categorical),
            Column::new("note", DataType::Textual),
        ],
        vec![vec![Cell::value("41.5"), Cell::value("paris"), Cell::value("wants a new car")]],
    )
    .unwrap();
    let mut b = VocabBuilder::with_fill_prompt();
    b.add_table(&t);
    b.reserve("green");
    let v = b.build(1);
    let mut cfg = ModelConfig::new(Preset::Tiny, v.len());
    cfg.dropout = 0.0;
    let mut m = UniTabE::<f64>::new(cfg.clone(), 4).unwrap();
    assert!(m.params().num_scalars() < 200_000);
    // nonzero gate biases so their gradients are not trivially symmetric
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for name in ["fuse.b", "link.b"] {
        for x in m.params_mut().by_name_mut(name).unwrap().data_mut() {
            *x = r.random_range(-0.2..0.2);
        }
    }
    let cols: Vec<usize> = (0..t.num_cols()).collect();
    let cells = v.tokenize_row(t.schema(), t.row(0), &cols);
    let prompt = v.fill_prompt("colour");
    let target = v.tokenize_text("green").with_eos();
    let loss_of = |m: &UniTabE<f64>, tape: &mut Tape<'_, f64>| {
        let enc = m.encode_cells(tape, &cells).unwrap();
        let s = m.decoder_init(tape, &enc, &prompt).unwrap();
        m.decode_train(tape, s, &target).unwrap()
    };
    let mut tape = Tape::new(m.params());
    let loss = loss_of(&m, &mut tape);
    let grads = tape.backward(loss).unwrap();
    let reached: Vec<usize> = (0..m.params().len()).filter(|&id| grads.param(id).is_some()).collect();
    let coords: Vec<(usize, usize)> = (0..200)
        .map(|_| {
            let id = reached[r.random_range(0..reached.len())];
            (id, r.random_range(0..m.params().get(id).numel()))
        })
        .collect();
    let checks = check_coordinates(
        m.params(),
        &coords,
        1e-5,
        1e-7,
        |p| {
            let mm = UniTabE::from_params(cfg.clone(), p.clone()).unwrap();
            let mut t = Tape::inference(mm.params());
            let l = loss_of(&mm, &mut t);
            t.scalar(l)
        },
        |id, i| grads.param(id).unwrap()[i],
    );
    let worst = checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
    assert!(worst.rel_err < 1e-3, "{worst:?}");
}

fn train_toy(seed: u64, steps: usize) -> ParamSet<f64> {
    let mut params = toy_params(seed);
    let mut adam = AdamState::new(&params);
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for _ in 0..steps {
        let x: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut buf = GradBuffer::zeros_like(&params);
        {
            let mut tape = Tape::new(&params);
            let loss = toy_loss(&mut tape, &x);
            buf.accumulate(&tape.backward(loss).unwrap(), 1.0);
        }
        adam.step(&mut params, &buf, 1e-2).unwrap();
    }
    assert_eq!(adam.step, steps as u64);
    params
}

fn bits(p: &ParamSet<f64>) -> Vec<u64> {
    p.iter().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits())).collect()
}

#[test]
fn identical_adam_runs_are_bit_identical() {
    assert_eq!(bits(&train_toy(7, 25)), bits(&train_toy(7, 25)));
    assert_ne!(bits(&train_toy(7, 25)), bits(&train_toy(8, 25)));
}

#[test]
fn adam_first_step_on_square_lands_near_point_nine() {
    let mut p = ParamSet::new();
    p.register("theta", Tensor::scalar(1.0f64)).unwrap();
    let mut adam = AdamState::new(&p);
    let mut g = GradBuffer::zeros_like(&p);
    g.get_mut(0)[0] = 2.0;
    adam.step(&mut p, &g, 0.1).unwrap();
    // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
    let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
    assert!((p.get(0).data()[0] - expected).abs() < 1e-12);
}

fn check_softmax<T: Real>(logits: &[f64]) -> Result<(), TestCaseError> {
    let p = ParamSet::<T>::new();
    let mut tape = Tape::inference(&p);
    let x = tape.input(1, logits.len(), logits.iter().map(|&v| T::of(v)).collect()).unwrap();
    let s = tape.softmax(x);
    let out: Vec<f64> = tape.value(s).iter().map(|v| v.as_f64()).collect();
    prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    prop_assert!(out.iter().all(|&v| v > 0.0));
    Ok(())
}

proptest! {
    #[test]
    fn softmax_is_a_positive_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        check_softmax::<f32>(&logits)?;
        check_softmax::<f64>(&logits)?;
    }

    #[test]
    fn layer_norm_standardizes_each_row(
        rows in 1usize..5,
        data in prop::collection::vec(-50.0f64..50.0, 64 * 5),
        spread in 0.5f64..10.0,
    ) {
        let p = ParamSet::<f64>::new();
        let mut tape = Tape::inference(&p);
        let vals: Vec<f64> = data[..rows * 64].iter().map(|v| v * spread).collect();
        let x = tape.input(rows, 64, vals).unwrap();
        let y = tape.layer_norm(x);
        for r in 0..rows {
            let row = tape.row(y, r);
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn finite_inputs_give_finite_outputs(data in prop::collection::vec(-1e3f64..1e3, 12)) {
        let p = ParamSet::<f32>::new();
        let mut tape = Tape::inference(&p);
        let x = tape.input(3, 4, data.iter().map(|&v| v as f32).collect()).unwrap();
        let ops = [tape.gelu(x), tape.sigmoid(x), tape.tanh(x), tape.softmax(x), tape.layer_norm(x), tape.relu(x)];
        for v in ops {
            prop_assert!(tape.value(v).iter().all(|z| z.is_finite()));
        }
        let z = tape.input(1, 4, vec![0.0; 4]).unwrap();
        let first = tape.slice_rows(x, 0, 1).unwrap();
        let c = tape.cosine_similarity(first, z).unwrap();
        prop_assert!(tape.scalar(c).is_finite());
    }
}
