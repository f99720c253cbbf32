use proptest::prelude::*;
use rand::SeedableRng;

use unitabe::model::{GenConstraint, ModelConfig, Preset, UniTabE};
use unitabe::numeric::{rng, AdamState, GradBuffer, Real, Tape, Tensor, Var};
use unitabe::pretrain::{
    cl_loss, info_nce, mcm_loss, pretrain_loop, sample_blocks, sample_mask, BlockPair, Event,
    MaskPlan, McmExample, Objective, PretrainError, TrainPlan, TrainState,
};
use unitabe::synth;
use unitabe::table::{Cell, Column, DataType, Table};
use unitabe::tokenizer::{CellTokens, VocabBuilder, Vocabulary, MASK};

type R = rng::Rng;

fn no_dropout() -> Option<&'static mut R> {
    None
}

fn vocab_for(tables: &[Table]) -> Vocabulary {
    let mut b = VocabBuilder::with_fill_prompt();
    for t in tables {
        b.add_table(t);
    }
    b.build(1)
}

fn tiny<T: Real>(v: &Vocabulary, seed: u64) -> UniTabE<T> {
    let mut cfg = ModelConfig::new(Preset::Tiny, v.len());
    cfg.dropout = 0.0;
    UniTabE::new(cfg, seed).unwrap()
}

fn small_table() -> Table {
    Table::new(
        vec![
            Column::new("age", DataType::Numerical),
            Column::new("city", DataType::Categorical),
            Column::new("colour", DataType::Categorical),
            Column::new("note", DataType::Textual),
        ],
        vec![
            vec![
                Cell::value("31"),
                Cell::value("paris"),
                Cell::value("blue"),
                Cell::value("good risk"),
            ],
            vec![
                Cell::value("45"),
                Cell::value("rome"),
                Cell::value("red"),
                Cell::Missing,
            ],
            vec![
                Cell::value("27"),
                Cell::value("tokyo"),
                Cell::value("green"),
                Cell::value("bad risk"),
            ],
        ],
    )
    .unwrap()
}

fn row_of(n: usize) -> Vec<Cell> {
    (0..n).map(|i| Cell::value(i.to_string())).collect()
}

#[test]
fn zero_rate_masks_exactly_one_backup_cell() {
    let mut r = R::seed_from_u64(1);
    let mut row = row_of(6);
    row[2] = Cell::Missing;
    for _ in 0..1000 {
        let m = sample_mask(&row, 0.0, &mut r).unwrap();
        assert_eq!(m.len(), 1);
        assert_ne!(m[0], 2);
    }
}

#[test]
fn full_rate_masks_every_present_cell() {
    let mut r = R::seed_from_u64(2);
    let mut row = row_of(5);
    row[0] = Cell::Missing;
    row[3] = Cell::Missing;
    assert_eq!(sample_mask(&row, 1.0, &mut r).unwrap(), vec![1, 2, 4]);
}

#[test]
fn all_missing_row_cannot_be_masked() {
    let mut r = R::seed_from_u64(3);
    let row = vec![Cell::Missing, Cell::Missing];
    assert_eq!(
        sample_mask(&row, 0.5, &mut r),
        Err(PretrainError::AllMissingRow)
    );
}

#[test]
fn masked_fraction_matches_rate() {
    // 10k rows of 10 cells; rows where nothing is drawn get one backup cell,
    // which adds (1-p)^10 / 10 to the marginal.
    let p = 0.15;
    let n = 10;
    let rows = 10_000;
    let mut r = R::seed_from_u64(4);
    let row = row_of(n);
    let masked: usize = (0..rows)
        .map(|_| sample_mask(&row, p, &mut r).unwrap().len())
        .sum();
    let frac = masked as f64 / (rows * n) as f64;
    let expected = p + (1.0 - p).powi(n as i32) / n as f64;
    let sigma = (expected * (1.0 - expected) / (rows * n) as f64).sqrt();
    assert!(
        (frac - expected).abs() < 3.0 * sigma,
        "fraction {frac}, expected {expected} ± {}",
        3.0 * sigma
    );
}

#[test]
fn four_columns_give_half_overlapping_neighbours() {
    let mut r = R::seed_from_u64(5);
    for _ in 0..200 {
        let pairs = sample_blocks(&[4, 4, 4], 0.5, &mut r).unwrap();
        assert_eq!(pairs.len(), 3);
        for (i, p) in pairs.iter().enumerate() {
            assert_eq!(p.row, i);
            assert_eq!(p.anchor.len(), 2);
            assert_eq!(p.positive.len(), 2);
            assert_eq!(p.shared(), 1);
            assert_eq!(p.anchor.start.abs_diff(p.positive.start), 1);
            assert!(p.anchor.end <= 4 && p.positive.end <= 4);
            assert!(!p.is_degenerate());
        }
    }
}

#[test]
fn two_columns_give_degenerate_pair() {
    let mut r = R::seed_from_u64(6);
    let pairs = sample_blocks(&[2, 2], 0.5, &mut r).unwrap();
    for p in &pairs {
        assert_eq!(p.anchor.len(), 1);
        assert!(p.is_degenerate());
    }
}

#[test]
fn block_preconditions_are_enforced() {
    let mut r = R::seed_from_u64(7);
    assert_eq!(
        sample_blocks(&[4], 0.5, &mut r),
        Err(PretrainError::TooFewRows(1))
    );
    assert_eq!(
        sample_blocks(&[4, 1], 0.5, &mut r),
        Err(PretrainError::TooFewColumns(1))
    );
}

proptest! {
    #[test]
    fn blocks_share_the_rounded_overlap(n in 2usize..12, overlap in 0.05f64..0.95, seed in 0u64..1000) {
        let mut r = R::seed_from_u64(seed);
        let p = &sample_blocks(&[n, n], overlap, &mut r).unwrap()[0];
        let w = n.div_ceil(2);
        prop_assert_eq!(p.anchor.len(), w);
        prop_assert_eq!(p.positive.len(), w);
        prop_assert!(p.anchor.end <= n && p.positive.end <= n);
        let shared = ((overlap * w as f64).round() as usize).min(w);
        if p.is_degenerate() {
            prop_assert!(shared == w || 2 * w - shared > n);
        } else {
            prop_assert_eq!(p.shared(), shared);
        }
    }
}

fn leaf(tape: &mut Tape<'_, f64>, x: &[f64]) -> Var {
    tape.leaf(&Tensor::new(vec![1, x.len()], x.to_vec()).unwrap(), false)
        .unwrap()
}

#[test]
fn info_nce_with_orthogonal_negative() {
    let params = unitabe::numeric::ParamSet::<f64>::new();
    let mut tape = Tape::new(&params);
    let a = leaf(&mut tape, &[1.0, 0.0]);
    let n = leaf(&mut tape, &[0.0, 3.0]);
    let l = info_nce(&mut tape, a, a, &[n], 0.1).unwrap();
    let expected = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
    assert!((tape.scalar(l) - expected).abs() < 1e-15);
    assert!((tape.scalar(l) - 4.54e-5).abs() < 1e-7);
}

#[test]
fn info_nce_with_all_equal_inputs_is_log_k_plus_one() {
    let params = unitabe::numeric::ParamSet::<f64>::new();
    for k in 1..6 {
        let mut tape = Tape::new(&params);
        let a = leaf(&mut tape, &[0.3, -1.2, 2.0]);
        let negs: Vec<Var> = (0..k).map(|_| leaf(&mut tape, &[0.3, -1.2, 2.0])).collect();
        let l = info_nce(&mut tape, a, a, &negs, 0.1).unwrap();
        assert!((tape.scalar(l) - ((k + 1) as f64).ln()).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn info_nce_is_non_negative(
        a in prop::collection::vec(-3.0f64..3.0, 4),
        p in prop::collection::vec(-3.0f64..3.0, 4),
        n in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..5),
    ) {
        let params = unitabe::numeric::ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let a = leaf(&mut tape, &a);
        let p = leaf(&mut tape, &p);
        let negs: Vec<Var> = n.iter().map(|x| leaf(&mut tape, x)).collect();
        let l = info_nce(&mut tape, a, p, &negs, 0.1).unwrap();
        prop_assert!(tape.scalar(l) >= 0.0);
    }
}

#[test]
fn contrastive_loss_uses_other_rows_as_negatives() {
    let t = small_table();
    let v = vocab_for(&[t.clone()]);
    let m = tiny::<f64>(&v, 8);
    let order: Vec<usize> = (0..4).collect();
    let rows: Vec<Vec<CellTokens>> = (0..3)
        .map(|r| v.tokenize_row(t.schema(), t.row(r), &order))
        .collect();
    let pairs = vec![
        BlockPair {
            row: 0,
            anchor: 0..2,
            positive: 1..3,
        },
        BlockPair {
            row: 1,
            anchor: 2..4,
            positive: 2..4,
        },
        BlockPair {
            row: 2,
            anchor: 1..3,
            positive: 2..4,
        },
    ];
    let mut tape = Tape::inference(m.params());
    let total = cl_loss(&m, &mut tape, &rows, &pairs, 0.1, no_dropout()).unwrap();
    let total = tape.scalar(total);

    let block = |tape: &mut Tape<'_, f64>, r: usize, span: std::ops::Range<usize>| {
        let units = m.tab_unit(tape, &rows[r][span]).unwrap();
        m.encode(tape, units, no_dropout()).unwrap().cls
    };
    let mut tape = Tape::inference(m.params());
    let anchors: Vec<Var> = pairs
        .iter()
        .map(|p| block(&mut tape, p.row, p.anchor.clone()))
        .collect();
    let mut manual = Vec::new();
    for i in [0usize, 2] {
        let pos = block(&mut tape, pairs[i].row, pairs[i].positive.clone());
        let negs: Vec<Var> = (0..3).filter(|&j| j != i).map(|j| anchors[j]).collect();
        assert_eq!(negs.len(), 2);
        let l = info_nce(&mut tape, anchors[i], pos, &negs, 0.1).unwrap();
        manual.push(tape.scalar(l));
    }
    let expected = (manual[0] + manual[1]) / 2.0;
    assert!((total - expected).abs() < 1e-12, "{total} vs {expected}");
}

#[test]
fn contrastive_loss_needs_a_valid_pair() {
    let t = small_table();
    let v = vocab_for(&[t.clone()]);
    let m = tiny::<f32>(&v, 9);
    let order: Vec<usize> = (0..4).collect();
    let rows: Vec<Vec<CellTokens>> = (0..2)
        .map(|r| v.tokenize_row(t.schema(), t.row(r), &order))
        .collect();
    let pairs = vec![
        BlockPair {
            row: 0,
            anchor: 0..2,
            positive: 0..2,
        },
        BlockPair {
            row: 1,
            anchor: 1..3,
            positive: 1..3,
        },
    ];
    let mut tape = Tape::inference(m.params());
    assert_eq!(
        cl_loss(&m, &mut tape, &rows, &pairs, 0.1, no_dropout()).err(),
        Some(PretrainError::NoValidPairs)
    );
    assert_eq!(
        cl_loss(&m, &mut tape, &rows[..1], &pairs[..1], 0.1, no_dropout()).err(),
        Some(PretrainError::TooFewRows(1))
    );
}

#[test]
fn mask_plan_targets_and_example_layout() {
    let t = small_table();
    let v = vocab_for(&[t.clone()]);
    let plan = MaskPlan::new(&t, 0, vec![1, 3], &v);
    assert_eq!(plan.targets[0], v.tokenize_text("paris").with_eos());
    assert_eq!(plan.targets[1], v.tokenize_text("good risk").with_eos());
    let order = [3, 0, 2, 1];
    let ex = McmExample::new(&t, &plan, &order, &v);
    assert_eq!(ex.cells.len(), 4);
    assert_eq!(ex.cells[0].value.ids(), &[MASK]);
    assert_eq!(ex.cells[3].value.ids(), &[MASK]);
    assert_eq!(ex.cells[1].value, v.tokenize_number(31.0).unwrap());
    assert_eq!(ex.cells[0].name, v.tokenize_name("note"));
    assert_eq!(
        ex.prompts,
        vec![v.fill_prompt("city"), v.fill_prompt("note")]
    );
}

#[test]
fn uniform_model_costs_log_vocab_per_token() {
    let t = small_table();
    let v = vocab_for(&[t.clone()]);
    let mut m = tiny::<f64>(&v, 10);
    for x in m.params_mut().by_name_mut("emb.word").unwrap().data_mut() {
        *x = 0.0;
    }
    let plan = MaskPlan::new(&t, 2, vec![2], &v);
    let ex = McmExample::new(&t, &plan, &[0, 1, 2, 3], &v);
    let mut tape = Tape::inference(m.params());
    let l = mcm_loss(&m, &mut tape, &[ex], no_dropout()).unwrap();
    assert!((tape.scalar(l) - (v.len() as f64).ln()).abs() < 1e-12);
}

#[test]
fn mcm_loss_averages_cells_then_rows() {
    let t = small_table();
    let v = vocab_for(&[t.clone()]);
    let m = tiny::<f64>(&v, 11);
    let order = [0, 1, 2, 3];
    let single = |row: usize, cols: Vec<usize>| {
        let plan = MaskPlan::new(&t, row, cols, &v);
        let ex = McmExample::new(&t, &plan, &order, &v);
        let mut tape = Tape::inference(m.params());
        let l = mcm_loss(&m, &mut tape, std::slice::from_ref(&ex), no_dropout()).unwrap();
        (tape.scalar(l), ex)
    };
    let (both, ex_both) = single(0, vec![0, 2]);
    // each cell scored against the same masked row
    let per_cell: Vec<f64> = (0..2)
        .map(|k| {
            let mut tape = Tape::inference(m.params());
            let enc = m.encode_cells(&mut tape, &ex_both.cells).unwrap();
            let s = m
                .decoder_init(&mut tape, &enc, &ex_both.prompts[k])
                .unwrap();
            let l = m.decode_train(&mut tape, s, &ex_both.targets[k]).unwrap();
            tape.scalar(l)
        })
        .collect();
    assert!((both - (per_cell[0] + per_cell[1]) / 2.0).abs() < 1e-12);

    let (other, ex_other) = single(2, vec![1]);
    let mut tape = Tape::inference(m.params());
    let batch = mcm_loss(&m, &mut tape, &[ex_both, ex_other], no_dropout()).unwrap();
    assert!((tape.scalar(batch) - (both + other) / 2.0).abs() < 1e-12);
}

#[test]
fn shuffling_columns_leaves_mcm_loss_unchanged() {
    let t = synth::comparison_table(20, &[0, 1, 6], 12);
    let v = vocab_for(&[t.clone()]);
    let m = tiny::<f32>(&v, 12);
    let mut r = R::seed_from_u64(12);
    let mut worst = 0f64;
    for row in 0..t.num_rows() {
        let masked = sample_mask(t.row(row), 0.3, &mut r).unwrap();
        let plan = MaskPlan::new(&t, row, masked, &v);
        let id: Vec<usize> = (0..t.num_cols()).collect();
        let mut perm = id.clone();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let loss = |order: &[usize]| {
            let ex = McmExample::new(&t, &plan, order, &v);
            let mut tape = Tape::inference(m.params());
            let l = mcm_loss(&m, &mut tape, &[ex], no_dropout()).unwrap();
            tape.scalar(l) as f64
        };
        worst = worst.max((loss(&id) - loss(&perm)).abs());
    }
    assert!(worst <= 1e-4, "max change {worst}");
}

#[test]
fn overfitting_one_row_reproduces_masked_value() {
    let t = small_table();
    let v = vocab_for(&[t.clone()]);
    let m = tiny::<f32>(&v, 13);
    let cfg = m.config().clone();
    let mut params = m.params().clone();
    let plan = MaskPlan::new(&t, 0, vec![1], &v);
    let ex = McmExample::new(&t, &plan, &[0, 1, 2, 3], &v);
    let mut adam = AdamState::new(&params);
    let mut grads = GradBuffer::zeros_like(&params);
    for _ in 0..200 {
        let m = UniTabE::from_params(cfg.clone(), params.clone()).unwrap();
        let mut tape = Tape::new(m.params());
        let l = mcm_loss(&m, &mut tape, std::slice::from_ref(&ex), no_dropout()).unwrap();
        let g = tape.backward(l).unwrap();
        grads.zero();
        grads.accumulate(&g, 1.0);
        adam.step(&mut params, &grads, 1e-3).unwrap();
    }
    let m = UniTabE::from_params(cfg, params).unwrap();
    let mut tape = Tape::inference(m.params());
    let enc = m.encode_cells(&mut tape, &ex.cells).unwrap();
    let s = m.decoder_init(&mut tape, &enc, &ex.prompts[0]).unwrap();
    let out = m
        .generate(&mut tape, s, &GenConstraint::Unconstrained, 8)
        .unwrap();
    assert_eq!(v.detokenize(out.ids()).unwrap(), "paris");
}

#[test]
fn alternation_schedule() {
    let plan = TrainPlan {
        mcm_per_cl: 2,
        ..Default::default()
    };
    let got: Vec<Objective> = (0..6).map(|k| plan.objective(k)).collect();
    use Objective::*;
    assert_eq!(got, [Mcm, Mcm, Cl, Mcm, Mcm, Cl]);
    let plan = TrainPlan {
        mcm_per_cl: 0,
        ..Default::default()
    };
    assert!((0..10).all(|k| plan.objective(k) == Mcm));
    assert_eq!(TrainPlan::default().objective(1), Cl);
}

#[test]
fn plan_defaults_and_validation() {
    let p = TrainPlan::default();
    assert_eq!(
        (
            p.mask_rate,
            p.overlap,
            p.lr,
            p.batch,
            p.accum,
            p.temperature
        ),
        (0.15, 0.5, 1e-5, 64, 10, 0.1)
    );
    assert!(p.validate().is_ok());
    for bad in [
        TrainPlan {
            mask_rate: 1.5,
            ..Default::default()
        },
        TrainPlan {
            overlap: 1.0,
            ..Default::default()
        },
        TrainPlan {
            overlap: 0.0,
            ..Default::default()
        },
        TrainPlan {
            accum: 0,
            ..Default::default()
        },
        TrainPlan {
            lr: 0.0,
            ..Default::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(PretrainError::InvalidPlan(_))));
    }
}

fn quick_plan(steps: u64, seed: u64) -> TrainPlan {
    TrainPlan {
        lr: 1e-3,
        batch: 4,
        accum: 2,
        max_steps: steps,
        seed,
        ..Default::default()
    }
}

struct Run {
    checkpoints: Vec<(u64, unitabe::numeric::ParamSet<f32>)>,
    logs: Vec<(u64, u64, Objective, f64)>,
}

fn run(corpus: &[Table], v: &Vocabulary, plan: &TrainPlan) -> Result<Run, PretrainError> {
    let mut state = TrainState::new(tiny::<f32>(v, plan.seed));
    let mut out = Run {
        checkpoints: Vec::new(),
        logs: Vec::new(),
    };
    pretrain_loop(&mut state, corpus, v, plan, |e| {
        match e {
            Event::Log(r) => out.logs.push((r.step, r.micro, r.objective, r.loss)),
            Event::Checkpoint(s) => out.checkpoints.push((s.step, s.model.params().clone())),
        }
        Ok(())
    })?;
    Ok(out)
}

#[test]
fn zero_steps_emit_only_initial_checkpoint() {
    let corpus = synth::pretrain_corpus(10, 1);
    let v = vocab_for(&corpus);
    let r = run(&corpus, &v, &quick_plan(0, 1)).unwrap();
    assert_eq!(r.checkpoints.len(), 1);
    assert_eq!(r.checkpoints[0].0, 0);
    assert!(r.logs.is_empty());
}

#[test]
fn same_seed_gives_identical_runs() {
    let corpus = synth::pretrain_corpus(10, 2);
    let v = vocab_for(&corpus);
    let plan = quick_plan(3, 2);
    let a = run(&corpus, &v, &plan).unwrap();
    let b = run(&corpus, &v, &plan).unwrap();
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.logs, b.logs);
    let c = run(&corpus, &v, &quick_plan(3, 3)).unwrap();
    assert_ne!(a.checkpoints.last(), c.checkpoints.last());
}

#[test]
fn loop_accumulates_and_checkpoints_on_schedule() {
    let corpus = synth::pretrain_corpus(10, 4);
    let v = vocab_for(&corpus);
    let plan = TrainPlan {
        checkpoint_every: 2,
        max_steps: 5,
        ..quick_plan(5, 4)
    };
    let r = run(&corpus, &v, &plan).unwrap();
    let steps: Vec<u64> = r.checkpoints.iter().map(|c| c.0).collect();
    assert_eq!(steps, [0, 2, 4, 5]);
    assert_eq!(r.logs.len(), 10);
    for (k, log) in r.logs.iter().enumerate() {
        assert_eq!(log.0, k as u64 / 2);
        assert_eq!(log.1, k as u64);
        assert_eq!(log.2, plan.objective(k as u64));
        assert!(log.3.is_finite() && log.3 >= 0.0);
    }
}

#[test]
fn one_column_corpus_falls_back_to_masking() {
    let t = Table::new(
        vec![Column::new("colour", DataType::Categorical)],
        (0..6)
            .map(|i| vec![Cell::value(["red", "blue"][i % 2])])
            .collect(),
    )
    .unwrap();
    let v = vocab_for(&[t.clone()]);
    let r = run(&[t], &v, &quick_plan(2, 5)).unwrap();
    assert!(r.logs.iter().all(|l| l.2 == Objective::Mcm));
}

#[test]
fn non_finite_loss_aborts() {
    let corpus = synth::pretrain_corpus(10, 6);
    let v = vocab_for(&corpus);
    let mut model = tiny::<f32>(&v, 6);
    for x in model
        .params_mut()
        .by_name_mut("dec.state.b")
        .unwrap()
        .data_mut()
    {
        *x = f32::NAN;
    }
    let mut state = TrainState::new(model);
    let err = pretrain_loop(&mut state, &corpus, &v, &quick_plan(2, 6), |_| Ok(())).unwrap_err();
    assert!(
        matches!(
            err,
            PretrainError::NonFinite {
                step: 0,
                micro: 0,
                objective: Objective::Mcm
            }
        ),
        "{err:?}"
    );
    assert_eq!(state.step, 0);
}

#[test]
fn empty_corpus_and_hook_errors_propagate() {
    let corpus = synth::pretrain_corpus(10, 7);
    let v = vocab_for(&corpus);
    let mut state = TrainState::new(tiny::<f32>(&v, 7));
    assert_eq!(
        pretrain_loop(&mut state, &[], &v, &quick_plan(1, 7), |_| Ok(())).err(),
        Some(PretrainError::EmptyCorpus)
    );
    let err = pretrain_loop(&mut state, &corpus, &v, &quick_plan(1, 7), |_| {
        Err(PretrainError::Hook("stop".into()))
    });
    assert_eq!(err.err(), Some(PretrainError::Hook("stop".into())));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let corpus = synth::pretrain_corpus(10, 8);
    let v = vocab_for(&corpus);
    let full = run(&corpus, &v, &quick_plan(4, 8)).unwrap();
    let mut state = TrainState::new(tiny::<f32>(&v, 8));
    pretrain_loop(&mut state, &corpus, &v, &quick_plan(2, 8), |_| Ok(())).unwrap();
    pretrain_loop(&mut state, &corpus, &v, &quick_plan(4, 8), |_| Ok(())).unwrap();
    assert_eq!(state.step, 4);
    assert_eq!(&full.checkpoints.last().unwrap().1, state.model.params());
}
