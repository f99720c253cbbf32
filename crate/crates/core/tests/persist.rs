use unitabe::model::{ModelConfig, Preset, PromptAttnSource, UniTabE};
use unitabe::numeric::Tape;
use unitabe::persist::{Checkpoint, ConfigError, PersistError, RunConfig, FORMAT_VERSION};
use unitabe::pretrain::{pretrain_loop, TrainPlan, TrainState};
use unitabe::synth;
use unitabe::tasks::TaskKind;
use unitabe::tokenizer::{VocabBuilder, Vocabulary};

fn setup() -> (Vec<unitabe::table::Table>, Vocabulary) {
    let corpus = synth::pretrain_corpus(8, 1);
    let mut b = VocabBuilder::with_fill_prompt();
    for t in &corpus {
        b.add_table(t);
    }
    (corpus, b.build(1))
}

fn trained_checkpoint() -> Checkpoint {
    let (corpus, v) = setup();
    let mut cfg = ModelConfig::new(Preset::Tiny, v.len());
    cfg.dropout = 0.1;
    let mut state = TrainState::new(UniTabE::<f32>::new(cfg, 3).unwrap());
    let plan = TrainPlan { lr: 1e-3, batch: 4, accum: 1, max_steps: 2, seed: 3, ..Default::default() };
    pretrain_loop(&mut state, &corpus, &v, &plan, |_| Ok(())).unwrap();
    Checkpoint::new(&state.model, v, Some(state.adam.clone()), state.step, 3)
}

fn header_len(bytes: &[u8]) -> usize {
    u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize
}

#[test]
fn save_load_save_is_byte_identical() {
    let ck = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let again = dir.path().join("b.ckpt");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let bare = Checkpoint { adam: None, ..ck };
    let bytes = bare.to_bytes();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
}

#[test]
fn loaded_model_reproduces_encoder_outputs() {
    let ck = trained_checkpoint();
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let t = synth::heldout_table(5, 2);
    let cols: Vec<usize> = (0..t.num_cols()).collect();
    let (a, b) = (ck.model().unwrap(), back.model().unwrap());
    for r in 0..t.num_rows() {
        let cells = ck.vocab.tokenize_row(t.schema(), t.row(r), &cols);
        let mut ta = Tape::inference(a.params());
        let mut tb = Tape::inference(b.params());
        let ea = a.encode_cells(&mut ta, &cells).unwrap();
        let eb = b.encode_cells(&mut tb, &cells).unwrap();
        let bits = |tape: &Tape<'_, f32>, v| tape.value(v).iter().map(|x: &f32| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ta, ea.hidden), bits(&tb, eb.hidden));
        let prompt = ck.vocab.fill_prompt("y");
        let sa = a.decoder_init(&mut ta, &ea, &prompt).unwrap();
        let sb = b.decoder_init(&mut tb, &eb, &prompt).unwrap();
        assert_eq!(bits(&ta, sa), bits(&tb, sb));
    }
}

#[test]
fn header_is_self_describing_json() {
    let ck = trained_checkpoint();
    let bytes = ck.to_bytes();
    let h = header_len(&bytes);
    let json: serde_json::Value = serde_json::from_slice(&bytes[8..8 + h]).unwrap();
    assert_eq!(json["format_version"], FORMAT_VERSION);
    let tensors = json["tensors"].as_array().unwrap();
    // parameters plus two optimizer moments each
    assert_eq!(tensors.len(), 3 * ck.params.len());
    assert_eq!(tensors[0]["name"], "emb.word");
    let floats: usize =
        tensors.iter().map(|t| t["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap() as usize).product::<usize>()).sum();
    assert_eq!(bytes.len(), 8 + h + 4 * floats);
}

#[test]
fn truncation_is_a_corrupt_manifest() {
    let bytes = trained_checkpoint().to_bytes();
    let h = header_len(&bytes);
    for cut in [0, 4, 8, 8 + h / 2, 8 + h + 1, bytes.len() - 1] {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(PersistError::CorruptManifest(_)) => {}
            other => panic!("cut {cut}: {other:?}"),
        }
    }
}

#[test]
fn trailing_bytes_are_a_size_mismatch() {
    let mut bytes = trained_checkpoint().to_bytes();
    bytes.extend_from_slice(&[0, 0, 0, 0]);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(PersistError::SizeMismatch(_))));
}

fn rewrite_header(bytes: &[u8], f: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let h = header_len(bytes);
    let mut json: serde_json::Value = serde_json::from_slice(&bytes[8..8 + h]).unwrap();
    f(&mut json);
    let text = serde_json::to_vec(&json).unwrap();
    let mut out = (text.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + h..]);
    out
}

#[test]
fn other_format_versions_are_rejected() {
    let bytes = trained_checkpoint().to_bytes();
    let bumped = rewrite_header(&bytes, |j| j["format_version"] = serde_json::json!(FORMAT_VERSION + 1));
    match Checkpoint::from_bytes(&bumped) {
        Err(PersistError::VersionMismatch { found, expected }) => {
            assert_eq!((found, expected), (FORMAT_VERSION + 1, FORMAT_VERSION));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn shapes_disagreeing_with_config_are_a_size_mismatch() {
    let bytes = Checkpoint { adam: None, ..trained_checkpoint() }.to_bytes();
    let wider = rewrite_header(&bytes, |j| {
        let v = j["config"]["vocab_size"].as_u64().unwrap();
        j["config"]["vocab_size"] = serde_json::json!(v + 1);
    });
    assert!(matches!(Checkpoint::from_bytes(&wider), Err(PersistError::SizeMismatch(_))));
    let unknown = rewrite_header(&bytes, |j| j["extra"] = serde_json::json!(1));
    assert!(matches!(Checkpoint::from_bytes(&unknown), Err(PersistError::CorruptManifest(_))));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Checkpoint::load(dir.path().join("none")), Err(PersistError::Io(_))));
}

#[test]
fn config_defaults_follow_reference_values() {
    let c = RunConfig::from_json("{}").unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!((c.mask_rate, c.overlap, c.lr, c.batch, c.accum), (0.15, 0.5, 1e-5, 64, 10));
    assert_eq!((c.finetune_lr, c.finetune_batch), (1e-6, 8));
    assert_eq!(c.temperature, 0.1);
    assert_eq!(c.prompt_attn_source, PromptAttnSource::Tabunit);
    assert_eq!(c.preset, Preset::Tiny);
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(matches!(RunConfig::from_json(r#"{"mask_rat": 0.2}"#), Err(ConfigError::Parse(_))));
    assert!(matches!(RunConfig::from_json(r#"{"mask_rate": 2.0}"#), Err(ConfigError::Invalid(_))));
    assert!(matches!(RunConfig::from_json(r#"{"dropout": 1.0}"#), Err(ConfigError::Invalid(_))));
    assert!(matches!(RunConfig::from_json(r#"{"preset": "huge"}"#), Err(ConfigError::Parse(_))));
}

#[test]
fn config_overrides_flow_into_plans() {
    let c = RunConfig::from_json(
        r#"{"preset": "base", "seed": 9, "lr": 0.001, "batch": 32, "accum": 1,
            "prompt_attn_source": "encoder", "finetune_steps": 50, "max_len": 8}"#,
    )
    .unwrap();
    assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    let plan = c.train_plan();
    assert_eq!((plan.lr, plan.batch, plan.accum, plan.seed, plan.mask_rate), (1e-3, 32, 1, 9, 0.15));
    let spec = c.task_spec(TaskKind::Regress, "income");
    assert_eq!((spec.steps, spec.max_len, spec.seed, spec.lr), (50, 8, 9, 1e-6));
    assert_eq!(spec.target, "income");
}
