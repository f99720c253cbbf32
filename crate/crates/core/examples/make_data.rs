//! Writes the bundled synthetic dataset under the given directory
//! (default `data`):
//!
//! - `pretrain/table_<i>.csv`: the pretraining corpus family
//! - `task/train.csv`, `task/test.csv`: the held-out comparison task
//! - `task/missing.csv`: test rows with some cells blanked, for imputation
//! - `pretrain.json`, `finetune.json`: run configurations for the pipeline

use std::path::PathBuf;

use rand::Rng;
use unitabe::numeric::rng;
use unitabe::synth;
use unitabe::table::Cell;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    std::fs::create_dir_all(root.join("pretrain"))?;
    std::fs::create_dir_all(root.join("task"))?;
    for (i, t) in synth::pretrain_corpus(400, 1).iter().enumerate() {
        t.write_csv(root.join("pretrain").join(format!("table_{i}.csv")))?;
    }
    synth::heldout_table(200, 2).write_csv(root.join("task/train.csv"))?;
    let test = synth::heldout_table(200, 3);
    test.write_csv(root.join("task/test.csv"))?;

    let mut holed = test.select_rows(&(0..40).collect::<Vec<_>>());
    let mut r = rng::stream(4, &[]);
    for row in 0..holed.num_rows() {
        let j = r.random_range(0..holed.num_cols());
        holed.set_cell(row, j, Cell::Missing);
    }
    holed.write_csv(root.join("task/missing.csv"))?;

    std::fs::write(
        root.join("pretrain.json"),
        r#"{
  "preset": "tiny",
  "seed": 1,
  "dropout": 0.0,
  "lr": 0.001,
  "batch": 32,
  "accum": 1,
  "max_steps": 1000,
  "checkpoint_every": 500
}
"#,
    )?;
    std::fs::write(
        root.join("finetune.json"),
        r#"{
  "seed": 1,
  "finetune_lr": 0.001,
  "finetune_batch": 16,
  "finetune_steps": 300,
  "eval_every": 50
}
"#,
    )?;
    Ok(())
}
