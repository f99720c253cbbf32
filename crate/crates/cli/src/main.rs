//! `unitabe` command-line tool: pretraining, finetuning, prediction,
//! imputation, row embeddings, metric evaluation and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Log records go
//! to stderr as `key=value` pairs, one record per line.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use unitabe::model::{ModelConfig, Preset, UniTabE};
use unitabe::persist::{Checkpoint, RunConfig};
use unitabe::pretrain::{pretrain_loop, Event, Objective, TrainState};
use unitabe::table::{Cell, Table};
use unitabe::tasks::{self, metrics, TaskKind, TaskSpec};
use unitabe::tokenizer::VocabBuilder;

#[derive(Parser)]
#[command(name = "unitabe", version, about = "Schema-free tabular pretraining and prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model on every CSV file of a directory.
    Pretrain(PretrainArgs),
    /// Finetune a checkpoint on one target column.
    Finetune(FinetuneArgs),
    /// Predict a target column; writes `row_id,prediction[,p_<label>...]`.
    Predict(PredictArgs),
    /// Fill every missing cell of a table.
    Impute(ImputeArgs),
    /// Write the `[CLS]` vector of each row as `row_id,e0,e1,...`.
    Embed(EmbedArgs),
    /// Score a predictions file against gold values.
    Eval(EvalArgs),
    /// Print a checkpoint's configuration and parameter counts.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Directory of CSV files (or a single CSV file).
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    accum: Option<usize>,
    /// Emit one loss record every N micro-batches.
    #[arg(long, default_value_t = 10)]
    log_every: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classify,
    Regress,
    Generate,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classify => TaskKind::Classify,
            TaskArg::Regress => TaskKind::Regress,
            TaskArg::Generate => TaskKind::Generate,
        }
    }
}

#[derive(Args)]
struct TaskArgs {
    /// Target column.
    #[arg(long)]
    target: String,
    #[arg(long, value_enum, default_value = "classify")]
    task: TaskArg,
    /// Comma-separated label set; defaults to the target's observed values.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    /// Task prompt replacing the fill-in prompt.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    out: PathBuf,
    /// Accepted for uniformity; prediction is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ImputeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Auc,
    R2,
    Mae,
    Bleu,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions CSV as written by `predict`.
    #[arg(long)]
    pred: PathBuf,
    /// CSV holding the gold values, one row per prediction.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, value_enum)]
    metric: MetricArg,
    /// Gold column; defaults to the last column.
    #[arg(long)]
    target: Option<String>,
    /// Positive label for AUC; defaults to the first `p_` column.
    #[arg(long)]
    positive: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InspectSource {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Print the analytic count of a preset without building it.
    #[arg(long, requires = "vocab_size")]
    preset: Option<Preset>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    source: InspectSource,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

type Result<T> = std::result::Result<T, String>;

fn fail<E: Display>(context: &str) -> impl Fn(E) -> String + '_ {
    move |e| format!("{context}: {e}")
}

/// One `key=value` record on stderr; values with spaces are quoted.
fn log(pairs: &[(&str, &dyn Display)]) {
    let line: Vec<String> = pairs
        .iter()
        .map(|(k, v)| {
            let v = v.to_string();
            if v.is_empty() || v.contains(char::is_whitespace) || v.contains('"') {
                format!("{k}={v:?}")
            } else {
                format!("{k}={v}")
            }
        })
        .collect();
    eprintln!("{}", line.join(" "));
}

fn load_table(path: &Path) -> Result<Table> {
    Table::load_csv(path, true).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(format!("{}: no CSV files", dir.display()));
    }
    Ok(files)
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.preset {
        cfg.preset = p;
    }
    if let Some(n) = a.max_steps {
        cfg.max_steps = n;
    }
    if let Some(x) = a.lr {
        cfg.lr = x;
    }
    if let Some(n) = a.batch {
        cfg.batch = n;
    }
    if let Some(n) = a.accum {
        cfg.accum = n;
    }
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    cfg.validate().map_err(fail("config"))?;
    let data = cfg.data.clone().ok_or("pretrain needs --data or a config `data` path")?;
    let out = cfg.out.clone().ok_or("pretrain needs --out or a config `out` path")?;
    log(&[("event", &"config"), ("config", &cfg.to_json())]);

    let corpus = csv_files(&data)?.iter().map(|p| load_table(p)).collect::<Result<Vec<_>>>()?;
    let mut vb = VocabBuilder::with_fill_prompt();
    for t in &corpus {
        vb.add_table(t);
    }
    let vocab = vb.build(cfg.min_count);
    let mut mc = ModelConfig::new(cfg.preset, vocab.len());
    mc.dropout = cfg.dropout;
    mc.prompt_attn_source = cfg.prompt_attn_source;
    let model = UniTabE::<f32>::new(mc, cfg.seed).map_err(fail("model"))?;
    let rows: usize = corpus.iter().map(Table::num_rows).sum();
    log(&[
        ("event", &"corpus"),
        ("tables", &corpus.len()),
        ("rows", &rows),
        ("vocab", &vocab.len()),
        ("params", &model.num_params()),
    ]);

    let mut state = TrainState::new(model);
    let plan = cfg.train_plan();
    let every = a.log_every.max(1);
    pretrain_loop(&mut state, &corpus, &vocab, &plan, |e| {
        match e {
            Event::Log(r) if r.micro % every == 0 => {
                let obj = match r.objective {
                    Objective::Mcm => "mcm",
                    Objective::Cl => "cl",
                };
                log(&[
                    ("event", &"loss"),
                    ("step", &r.step),
                    ("micro", &r.micro),
                    ("objective", &obj),
                    ("loss", &format!("{:.6}", r.loss)),
                ]);
            }
            Event::Log(_) => {}
            Event::Checkpoint(s) => {
                let ck = Checkpoint::new(&s.model, vocab.clone(), Some(s.adam.clone()), s.step, cfg.seed);
                ck.save(&out).map_err(|e| unitabe::pretrain::PretrainError::Hook(e.to_string()))?;
                log(&[("event", &"checkpoint"), ("step", &s.step), ("path", &out.display())]);
            }
        }
        Ok(())
    })
    .map_err(fail("pretrain"))?;
    Ok(())
}

/// Label set from the flag, else the sorted distinct values of the target.
fn labels_for(task: &TaskArgs, t: &Table) -> Result<Vec<String>> {
    if let Some(l) = &task.labels {
        return Ok(l.clone());
    }
    let j = t
        .column_index(&task.target)
        .ok_or_else(|| format!("--labels not given and target {:?} absent from the data", task.target))?;
    let set: std::collections::BTreeSet<&str> = t.column_values(j).filter_map(Cell::as_str).collect();
    Ok(set.into_iter().map(String::from).collect())
}

fn task_spec(task: &TaskArgs, cfg: &RunConfig, t: &Table) -> Result<TaskSpec> {
    let kind = TaskKind::from(task.task);
    let mut spec = cfg.task_spec(kind, &task.target);
    if kind == TaskKind::Classify {
        spec.labels = labels_for(task, t)?;
    }
    spec.prompt = task.prompt.clone();
    if let Some(n) = task.max_len {
        spec.max_len = n;
    }
    Ok(spec)
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.finetune_steps = n;
    }
    if let Some(x) = a.lr {
        cfg.finetune_lr = x;
    }
    if let Some(n) = a.batch {
        cfg.finetune_batch = n;
    }
    if let Some(n) = a.eval_every {
        cfg.eval_every = n;
    }
    cfg.validate().map_err(fail("config"))?;
    log(&[("event", &"config"), ("config", &cfg.to_json())]);
    let ck = load_ckpt(&a.ckpt)?;
    let t = load_table(&a.data)?;
    let spec = task_spec(&a.task, &cfg, &t)?;
    log(&[("event", &"task"), ("target", &spec.target), ("labels", &spec.labels.join(","))]);
    let (out, report) = tasks::finetune(&ck, &t, &spec).map_err(fail("finetune"))?;
    for (step, loss) in &report.dev_losses {
        log(&[("event", &"dev"), ("step", step), ("loss", &format!("{loss:.6}"))]);
    }
    log(&[
        ("event", &"finetuned"),
        ("train_rows", &report.train_rows),
        ("dev_rows", &report.dev_rows),
        ("best_step", &report.best_step),
    ]);
    out.save(&a.out).map_err(fail("save"))?;
    Ok(())
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn predict(a: PredictArgs) -> Result<()> {
    let ck = load_ckpt(&a.ckpt)?;
    let t = load_table(&a.data)?;
    let spec = task_spec(&a.task, &RunConfig::default(), &t)?;
    let preds = tasks::predict(&ck, &t, &spec).map_err(fail("predict"))?;
    let mut w = writer(&a.out)?;
    let mut header = vec!["row_id".to_string(), "prediction".to_string()];
    match spec.kind {
        TaskKind::Classify => header.extend(spec.labels.iter().map(|l| format!("p_{l}"))),
        TaskKind::Regress => header.push("value".into()),
        TaskKind::Generate => {}
    }
    w.write_record(&header).map_err(fail("write"))?;
    let mut unparseable = 0;
    for p in &preds {
        let mut rec = vec![p.row_id.to_string(), p.text.clone()];
        if let Some(probs) = &p.probs {
            rec.extend(probs.iter().map(|x| x.to_string()));
        }
        if spec.kind == TaskKind::Regress {
            rec.push(p.value.map(|x| x.to_string()).unwrap_or_default());
            unparseable += p.unparseable as usize;
        }
        w.write_record(&rec).map_err(fail("write"))?;
    }
    w.flush().map_err(fail("write"))?;
    log(&[("event", &"predicted"), ("rows", &preds.len()), ("unparseable", &unparseable)]);
    Ok(())
}

fn impute(a: ImputeArgs) -> Result<()> {
    let ck = load_ckpt(&a.ckpt)?;
    let t = load_table(&a.data)?;
    let (filled, n) = tasks::impute(&ck, &t, a.max_len).map_err(fail("impute"))?;
    if n == 0 {
        log(&[("warning", &"no missing cells"), ("path", &a.data.display())]);
    }
    filled.write_csv(&a.out).map_err(fail("write"))?;
    log(&[("event", &"imputed"), ("cells", &n)]);
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let ck = load_ckpt(&a.ckpt)?;
    let t = load_table(&a.data)?;
    let e = tasks::embed(&ck, &t).map_err(fail("embed"))?;
    let mut w = writer(&a.out)?;
    let mut header = vec!["row_id".to_string()];
    header.extend((0..ck.config.d()).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(fail("write"))?;
    for (i, row) in e.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(fail("write"))?;
    }
    w.flush().map_err(fail("write"))?;
    log(&[("event", &"embedded"), ("rows", &e.len()), ("dim", &ck.config.d())]);
    Ok(())
}

/// Header and records of a CSV file as plain strings.
fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let header = r.headers().map_err(fail("csv"))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("{}: {e}", path.display()))?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| format!("{}: no column {name:?}", path.display()))
}

fn parse_all(xs: &[&str], what: &str) -> Result<Vec<f64>> {
    xs.iter()
        .enumerate()
        .map(|(i, s)| s.trim().parse::<f64>().map_err(|_| format!("{what} row {i}: {s:?} is not a number")))
        .collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let (ph, prows) = read_csv(&a.pred)?;
    let (gh, grows) = read_csv(&a.gold)?;
    if prows.len() != grows.len() {
        return Err(format!("{} predictions for {} gold rows", prows.len(), grows.len()));
    }
    let gj = match &a.target {
        Some(t) => column(&gh, t, &a.gold)?,
        None => gh.len().checked_sub(1).ok_or("gold file has no columns")?,
    };
    let rid = column(&ph, "row_id", &a.pred)?;
    // predictions are matched to gold rows through `row_id`
    let mut order = Vec::with_capacity(prows.len());
    for r in &prows {
        let i: usize = r[rid].parse().map_err(|_| format!("bad row_id {:?}", r[rid]))?;
        if i >= grows.len() {
            return Err(format!("row_id {i} out of range"));
        }
        order.push(i);
    }
    let gold: Vec<&str> = order.iter().map(|&i| grows[i][gj].as_str()).collect();
    let pcol = |name: &str| -> Result<Vec<&str>> {
        let j = column(&ph, name, &a.pred)?;
        Ok(prows.iter().map(|r| r[j].as_str()).collect())
    };
    let score = match a.metric {
        MetricArg::Auc => {
            let pos = match &a.positive {
                Some(p) => p.clone(),
                None => ph
                    .iter()
                    .find_map(|h| h.strip_prefix("p_"))
                    .ok_or("predictions have no p_<label> columns")?
                    .to_string(),
            };
            let scores = parse_all(&pcol(&format!("p_{pos}"))?, "score")?;
            let labels: Vec<bool> = gold.iter().map(|g| *g == pos).collect();
            metrics::auc(&scores, &labels)
        }
        MetricArg::R2 | MetricArg::Mae => {
            let name = if ph.iter().any(|h| h == "value") { "value" } else { "prediction" };
            let pred = parse_all(&pcol(name)?, "prediction")?;
            let g = parse_all(&gold, "gold")?;
            match a.metric {
                MetricArg::R2 => metrics::r2(&pred, &g),
                _ => metrics::mae(&pred, &g),
            }
        }
        MetricArg::Bleu => {
            let pred = pcol("prediction")?;
            let scores: std::result::Result<Vec<f64>, _> =
                pred.iter().zip(&gold).map(|(p, g)| metrics::bleu(p, &[g])).collect();
            scores.map(|s| s.iter().sum::<f64>() / s.len().max(1) as f64)
        }
    }
    .map_err(fail("metric"))?;
    println!("{score:.4}");
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    if let Some(preset) = a.source.preset {
        let cfg = ModelConfig::new(preset, a.vocab_size.unwrap_or_default());
        println!("config={}", serde_json::to_string(&cfg).map_err(fail("json"))?);
        println!("params={}", cfg.num_params());
        return Ok(());
    }
    let path = a.source.ckpt.expect("clap group requires one source");
    let ck = load_ckpt(&path)?;
    println!("config={}", serde_json::to_string(&ck.config).map_err(fail("json"))?);
    println!("format_version={}", unitabe::persist::FORMAT_VERSION);
    println!("step={} seed={} vocab={} adam={}", ck.step, ck.seed, ck.vocab.len(), ck.adam.is_some());
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (name, t) in ck.params.iter() {
        let g = name.split('.').next().unwrap_or(name).to_string();
        match groups.iter_mut().find(|(k, _)| *k == g) {
            Some((_, n)) => *n += t.numel(),
            None => groups.push((g, t.numel())),
        }
    }
    for (g, n) in &groups {
        println!("params.{g}={n}");
    }
    println!("params={}", ck.params.num_scalars());
    println!("params_analytic={}", ck.config.num_params());
    Ok(())
}

/// Usage line of the named subcommand, or of the whole tool.
fn usage_for(sub: Option<String>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match sub.and_then(|s| cmd.find_subcommand_mut(&s).cloned()) {
        Some(mut c) => c.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", usage_for(std::env::args().nth(1)));
            }
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Predict(a) => predict(a),
        Command::Impute(a) => impute(a),
        Command::Embed(a) => embed(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log(&[("error", &e)]);
            ExitCode::from(2)
        }
    }
}
