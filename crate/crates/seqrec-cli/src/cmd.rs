//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write as _};
use std::path::PathBuf;

use clap::Args;
use num_bigint::BigInt;
use serde::{Deserialize, Serialize};

use seqrec_core::encoding::{EncodingConfig, Vocabulary};
use seqrec_core::evaluation::{
    approximate_constant, approximate_function, bessel_j0, evaluate as evaluate_items,
    extrapolate_terms, iterative_refinement, make_eval_set, noise_protocol, rank_hypotheses,
    shift_protocol, Bucket, EvalConfig, EvalReport,
};
use seqrec_core::expr::{Expr, Leaf, Mode, Op, Value};
use seqrec_core::generator::{
    write_records, GeneratorConfig, SampleRecord, TrainingBatchStream,
};
use seqrec_core::model::decode::write_similarity_csv;
use seqrec_core::model::{
    embedding_similarity, init_model, train_stream, ModelConfig, Task, TrainConfig, TrainState,
};
use seqrec_core::oeis::{
    parse_keywords, parse_stripped, run_bench, select_easy, set_manifest, OeisBenchConfig,
};
use seqrec_core::oracle::{
    count_expressions, fit_by_enumeration, tree_counts, EnumerationSpace, EnumerationError,
};

use crate::backend::load_checkpoint;
use crate::settings::{
    data, load_section, out_dir, runtime, usage, write_effective, Failure,
};
use crate::{BackendFlags, Cli, EncodingFlags, GenFlags, ModeArg, TaskArg};

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn parse_terms(text: &str, mode: Mode) -> Result<Vec<Value>, Failure> {
    let mut out = Vec::new();
    for tok in text.split_whitespace() {
        let v = match mode {
            Mode::Integer => tok
                .parse::<BigInt>()
                .map(Value::Int)
                .map_err(|_| usage(format!("`{tok}` is not an integer")))?,
            Mode::Float => tok
                .parse::<f64>()
                .map(Value::Float)
                .map_err(|_| usage(format!("`{tok}` is not a number")))?,
        };
        out.push(v);
    }
    if out.is_empty() {
        return Err(usage("no input terms"));
    }
    Ok(out)
}

fn write_json<T: Serialize>(dir: &std::path::Path, name: &str, value: &T) -> Result<(), Failure> {
    let path = dir.join(name);
    let file = File::create(&path)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)
        .map_err(|e| runtime(format!("cannot serialize {name}: {e}")))?;
    Ok(())
}

fn create(dir: &std::path::Path, name: &str) -> Result<BufWriter<File>, Failure> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// Human-readable rendering of an expression tree.
fn infix(e: &Expr) -> String {
    match e {
        Expr::Leaf(Leaf::Prior { dim, offset }) => {
            format!("{}[n-{offset}]", ['u', 'v', 'w'][*dim])
        }
        Expr::Leaf(leaf) => leaf.token(),
        Expr::Unary(op, a) => format!("{}({})", op.name(), infix(a)),
        Expr::Binary(op, a, b) => match op {
            Op::Add => format!("({} + {})", infix(a), infix(b)),
            Op::Sub => format!("({} - {})", infix(a), infix(b)),
            Op::Mul => format!("({} * {})", infix(a), infix(b)),
            Op::Div => format!("({} / {})", infix(a), infix(b)),
            _ => format!("{}({}, {})", op.name(), infix(a), infix(b)),
        },
    }
}

fn print_buckets<K: Display>(label: &str, map: &BTreeMap<K, Bucket>) {
    if map.is_empty() {
        return;
    }
    print!("{label}:");
    for (k, b) in map {
        print!(" {k}={:.3}({})", b.accuracy(), b.count);
    }
    println!();
}

fn print_report(report: &EvalReport) {
    if let Some(tag) = &report.tag {
        println!("protocol: {tag}");
    }
    println!(
        "accuracy {:.4} ({}/{} items), invalid rate {:.4}",
        report.accuracy, report.hits, report.total, report.invalid_rate
    );
    if !report.tau_sweep.is_empty() {
        print!("tau sweep:");
        for (tau, acc) in &report.tau_sweep {
            print!(" {tau:e}->{acc:.3}");
        }
        println!();
    }
    if !report.n_pred_sweep.is_empty() {
        print!("horizon sweep:");
        for (n, acc) in &report.n_pred_sweep {
            print!(" {n}->{acc:.3}");
        }
        println!();
    }
    print_buckets("by ops", &report.by_ops);
    print_buckets("by degree", &report.by_degree);
    print_buckets("by family", &report.by_family);
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    gen: GenFlags,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-sample corruption level upper bound (float mode)
    #[arg(long)]
    sigma_train: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct GenerateSettings {
    count: usize,
    seed: u64,
    sigma_train: f64,
    generator: GeneratorConfig,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        GenerateSettings {
            count: 1000,
            seed: 0,
            sigma_train: 0.0,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct Manifest {
    count: usize,
    sigma_train: f64,
    ops: BTreeMap<usize, usize>,
    degree: BTreeMap<usize, usize>,
    length: BTreeMap<usize, usize>,
}

pub fn generate(cli: &Cli, args: &GenerateArgs) -> Result<(), Failure> {
    let mut s: GenerateSettings = load_section(cli.config.as_deref(), "generate")?;
    args.gen.apply(&mut s.generator);
    if let Some(v) = args.count {
        s.count = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.sigma_train {
        s.sigma_train = v;
    }
    s.generator.validate().map_err(|e| usage(e))?;
    if s.sigma_train < 0.0 {
        return Err(usage("sigma-train must be non-negative"));
    }
    let workers = cli.workers.max(1);
    let dir = out_dir(cli.out.as_deref(), "generate")?;
    write_effective(&dir, "generate", &s)?;

    // shard the count across workers; each shard is an independent stream
    let shares: Vec<usize> = (0..workers)
        .map(|w| s.count / workers + usize::from(w < s.count % workers))
        .collect();
    let produce = |worker: usize, n: usize| -> Result<Vec<SampleRecord>, Failure> {
        let stream =
            TrainingBatchStream::new(s.generator.clone(), s.sigma_train, s.seed, worker as u64);
        let mut out = Vec::with_capacity(n);
        for item in stream.take(n) {
            let corrupted = item.map_err(|e| runtime(e))?;
            let rec = if s.sigma_train > 0.0 && s.generator.mode == Mode::Float {
                SampleRecord::from_corrupted(&corrupted)
            } else {
                SampleRecord::from_sample(&corrupted.sample)
            };
            out.push(rec);
        }
        Ok(out)
    };
    let mut records = Vec::with_capacity(s.count);
    if workers == 1 {
        records = produce(0, s.count)?;
    } else {
        let shards: Vec<Result<Vec<SampleRecord>, Failure>> = std::thread::scope(|scope| {
            let handles: Vec<_> = shares
                .iter()
                .enumerate()
                .map(|(w, &n)| scope.spawn(move || produce(w, n)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for shard in shards {
            records.extend(shard?);
        }
    }

    let mut out = create(&dir, "dataset.jsonl")?;
    write_records(&mut out, records.iter()).map_err(|e| runtime(e))?;
    out.flush().map_err(|e| runtime(e))?;

    let mut manifest = Manifest {
        count: records.len(),
        sigma_train: s.sigma_train,
        ops: BTreeMap::new(),
        degree: BTreeMap::new(),
        length: BTreeMap::new(),
    };
    for rec in &records {
        *manifest.ops.entry(rec.o).or_default() += 1;
        *manifest.degree.entry(rec.d_eff).or_default() += 1;
        *manifest.length.entry(rec.l).or_default() += 1;
    }
    write_json(&dir, "manifest.json", &manifest)?;
    println!("wrote {} samples to {}", records.len(), dir.display());
    print_buckets_usize("ops", &manifest.ops);
    print_buckets_usize("degree", &manifest.degree);
    print_buckets_usize("length", &manifest.length);
    Ok(())
}

fn print_buckets_usize(label: &str, map: &BTreeMap<usize, usize>) {
    print!("{label}:");
    for (k, n) in map {
        print!(" {k}:{n}");
    }
    println!();
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    gen: GenFlags,
    #[command(flatten)]
    enc: EncodingFlags,
    #[arg(long)]
    task: Option<TaskArg>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma_train: Option<f64>,
    #[arg(long)]
    n_pred: Option<usize>,
    #[arg(long)]
    lr_peak: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long)]
    model_seed: Option<u64>,
    /// Resume from an existing checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct TrainSettings {
    task: Task,
    model_seed: u64,
    layers: usize,
    heads: usize,
    dim: usize,
    ff_dim: usize,
    max_positions: usize,
    generator: GeneratorConfig,
    encoding: EncodingConfig,
    train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let desk = ModelConfig::desk_scale(0, Task::Symbolic);
        TrainSettings {
            task: Task::Symbolic,
            model_seed: 1,
            layers: desk.layers,
            heads: desk.heads,
            dim: desk.dim,
            ff_dim: desk.ff_dim,
            max_positions: desk.max_positions,
            generator: GeneratorConfig::default(),
            encoding: EncodingConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

pub fn train(cli: &Cli, args: &TrainArgs) -> Result<(), Failure> {
    let mut s: TrainSettings = load_section(cli.config.as_deref(), "train")?;
    args.gen.apply(&mut s.generator);
    args.enc.apply(&mut s.encoding);
    if let Some(t) = args.task {
        s.task = t.into();
    }
    if let Some(v) = args.steps {
        s.train.steps = v;
    }
    if let Some(v) = args.batch_size {
        s.train.batch_size = v;
    }
    if let Some(v) = args.seed {
        s.train.seed = v;
    }
    if let Some(v) = args.sigma_train {
        s.train.sigma_train = v;
    }
    if let Some(v) = args.n_pred {
        s.train.n_pred = v;
    }
    if let Some(v) = args.lr_peak {
        s.train.lr_peak = v;
    }
    if let Some(v) = args.warmup_steps {
        s.train.warmup_steps = v;
    }
    if let Some(v) = args.log_every {
        s.train.log_every = v;
    }
    if let Some(v) = args.layers {
        s.layers = v;
    }
    if let Some(v) = args.heads {
        s.heads = v;
    }
    if let Some(v) = args.dim {
        s.dim = v;
    }
    if let Some(v) = args.ff_dim {
        s.ff_dim = v;
    }
    if let Some(v) = args.max_positions {
        s.max_positions = v;
    }
    if let Some(v) = args.model_seed {
        s.model_seed = v;
    }
    s.generator.validate().map_err(|e| usage(e))?;

    let vocab = Vocabulary::build(s.encoding);
    let model_cfg = ModelConfig {
        layers: s.layers,
        heads: s.heads,
        dim: s.dim,
        ff_dim: s.ff_dim,
        max_positions: s.max_positions,
        vocab_size: vocab.len(),
        task: s.task,
    };
    let dir = out_dir(cli.out.as_deref(), "train")?;
    write_effective(&dir, "train", &s)?;

    let resuming = args.resume.is_some();
    let mut state = match &args.resume {
        Some(path) => load_checkpoint(path, &vocab)?,
        None => {
            let model = init_model::<f32>(model_cfg, s.model_seed).map_err(|e| usage(e))?;
            TrainState::new(model, vocab.hash())
        }
    };
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(resuming)
        .truncate(!resuming)
        .write(true)
        .open(&metrics_path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("cannot open {}: {e}", metrics_path.display())))?;

    train_stream(&mut state, &s.generator, &s.train, &vocab, &mut metrics, None)
        .map_err(|e| runtime(e))?;
    metrics.flush().map_err(|e| runtime(e))?;

    let ckpt_path = dir.join("checkpoint.bin");
    let mut ckpt = create(&dir, "checkpoint.bin")?;
    state.save(&mut ckpt).map_err(|e| runtime(e))?;
    ckpt.flush().map_err(|e| runtime(e))?;
    println!(
        "trained to step {} ({} samples, {} skipped); checkpoint at {}",
        state.step,
        state.samples_consumed,
        state.skipped_samples,
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct PredictArgs {
    /// Input terms, whitespace separated
    #[arg(long)]
    terms: String,
    #[arg(long)]
    mode: Option<ModeArg>,
    #[command(flatten)]
    backend: BackendFlags,
    #[command(flatten)]
    enc: EncodingFlags,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    n_pred: Option<usize>,
    #[arg(long)]
    max_decode_len: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct PredictSettings {
    mode: Mode,
    beam: usize,
    n_pred: usize,
    max_decode_len: usize,
    encoding: EncodingConfig,
}

impl Default for PredictSettings {
    fn default() -> Self {
        PredictSettings {
            mode: Mode::Integer,
            beam: 10,
            n_pred: 10,
            max_decode_len: 64,
            encoding: EncodingConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct PredictOutput {
    input: Vec<String>,
    candidates: Vec<seqrec_core::evaluation::RankedCandidate>,
    chosen: String,
    next_terms: Vec<String>,
}

pub fn predict(cli: &Cli, args: &PredictArgs) -> Result<(), Failure> {
    let mut s: PredictSettings = load_section(cli.config.as_deref(), "predict")?;
    args.enc.apply(&mut s.encoding);
    if let Some(m) = args.mode {
        s.mode = m.into();
    }
    if let Some(v) = args.beam {
        s.beam = v;
    }
    if let Some(v) = args.n_pred {
        s.n_pred = v;
    }
    if let Some(v) = args.max_decode_len {
        s.max_decode_len = v;
    }
    let terms = parse_terms(&args.terms, s.mode)?;
    let vocab = Vocabulary::build(s.encoding);
    let backend = args.backend.build(&vocab, s.mode)?;
    let predictor = backend.predictor(&vocab, s.mode, s.beam, s.max_decode_len);

    let src = vocab
        .encode_terms(&terms)
        .map_err(|e| data(format!("cannot encode input: {e}")))?;
    let hyps = predictor.predict(&src.ids);
    let observed = vec![terms.clone()];
    let (ranked, invalid) = rank_hypotheses(&hyps, &observed, s.mode, &vocab);
    if ranked.is_empty() {
        return Err(data(format!(
            "no valid candidate ({} of {} hypotheses undecodable)",
            invalid,
            hyps.len()
        )));
    }
    for (i, cand) in ranked.iter().enumerate() {
        let rendered = cand
            .relation
            .as_ref()
            .map(|r| infix(&r.exprs()[0]))
            .unwrap_or_default();
        println!(
            "#{:<2} err {:<10.3e} logp {:>8.3} {}   u[n] = {}",
            i + 1,
            cand.reconstruction_error,
            cand.norm_log_likelihood,
            cand.relation_text,
            rendered
        );
    }
    let best = ranked[0]
        .relation
        .as_ref()
        .expect("ranked candidates carry their relation");
    let next = extrapolate_terms(best, s.mode, &observed, s.n_pred)
        .ok_or_else(|| data("best candidate does not extrapolate"))?;
    let next_terms: Vec<String> = next[0].iter().map(|v| v.to_string()).collect();
    println!("next: {}", next_terms.join(" "));

    let dir = out_dir(cli.out.as_deref(), "predict")?;
    write_effective(&dir, "predict", &s)?;
    write_json(
        &dir,
        "predictions.json",
        &PredictOutput {
            input: terms.iter().map(|v| v.to_string()).collect(),
            chosen: ranked[0].relation_text.clone(),
            candidates: ranked,
            next_terms,
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    gen: GenFlags,
    #[command(flatten)]
    enc: EncodingFlags,
    #[command(flatten)]
    backend: BackendFlags,
    #[arg(long)]
    task: Option<TaskArg>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_pred: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_decode_len: Option<usize>,
    /// Corrupt inputs with this sigma (noise-robustness protocol)
    #[arg(long)]
    sigma_test: Option<f64>,
    /// Initial-term range override "LO,HI" (distribution-shift protocol)
    #[arg(long)]
    shift: Option<String>,
    #[arg(long)]
    noise_seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct EvaluateSettings {
    task: Task,
    n_items: usize,
    seed: u64,
    noise_seed: u64,
    sigma_test: Option<f64>,
    shift: Option<(f64, f64)>,
    generator: GeneratorConfig,
    encoding: EncodingConfig,
    eval: EvalConfig,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        EvaluateSettings {
            task: Task::Symbolic,
            n_items: 200,
            seed: 0,
            noise_seed: 1,
            sigma_test: None,
            shift: None,
            generator: GeneratorConfig::default(),
            encoding: EncodingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub fn evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<(), Failure> {
    let mut s: EvaluateSettings = load_section(cli.config.as_deref(), "evaluate")?;
    args.gen.apply(&mut s.generator);
    args.enc.apply(&mut s.encoding);
    if let Some(t) = args.task {
        s.task = t.into();
    }
    if let Some(v) = args.n_items {
        s.n_items = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.tau {
        s.eval.tau = v;
    }
    if let Some(v) = args.n_pred {
        s.eval.n_pred = v;
    }
    if let Some(v) = args.beam {
        s.eval.beam_size = v;
    }
    if let Some(v) = args.max_decode_len {
        s.eval.max_decode_len = v;
    }
    if let Some(v) = args.sigma_test {
        s.sigma_test = Some(v);
    }
    if let Some(text) = &args.shift {
        let (lo, hi) = text
            .split_once(',')
            .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
            .ok_or_else(|| usage("--shift expects LO,HI"))?;
        s.shift = Some((lo, hi));
    }
    if let Some(v) = args.noise_seed {
        s.noise_seed = v;
    }
    s.generator.validate().map_err(|e| usage(e))?;
    // horizons beyond the scored n_pred have no truth terms to check
    s.eval.n_pred_sweep.retain(|&n| n <= s.eval.n_pred);
    if args.backend.oracle && s.task == Task::Numeric {
        return Err(usage("the oracle backend only supports the symbolic task"));
    }
    if s.sigma_test.is_some_and(|v| v > 0.0) && s.generator.mode != Mode::Float {
        return Err(usage("input corruption requires float mode"));
    }

    let vocab = Vocabulary::build(s.encoding);
    let backend = args.backend.build(&vocab, s.generator.mode)?;
    let predictor = backend.predictor(
        &vocab,
        s.generator.mode,
        s.eval.beam_size,
        s.eval.max_decode_len,
    );
    let dir = out_dir(cli.out.as_deref(), "evaluate")?;
    write_effective(&dir, "evaluate", &s)?;
    let mut log = create(&dir, "items.jsonl")?;

    let report = if let Some(range) = s.shift {
        shift_protocol(
            predictor.as_ref(),
            &s.generator,
            range,
            s.n_items,
            s.seed,
            &s.eval,
            &vocab,
            s.task,
            Some(&mut log),
        )
        .map_err(|e| runtime(e))?
    } else {
        let items = make_eval_set(&s.generator, s.n_items, s.eval.n_pred, s.seed);
        if items.is_empty() {
            return Err(data("no evaluation items; loosen the generator bounds"));
        }
        match s.sigma_test {
            Some(sigma) => noise_protocol(
                predictor.as_ref(),
                &items,
                sigma,
                s.noise_seed,
                &s.eval,
                &vocab,
                s.task,
                Some(&mut log),
            )
            .map_err(|e| runtime(e))?,
            None => evaluate_items(
                predictor.as_ref(),
                &items,
                &s.eval,
                &vocab,
                s.task,
                Some(&mut log),
            )
            .map_err(|e| runtime(e))?,
        }
    };
    log.flush().map_err(|e| runtime(e))?;
    write_json(&dir, "report.json", &report)?;
    print_report(&report);
    Ok(())
}

// ---------------------------------------------------------------------------
// oeis
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct OeisArgs {
    /// OEIS `stripped` file (possibly truncated)
    #[arg(long)]
    stripped: PathBuf,
    /// Keyword metadata file: one `A000045 easy,nonn` line per sequence
    #[arg(long)]
    keywords: PathBuf,
    #[command(flatten)]
    enc: EncodingFlags,
    #[command(flatten)]
    backend: BackendFlags,
    /// Benchmark subset size
    #[arg(long)]
    size: Option<usize>,
    /// Input prefix lengths, comma separated
    #[arg(long, value_delimiter = ',')]
    n_input: Option<Vec<usize>>,
    /// Prediction horizons, comma separated
    #[arg(long, value_delimiter = ',')]
    n_pred: Option<Vec<usize>>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_decode_len: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct OeisSettings {
    beam: usize,
    max_decode_len: usize,
    encoding: EncodingConfig,
    bench: OeisBenchConfig,
}

impl Default for OeisSettings {
    fn default() -> Self {
        OeisSettings {
            beam: 10,
            max_decode_len: 64,
            encoding: EncodingConfig::default(),
            bench: OeisBenchConfig::default(),
        }
    }
}

pub fn oeis(cli: &Cli, args: &OeisArgs) -> Result<(), Failure> {
    let mut s: OeisSettings = load_section(cli.config.as_deref(), "oeis")?;
    args.enc.apply(&mut s.encoding);
    if let Some(v) = args.size {
        s.bench.size = v;
    }
    if let Some(v) = &args.n_input {
        s.bench.n_input = v.clone();
    }
    if let Some(v) = &args.n_pred {
        s.bench.n_pred = v.clone();
    }
    if let Some(v) = args.tau {
        s.bench.tau = v;
    }
    if let Some(v) = args.beam {
        s.beam = v;
    }
    if let Some(v) = args.max_decode_len {
        s.max_decode_len = v;
    }

    let stripped = File::open(&args.stripped)
        .map_err(|e| data(format!("cannot open {}: {e}", args.stripped.display())))?;
    let (records, diagnostics) =
        parse_stripped(BufReader::new(stripped)).map_err(|e| data(e))?;
    let keyword_file = File::open(&args.keywords)
        .map_err(|e| data(format!("cannot open {}: {e}", args.keywords.display())))?;
    let (keywords, kw_diagnostics) =
        parse_keywords(BufReader::new(keyword_file)).map_err(|e| data(e))?;
    for diag in diagnostics.iter().chain(&kw_diagnostics) {
        eprintln!("note: {diag}");
    }
    let (set, missing) = select_easy(&records, &keywords, s.bench.size, s.bench.min_terms());
    if set.is_empty() {
        return Err(data("no benchmark sequences selected"));
    }
    if !missing.is_empty() {
        eprintln!("note: {} records lacked keyword metadata", missing.len());
    }

    let vocab = Vocabulary::build(s.encoding);
    let backend = args.backend.build(&vocab, Mode::Integer)?;
    let predictor = backend.predictor(&vocab, Mode::Integer, s.beam, s.max_decode_len);
    let dir = out_dir(cli.out.as_deref(), "oeis")?;
    write_effective(&dir, "oeis", &s)?;
    std::fs::write(dir.join("set_manifest.txt"), set_manifest(&set))
        .map_err(|e| runtime(e))?;
    let mut log = create(&dir, "items.jsonl")?;
    let report = run_bench(
        predictor.as_ref(),
        &set,
        &s.bench,
        &vocab,
        Task::Symbolic,
        Some(&mut log),
    )
    .map_err(|e| runtime(e))?;
    log.flush().map_err(|e| runtime(e))?;
    write_json(&dir, "report.json", &report)?;

    println!("{} sequences, tau {:e}", report.set_size, report.tau);
    println!("{:>10} {:>8} {:>10} {:>8}", "n_input", "n_pred", "accuracy", "total");
    for cell in &report.cells {
        println!(
            "{:>10} {:>8} {:>10.4} {:>8}",
            cell.n_input, cell.n_pred, cell.accuracy, cell.total
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// approx
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ApproxArgs {
    /// Approximate this constant from the sequence u_n = C n
    #[arg(long, conflicts_with = "function")]
    constant: Option<f64>,
    /// Approximate a named function: arcsinh | bessel-j0
    #[arg(long)]
    function: Option<String>,
    #[command(flatten)]
    enc: EncodingFlags,
    #[command(flatten)]
    backend: BackendFlags,
    #[arg(long)]
    n_input: Option<usize>,
    #[arg(long)]
    n_pred: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_decode_len: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct ApproxSettings {
    encoding: EncodingConfig,
    eval: EvalConfig,
}

impl Default for ApproxSettings {
    fn default() -> Self {
        ApproxSettings {
            encoding: EncodingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub fn approx(cli: &Cli, args: &ApproxArgs) -> Result<(), Failure> {
    let mut s: ApproxSettings = load_section(cli.config.as_deref(), "approx")?;
    args.enc.apply(&mut s.encoding);
    if let Some(v) = args.n_input {
        s.eval.n_input = v;
    }
    if let Some(v) = args.n_pred {
        s.eval.n_pred = v;
    }
    if let Some(v) = args.beam {
        s.eval.beam_size = v;
    }
    if let Some(v) = args.max_decode_len {
        s.eval.max_decode_len = v;
    }
    let vocab = Vocabulary::build(s.encoding);
    let backend = args.backend.build(&vocab, Mode::Float)?;
    let predictor = backend.predictor(&vocab, Mode::Float, s.eval.beam_size, s.eval.max_decode_len);
    let dir = out_dir(cli.out.as_deref(), "approx")?;
    write_effective(&dir, "approx", &s)?;

    match (&args.constant, &args.function) {
        (Some(c), None) => {
            let candidates = approximate_constant(predictor.as_ref(), *c, &s.eval, &vocab)
                .map_err(|e| runtime(e))?;
            if candidates.is_empty() {
                return Err(data("no candidate approximations"));
            }
            for cand in &candidates {
                match cand.value {
                    Some(v) => println!(
                        "{:<30} value {:<18} rel err {:.3e}",
                        cand.relation_text, v, cand.relative_error
                    ),
                    None => println!(
                        "{:<30} (nonlinear)        rel err {:.3e}",
                        cand.relation_text, cand.relative_error
                    ),
                }
            }
            write_json(&dir, "candidates.json", &candidates)?;
        }
        (None, Some(name)) => {
            let f: &dyn Fn(f64) -> f64 = match name.as_str() {
                "arcsinh" => &f64::asinh,
                "bessel-j0" => &bessel_j0,
                _ => return Err(usage(format!("unknown function `{name}`"))),
            };
            let candidates = approximate_function(predictor.as_ref(), f, &s.eval, &vocab)
                .map_err(|e| runtime(e))?;
            if candidates.is_empty() {
                return Err(data("no candidate approximations"));
            }
            for cand in &candidates {
                println!(
                    "{:<40} extrapolation err {:.3e}",
                    cand.relation_text, cand.extrapolation_error
                );
            }
            write_json(&dir, "candidates.json", &candidates)?;
        }
        _ => return Err(usage("pass exactly one of --constant or --function")),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// refine
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct RefineArgs {
    /// Values to fit, whitespace separated
    #[arg(long)]
    values: String,
    /// Indices the values were sampled at (default 1..=len)
    #[arg(long)]
    ns: Option<String>,
    /// Max refinement rounds
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[command(flatten)]
    enc: EncodingFlags,
    #[command(flatten)]
    backend: BackendFlags,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    max_decode_len: usize,
}

#[derive(Serialize)]
struct RefineOutput {
    expression: String,
    rendered: String,
    rounds: Vec<seqrec_core::evaluation::RefinementRound>,
}

pub fn refine(cli: &Cli, args: &RefineArgs) -> Result<(), Failure> {
    let mut encoding = EncodingConfig::default();
    args.enc.apply(&mut encoding);
    let values: Vec<f64> = args
        .values
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| usage(format!("`{t}` is not a number"))))
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(usage("no values"));
    }
    let ns: Vec<i64> = match &args.ns {
        Some(text) => text
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| usage(format!("`{t}` is not an index"))))
            .collect::<Result<_, _>>()?,
        None => (1..=values.len() as i64).collect(),
    };
    if ns.len() != values.len() {
        return Err(usage("--ns and --values must have equal length"));
    }
    if args.depth == 0 {
        return Err(usage("depth must be at least 1"));
    }

    let vocab = Vocabulary::build(encoding);
    let backend = args.backend.build(&vocab, Mode::Float)?;
    let predictor = backend.predictor(&vocab, Mode::Float, args.beam, args.max_decode_len);
    let result = iterative_refinement(predictor.as_ref(), &ns, &values, args.depth, &vocab)
        .map_err(|e| data(e))?;
    for (i, round) in result.rounds.iter().enumerate() {
        println!(
            "round {}: + {}   residual {:.3e} -> {:.3e}",
            i + 1,
            round.expression,
            round.residual_before,
            round.residual_after
        );
    }
    let prefix = result.expression.to_prefix().join(" ");
    println!("f(n) = {}", infix(&result.expression));
    let dir = out_dir(cli.out.as_deref(), "refine")?;
    write_effective(&dir, "refine", &serde_json::json!({ "depth": args.depth }))?;
    write_json(
        &dir,
        "refinement.json",
        &RefineOutput {
            expression: prefix,
            rendered: infix(&result.expression),
            rounds: result.rounds,
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// count
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct CountArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Integer)]
    mode: ModeArg,
    #[arg(long, default_value_t = 5)]
    max_ops: usize,
    #[arg(long, default_value_t = 6)]
    max_degree: usize,
}

pub fn count(cli: &Cli, args: &CountArgs) -> Result<(), Failure> {
    let mode: Mode = args.mode.into();
    let space = EnumerationSpace::with_defaults(mode, args.max_ops, args.max_degree);
    let trees = tree_counts(args.max_ops);
    let expressions = count_expressions(&space);
    for (o, n) in trees.iter().enumerate() {
        println!("trees with {o} operators: {n}");
    }
    println!("expressions in the {mode} space (ops <= {}): {expressions}", args.max_ops);
    let dir = out_dir(cli.out.as_deref(), "count")?;
    write_effective(
        &dir,
        "count",
        &serde_json::json!({
            "mode": mode,
            "max_ops": args.max_ops,
            "max_degree": args.max_degree,
        }),
    )?;
    write_json(
        &dir,
        "counts.json",
        &serde_json::json!({
            "tree_counts": trees.iter().map(|n| n.to_string()).collect::<Vec<_>>(),
            "expressions": expressions.to_string(),
        }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// enumerate-fit
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EnumerateFitArgs {
    /// Observed terms, whitespace separated
    #[arg(long)]
    terms: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Integer)]
    mode: ModeArg,
    #[arg(long, default_value_t = 2)]
    max_ops: usize,
    #[arg(long, default_value_t = 2)]
    max_degree: usize,
    #[arg(long, default_value_t = 1e-10)]
    tau: f64,
    /// Bypass the enumeration size guard
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 10)]
    n_pred: usize,
    /// Max candidates to print
    #[arg(long, default_value_t = 10)]
    limit: usize,
}

#[derive(Serialize)]
struct FitOutput {
    relation: String,
    ops: usize,
    max_error: f64,
}

pub fn enumerate_fit(cli: &Cli, args: &EnumerateFitArgs) -> Result<(), Failure> {
    let mode: Mode = args.mode.into();
    let terms = parse_terms(&args.terms, mode)?;
    let space = EnumerationSpace::with_defaults(mode, args.max_ops, args.max_degree);
    let candidates = fit_by_enumeration(&terms, &space, args.tau, args.force).map_err(|e| {
        match e {
            EnumerationError::TooLarge { .. } => usage(format!("{e}")),
            EnumerationError::Empty => usage(format!("{e}")),
        }
    })?;
    if candidates.is_empty() {
        return Err(data("no relation in the space fits within tolerance"));
    }
    for cand in candidates.iter().take(args.limit) {
        println!(
            "{:<30} ops {:<3} err {:.3e}   u[n] = {}",
            cand.relation.to_text(),
            cand.ops,
            cand.max_error,
            infix(&cand.relation.exprs()[0])
        );
    }
    let observed = vec![terms];
    if let Some(next) =
        extrapolate_terms(&candidates[0].relation, mode, &observed, args.n_pred)
    {
        let rendered: Vec<String> = next[0].iter().map(|v| v.to_string()).collect();
        println!("next: {}", rendered.join(" "));
    }
    let dir = out_dir(cli.out.as_deref(), "enumerate-fit")?;
    write_effective(
        &dir,
        "enumerate-fit",
        &serde_json::json!({
            "mode": mode,
            "max_ops": args.max_ops,
            "max_degree": args.max_degree,
            "tau": args.tau,
        }),
    )?;
    let out: Vec<FitOutput> = candidates
        .iter()
        .take(args.limit)
        .map(|c| FitOutput {
            relation: c.relation.to_text(),
            ops: c.ops,
            max_error: c.max_error,
        })
        .collect();
    write_json(&dir, "fits.json", &out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// embed-sim
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EmbedSimArgs {
    /// Trained checkpoint file
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    enc: EncodingFlags,
    /// Tokens to compare, whitespace separated (default: whole vocabulary)
    #[arg(long)]
    tokens: Option<String>,
}

pub fn embed_sim(cli: &Cli, args: &EmbedSimArgs) -> Result<(), Failure> {
    let mut encoding = EncodingConfig::default();
    args.enc.apply(&mut encoding);
    let vocab = Vocabulary::build(encoding);
    let state = load_checkpoint(&args.checkpoint, &vocab)?;
    let ids: Vec<u32> = match &args.tokens {
        Some(text) => {
            let mut ids = Vec::new();
            for label in text.split_whitespace() {
                let id = (0..vocab.len() as u32)
                    .find(|&id| vocab.token(id) == Some(label))
                    .ok_or_else(|| usage(format!("`{label}` is not in the vocabulary")))?;
                ids.push(id);
            }
            ids
        }
        None => (0..vocab.len() as u32).collect(),
    };
    let labels: Vec<String> = ids
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("?").to_string())
        .collect();
    let matrix = embedding_similarity(&state.model, &ids).map_err(|e| runtime(e))?;
    let dir = out_dir(cli.out.as_deref(), "embed-sim")?;
    write_effective(
        &dir,
        "embed-sim",
        &serde_json::json!({ "tokens": labels.len() }),
    )?;
    let mut out = create(&dir, "similarity.csv")?;
    write_similarity_csv(&labels, &matrix, &mut out).map_err(|e| runtime(e))?;
    out.flush().map_err(|e| runtime(e))?;
    println!(
        "wrote {0}x{0} similarity matrix to {1}",
        labels.len(),
        dir.join("similarity.csv").display()
    );
    Ok(())
}
