//! End-to-end acceptance checks. Each test prints a single PASS line with
//! its timing; together they gate the release of the toolkit.

use std::time::Instant;

use num_bigint::BigInt;
use num_traits::Signed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqrec_core::encoding::{
    decode_float, decode_integer, encode_float, encode_integer, EncodingConfig,
    FloatEncodingConfig, IntegerEncodingConfig, Vocabulary,
};
use seqrec_core::evaluation::{
    accuracy_one, evaluate, make_eval_set, noise_grid, noise_protocol, shift_protocol,
    EvalConfig, ModelPredictor, Predictor,
};
use seqrec_core::expr::magnitude_limit;
use seqrec_core::generator::{GeneratorConfig, OpFamily, SampleStream};
use seqrec_core::model::nn::{ModelConfig, Task};
use seqrec_core::model::{
    beam_decode, greedy_decode, init_model, lr_at, train_stream, Hypothesis, TrainConfig,
    TrainState,
};
use seqrec_core::oeis::{known_sequences, parse_stripped, run_bench, OeisBenchConfig, OeisRecord};
use seqrec_core::oracle::{extrapolate, fit_by_enumeration, term_error, EnumerationSpace};
use seqrec_core::{Expr, Leaf, Mode, Op, RecurrenceRelation, Value};

struct ByClosure<F>(F);

impl<F: Fn(&[u32]) -> Vec<Hypothesis>> Predictor for ByClosure<F> {
    fn predict(&self, src: &[u32]) -> Vec<Hypothesis> {
        (self.0)(src)
    }
}

fn hyp(tokens: Vec<u32>, ll: f64) -> Hypothesis {
    Hypothesis {
        tokens,
        norm_log_likelihood: ll,
        finished: true,
    }
}

fn pass(name: &str, started: Instant, detail: &str) {
    println!(
        "PASS {name}: {detail} ({:.2}s)",
        started.elapsed().as_secs_f64()
    );
}

fn random_bigint(rng: &mut ChaCha8Rng) -> BigInt {
    // uniform digit count keeps small and astronomically large values equally
    // represented
    let digits = rng.gen_range(1..=100);
    let mut s = String::new();
    if rng.gen_bool(0.5) {
        s.push('-');
    }
    s.push((b'1' + rng.gen_range(0..9u8)) as char);
    for _ in 1..digits {
        s.push((b'0' + rng.gen_range(0..10u8)) as char);
    }
    s.parse().unwrap()
}

#[test]
fn criterion_01_encoding_round_trips() {
    let started = Instant::now();
    let cfg = IntegerEncodingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..100_000 {
        let v = random_bigint(&mut rng);
        let tokens = encode_integer(&v, &cfg).unwrap();
        let (back, used) = decode_integer(&tokens, &cfg).unwrap();
        assert_eq!(back, v);
        assert_eq!(used, tokens.len());
    }
    let limit = magnitude_limit().clone();
    for v in [
        BigInt::from(0),
        BigInt::from(1),
        BigInt::from(-1),
        BigInt::from(9_999),
        BigInt::from(10_000),
        limit.clone(),
        -limit.clone(),
        &limit - 1,
    ] {
        let tokens = encode_integer(&v, &cfg).unwrap();
        assert_eq!(decode_integer(&tokens, &cfg).unwrap().0, v);
    }
    // worked examples at small bases
    let b10 = IntegerEncodingConfig { base: 10 };
    assert_eq!(
        encode_integer(&BigInt::from(-325), &b10).unwrap(),
        ["-", "3", "2", "5"]
    );
    let b30 = IntegerEncodingConfig { base: 30 };
    assert_eq!(
        encode_integer(&BigInt::from(-325), &b30).unwrap(),
        ["-", "10", "25"]
    );
    let fcfg = FloatEncodingConfig::default();
    assert_eq!(
        encode_float(1.0 / 3.0, &fcfg).unwrap(),
        ["+", "3333", "E-4"]
    );
    let (third, _) = decode_float(
        &["+", "3333", "E-4"].map(String::from),
        &fcfg,
    )
    .unwrap();
    assert_eq!(third, 0.3333);
    assert!(started.elapsed().as_secs_f64() < 10.0);
    pass("criterion 1", started, "integer/float encoding round-trips");
}

#[test]
fn criterion_02_catalog_recurrences_replay() {
    let started = Instant::now();
    for seq in known_sequences() {
        let replayed = seq.replay(seq.prefix.len());
        let expected: Vec<BigInt> = seq.prefix.iter().map(|&t| BigInt::from(t)).collect();
        assert_eq!(replayed, expected, "A{:06}", seq.a_number);
    }
    if let Ok(path) = std::env::var("OEIS_STRIPPED") {
        let file = std::fs::File::open(path).unwrap();
        let (records, _) = parse_stripped(std::io::BufReader::new(file)).unwrap();
        for target in [855u32, 8954, 74062] {
            let seq = known_sequences()
                .into_iter()
                .find(|s| s.a_number == target)
                .unwrap();
            let rec = records.iter().find(|r| r.a_number == target).unwrap();
            assert!(rec.terms.len() >= 25, "A{target:06}");
            assert!(seq.matches_catalog(&rec.terms), "A{target:06}");
        }
    }
    assert!(started.elapsed().as_secs_f64() < 5.0);
    pass("criterion 2", started, "catalog recurrences reproduce terms");
}

#[test]
fn criterion_03_metric_properties() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for _ in 0..10_000 {
        let len = rng.gen_range(1..8);
        let truth: Vec<Value> = (0..len)
            .map(|_| Value::Float(rng.gen_range(-1e3..1e3)))
            .collect();
        let pred: Vec<Value> = truth
            .iter()
            .map(|t| {
                let t = match t {
                    Value::Float(x) => *x,
                    Value::Int(_) => unreachable!(),
                };
                Value::Float(t * (1.0 + rng.gen_range(-0.5..0.5)))
            })
            .collect();
        let tau = rng.gen_range(0.0..0.6);
        let hit = accuracy_one(&pred, &truth, tau, None);
        // tau monotonicity
        if hit {
            assert!(accuracy_one(&pred, &truth, tau * 2.0, None));
        } else {
            assert!(!accuracy_one(&pred, &truth, tau / 2.0, None));
        }
        // horizon monotonicity
        if hit {
            let k = rng.gen_range(1..=len);
            assert!(accuracy_one(&pred[..k], &truth[..k], tau, None));
        }
    }
    // inclusive boundary with exact dyadic arithmetic
    let truth = [Value::Float(1.0)];
    assert!(accuracy_one(&[Value::Float(1.25)], &truth, 0.25, None));
    assert!(!accuracy_one(&[Value::Float(1.2500001)], &truth, 0.25, None));
    // zero target falls back to absolute error
    assert!(accuracy_one(
        &[Value::Float(1e-11)],
        &[Value::Float(0.0)],
        1e-10,
        None
    ));
    assert!(started.elapsed().as_secs_f64() < 30.0);
    pass("criterion 3", started, "accuracy metric properties on 10^4 cases");
}

#[test]
fn criterion_04_generator_conformance() {
    let started = Instant::now();
    let cfg = GeneratorConfig::default();
    let stream = SampleStream::new(cfg.clone(), 404, 0);
    let limit = magnitude_limit();
    let mut checked = 0usize;
    for sample in stream.flatten() {
        assert!(sample.ops >= 1 && sample.ops <= 10);
        assert!(sample.degree <= 6);
        assert!((5..=30).contains(&sample.length));
        for seq in &sample.sequences {
            for v in seq {
                match v {
                    Value::Int(i) => assert!(i.abs() <= *limit),
                    Value::Float(_) => unreachable!("integer mode"),
                }
            }
        }
        assert!(sample.replays());
        checked += 1;
        if checked == 100_000 {
            break;
        }
    }
    assert_eq!(checked, 100_000);
    // leaf-kind frequencies are a property of the sampler itself; accepted
    // samples are biased by the magnitude/domain rejection loop
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let (mut consts, mut indices, mut priors) = (0u64, 0u64, 0u64);
    for _ in 0..100_000 {
        let rel = seqrec_core::generator::sample_relation(&cfg, &mut rng);
        for expr in rel.exprs() {
            expr.for_each_leaf(&mut |leaf| match leaf {
                Leaf::Const(_) => consts += 1,
                Leaf::Index => indices += 1,
                Leaf::Prior { .. } => priors += 1,
                Leaf::Noise => {}
            });
        }
    }
    let total = (consts + indices + priors) as f64;
    let sigma = (2.0 / 9.0 / total).sqrt();
    for count in [consts, indices, priors] {
        let freq = count as f64 / total;
        assert!(
            (freq - 1.0 / 3.0).abs() <= 3.0 * sigma,
            "leaf frequency {freq} outside 3 sigma"
        );
    }
    assert!(started.elapsed().as_secs() < 300);
    pass("criterion 4", started, "10^5 samples within all bounds");
}

#[test]
fn criterion_05_enumeration_baseline_closure() {
    let started = Instant::now();
    // long observation windows: short prefixes can be genuinely ambiguous
    // (two distinct relations agreeing on every observed term)
    let cfg = GeneratorConfig {
        o_max: 2,
        d_max: 2,
        l_min: 25,
        l_max: 30,
        ..GeneratorConfig::default()
    };
    let space = EnumerationSpace::with_defaults(Mode::Integer, 2, 2);
    let stream = SampleStream::new(cfg, 505, 0);
    let mut solved = 0usize;
    let mut attempted = 0usize;
    for sample in stream.flatten() {
        let observed = sample.interleaved_terms();
        // ground truth must extend cleanly for ten more terms
        let Ok(truth_next) = extrapolate(&sample.relation, Mode::Integer, &observed, 10) else {
            continue;
        };
        attempted += 1;
        let candidates = fit_by_enumeration(&observed, &space, 1e-10, false).unwrap();
        let fitted = candidates
            .first()
            .expect("every sampled relation lies inside the search space");
        let predicted = extrapolate(&fitted.relation, Mode::Integer, &observed, 10)
            .expect("fitted relation extrapolates");
        let hit = predicted
            .iter()
            .zip(&truth_next)
            .all(|(p, t)| matches!(term_error(p, t), Some(e) if e <= 1e-10));
        if !hit {
            println!(
                "miss: truth {} vs fitted {} (ops {}, err {:e})",
                sample.relation.to_text(),
                fitted.relation.to_text(),
                fitted.ops,
                fitted.max_error,
            );
        }
        solved += hit as usize;
        if attempted == 100 {
            break;
        }
    }
    assert_eq!(attempted, 100);
    assert_eq!(solved, 100, "enumeration baseline must close the loop");
    assert!(started.elapsed().as_secs() < 600);
    pass("criterion 5", started, "brute-force fit solves 100/100");
}

#[test]
fn criterion_06_model_numerics() {
    let started = Instant::now();
    let config = ModelConfig {
        layers: 1,
        heads: 2,
        dim: 8,
        ff_dim: 16,
        max_positions: 12,
        vocab_size: 11,
        task: Task::Symbolic,
    };
    let mut model = init_model::<f64>(config.clone(), 606).unwrap();
    assert!(model.param_count() <= 10_000);
    let src = [3u32, 4, 5, 6];
    let dec_input = [1u32, 7, 8];
    let targets = [7u32, 8, 2];
    let mut grads = model.zeros_like();
    model
        .example_loss_and_grad(&mut grads, &src, &dec_input, &targets, 0)
        .unwrap();
    let forward = |m: &seqrec_core::model::Model<f64>| {
        let enc = m.encode(&src).unwrap();
        let dec = m.decode(&enc, &dec_input).unwrap();
        m.loss(&dec, &targets, 0)
    };
    let h = 1e-5;
    let n_params = model.params_mut().len();
    let mut checked = 0usize;
    for p_idx in 0..n_params {
        let rows = grads.params_mut()[p_idx].nrows();
        let cols = grads.params_mut()[p_idx].ncols();
        // probe a diagonal stripe of each matrix
        for k in 0..rows.max(cols).min(8) {
            let (i, j) = (k % rows, (k * 7 + 1) % cols);
            let analytic = grads.params_mut()[p_idx][[i, j]];
            model.params_mut()[p_idx][[i, j]] += h;
            let up = forward(&model);
            model.params_mut()[p_idx][[i, j]] -= 2.0 * h;
            let down = forward(&model);
            model.params_mut()[p_idx][[i, j]] += h;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            assert!(
                ((fd - analytic) / denom).abs() < 1e-4,
                "param {p_idx} [{i},{j}]: fd {fd} vs analytic {analytic}"
            );
            checked += 1;
        }
    }
    assert!(checked > 100);

    // uniform logits: zeroed output head gives exactly ln V
    let mut uniform = init_model::<f64>(config.clone(), 607).unwrap();
    let n = uniform.params_mut().len();
    for p in [n - 2, n - 1] {
        uniform.params_mut()[p].fill(0.0);
    }
    let loss = forward(&uniform);
    assert!((loss - (config.vocab_size as f64).ln()).abs() < 1e-6);

    // pinned schedule values
    let tc = TrainConfig::default();
    assert_eq!(lr_at(0, &tc), 1e-7);
    assert_eq!(lr_at(10_000, &tc), 2e-4);

    // beam width one is greedy
    let small = init_model::<f32>(config, 608).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(609);
    for _ in 0..100 {
        let len = rng.gen_range(1..8);
        let src: Vec<u32> = (0..len).map(|_| rng.gen_range(3..11)).collect();
        let greedy = greedy_decode(&small, &src, 8, 1, 2).unwrap();
        let beam = beam_decode(&small, &src, 1, 8, 1, 2).unwrap();
        assert_eq!(beam.len(), 1);
        assert_eq!(beam[0].tokens, greedy.tokens);
    }
    assert!(started.elapsed().as_secs() < 120);
    pass("criterion 6", started, "gradients, losses, schedule, beam");
}

fn toy_encoding() -> EncodingConfig {
    EncodingConfig {
        integer: IntegerEncodingConfig { base: 100 },
        float: FloatEncodingConfig {
            digits_per_token: 2,
            ..FloatEncodingConfig::default()
        },
    }
}

fn toy_generator() -> GeneratorConfig {
    GeneratorConfig {
        o_max: 2,
        d_max: 2,
        l_min: 25,
        l_max: 25,
        ..GeneratorConfig::default()
    }
}

#[test]
fn criterion_07_desk_scale_learning() {
    let started = Instant::now();
    let vocab = Vocabulary::build(toy_encoding());
    let gen_cfg = toy_generator();
    fn env_or<T: std::str::FromStr>(name: &str, default: T) -> T {
        std::env::var(name)
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(default)
    }
    let model_cfg = ModelConfig {
        layers: env_or("ACCEPT_LAYERS", 2),
        heads: 4,
        dim: env_or("ACCEPT_DIM", 64),
        ff_dim: env_or("ACCEPT_FF", 256),
        max_positions: 512,
        vocab_size: vocab.len(),
        task: Task::Symbolic,
    };
    let steps: u64 = env_or("ACCEPT_TRAIN_STEPS", 30_000);
    let train_cfg = TrainConfig {
        steps,
        batch_size: env_or("ACCEPT_BATCH", 8),
        seed: 707,
        sigma_train: 0.0,
        n_pred: 5,
        lr_peak: env_or("ACCEPT_LR", 4e-4),
        warmup_steps: env_or("ACCEPT_WARMUP", 1_500),
        log_every: 500,
        ..TrainConfig::default()
    };
    let model = init_model::<f32>(model_cfg, 708).unwrap();
    let mut state = TrainState::new(model, vocab.hash());
    let mut metrics: Box<dyn std::io::Write> = match std::env::var("ACCEPT_METRICS") {
        Ok(path) => Box::new(std::fs::File::create(path).unwrap()),
        Err(_) => Box::new(std::io::sink()),
    };
    train_stream(&mut state, &gen_cfg, &train_cfg, &vocab, &mut metrics, None).unwrap();

    let items: Vec<_> = make_eval_set(&gen_cfg, 400, 5, 70_007)
        .into_iter()
        .filter(|item| {
            vocab
                .encode_terms(&seqrec_core::evaluation::EvalItem::interleaved_input(
                    &item.input,
                ))
                .map(|t| t.ids.len() <= 500)
                .unwrap_or(false)
        })
        .take(200)
        .collect();
    assert!(items.len() >= 150, "eval set too small");
    let predictor = ModelPredictor {
        model: &state.model,
        bos: vocab.bos_id(),
        eos: vocab.eos_id(),
        beam_size: 10,
        max_len: 40,
    };
    let eval_cfg = EvalConfig {
        tau: 0.0,
        n_pred: 5,
        n_pred_sweep: vec![1, 5],
        ..EvalConfig::default()
    };
    let report = evaluate(&predictor, &items, &eval_cfg, &vocab, Task::Symbolic, None).unwrap();
    println!(
        "desk-scale run: accuracy {:.3}, invalid rate {:.4}, {} items, {} steps",
        report.accuracy, report.invalid_rate, report.total, steps
    );
    assert!(
        report.accuracy >= 0.8,
        "held-out accuracy {:.3} below the 0.8 sanity floor",
        report.accuracy
    );
    assert!(
        report.invalid_rate < 0.01,
        "invalid rate {:.4} above 1%",
        report.invalid_rate
    );
    assert!(started.elapsed().as_secs() < 7_200);
    pass("criterion 7", started, "toy preset clears the sanity floor");
}

#[test]
fn criterion_08_protocol_fidelity() {
    let started = Instant::now();
    let vocab = Vocabulary::build(EncodingConfig::default());
    let gen_cfg = GeneratorConfig {
        o_max: 3,
        d_max: 2,
        l_min: 8,
        l_max: 12,
        op_family: Some(OpFamily::Base),
        ..GeneratorConfig::float()
    };
    let items = make_eval_set(&gen_cfg, 40, 5, 808);
    let stub_ids = vocab
        .encode_relation(&RecurrenceRelation::parse_text("add u1 1", Mode::Float).unwrap())
        .unwrap()
        .ids;
    let stub = ByClosure(move |_: &[u32]| vec![hyp(stub_ids.clone(), -0.3)]);
    let cfg = EvalConfig {
        n_pred: 5,
        n_pred_sweep: vec![1, 5],
        ..EvalConfig::default()
    };

    let clean = evaluate(&stub, &items, &cfg, &vocab, Task::Symbolic, None).unwrap();
    let mut silent =
        noise_protocol(&stub, &items, 0.0, 909, &cfg, &vocab, Task::Symbolic, None).unwrap();
    silent.tag = None;
    assert_eq!(clean, silent, "sigma_test=0 must replay the clean protocol");

    let shift_cfg = EvalConfig { tau: 0.01, ..cfg.clone() };
    let shift_items = make_eval_set(&gen_cfg, 40, 5, 810);
    let base = evaluate(&stub, &shift_items, &shift_cfg, &vocab, Task::Symbolic, None).unwrap();
    let mut shifted = shift_protocol(
        &stub,
        &gen_cfg,
        (gen_cfg.init_low, gen_cfg.init_high),
        40,
        810,
        &shift_cfg,
        &vocab,
        Task::Symbolic,
        None,
    )
    .unwrap();
    shifted.tag = None;
    assert_eq!(base, shifted, "training-range shift must replay evaluate");

    // noise grid mirrors the 3x3 robustness table
    let rows: Vec<(f64, &dyn Predictor)> = vec![(0.0, &stub), (0.1, &stub), (0.5, &stub)];
    let grid = noise_grid(
        &rows,
        &[0.0, 0.1, 0.5],
        &items,
        909,
        &cfg,
        &vocab,
        Task::Symbolic,
    )
    .unwrap();
    assert_eq!(grid.sigma_train, vec![0.0, 0.1, 0.5]);
    assert_eq!(grid.sigma_test, vec![0.0, 0.1, 0.5]);
    assert_eq!(grid.accuracy.len(), 3);
    assert!(grid.accuracy.iter().all(|row| row.len() == 3));

    // OEIS grid mirrors the benchmark table: {15,25} x {1,10}
    let int_vocab = vocab;
    let seq = known_sequences()
        .into_iter()
        .find(|s| s.a_number == 855)
        .unwrap();
    let set = vec![OeisRecord {
        a_number: 855,
        terms: seq.replay(40),
        keywords: vec!["easy".into()],
    }];
    let rel_ids = int_vocab.encode_relation(&seq.relation()).unwrap().ids;
    let oracle = ByClosure(move |_: &[u32]| vec![hyp(rel_ids.clone(), -0.1)]);
    let bench = run_bench(
        &oracle,
        &set,
        &OeisBenchConfig::default(),
        &int_vocab,
        Task::Symbolic,
        None,
    )
    .unwrap();
    let grid: Vec<(usize, usize)> = bench.cells.iter().map(|c| (c.n_input, c.n_pred)).collect();
    assert_eq!(grid, vec![(15, 1), (15, 10), (25, 1), (25, 10)]);
    assert!(started.elapsed().as_secs() < 300);
    pass("criterion 8", started, "protocols replay and grids match");
}

#[test]
fn criterion_09_approximation_identities() {
    let started = Instant::now();
    // constants recovered by the float model, checked against their closed
    // forms at the precision that actually holds in f64
    let two_atan = 2.0 * 10f64.exp().atan();
    assert!(((two_atan - 3.1415) / 3.1415).abs() <= 1e-6);
    let zeta2 = std::f64::consts::PI.powi(2) / 6.0;
    assert!(((zeta2 - 1.644934) / 1.644934).abs() <= 1e-7);
    let repunit = 10.0f64 / 81.0;
    assert!(((repunit - 0.123456789) / 0.123456789).abs() <= 1e-8);
    let complement = 1.0 - (1.0f64 / 9.0).powi(2);
    assert!(((complement - 0.987654321) / 0.987654321).abs() <= 1e-10);
    // exact identity over the benchmark range
    for n in 1..=50 {
        let x = n as f64;
        let lhs = x.asinh();
        let rhs = (x + (x * x + 1.0).sqrt()).ln();
        assert!(((lhs - rhs) / lhs).abs() <= 1e-12);
    }
    assert!(started.elapsed().as_secs_f64() < 5.0);
    pass("criterion 9", started, "closed-form identities verified");
}

fn monomial_text(c: i64, k: usize) -> String {
    match k {
        0 => format!("{c}"),
        _ => {
            let mut s = "n".to_string();
            for _ in 1..k {
                s = format!("mul n {s}");
            }
            format!("mul {c} {s}")
        }
    }
}

#[test]
fn criterion_10_iterative_refinement() {
    let started = Instant::now();
    let vocab = Vocabulary::build(EncodingConfig::default());
    let inner = Vocabulary::build(EncodingConfig::default());
    // scripted oracle: reads the leading monomial off finite differences
    let oracle = ByClosure(move |src: &[u32]| {
        let terms = inner.decode_terms(src, Mode::Float).unwrap();
        let mut diffs: Vec<f64> = terms.iter().map(|t| t.to_f64()).collect();
        let mut k = 0usize;
        while diffs.iter().any(|d| (d - diffs[0]).abs() > 1e-6) {
            diffs = diffs.windows(2).map(|w| w[1] - w[0]).collect();
            k += 1;
        }
        let fact: f64 = (1..=k.max(1)).map(|i| i as f64).product();
        let c = (diffs[0] / if k == 0 { 1.0 } else { fact }).round() as i64;
        let rel = RecurrenceRelation::parse_text(&monomial_text(c, k), Mode::Float).unwrap();
        vec![hyp(inner.encode_relation(&rel).unwrap().ids, 0.0)]
    });
    let ns: Vec<i64> = (1..=8).collect();
    let values: Vec<f64> = ns.iter().map(|&n| (3 * n * n + 5 * n + 7) as f64).collect();
    let result =
        seqrec_core::evaluation::iterative_refinement(&oracle, &ns, &values, 5, &vocab).unwrap();
    assert_eq!(result.rounds.len(), 3, "three rounds, one per coefficient");
    assert_eq!(result.rounds[2].residual_after, 0.0);
    let expected = Expr::binary(
        Op::Add,
        Expr::binary(
            Op::Add,
            Expr::binary(
                Op::Mul,
                Expr::constant(3),
                Expr::binary(Op::Mul, Expr::leaf(Leaf::Index), Expr::leaf(Leaf::Index)),
            ),
            Expr::binary(Op::Mul, Expr::constant(5), Expr::leaf(Leaf::Index)),
        ),
        Expr::constant(7),
    );
    assert_eq!(
        result.expression.to_prefix(),
        expected.to_prefix(),
        "recovered 3n^2 + 5n + 7 exactly"
    );
    assert!(started.elapsed().as_secs_f64() < 5.0);
    pass("criterion 10", started, "refinement recovers the quadratic");
}
