//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Progress goes to stderr.

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use log2cmd::recovery_eval::{
    parse_command_lines, read_records, replay, simulate, success_rate, success_rates, threshold_report, write_records, SampleRecord, SuccessReport,
    ThresholdReport, GRID_STEPS,
};
use log2cmd::seq2seq_model::{
    batch_loss, init_model, reliability, train, EncodedPair, Hyperparams, ModelParams, ParamVars, Profile,
    Seq2SeqModel, TrainReport, Vocab, BOS, EOS,
};
use log2cmd::synth_corpus::{
    build_group_automata, gen_corpus, mutate_typo, Corpus, GenParams, Group, SamplePair, STATE_RECOVERED,
};
use log2cmd::template_store::{LogSequence, TemplateId};
use log2cmd::tensor_core::{grad_check, grad_check_report, GradCheckReport, LstmVars, Tape, Tensor, Var, DEFAULT_EPS};

// Criterion 1
const GRAD_EPS: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-5;
const GRAD_ABS_TOL: f64 = 1e-9;
const GRAD_CASES: u32 = 8;
const GRAD_BUDGET: Duration = Duration::from_secs(10);
// Criterion 2
const MEMO_LOSS: f64 = 0.05;
const MEMO_MAX_EPOCHS: usize = 500;
const MEMO_BUDGET: Duration = Duration::from_secs(5 * 60);
// Criteria 3, 4, 8
const SEEDS: [u64; 3] = [0, 1, 2];
const SPF_HIGH: usize = 90;
const SPF_LOW: usize = 60;
// Early stopping normally ends these runs near epoch 30; the cap bounds the
// worst case.
const SCALE_MAX_EPOCHS: usize = 40;
const SCALE_LR: f64 = 3e-3;
const AB_MIN_RATE: f64 = 0.80;
const SCALE_BUDGET: Duration = Duration::from_secs(2 * 3600);
// Criterion 5
const EQUIV_CASES: u32 = 200;
const EQUIV_BUDGET: Duration = Duration::from_secs(30);
// Criterion 6
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const ORACLE_REL_TOL: f64 = 1e-5;
// Criterion 7
const CONSISTENCY_PAIRS: usize = 10_000;
const CONSISTENCY_TYPOS: usize = 10_000;
const CONSISTENCY_BUDGET: Duration = Duration::from_secs(60);

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: u8, name: &'static str, checks: Vec<(bool, String)>) -> Outcome {
    let pass = checks.iter().all(|c| c.0);
    let detail = checks
        .into_iter()
        .map(|(ok, s)| if ok { s } else { format!("[x] {s}") })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { id, name, pass, detail }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn within(elapsed: Duration, budget: Duration) -> (bool, String) {
    (
        elapsed < budget,
        format!("{:.1}s (budget {}s)", elapsed.as_secs_f64(), budget.as_secs()),
    )
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

/// Worst relative error over one random instance of every primitive.
fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut check = |name: &'static str, params: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Var| {
        out.push((name, grad_check(f, &params, GRAD_EPS).unwrap()));
    };

    let dense = vec![
        rand_tensor(&mut rng, &[3, 4]),
        rand_tensor(&mut rng, &[4, 2]),
        rand_tensor(&mut rng, &[2]),
        rand_tensor(&mut rng, &[3, 2]),
    ];
    check("matmul/add_row/sigmoid/tanh/mul/add/scale/sum", dense, &|t, v| {
        let m = t.matmul(v[0], v[1]);
        let m = t.add_row(m, v[2]);
        let s = t.sigmoid(m);
        let th = t.tanh(m);
        let p = t.mul(s, th);
        let p = t.add(p, v[3]);
        let p = t.scale(p, 1.7);
        let sq = t.mul(p, p);
        t.sum(sq)
    });

    let table = vec![rand_tensor(&mut rng, &[5, 3])];
    check("gather/row_slice/concat", table, &|t, v| {
        let e = t.gather(v[0], vec![1, 1, 2, 4]);
        let e2 = t.mul(e, e);
        let top = t.row_slice(e2, 1, 2);
        let cat = t.concat_cols(top, top);
        let rows = t.concat_rows(vec![cat, cat]);
        t.sum(rows)
    });

    let aff = vec![
        rand_tensor(&mut rng, &[4, 3]),
        rand_tensor(&mut rng, &[2, 2]),
        rand_tensor(&mut rng, &[2, 3]),
    ];
    check("affine_rows", aff, &|t, v| {
        let y = t.affine_rows(v[0], 1, v[1], v[2]);
        let sq = t.mul(y, y);
        t.sum(sq)
    });

    let logits = vec![rand_tensor(&mut rng, &[3, 5])];
    check("softmax_xent", logits, &|t, v| t.softmax_xent(v[0], vec![0, 4, 2], vec![0.5, 1.0, 1.5]));

    let lstm = vec![
        rand_tensor(&mut rng, &[3, 16]),
        rand_tensor(&mut rng, &[4, 16]),
        rand_tensor(&mut rng, &[16]),
        rand_tensor(&mut rng, &[2, 3]),
        rand_tensor(&mut rng, &[2, 4]),
        rand_tensor(&mut rng, &[2, 4]),
    ];
    check("lstm_step", lstm, &|t, v| {
        let p = LstmVars {
            w_ih: v[0],
            w_hh: v[1],
            bias: v[2],
        };
        let (h, c) = t.lstm_step(v[3], v[4], v[5], &p);
        let hc = t.mul(h, c);
        let s = t.softmax_xent(h, vec![1, 3], vec![1.0, 1.0]);
        let r = t.sum(hc);
        t.add(s, r)
    });

    let seq = vec![
        rand_tensor(&mut rng, &[3 * 2, 12]),
        rand_tensor(&mut rng, &[2, 3]),
        rand_tensor(&mut rng, &[2, 3]),
        rand_tensor(&mut rng, &[3, 12]),
        rand_tensor(&mut rng, &[2 * 2, 3]),
    ];
    check("lstm_seq/seq_hidden/seq_rows/seq_state/attention_seq", seq, &|t, v| {
        let enc = t.lstm_seq(v[0], v[1], v[2], v[3], vec![3, 2]);
        let keys = t.seq_hidden(enc);
        let rows = t.seq_rows(enc);
        let last = t.seq_state(enc, 2, true);
        let ctx = t.attention_seq(v[4], keys, vec![3, 2]);
        let a = t.mul(ctx, ctx);
        let b = t.mul(rows, rows);
        let c = t.mul(last, last);
        let (a, b, c) = (t.sum(a), t.sum(b), t.sum(c));
        let ab = t.add(a, b);
        t.add(ab, c)
    });

    let att = vec![
        rand_tensor(&mut rng, &[2, 3]),
        rand_tensor(&mut rng, &[2, 3]),
        rand_tensor(&mut rng, &[2, 3]),
        rand_tensor(&mut rng, &[3, 3]),
        rand_tensor(&mut rng, &[2, 3]),
    ];
    check("blend/stack/attend/dropout", att, &|t, v| {
        let k1 = t.blend(v[1], v[0], vec![true, false]);
        let keys = t.stack(vec![v[0], k1, v[2]]);
        let ctx = t.attend(v[4], keys, vec![3, 2], v[3]);
        let d = t.dropout(ctx, vec![2.0, 0.0, 1.0, 1.0, 2.0, 0.5]);
        let sq = t.mul(d, d);
        t.sum(sq)
    });
    out
}

fn micro_model(seed: u64, input_feed: bool) -> Seq2SeqModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hyper = Hyperparams {
        embed_dim: 3,
        hidden_dim: 4,
        dropout: 0.0,
        input_feed,
        ..Hyperparams::default()
    };
    let src = Vocab::new((1..=5).map(|i| i.to_string()));
    let tgt = Vocab::new(["a", "b", "c"]);
    let mut m = Seq2SeqModel::new(src, tgt, hyper, &mut rng).unwrap();
    for t in m.params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
    }
    m
}

/// Finite-difference check of the full two-step encoder/decoder loss.
fn micro_model_error(seed: u64, input_feed: bool, dropout: f64) -> GradCheckReport {
    let m = micro_model(seed, input_feed);
    let hp = Hyperparams { dropout, ..m.hyper.clone() };
    let pairs = [
        EncodedPair {
            src: vec![4, 5],
            tgt: vec![4, EOS],
        },
        EncodedPair {
            src: vec![6, 7],
            tgt: vec![5, EOS],
        },
    ];
    let params: Vec<Tensor> = m.params.tensors().iter().map(|t| (*t).clone()).collect();
    grad_check_report(
        |tape, vars| {
            let pv = ParamVars::from_slice(vars);
            let refs: Vec<&EncodedPair> = pairs.iter().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let (sum, n) = batch_loss(tape, &pv, &hp, &refs, Some(&mut rng));
            tape.scale(sum, 1.0 / n as f64)
        },
        &params,
        DEFAULT_EPS,
    )
    .unwrap()
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        rng_algorithm: proptest::test_runner::RngAlgorithm::ChaCha,
        ..Config::default()
    })
}

fn criterion_1() -> Outcome {
    let (checks, elapsed) = timed(|| {
        let worst = std::cell::Cell::new(0.0f64);
        let prim = runner(GRAD_CASES).run(&any::<u64>(), |seed| {
            for (name, err) in primitive_errors(seed) {
                worst.set(worst.get().max(err));
                prop_assert!(err < GRAD_REL_TOL, "{name} seed {seed}: {err:e}");
            }
            Ok(())
        });

        // Pinned instances are judged by the relative measure alone.
        let mut pinned_worst = 0.0f64;
        for seed in 0..2 {
            for (feed, p) in [(false, 0.0), (true, 0.0), (false, 0.3), (true, 0.3)] {
                pinned_worst = pinned_worst.max(micro_model_error(seed, feed, p).max_rel);
            }
        }

        // On random instances, entries near 1e-8 sit at the central-difference
        // noise floor, so the property bounds the absolute error instead.
        let abs_worst = std::cell::Cell::new(0.0f64);
        let micro = runner(GRAD_CASES).run(
            &(any::<u64>(), any::<bool>(), prop_oneof![Just(0.0), Just(0.3)]),
            |(seed, feed, p)| {
                let r = micro_model_error(seed, feed, p);
                abs_worst.set(abs_worst.get().max(r.max_abs));
                prop_assert!(r.max_abs < GRAD_ABS_TOL, "seed {seed} input_feed {feed} dropout {p}: {r:?}");
                Ok(())
            },
        );
        vec![
            (
                prim.is_ok(),
                match prim {
                    Ok(()) => format!("primitives, {GRAD_CASES} random cases, worst rel {:.1e}", worst.get()),
                    Err(e) => format!("primitives: {e}"),
                },
            ),
            (
                pinned_worst < GRAD_REL_TOL,
                format!("2-step micro-model, 8 pinned cases, worst rel {pinned_worst:.1e}"),
            ),
            (
                micro.is_ok(),
                match micro {
                    Ok(()) => format!(
                        "2-step micro-model, {GRAD_CASES} random cases, worst abs {:.1e}",
                        abs_worst.get()
                    ),
                    Err(e) => format!("micro-model: {e}"),
                },
            ),
        ]
    });
    let mut checks = checks;
    checks.push(within(elapsed, GRAD_BUDGET));
    outcome(1, "gradient correctness", checks)
}

// ---------------------------------------------------------------- 2

fn toy_corpus() -> Corpus {
    let params = GenParams {
        groups: vec![Group::B],
        failures_per_group: 2,
        samples_per_failure: 10,
        test_per_failure: 0,
        seed: 11,
        ..GenParams::default()
    };
    gen_corpus(&params).unwrap()
}

fn toy_pairs() -> Vec<SamplePair> {
    let c = toy_corpus();
    let mut all = c.train;
    all.extend(c.dev);
    all.extend(c.test);
    all
}

struct MemoRun {
    report: TrainReport,
    greedy: Vec<Vec<String>>,
    final_loss: f64,
}

fn memorize(pairs: &[SamplePair]) -> MemoRun {
    let hp = Hyperparams {
        max_epochs: MEMO_MAX_EPOCHS,
        seed: 5,
        ..Hyperparams::default().with_profile(Profile::Desk)
    };
    let model = init_model(pairs, hp).unwrap();
    // Dev is the training set itself: early stopping tracks eval-mode
    // training loss.
    let (model, report) = train(model, pairs, pairs, |_| {}).unwrap();
    let final_loss = model.eval_loss(pairs).unwrap();
    let greedy = pairs
        .iter()
        .map(|p| model.greedy_decode(&p.log_sequence(), 64).unwrap().tokens)
        .collect();
    MemoRun {
        report,
        greedy,
        final_loss,
    }
}

fn criterion_2(pairs: &[SamplePair], run: &MemoRun, elapsed: Duration) -> Outcome {
    let first_below = run.report.epochs.iter().find(|e| e.dev_loss < MEMO_LOSS).map(|e| e.epoch);
    let exact = run.greedy.iter().zip(pairs).filter(|(g, p)| **g == p.target).count();
    outcome(
        2,
        "memorization oracle",
        vec![
            (pairs.len() == 20, format!("{} pairs", pairs.len())),
            (
                run.final_loss < MEMO_LOSS && first_below.is_some_and(|e| e <= MEMO_MAX_EPOCHS),
                format!(
                    "train loss {:.4} (< {MEMO_LOSS} first at epoch {})",
                    run.final_loss,
                    first_below.map_or("never".into(), |e| e.to_string())
                ),
            ),
            (exact == pairs.len(), format!("greedy exact {exact}/{}", pairs.len())),
            within(elapsed, MEMO_BUDGET),
        ],
    )
}

// ---------------------------------------------------------------- 3, 4, 8

struct ScaleRun {
    spf: usize,
    seed: u64,
    success: SuccessReport,
    records: Vec<SampleRecord>,
    threshold: ThresholdReport,
    best_epoch: usize,
}

fn scale_run(spf: usize, seed: u64) -> ScaleRun {
    let gen = GenParams {
        samples_per_failure: spf,
        seed,
        ..GenParams::default()
    };
    let corpus = gen_corpus(&gen).unwrap();
    let hp = Hyperparams {
        seed,
        max_epochs: SCALE_MAX_EPOCHS,
        learning_rate: SCALE_LR,
        ..Hyperparams::default().with_profile(Profile::Desk)
    };
    let model = init_model(&corpus.train, hp.clone()).unwrap();
    let (model, report) = train(model, &corpus.train, &corpus.dev, |e| {
        eprintln!(
            "  [spf {spf} seed {seed}] epoch {} train {:.4} dev {:.4}",
            e.epoch, e.train_loss, e.dev_loss
        )
    })
    .unwrap();
    let automata = build_group_automata();
    let (success, records) = success_rate(&model, &corpus.test, &automata, hp.beam, hp.max_decode_len).unwrap();
    let threshold = threshold_report(&records, GRID_STEPS).unwrap();
    ScaleRun {
        spf,
        seed,
        success,
        records,
        threshold,
        best_epoch: report.best_epoch,
    }
}

fn mean_rate(runs: &[ScaleRun], spf: usize, g: Group) -> f64 {
    let rs: Vec<f64> = runs
        .iter()
        .filter(|r| r.spf == spf)
        .map(|r| r.success.rate_of(g).unwrap())
        .collect();
    rs.iter().sum::<f64>() / rs.len() as f64
}

fn rates_line(runs: &[ScaleRun], spf: usize) -> String {
    Group::ALL
        .iter()
        .map(|g| format!("{g} {:.3}", mean_rate(runs, spf, *g)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes the run's records, reads them back, replays every estimate and
/// recomputes the per-group rates.
fn resimulated(r: &ScaleRun, dir: &Path) -> bool {
    let path = dir.join(format!("results_{}_{}.jsonl", r.spf, r.seed));
    write_records(&path, &r.records).unwrap();
    let back = read_records(&path).unwrap();
    let automata = build_group_automata();
    let replayed: Vec<SampleRecord> = back
        .into_iter()
        .map(|mut x| {
            let (state, ok) = replay(&automata, x.group, &x.component, &x.tokens).unwrap();
            x.final_state = state;
            x.accepted = ok;
            x
        })
        .collect();
    replayed == r.records && success_rates(&replayed).unwrap() == r.success
}

fn criteria_3_4(runs: &[ScaleRun], elapsed: Duration, dir: &Path) -> (Outcome, Outcome) {
    let a = mean_rate(runs, SPF_HIGH, Group::A);
    let b = mean_rate(runs, SPF_HIGH, Group::B);
    let grp = |spf, gs: &[Group]| gs.iter().map(|g| mean_rate(runs, spf, *g)).sum::<f64>() / gs.len() as f64;
    let ab_low = grp(SPF_LOW, &[Group::A, Group::B]);
    let cde_low = grp(SPF_LOW, &[Group::C, Group::D, Group::E]);
    let sizes_ok = runs
        .iter()
        .filter(|r| r.spf == SPF_HIGH)
        .all(|r| r.success.overall.total == 450);
    let resim_ok = runs.iter().all(|r| resimulated(r, dir));
    let epochs: Vec<String> = runs
        .iter()
        .map(|r| format!("{}/{}:{}", r.spf, r.seed, r.best_epoch))
        .collect();
    let c3 = outcome(
        3,
        "desk-scale trend",
        vec![
            (sizes_ok, "450-sample test sets".into()),
            (resim_ok, "rates re-derived from persisted records".into()),
            (
                a >= AB_MIN_RATE && b >= AB_MIN_RATE,
                format!("spf {SPF_HIGH}: {}", rates_line(runs, SPF_HIGH)),
            ),
            (
                ab_low > cde_low,
                format!("spf {SPF_LOW}: mean(A,B) {ab_low:.3} > mean(C,D,E) {cde_low:.3}"),
            ),
            (true, format!("best epochs {}", epochs.join(" "))),
            within(elapsed, SCALE_BUDGET),
        ],
    );
    let drops: Vec<(bool, String)> = Group::ALL
        .iter()
        .map(|g| {
            let (lo, hi) = (mean_rate(runs, SPF_LOW, *g), mean_rate(runs, SPF_HIGH, *g));
            (lo < hi, format!("{g} {lo:.3} < {hi:.3}"))
        })
        .collect();
    let mut checks = drops;
    checks.push(within(elapsed, SCALE_BUDGET));
    (c3, outcome(4, "data-scarcity degradation", checks))
}

fn monotone(r: &ThresholdReport) -> bool {
    r.rows.windows(2).all(|w| {
        w[0].threshold < w[1].threshold && w[0].n_success >= w[1].n_success && w[0].n_failure >= w[1].n_failure
    }) && r.rows.iter().all(|row| row.precision.is_none_or(|p| (0.0..=1.0).contains(&p)))
}

fn criterion_8(runs: &[ScaleRun], dir: &Path) -> Outcome {
    let mut checks = Vec::new();
    for r in runs.iter().filter(|r| r.spf == SPF_HIGH) {
        let path = dir.join(format!("threshold_{}_{}.json", r.spf, r.seed));
        r.threshold.write_json(&path).unwrap();
        let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        let field = &json["minimal_safe_threshold"];
        let marked = match r.threshold.minimal_safe_threshold {
            Some(t) => field.as_f64() == Some(t),
            None => json.as_object().unwrap().contains_key("minimal_safe_threshold") && field.is_null(),
        };
        let t0 = &r.threshold.rows[0];
        let acc = r.records.iter().filter(|x| x.accepted).count();
        let raw_ok = t0.threshold == 0.0 && t0.n_success == acc && t0.n_failure == r.records.len() - acc;
        let safe_ok = r.threshold.minimal_safe_threshold.is_none_or(|t| {
            let row = r.threshold.rows.iter().find(|x| x.threshold == t).unwrap();
            row.precision == Some(1.0) && t < 1.0 + 1e-12
        });
        checks.push((
            marked && raw_ok && safe_ok && monotone(&r.threshold),
            format!(
                "seed {}: safe threshold {}, t=0 {}/{}",
                r.seed,
                r.threshold
                    .minimal_safe_threshold
                    .map_or("absent".to_string(), |t| format!("{t:.2}")),
                t0.n_success,
                t0.n_failure
            ),
        ));
    }
    outcome(8, "reliability report shape", checks)
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let (res, elapsed) = timed(|| {
        runner(EQUIV_CASES).run(
            &(any::<u64>(), 1usize..8, 1usize..10, any::<bool>()),
            |(seed, len, max_len, feed)| {
                let m = micro_model(seed, feed);
                let mut rng = ChaCha8Rng::seed_from_u64(!seed);
                let src = LogSequence::new((0..len).map(|_| TemplateId(rng.random_range(1..=6))).collect());
                let g = m.greedy_decode(&src, max_len).unwrap();
                let b = m.beam_decode(&src, 1, max_len).unwrap();
                prop_assert_eq!(b.len(), 1);
                prop_assert_eq!(&b[0], &g);
                Ok(())
            },
        )
    });
    outcome(
        5,
        "beam/greedy equivalence",
        vec![
            (
                res.is_ok(),
                match res {
                    Ok(()) => format!("{EQUIV_CASES} random instances identical"),
                    Err(e) => e.to_string(),
                },
            ),
            within(elapsed, EQUIV_BUDGET),
        ],
    )
}

// ---------------------------------------------------------------- 6

const X: usize = 4;
const Y: usize = 5;
const ORACLE_MAX_LEN: usize = 4;

/// Next-token distribution of the hand-wired bigram decoder.
fn bigram(prev: usize) -> [(usize, f64); 3] {
    match prev {
        BOS => [(EOS, 0.25), (X, 0.45), (Y, 0.30)],
        X => [(EOS, 0.96), (X, 0.015), (Y, 0.025)],
        Y => [(EOS, 0.94), (X, 0.04), (Y, 0.02)],
        _ => unreachable!(),
    }
}

/// The decoder state saturates to a one-hot copy of the previous token and
/// `w_out` holds `ln P(next | prev)` in that token's row.
fn bigram_model() -> Seq2SeqModel {
    let v = 6;
    let hyper = Hyperparams {
        embed_dim: v,
        hidden_dim: v,
        dropout: 0.0,
        ..Hyperparams::default()
    };
    let src = Vocab::new(["1"]);
    let tgt = Vocab::new(["x", "y"]);
    let mut p = ModelParams::zeros(src.len(), tgt.len(), &hyper);
    for i in 0..v {
        p.tgt_embed.row_mut(i)[i] = 1.0;
        p.decoder.w_ih.row_mut(i)[2 * v + i] = 5.0;
        p.w_c.row_mut(i)[i] = 10.0;
    }
    let bias = p.decoder.bias.data_mut();
    for u in 0..v {
        bias[u] = 50.0;
        bias[v + u] = -50.0;
        bias[3 * v + u] = 50.0;
    }
    for prev in [BOS, X, Y] {
        for (next, prob) in bigram(prev) {
            p.w_out.row_mut(prev)[next] = prob.ln();
        }
    }
    Seq2SeqModel {
        src_vocab: src,
        tgt_vocab: tgt,
        hyper,
        params: p,
    }
}

/// Every complete or length-capped output with its length-normalized score.
fn enumerate_outputs(prefix: Vec<usize>, lps: Vec<f64>, out: &mut Vec<(Vec<usize>, f64)>) {
    if prefix.len() == ORACLE_MAX_LEN {
        let mut ids = prefix;
        ids.push(EOS);
        out.push((ids, reliability(&lps).unwrap()));
        return;
    }
    for (next, prob) in bigram(prefix.last().copied().unwrap_or(BOS)) {
        let mut ids = prefix.clone();
        let mut l = lps.clone();
        ids.push(next);
        l.push(prob.ln());
        if next == EOS {
            out.push((ids, reliability(&l).unwrap()));
        } else {
            enumerate_outputs(ids, l, out);
        }
    }
}

fn criterion_6() -> Outcome {
    let (checks, elapsed) = timed(|| {
        let m = bigram_model();
        let mut all = Vec::new();
        enumerate_outputs(vec![], vec![], &mut all);
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let src = LogSequence::from_raw(&[1, 1, 1]);
        let mut checks = vec![(all.len() == 1 + 2 + 4 + 8 + 16, format!("{} outputs enumerated", all.len()))];
        for k in 1..=4 {
            let hyps = m.beam_decode(&src, k, ORACLE_MAX_LEN).unwrap();
            let ok = hyps.len() == k
                && hyps.iter().zip(&all).all(|(h, (ids, score))| {
                    h.tokens == m.tgt_vocab.decode(ids) && (h.reliability - score).abs() <= ORACLE_REL_TOL * score
                });
            checks.push((ok, format!("k={k}")));
        }
        checks
    });
    let mut checks = checks;
    checks.push(within(elapsed, ORACLE_BUDGET));
    outcome(6, "beam optimality oracle", checks)
}

// ---------------------------------------------------------------- 7

struct Consistency {
    corpus: Corpus,
    /// Final state of each generated pair's replay.
    finals: Vec<u32>,
    typos: Vec<String>,
    typo_hits: usize,
    reports: Vec<ThresholdReport>,
}

fn consistency_run() -> Consistency {
    let params = GenParams {
        samples_per_failure: CONSISTENCY_PAIRS / 50,
        test_per_failure: 0,
        seed: 21,
        ..GenParams::default()
    };
    let corpus = gen_corpus(&params).unwrap();
    let automata = build_group_automata();
    let pairs: Vec<&SamplePair> = corpus.train.iter().chain(&corpus.dev).collect();
    let finals: Vec<u32> = pairs
        .par_iter()
        .map(|p| {
            let aut = automata.iter().find(|a| a.group == p.group).unwrap();
            simulate(aut, &p.component(), &parse_command_lines(&p.target).unwrap()).final_state
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let comps: Vec<String> = log2cmd::synth_corpus::components().collect();
    let correct: Vec<HashSet<_>> = automata.iter().map(|a| a.correct_set_any_component()).collect();
    let mut typos = Vec::with_capacity(CONSISTENCY_TYPOS);
    let mut typo_hits = 0;
    for i in 0..CONSISTENCY_TYPOS {
        let ai = i % automata.len();
        let comp = &comps[rng.random_range(0..comps.len())];
        let lines = automata[ai].correct_commands(comp);
        let line = &lines[rng.random_range(0..lines.len())].1;
        let typo = mutate_typo(line, &automata[ai], &mut rng).unwrap();
        typo_hits += usize::from(correct[ai].contains(&typo));
        typos.push(typo.words().join(" "));
    }

    // Reports over synthetic score/outcome sets, including ties and the
    // grid edges.
    let reports = (0..50)
        .map(|_| {
            let n = rng.random_range(1..300);
            let recs: Vec<(f64, bool)> = (0..n)
                .map(|_| {
                    let r = match rng.random_range(0..4) {
                        0 => 0.0,
                        1 => 1.0,
                        2 => rng.random_range(0..=100) as f64 / 100.0,
                        _ => rng.random::<f64>(),
                    };
                    (r, rng.random_bool(0.7))
                })
                .collect();
            threshold_report(&recs, GRID_STEPS).unwrap()
        })
        .collect();
    Consistency {
        corpus,
        finals,
        typos,
        typo_hits,
        reports,
    }
}

fn criterion_7(c: &Consistency, extra: &[&ThresholdReport], elapsed: Duration) -> Outcome {
    let n = c.finals.len();
    let accepted = c.finals.iter().filter(|s| **s == STATE_RECOVERED).count();
    let reports: Vec<&ThresholdReport> = c.reports.iter().chain(extra.iter().copied()).collect();
    let mono = reports.iter().filter(|r| monotone(r)).count();
    outcome(
        7,
        "automaton consistency",
        vec![
            (
                n == CONSISTENCY_PAIRS && accepted == n,
                format!("{accepted}/{n} generated pairs accepted"),
            ),
            (
                c.typos.len() == CONSISTENCY_TYPOS && c.typo_hits == 0,
                format!("{} of {} typos match a correct command", c.typo_hits, c.typos.len()),
            ),
            (
                mono == reports.len(),
                format!("{mono}/{} threshold reports monotone", reports.len()),
            ),
            within(elapsed, CONSISTENCY_BUDGET),
        ],
    )
}

// ---------------------------------------------------------------- 9

/// Training log without the wall-clock column.
fn log_bytes(r: &TrainReport, dir: &Path, name: &str) -> Vec<u8> {
    let path = dir.join(name);
    r.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    text.lines()
        .map(|l| l.rsplit_once(',').unwrap().0)
        .collect::<Vec<_>>()
        .join("\n")
        .into_bytes()
}

fn corpus_bytes(c: &Corpus, dir: &Path) -> Vec<(String, Vec<u8>)> {
    c.write_dir(dir).unwrap();
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn memo_results_bytes(run: &MemoRun, pairs: &[SamplePair], path: &Path) -> Vec<u8> {
    let automata = build_group_automata();
    let recs: Vec<SampleRecord> = run
        .greedy
        .iter()
        .zip(pairs)
        .enumerate()
        .map(|(index, (toks, p))| {
            let aut = automata.iter().find(|a| a.group == p.group).unwrap();
            let r = simulate(aut, &p.component(), &parse_command_lines(toks).unwrap());
            SampleRecord {
                index,
                group: p.group,
                failure: p.failure,
                component: p.component(),
                tokens: toks.clone(),
                reliability: 0.0,
                truncated: false,
                final_state: r.final_state,
                accepted: r.accepted,
                exact_match: *toks == p.target,
            }
        })
        .collect();
    write_records(path, &recs).unwrap();
    std::fs::read(path).unwrap()
}

fn consistency_results_bytes(c: &Consistency) -> Vec<u8> {
    let mut s = String::new();
    for f in &c.finals {
        s.push_str(&format!("{f}\n"));
    }
    for t in &c.typos {
        s.push_str(t);
        s.push('\n');
    }
    s.into_bytes()
}

fn criterion_9(
    pairs: &[SamplePair],
    memo: (&MemoRun, &MemoRun),
    cons: (&Consistency, &Consistency),
    dir: &Path,
) -> Outcome {
    let toy_a = corpus_bytes(&toy_corpus(), &dir.join("toy_a"));
    let toy_b = corpus_bytes(&toy_corpus(), &dir.join("toy_b"));
    let big_a = corpus_bytes(&cons.0.corpus, &dir.join("big_a"));
    let big_b = corpus_bytes(&cons.1.corpus, &dir.join("big_b"));
    let log_a = log_bytes(&memo.0.report, dir, "log_a.csv");
    let log_b = log_bytes(&memo.1.report, dir, "log_b.csv");
    let res_a = memo_results_bytes(memo.0, pairs, &dir.join("res_a.jsonl"));
    let res_b = memo_results_bytes(memo.1, pairs, &dir.join("res_b.jsonl"));
    outcome(
        9,
        "reproducibility",
        vec![
            (toy_a == toy_b && big_a == big_b, "corpora identical".into()),
            (log_a == log_b, format!("training logs identical ({} epochs)", memo.0.report.epochs.len())),
            (
                res_a == res_b && consistency_results_bytes(cons.0) == consistency_results_bytes(cons.1),
                "per-sample results identical".into(),
            ),
        ],
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut outcomes = Vec::new();

    eprintln!("criterion 1");
    outcomes.push(criterion_1());

    eprintln!("criterion 2");
    let pairs = toy_pairs();
    let (memo, memo_time) = timed(|| memorize(&pairs));
    outcomes.push(criterion_2(&pairs, &memo, memo_time));

    eprintln!("criteria 5, 6");
    outcomes.push(criterion_5());
    outcomes.push(criterion_6());

    eprintln!("criterion 7");
    let (cons, cons_time) = timed(consistency_run);

    eprintln!("criteria 3, 4, 8: {} training runs", 2 * SEEDS.len());
    let jobs: Vec<(usize, u64)> = [SPF_HIGH, SPF_LOW]
        .iter()
        .flat_map(|&spf| SEEDS.iter().map(move |&s| (spf, s)))
        .collect();
    let (runs, scale_time) = timed(|| jobs.par_iter().map(|&(spf, seed)| scale_run(spf, seed)).collect::<Vec<_>>());
    let (c3, c4) = criteria_3_4(&runs, scale_time, dir.path());
    outcomes.push(c3);
    outcomes.push(c4);
    outcomes.push(criterion_8(&runs, dir.path()));
    let extra: Vec<&ThresholdReport> = runs.iter().map(|r| &r.threshold).collect();
    outcomes.push(criterion_7(&cons, &extra, cons_time));

    eprintln!("criterion 9");
    let memo2 = memorize(&pairs);
    let cons2 = consistency_run();
    outcomes.push(criterion_9(&pairs, (&memo, &memo2), (&cons, &cons2), dir.path()));

    outcomes.sort_by_key(|o| o.id);
    let mut failed = 0;
    for o in &outcomes {
        println!(
            "{} {}. {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
