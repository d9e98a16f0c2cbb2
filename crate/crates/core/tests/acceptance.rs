//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 7–9 share one full-size experiment (pretraining, weak and strong
//! hypothesis sets, five one-epoch fusion runs) and take the bulk of the
//! runtime. Set `WL_ACCEPTANCE_FAST=1` to skip them.

use std::collections::HashMap;
use std::path::Path as FsPath;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use whisperfuse::ablation::Ablation;
use whisperfuse::config::{ModelConfig, Variant};
use whisperfuse::exec::Exec;
use whisperfuse::fusion::Path;
use whisperfuse::hypotheses::HypothesisRecord;
use whisperfuse::init_bridge::{AdapterInit, CrossAttentionSource};
use whisperfuse::io::checkpoint::{acoustic_bytes, decode, lm_bytes, lm_from_container};
use whisperfuse::io::manifest::manifest_text;
use whisperfuse::lm::{line_positions, ToyLm};
use whisperfuse::metrics::{wer, werr, EvalReport};
use whisperfuse::numerics::Tensor;
use whisperfuse::params::{ParamSet, Phase};
use whisperfuse::pipeline::{fusion_model, run, ExperimentConfig, HypothesisSets, RunResult, Splits};
use whisperfuse::pretrain::PretrainConfig;
use whisperfuse::prompt::PromptSample;
use whisperfuse::tokenizer::CharTokenizer;
use whisperfuse::train::{evaluate, prepare_examples, train_with, TrainConfig, TrainOutcome};

// Pinned tolerances.
const ZERO_GATE_TOL: f64 = 1e-6;
const ZERO_GATE_SECS: f64 = 10.0;
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_SECS: f64 = 30.0;
const WERR_TOL: f64 = 0.1;
const FULL_SCALE_COUNT: usize = 7_864_384;
const REFERENCE_COUNT: f64 = 7.97e6;
const COUNT_TOL: f64 = 0.10;
/// Test WER of the fused model must be at least this far below the weak
/// 1-best WER (points).
const LEARNING_MARGIN: f64 = 8.0;
const LEARNING_SECS: f64 = 15.0 * 60.0;
const STRONG_WERR_SLACK: f64 = 2.0;
/// Steps averaged for "final training loss".
const LOSS_TAIL: usize = 20;
const FROZEN_CHECK_STEP: usize = 50;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: Option<bool>,
    detail: String,
}

fn outcome(id: u32, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, name, pass: Some(pass), detail }
}

fn skipped(id: u32, name: &'static str) -> Outcome {
    Outcome { id, name, pass: None, detail: "skipped (WL_ACCEPTANCE_FAST)".into() }
}

struct Source(Vec<(Tensor, Tensor)>);

impl CrossAttentionSource for Source {
    fn cross_kv(&self) -> Vec<(&Tensor, &Tensor)> {
        self.0.iter().map(|(k, v)| (k, v)).collect()
    }
}

fn random_source(config: &ModelConfig, rng: &mut impl Rng) -> Source {
    let w = config.audio_width;
    Source((0..config.audio_layers).map(|_| (Tensor::randn(&[w, w], 0.3, rng), Tensor::randn(&[w, w], 0.3, rng))).collect())
}

fn zero_gate_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let config = ModelConfig::default();
    let mut lm = ToyLm::new(&config, &mut rng).unwrap();
    lm.attach_acoustic(&random_source(&config, &mut rng), AdapterInit::Bridge, &mut rng).unwrap();
    // non-trivial adapters; only the gates stay at zero
    lm.visit_params_mut(&mut |name, p| {
        if name.contains(".adapter_") {
            let shape = p.value().shape().to_vec();
            p.set(Tensor::randn(&shape, 0.5, &mut rng));
        }
    });
    let newline = CharTokenizer::lm().newline().unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.gen_range(4..60);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..config.vocab_size)).collect();
        let pos = line_positions(&ids, newline, config.max_positions);
        let h = Tensor::randn(&[1, config.audio_len, config.audio_width], 1.0, &mut rng);
        let base = lm.logits(&ids, &pos, None, Path::Base).unwrap();
        let fused = lm.logits(&ids, &pos, Some(&h), Path::Fused).unwrap();
        worst = worst.max(base.max_abs_diff(&fused));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        1,
        "zero-gate identity",
        worst < ZERO_GATE_TOL && secs < ZERO_GATE_SECS,
        format!("max |diff| {worst:.2e} over 100 prompts in {secs:.1}s"),
    )
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        lm_width: 8,
        lm_heads: 2,
        lm_head_size: 4,
        lm_layers: 1,
        ffn_hidden: 16,
        vocab_size: 12,
        max_positions: 16,
        audio_width: 4,
        audio_heads: 1,
        audio_head_size: 4,
        audio_layers: 1,
        audio_len: 3,
        prefix_len: 2,
        reduction: 2,
        shared_kv_adapter: false,
        acoustic_branch: true,
    }
}

fn param_class(name: &str) -> Option<&'static str> {
    [(".prefix", "prefix"), (".down", "adapter down"), (".up", "adapter up"), (".gates.lm", "gate lm"), (".gates.audio", "gate audio")]
        .into_iter()
        .find(|(suffix, _)| name.ends_with(suffix))
        .map(|(_, c)| c)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let config = micro_config();
    let mut lm = ToyLm::new(&config, &mut rng).unwrap();
    lm.attach_acoustic(&random_source(&config, &mut rng), AdapterInit::Bridge, &mut rng).unwrap();
    lm.visit_params_mut(&mut |name, p| {
        if name.contains(".adapter_") || name.contains(".gates.") {
            let shape = p.value().shape().to_vec();
            p.set(Tensor::randn(&shape, 0.5, &mut rng));
        }
    });
    lm.set_phase(Phase::Adapt);
    let token_ids: Vec<usize> = (0..9).map(|_| rng.gen_range(0..config.vocab_size)).collect();
    let loss_mask = (1..token_ids.len()).map(|i| if i >= 4 { 1.0 } else { 0.0 }).collect();
    let sample = PromptSample { token_ids, response_span: (4, 8), loss_mask };
    let h = Tensor::randn(&[1, config.audio_len, config.audio_width], 1.0, &mut rng);
    let (_, grads) = lm.loss_and_grads(&sample, Some(&h), Path::Fused).unwrap();

    let mut names = Vec::new();
    lm.visit_params(&mut |name, p| {
        if p.trainable {
            names.push(name);
        }
    });
    let mut worst: HashMap<&'static str, f64> = HashMap::new();
    for (name, analytic) in names.iter().zip(&grads.grads) {
        let class = param_class(name).unwrap_or("other");
        let mut numeric = Tensor::zeros(analytic.shape());
        for i in 0..analytic.len() {
            let eval = |delta: f64| {
                let mut probe = lm.clone();
                probe.visit_params_mut(&mut |n, p| {
                    if &n == name {
                        p.value_mut().data_mut()[i] += delta;
                    }
                });
                probe.loss_and_grads(&sample, Some(&h), Path::Fused).unwrap().0
            };
            numeric.data_mut()[i] = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        }
        let scale = analytic.data().iter().chain(numeric.data()).fold(1e-8_f64, |m, v| m.max(v.abs()));
        let rel = analytic.max_abs_diff(&numeric) / scale;
        let e = worst.entry(class).or_insert(0.0);
        *e = e.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    let classes = ["prefix", "adapter down", "adapter up", "gate lm", "gate audio"];
    let all_present = classes.iter().all(|c| worst.contains_key(c)) && !worst.contains_key("other");
    let pass = all_present && worst.values().all(|&e| e < FD_TOL) && secs < FD_SECS;
    let detail = classes.iter().map(|c| format!("{c} {:.1e}", worst.get(c).copied().unwrap_or(f64::NAN))).collect::<Vec<_>>().join(", ");
    outcome(2, "gradient suite", pass, format!("max rel err: {detail}; {secs:.1}s"))
}

/// Every edit script, enumerated by recursion over the first operation.
fn brute_edits(r: &[usize], h: &[usize]) -> usize {
    match (r, h) {
        ([], _) => h.len(),
        (_, []) => r.len(),
        ([a, rr @ ..], [b, hr @ ..]) => {
            let sub = brute_edits(rr, hr) + usize::from(a != b);
            let del = brute_edits(rr, h) + 1;
            let ins = brute_edits(r, hr) + 1;
            sub.min(del).min(ins)
        }
    }
}

fn wer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let words = ["a", "b", "c", "d"];
    let mut mismatches = 0;
    for _ in 0..200 {
        let r: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..words.len())).collect();
        let h: Vec<usize> = (0..rng.gen_range(0..=5)).map(|_| rng.gen_range(0..words.len())).collect();
        let text = |s: &[usize]| s.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ");
        let expected = brute_edits(&r, &h) as f64 / r.len() as f64;
        if wer(&text(&r), &text(&h)).unwrap() != expected {
            mismatches += 1;
        }
    }
    outcome(4, "wer oracle equivalence", mismatches == 0, format!("{mismatches} mismatches over 200 pairs"))
}

fn werr_arithmetic() -> Outcome {
    let rows = [(2, 15.03, 30.52), (3, 13.48, 37.66), (4, 14.144, 34.62), (8, 15.39, 28.83), (9, 14.45, 33.21)];
    let worst = rows.iter().map(|&(_, w, expected)| (werr(21.64, w) - expected).abs()).fold(0.0, f64::max);
    let detail = rows.iter().map(|&(row, w, _)| format!("row {row} {:.2}", werr(21.64, w))).collect::<Vec<_>>().join(", ");
    outcome(5, "werr arithmetic", worst <= WERR_TOL, format!("{detail}; max deviation {worst:.3}"))
}

fn parameter_counts() -> Outcome {
    let full = ModelConfig::full_scale(Variant::Medium).trainable_param_count();
    let toy = ModelConfig::default();
    let closed = |c: &ModelConfig| {
        let a = if c.acoustic_branch {
            if c.shared_kv_adapter {
                1
            } else {
                2
            }
        } else {
            0
        };
        c.lm_layers * (c.prefix_len * c.lm_width + a * 2 * c.audio_width * (c.audio_width / c.reduction) + 2)
    };
    let mut toy_ok = true;
    for c in [
        toy.clone(),
        ModelConfig { acoustic_branch: false, ..toy.clone() },
        ModelConfig { shared_kv_adapter: false, ..toy.clone() },
        micro_config(),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut lm = ToyLm::new(&c, &mut rng).unwrap();
        lm.attach_acoustic(&random_source(&c, &mut rng), AdapterInit::Bridge, &mut rng).unwrap();
        lm.set_phase(Phase::Adapt);
        toy_ok &= lm.trainable_count() == closed(&c) && c.trainable_param_count() == closed(&c);
    }
    let rel = (full as f64 - REFERENCE_COUNT).abs() / REFERENCE_COUNT;
    let pass = full == FULL_SCALE_COUNT && rel <= COUNT_TOL && toy_ok && toy.trainable_param_count() == 3_592;
    outcome(
        6,
        "parameter counts",
        pass,
        format!(
            "full scale {full} ({:.1}% from 7.97M); toy {} ; toy models match formula: {toy_ok}",
            rel * 100.0,
            toy.trainable_param_count()
        ),
    )
}

/// Trainable and frozen tensors of `lm` as raw bits, frozen ones only.
fn frozen_bits(lm: &ToyLm) -> Vec<(String, Vec<u64>)> {
    let mut out = Vec::new();
    lm.visit_params(&mut |name, p| {
        if !p.trainable {
            out.push((name, p.value().data().iter().map(|v| v.to_bits()).collect()));
        }
    });
    if let Some(t) = &lm.template {
        out.push(("template".into(), t.tensor().data().iter().map(|v| v.to_bits()).collect()));
    }
    out
}

struct Standard {
    outcome: TrainOutcome,
    report: EvalReport,
    frozen_intact: Option<bool>,
    frozen_tensors: usize,
    seconds: f64,
    lm: ToyLm,
}

/// The unablated run, checking frozen tensors against a checkpoint of the
/// freshly assembled model along the way.
fn standard_run(base: &ToyLm, strong: &whisperfuse::acoustic::ToyAcoustic, sets: &HypothesisSets, config: &ExperimentConfig) -> Standard {
    let start = Instant::now();
    let exec = Exec::default();
    let train_cfg = TrainConfig { seed: config.seed, ..config.train.clone() };
    let mut lm = fusion_model(base, &config.model, strong, AdapterInit::Bridge, config.seed).unwrap();
    let checkpoint = lm_bytes(&lm);
    let mut reference = lm_from_container(FsPath::new("mem"), &decode(FsPath::new("mem"), &checkpoint).unwrap()).unwrap();
    reference.set_phase(Phase::Adapt);
    let expected = frozen_bits(&reference);
    let examples = |s: &whisperfuse::pipeline::Split| {
        prepare_examples(strong, &s.records, &s.features, train_cfg.features, config.seed, exec).unwrap()
    };
    let (tr, va, te) = (examples(&sets.train), examples(&sets.val), examples(&sets.test));
    let mut frozen_intact = None;
    let outcome = train_with(&mut lm, &tr, &va, &train_cfg, exec, &mut |m, point| {
        if point.step == FROZEN_CHECK_STEP {
            frozen_intact = Some(frozen_bits(m) == expected);
        }
    })
    .unwrap();
    let report = evaluate(&lm, &te, &train_cfg, "standard", exec).unwrap();
    Standard { outcome, report, frozen_intact, frozen_tensors: expected.len(), seconds: start.elapsed().as_secs_f64(), lm }
}

fn experiment_config() -> ExperimentConfig {
    ExperimentConfig {
        seed: 1,
        splits: Splits { train: 2000, val: 100, test: 200 },
        train: TrainConfig { learning_rate: 1e-2, epochs: 1, allow_override: true, ..TrainConfig::default() },
        ..ExperimentConfig::default()
    }
}

/// Runs criteria 3 and 7–9; returns whether the trained model's checkpoint
/// round-trips bit-exactly.
fn full_experiment(results: &mut Vec<Outcome>) -> bool {
    let exec = Exec::default();
    let config = experiment_config();
    let t = Instant::now();
    let pre = config.pretrain(exec).unwrap();
    eprintln!("pretraining: {:.0}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let weak_sets = HypothesisSets::generate(&pre.weak, &config, exec).unwrap();
    let strong_sets = HypothesisSets::generate(&pre.strong, &config, exec).unwrap();
    eprintln!("hypothesis generation: {:.0}s", t.elapsed().as_secs_f64());

    let std_run = standard_run(&pre.lm, &pre.strong, &weak_sets, &config);
    eprintln!("standard: {}  ({:.0}s)", std_run.report.table(), std_run.seconds);
    results.push(outcome(
        3,
        "frozen-weight integrity",
        std_run.frozen_intact == Some(true),
        format!("{} frozen tensors bit-identical after {FROZEN_CHECK_STEP} steps: {:?}", std_run.frozen_tensors, std_run.frozen_intact),
    ));

    let r = &std_run.report;
    let pass = r.wer_raw < r.one_best_wer - LEARNING_MARGIN && std_run.seconds < LEARNING_SECS;
    results.push(outcome(
        7,
        "end-to-end learning effect",
        pass,
        format!(
            "test wer {:.2} vs weak 1-best {:.2} (margin {LEARNING_MARGIN}); {} train utterances; {:.0}s",
            r.wer_raw, r.one_best_wer, config.splits.train, std_run.seconds
        ),
    ));

    let ablated = |a: Ablation| -> RunResult {
        let t = Instant::now();
        let res = run(a.name(), &pre.lm, &pre.strong, &weak_sets, &config, Some(a), exec).unwrap();
        eprintln!("{}  final loss {:.4}  ({:.0}s)", res.report.table(), res.outcome.final_loss(LOSS_TAIL), t.elapsed().as_secs_f64());
        res
    };
    let std_loss = std_run.outcome.final_loss(LOSS_TAIL);
    let rf = ablated(Ablation::RandomFeatures);
    let ni = ablated(Ablation::NoInit);
    let nm = ablated(Ablation::NoMasking);
    let (rf_loss, ni_loss) = (rf.outcome.final_loss(LOSS_TAIL), ni.outcome.final_loss(LOSS_TAIL));
    results.push(outcome(
        8,
        "ablation directions",
        rf_loss > std_loss && ni_loss > std_loss && nm.report.wer_raw > r.wer_raw,
        format!(
            "final loss standard {std_loss:.4} < random-features {rf_loss:.4}: {}, < no-init {ni_loss:.4}: {}; test wer masked {:.2} < no-masking {:.2}: {}",
            rf_loss > std_loss,
            ni_loss > std_loss,
            r.wer_raw,
            nm.report.wer_raw,
            nm.report.wer_raw > r.wer_raw
        ),
    ));

    let t = Instant::now();
    let strong = run("strong-lists", &pre.lm, &pre.strong, &strong_sets, &config, None, exec).unwrap();
    eprintln!("{}  ({:.0}s)", strong.report.table(), t.elapsed().as_secs_f64());
    let s = &strong.report;
    results.push(outcome(
        9,
        "strong-hypothesis comparison",
        s.werr >= r.werr - STRONG_WERR_SLACK && s.oracle_wer < r.oracle_wer,
        format!(
            "werr strong {:.2} vs weak {:.2} (slack {STRONG_WERR_SLACK}); oracle strong {:.2} < weak {:.2}",
            s.werr, r.werr, s.oracle_wer, r.oracle_wer
        ),
    ));

    let bytes = lm_bytes(&std_run.lm);
    let back = lm_from_container(FsPath::new("mem"), &decode(FsPath::new("mem"), &bytes).unwrap()).unwrap();
    lm_bytes(&back) == bytes
}

/// Everything one seed produces on a small configuration.
struct Artifacts {
    checkpoints: Vec<Vec<u8>>,
    manifests: Vec<String>,
    metrics: String,
    adapter: Vec<u8>,
}

fn small_pipeline(seed: u64) -> Artifacts {
    let exec = Exec::default();
    let config = ExperimentConfig {
        seed,
        splits: Splits { train: 24, val: 6, test: 10 },
        pretrain: PretrainConfig {
            acoustic_utterances: 48,
            acoustic_batch: 8,
            weak_steps: 10,
            strong_steps: 10,
            lm_texts: 24,
            lm_demos: 24,
            lm_batch: 8,
            lm_steps: 10,
            ..PretrainConfig::default()
        },
        train: TrainConfig { learning_rate: 1e-2, epochs: 2, batch_size: 8, allow_override: true, ..TrainConfig::default() },
        ..ExperimentConfig::default()
    };
    let pre = config.pretrain(exec).unwrap();
    let sets = HypothesisSets::generate(&pre.weak, &config, exec).unwrap();
    let manifests = [&sets.train, &sets.val, &sets.test].iter().map(|s| manifest_text(&s.records).unwrap()).collect();
    let res = run("determinism", &pre.lm, &pre.strong, &sets, &config, None, exec).unwrap();
    Artifacts {
        checkpoints: vec![lm_bytes(&pre.lm), acoustic_bytes(&pre.weak), acoustic_bytes(&pre.strong)],
        manifests,
        metrics: serde_json::to_string(&(&res.report, &res.outcome)).unwrap(),
        adapter: lm_bytes(&res.lm),
    }
}

fn determinism(round_trip: Option<bool>) -> Outcome {
    let (a, b) = (small_pipeline(5), small_pipeline(5));
    let c = small_pipeline(6);
    let same = a.checkpoints == b.checkpoints && a.manifests == b.manifests && a.metrics == b.metrics && a.adapter == b.adapter;
    let differs = a.manifests != c.manifests;
    let records: Vec<HypothesisRecord> = whisperfuse::io::manifest::parse_manifest(FsPath::new("mem"), &a.manifests[2]).unwrap();
    let container = decode(FsPath::new("mem"), &a.adapter).unwrap();
    let small_trip = lm_bytes(&lm_from_container(FsPath::new("mem"), &container).unwrap()) == a.adapter;
    let trip = small_trip && round_trip.unwrap_or(true);
    outcome(
        10,
        "determinism and round-trips",
        same && differs && trip && !records.is_empty(),
        format!(
            "repeat identical: {same}; other seed differs: {differs}; checkpoint round-trip bit-exact: {trip}{}",
            if round_trip.is_none() { " (small model only)" } else { "" }
        ),
    )
}

fn main() -> ExitCode {
    let fast = std::env::var_os("WL_ACCEPTANCE_FAST").is_some();
    let mut results = vec![zero_gate_identity(), gradient_suite(), wer_oracle(), werr_arithmetic(), parameter_counts()];
    let round_trip = if fast {
        results.extend([
            skipped(3, "frozen-weight integrity"),
            skipped(7, "end-to-end learning effect"),
            skipped(8, "ablation directions"),
            skipped(9, "strong-hypothesis comparison"),
        ]);
        None
    } else {
        Some(full_experiment(&mut results))
    };
    results.push(determinism(round_trip));
    results.sort_by_key(|o| o.id);
    let mut failed = 0;
    for o in &results {
        let tag = match o.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("criterion {:>2} {tag} {}: {}", o.id, o.name, o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
