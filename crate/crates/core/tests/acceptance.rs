//! End-to-end acceptance run. Prints one `criterion N: PASS|FAIL` line per
//! criterion to stderr (uncaptured) and fails if any criterion fails.
//!
//! The training criteria dominate the runtime: three C=64/N=3 models on a
//! 2000-sample irregular corpus.

use std::io::Write;
use std::time::{Duration, Instant};

use cmfn_core::codec::{decode_greedy, decode_indices, encode_label, SYMBOLS};
use cmfn_core::config::LrSchedule;
use cmfn_core::datagen::{generate_samples, write_dataset, DatasetReader};
use cmfn_core::gradcheck::check_model;
use cmfn_core::invariants::{blackout_case, normalization_case, random_image, random_model};
use cmfn_core::params::ParamStore;
use cmfn_core::position::{sinusoid_1d, sinusoid_2d, PositionEncoder, SeBlock};
use cmfn_core::train::evaluate;
use cmfn_core::{Accuracy, Checkpoint, DistortionSpec, GenerateSpec, ModelConfig, RefineOptions, Sample, Trainer};
use cmfn_tensor::suite::kernel_suite;
use cmfn_tensor::{Tape, Tensor, LAYER_NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN_SEED: u64 = 11;
const TEST_SEED: u64 = 12;
const SMOKE_SEED: u64 = 13;
const TRAIN_SAMPLES: usize = 2000;
const TEST_SAMPLES: usize = 1000;
const MODEL_SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 12;
const DECAY_AFTER: usize = 10;

struct Board {
    failed: Vec<usize>,
}

impl Board {
    fn record(&mut self, n: usize, pass: bool, detail: String) {
        let status = if pass { "PASS" } else { "FAIL" };
        let _ = writeln!(std::io::stderr(), "criterion {n}: {status} {detail}");
        if !pass {
            self.failed.push(n);
        }
    }
}

fn note(line: String) {
    let _ = writeln!(std::io::stderr(), "  {line}");
}

fn gradient_oracle(board: &mut Board) {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checked = 0;
    for seed in 0..3 {
        for op in kernel_suite(seed, None).unwrap() {
            checked += 1;
            if op.report.max_rel_error > worst.0 {
                worst = (op.report.max_rel_error, op.op.to_string());
            }
        }
    }
    let model = check_model(0, None).unwrap();
    let elapsed = start.elapsed();
    let pass = worst.0 < 1e-4 && model.report.max_rel_error < 1e-4 && elapsed < Duration::from_secs(120);
    board.record(
        1,
        pass,
        format!(
            "kernel checks={checked} worst={:.2e} ({}) model={:.2e} params={} time={:.1}s",
            worst.0,
            worst.1,
            model.report.max_rel_error,
            model.report.checked,
            elapsed.as_secs_f64()
        ),
    );
}

fn mask_blackout(board: &mut Board) {
    let cases: Vec<_> = (0..200).map(|s| blackout_case(s).unwrap()).collect();
    let own = cases.iter().map(|c| c.own_row_change).fold(0.0, f64::max);
    let live = cases.iter().filter(|c| c.other_rows_change > 0.0).count();
    board.record(
        2,
        own <= 1e-12 && live == cases.len(),
        format!("models={} max_own_row_change={own:.1e} other_rows_moved={live}", cases.len()),
    );
}

fn attention_normalization(board: &mut Board) {
    let cases: Vec<_> = (0..1000).map(|s| normalization_case(1_000_000 + s).unwrap()).collect();
    let max = |f: fn(&cmfn_core::invariants::NormalizationCase) -> f64| cases.iter().map(f).fold(f64::MIN, f64::max);
    let spatial = max(|c| c.spatial_row_error);
    let language = max(|c| c.language_row_error);
    let hull = max(|c| c.hull_excess);
    let gate_min = cases.iter().map(|c| c.gate_min).fold(f64::INFINITY, f64::min);
    let gate_max = max(|c| c.gate_max);
    let pass = spatial <= 1e-9 && language <= 1e-9 && gate_min > 0.0 && gate_max < 1.0 && hull <= 1e-12;
    board.record(
        3,
        pass,
        format!(
            "cases={} at_m_row_err={spatial:.1e} lang_row_err={language:.1e} gate=({gate_min:.2e},{:.2e}) hull_excess={hull:.1e}",
            cases.len(),
            1.0 - gate_max
        ),
    );
}

fn position_encoder(board: &mut Board) {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut problems = Vec::new();

    let mut ln_err: f64 = 0.0;
    for seed in 0..5u64 {
        let mut store = ParamStore::new();
        let enc = PositionEncoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
        }
        store.get_mut(enc.norm_gain).data_mut().fill(1.0);
        store.get_mut(enc.norm_bias).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let out = enc.forward(&mut tape, &bound).unwrap();
        let p_se = tape.value(out.p_se);
        if p_se.shape() != [cfg.max_len, cfg.channels] {
            problems.push(format!("P_se shape {:?}", p_se.shape()));
        }
        let pre = tape.value(out.pre_norm.unwrap());
        for r in 0..cfg.max_len {
            let (mean, var) = mean_var(p_se.row(r));
            let (_, sigma2) = mean_var(pre.row(r));
            ln_err = ln_err.max(mean.abs()).max((var - sigma2 / (sigma2 + LAYER_NORM_EPS)).abs());
        }
    }
    if ln_err >= 1e-6 {
        problems.push(format!("layer-norm error {ln_err:.1e}"));
    }

    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, "se", cfg.channels, cfg.se_reduction, &mut rng);
    store.get_mut(se.excite).data_mut().fill(0.0);
    let p = Tensor::from_fn([cfg.max_len, cfg.channels], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let pv = tape.constant(p.clone());
    let out = se.forward(&mut tape, &bound, pv).unwrap();
    let exact = tape.value(out).data().iter().zip(p.data()).all(|(o, x)| *o == 1.5 * x);
    if !exact {
        problems.push("zero-weight SE block is not exactly 1.5x".into());
    }

    let distinct = |t: &Tensor| {
        let mut rows: Vec<Vec<u64>> = (0..t.rows()).map(|r| t.row(r).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        rows.windows(2).all(|w| w[0] != w[1])
    };
    let table = sinusoid_1d(26, cfg.channels).unwrap();
    let grid = sinusoid_2d(8, 32, cfg.channels).unwrap();
    if !distinct(&table) || !distinct(&grid) {
        problems.push("repeated sinusoid rows".into());
    }
    board.record(
        4,
        problems.is_empty(),
        format!(
            "p_se={}x{} ln_err={ln_err:.1e} se_zero_weight_exact={exact} rows_distinct=26+256 {}",
            cfg.max_len,
            cfg.channels,
            problems.join("; ")
        ),
    );
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    (mean, row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

fn toy_config(seed: u64) -> ModelConfig {
    ModelConfig {
        lr: 1e-3,
        batch_size: 8,
        lr_schedule: LrSchedule::StepDecay,
        decay_after: DECAY_AFTER,
        epochs: EPOCHS,
        seed,
        ..ModelConfig::default()
    }
}

fn corpus(count: usize, seed: u64) -> Vec<Sample> {
    generate_samples(&GenerateSpec::new(count, DistortionSpec::irregular(), seed)).unwrap()
}

struct ToyRun {
    seed: u64,
    losses: Vec<f64>,
    elapsed: Duration,
    plain: Accuracy,
    no_cues: Accuracy,
}

fn toy_run(train: &[Sample], test: &[Sample], seed: u64) -> ToyRun {
    let cfg = toy_config(seed);
    let mut trainer = Trainer::new(&cfg).unwrap();
    let start = Instant::now();
    let mut losses = Vec::new();
    while trainer.epochs_done() < cfg.epochs {
        losses.push(trainer.train_epoch(train).unwrap());
    }
    let elapsed = start.elapsed();
    let plain = evaluate(&trainer.model, test, RefineOptions::default()).unwrap();
    let no_cues = evaluate(&trainer.model, test, RefineOptions { drop_visual_cues: true }).unwrap();
    note(format!(
        "seed={seed} epochs={} final_loss={:.4} train_time={:.0}s test: TV={:.3} TL={:.3} TF={:.3} TF_no_cues={:.3} TF_by_iteration={:?}",
        losses.len(),
        losses.last().unwrap(),
        elapsed.as_secs_f64(),
        plain.visual,
        plain.language,
        plain.fused,
        no_cues.fused,
        plain.fused_per_iteration
    ));
    ToyRun {
        seed,
        losses,
        elapsed,
        plain,
        no_cues,
    }
}

fn toy_training(board: &mut Board) -> Vec<ToyRun> {
    let smoke = corpus(200, SMOKE_SEED);
    let mut trainer = Trainer::new(&ModelConfig { epochs: 3, ..toy_config(0) }).unwrap();
    let smoke_losses: Vec<f64> = (0..3).map(|_| trainer.train_epoch(&smoke).unwrap()).collect();
    let smoke_ok = smoke_losses.windows(2).all(|w| w[1] < w[0]);

    let train = corpus(TRAIN_SAMPLES, TRAIN_SEED);
    let test = corpus(TEST_SAMPLES, TEST_SEED);
    let runs: Vec<ToyRun> = MODEL_SEEDS.iter().map(|&s| toy_run(&train, &test, s)).collect();
    let first = &runs[0];
    let pass = smoke_ok
        && first.plain.fused >= 0.90
        && first.losses.len() <= 30
        && first.elapsed < Duration::from_secs(60 * 60);
    board.record(
        5,
        pass,
        format!(
            "seed={} TF={:.3} on {} held-out after {} epochs in {:.1} min; smoke losses={:.4?}",
            first.seed,
            first.plain.fused,
            test.len(),
            first.losses.len(),
            first.elapsed.as_secs_f64() / 60.0,
            smoke_losses
        ),
    );
    runs
}

fn ablation_ordering(board: &mut Board, runs: &[ToyRun]) {
    let fusion: Vec<f64> = runs.iter().map(|r| r.plain.fused - r.plain.visual).collect();
    let cues: Vec<f64> = runs.iter().map(|r| r.plain.fused - r.no_cues.fused).collect();
    let pass = fusion.iter().chain(&cues).all(|m| *m >= 0.0);
    board.record(
        6,
        pass,
        format!("seeds={} TF-TV margins={fusion:+.3?} cues-no_cues margins={cues:+.3?}", runs.len()),
    );
}

fn iteration_sweep(board: &mut Board, runs: &[ToyRun]) {
    let mut pass = true;
    let mut curves = Vec::new();
    for r in runs {
        let acc = &r.plain.fused_per_iteration;
        pass &= acc.len() == 3 && acc.windows(2).all(|w| w[1] >= w[0] - 0.01);
        curves.push(format!("{:.3?}", acc));
    }
    board.record(7, pass, format!("fused accuracy at N=1,2,3 per seed: {}", curves.join(" ")));
}

fn round_trips(board: &mut Board) {
    let model = random_model(5, 0.3).unwrap();
    let mut bytes = Vec::new();
    Checkpoint::from_model(&model, None).write_to(&mut bytes).unwrap();
    let (loaded, _) = Checkpoint::read_from(bytes.as_slice()).unwrap().into_model().unwrap();
    let image = random_image(model.config(), 6);
    let outputs = |m: &cmfn_core::Cmfn| {
        let mut tape = Tape::new();
        let bound = m.store.bind(&mut tape, false);
        let pass = m.forward(&mut tape, &bound, &image, RefineOptions::default()).unwrap();
        let mut vars = vec![pass.vision.visual_logits, pass.vision.at_m];
        vars.extend(pass.iterations.iter().flat_map(|it| [it.language_logits, it.fused_logits]));
        vars.iter().flat_map(|&v| tape.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let checkpoint_ok = outputs(&model) == outputs(&loaded);

    let samples = corpus(50, 21);
    let mut file = Vec::new();
    write_dataset(&mut file, 32, 128, samples.iter()).unwrap();
    let back: Vec<Sample> = DatasetReader::new(file.as_slice()).unwrap().collect::<Result<_, _>>().unwrap();
    let mut again = Vec::new();
    write_dataset(&mut again, 32, 128, back.iter()).unwrap();
    let dataset_ok = back == samples && again == file;

    let symbols: Vec<char> = SYMBOLS.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut codec_ok = 0;
    for _ in 0..1000 {
        let len = rng.random_range(0..26);
        let text: String = (0..len).map(|_| symbols[rng.random_range(0..symbols.len())]).collect();
        let label = encode_label(&text, 26).unwrap();
        if decode_indices(label.indices()) == text && decode_greedy(&label.one_hot()) == text {
            codec_ok += 1;
        }
    }
    board.record(
        8,
        checkpoint_ok && dataset_ok && codec_ok == 1000,
        format!(
            "checkpoint_bitwise={checkpoint_ok} checkpoint_bytes={} dataset_bitwise={dataset_ok} codec_identity={codec_ok}/1000",
            bytes.len()
        ),
    );
}

#[test]
fn acceptance() {
    let mut board = Board { failed: Vec::new() };
    gradient_oracle(&mut board);
    mask_blackout(&mut board);
    attention_normalization(&mut board);
    position_encoder(&mut board);
    let runs = toy_training(&mut board);
    ablation_ordering(&mut board, &runs);
    iteration_sweep(&mut board, &runs);
    round_trips(&mut board);
    assert!(board.failed.is_empty(), "failed criteria: {:?}", board.failed);
}
