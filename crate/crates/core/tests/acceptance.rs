//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. The desk-scale training criterion trains three
//! full cascades and dominates the runtime.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msunet::architecture::{build_cascade, build_stage, CascadeModel, stage_forward_cifs, stage_forward_plain, FusionMode, UNetConfig};
use msunet::checks::full_suite;
use msunet::cli::run_ablation;
use msunet::data::checkpoint::{decode_checkpoint, encode_checkpoint};
use msunet::data::{generate_synthetic, save_dataset, SamplePair, Size, SynthParams};
use msunet::loss::{jaccard_distance_loss, weighted_loss, StageWeights};
use msunet::metrics::{compute_metrics, confusion, AblationVariant, Metrics};
use msunet::training::{evaluate_stages, train, AugmentConfig, TrainArtifacts, TrainConfig};
use msunet::Tensor;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = full_suite(0, None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.2e})", r.name, r.max_rel_error))
        .collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(format!("{} checks, worst rel error {worst:.2e}, {secs:.1}s", reports.len()))
}

/// `1 - sum(t p) / (sum t^2 + sum p^2 - sum t p)`, 0 when the denominator vanishes.
fn jaccard_oracle(t: &[f64], p: &[f64]) -> f64 {
    let inter: f64 = t.iter().zip(p).map(|(a, b)| a * b).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    let pp: f64 = p.iter().map(|b| b * b).sum();
    let den = tt + pp - inter;
    if den < 1e-7 {
        0.0
    } else {
        1.0 - inter / den
    }
}

fn row(v: Vec<f64>) -> Tensor<f64> {
    let n = v.len();
    Tensor::from_vec([1, 1, 1, n], v).unwrap()
}

fn loss_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let n = rng.random_range(1..64);
        let t: Vec<f64> = (0..n).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let l = jaccard_distance_loss(&row(t.clone()), &row(p.clone())).map_err(|e| e.to_string())?;
        ensure((0.0..=1.0).contains(&l), || format!("instance {i}: loss {l} out of range"))?;
        worst = worst.max((l - jaccard_oracle(&t, &p)).abs());

        let perfect = jaccard_distance_loss(&row(t.clone()), &row(t.clone())).unwrap();
        ensure(perfect == 0.0, || format!("instance {i}: perfect match gives {perfect}"))?;
        let flipped: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        let disjoint = jaccard_distance_loss(&row(t.clone()), &row(flipped)).unwrap();
        ensure(disjoint == 1.0, || format!("instance {i}: disjoint prediction gives {disjoint}"))?;
    }
    ensure(worst < 1e-12, || format!("deviates from oracle by {worst:e}"))?;
    let example = jaccard_distance_loss(&row(vec![1.0, 0.0]), &row(vec![0.6, 0.2])).unwrap();
    ensure((example - 0.25).abs() < 1e-12, || format!("worked example gives {example}"))?;
    let weighted = weighted_loss(&[0.2; 4], &StageWeights::four_stage_default()).unwrap();
    ensure((weighted - 0.68).abs() < 1e-12, || format!("weighted example gives {weighted}"))?;
    Ok(format!("1000 instances, max oracle deviation {worst:.1e}, examples {example} and {weighted}"))
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn brute_force(pred: &[bool], gt: &[bool]) -> Metrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Metrics {
        ja: ratio(tp, tp + fp + fn_),
        di: ratio(2 * tp, 2 * tp + fp + fn_),
        se: ratio(tp, tp + fn_),
        sp: ratio(tn, tn + fp),
        ac: ratio(tp + tn, tp + fp + tn + fn_),
    }
}

fn mask(bits: &[bool], h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_vec([1, 1, h, w], bits.iter().map(|&b| b as u8 as f32).collect()).unwrap()
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..1000 {
        // Vary density so empty and full masks turn up too.
        let (dp, dg) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let pred: Vec<bool> = (0..64).map(|_| rng.random_bool(dp)).collect();
        let gt: Vec<bool> = (0..64).map(|_| rng.random_bool(dg)).collect();
        let counts = confusion(&mask(&pred, 8, 8), &mask(&gt, 8, 8)).map_err(|e| e.to_string())?;
        let got = compute_metrics(&counts);
        let want = brute_force(&pred, &gt);
        ensure(got == want, || format!("pair {i}: {got:?} vs oracle {want:?}"))?;
        ensure(got.ja <= got.di, || format!("pair {i}: JA {} > DI {}", got.ja, got.di))?;
    }
    let counts = confusion(&mask(&[true, false, false, false], 2, 2), &mask(&[true, true, false, false], 2, 2)).unwrap();
    let m = compute_metrics(&counts);
    let want = Metrics {
        ja: 0.5,
        di: 2.0 / 3.0,
        se: 0.5,
        sp: 1.0,
        ac: 0.75,
    };
    ensure(m == want, || format!("2x2 example gives {m:?}"))?;
    Ok("1000 pairs exact, JA <= DI, 2x2 example exact".into())
}

fn shape_invariants() -> Outcome {
    let cfg = TrainConfig::default();
    let model = build_cascade::<f32>(&cfg.cascade_config(), 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let image = Tensor::from_vec([1, 3, 224, 160], (0..3 * 224 * 160).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let maps = model.predict_maps(&image).map_err(|e| e.to_string())?;
    ensure(maps.len() == 4, || format!("{} maps", maps.len()))?;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (s, m) in maps.iter().enumerate() {
        ensure(m.shape().0 == [1, 1, 224, 160], || format!("stage {} map has shape {}", s + 1, m.shape()))?;
        for &v in m.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    ensure(lo > 0.0 && hi < 1.0, || format!("values span [{lo}, {hi}]"))?;
    Ok(format!("4 maps of 1x1x224x160, values in [{lo:.4}, {hi:.4}]"))
}

struct DeskData {
    train: Vec<SamplePair>,
    val: Vec<SamplePair>,
    test: Vec<SamplePair>,
}

fn desk_data() -> DeskData {
    let size = Size::new(64, 64);
    DeskData {
        train: generate_synthetic(&SynthParams::new(200, 1000, size)),
        val: generate_synthetic(&SynthParams::new(25, 3000, size)),
        test: generate_synthetic(&SynthParams::new(50, 2000, size)),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn desk_training(data: &DeskData) -> Outcome {
    let start = Instant::now();
    let stage_ja = |model: &CascadeModel<f32>, cfg: &TrainConfig| -> Result<Vec<f64>, String> {
        let reports = evaluate_stages(model, cfg, &data.test, cfg.threshold as f32).map_err(|e| e.to_string())?;
        Ok(reports.iter().map(|r| r.means.ja).collect())
    };
    // The run's deliverable is the checkpoint with the best final-stage
    // validation JA; the last-epoch model is reported alongside.
    let (mut first, mut last) = (Vec::new(), Vec::new());
    let (mut end_first, mut end_last) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let cfg = TrainConfig {
            seed,
            log_wall_time: false,
            ..TrainConfig::desk()
        };
        let outcome = train(&cfg, &data.train, &data.val, None).map_err(|e| e.to_string())?;
        let best = stage_ja(&outcome.best_model, &cfg)?;
        let end = stage_ja(&outcome.model, &cfg)?;
        println!(
            "    seed {seed}: test JA per stage {best:.4?} (epoch {}), last epoch {end:.4?}",
            outcome.best_epoch
        );
        first.push(best[0]);
        last.push(*best.last().unwrap());
        end_first.push(end[0]);
        end_last.push(*end.last().unwrap());
    }
    let (first, last) = (median(first), median(last));
    let detail = format!(
        "median test JA first stage {first:.4}, final stage {last:.4} (last-epoch models: {:.4}, {:.4}), {:.0}s",
        median(end_first),
        median(end_last),
        start.elapsed().as_secs_f64()
    );
    ensure(last >= 0.80, || format!("final JA below 0.80: {detail}"))?;
    ensure(last >= first, || format!("final stage worse than first: {detail}"))?;
    Ok(detail)
}

fn ablation(data: &DeskData) -> Outcome {
    let base = TrainConfig {
        epochs: 5,
        log_wall_time: false,
        ..TrainConfig::desk()
    };
    let table = run_ablation(&base, &[0], &data.train, &data.val, &data.test, None).map_err(|e| e.to_string())?;
    let text = table.render_text();
    for line in text.lines() {
        println!("    {line}");
    }
    let labels: Vec<String> = table.rows.iter().map(|r| r.variant.label()).collect();
    let want: Vec<String> = AblationVariant::ALL.iter().map(|v| v.label()).collect();
    ensure(labels == want, || format!("rows {labels:?}"))?;
    let header: Vec<&str> = text.lines().next().unwrap_or("").split_whitespace().skip(1).collect();
    ensure(header == Metrics::COLUMNS, || format!("header {header:?}"))?;
    let ja = |v: AblationVariant| table.row(v).map(|r| r.median.ja).unwrap_or(f64::NAN);
    let (c, best) = (ja(AblationVariant::ALL[0]), ja(AblationVariant::ALL[3]));
    let verdict = if best > c { "ahead of" } else { "not ahead of" };
    Ok(format!(
        "4 rows rendered; {} JA {best:.4} {verdict} {} JA {c:.4} (5 epochs, 1 seed)",
        want[3], want[0]
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        stages: 2,
        levels: 2,
        channel_widths: vec![4, 8, 16],
        alphas: StageWeights::for_stages(2),
        learning_rate: 5e-3,
        batch_size: 4,
        epochs: 3,
        input_size: Size::new(16, 16),
        augmentation: AugmentConfig::default(),
        seed: 9,
        log_wall_time: false,
        ..TrainConfig::default()
    };
    let train_set = generate_synthetic(&SynthParams::new(12, 21, cfg.input_size));
    let val_set = generate_synthetic(&SynthParams::new(4, 22, cfg.input_size));
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let artifacts = TrainArtifacts {
            dir: dir.path().join(run),
        };
        train(&cfg, &train_set, &val_set, Some(&artifacts)).map_err(|e| e.to_string())?;
        logs.push(std::fs::read(artifacts.log()).map_err(|e| e.to_string())?);
    }
    ensure(!logs[0].is_empty() && logs[0] == logs[1], || "training logs differ".into())?;

    let bytes = std::fs::read(dir.path().join("a/final.ckpt")).map_err(|e| e.to_string())?;
    let (model, loaded_cfg) = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let again = encode_checkpoint(&model, &loaded_cfg).map_err(|e| e.to_string())?;
    ensure(again == bytes && loaded_cfg == cfg, || "checkpoint round trip is not bitwise".into())?;

    let mut trees = Vec::new();
    for run in ["s1", "s2"] {
        let out = dir.path().join(run);
        save_dataset(&out, &generate_synthetic(&SynthParams::new(6, 5, Size::new(40, 24)))).map_err(|e| e.to_string())?;
        let mut files = Vec::new();
        for sub in ["images", "masks"] {
            let mut names: Vec<_> = std::fs::read_dir(out.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            for p in names {
                files.push((p.file_name().unwrap().to_owned(), std::fs::read(&p).unwrap()));
            }
        }
        trees.push(files);
    }
    ensure(trees[0].len() == 12 && trees[0] == trees[1], || "synthetic datasets differ".into())?;
    Ok(format!("log {} bytes identical, checkpoint {} bytes identical, 12 synthetic files identical", logs[0].len(), bytes.len()))
}

fn degenerate_cifs() -> Outcome {
    let config = UNetConfig {
        levels: 3,
        channel_widths: vec![4, 8, 16, 32],
        fusion_mode: FusionMode::Cifs,
        ..UNetConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f32 = 0.0;
    for seed in 0..3 {
        let mut stage = build_stage::<f32>(&config, seed).map_err(|e| e.to_string())?;
        stage.zero_context_path();
        let plain = stage.image_path_only().map_err(|e| e.to_string())?;
        let image = Tensor::from_vec([2, 3, 32, 24], (0..2 * 3 * 32 * 24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let prev = Tensor::from_vec([2, 1, 32, 24], (0..2 * 32 * 24).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let a = stage_forward_cifs(&stage, &image, &prev).map_err(|e| e.to_string())?;
        let b = stage_forward_plain(&plain, &image).map_err(|e| e.to_string())?;
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max abs difference {worst:e}"))?;
    Ok(format!("max abs difference {worst:e} over 3 stages"))
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let data = desk_data();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient checks", Box::new(gradient_suite)),
        ("loss contracts", Box::new(loss_contracts)),
        ("metric oracle", Box::new(metric_oracle)),
        ("cascade shapes and ranges", Box::new(shape_invariants)),
        ("desk-scale training", Box::new(|| desk_training(&data))),
        ("ablation harness", Box::new(|| ablation(&data))),
        ("determinism and round trips", Box::new(determinism)),
        ("degenerate fusion equivalence", Box::new(degenerate_cifs)),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("[{}] PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("[{}] FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
