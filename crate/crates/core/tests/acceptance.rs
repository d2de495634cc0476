//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lorm::checkpoint::Checkpoint;
use lorm::config::RunConfig;
use lorm::eval::{compute_metrics, detection_deviation, evaluate_records, ConfusionCounts, CutWear, MetricReport, WearTable};
use lorm::model::{init_model, AttentionMode, BackboneConfig, ParamId, ParameterPartition};
use lorm::monitor::{calibrate_threshold, hi_by_cut, HealthRecord, MonitorConfig, WindowScorer};
use lorm::pipeline::{self, TrainedModel};
use lorm::sequence::build_mcps;
use lorm::signal::{segment_windows, SignalWindow, WindowStream, WindowingConfig};
use lorm::synth::{generate_run, SynthConfig};
use lorm::tokenizer::{kmeans, kmeans_plus_plus, lloyd};
use lorm::train::gradient_check;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// The desk-scale stationary run and the model trained on it, shared by
/// criteria 2, 3 and 5.
struct Trained {
    cfg: RunConfig,
    pretrained: TrainedModel,
    model: TrainedModel,
    elapsed: Duration,
}

fn train_desk_scale() -> Result<Trained, String> {
    let cfg = RunConfig::default();
    let start = Instant::now();
    let pretrained = pipeline::pretrain(&cfg).map_err(err)?;
    let run = generate_run(&cfg.synth).map_err(err)?;
    let codebooks = pipeline::fit_series_codebooks(&cfg, &run.series).map_err(err)?;
    let model = pipeline::finetune(&cfg, &run.series, codebooks, Some(&pretrained.checkpoint.params)).map_err(err)?;
    Ok(Trained { cfg, pretrained, model, elapsed: start.elapsed() })
}

fn criterion_1() -> Outcome {
    let ln10 = 10f64.ln();
    let windowing = WindowingConfig::new(65, 64).map_err(err)?;
    let mut cfg = RunConfig::default();
    cfg.windowing.window_len = 65;
    cfg.windowing.context_len = 64;
    cfg.tokenizer.k = 10;
    cfg.model = lorm::config::ModelSection { hidden_dim: 16, num_layers: 1, num_heads: 2, ffn_dim: 32, attention_mode: AttentionMode::Causal };
    let synth = SynthConfig { duration_samples: 6_500, degradation_onset: 6_500, cuts: 4, ..SynthConfig::default() };
    let run = generate_run(&synth).map_err(err)?;
    let ds = pipeline::prepare_dataset(&run.series, windowing, 1.0, 0).map_err(err)?;
    let codebooks = pipeline::fit_dataset_codebooks(&ds, 10, 0).map_err(err)?;
    let mut params = init_model(&cfg.backbone(3).map_err(err)?, 5).map_err(err)?;
    params.get_mut(ParamId::ClassMatrix).fill(0.0);
    let ck = Checkpoint { params, windowing, stats: ds.stats.clone(), codebook_hash: codebooks.content_hash() };
    let scorer = WindowScorer::new(ck, codebooks).map_err(err)?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut windows = segment_windows(&run.series, &windowing);
    windows.push(SignalWindow { data: Array2::from_shape_fn((65, 3), |_| rng.random_range(-50.0..50.0)), start_index: 0 });
    let mut worst: f64 = 0.0;
    for w in &windows {
        worst = worst.max((scorer.score(w).map_err(err)? - ln10).abs());
    }
    check(worst <= 1e-6, format!("max |WLF - ln 10| = {worst:e}"))?;
    Ok(format!("{} windows, max |WLF - ln 10| = {worst:.2e}", windows.len()))
}

fn criterion_2(t: &Trained) -> Outcome {
    let target = 0.8 * 8f64.ln();
    let r = &t.model.report;
    let within = r.val_loss.iter().take(30).cloned().fold(f64::INFINITY, f64::min);
    check(t.cfg.train.max_epochs <= 30, "fine-tuning budget exceeds 30 epochs")?;
    check(within < target, format!("best validation loss {within:.4} >= {target:.4}"))?;
    check(t.elapsed < Duration::from_secs(15 * 60), format!("took {:?}", t.elapsed))?;
    Ok(format!(
        "pretrain {:.4} ({} epochs), fine-tune val {:.4} < {:.4} at epoch {}/{}; {:.0?}",
        t.pretrained.report.best_val_objective,
        t.pretrained.report.val_loss.len(),
        within,
        target,
        r.best_epoch,
        r.val_loss.len(),
        t.elapsed
    ))
}

/// Linear-interpolation quantile.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn criterion_3(t: &Trained) -> Outcome {
    let scorer = WindowScorer::new(t.model.checkpoint.clone(), t.model.codebooks.clone()).map_err(err)?;
    let windowing = t.model.checkpoint.windowing;
    let degrading = |seed| SynthConfig { degradation_rate: 1e-4, seed, ..t.cfg.synth.clone() };
    let monitor = MonitorConfig { buffer_len: 100, threshold: 0.0 };
    let limit = t.cfg.eval.wear_limit_um;

    let dev = generate_run(&degrading(11)).map_err(err)?;
    let dev_wear = dev.wear_table(&windowing);
    let dev_records = pipeline::monitor_series(&dev.series, &scorer, monitor).map_err(err)?;
    let cal = calibrate_threshold(&hi_by_cut(&dev_records, &dev_wear), &dev_wear, limit).map_err(err)?;

    let test = generate_run(&degrading(22)).map_err(err)?;
    check(test.degradation_onset * 10 == test.series.len() * 6, "onset is not at 60% of the stream")?;
    let wear = test.wear_table(&windowing);
    let records: Vec<HealthRecord> =
        pipeline::monitor_series(&test.series, &scorer, MonitorConfig { threshold: cal.tau, ..monitor }).map_err(err)?;
    let onset = test.onset_window(&windowing);

    let pre: Vec<&HealthRecord> = records.iter().filter(|r| r.window_index < onset && r.hi.is_some()).collect();
    let post: Vec<&HealthRecord> = records.iter().filter(|r| r.window_index >= onset).collect();
    let false_alarms = pre.iter().filter(|r| r.alarm).count();
    check(false_alarms == 0, format!("{false_alarms} alarms before onset"))?;

    let crossing = wear.cuts.iter().find(|c| c.wear_um > limit).ok_or("wear never crosses the limit")?.cut_id;
    let first = records.iter().find(|r| r.alarm).ok_or("no alarm raised")?;
    let first_cut = wear.cut_of(first.window_index).ok_or("alarm outside wear table")?.cut_id;
    check(first.window_index >= onset, "first alarm precedes onset")?;
    check(first_cut <= crossing + 10, format!("first alarm at cut {first_cut}, crossing at cut {crossing}"))?;

    let pre_hi: Vec<f64> = pre.iter().filter_map(|r| r.hi).collect();
    let post_hi: Vec<f64> = post.iter().filter_map(|r| r.hi).collect();
    let iqr = quantile(&pre_hi, 0.75) - quantile(&pre_hi, 0.25);
    let gap = quantile(&post_hi, 0.5) - quantile(&pre_hi, 0.5);
    check(gap >= 3.0 * iqr, format!("median gap {gap:.4} < 3 x IQR {iqr:.4}"))?;

    let evaluation = evaluate_records(&records, &wear, limit).map_err(err)?;
    Ok(format!(
        "tau {:.4} (dev cut {}), 0/{} pre-onset alarms, first alarm cut {first_cut} (onset cut {}, crossing cut {crossing}, deviation {:.2} um), median gap {gap:.3} = {:.1} x IQR",
        cal.tau,
        cal.cut_id,
        pre.len(),
        wear.cut_of(onset).map(|c| c.cut_id).unwrap_or(0),
        evaluation.deviation_um.unwrap_or(f64::NAN),
        gap / iqr
    ))
}

fn criterion_4() -> Outcome {
    let cfg = BackboneConfig {
        hidden_dim: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 16,
        max_seq_len: 8,
        attention_mode: AttentionMode::Causal,
        k: 4,
        channels: 2,
        patch_len: 8,
    };
    let mut params = init_model(&cfg, 7).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for id in cfg.param_ids() {
        params.get_mut(id).mapv_inplace(|v| v * 3.0 + rng.random_range(-0.3..0.3));
    }
    let window = SignalWindow { data: Array2::from_shape_fn((33, 2), |_| rng.random_range(-2.0..2.0)), start_index: 0 };
    let ds_codebooks = {
        let cb = |c| lorm::tokenizer::Codebook { channel_index: c, centroids: vec![vec![-1.5], vec![-0.5], vec![0.5], vec![1.5]] };
        lorm::tokenizer::CodebookSet::new(vec![cb(0), cb(1)], vec!["a".into(), "b".into()]).map_err(err)?
    };
    let report = gradient_check(&params, &ParameterPartition::all_trainable(&cfg), &window, 32, &ds_codebooks, 1e-4)
        .map_err(err)?;
    check(report.passed, format!("max relative error {:e} at {:?}", report.max_relative_error, report.worst))?;
    Ok(format!("{} parameters, max relative error {:.2e}", report.checked, report.max_relative_error))
}

fn criterion_5(t: &Trained, dir: &Path) -> Outcome {
    let m = &t.model;
    check(t.cfg.train.freeze, "train phase is not frozen")?;
    let pre_hash = t.pretrained.checkpoint.params.hash_of(&m.partition.frozen);
    check(m.frozen_hash_before == pre_hash, "frozen hash before training differs from the pretrained model")?;
    let path = dir.join("checkpoint.lorm");
    m.checkpoint.save(&path).map_err(err)?;
    let reloaded = Checkpoint::load(&path).map_err(err)?;
    let after = reloaded.params.hash_of(&m.partition.frozen);
    check(after == pre_hash, format!("frozen hash changed: {pre_hash} -> {after}"))?;
    let trainable_changed = reloaded.params.hash_of(&m.partition.trainable)
        != t.pretrained.checkpoint.params.hash_of(&m.partition.trainable);
    check(trainable_changed, "trainable parameters did not change")?;
    Ok(format!("frozen block sha256 {}... unchanged over {} epochs", &pre_hash[..16], m.report.val_loss.len()))
}

fn criterion_6() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..=64);
        let k = rng.random_range(1..=4);
        let points: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let init = kmeans_plus_plus(&points, k, &mut ChaCha8Rng::seed_from_u64(seed));
        let fit = lloyd(&points, init.clone());
        let (_, oracle) = common::lloyd_oracle(&points, &init);
        worst = worst.max((fit.inertia - oracle).abs());
        cases += 1;
    }
    check(worst < 1e-9, format!("inertia differs by {worst:e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let points: Vec<Vec<f64>> = (0..64).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
    let fit = kmeans(&points, 1, 3).map_err(err)?;
    let mut mean_err: f64 = 0.0;
    for j in 0..2 {
        let mean = points.iter().map(|p| p[j]).sum::<f64>() / 64.0;
        mean_err = mean_err.max((fit.centroids[0][j] - mean).abs());
    }
    check(mean_err < 1e-12, format!("K=1 centroid off by {mean_err:e}"))?;
    Ok(format!("{cases} cases, max inertia gap {worst:.1e}; K=1 centroid error {mean_err:.1e}"))
}

fn criterion_7() -> Outcome {
    let m = MetricReport::from_counts(ConfusionCounts { tp: 5, fp: 1, fn_: 2, tn: 12 });
    let expected = [("acc", m.acc, 0.85), ("p", m.p, 0.833333), ("r", m.r, 0.714286), ("f1", m.f1, 0.769231), ("fpr", m.fpr, 0.076923)];
    for (name, got, want) in expected {
        check((got - want).abs() <= 1e-6, format!("{name} = {got}, expected {want}"))?;
    }
    let preds: Vec<bool> = [vec![true; 6], vec![false; 14]].concat();
    let labels: Vec<bool> = [vec![true; 5], vec![false; 1], vec![true; 2], vec![false; 12]].concat();
    check(compute_metrics(&preds, &labels).map_err(err)? == m, "pairwise counting disagrees")?;
    Ok(format!("acc {:.6} p {:.6} r {:.6} f1 {:.6} fpr {:.6}", m.acc, m.p, m.r, m.f1, m.fpr))
}

fn criterion_8() -> Outcome {
    let table = WearTable {
        cuts: vec![
            CutWear { cut_id: 1, wear_um: 285.61, first_window: 1, last_window: 10 },
            CutWear { cut_id: 2, wear_um: 335.18, first_window: 11, last_window: 20 },
        ],
    };
    let late = detection_deviation(Some(15), &table, 300.0).map_err(err)?.ok_or("no deviation")?;
    let early = detection_deviation(Some(4), &table, 300.0).map_err(err)?.ok_or("no deviation")?;
    check((late - 35.18).abs() < 1e-9 && format!("{late:.2}") == "35.18", format!("late deviation {late}"))?;
    check((early - 14.39).abs() < 1e-9 && format!("{early:.2}") == "14.39", format!("early deviation {early}"))?;
    Ok(format!("{late:.2} um and {early:.2} um"))
}

fn criterion_9(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let (s, c, h) = (rng.random_range(1..=400), rng.random_range(1..=6), rng.random_range(1..=32));
        let x = Array2::from_shape_fn((s, c), |_| rng.random_range(-10.0..10.0));
        let mcps = build_mcps(x.view(), h).map_err(err)?;
        check(mcps.unflatten(s) == x, format!("MCPS round trip failed for S={s} C={c} h={h}"))?;
    }

    let cfg = BackboneConfig::for_task(320, 16, 3, 8);
    let ck = Checkpoint {
        params: init_model(&cfg, 3).map_err(err)?,
        windowing: WindowingConfig::new(321, 320).map_err(err)?,
        stats: lorm::signal::ChannelStats { mean: vec![0.1, 0.2, 0.3], std: vec![1.0, 2.0, 3.0], epsilon: 1e-8 },
        codebook_hash: "0".repeat(64),
    };
    let path = dir.join("roundtrip.lorm");
    ck.save(&path).map_err(err)?;
    let bytes = std::fs::read(&path).map_err(err)?;
    let back = Checkpoint::load(&path).map_err(err)?;
    check(back == ck && back.to_bytes() == bytes, "checkpoint round trip is not byte-identical")?;

    let run = generate_run(&SynthConfig { duration_samples: 963, degradation_onset: 963, cuts: 3, ..SynthConfig::default() })
        .map_err(err)?;
    let csv = dir.join("stream.csv");
    run.series.write_csv(&csv).map_err(err)?;
    let windowing = WindowingConfig::new(321, 320).map_err(err)?;
    for w in [windowing, windowing.with_stride(17).map_err(err)?] {
        let streamed: Vec<SignalWindow> =
            WindowStream::open_csv(&csv, w, 3).map_err(err)?.collect::<Result<_, _>>().map_err(err)?;
        check(streamed == segment_windows(&run.series, &w), "stream and batch windows differ")?;
    }
    Ok(format!("200 MCPS cases, checkpoint {} bytes identical, stream == batch", bytes.len()))
}

fn criterion_10(dir: &Path) -> Outcome {
    let run_once = |name: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let out = dir.join(name);
        for cmd in ["synth", "fit-codebooks", "pretrain", "train", "monitor"] {
            let args = [
                "lorm",
                cmd,
                "--out",
                out.to_str().ok_or("non-UTF-8 path")?,
                "--seed",
                "42",
                "--set",
                "synth.degradation_rate=0.0001",
                "--set",
                "pretrain.train.max_epochs=2",
                "--set",
                "train.max_epochs=3",
            ];
            let code = lorm::cli::run(args, &mut std::io::sink());
            check(code == 0, format!("`{cmd}` exited with {code}"))?;
        }
        Ok((std::fs::read(out.join("hi.csv")).map_err(err)?, std::fs::read(out.join("checkpoint.lorm")).map_err(err)?))
    };
    let (hi_a, ck_a) = run_once("run_a")?;
    let (hi_b, ck_b) = run_once("run_b")?;
    check(hi_a == hi_b, "hi.csv differs between runs")?;
    check(ck_a == ck_b, "checkpoint.lorm differs between runs")?;
    Ok(format!("hi.csv ({} bytes) and checkpoint.lorm ({} bytes) identical", hi_a.len(), ck_a.len()))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let trained = train_desk_scale();
    let shared = |f: &dyn Fn(&Trained) -> Outcome| match &trained {
        Ok(t) => f(t),
        Err(e) => Err(format!("desk-scale training failed: {e}")),
    };

    let results: Vec<(&str, Outcome)> = vec![
        ("uniform-loss anchor", criterion_1()),
        ("training effectiveness", shared(&criterion_2)),
        ("HI separation and alarm", shared(&criterion_3)),
        ("gradient fidelity", criterion_4()),
        ("freeze contract", shared(&|t| criterion_5(t, dir.path()))),
        ("k-means oracle equivalence", criterion_6()),
        ("metric formulas", criterion_7()),
        ("detection-deviation arithmetic", criterion_8()),
        ("structural round trips", criterion_9(dir.path())),
        ("determinism", criterion_10(dir.path())),
    ];

    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {reason}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
