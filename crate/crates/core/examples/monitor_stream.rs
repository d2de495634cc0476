// Score a degrading stream window by window, with ingestion and inference on
// separate threads, then calibrate a threshold and evaluate the alarms.

use lorm::config::RunConfig;
use lorm::eval::evaluate_records;
use lorm::monitor::{alarm_line, calibrate_threshold, hi_by_cut, monitor_threaded, HealthTracker, MonitorConfig, WindowScorer};
use lorm::pipeline::{finetune, fit_series_codebooks, monitor_series};
use lorm::signal::segment_windows;
use lorm::synth::{generate_run, SynthConfig};

pub fn run_example() -> lorm::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.model.hidden_dim = 32;
    cfg.model.ffn_dim = 64;
    cfg.model.num_layers = 1;
    cfg.train.max_epochs = 25;
    // No pretraining phase here, so every parameter is trained.
    cfg.train.freeze = false;
    let healthy = SynthConfig { duration_samples: 64_000, degradation_onset: 64_000, cuts: 20, ..SynthConfig::default() };
    let run = generate_run(&healthy)?;
    let codebooks = fit_series_codebooks(&cfg, &run.series)?;
    let model = finetune(&cfg, &run.series, codebooks, None)?;
    println!("fine-tuned: validation loss {:.4}", model.report.best_val_objective);
    let scorer = WindowScorer::new(model.checkpoint, model.codebooks)?;

    let degrading = |seed| SynthConfig { degradation_onset: 38_400, degradation_rate: 2e-4, seed, ..healthy.clone() };
    let monitor = MonitorConfig { buffer_len: 50, threshold: 0.0 };

    // Threshold from a development run: mean HI over the cut nearest 300 um.
    let dev = generate_run(&degrading(1))?;
    let dev_wear = dev.wear_table(&scorer.checkpoint().windowing);
    let dev_records = monitor_series(&dev.series, &scorer, monitor)?;
    let cal = calibrate_threshold(&hi_by_cut(&dev_records, &dev_wear), &dev_wear, 300.0)?;
    println!("calibrated tau = {:.4} on cut {} ({} um)", cal.tau, cal.cut_id, cal.wear_um);

    let test = generate_run(&degrading(2))?;
    let windows = segment_windows(&test.series, &scorer.checkpoint().windowing);
    let monitor = MonitorConfig { threshold: cal.tau, ..monitor };
    let mut shown = 0;
    let records = monitor_threaded(windows.into_iter().map(Ok), &scorer, monitor, |r| {
        if r.alarm && shown < 5 {
            println!("{}", alarm_line(r, cal.tau));
            shown += 1;
        }
    })?;

    // The tracker can also be driven directly from WLF values.
    let mut tracker = HealthTracker::new(monitor)?;
    assert!(records.iter().all(|r| tracker.update(r.wlf) == *r));

    let wear = test.wear_table(&scorer.checkpoint().windowing);
    let evaluation = evaluate_records(&records, &wear, 300.0)?;
    println!("degradation onset at window {}", test.onset_window(&scorer.checkpoint().windowing));
    print!("{}", evaluation.to_table());
    Ok(())
}

#[allow(dead_code)]
fn main() -> lorm::Result<()> {
    run_example()
}
