// Window a series, split windows into train/validation sets, normalise with
// training statistics, and replay the same data as a stream.

use lorm::signal::{compute_window_stats, segment_windows, split_context_target, split_train_val, WindowStream, WindowingConfig};
use lorm::synth::{generate_run, SynthConfig};

pub fn run_example() -> lorm::Result<()> {
    let run = generate_run(&SynthConfig { duration_samples: 10_000, degradation_onset: 10_000, ..SynthConfig::default() })?;
    let cfg = WindowingConfig::new(321, 320)?;
    let windows = segment_windows(&run.series, &cfg);
    let (train, val) = split_train_val(windows.len(), 0.8, 0);
    println!("{} windows: {} train, {} validation", windows.len(), train.len(), val.len());

    let train_windows: Vec<_> = train.iter().map(|&i| windows[i].clone()).collect();
    let stats = compute_window_stats(&train_windows)?;
    println!("channel means {:?}", stats.mean);
    println!("channel stds  {:?}", stats.std);

    let normalised = windows[0].normalized(&stats)?;
    let (context, target) = split_context_target(&normalised, cfg.context_len)?;
    println!("context {:?}, target {:?}", context.dim(), target.dim());

    let path = std::env::temp_dir().join("lorm-windowing.csv");
    run.series.write_csv(&path)?;
    let streamed = WindowStream::open_csv(&path, cfg, 3)?.collect::<lorm::Result<Vec<_>>>()?;
    assert_eq!(streamed, windows);
    println!("streaming the CSV yields the same {} windows", streamed.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> lorm::Result<()> {
    run_example()
}
