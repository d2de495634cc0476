// Generate a degrading synthetic run and write its signal and wear table.

use lorm::signal::{MultiChannelSeries, WindowingConfig};
use lorm::synth::{generate_run, SynthConfig};

pub fn run_example() -> lorm::Result<()> {
    let cfg = SynthConfig {
        duration_samples: 50_000,
        degradation_onset: 30_000,
        degradation_rate: 1e-4,
        cuts: 10,
        ..SynthConfig::default()
    };
    let run = generate_run(&cfg)?;
    let windowing = WindowingConfig::new(321, 320)?;
    let wear = run.wear_table(&windowing);

    let dir = std::env::temp_dir().join("lorm-synthetic-run");
    std::fs::create_dir_all(&dir)?;
    run.series.write_csv(dir.join("signal.csv"))?;
    wear.write_csv(dir.join("wear.csv"))?;

    let back = MultiChannelSeries::read_csv(dir.join("signal.csv"), cfg.sample_rate_hz)?;
    assert_eq!(back.samples(), run.series.samples());

    println!("{} samples x {} channels written to {}", run.series.len(), run.series.channels(), dir.display());
    println!("degradation starts at window {}", run.onset_window(&windowing));
    for cut in &wear.cuts {
        println!("cut {:>2}: windows {:>3}-{:>3}, wear {:.1} um", cut.cut_id, cut.first_window, cut.last_window, cut.wear_um);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> lorm::Result<()> {
    run_example()
}
