// Fit per-channel k-means codebooks on target segments and tokenise windows.

use lorm::config::RunConfig;
use lorm::pipeline::{fit_dataset_codebooks, prepare_dataset};
use lorm::synth::{generate_run, SynthConfig};
use lorm::tokenizer::{tokenize_window, CodebookSet};

pub fn run_example() -> lorm::Result<()> {
    let cfg = RunConfig::default();
    let run = generate_run(&SynthConfig { duration_samples: 32_100, degradation_onset: 32_100, ..SynthConfig::default() })?;
    let ds = prepare_dataset(&run.series, cfg.windowing()?, 0.8, 0)?;
    let codebooks = fit_dataset_codebooks(&ds, cfg.tokenizer.k, 0)?;

    for (name, cb) in codebooks.channel_names.iter().zip(&codebooks.codebooks) {
        let centres: Vec<String> = cb.centroids.iter().map(|c| format!("{:.2}", c[0])).collect();
        println!("{name}: [{}]", centres.join(", "));
    }
    for w in ds.val.iter().take(5) {
        println!("window at sample {:>6} -> tokens {:?}", w.start_index, tokenize_window(w, cfg.windowing.context_len, &codebooks)?.tokens);
    }

    let path = std::env::temp_dir().join("lorm-codebooks.json");
    codebooks.save(&path)?;
    let back = CodebookSet::load(&path)?;
    assert_eq!(back.content_hash(), codebooks.content_hash());
    println!("saved to {} (sha256 {})", path.display(), codebooks.content_hash());
    Ok(())
}

#[allow(dead_code)]
fn main() -> lorm::Result<()> {
    run_example()
}
