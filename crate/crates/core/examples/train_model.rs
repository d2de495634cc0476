// Two-phase training: full pretraining on a synthetic corpus, then partial
// fine-tuning with attention and feed-forward weights frozen.

use lorm::config::RunConfig;
use lorm::pipeline::{finetune, fit_series_codebooks, pretrain};
use lorm::synth::generate_run;

/// A reduced configuration that trains in seconds.
pub fn quick_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.hidden_dim = 32;
    cfg.model.ffn_dim = 64;
    cfg.model.num_layers = 1;
    cfg.synth.duration_samples = 40_000;
    cfg.synth.degradation_onset = 24_000;
    cfg.synth.cuts = 10;
    cfg.pretrain.corpus.duration_samples = 40_000;
    cfg.pretrain.corpus.degradation_onset = 40_000;
    cfg.pretrain.train.max_epochs = 4;
    cfg.train.max_epochs = 6;
    cfg.train.batch_size = 16;
    cfg
}

pub fn run_example() -> lorm::Result<()> {
    let cfg = quick_config();
    let pre = pretrain(&cfg)?;
    println!("pretraining: best validation loss {:.4}", pre.report.best_val_objective);

    let run = generate_run(&cfg.synth)?;
    let codebooks = fit_series_codebooks(&cfg, &run.series)?;
    let model = finetune(&cfg, &run.series, codebooks, Some(&pre.checkpoint.params))?;
    print!("{}", model.report.to_csv());
    println!("uniform guess would score {:.4}", (cfg.tokenizer.k as f64).ln());
    assert_eq!(model.frozen_hash_before, model.frozen_hash_after);
    println!("frozen block unchanged ({}...)", &model.frozen_hash_after[..16]);

    let path = std::env::temp_dir().join("lorm-example.lorm");
    model.checkpoint.save(&path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> lorm::Result<()> {
    run_example()
}
