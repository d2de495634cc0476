// Build the channel-major patch sequence of one window and run the model.

use lorm::model::{init_model, partition_parameters, BackboneConfig, ParameterPartition};
use lorm::nn::forward;
use lorm::sequence::build_mcps;
use lorm::signal::{segment_windows, split_context_target, WindowingConfig};
use lorm::synth::{generate_run, SynthConfig};

pub fn run_example() -> lorm::Result<()> {
    let run = generate_run(&SynthConfig { duration_samples: 1_000, degradation_onset: 1_000, cuts: 1, ..SynthConfig::default() })?;
    let window = &segment_windows(&run.series, &WindowingConfig::new(321, 320)?)[0];
    let (context, _) = split_context_target(window, 320)?;
    let mcps = build_mcps(context.view(), 16)?;
    println!("patch sequence: {} patches of length {}", mcps.seq_len(), mcps.patch_len());
    assert_eq!(mcps.unflatten(320), context);

    let cfg = BackboneConfig::for_task(320, 16, 3, 8);
    let params = init_model(&cfg, 0)?;
    let partition = partition_parameters(&params);
    println!(
        "{} parameters: {} trainable, {} frozen",
        params.num_scalars(),
        ParameterPartition::count_scalars(&partition.trainable, &cfg),
        ParameterPartition::count_scalars(&partition.frozen, &cfg)
    );

    let trace = forward(&mcps, &params)?;
    println!("contextualised patches {:?}, pooled feature length {}", trace.z.dim(), trace.g.len());
    for (c, p) in trace.distributions.per_channel.iter().enumerate() {
        let probs: Vec<String> = p.iter().map(|x| format!("{x:.3}")).collect();
        println!("channel {c}: [{}]", probs.join(" "));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> lorm::Result<()> {
    run_example()
}
