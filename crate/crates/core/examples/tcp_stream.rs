// Receive samples over TCP and window them as they arrive.

use std::io::Write;
use std::net::TcpListener;
use std::thread;

use lorm::signal::{segment_windows, WindowStream, WindowingConfig};
use lorm::synth::{generate_run, SynthConfig};

pub fn run_example() -> lorm::Result<()> {
    let run = generate_run(&SynthConfig { duration_samples: 2_000, degradation_onset: 2_000, cuts: 2, ..SynthConfig::default() })?;
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();

    let rows: Vec<String> = run
        .series
        .samples()
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","))
        .collect();
    let sender = thread::spawn(move || -> std::io::Result<()> {
        let (mut sock, _) = listener.accept()?;
        for row in rows {
            writeln!(sock, "{row}")?;
        }
        Ok(())
    });

    let cfg = WindowingConfig::new(321, 320)?.with_stride(160)?;
    let mut received = Vec::new();
    for window in WindowStream::connect(&addr, cfg, 3)? {
        let window = window?;
        println!("window starting at sample {}", window.start_index);
        received.push(window);
    }
    sender.join().expect("sender thread")?;
    assert_eq!(received, segment_windows(&run.series, &cfg));
    Ok(())
}

#[allow(dead_code)]
fn main() -> lorm::Result<()> {
    run_example()
}
