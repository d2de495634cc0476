use std::io::{BufReader, Cursor, Write};
use std::net::TcpListener;
use std::thread;

use lorm::signal::{segment_windows, MultiChannelSeries, SignalWindow, WindowStream, WindowingConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn series(t: usize, c: usize, seed: u64) -> MultiChannelSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MultiChannelSeries::from_samples(Array2::from_shape_fn((t, c), |_| rng.random_range(-3.0..3.0)), 1.0).unwrap()
}

fn body(s: &MultiChannelSeries) -> String {
    s.samples()
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

#[test]
fn csv_file_stream_equals_batch_windowing() {
    let s = series(963, 3, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("signal.csv");
    s.write_csv(&path).unwrap();
    for cfg in [
        WindowingConfig::new(321, 320).unwrap(),
        WindowingConfig::new(100, 64).unwrap().with_stride(37).unwrap(),
        WindowingConfig::new(5, 2).unwrap().with_stride(1).unwrap(),
    ] {
        let streamed: Vec<SignalWindow> =
            WindowStream::open_csv(&path, cfg, 3).unwrap().collect::<Result<_, _>>().unwrap();
        let reread = MultiChannelSeries::read_csv(&path, 1.0).unwrap();
        assert_eq!(streamed, segment_windows(&reread, &cfg));
        assert_eq!(streamed, segment_windows(&s, &cfg));
    }
}

#[test]
fn socket_feed_in_random_chunks_equals_batch() {
    let s = series(963, 3, 2);
    let cfg = WindowingConfig::new(321, 320).unwrap();
    let bytes = body(&s).into_bytes();
    for seed in 0..3u64 {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let payload = bytes.clone();
        let feeder = thread::spawn(move || {
            let (mut sock, _) = listener.accept().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pos = 0;
            while pos < payload.len() {
                let n = rng.random_range(1..=97).min(payload.len() - pos);
                sock.write_all(&payload[pos..pos + n]).unwrap();
                sock.flush().unwrap();
                pos += n;
            }
        });
        let streamed: Vec<SignalWindow> =
            WindowStream::connect(&addr, cfg, 3).unwrap().collect::<Result<_, _>>().unwrap();
        feeder.join().unwrap();
        assert_eq!(streamed.len(), 3);
        assert_eq!(streamed, segment_windows(&s, &cfg));
    }
}

#[test]
fn malformed_record_reports_its_index() {
    let text = "1,2\n3,4\n5,x\n7,8\n";
    let cfg = WindowingConfig::new(2, 1).unwrap().with_stride(1).unwrap();
    let items: Vec<_> = WindowStream::new(BufReader::new(Cursor::new(text)), cfg, 2).collect();
    assert_eq!(items.len(), 2);
    assert!(items[0].is_ok());
    let err = items[1].as_ref().unwrap_err().to_string();
    assert!(err.contains('3'), "{err}");
}
