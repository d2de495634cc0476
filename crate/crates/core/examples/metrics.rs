// Classification metrics and detection deviation from alarm decisions.

use lorm::eval::{compute_metrics, detection_deviation, CutWear, MetricReport, WearTable, ConfusionCounts};

pub fn run_example() -> lorm::Result<()> {
    let report = MetricReport::from_counts(ConfusionCounts { tp: 5, fp: 1, fn_: 2, tn: 12 });
    print!("{}", report.to_table());

    // Alarms that never fire leave precision undefined; it is reported as 0.
    let silent = compute_metrics(&[false, false, false], &[true, false, false])?;
    println!("undefined when nothing alarms: {:?}", silent.undefined);

    let wear = WearTable {
        cuts: vec![
            CutWear { cut_id: 1, wear_um: 285.61, first_window: 1, last_window: 40 },
            CutWear { cut_id: 2, wear_um: 335.18, first_window: 41, last_window: 80 },
        ],
    };
    for first_alarm in [Some(12), Some(55), None] {
        match detection_deviation(first_alarm, &wear, 300.0)? {
            Some(d) => println!("first alarm at window {}: deviation {d:.2} um", first_alarm.unwrap_or(0)),
            None => println!("no alarm: deviation N/A"),
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> lorm::Result<()> {
    run_example()
}
