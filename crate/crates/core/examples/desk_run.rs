//! Trains the desk preset on a synthetic corpus and prints rank-1 accuracy.
//!
//! `cargo run --release --example desk_run -- [seed] [hop|poly] [epochs]`

use std::time::Instant;

use heatgait::eval::{train_and_evaluate, EvalConfig, EvalData};
use heatgait::model::AggregationMode;
use heatgait::synth;
use heatgait::train::TrainSetup;

fn main() -> heatgait::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mode = match args.get(2).map(String::as_str) {
        Some("poly") => AggregationMode::Polynomial,
        _ => AggregationMode::HopExtracted,
    };
    let mut setup = TrainSetup::desk(seed);
    setup.model.aggregation_mode = mode;
    if let Some(epochs) = args.get(3).and_then(|s| s.parse().ok()) {
        setup.train.max_epochs = Some(epochs);
    }
    let corpus = synth::generate_dataset(8, 10, 60, seed);
    let eval_cfg = EvalConfig::default();
    let data = EvalData::closed_set(&corpus, &eval_cfg);
    let started = Instant::now();
    let (report, outcome) = train_and_evaluate(&setup, &data, &eval_cfg, None)?;
    let losses: Vec<String> = report.losses().iter().map(|l| format!("{l:.2}")).collect();
    println!("losses {}", losses.join(" "));
    let rows: Vec<String> = outcome
        .table
        .rows
        .iter()
        .map(|r| format!("{}={:.1}", r.condition, r.mean.unwrap_or(f64::NAN)))
        .collect();
    println!(
        "seed {seed} {mode:?} rank-1 {:.1}% ({}/{}) [{}] in {:.1}s",
        outcome.accuracy(),
        outcome.correct,
        outcome.total,
        rows.join(" "),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
