//! Runs the desk preset in one scenario and prints the accuracy matrix.
//!
//! cargo run --release -p subnetcl --example desk_run -- domain

use std::time::Instant;

use subnetcl::backbone::Scenario;
use subnetcl::evalkit::{average_accuracy, forgetting};
use subnetcl::experiment::{final_evaluation, run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario: Scenario = std::env::args().nth(1).unwrap_or_else(|| "task".into()).parse()?;
    let mut cfg = ExperimentConfig::desk(scenario);
    cfg.sync();
    let start = Instant::now();
    let (state, data) = run_experiment::<f32>(&cfg)?;
    let fin = final_evaluation(&state.learner, &data, &cfg.taskid)?;
    print!("{}", state.matrix.to_csv());
    println!("average {:.2}", average_accuracy(&state.matrix)?);
    println!("forgetting {:?}", forgetting(&state.matrix)?);
    println!("final {fin:?}");
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
