//! Loss-combination grid: which of reconstruction, complete-view and
//! corrupted-view supervision help.
//!
//! `cargo run --release --example ablation -- [epochs] [seeds]`

use srmil::eval::{run_ablation, LossCombo, SplitData};
use srmil::graph::{assign_splits, generate_synthetic_dataset, Dataset, SplitFractions, SynthConfig};
use srmil::model::ModelDims;
use srmil::rng::{stream, Stream};
use srmil::train::TrainConfig;

fn main() -> srmil::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let epochs = args.next().flatten().unwrap_or(5);
    let seeds: Vec<u64> = (0..args.next().flatten().unwrap_or(2) as u64).collect();

    let synth = SynthConfig {
        n_bags: 60,
        ..SynthConfig::default()
    };
    let bags = generate_synthetic_dataset(&synth, 0)?;
    let splits = assign_splits(bags.len(), &SplitFractions::default(), &mut stream(0, Stream::Split))?;
    let data = SplitData::from_dataset(&Dataset::from_assignment(bags, &splits)?)?;
    let dims = ModelDims {
        input_dim: synth.dim,
        hidden: 16,
        heads: 2,
        layers: 2,
        classes: 2,
        classifier_hidden: 16,
    };
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs,
        ..TrainConfig::default()
    };
    let table = run_ablation(&data, dims, &cfg, &LossCombo::GRID, &seeds)?;
    print!("{}", table.to_csv());
    Ok(())
}
