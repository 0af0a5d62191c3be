//! Test accuracy across mask ratios.
//!
//! `cargo run --release --example mask_sweep -- [epochs]`

use srmil::eval::{run_mask_sweep, SplitData};
use srmil::graph::{assign_splits, generate_synthetic_dataset, Dataset, SplitFractions, SynthConfig};
use srmil::model::ModelDims;
use srmil::rng::{stream, Stream};
use srmil::train::TrainConfig;

fn main() -> srmil::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
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
    let table = run_mask_sweep(&data, dims, &cfg, &[0.0, 0.3, 0.5, 0.7, 0.9], &[0])?;
    print!("{}", table.to_csv());
    Ok(())
}
