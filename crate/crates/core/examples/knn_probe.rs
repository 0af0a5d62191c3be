//! Instance-level KNN probe on raw features and on learned embeddings.
//!
//! `cargo run --release --example knn_probe -- [epochs]`

use srmil::eval::{probe_csv, run_probe, train_and_test, train_and_test_abmil, ProbeConfig, SplitData};
use srmil::graph::{assign_splits, generate_synthetic_dataset, Dataset, SplitFractions, SynthConfig};
use srmil::model::{AbmilDims, ModelDims};
use srmil::rng::{stream, Stream};
use srmil::train::TrainConfig;

fn main() -> srmil::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let synth = SynthConfig {
        n_bags: 80,
        ..SynthConfig::default()
    };
    let bags = generate_synthetic_dataset(&synth, 0)?;
    let splits = assign_splits(bags.len(), &SplitFractions::default(), &mut stream(0, Stream::Split))?;
    let data = SplitData::from_dataset(&Dataset::from_assignment(bags, &splits)?)?;
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs,
        ..TrainConfig::default()
    };
    let dims = ModelDims {
        input_dim: synth.dim,
        hidden: 32,
        heads: 4,
        layers: 2,
        classes: 2,
        classifier_hidden: 32,
    };
    let (srmil, _, _) = train_and_test(&data, dims, &cfg)?;
    let abmil_dims = AbmilDims {
        input_dim: synth.dim,
        hidden: 32,
        attention_dim: 16,
        classes: 2,
    };
    let (abmil, _, _) = train_and_test_abmil(&data, abmil_dims, &cfg)?;
    let rows = run_probe(&data, &srmil, &abmil, &ProbeConfig::default(), 0)?;
    print!("{}", probe_csv(&rows));
    Ok(())
}
