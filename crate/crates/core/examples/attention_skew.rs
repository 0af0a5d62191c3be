//! Per-bag maximum attention of attention-MIL pooling against the SRMIL
//! global node, with histograms and alignment to positive instances.
//!
//! `cargo run --release --example attention_skew -- [epochs]`

use srmil::eval::{attention_skew, train_and_test, train_and_test_abmil, AttentionStats, SplitData};
use srmil::graph::{assign_splits, generate_synthetic_dataset, Dataset, SplitFractions, SynthConfig};
use srmil::model::{AbmilDims, ModelDims};
use srmil::rng::{stream, Stream};
use srmil::train::TrainConfig;

fn show(name: &str, s: &AttentionStats) {
    println!("{name}: median max {:.4}, share ≥ {} {:.2}", s.median_max, s.threshold, s.share_at_or_above);
    if let Some(a) = &s.alignment {
        println!("  top-1 hit {:.2}, top-5 hit {:.2}, high-attention precision {:?}", a.top1, a.top5, a.high);
    }
    print!("{}", s.histogram_csv());
}

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
    let skew = attention_skew(&data.test, &srmil, &abmil)?;
    show("abmil", &skew.abmil);
    show("srmil", &skew.srmil);
    Ok(())
}
