//! Trains SRMIL on a synthetic dataset and reports test metrics.
//!
//! `cargo run --release --example train_srmil -- [epochs]`

use srmil::eval::{evaluate, SplitData};
use srmil::graph::{assign_splits, generate_synthetic_dataset, Dataset, SplitFractions, SynthConfig};
use srmil::model::{ModelDims, ModelState};
use srmil::rng::{stream, Stream};
use srmil::train::{fit_with, TrainConfig};

fn main() -> srmil::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let synth = SynthConfig {
        n_bags: 80,
        ..SynthConfig::default()
    };
    let bags = generate_synthetic_dataset(&synth, 0)?;
    let splits = assign_splits(bags.len(), &SplitFractions::default(), &mut stream(0, Stream::Split))?;
    let data = SplitData::from_dataset(&Dataset::from_assignment(bags, &splits)?)?;

    let dims = ModelDims {
        input_dim: synth.dim,
        hidden: 32,
        heads: 4,
        layers: 2,
        classes: 2,
        classifier_hidden: 32,
    };
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs,
        ..TrainConfig::default()
    };
    let (model, log) = fit_with(ModelState::init(dims, cfg.seed)?, &data.train, &data.val, &cfg, &mut |r| {
        println!(
            "epoch {:>2} recon {:.4} comp {:.4} corr {:.4} val acc {:.3}",
            r.epoch, r.train.recon, r.train.comp, r.train.corr, r.val.accuracy
        )
    })?;
    let test = evaluate(&model, &data.test)?;
    println!(
        "best epoch {} test accuracy {:.3} auc {:?}",
        log.best_epoch, test.accuracy, test.auc
    );
    Ok(())
}
