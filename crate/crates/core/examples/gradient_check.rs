//! Finite-difference check of the GAT encoder and classifier.
//!
//! `cargo run --release --example gradient_check`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srmil::graph::PatchBag;
use srmil::model::{classify, encode, ModelDims, ModelState, PreparedGraph};
use srmil::tensor::grad_check;

fn main() -> srmil::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let coords: Vec<[i32; 2]> = (0..12).map(|i| [i % 4, i / 4]).collect();
    let bag = PatchBag {
        bag_id: "demo".into(),
        dim: 16,
        features: (0..12 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        coords,
        label: 1,
        instance_labels: None,
    };
    let graph = PreparedGraph::from_bag(&bag)?;
    let dims = ModelDims {
        input_dim: 16,
        hidden: 8,
        heads: 2,
        layers: 2,
        classes: 2,
        classifier_hidden: 8,
    };
    let state = ModelState::init(dims, 0)?;

    // gradient of the bag loss with respect to the input features
    let check = grad_check(
        |tape, x| {
            let p = state.bind(tape, false);
            let enc = encode(tape, &p, &state.dims, x, &graph.index)?;
            let logits = classify(tape, &p, &enc, &graph.index)?;
            tape.cross_entropy(logits, graph.label)
        },
        &graph.features,
        1e-5,
    )?;
    println!(
        "{} coordinates, max relative error {:.3e} at {}",
        check.analytic.len(),
        check.max_rel_error,
        check.worst_index
    );
    Ok(())
}
