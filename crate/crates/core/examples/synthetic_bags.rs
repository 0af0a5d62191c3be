//! Generates a few synthetic bags and prints their structure.
//!
//! `cargo run --release --example synthetic_bags`

use srmil::graph::{generate_synthetic_dataset, PatchGraph, SynthConfig};

fn main() -> srmil::Result<()> {
    let cfg = SynthConfig {
        n_bags: 6,
        ..SynthConfig::default()
    };
    for bag in generate_synthetic_dataset(&cfg, 7)? {
        let positives = bag.instance_labels.as_ref().map_or(0, |l| l.iter().filter(|&&p| p).count());
        let graph = PatchGraph::from_bag(bag.clone())?;
        let edges = graph.patch_edges().count();
        println!(
            "{} label {} patches {:>3} positives {:>2} edges {:>4} mean degree {:.1}",
            bag.bag_id,
            bag.label,
            bag.len(),
            positives,
            edges,
            edges as f64 / bag.len() as f64
        );
    }

    // small ASCII map of a positive bag: '#' positive, '.' tissue
    let cfg = SynthConfig {
        n_bags: 2,
        grid_side: 20,
        mean_nodes: 150,
        node_jitter: 10,
        positive_ratio: 0.1,
        ..SynthConfig::default()
    };
    let bag = generate_synthetic_dataset(&cfg, 1)?.into_iter().find(|b| b.label == 1).expect("one positive bag");
    let labels = bag.instance_labels.clone().unwrap_or_default();
    let mut grid = vec![vec![' '; 20]; 20];
    for (c, &p) in bag.coords.iter().zip(&labels) {
        grid[c[1] as usize][c[0] as usize] = if p { '#' } else { '.' };
    }
    for row in grid {
        println!("{}", row.into_iter().collect::<String>());
    }
    Ok(())
}
