//! Aligns tissue contours to the patch grid and builds the spatial graph.
//!
//! `cargo run --release --example contour_alignment`

use srmil::graph::{build_edges, Contour, DEFAULT_STEP_SIZE};

fn main() -> srmil::Result<()> {
    let contour = Contour::new(1000, 530, 900, 500);
    let aligned = contour.align(DEFAULT_STEP_SIZE)?;
    println!("{contour:?}\n -> {aligned:?}");

    let step = DEFAULT_STEP_SIZE;
    let cols = (aligned.w + step - 1) / step;
    let rows = (aligned.h + step - 1) / step;
    let coords: Vec<[i32; 2]> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| [((aligned.start_x / step) + c) as i32, ((aligned.start_y / step) + r) as i32]))
        .collect();
    let edges = build_edges(&coords)?;
    let mut degree = vec![0; coords.len()];
    for &(_, t) in &edges {
        degree[t] += 1;
    }
    println!("{cols}x{rows} patches, {} directed edges", edges.len());
    for r in 0..rows as usize {
        let line: Vec<String> = (0..cols as usize).map(|c| format!("{:>2}", degree[r * cols as usize + c])).collect();
        println!("{}", line.join(" "));
    }
    Ok(())
}
