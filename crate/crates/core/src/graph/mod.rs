//! Patch geometry, graph construction, bag storage and synthetic bags.

mod bag;
mod geometry;
mod synth;

pub use bag::{
    assign_splits, decode_bag, encode_bag, load_bag, load_dataset, read_manifest, save_bag, write_manifest, Dataset,
    ManifestEntry, PatchBag, PatchGraph, Split, SplitFractions, BAG_EXTENSION, BAG_MAGIC, BAG_VERSION,
};
pub use geometry::{build_edges, Contour, DEFAULT_STEP_SIZE, NEIGHBOR_RADIUS_SQ};
pub use synth::{generate_synthetic_dataset, SynthConfig};
