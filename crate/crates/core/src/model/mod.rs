//! Graph-attention MIL model and the attention-pooling baseline.
//!
//! Each bag becomes a graph over its patches plus one global node that only
//! receives edges. The encoder stacks multi-head GAT layers; a mirrored
//! decoder reconstructs raw features for the masked view, and a small MLP
//! classifies the global node's final state.

mod abmil;
mod checkpoint;
mod gat;
mod params;
mod srmil;

pub use abmil::{abmil_forward, AbmilDims, AbmilOutput, AbmilParams, AbmilState};
pub use checkpoint::{
    checkpoint_kind, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpointable, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gat::{gat_layer_forward, prepare_all, GraphIndex, LayerOutput, PreparedGraph};
pub use params::{GatLayerParams, LayerNormParams, ModelDims, ModelParams, ModelState, ParamKind, Parameterized};
pub use srmil::{argmax, classify, decode, embed_nodes, encode, softmax, BagOutput, EncodedGraph};
