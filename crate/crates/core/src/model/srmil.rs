use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

use super::gat::{gat_layer_forward, GraphIndex, PreparedGraph};
use super::params::{ModelDims, ModelParams, ModelState};

/// Encoder output: node states `(N+1) × d` and attention per layer, per head.
#[derive(Clone, Debug)]
pub struct EncodedGraph {
    pub nodes: TensorId,
    pub attention: Vec<Vec<TensorId>>,
}

/// Appends the global embedding as row `N` and projects every row into `d`.
pub fn embed_nodes(
    tape: &mut Tape,
    params: &ModelParams<TensorId>,
    dims: &ModelDims,
    patches: TensorId,
) -> Result<TensorId> {
    let cols = tape.value(patches).cols();
    if cols != dims.input_dim {
        return Err(Error::shape(
            "encode",
            format!("features have width {cols}, model expects {}", dims.input_dim),
        ));
    }
    let all = tape.concat_rows(&[patches, params.global_embedding])?;
    tape.linear(all, params.input_weight, params.input_bias)
}

/// Input projection followed by the encoder stack, all layers normed.
pub fn encode(
    tape: &mut Tape,
    params: &ModelParams<TensorId>,
    dims: &ModelDims,
    patches: TensorId,
    index: &GraphIndex,
) -> Result<EncodedGraph> {
    if index.global.is_none() {
        return Err(Error::Invariant("encode needs a graph with its global node".into()));
    }
    let mut h = embed_nodes(tape, params, dims, patches)?;
    let mut attention = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let out = gat_layer_forward(tape, h, index, layer, dims.heads, true)?;
        h = out.nodes;
        attention.push(out.attention);
    }
    Ok(EncodedGraph { nodes: h, attention })
}

/// Mirrored decoder: the last layer skips its norm, then `d → D` and the
/// global row is dropped, giving `N × D`.
pub fn decode(
    tape: &mut Tape,
    params: &ModelParams<TensorId>,
    dims: &ModelDims,
    enc: &EncodedGraph,
    index: &GraphIndex,
) -> Result<TensorId> {
    let mut h = enc.nodes;
    let depth = params.decoder.len();
    for (l, layer) in params.decoder.iter().enumerate() {
        h = gat_layer_forward(tape, h, index, layer, dims.heads, l + 1 < depth)?.nodes;
    }
    let out = tape.linear(h, params.output_weight, params.output_bias)?;
    let patches: Arc<[usize]> = (0..index.num_patches).collect();
    tape.gather_rows(out, patches)
}

/// Two-layer MLP (linear → elu → linear) on the global node's row.
pub fn classify(
    tape: &mut Tape,
    params: &ModelParams<TensorId>,
    enc: &EncodedGraph,
    index: &GraphIndex,
) -> Result<TensorId> {
    let g = index
        .global
        .ok_or_else(|| Error::Invariant("classify needs the global node row".into()))?;
    let row = tape.gather_rows(enc.nodes, Arc::from([g].as_slice()))?;
    let hidden = tape.linear(row, params.cls_hidden_weight, params.cls_hidden_bias)?;
    let hidden = tape.elu(hidden)?;
    let logits = tape.linear(hidden, params.cls_out_weight, params.cls_out_bias)?;
    let c = tape.value(logits).numel();
    tape.reshape(logits, vec![c])
}

/// Inference-time view of one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagOutput {
    pub logits: Vec<f64>,
    /// Final encoder rows of the patch nodes, `N × d`.
    pub embeddings: Tensor,
    /// Last-layer attention into the global node, mean over heads: one weight
    /// per patch followed by the self weight. Empty when the encoder has no layers.
    pub global_attention: Vec<f64>,
}

impl ModelState {
    /// Complete-graph forward pass without gradients.
    pub fn forward_bag(&self, graph: &PreparedGraph) -> Result<BagOutput> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(graph.features.clone());
        let enc = encode(&mut tape, &params, &self.dims, x, &graph.index)?;
        let logits = classify(&mut tape, &params, &enc, &graph.index)?;
        let n = graph.num_patches();
        let nodes = tape.value(enc.nodes);
        let d = nodes.cols();
        let embeddings = Tensor::matrix(n, d, nodes.data()[..n * d].to_vec())?;
        let global_attention = match (enc.attention.last(), graph.index.global_edges()) {
            (Some(heads), Some(range)) => {
                let mut mean = vec![0.0; range.len()];
                for &head in heads {
                    for (m, &a) in mean.iter_mut().zip(&tape.value(head).data()[range.clone()]) {
                        *m += a;
                    }
                }
                let k = heads.len() as f64;
                mean.iter_mut().for_each(|m| *m /= k);
                mean
            }
            _ => Vec::new(),
        };
        Ok(BagOutput {
            logits: tape.value(logits).data().to_vec(),
            embeddings,
            global_attention,
        })
    }
}

/// Index of the largest logit; ties go to the smaller class.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Softmax probabilities of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}
