use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{PatchBag, PatchGraph};
use crate::tensor::{Index, Tape, Tensor, TensorId, LAYER_NORM_EPS, LEAKY_SLOPE};

use super::params::GatLayerParams;

/// Edge arrays as consumed by the layers, self-loops included.
///
/// Layout: patch edges, one self-loop per patch, then (when a global node is
/// present) `j → N` for every patch `j` in order followed by the global
/// self-loop. The global node's attention row is therefore the trailing
/// `N + 1` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphIndex {
    pub src: Index,
    pub dst: Index,
    pub num_patches: usize,
    pub global: Option<usize>,
}

impl GraphIndex {
    pub fn new(num_patches: usize, patch_edges: &[(usize, usize)], with_global: bool) -> Result<Self> {
        let mut src = Vec::with_capacity(patch_edges.len() + 2 * num_patches + 1);
        let mut dst = Vec::with_capacity(src.capacity());
        for &(s, t) in patch_edges {
            if s >= num_patches || t >= num_patches {
                return Err(Error::Index(format!("edge ({s}, {t}) with {num_patches} patches")));
            }
            if s == t {
                return Err(Error::Data(format!("stored self-loop at node {s}")));
            }
            src.push(s);
            dst.push(t);
        }
        src.extend(0..num_patches);
        dst.extend(0..num_patches);
        let global = with_global.then_some(num_patches);
        if let Some(g) = global {
            src.extend(0..=g);
            dst.extend(std::iter::repeat_n(g, g + 1));
        }
        Ok(Self {
            src: src.into(),
            dst: dst.into(),
            num_patches,
            global,
        })
    }

    pub fn from_graph(graph: &PatchGraph) -> Result<Self> {
        let n = graph.num_patches();
        let patch: Vec<(usize, usize)> = graph.patch_edges().copied().collect();
        Self::new(n, &patch, true)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_patches + usize::from(self.global.is_some())
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// Edge positions whose target is the global node, in patch order then self.
    pub fn global_edges(&self) -> Option<std::ops::Range<usize>> {
        self.global.map(|g| self.num_edges() - (g + 1)..self.num_edges())
    }
}

/// A bag converted once into model-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedGraph {
    pub bag_id: String,
    /// `N × D` patch features.
    pub features: Tensor,
    pub index: GraphIndex,
    pub label: usize,
    pub instance_labels: Option<Vec<bool>>,
}

impl PreparedGraph {
    pub fn from_bag(bag: &PatchBag) -> Result<Self> {
        let graph = PatchGraph::from_bag(bag.clone())?;
        let index = GraphIndex::from_graph(&graph)?;
        let features = Tensor::matrix(
            bag.len(),
            bag.dim,
            bag.features.iter().map(|&v| f64::from(v)).collect(),
        )?;
        Ok(Self {
            bag_id: bag.bag_id.clone(),
            features,
            index,
            label: bag.label,
            instance_labels: bag.instance_labels.clone(),
        })
    }

    pub fn num_patches(&self) -> usize {
        self.index.num_patches
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

pub fn prepare_all(bags: &[PatchBag]) -> Result<Vec<PreparedGraph>> {
    bags.iter().map(PreparedGraph::from_bag).collect()
}

/// Node states after one layer plus the per-head attention coefficients `[E]`.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub nodes: TensorId,
    pub attention: Vec<TensorId>,
}

/// One multi-head GAT layer with residual connection.
///
/// Per head: `z = H W_m`, `e_ij = leaky_relu(a_tgt·z_i + a_src·z_j)`,
/// `α = softmax` over each target's in-edges, `h'_i = Σ_j α_ij z_j`.
/// Heads are concatenated, passed through elu, added to `H`, and layer-normed
/// when `final_norm` is set.
pub fn gat_layer_forward(
    tape: &mut Tape,
    h: TensorId,
    index: &GraphIndex,
    layer: &GatLayerParams<TensorId>,
    heads: usize,
    final_norm: bool,
) -> Result<LayerOutput> {
    let (n, d) = (tape.value(h).rows(), tape.value(h).cols());
    if n != index.num_nodes() {
        return Err(Error::shape(
            "gat_layer_forward",
            format!("{n} node rows for a graph with {} nodes", index.num_nodes()),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let e = index.num_edges();
    let z = tape.matmul(h, layer.weight)?;
    let mut outputs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for m in 0..heads {
        let zm = tape.slice_cols(z, m * dh, dh)?;
        let a = tape.gather_rows(layer.attention, Arc::from([m].as_slice()))?;
        let a_tgt = tape.slice_cols(a, 0, dh)?;
        let a_tgt = tape.reshape(a_tgt, vec![dh, 1])?;
        let a_src = tape.slice_cols(a, dh, dh)?;
        let a_src = tape.reshape(a_src, vec![dh, 1])?;
        let s_tgt = tape.matmul(zm, a_tgt)?;
        let s_src = tape.matmul(zm, a_src)?;
        let e_tgt = tape.gather_rows(s_tgt, index.dst.clone())?;
        let e_src = tape.gather_rows(s_src, index.src.clone())?;
        let logits = tape.add(e_tgt, e_src)?;
        let logits = tape.leaky_relu(logits, LEAKY_SLOPE)?;
        let logits = tape.reshape(logits, vec![e])?;
        let alpha = tape.segment_softmax(logits, index.dst.clone())?;
        let messages = tape.gather_rows(zm, index.src.clone())?;
        let messages = tape.scale_rows(messages, alpha)?;
        outputs.push(tape.scatter_add_rows(messages, index.dst.clone(), n)?);
        attention.push(alpha);
    }
    let joined = if heads == 1 { outputs[0] } else { tape.concat_cols(&outputs)? };
    let activated = tape.elu(joined)?;
    let residual = tape.add(activated, h)?;
    let nodes = if final_norm {
        let norm = layer
            .norm
            .as_ref()
            .ok_or_else(|| Error::Invariant("layer norm requested on a layer without norm parameters".into()))?;
        tape.layer_norm(residual, norm.gain, norm.bias, LAYER_NORM_EPS)?
    } else {
        residual
    };
    Ok(LayerOutput { nodes, attention })
}
