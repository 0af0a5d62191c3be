//! Random node masking and the three-term training objective.
//!
//! A training step masks a fixed-size random subset of patches, reconstructs
//! their raw features from the masked graph, classifies both the masked and
//! the complete graph, and combines the three losses with fixed weights.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{classify, decode, encode, ModelParams, ModelState, PreparedGraph};
use crate::tensor::{Tape, Tensor, TensorId};

/// Sorted, duplicate-free patch indices selected for masking.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    indices: Vec<usize>,
    num_patches: usize,
    ratio: f64,
}

/// `round(ratio · n)` with halves rounded up.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).min(n)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!("mask ratio {ratio} is outside [0, 1]")));
    }
    Ok(())
}

impl MaskPlan {
    pub fn new(num_patches: usize, mut indices: Vec<usize>, ratio: f64) -> Result<Self> {
        check_ratio(ratio)?;
        indices.sort_unstable();
        if let Some(&last) = indices.last() {
            if last >= num_patches {
                return Err(Error::Invariant(format!(
                    "mask index {last} is not a patch node (N = {num_patches})"
                )));
            }
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument("mask indices repeat".into()));
        }
        Ok(Self {
            indices,
            num_patches,
            ratio,
        })
    }

    pub fn empty(num_patches: usize) -> Self {
        Self {
            indices: Vec::new(),
            num_patches,
            ratio: 0.0,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    fn index(&self) -> Arc<[usize]> {
        self.indices.as_slice().into()
    }
}

/// Draws `round(ratio · n)` distinct patches uniformly at random.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    if n == 0 {
        return Err(Error::Argument("cannot mask an empty bag".into()));
    }
    let k = mask_count(n, ratio);
    let indices = rand::seq::index::sample(rng, n, k).into_vec();
    MaskPlan::new(n, indices, ratio)
}

/// Masked copy of `features` with every planned row replaced by `token`.
pub fn apply_mask(tape: &mut Tape, features: TensorId, plan: &MaskPlan, token: TensorId) -> Result<TensorId> {
    let rows = tape.value(features).rows();
    if rows != plan.num_patches {
        return Err(Error::shape(
            "apply_mask",
            format!("plan for {} patches applied to {rows} rows", plan.num_patches),
        ));
    }
    tape.overwrite_rows(features, plan.index(), token)
}

/// Value-level [`apply_mask`].
pub fn apply_mask_values(features: &Tensor, plan: &MaskPlan, token: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let t = tape.constant(token.clone());
    let out = apply_mask(&mut tape, x, plan, t)?;
    Ok(tape.value(out).clone())
}

/// Mean cosine distance over masked rows; a constant 0 for an empty plan.
pub fn recon_loss(tape: &mut Tape, original: TensorId, reconstructed: TensorId, plan: &MaskPlan) -> Result<TensorId> {
    let (a, b) = (tape.value(original).shape().to_vec(), tape.value(reconstructed).shape().to_vec());
    if a != b {
        return Err(Error::shape("recon_loss", format!("{a:?} vs {b:?}")));
    }
    if plan.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let v = tape.gather_rows(original, plan.index())?;
    let r = tape.gather_rows(reconstructed, plan.index())?;
    let dist = tape.row_cosine_distance(v, r)?;
    tape.mean(dist)
}

pub fn classification_loss(tape: &mut Tape, logits: TensorId, label: usize) -> Result<TensorId> {
    tape.cross_entropy(logits, label)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub comp: f64,
    pub corr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.8,
            comp: 0.1,
            corr: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("recon", self.recon), ("comp", self.comp), ("corr", self.corr)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub comp: f64,
    pub corr: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            recon: sum(|b| b.recon),
            comp: sum(|b| b.comp),
            corr: sum(|b| b.corr),
            total: sum(|b| b.total),
        }
    }
}

/// `λ_recon·recon + λ_comp·comp + λ_corr·corr`.
pub fn joint_loss(recon: f64, comp: f64, corr: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("reconstruction loss", recon), ("complete-view loss", comp), ("corrupted-view loss", corr)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        recon,
        comp,
        corr,
        total: w.recon * recon + w.comp * comp + w.corr * corr,
    })
}

/// Tape version of [`joint_loss`]; the total node is what gets differentiated.
pub fn joint_loss_on_tape(
    tape: &mut Tape,
    recon: TensorId,
    comp: TensorId,
    corr: TensorId,
    w: &LossWeights,
) -> Result<(TensorId, LossBreakdown)> {
    let breakdown = joint_loss(
        tape.value(recon).item(),
        tape.value(comp).item(),
        tape.value(corr).item(),
        w,
    )?;
    let r = tape.scale(recon, w.recon)?;
    let c = tape.scale(comp, w.comp)?;
    let k = tape.scale(corr, w.corr)?;
    let rc = tape.add(r, c)?;
    let total = tape.add(rc, k)?;
    Ok((total, LossBreakdown { total: tape.value(total).item(), ..breakdown }))
}

/// One bag's forward pass for training, recorded on `tape`.
#[derive(Clone, Debug)]
pub struct ObjectiveGraph {
    pub params: ModelParams<TensorId>,
    pub total: TensorId,
    pub breakdown: LossBreakdown,
    pub plan: MaskPlan,
}

/// Mask, encode the masked view once, decode and classify it, then encode
/// and classify the complete view, and weight the three losses.
pub fn srmil_objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    state: &ModelState,
    graph: &PreparedGraph,
    mask_ratio: f64,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<ObjectiveGraph> {
    let params = state.bind(tape, true);
    let plan = sample_mask(graph.num_patches(), mask_ratio, rng)?;
    let original = tape.constant(graph.features.clone());
    let masked = apply_mask(tape, original, &plan, params.mask_token)?;
    let corrupted = encode(tape, &params, &state.dims, masked, &graph.index)?;
    let reconstructed = decode(tape, &params, &state.dims, &corrupted, &graph.index)?;
    let recon = recon_loss(tape, original, reconstructed, &plan)?;
    let corr_logits = classify(tape, &params, &corrupted, &graph.index)?;
    let corr = classification_loss(tape, corr_logits, graph.label)?;
    let complete = encode(tape, &params, &state.dims, original, &graph.index)?;
    let comp_logits = classify(tape, &params, &complete, &graph.index)?;
    let comp = classification_loss(tape, comp_logits, graph.label)?;
    let (total, breakdown) = joint_loss_on_tape(tape, recon, comp, corr, weights)?;
    Ok(ObjectiveGraph {
        params,
        total,
        breakdown,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::PatchBag;
    use crate::model::ModelDims;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy_graph(seed: u64) -> PreparedGraph {
        let mut r = rng(seed);
        let coords: Vec<[i32; 2]> = (0..3).flat_map(|y| (0..4).map(move |x| [x, y])).collect();
        let bag = PatchBag {
            bag_id: "toy".into(),
            dim: 6,
            features: (0..72).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
            coords,
            label: 0,
            instance_labels: None,
        };
        PreparedGraph::from_bag(&bag).unwrap()
    }

    fn toy_state() -> ModelState {
        ModelState::init(
            ModelDims {
                input_dim: 6,
                hidden: 4,
                heads: 2,
                layers: 2,
                classes: 2,
                classifier_hidden: 4,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn mask_sizes() {
        let plan = sample_mask(10, 0.7, &mut rng(0)).unwrap();
        assert_eq!(plan.len(), 7);
        assert!(plan.indices().windows(2).all(|w| w[0] < w[1]));
        assert!(sample_mask(10, 0.0, &mut rng(0)).unwrap().is_empty());
        assert_eq!(sample_mask(1, 0.7, &mut rng(0)).unwrap().len(), 1);
        assert_eq!(mask_count(5, 0.5), 3);
        assert_eq!(mask_count(4, 1.0), 4);
        assert!(sample_mask(4, 1.5, &mut rng(0)).is_err());
        assert!(sample_mask(0, 0.5, &mut rng(0)).is_err());
    }

    #[test]
    fn mask_is_deterministic_given_rng() {
        let a = sample_mask(50, 0.3, &mut rng(9)).unwrap();
        let b = sample_mask(50, 0.3, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_marginals_are_uniform() {
        let mut r = rng(123);
        let mut counts = [0usize; 20];
        let draws = 10_000;
        for _ in 0..draws {
            for &i in sample_mask(20, 0.7, &mut r).unwrap().indices() {
                counts[i] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.7).abs() < 0.02, "{freq}");
        }
    }

    #[test]
    fn plan_rejects_global_node() {
        assert!(matches!(MaskPlan::new(4, vec![4], 0.25), Err(Error::Invariant(_))));
        assert!(MaskPlan::new(4, vec![1, 1], 0.5).is_err());
    }

    #[test]
    fn masking_substitutes_rows_only() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let token = Tensor::vector(vec![-9.0, 9.0]);
        assert_eq!(apply_mask_values(&x, &MaskPlan::empty(3), &token).unwrap(), x);
        let plan = MaskPlan::new(3, vec![2, 0], 2.0 / 3.0).unwrap();
        let m = apply_mask_values(&x, &plan, &token).unwrap();
        assert_eq!(m.row(0), token.data());
        assert_eq!(m.row(2), token.data());
        assert_eq!(m.row(1).iter().map(|v| v.to_bits()).collect::<Vec<_>>(), vec![3f64.to_bits(), 4f64.to_bits()]);
        assert_eq!(x.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn reconstruction_loss_examples() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let all = MaskPlan::new(3, vec![0, 1, 2], 1.0).unwrap();
        let same = tape.constant(x.clone());
        let l = recon_loss(&mut tape, v, same, &all).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
        let scaled = tape.constant(x.map(|v| 3.0 * v));
        let l = recon_loss(&mut tape, v, scaled, &all).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        let r = Tensor::from_rows(&[[1.0, 2.0], [-3.0, 1.0], [7.0, 7.0]]).unwrap();
        let r = tape.constant(r);
        let two = MaskPlan::new(3, vec![0, 1], 2.0 / 3.0).unwrap();
        let l = recon_loss(&mut tape, v, r, &two).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);

        let l = recon_loss(&mut tape, v, r, &MaskPlan::empty(3)).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(!tape.requires_grad(l));
    }

    #[test]
    fn recon_gradient_vanishes_on_unmasked_rows() {
        let mut r = rng(4);
        let x = Tensor::matrix(6, 3, (0..18).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = Tensor::matrix(6, 3, (0..18).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let plan = MaskPlan::new(6, vec![1, 4], 1.0 / 3.0).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let rec = tape.param(y);
        let l = recon_loss(&mut tape, v, rec, &plan).unwrap();
        let grads = tape.backward(l).unwrap();
        let g = grads.get(rec).unwrap();
        for i in [0, 2, 3, 5] {
            assert!(g.row(i).iter().all(|&v| v == 0.0));
        }
        for i in [1, 4] {
            assert!(g.row(i).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn classification_loss_examples() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::vector(vec![0.3, 0.3]));
        let l = classification_loss(&mut tape, uniform, 1).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let right = tape.constant(Tensor::vector(vec![20.0, 0.0]));
        let l = classification_loss(&mut tape, right, 0).unwrap();
        assert!(tape.value(l).item() < 1e-8);
        let wrong = tape.constant(Tensor::vector(vec![10.0, 0.0]));
        let l = classification_loss(&mut tape, wrong, 1).unwrap();
        assert!((tape.value(l).item() - 10.0).abs() < 1e-4);
    }

    #[test]
    fn joint_loss_examples() {
        let b = joint_loss(0.5, 0.3, 0.2, &LossWeights::default()).unwrap();
        assert!((b.total - 0.95).abs() < 1e-12);
        assert_eq!(joint_loss(0.0, 0.0, 0.0, &LossWeights::default()).unwrap().total, 0.0);
        let only_comp = LossWeights {
            recon: 0.0,
            comp: 1.0,
            corr: 0.0,
        };
        assert_eq!(joint_loss(0.7, 0.4, 0.9, &only_comp).unwrap().total, 0.4);
        let w = LossWeights::default();
        let doubled = LossWeights { recon: 2.0 * w.recon, ..w };
        let a = joint_loss(0.5, 0.0, 0.0, &w).unwrap().total;
        let b = joint_loss(0.5, 0.0, 0.0, &doubled).unwrap().total;
        assert_eq!(b, 2.0 * a);
        assert!(matches!(joint_loss(f64::NAN, 0.0, 0.0, &w), Err(Error::NonFinite(_))));
        assert!(LossWeights { recon: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn mask_token_receives_gradient() {
        let g = toy_graph(1);
        let state = toy_state();
        let mut tape = Tape::new();
        let obj = srmil_objective(&mut tape, &state, &g, 0.5, &LossWeights::default(), &mut rng(2)).unwrap();
        assert_eq!(obj.plan.len(), 6);
        let grads = tape.backward(obj.total).unwrap();
        let token = grads.get(obj.params.mask_token).unwrap();
        assert!(token.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn comp_only_leaves_decoder_untouched() {
        let g = toy_graph(2);
        let state = toy_state();
        let w = LossWeights {
            recon: 0.0,
            comp: 1.0,
            corr: 0.0,
        };
        let mut tape = Tape::new();
        let obj = srmil_objective(&mut tape, &state, &g, 0.7, &w, &mut rng(3)).unwrap();
        let grads = tape.backward(obj.total).unwrap();
        let mut nonzero = Vec::new();
        obj.params.map(&mut |name, _, &id| {
            let g = grads.get_or_zeros(id, &tape);
            if g.data().iter().any(|&v| v != 0.0) {
                nonzero.push(name.to_string());
            }
        });
        assert!(nonzero.iter().all(|n| !n.starts_with("decoder") && !n.starts_with("output") && n != "mask_token"));
        assert!(nonzero.iter().any(|n| n.starts_with("encoder")));
        assert!(nonzero.iter().any(|n| n.starts_with("classifier")));
        assert_eq!(obj.breakdown.total, obj.breakdown.comp);
    }
}
