use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{Tape, Tensor, TensorId};

/// How a parameter is treated by the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Matrices and attention vectors; subject to weight decay.
    Weight,
    Bias,
    Norm,
    /// Learnable vectors in feature space (mask token, global node).
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

/// Anything exposing its learnable tensors in a fixed order.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, t| n += t.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _, _| names.push(name.to_string()));
        names
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Raw patch feature width `D`.
    pub input_dim: usize,
    /// Latent width `d`; must be divisible by `heads`.
    pub hidden: usize,
    pub heads: usize,
    /// Encoder depth; the decoder mirrors it.
    pub layers: usize,
    pub classes: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: 256,
            heads: 4,
            layers: 2,
            classes: 2,
            classifier_hidden: 256,
        }
    }
}

impl ModelDims {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.heads == 0 || self.classifier_hidden == 0 {
            return Err(Error::Config("model widths and head count must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: T,
    pub bias: T,
}

/// One multi-head GAT layer. Head `m` owns columns `m·d_head..(m+1)·d_head`
/// of `weight`; row `m` of `attention` holds `[a_target ‖ a_source]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams<T> {
    /// `d × d`
    pub weight: T,
    /// `heads × 2·d_head`
    pub attention: T,
    /// Absent on the decoder's last layer.
    pub norm: Option<LayerNormParams<T>>,
}

/// All SRMIL parameters, generic over storage so the same tree can hold
/// tensors, tape handles, or optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub input_weight: T,
    pub input_bias: T,
    pub encoder: Vec<GatLayerParams<T>>,
    pub decoder: Vec<GatLayerParams<T>>,
    pub output_weight: T,
    pub output_bias: T,
    pub mask_token: T,
    pub global_embedding: T,
    pub cls_hidden_weight: T,
    pub cls_hidden_bias: T,
    pub cls_out_weight: T,
    pub cls_out_bias: T,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> ModelParams<U> {
        use ParamKind::*;
        let layer = |prefix: &str, i: usize, l: &GatLayerParams<T>, f: &mut dyn FnMut(&str, ParamKind, &T) -> U| {
            GatLayerParams {
                weight: f(&format!("{prefix}.{i}.weight"), Weight, &l.weight),
                attention: f(&format!("{prefix}.{i}.attention"), Weight, &l.attention),
                norm: l.norm.as_ref().map(|n| LayerNormParams {
                    gain: f(&format!("{prefix}.{i}.norm.gain"), Norm, &n.gain),
                    bias: f(&format!("{prefix}.{i}.norm.bias"), Norm, &n.bias),
                }),
            }
        };
        let input_weight = f("input.weight", Weight, &self.input_weight);
        let input_bias = f("input.bias", Bias, &self.input_bias);
        let encoder = self.encoder.iter().enumerate().map(|(i, l)| layer("encoder", i, l, f)).collect();
        let decoder = self.decoder.iter().enumerate().map(|(i, l)| layer("decoder", i, l, f)).collect();
        ModelParams {
            input_weight,
            input_bias,
            encoder,
            decoder,
            output_weight: f("output.weight", Weight, &self.output_weight),
            output_bias: f("output.bias", Bias, &self.output_bias),
            mask_token: f("mask_token", Embedding, &self.mask_token),
            global_embedding: f("global_embedding", Embedding, &self.global_embedding),
            cls_hidden_weight: f("classifier.hidden.weight", Weight, &self.cls_hidden_weight),
            cls_hidden_bias: f("classifier.hidden.bias", Bias, &self.cls_hidden_bias),
            cls_out_weight: f("classifier.out.weight", Weight, &self.cls_out_weight),
            cls_out_bias: f("classifier.out.bias", Bias, &self.cls_out_bias),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut T)) {
        use ParamKind::*;
        let layer = |prefix: &str, i: usize, l: &mut GatLayerParams<T>, f: &mut dyn FnMut(&str, ParamKind, &mut T)| {
            f(&format!("{prefix}.{i}.weight"), Weight, &mut l.weight);
            f(&format!("{prefix}.{i}.attention"), Weight, &mut l.attention);
            if let Some(n) = l.norm.as_mut() {
                f(&format!("{prefix}.{i}.norm.gain"), Norm, &mut n.gain);
                f(&format!("{prefix}.{i}.norm.bias"), Norm, &mut n.bias);
            }
        };
        f("input.weight", Weight, &mut self.input_weight);
        f("input.bias", Bias, &mut self.input_bias);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            layer("encoder", i, l, f);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            layer("decoder", i, l, f);
        }
        f("output.weight", Weight, &mut self.output_weight);
        f("output.bias", Bias, &mut self.output_bias);
        f("mask_token", Embedding, &mut self.mask_token);
        f("global_embedding", Embedding, &mut self.global_embedding);
        f("classifier.hidden.weight", Weight, &mut self.cls_hidden_weight);
        f("classifier.hidden.bias", Bias, &mut self.cls_hidden_bias);
        f("classifier.out.weight", Weight, &mut self.cls_out_weight);
        f("classifier.out.bias", Bias, &mut self.cls_out_bias);
    }

    /// Leaves in traversal order.
    pub fn flatten(&self) -> Vec<T>
    where
        T: Clone,
    {
        let mut out = Vec::new();
        self.map(&mut |_, _, t| out.push(t.clone()));
        out
    }
}

/// Learnable SRMIL state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub dims: ModelDims,
    pub params: ModelParams<Tensor>,
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated length")
}

pub(crate) fn small_normal(rng: &mut ChaCha8Rng, len: usize) -> Tensor {
    let dist = Normal::new(0.0, 0.02).expect("valid std");
    Tensor::vector((0..len).map(|_| dist.sample(rng)).collect())
}

impl ModelState {
    /// Seeded initialization: Xavier-uniform matrices and attention vectors,
    /// `N(0, 0.02)` mask token and global embedding, unit norm gains, zero biases.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let (d, dh, heads) = (dims.hidden, dims.head_dim(), dims.heads);
        let gat = |rng: &mut ChaCha8Rng, with_norm: bool| GatLayerParams {
            weight: xavier(rng, d, dh, &[d, d]),
            attention: xavier(rng, 2 * dh, 1, &[heads, 2 * dh]),
            norm: with_norm.then(|| LayerNormParams {
                gain: Tensor::full(&[d], 1.0),
                bias: Tensor::zeros(&[d]),
            }),
        };
        let input_weight = xavier(&mut rng, dims.input_dim, d, &[dims.input_dim, d]);
        let encoder = (0..dims.layers).map(|_| gat(&mut rng, true)).collect();
        let decoder = (0..dims.layers).map(|l| gat(&mut rng, l + 1 < dims.layers)).collect();
        let output_weight = xavier(&mut rng, d, dims.input_dim, &[d, dims.input_dim]);
        let mask_token = small_normal(&mut rng, dims.input_dim);
        let global_embedding = small_normal(&mut rng, dims.input_dim);
        let h = dims.classifier_hidden;
        let cls_hidden_weight = xavier(&mut rng, d, h, &[d, h]);
        let cls_out_weight = xavier(&mut rng, h, dims.classes, &[h, dims.classes]);
        Ok(Self {
            dims,
            params: ModelParams {
                input_weight,
                input_bias: Tensor::zeros(&[d]),
                encoder,
                decoder,
                output_weight,
                output_bias: Tensor::zeros(&[dims.input_dim]),
                mask_token,
                global_embedding,
                cls_hidden_weight,
                cls_hidden_bias: Tensor::zeros(&[h]),
                cls_out_weight,
                cls_out_bias: Tensor::zeros(&[dims.classes]),
            },
        })
    }

    /// Registers every tensor on the tape, as parameters or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelParams<TensorId> {
        self.params.map(&mut |_, _, t| tape.leaf(t.clone(), trainable))
    }
}

impl Parameterized for ModelState {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.params.map(&mut |n, k, t| f(n, k, t));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.params.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> ModelDims {
        ModelDims {
            input_dim: 16,
            hidden: 8,
            heads: 2,
            layers: 2,
            classes: 2,
            classifier_hidden: 8,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelState::init(desk(), 9).unwrap();
        let b = ModelState::init(desk(), 9).unwrap();
        let c = ModelState::init(desk(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn norm_gains_start_at_one() {
        let s = ModelState::init(desk(), 1).unwrap();
        s.visit_params(&mut |name, kind, t| {
            if name.ends_with("norm.gain") {
                assert_eq!(kind, ParamKind::Norm);
                assert!(t.data().iter().all(|&v| v == 1.0));
            }
            if kind == ParamKind::Bias || name.ends_with("norm.bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        });
        assert!(s.params.decoder.last().unwrap().norm.is_none());
        assert!(s.params.encoder.iter().all(|l| l.norm.is_some()));
    }

    #[test]
    fn param_count_matches_declared_shapes() {
        let dims = desk();
        let s = ModelState::init(dims, 1).unwrap();
        // enumerate every declared shape by hand: D=16, d=8, heads=2 (d_head=4), L=2, C=2, hidden=8
        let shapes: Vec<Vec<usize>> = vec![
            vec![16, 8], vec![8],                         // input projection
            vec![8, 8], vec![2, 8], vec![8], vec![8],     // encoder 0
            vec![8, 8], vec![2, 8], vec![8], vec![8],     // encoder 1
            vec![8, 8], vec![2, 8], vec![8], vec![8],     // decoder 0
            vec![8, 8], vec![2, 8],                       // decoder 1 (no norm)
            vec![8, 16], vec![16],                        // output projection
            vec![16], vec![16],                           // mask token, global embedding
            vec![8, 8], vec![8], vec![8, 2], vec![2],     // classifier
        ];
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(expected, 770);
        assert_eq!(s.param_count(), expected);
        let mut seen = Vec::new();
        s.visit_params(&mut |_, _, t| seen.push(t.shape().to_vec()));
        assert_eq!(seen, shapes);
    }

    #[test]
    fn heads_must_divide_hidden() {
        let dims = ModelDims { hidden: 9, ..desk() };
        assert!(matches!(ModelState::init(dims, 0), Err(Error::Config(_))));
    }

    #[test]
    fn flatten_follows_visit_order() {
        let s = ModelState::init(desk(), 2).unwrap();
        let flat = s.params.flatten();
        let mut visited = Vec::new();
        s.visit_params(&mut |_, _, t| visited.push(t.clone()));
        assert_eq!(flat.len(), visited.len());
        assert_eq!(flat, visited);
    }
}
