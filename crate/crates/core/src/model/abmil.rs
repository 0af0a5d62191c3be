use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{Tape, Tensor, TensorId};

use super::params::{xavier, ParamKind, Parameterized};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbmilDims {
    pub input_dim: usize,
    pub hidden: usize,
    pub attention_dim: usize,
    pub classes: usize,
}

impl AbmilDims {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.attention_dim == 0 {
            return Err(Error::Config("attention-MIL widths must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbmilParams<T> {
    pub embed_weight: T,
    pub embed_bias: T,
    pub attn_weight: T,
    pub attn_bias: T,
    /// `attention_dim × 1`
    pub attn_vector: T,
    pub cls_weight: T,
    pub cls_bias: T,
}

impl<T> AbmilParams<T> {
    fn entries(&self) -> [(&'static str, ParamKind, &T); 7] {
        use ParamKind::*;
        [
            ("embed.weight", Weight, &self.embed_weight),
            ("embed.bias", Bias, &self.embed_bias),
            ("attention.weight", Weight, &self.attn_weight),
            ("attention.bias", Bias, &self.attn_bias),
            ("attention.vector", Weight, &self.attn_vector),
            ("classifier.weight", Weight, &self.cls_weight),
            ("classifier.bias", Bias, &self.cls_bias),
        ]
    }

    fn entries_mut(&mut self) -> [(&'static str, ParamKind, &mut T); 7] {
        use ParamKind::*;
        [
            ("embed.weight", Weight, &mut self.embed_weight),
            ("embed.bias", Bias, &mut self.embed_bias),
            ("attention.weight", Weight, &mut self.attn_weight),
            ("attention.bias", Bias, &mut self.attn_bias),
            ("attention.vector", Weight, &mut self.attn_vector),
            ("classifier.weight", Weight, &mut self.cls_weight),
            ("classifier.bias", Bias, &mut self.cls_bias),
        ]
    }
}

/// Attention-based MIL baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct AbmilState {
    pub dims: AbmilDims,
    pub params: AbmilParams<Tensor>,
}

impl AbmilState {
    pub fn init(dims: AbmilDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let (dx, d, da, c) = (dims.input_dim, dims.hidden, dims.attention_dim, dims.classes);
        Ok(Self {
            dims,
            params: AbmilParams {
                embed_weight: xavier(&mut rng, dx, d, &[dx, d]),
                embed_bias: Tensor::zeros(&[d]),
                attn_weight: xavier(&mut rng, d, da, &[d, da]),
                attn_bias: Tensor::zeros(&[da]),
                attn_vector: xavier(&mut rng, da, 1, &[da, 1]),
                cls_weight: xavier(&mut rng, d, c, &[d, c]),
                cls_bias: Tensor::zeros(&[c]),
            },
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AbmilParams<TensorId> {
        let p = &self.params;
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        AbmilParams {
            embed_weight: leaf(&p.embed_weight),
            embed_bias: leaf(&p.embed_bias),
            attn_weight: leaf(&p.attn_weight),
            attn_bias: leaf(&p.attn_bias),
            attn_vector: leaf(&p.attn_vector),
            cls_weight: leaf(&p.cls_weight),
            cls_bias: leaf(&p.cls_bias),
        }
    }

    /// Gradient-free forward pass: `(logits, attention, instance embeddings)`.
    pub fn forward_bag(&self, features: &Tensor) -> Result<(Vec<f64>, Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(features.clone());
        let out = abmil_forward(&mut tape, &params, x)?;
        Ok((
            tape.value(out.logits).data().to_vec(),
            tape.value(out.attention).data().to_vec(),
            tape.value(out.embeddings).clone(),
        ))
    }
}

impl Parameterized for AbmilState {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        for (name, kind, t) in self.params.entries() {
            f(name, kind, t);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        for (name, kind, t) in self.params.entries_mut() {
            f(name, kind, t);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AbmilOutput {
    /// `[C]`
    pub logits: TensorId,
    /// `[N]`, on the simplex.
    pub attention: TensorId,
    /// `N × hidden`
    pub embeddings: TensorId,
}

/// `h = elu(xW + b)`, `a = softmax(wᵀ tanh(hU + c))`, logits from `Σ aᵢ hᵢ`.
pub fn abmil_forward(tape: &mut Tape, params: &AbmilParams<TensorId>, features: TensorId) -> Result<AbmilOutput> {
    let n = tape.value(features).rows();
    if n == 0 {
        return Err(Error::Argument("attention pooling needs at least one instance".into()));
    }
    let h = tape.linear(features, params.embed_weight, params.embed_bias)?;
    let h = tape.elu(h)?;
    let u = tape.linear(h, params.attn_weight, params.attn_bias)?;
    let u = tape.tanh(u)?;
    let scores = tape.matmul(u, params.attn_vector)?;
    let scores = tape.reshape(scores, vec![n])?;
    let attention = tape.segment_softmax(scores, vec![0; n].into())?;
    let weights = tape.reshape(attention, vec![1, n])?;
    let bag = tape.matmul(weights, h)?;
    let logits = tape.linear(bag, params.cls_weight, params.cls_bias)?;
    let c = tape.value(logits).numel();
    let logits = tape.reshape(logits, vec![c])?;
    Ok(AbmilOutput {
        logits,
        attention,
        embeddings: h,
    })
}
