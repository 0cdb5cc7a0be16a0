//! The three small networks (denoiser, classifier, embedding encoder), their
//! shared parameter storage, and the training loop.

mod classifier;
mod denoiser;
mod train;

pub use classifier::{Classifier, ClassifierArch, EmbeddingEncoder, EncoderArch};
pub use denoiser::{Denoiser, DenoiserArch};
pub use train::{
    train_classifier, train_denoiser, train_encoder, TrainConfig, TrainReport,
};

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::container::Record;
use crate::error::{GdaError, Result};
use crate::rng::StreamRng;
use crate::tensor::{Real, Tensor};

/// Named parameter tensors in a fixed registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    fn register(&mut self, name: &str, t: Tensor<T>) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Places every parameter on the graph, as trainable variables or as
    /// frozen constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    /// Overwrites parameters from `(name, tensor)` records; every parameter
    /// must be present with its registered shape.
    pub fn load(&mut self, records: &[Record]) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let rec = records
                .iter()
                .find(|r| &r.name == name)
                .ok_or_else(|| GdaError::Checkpoint(format!("missing tensor {name}")))?;
            let t: Tensor<T> = rec.tensor.cast();
            t.ensure_shape(slot.shape())
                .map_err(|e| GdaError::Checkpoint(format!("{name}: {e}")))?;
            *slot = t;
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<Record> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| Record {
                name: n.clone(),
                tensor: t.cast(),
            })
            .collect()
    }
}

/// Parameter indices of a convolution layer.
#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: usize,
    b: usize,
}

impl ConvLayer {
    fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        ci: usize,
        co: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let fan_in = ci * 9;
        let w = ps.register(&format!("{name}.weight"), he_uniform(&[co, ci, 3, 3], fan_in, rng));
        let b = ps.register(&format!("{name}.bias"), Tensor::zeros(&[co]));
        Self { w, b }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.conv2d(x, p[self.w], p[self.b])
    }
}

/// Parameter indices of a fully-connected layer.
#[derive(Clone, Copy, Debug)]
struct DenseLayer {
    w: usize,
    b: usize,
}

impl DenseLayer {
    fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        fi: usize,
        fo: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let w = ps.register(&format!("{name}.weight"), he_uniform(&[fo, fi], fi, rng));
        let b = ps.register(&format!("{name}.bias"), Tensor::zeros(&[fo]));
        Self { w, b }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.linear(x, p[self.w], p[self.b])
    }
}

fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Sinusoidal embedding of integer timesteps, `[n, dim]`.
pub fn timestep_embedding<T: Real>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            data.push(T::lit(if i < half { arg.sin() } else { arg.cos() }));
        }
    }
    Tensor::new(&[ts.len(), dim], data).expect("embedding shape")
}

/// Validates a batch `[n, c, h, w]` against an expected per-sample shape.
fn check_input<T: Real>(x: &Tensor<T>, channels: usize, size: (usize, usize)) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels || (s[2], s[3]) != size {
        return Err(GdaError::ShapeMismatch {
            expected: vec![s.first().copied().unwrap_or(1), channels, size.0, size.1],
            got: s.to_vec(),
        });
    }
    x.ensure_finite("network input")
}

/// The feature map used for patch-wise content features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FeatureTap {
    /// The denoiser's second encoder layer.
    #[default]
    DenoiserEncoder2,
    /// The classifier's first convolution, for ablation.
    ClassifierConv1,
}

/// The frozen networks adaptation needs, in one precision.
#[derive(Clone, Debug)]
pub struct NetsBundle<T> {
    pub denoiser: Denoiser<T>,
    pub classifier: Classifier<T>,
    pub encoder: EmbeddingEncoder<T>,
    pub tap: FeatureTap,
}

impl<T: Real> NetsBundle<T> {
    pub fn cast<U: Real>(&self) -> NetsBundle<U> {
        NetsBundle {
            denoiser: self.denoiser.cast(),
            classifier: self.classifier.cast(),
            encoder: self.encoder.cast(),
            tap: self.tap,
        }
    }

    /// Feature-tap activations for a batch.
    pub fn tap_features(&self, g: &mut Graph<T>, x: Var) -> Var {
        match self.tap {
            FeatureTap::DenoiserEncoder2 => {
                let p = self.denoiser.params().bind(g, false);
                self.denoiser.encoder_features(g, &p, x)
            }
            FeatureTap::ClassifierConv1 => {
                let p = self.classifier.params().bind(g, false);
                self.classifier.conv1_features(g, &p, x)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_embedding_distinguishes_steps() {
        let e: Tensor<f64> = timestep_embedding(&[1, 2, 50], 16);
        assert_eq!(e.shape(), &[3, 16]);
        assert_ne!(e.index_outer(0), e.index_outer(1));
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
    }
}
