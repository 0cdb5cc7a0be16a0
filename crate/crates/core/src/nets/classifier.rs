use crate::autograd::{softmax_rows, Graph, Var};
use crate::error::{GdaError, Result};
use crate::rng::StreamRng;
use crate::tensor::{Real, SampleTensor, Tensor};

use super::{check_input, ConvLayer, DenseLayer, ParamSet};

/// conv(in,8) pool conv(8,16) pool flatten; shared by classifier and encoder.
#[derive(Clone, Copy, Debug)]
struct Trunk {
    conv1: ConvLayer,
    conv2: ConvLayer,
    flat: usize,
}

impl Trunk {
    fn new<T: Real>(
        ps: &mut ParamSet<T>,
        in_channels: usize,
        image_size: (usize, usize),
        width: usize,
        rng: &mut StreamRng,
    ) -> Self {
        assert!(image_size.0 % 4 == 0 && image_size.1 % 4 == 0);
        let conv1 = ConvLayer::new(ps, "conv1", in_channels, width, rng);
        let conv2 = ConvLayer::new(ps, "conv2", width, 2 * width, rng);
        let flat = 2 * width * (image_size.0 / 4) * (image_size.1 / 4);
        Self { conv1, conv2, flat }
    }

    fn conv1<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let h = self.conv1.apply(g, p, x);
        g.silu(h)
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let h = self.conv1(g, p, x);
        let h = g.avg_pool(h, 2);
        let h = self.conv2.apply(g, p, h);
        let h = g.silu(h);
        let h = g.avg_pool(h, 2);
        let n = g.shape(h)[0];
        g.reshape(h, &[n, self.flat])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierArch {
    pub in_channels: usize,
    pub image_size: (usize, usize),
    pub width: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: (16, 16),
            width: 8,
            hidden: 32,
            classes: 4,
        }
    }
}

/// Small convolutional classifier producing `classes` logits.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    arch: ClassifierArch,
    params: ParamSet<T>,
    trunk: Trunk,
    fc1: DenseLayer,
    fc2: DenseLayer,
}

impl<T: Real> Classifier<T> {
    pub fn new(arch: ClassifierArch, rng: &mut StreamRng) -> Self {
        let mut ps = ParamSet::default();
        let trunk = Trunk::new(&mut ps, arch.in_channels, arch.image_size, arch.width, rng);
        let fc1 = DenseLayer::new(&mut ps, "fc1", trunk.flat, arch.hidden, rng);
        let fc2 = DenseLayer::new(&mut ps, "fc2", arch.hidden, arch.classes, rng);
        Self {
            arch,
            params: ps,
            trunk,
            fc1,
            fc2,
        }
    }

    pub fn arch(&self) -> ClassifierArch {
        self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            arch: self.arch,
            params: self.params.cast(),
            trunk: self.trunk,
            fc1: self.fc1,
            fc2: self.fc2,
        }
    }

    /// Zeroes the output layer so every logit is zero.
    pub fn zero_output(&mut self) {
        let ps = self.params.tensors_mut();
        ps[self.fc2.w].data_mut().fill(T::zero());
        ps[self.fc2.b].data_mut().fill(T::zero());
    }

    pub fn logits(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let h = self.trunk.apply(g, p, x);
        let h = self.fc1.apply(g, p, h);
        let h = g.silu(h);
        self.fc2.apply(g, p, h)
    }

    pub fn conv1_features(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        self.trunk.conv1(g, p, x)
    }

    /// Class probabilities for a batch `[n, c, h, w]`, as `[n, classes]`.
    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_input(x, self.arch.in_channels, self.arch.image_size)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = self.logits(&mut g, &p, xv);
        Ok(softmax_rows(g.value(z)))
    }
}

impl Classifier<f32> {
    /// Softmax prediction for one sample `[c, h, w]`.
    pub fn classify(&self, x: &SampleTensor) -> Result<Vec<f32>> {
        Ok(self.probabilities(&x.unsqueeze0())?.into_data())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderArch {
    pub in_channels: usize,
    pub image_size: (usize, usize),
    pub width: usize,
    pub embed_dim: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: (16, 16),
            width: 8,
            embed_dim: 16,
        }
    }
}

/// Source-vs-shifted discriminator whose penultimate layer is the embedding.
#[derive(Clone, Debug)]
pub struct EmbeddingEncoder<T> {
    arch: EncoderArch,
    params: ParamSet<T>,
    trunk: Trunk,
    embed: DenseLayer,
    head: DenseLayer,
}

impl<T: Real> EmbeddingEncoder<T> {
    pub fn new(arch: EncoderArch, rng: &mut StreamRng) -> Self {
        let mut ps = ParamSet::default();
        let trunk = Trunk::new(&mut ps, arch.in_channels, arch.image_size, arch.width, rng);
        let embed = DenseLayer::new(&mut ps, "embed", trunk.flat, arch.embed_dim, rng);
        let head = DenseLayer::new(&mut ps, "head", arch.embed_dim, 1, rng);
        Self {
            arch,
            params: ps,
            trunk,
            embed,
            head,
        }
    }

    pub fn arch(&self) -> EncoderArch {
        self.arch
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> EmbeddingEncoder<U> {
        EmbeddingEncoder {
            arch: self.arch,
            params: self.params.cast(),
            trunk: self.trunk,
            embed: self.embed,
            head: self.head,
        }
    }

    /// Embeddings `[n, embed_dim]`.
    pub fn embed(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let h = self.trunk.apply(g, p, x);
        self.embed.apply(g, p, h)
    }

    /// Domain logit `[n, 1]`; positive means "shifted".
    pub fn domain_logit(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let e = self.embed(g, p, x);
        let h = g.silu(e);
        self.head.apply(g, p, h)
    }

    /// Domain logits for a batch, as `[n]`.
    pub fn domain_logits(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        check_input(x, self.arch.in_channels, self.arch.image_size)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = self.domain_logit(&mut g, &p, xv);
        Ok(g.value(z).data().to_vec())
    }

    pub fn embed_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_input(x, self.arch.in_channels, self.arch.image_size)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let e = self.embed(&mut g, &p, xv);
        Ok(g.value(e).clone())
    }

    /// Mean unit-normalized embedding over `samples`, renormalized to unit
    /// length: the style target.
    pub fn prototype(&self, samples: &[Tensor<T>]) -> Result<Vec<T>> {
        if samples.is_empty() {
            return Err(GdaError::EmptyDataset);
        }
        let d = self.arch.embed_dim;
        let mut acc = vec![T::zero(); d];
        for chunk in samples.chunks(256) {
            let refs: Vec<&Tensor<T>> = chunk.iter().collect();
            let e = self.embed_batch(&Tensor::stack(&refs)?)?;
            for row in e.data().chunks(d) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if n == T::zero() {
                    return Err(GdaError::ZeroNormEmbedding);
                }
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a = *a + v / n;
                }
            }
        }
        let n = acc.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n == T::zero() {
            return Err(GdaError::ZeroNormEmbedding);
        }
        Ok(acc.into_iter().map(|v| v / n).collect())
    }
}
