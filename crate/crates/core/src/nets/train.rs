use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{GdaError, Result};
use crate::guidance::AugmentationChain;
use crate::rng::{sample_standard_normal, stream, Purpose, StreamRng};
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::tensor::{SampleTensor, Tensor};

use super::{
    Classifier, ClassifierArch, Denoiser, DenoiserArch, EmbeddingEncoder, EncoderArch, ParamSet,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub loss_curve: Vec<f64>,
    pub wall_seconds: f64,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl Adam {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(ps: &ParamSet<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = ps.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, ps: &mut ParamSet<f32>, grads: &[Option<Tensor<f32>>], lr: f32) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (i, t) in ps.tensors_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (p, &gj)) in t.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * gj;
                v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * gj * gj;
                *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Minibatch Adam over `n_items` items with a cosine learning-rate decay to
/// a tenth of the initial rate. `loss_fn` builds the loss for one batch.
fn fit(
    ps: &mut ParamSet<f32>,
    n_items: usize,
    cfg: &TrainConfig,
    rng: &mut StreamRng,
    mut loss_fn: impl FnMut(&mut Graph<f32>, &[Var], &[usize], &mut StreamRng) -> Var,
) -> Result<TrainReport> {
    if n_items == 0 {
        return Err(GdaError::EmptyDataset);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(GdaError::InvalidParameter(
            "epochs, batch_size and learning_rate must be positive".into(),
        ));
    }
    let start = Instant::now();
    let mut adam = Adam::new(ps);
    let batches_per_epoch = n_items.div_ceil(cfg.batch_size);
    let total = (cfg.epochs * batches_per_epoch) as f64;
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let progress = step as f64 / total;
            let lr = cfg.learning_rate * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
            let mut g = Graph::new();
            let p = ps.bind(&mut g, true);
            let loss = loss_fn(&mut g, &p, batch, rng);
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(GdaError::Diverged { epoch, loss: value });
            }
            let mut grads = g.backward(loss);
            let pg: Vec<Option<Tensor<f32>>> = p.iter().map(|&v| grads.take(v)).collect();
            adam.update(ps, &pg, lr as f32);
            sum += value;
            step += 1;
        }
        curve.push(sum / batches_per_epoch as f64);
    }
    Ok(TrainReport {
        epochs: cfg.epochs,
        final_loss: *curve.last().expect("at least one epoch"),
        loss_curve: curve,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn stack_batch(samples: &[SampleTensor], idx: &[usize]) -> Result<SampleTensor> {
    let refs: Vec<&SampleTensor> = idx.iter().map(|&i| &samples[i]).collect();
    Tensor::stack(&refs)
}

/// Noise-prediction regression: minimizes `E |eps - eps_theta(x_t, t)|^2`
/// with `t` uniform over the schedule.
pub fn train_denoiser(
    dataset: &[SampleTensor],
    sched: &NoiseSchedule,
    arch: DenoiserArch,
    cfg: &TrainConfig,
) -> Result<(Denoiser<f32>, TrainReport)> {
    if dataset.is_empty() {
        return Err(GdaError::EmptyDataset);
    }
    if arch.total_steps != sched.total_steps() {
        return Err(GdaError::InvalidParameter(
            "denoiser total_steps differs from schedule".into(),
        ));
    }
    let mut model = Denoiser::new(arch, &mut stream(cfg.seed, 0, Purpose::Init));
    let mut rng = stream(cfg.seed, 0, Purpose::Batches);
    let mut params = model.params().clone();
    let t_max = sched.total_steps();
    let report = fit(&mut params, dataset.len(), cfg, &mut rng, |g, p, batch, rng| {
        let mut noisy = Vec::with_capacity(batch.len());
        let mut noises = Vec::with_capacity(batch.len());
        let mut ts = Vec::with_capacity(batch.len());
        for &i in batch {
            let t = rng.random_range(1..=t_max);
            let eps = sample_standard_normal(dataset[i].shape(), rng).expect("noise shape");
            noisy.push(forward_diffuse(&dataset[i], t, &eps, sched).expect("valid t"));
            noises.push(eps);
            ts.push(t);
        }
        let x = g.constant(Tensor::stack(&noisy.iter().collect::<Vec<_>>()).expect("batch"));
        let target = g.constant(Tensor::stack(&noises.iter().collect::<Vec<_>>()).expect("batch"));
        let pred = model.forward(g, p, x, &ts);
        g.mse(pred, target)
    })?;
    *model.params_mut() = params;
    Ok((model, report))
}

/// Cross-entropy training on labeled samples. Each batch item is replaced
/// by a random augmentation chain's view with probability `augment`.
pub fn train_classifier(
    samples: &[SampleTensor],
    labels: &[usize],
    arch: ClassifierArch,
    cfg: &TrainConfig,
    augment: f64,
) -> Result<(Classifier<f32>, TrainReport)> {
    if samples.len() != labels.len() {
        return Err(GdaError::InvalidParameter("samples/labels length mismatch".into()));
    }
    if labels.iter().any(|&y| y >= arch.classes) {
        return Err(GdaError::InvalidParameter("label out of range".into()));
    }
    if !(0.0..=1.0).contains(&augment) {
        return Err(GdaError::InvalidParameter("augment must be in [0, 1]".into()));
    }
    let mut model = Classifier::new(arch, &mut stream(cfg.seed, 0, Purpose::Init));
    let mut rng = stream(cfg.seed, 0, Purpose::Batches);
    let mut params = model.params().clone();
    let report = fit(&mut params, samples.len(), cfg, &mut rng, |g, p, batch, rng| {
        let views: Vec<SampleTensor> = batch
            .iter()
            .map(|&i| {
                let x = &samples[i];
                if augment > 0.0 && rng.random_bool(augment) {
                    let s = x.shape();
                    AugmentationChain::random(s[1], s[2], rng).apply(x)
                } else {
                    x.clone()
                }
            })
            .collect();
        let x = g.constant(Tensor::stack(&views.iter().collect::<Vec<_>>()).expect("batch"));
        let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let z = model.logits(g, p, x);
        g.cross_entropy(z, &ys)
    })?;
    *model.params_mut() = params;
    Ok((model, report))
}

/// Binary domain discrimination: source (0) versus shifted (1).
pub fn train_encoder(
    source: &[SampleTensor],
    shifted: &[SampleTensor],
    arch: EncoderArch,
    cfg: &TrainConfig,
) -> Result<(EmbeddingEncoder<f32>, TrainReport)> {
    if source.is_empty() || shifted.is_empty() {
        return Err(GdaError::EmptyDataset);
    }
    let all: Vec<SampleTensor> = source.iter().chain(shifted).cloned().collect();
    let targets: Vec<f32> = (0..all.len())
        .map(|i| if i < source.len() { 0.0 } else { 1.0 })
        .collect();
    let mut model = EmbeddingEncoder::new(arch, &mut stream(cfg.seed, 0, Purpose::Init));
    let mut rng = stream(cfg.seed, 0, Purpose::Batches);
    let mut params = model.params().clone();
    let report = fit(&mut params, all.len(), cfg, &mut rng, |g, p, batch, _| {
        let x = g.constant(stack_batch(&all, batch).expect("batch"));
        let ys: Vec<f32> = batch.iter().map(|&i| targets[i]).collect();
        let z = model.domain_logit(g, p, x);
        g.bce_with_logits(z, &ys)
    })?;
    *model.params_mut() = params;
    Ok((model, report))
}
