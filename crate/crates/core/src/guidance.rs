//! Structural guidance: marginal entropy over augmented views, style
//! similarity to a source prototype, patch-wise contrastive content
//! preservation, and their weighted sum with its input-gradient.

use std::rc::Rc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::autograd::{entropy, Graph, Var};
use crate::error::{GdaError, Result};
use crate::imgops::{affine_map, hflip_map, resize_map};
use crate::nets::{Classifier, EmbeddingEncoder, NetsBundle};
use crate::rng::StreamRng;
use crate::tensor::{Real, SampleTensor, Tensor};

/// Loss weights `(marginal, style, content)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub marginal: f64,
    pub style: f64,
    pub content: f64,
}

impl LossWeights {
    pub const ZERO: Self = Self {
        marginal: 0.0,
        style: 0.0,
        content: 0.0,
    };
}

/// Named weight blocks, one per benchmark kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Corruption,
    Rendition,
    Sketch,
    Stylized,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Corruption,
        Preset::Rendition,
        Preset::Sketch,
        Preset::Stylized,
    ];

    pub fn weights(self) -> LossWeights {
        let (marginal, style, content) = match self {
            Preset::Corruption => (100.0, 5000.0, 1500.0),
            Preset::Rendition => (200.0, 5000.0, 1000.0),
            Preset::Sketch => (200.0, 1000.0, 700.0),
            Preset::Stylized => (200.0, 1000.0, 700.0),
        };
        LossWeights {
            marginal,
            style,
            content,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Corruption => "corruption",
            Preset::Rendition => "rendition",
            Preset::Sketch => "sketch",
            Preset::Stylized => "stylized",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub weights: LossWeights,
    /// Augmented views for the marginal term; 0 disables it.
    pub aug_count: usize,
    pub temperature: f64,
    /// Unit-norm style target; may be empty when the style weight is 0.
    pub style_prototype: Vec<f32>,
    pub patch_grid: (usize, usize),
    pub negatives_per_patch: usize,
}

impl GuidanceConfig {
    pub const DEFAULT_AUG_COUNT: usize = 16;

    pub fn new(weights: LossWeights, style_prototype: Vec<f32>) -> Self {
        Self {
            weights,
            aug_count: Self::DEFAULT_AUG_COUNT,
            temperature: 0.1,
            style_prototype,
            patch_grid: (4, 4),
            negatives_per_patch: 15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        for (name, v) in [("marginal", w.marginal), ("style", w.style), ("content", w.content)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GdaError::InvalidParameter(format!("lambda_{name} must be >= 0")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GdaError::InvalidParameter("temperature must be > 0".into()));
        }
        if self.patch_grid.0 == 0 || self.patch_grid.1 == 0 {
            return Err(GdaError::InvalidParameter("patch grid must be nonzero".into()));
        }
        if self.negatives_per_patch == 0 {
            return Err(GdaError::InvalidParameter("negatives_per_patch must be >= 1".into()));
        }
        if self.style_prototype.is_empty() {
            if w.style > 0.0 {
                return Err(GdaError::InvalidParameter(
                    "style weight set without a prototype".into(),
                ));
            }
        } else {
            let n = self
                .style_prototype
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(GdaError::InvalidParameter(format!(
                    "style prototype norm {n} is not 1"
                )));
            }
        }
        Ok(())
    }
}

/// One differentiable augmentation. Every op is affine in the input.
#[derive(Clone, Debug, PartialEq)]
pub enum AugOp {
    /// Rotation (degrees) about the centre, then translation in pixels.
    Affine { degrees: f64, ty: f64, tx: f64 },
    HorizontalFlip,
    /// `s (x + 1) - 1`: scales intensity above black.
    Brightness(f64),
    /// Scales deviations from the per-sample mean.
    Contrast(f64),
    /// Adds a fixed smooth pattern of shape `[h, w]`.
    SmoothNoise(Tensor<f64>),
}

impl AugOp {
    fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        match self {
            AugOp::Affine { degrees, ty, tx } => {
                g.resample(x, Rc::new(affine_map(h, w, *degrees, *ty, *tx)))
            }
            AugOp::HorizontalFlip => g.resample(x, Rc::new(hflip_map(h, w))),
            AugOp::Brightness(f) => {
                let scaled = g.scale(x, T::lit(*f));
                let shift = g.constant(Tensor::full(&s, T::lit(f - 1.0)));
                g.add(scaled, shift)
            }
            AugOp::Contrast(f) => g.contrast(x, T::lit(*f)),
            AugOp::SmoothNoise(pattern) => {
                let plane = pattern.data();
                let data = (0..s.iter().product::<usize>())
                    .map(|i| T::lit(plane[i % plane.len()]))
                    .collect();
                let noise = g.constant(Tensor::new(&s, data).expect("noise shape"));
                g.add(x, noise)
            }
        }
    }
}

/// A chain `A_1 .. A_m` with convex weights `w_1 .. w_m`. Applied to `x`
/// it yields `sum_j w_j (A_j o .. o A_1)(x)`, mixing every prefix of the
/// chain.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationChain {
    ops: Vec<AugOp>,
    weights: Vec<f64>,
}

impl AugmentationChain {
    pub fn new(ops: Vec<AugOp>, weights: Vec<f64>) -> Result<Self> {
        if ops.is_empty() || ops.len() != weights.len() {
            return Err(GdaError::InvalidParameter(
                "chain needs one weight per op".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(GdaError::InvalidParameter(
                "chain weights must be convex".into(),
            ));
        }
        Ok(Self { ops, weights })
    }

    pub fn ops(&self) -> &[AugOp] {
        &self.ops
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Draws a chain of 1 to 3 random ops with Dirichlet(1) weights.
    pub fn random(h: usize, w: usize, rng: &mut StreamRng) -> Self {
        let depth = rng.random_range(1..=3);
        let ops: Vec<AugOp> = (0..depth).map(|_| random_op(h, w, rng)).collect();
        let raw: Vec<f64> = (0..depth).map(|_| Exp1.sample(rng)).collect();
        let sum: f64 = raw.iter().sum();
        let weights = raw.iter().map(|v| v / sum).collect();
        Self { ops, weights }
    }

    /// Applies the chain to a batch node `[n, c, h, w]`.
    pub fn apply_graph<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let mut cur = x;
        let mut acc: Option<Var> = None;
        for (op, &w) in self.ops.iter().zip(&self.weights) {
            cur = op.apply(g, cur);
            let term = g.scale(cur, T::lit(w));
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term),
            });
        }
        acc.expect("nonempty chain")
    }

    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let xv = g.constant(x.unsqueeze0());
        let y = self.apply_graph(&mut g, xv);
        g.value(y).index_outer(0)
    }
}

fn log_uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

fn random_op(h: usize, w: usize, rng: &mut StreamRng) -> AugOp {
    match rng.random_range(0..5) {
        0 => AugOp::Affine {
            degrees: rng.random_range(-15.0..=15.0),
            ty: rng.random_range(-2.0..=2.0),
            tx: rng.random_range(-2.0..=2.0),
        },
        1 => AugOp::HorizontalFlip,
        2 => AugOp::Brightness(log_uniform(rng, 0.8, 1.25)),
        3 => AugOp::Contrast(log_uniform(rng, 0.8, 1.25)),
        _ => {
            let amp: f64 = rng.random_range(0.0..=0.1);
            let (gh, gw) = (h.div_ceil(4), w.div_ceil(4));
            let coarse: Vec<f64> = (0..gh * gw)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    amp * z
                })
                .collect();
            let coarse = Tensor::new(&[gh, gw], coarse).expect("coarse shape");
            AugOp::SmoothNoise(resize_map::<f64>(gh, gw, h, w).apply(&coarse))
        }
    }
}

/// `k` distinct random chains.
pub fn build_augmentations(
    cfg: &GuidanceConfig,
    image_size: (usize, usize),
    rng: &mut StreamRng,
) -> Result<Vec<AugmentationChain>> {
    cfg.validate()?;
    let mut chains: Vec<AugmentationChain> = Vec::with_capacity(cfg.aug_count);
    while chains.len() < cfg.aug_count {
        let c = AugmentationChain::random(image_size.0, image_size.1, rng);
        // a lone flip can repeat; duplicates would add no views
        if !chains.contains(&c) {
            chains.push(c);
        }
    }
    Ok(chains)
}

/// Per-patch column sets for the contrastive term: each patch's own
/// location (the positive) plus its negative locations in the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchNegatives(Rc<Vec<Vec<usize>>>);

impl PatchNegatives {
    /// Every other location is a negative.
    pub fn all(patches: usize) -> Self {
        Self(Rc::new((0..patches).map(|_| (0..patches).collect()).collect()))
    }

    /// Up to `per_patch` negatives per patch, drawn without replacement.
    pub fn sampled(patches: usize, per_patch: usize, rng: &mut StreamRng) -> Self {
        if per_patch + 1 >= patches {
            return Self::all(patches);
        }
        let sets = (0..patches)
            .map(|i| {
                let mut set: Vec<usize> = sample_indices(rng, patches - 1, per_patch)
                    .into_iter()
                    .map(|j| if j >= i { j + 1 } else { j })
                    .collect();
                set.push(i);
                set.sort_unstable();
                set
            })
            .collect();
        Self(Rc::new(sets))
    }

    pub fn from_sets(sets: Vec<Vec<usize>>) -> Result<Self> {
        for (i, s) in sets.iter().enumerate() {
            if !s.contains(&i) || s.iter().any(|&j| j >= sets.len()) {
                return Err(GdaError::InvalidParameter(format!(
                    "patch set {i} must contain its positive and stay in range"
                )));
            }
        }
        Ok(Self(Rc::new(sets)))
    }

    pub fn patches(&self) -> usize {
        self.0.len()
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.0
    }
}

/// Randomness drawn once per sample: augmentation chains and patch
/// negatives.
#[derive(Clone, Debug)]
pub struct GuidanceDraws {
    pub chains: Vec<AugmentationChain>,
    pub negatives: PatchNegatives,
}

impl GuidanceDraws {
    pub fn draw(
        cfg: &GuidanceConfig,
        image_size: (usize, usize),
        aug_rng: &mut StreamRng,
        neg_rng: &mut StreamRng,
    ) -> Result<Self> {
        let chains = build_augmentations(cfg, image_size, aug_rng)?;
        let patches = cfg.patch_grid.0 * cfg.patch_grid.1;
        let negatives = PatchNegatives::sampled(patches, cfg.negatives_per_patch, neg_rng);
        Ok(Self { chains, negatives })
    }
}

fn marginal_entropy_node<T: Real>(
    g: &mut Graph<T>,
    classifier: &Classifier<T>,
    x: Var,
    chains: &[AugmentationChain],
) -> Var {
    let views: Vec<Var> = chains.iter().map(|c| c.apply_graph(g, x)).collect();
    let batch = g.concat(&views, 0);
    let p = classifier.params().bind(g, false);
    let z = classifier.logits(g, &p, batch);
    let probs = g.softmax(z);
    let mean = g.mean_rows(probs);
    g.entropy(mean)
}

fn style_node<T: Real>(
    g: &mut Graph<T>,
    encoder: &EmbeddingEncoder<T>,
    x: Var,
    prototype: &[T],
) -> Result<Var> {
    let p = encoder.params().bind(g, false);
    let e = encoder.embed(g, &p, x);
    if g.value(e).norm() == T::zero() {
        return Err(GdaError::ZeroNormEmbedding);
    }
    let c = g.cosine(e, prototype);
    Ok(g.sum(c))
}

/// Rows of unit-normalized, patch-pooled tap features, `[rows*cols, d]`.
fn patch_rows<T: Real>(g: &mut Graph<T>, feats: Var, grid: (usize, usize)) -> Result<Var> {
    let s = g.shape(feats).to_vec();
    let (fh, fw) = (s[2], s[3]);
    if fh % grid.0 != 0 || fw % grid.1 != 0 || fh / grid.0 != fw / grid.1 {
        return Err(GdaError::InvalidParameter(format!(
            "patch grid {grid:?} does not tile the {fh}x{fw} feature map"
        )));
    }
    let pooled = g.avg_pool(feats, fh / grid.0);
    let rows = g.pixels_to_rows(pooled);
    Ok(g.normalize_rows(rows))
}

fn info_nce_node<T: Real>(
    g: &mut Graph<T>,
    gen_rows: Var,
    ref_rows: Var,
    tau: f64,
    negatives: &PatchNegatives,
) -> Var {
    let logits = g.matmul_nt(gen_rows, ref_rows);
    let logits = g.scale(logits, T::lit(1.0 / tau));
    g.info_nce(logits, negatives.0.clone())
}

fn content_node<T: Real>(
    g: &mut Graph<T>,
    nets: &NetsBundle<T>,
    x: Var,
    x_ref: &Tensor<T>,
    cfg: &GuidanceConfig,
    negatives: &PatchNegatives,
) -> Result<Var> {
    let patches = cfg.patch_grid.0 * cfg.patch_grid.1;
    if negatives.patches() != patches {
        return Err(GdaError::InvalidParameter(format!(
            "{} negative sets for {patches} patches",
            negatives.patches()
        )));
    }
    let fg = nets.tap_features(g, x);
    let gen_rows = patch_rows(g, fg, cfg.patch_grid)?;
    let xr = g.constant(x_ref.unsqueeze0());
    let fr = nets.tap_features(g, xr);
    let ref_rows = patch_rows(g, fr, cfg.patch_grid)?;
    Ok(info_nce_node(g, gen_rows, ref_rows, cfg.temperature, negatives))
}

/// Entropy of the classifier's prediction averaged over the augmented views.
pub fn marginal_entropy<T: Real>(
    classifier: &Classifier<T>,
    x: &Tensor<T>,
    chains: &[AugmentationChain],
) -> Result<T> {
    if chains.is_empty() {
        return Err(GdaError::InvalidParameter(
            "marginal entropy needs at least one chain".into(),
        ));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.unsqueeze0());
    let h = marginal_entropy_node(&mut g, classifier, xv, chains);
    Ok(g.value(h).item())
}

/// Cosine similarity between the embedding of `x` and the prototype.
pub fn style_loss<T: Real>(encoder: &EmbeddingEncoder<T>, x: &Tensor<T>, prototype: &[T]) -> Result<T> {
    let mut g = Graph::new();
    let xv = g.constant(x.unsqueeze0());
    let s = style_node(&mut g, encoder, xv, prototype)?;
    Ok(g.value(s).item())
}

/// Patch InfoNCE between tap features of `x_gen` and `x_ref`.
pub fn content_loss<T: Real>(
    nets: &NetsBundle<T>,
    x_gen: &Tensor<T>,
    x_ref: &Tensor<T>,
    cfg: &GuidanceConfig,
    negatives: &PatchNegatives,
) -> Result<T> {
    x_gen.ensure_shape(x_ref.shape())?;
    cfg.validate()?;
    let mut g = Graph::new();
    let xv = g.constant(x_gen.unsqueeze0());
    let c = content_node(&mut g, nets, xv, x_ref, cfg, negatives)?;
    Ok(g.value(c).item())
}

/// InfoNCE over explicit patch features `[patches, d]` (rows are
/// unit-normalized first).
pub fn patch_info_nce<T: Real>(
    gen: &Tensor<T>,
    reference: &Tensor<T>,
    tau: f64,
    negatives: &PatchNegatives,
) -> Result<T> {
    gen.ensure_shape(reference.shape())?;
    if !(tau > 0.0) {
        return Err(GdaError::InvalidParameter("temperature must be > 0".into()));
    }
    if gen.shape().len() != 2 || gen.shape()[0] != negatives.patches() {
        return Err(GdaError::InvalidParameter("one feature row per patch".into()));
    }
    let mut g = Graph::new();
    let a = g.constant(gen.clone());
    let b = g.constant(reference.clone());
    let a = g.normalize_rows(a);
    let b = g.normalize_rows(b);
    let l = info_nce_node(&mut g, a, b, tau, negatives);
    Ok(g.value(l).item())
}

/// Value and input-gradient of
/// `lm * marginal + lc * content - ls * cos(embed(x), r)` at `x_gen`,
/// with `x_ref` held fixed. Terms with zero weight are skipped, and so is
/// the marginal term when `chains` is empty.
pub fn composite_guidance<T: Real>(
    nets: &NetsBundle<T>,
    cfg: &GuidanceConfig,
    x_gen: &Tensor<T>,
    x_ref: &Tensor<T>,
    draws: &GuidanceDraws,
) -> Result<(f64, Tensor<T>)> {
    x_gen.ensure_shape(x_ref.shape())?;
    x_gen.ensure_finite("guidance input")?;
    let w = cfg.weights;
    let mut g = Graph::new();
    let x = g.variable(x_gen.unsqueeze0());
    let mut terms = Vec::new();
    if w.marginal > 0.0 && !draws.chains.is_empty() {
        let h = marginal_entropy_node(&mut g, &nets.classifier, x, &draws.chains);
        terms.push(g.scale(h, T::lit(w.marginal)));
    }
    if w.content > 0.0 {
        let c = content_node(&mut g, nets, x, x_ref, cfg, &draws.negatives)?;
        terms.push(g.scale(c, T::lit(w.content)));
    }
    if w.style > 0.0 {
        let r: Vec<T> = cfg.style_prototype.iter().map(|&v| T::lit(v as f64)).collect();
        let s = style_node(&mut g, &nets.encoder, x, &r)?;
        terms.push(g.scale(s, T::lit(-w.style)));
    }
    let Some(mut total) = terms.first().copied() else {
        return Ok((0.0, Tensor::zeros(x_gen.shape())));
    };
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    let loss = g.value(total).item().as_f64();
    if !loss.is_finite() {
        return Err(GdaError::NonFinite("guidance loss".into()));
    }
    let grad = g
        .backward(total)
        .take(x)
        .expect("input gradient")
        .reshape(x_gen.shape())?;
    grad.ensure_finite("guidance gradient")?;
    Ok((loss, grad))
}

/// Predictive entropy `H(x)` in nats.
pub fn uncertainty(classifier: &Classifier<f32>, x: &SampleTensor) -> Result<f64> {
    let p = classifier.classify(x)?;
    Ok(entropy(&p).as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ClassifierArch, Denoiser, DenoiserArch, EncoderArch, FeatureTap};
    use crate::rng::{sample_standard_normal, stream, Purpose};

    fn bundle() -> NetsBundle<f64> {
        NetsBundle {
            denoiser: Denoiser::new(DenoiserArch::default(), &mut stream(1, 0, Purpose::Init)),
            classifier: Classifier::new(ClassifierArch::default(), &mut stream(2, 0, Purpose::Init)),
            encoder: EmbeddingEncoder::new(EncoderArch::default(), &mut stream(3, 0, Purpose::Init)),
            tap: FeatureTap::DenoiserEncoder2,
        }
    }

    fn sample(seed: u64) -> Tensor<f64> {
        sample_standard_normal(&[1, 16, 16], &mut stream(seed, 0, Purpose::Data))
            .unwrap()
            .scale(0.5)
            .cast()
    }

    fn unit(d: usize) -> Vec<f32> {
        let v: Vec<f32> = (0..d).map(|i| ((i * 7 % 5) as f32) - 1.5).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn presets_match_table() {
        assert_eq!(
            Preset::Corruption.weights(),
            LossWeights { marginal: 100.0, style: 5000.0, content: 1500.0 }
        );
        assert_eq!(Preset::Rendition.weights().marginal, 200.0);
        assert_eq!(Preset::Sketch.weights().content, 700.0);
        assert_eq!(Preset::from_name("stylized"), Some(Preset::Stylized));
        assert_eq!(Preset::from_name("imagenet"), None);
    }

    #[test]
    fn config_validation() {
        let mut cfg = GuidanceConfig::new(Preset::Corruption.weights(), unit(16));
        assert!(cfg.validate().is_ok());
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = GuidanceConfig::new(Preset::Corruption.weights(), vec![1.0, 1.0]);
        assert!(cfg.validate().is_err());
        let cfg = GuidanceConfig::new(Preset::Corruption.weights(), Vec::new());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn chains_are_reproducible_and_distinct() {
        let cfg = GuidanceConfig::new(LossWeights::ZERO, Vec::new());
        let a = build_augmentations(&cfg, (16, 16), &mut stream(5, 2, Purpose::Augment)).unwrap();
        let b = build_augmentations(&cfg, (16, 16), &mut stream(5, 2, Purpose::Augment)).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, b);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert_ne!(a[i], a[j]);
            }
            let s: f64 = a[i].weights().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let mut none = cfg.clone();
        none.aug_count = 0;
        assert!(build_augmentations(&none, (16, 16), &mut stream(5, 2, Purpose::Augment))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn identity_chain_is_identity() {
        let ops = vec![
            AugOp::Affine { degrees: 0.0, ty: 0.0, tx: 0.0 },
            AugOp::Brightness(1.0),
            AugOp::Contrast(1.0),
            AugOp::SmoothNoise(Tensor::zeros(&[16, 16])),
        ];
        let chain = AugmentationChain::new(ops, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let x = sample(4);
        assert!(chain.apply(&x).max_abs_diff(&x) < 1e-12);
        assert!(AugmentationChain::new(vec![AugOp::HorizontalFlip], vec![0.5]).is_err());
    }

    #[test]
    fn chain_mixes_prefixes() {
        let x = sample(6);
        let chain = AugmentationChain::new(
            vec![AugOp::Brightness(1.2), AugOp::HorizontalFlip],
            vec![0.25, 0.75],
        )
        .unwrap();
        let b = x.map(|v| 1.2 * v + 0.2);
        let flipped = hflip_map::<f64>(16, 16).apply(&b);
        let expected = b.scale(0.25).add(&flipped.scale(0.75)).unwrap();
        assert!(chain.apply(&x).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn info_nce_orthogonal_oracle() {
        let eye = Tensor::new(
            &[4, 4],
            (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let l: f64 = patch_info_nce(&eye, &eye, 1.0, &PatchNegatives::all(4)).unwrap();
        assert!((l - (1.0 + 3.0 / std::f64::consts::E).ln()).abs() < 1e-12);
        assert!((l - 0.74367).abs() < 1e-5);
    }

    #[test]
    fn info_nce_degenerate_cases() {
        let one = Tensor::new(&[1, 3], vec![0.2, 0.4, 0.1]).unwrap();
        let l: f64 = patch_info_nce(&one, &one, 0.5, &PatchNegatives::all(1)).unwrap();
        assert_eq!(l, 0.0);
        let same = Tensor::<f64>::full(&[5, 3], 0.3);
        let l = patch_info_nce(&same, &same, 0.1, &PatchNegatives::all(5)).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(patch_info_nce(&same, &same, 0.0, &PatchNegatives::all(5)).is_err());
    }

    #[test]
    fn sampled_negatives_contain_positive() {
        let n = PatchNegatives::sampled(16, 4, &mut stream(1, 1, Purpose::Negatives));
        for (i, s) in n.sets().iter().enumerate() {
            assert_eq!(s.len(), 5);
            assert!(s.contains(&i));
        }
        assert_eq!(PatchNegatives::sampled(16, 15, &mut stream(1, 1, Purpose::Negatives)), PatchNegatives::all(16));
    }

    #[test]
    fn marginal_entropy_bounds_and_identity() {
        let nets = bundle();
        let x = sample(8);
        let chain = AugmentationChain::random(16, 16, &mut stream(1, 0, Purpose::Augment));
        let same = vec![chain.clone(); 5];
        let h = marginal_entropy(&nets.classifier, &x, &same).unwrap();
        let single: Vec<f64> = nets
            .classifier
            .probabilities(&chain.apply(&x).unsqueeze0())
            .unwrap()
            .into_data();
        assert!((h - entropy(&single)).abs() < 1e-12);
        assert!(h >= 0.0 && h <= 4f64.ln());
        assert!(marginal_entropy(&nets.classifier, &x, &[]).is_err());
    }

    #[test]
    fn style_is_scale_invariant_cosine() {
        let nets = bundle();
        let x = sample(9);
        let r: Vec<f64> = unit(16).iter().map(|&v| v as f64).collect();
        let s = style_loss(&nets.encoder, &x, &r).unwrap();
        let r3: Vec<f64> = r.iter().map(|v| v * 3.0).collect();
        assert!((s - style_loss(&nets.encoder, &x, &r3).unwrap()).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let nets = bundle();
        let cfg = GuidanceConfig::new(LossWeights::ZERO, Vec::new());
        let draws = GuidanceDraws {
            chains: Vec::new(),
            negatives: PatchNegatives::all(16),
        };
        let x = sample(10);
        let (l, gr) = composite_guidance(&nets, &cfg, &x, &x, &draws).unwrap();
        assert_eq!(l, 0.0);
        assert!(gr.data().iter().all(|&v| v == 0.0));
    }

    fn fd_check(weights: LossWeights, seed: u64) {
        let nets = bundle();
        let mut cfg = GuidanceConfig::new(weights, unit(16));
        cfg.aug_count = 3;
        let mut arng = stream(seed, 0, Purpose::Augment);
        let mut nrng = stream(seed, 0, Purpose::Negatives);
        let draws = GuidanceDraws::draw(&cfg, (16, 16), &mut arng, &mut nrng).unwrap();
        let x = sample(seed);
        let xr = sample(seed + 100);
        let (_, grad) = composite_guidance(&nets, &cfg, &x, &xr, &draws).unwrap();
        let scale = grad.max_abs();
        let h = 1e-5;
        for i in (0..256).step_by(23) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fp = composite_guidance(&nets, &cfg, &xp, &xr, &draws).unwrap().0;
            let fm = composite_guidance(&nets, &cfg, &xm, &xr, &draws).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3 * scale);
            assert!(err < 1e-4, "coord {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        fd_check(LossWeights { marginal: 1.0, style: 0.0, content: 0.0 }, 11);
        fd_check(LossWeights { marginal: 0.0, style: 1.0, content: 0.0 }, 12);
        fd_check(LossWeights { marginal: 0.0, style: 0.0, content: 1.0 }, 13);
        fd_check(Preset::Corruption.weights(), 14);
    }

    #[test]
    fn uncertainty_of_uniform_classifier() {
        let mut c: Classifier<f32> = Classifier::new(ClassifierArch::default(), &mut stream(2, 0, Purpose::Init));
        c.zero_output();
        let h = uncertainty(&c, &SampleTensor::zeros(&[1, 16, 16])).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-6);
    }
}
