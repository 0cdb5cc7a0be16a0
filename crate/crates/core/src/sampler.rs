//! Reverse-time sampling and the adaptation drivers.

use std::time::Instant;

use crate::autograd::entropy;
use crate::error::{GdaError, Result};
use crate::guidance::{composite_guidance, GuidanceConfig, GuidanceDraws};
use crate::imgops::low_pass;
use crate::nets::{Classifier, Denoiser, NetsBundle};
use crate::rng::{sample_standard_normal, stream, Purpose, StreamRng};
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::tensor::{argmax, SampleTensor};

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    fn predict_eps(&self, x: &SampleTensor, t: usize) -> Result<SampleTensor>;
}

impl NoisePredictor for Denoiser<f32> {
    fn predict_eps(&self, x: &SampleTensor, t: usize) -> Result<SampleTensor> {
        Denoiser::predict_eps(self, x, t)
    }
}

/// `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn predict_x0(
    x_t: &SampleTensor,
    t: usize,
    eps_hat: &SampleTensor,
    sched: &NoiseSchedule,
) -> Result<SampleTensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (b, d) = ((1.0 - ab).sqrt(), ab.sqrt());
    x_t.zip_map(eps_hat, |x, e| ((x as f64 - b * e as f64) / d) as f32)
}

/// The same estimate written as `sqrt(1/abar) x_t - sqrt((1-abar)/abar) eps`.
pub fn predict_x0_scaled(
    x_t: &SampleTensor,
    t: usize,
    eps_hat: &SampleTensor,
    sched: &NoiseSchedule,
) -> Result<SampleTensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = ((1.0 / ab).sqrt(), ((1.0 - ab) / ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| (a * x as f64 - b * e as f64) as f32)
}

fn fresh_noise(like: &SampleTensor, rng: &mut StreamRng) -> Result<SampleTensor> {
    sample_standard_normal(like.shape(), rng)
}

/// Ancestral update `t -> t-1` from a given noise prediction.
pub fn ddpm_update(
    x_t: &SampleTensor,
    eps_hat: &SampleTensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<SampleTensor> {
    sched.check_t(t)?;
    let (a, ab) = (sched.alpha(t), sched.alpha_bar(t));
    let c = (1.0 - a) / (1.0 - ab).sqrt();
    let inv = 1.0 / a.sqrt();
    let mean = x_t.zip_map(eps_hat, |x, e| (inv * (x as f64 - c * e as f64)) as f32)?;
    let sigma = sched.sigma(t);
    if sigma == 0.0 || t == 1 {
        return Ok(mean);
    }
    let z = fresh_noise(x_t, rng)?;
    mean.zip_map(&z, |m, n| (m as f64 + sigma * n as f64) as f32)
}

pub fn ddpm_step(
    x_t: &SampleTensor,
    t: usize,
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<SampleTensor> {
    sched.check_t(t)?;
    let eps = model.predict_eps(x_t, t)?;
    ddpm_update(x_t, &eps, t, sched, rng)
}

fn check_pair(t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<()> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(GdaError::InvalidStepPair { t, t_prev });
    }
    Ok(())
}

/// `sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev - s^2) eps_hat + s z`, with
/// `s = sigma_t` except at the final step, where it is 0.
pub fn ddim_update(
    x_t: &SampleTensor,
    eps_hat: &SampleTensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<SampleTensor> {
    check_pair(t, t_prev, sched)?;
    let x0 = predict_x0(x_t, t, eps_hat, sched)?;
    let abp = sched.alpha_bar(t_prev);
    let sigma = if t_prev == 0 { 0.0 } else { sched.sigma(t) };
    let rest = 1.0 - abp - sigma * sigma;
    if rest < 0.0 {
        return Err(GdaError::InvalidParameter(format!(
            "sigma_{t}^2 exceeds 1 - alpha_bar_{t_prev}"
        )));
    }
    let (a, b) = (abp.sqrt(), rest.sqrt());
    let mean = x0.zip_map(eps_hat, |x, e| (a * x as f64 + b * e as f64) as f32)?;
    if sigma == 0.0 {
        return Ok(mean);
    }
    let z = fresh_noise(x_t, rng)?;
    mean.zip_map(&z, |m, n| (m as f64 + sigma * n as f64) as f32)
}

pub fn ddim_step(
    x_t: &SampleTensor,
    t: usize,
    t_prev: usize,
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<SampleTensor> {
    check_pair(t, t_prev, sched)?;
    let eps = model.predict_eps(x_t, t)?;
    ddim_update(x_t, &eps, t, t_prev, sched, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    /// Ancestral steps; only consecutive timesteps.
    Ddpm,
    Ddim,
}

/// How the reverse timesteps are spaced below the start step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepSpacing {
    /// `t*, t*-s, t*-2s, ..` then 0.
    Stride(usize),
    /// Exactly `n` steps at `t_i = ceil(t* (n - i) / n)`.
    Count(usize),
}

/// Strictly decreasing timesteps from `start` down to and including 0.
pub fn step_sequence(start: usize, spacing: StepSpacing) -> Result<Vec<usize>> {
    if start == 0 {
        return Err(GdaError::InvalidParameter("start step must be >= 1".into()));
    }
    match spacing {
        StepSpacing::Stride(0) | StepSpacing::Count(0) => Err(GdaError::InvalidParameter(
            "stride and step count must be >= 1".into(),
        )),
        StepSpacing::Stride(s) => {
            let mut ts: Vec<usize> = (0..).map(|i| i * s).take_while(|&d| d < start).map(|d| start - d).collect();
            ts.push(0);
            Ok(ts)
        }
        StepSpacing::Count(n) if n > start => Err(GdaError::InvalidParameter(format!(
            "{n} steps do not fit below t*={start}"
        ))),
        StepSpacing::Count(n) => Ok((0..=n).map(|i| (start * (n - i)).div_ceil(n)).collect()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerPlan {
    pub start_step: usize,
    pub spacing: StepSpacing,
    pub mode: SamplerMode,
    pub guidance_scale: f64,
    pub clamp: Option<(f32, f32)>,
    /// Redraw augmentation chains at every step instead of once per sample.
    pub redraw_per_step: bool,
}

impl SamplerPlan {
    pub const DEFAULT_CLAMP: (f32, f32) = (-1.2, 1.2);

    /// `t* = T`, stride 5, DDIM, unit scale, clamped.
    pub fn reference(total_steps: usize) -> Self {
        Self {
            start_step: total_steps,
            spacing: StepSpacing::Stride(5),
            mode: SamplerMode::Ddim,
            guidance_scale: 1.0,
            clamp: Some(Self::DEFAULT_CLAMP),
            redraw_per_step: false,
        }
    }

    /// `(t, t_prev)` transitions, validated against the schedule.
    pub fn transitions(&self, sched: &NoiseSchedule) -> Result<Vec<(usize, usize)>> {
        sched.check_t(self.start_step)?;
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(GdaError::InvalidParameter("guidance_scale must be >= 0".into()));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                return Err(GdaError::InvalidParameter("clamp range is empty".into()));
            }
        }
        let ts = step_sequence(self.start_step, self.spacing)?;
        let pairs: Vec<(usize, usize)> = ts.windows(2).map(|w| (w[0], w[1])).collect();
        if self.mode == SamplerMode::Ddpm {
            if let Some(&(t, t_prev)) = pairs.iter().find(|(t, p)| t - p != 1) {
                return Err(GdaError::InvalidStepPair { t, t_prev });
            }
        }
        Ok(pairs)
    }

    fn update(
        &self,
        x_t: &SampleTensor,
        eps: &SampleTensor,
        t: usize,
        t_prev: usize,
        sched: &NoiseSchedule,
        rng: &mut StreamRng,
    ) -> Result<SampleTensor> {
        match self.mode {
            SamplerMode::Ddpm => ddpm_update(x_t, eps, t, sched, rng),
            SamplerMode::Ddim => ddim_update(x_t, eps, t, t_prev, sched, rng),
        }
    }

    fn clamp(&self, x: SampleTensor) -> SampleTensor {
        match self.clamp {
            Some((lo, hi)) => x.clamp(lo, hi),
            None => x,
        }
    }
}

/// Identifies a sample's random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleSeed {
    pub master: u64,
    pub index: u64,
}

impl SampleSeed {
    pub fn stream(self, purpose: Purpose) -> StreamRng {
        stream(self.master, self.index, purpose)
    }
}

/// Per-sample outcome of an adaptation method.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationRecord {
    pub sample_id: u64,
    pub original: SampleTensor,
    pub adapted: SampleTensor,
    pub chosen: SampleTensor,
    pub entropy_original: f64,
    pub entropy_adapted: f64,
    /// Whether the confidence filter decided between the candidates.
    pub filtered: bool,
    /// `chosen` is `adapted`.
    pub filter_kept_adapted: bool,
    pub prediction: usize,
    pub per_step_loss: Vec<f64>,
    pub wall_seconds: f64,
    /// Why adaptation was abandoned, if it was.
    pub failure: Option<String>,
}

impl AdaptationRecord {
    pub fn entropy_chosen(&self) -> f64 {
        if self.filter_kept_adapted {
            self.entropy_adapted
        } else {
            self.entropy_original
        }
    }
}

fn predictive_entropy(classifier: &Classifier<f32>, x: &SampleTensor) -> Result<(f64, usize)> {
    let p = classifier.classify(x)?;
    Ok((entropy(&p) as f64, argmax(&p)))
}

struct Outcome {
    adapted: SampleTensor,
    per_step_loss: Vec<f64>,
    failure: Option<String>,
}

fn finish(
    id: u64,
    x0: &SampleTensor,
    out: Outcome,
    classifier: &Classifier<f32>,
    filter: bool,
    start: Instant,
) -> Result<AdaptationRecord> {
    let (h_orig, y_orig) = predictive_entropy(classifier, x0)?;
    let (h_adapt, y_adapt) = predictive_entropy(classifier, &out.adapted)?;
    let keep = if out.failure.is_some() {
        false
    } else if filter {
        h_adapt < h_orig
    } else {
        true
    };
    let (chosen, prediction) = if keep {
        (out.adapted.clone(), y_adapt)
    } else {
        (x0.clone(), y_orig)
    };
    Ok(AdaptationRecord {
        sample_id: id,
        original: x0.clone(),
        adapted: out.adapted,
        chosen,
        entropy_original: h_orig,
        entropy_adapted: h_adapt,
        filtered: filter,
        filter_kept_adapted: keep,
        prediction,
        per_step_loss: out.per_step_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
        failure: out.failure,
    })
}

fn diffuse_start(
    x0: &SampleTensor,
    t: usize,
    sched: &NoiseSchedule,
    seed: SampleSeed,
) -> Result<SampleTensor> {
    let eps = sample_standard_normal(x0.shape(), &mut seed.stream(Purpose::ForwardNoise))?;
    forward_diffuse(x0, t, &eps, sched)
}

/// Forward-diffuses to `t*` and runs the plan's reverse steps, applying
/// `refine(step, x_prev_hat, x0_hat, t_prev)` after each unguided update.
fn reverse_loop(
    x0: &SampleTensor,
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    plan: &SamplerPlan,
    seed: SampleSeed,
    mut refine: impl FnMut(usize, SampleTensor, &SampleTensor, usize) -> Result<(SampleTensor, f64)>,
) -> Result<Outcome> {
    let pairs = plan.transitions(sched)?;
    x0.ensure_finite("input sample")?;
    let mut x = diffuse_start(x0, plan.start_step, sched, seed)?;
    let mut rng = seed.stream(Purpose::ReverseNoise);
    let mut losses = Vec::with_capacity(pairs.len());
    for (i, &(t, t_prev)) in pairs.iter().enumerate() {
        let eps = model.predict_eps(&x, t)?;
        let x0_hat = predict_x0(&x, t, &eps, sched)?;
        debug_assert!(
            x0_hat.max_abs_diff(&predict_x0_scaled(&x, t, &eps, sched)?) <= 1e-6 * (1.0 + x0_hat.max_abs()),
            "x0 estimate forms disagree"
        );
        let x_prev = plan.update(&x, &eps, t, t_prev, sched, &mut rng)?;
        let (refined, loss) = match refine(i, x_prev, &x0_hat, t_prev) {
            Ok(v) => v,
            Err(e @ (GdaError::NonFinite(_) | GdaError::ZeroNormEmbedding)) => {
                return Ok(Outcome {
                    adapted: x0.clone(),
                    per_step_loss: losses,
                    failure: Some(format!("step {t}->{t_prev}: {e}")),
                });
            }
            Err(e) => return Err(e),
        };
        x = plan.clamp(refined);
        losses.push(loss);
    }
    Ok(Outcome {
        adapted: x,
        per_step_loss: losses,
        failure: None,
    })
}

/// Plain reverse trajectory of a plan, with no refinement.
pub fn plain_reverse(
    x0: &SampleTensor,
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    plan: &SamplerPlan,
    seed: SampleSeed,
) -> Result<SampleTensor> {
    let out = reverse_loop(x0, model, sched, plan, seed, |_, x, _, _| Ok((x, 0.0)))?;
    Ok(out.adapted)
}

/// One guided transition: the unguided update, then a descent step on the
/// composite objective evaluated at the current clean estimate.
#[allow(clippy::too_many_arguments)]
pub fn guided_step(
    x_t: &SampleTensor,
    t: usize,
    t_prev: usize,
    nets: &NetsBundle<f32>,
    cfg: &GuidanceConfig,
    plan: &SamplerPlan,
    x_ref: &SampleTensor,
    draws: &GuidanceDraws,
    sched: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<(SampleTensor, f64)> {
    check_pair(t, t_prev, sched)?;
    let eps = nets.denoiser.predict_eps(x_t, t)?;
    let x0_hat = predict_x0(x_t, t, &eps, sched)?;
    let x_prev = plan.update(x_t, &eps, t, t_prev, sched, rng)?;
    let (x, loss) = apply_guidance(x_prev, &x0_hat, nets, cfg, plan, x_ref, draws)?;
    Ok((plan.clamp(x), loss))
}

fn apply_guidance(
    x_prev: SampleTensor,
    x0_hat: &SampleTensor,
    nets: &NetsBundle<f32>,
    cfg: &GuidanceConfig,
    plan: &SamplerPlan,
    x_ref: &SampleTensor,
    draws: &GuidanceDraws,
) -> Result<(SampleTensor, f64)> {
    let (loss, grad) = composite_guidance(nets, cfg, x0_hat, x_ref, draws)?;
    if plan.guidance_scale == 0.0 {
        return Ok((x_prev, loss));
    }
    let s = plan.guidance_scale as f32;
    Ok((x_prev.zip_map(&grad, |x, g| x - s * g)?, loss))
}

/// Guided diffusion adaptation of one sample with confidence filtering.
pub fn gda_adapt(
    x0: &SampleTensor,
    nets: &NetsBundle<f32>,
    cfg: &GuidanceConfig,
    plan: &SamplerPlan,
    sched: &NoiseSchedule,
    seed: SampleSeed,
) -> Result<AdaptationRecord> {
    let start = Instant::now();
    cfg.validate()?;
    nets.denoiser.check_input(&x0.unsqueeze0())?;
    let size = nets.denoiser.arch().image_size;
    let mut aug_rng = seed.stream(Purpose::Augment);
    let mut neg_rng = seed.stream(Purpose::Negatives);
    let mut draws = GuidanceDraws::draw(cfg, size, &mut aug_rng, &mut neg_rng)?;
    let out = reverse_loop(x0, &nets.denoiser, sched, plan, seed, |i, x_prev, x0_hat, _| {
        if plan.redraw_per_step && i > 0 {
            draws.chains = crate::guidance::build_augmentations(cfg, size, &mut aug_rng)?;
        }
        apply_guidance(x_prev, x0_hat, nets, cfg, plan, x0, &draws)
    })?;
    finish(seed.index, x0, out, &nets.classifier, true, start)
}

/// Average-pool by `factor`, then bilinear upsample back.
pub fn dda_low_pass(x: &SampleTensor, factor: usize) -> Result<SampleTensor> {
    let s = x.shape();
    if factor < 2 || s[1] % factor != 0 || s[2] % factor != 0 {
        return Err(GdaError::InvalidParameter(format!(
            "scale factor {factor} must be >= 2 and divide {}x{}",
            s[1], s[2]
        )));
    }
    Ok(low_pass(x, factor))
}

/// Low-pass refinement baseline: after each step the low frequencies of
/// the clean estimate are replaced by those of the input,
/// `x <- x + D(x0) - D(x0_hat)`. With `ensemble` the confidence filter
/// picks between input and output.
#[allow(clippy::too_many_arguments)]
pub fn dda_baseline_adapt(
    x0: &SampleTensor,
    denoiser: &Denoiser<f32>,
    classifier: &Classifier<f32>,
    sched: &NoiseSchedule,
    plan: &SamplerPlan,
    seed: SampleSeed,
    scale_factor: usize,
    ensemble: bool,
) -> Result<AdaptationRecord> {
    let start = Instant::now();
    let target = dda_low_pass(x0, scale_factor)?;
    let out = reverse_loop(x0, denoiser, sched, plan, seed, |_, x_prev, x0_hat, _| {
        let corr = target.sub(&low_pass(x0_hat, scale_factor))?;
        let size = corr.len() as f64;
        let mse = corr.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / size;
        Ok((x_prev.add(&corr)?, mse))
    })?;
    finish(seed.index, x0, out, classifier, ensemble, start)
}

/// Purification baseline: diffuse to `t_star`, then every ancestral step
/// back to 0 with no guidance and no filter.
pub fn diffpure_baseline_adapt(
    x0: &SampleTensor,
    denoiser: &Denoiser<f32>,
    classifier: &Classifier<f32>,
    sched: &NoiseSchedule,
    t_star: usize,
    seed: SampleSeed,
) -> Result<AdaptationRecord> {
    let start = Instant::now();
    let plan = SamplerPlan {
        start_step: t_star,
        spacing: StepSpacing::Stride(1),
        mode: SamplerMode::Ddpm,
        guidance_scale: 0.0,
        clamp: None,
        redraw_per_step: false,
    };
    let out = reverse_loop(x0, denoiser, sched, &plan, seed, |_, x, _, _| Ok((x, 0.0)))?;
    finish(seed.index, x0, out, classifier, false, start)
}

/// The unadapted classifier, as a record.
pub fn standard_record(x0: &SampleTensor, classifier: &Classifier<f32>, id: u64) -> Result<AdaptationRecord> {
    let start = Instant::now();
    let (h, y) = predictive_entropy(classifier, x0)?;
    Ok(AdaptationRecord {
        sample_id: id,
        original: x0.clone(),
        adapted: x0.clone(),
        chosen: x0.clone(),
        entropy_original: h,
        entropy_adapted: h,
        filtered: false,
        filter_kept_adapted: false,
        prediction: y,
        per_step_loss: Vec::new(),
        wall_seconds: start.elapsed().as_secs_f64(),
        failure: None,
    })
}

/// Ratio of the first guided update's norm to the norm of the unguided
/// iterate, at unit guidance scale.
pub fn first_step_update_ratio(
    x0: &SampleTensor,
    nets: &NetsBundle<f32>,
    cfg: &GuidanceConfig,
    plan: &SamplerPlan,
    sched: &NoiseSchedule,
    seed: SampleSeed,
) -> Result<f64> {
    let pairs = plan.transitions(sched)?;
    let (t, t_prev) = pairs[0];
    let size = nets.denoiser.arch().image_size;
    let draws = GuidanceDraws::draw(
        cfg,
        size,
        &mut seed.stream(Purpose::Augment),
        &mut seed.stream(Purpose::Negatives),
    )?;
    let x = diffuse_start(x0, plan.start_step, sched, seed)?;
    let eps = nets.denoiser.predict_eps(&x, t)?;
    let x0_hat = predict_x0(&x, t, &eps, sched)?;
    let x_prev = plan.update(&x, &eps, t, t_prev, sched, &mut seed.stream(Purpose::ReverseNoise))?;
    let (_, grad) = composite_guidance(nets, cfg, &x0_hat, x0, &draws)?;
    Ok(grad.norm() as f64 / (x_prev.norm() as f64).max(1e-12))
}

/// Guidance scale placing the median first-step update at
/// `target_fraction` of the iterate norm.
pub fn calibrate_guidance_scale(
    samples: &[(SampleTensor, SampleSeed)],
    nets: &NetsBundle<f32>,
    cfg: &GuidanceConfig,
    plan: &SamplerPlan,
    sched: &NoiseSchedule,
    target_fraction: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(GdaError::EmptyDataset);
    }
    if !(target_fraction > 0.0) {
        return Err(GdaError::InvalidParameter("target fraction must be > 0".into()));
    }
    let mut ratios = samples
        .iter()
        .map(|(x, s)| first_step_update_ratio(x, nets, cfg, plan, sched, *s))
        .collect::<Result<Vec<f64>>>()?;
    ratios.sort_by(f64::total_cmp);
    let median = ratios[ratios.len() / 2];
    if !(median > 0.0 && median.is_finite()) {
        return Err(GdaError::NonFinite("calibration gradient ratio".into()));
    }
    Ok(target_fraction / median)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{LossWeights, Preset};
    use crate::nets::{ClassifierArch, DenoiserArch, EmbeddingEncoder, EncoderArch, FeatureTap};

    fn sched(det: bool) -> NoiseSchedule {
        NoiseSchedule::linear(50, 1e-4, 0.02, det).unwrap()
    }

    fn rand_sample(seed: u64) -> SampleTensor {
        sample_standard_normal(&[1, 16, 16], &mut stream(seed, 0, Purpose::Data))
            .unwrap()
            .scale(0.5)
            .clamp(-1.0, 1.0)
    }

    /// Predicts exactly the noise that produced `x_t` from a known `x0`.
    struct Oracle<'a> {
        x0: &'a SampleTensor,
        sched: &'a NoiseSchedule,
    }

    impl NoisePredictor for Oracle<'_> {
        fn predict_eps(&self, x: &SampleTensor, t: usize) -> Result<SampleTensor> {
            let ab = self.sched.alpha_bar(t);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            x.zip_map(self.x0, |xt, x0| ((xt as f64 - a * x0 as f64) / b) as f32)
        }
    }

    fn nets() -> NetsBundle<f32> {
        NetsBundle {
            denoiser: Denoiser::new(DenoiserArch::default(), &mut stream(1, 0, Purpose::Init)),
            classifier: Classifier::new(ClassifierArch::default(), &mut stream(2, 0, Purpose::Init)),
            encoder: EmbeddingEncoder::new(EncoderArch::default(), &mut stream(3, 0, Purpose::Init)),
            tap: FeatureTap::DenoiserEncoder2,
        }
    }

    fn guidance_cfg(n: &NetsBundle<f32>, weights: LossWeights) -> GuidanceConfig {
        let proto = n.encoder.prototype(&[rand_sample(40), rand_sample(41)]).unwrap();
        let mut cfg = GuidanceConfig::new(weights, proto);
        cfg.aug_count = 4;
        cfg
    }

    #[test]
    fn x0_round_trip_and_dual_form() {
        let s = sched(true);
        let x0 = rand_sample(1);
        let eps = sample_standard_normal(&[1, 16, 16], &mut stream(2, 0, Purpose::ForwardNoise)).unwrap();
        for t in 1..=50 {
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let r = predict_x0(&xt, t, &eps, &s).unwrap();
            assert!(r.max_abs_diff(&x0) <= 1e-5, "t={t}");
            assert!(r.max_abs_diff(&predict_x0_scaled(&xt, t, &eps, &s).unwrap()) <= 1e-6);
        }
        let xt = rand_sample(3);
        let zero = SampleTensor::zeros(&[1, 16, 16]);
        let r = predict_x0(&xt, 7, &zero, &s).unwrap();
        let d = s.alpha_bar(7).sqrt() as f32;
        assert!(r.max_abs_diff(&xt.map(|v| v / d)) <= 1e-6);
        assert!(predict_x0(&xt, 0, &zero, &s).is_err());
    }

    #[test]
    fn ddpm_hand_value() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2], true).unwrap();
        // alpha_2 = 0.9 with alpha_bar_2 = 0.72
        let s2 = NoiseSchedule::from_betas(vec![0.2, 0.1], true).unwrap();
        assert!((s2.alpha(2) - 0.9).abs() < 1e-15 && (s2.alpha_bar(2) - 0.72).abs() < 1e-15);
        let x = SampleTensor::full(&[1, 1, 1], 1.0);
        let e = SampleTensor::full(&[1, 1, 1], 0.5);
        let out = ddpm_update(&x, &e, 2, &s2, &mut stream(0, 0, Purpose::ReverseNoise)).unwrap();
        let expected = (1.0 / 0.9f64.sqrt()) * (1.0 - (0.1 / 0.28f64.sqrt()) * 0.5);
        assert!((out.data()[0] as f64 - expected).abs() < 1e-6);
        let zero = SampleTensor::zeros(&[1, 1, 1]);
        let out = ddpm_update(&x, &zero, 1, &s, &mut stream(0, 0, Purpose::ReverseNoise)).unwrap();
        assert!((out.data()[0] as f64 - 1.0 / 0.9f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn ddim_trajectory_consistency() {
        let s = sched(true);
        let x0 = rand_sample(5);
        let eps = sample_standard_normal(&[1, 16, 16], &mut stream(6, 0, Purpose::ForwardNoise)).unwrap();
        let oracle = Oracle { x0: &x0, sched: &s };
        let mut rng = stream(0, 0, Purpose::ReverseNoise);
        let xt = forward_diffuse(&x0, 50, &eps, &s).unwrap();
        let direct = ddim_step(&xt, 50, 10, &oracle, &s, &mut rng).unwrap();
        let expected = forward_diffuse(&x0, 10, &eps, &s).unwrap();
        assert!(direct.max_abs_diff(&expected) <= 1e-5);
        let mid = ddim_step(&xt, 50, 30, &oracle, &s, &mut rng).unwrap();
        let composed = ddim_step(&mid, 30, 10, &oracle, &s, &mut rng).unwrap();
        assert!(composed.max_abs_diff(&direct) <= 1e-5);
        let end = ddim_step(&xt, 50, 0, &oracle, &s, &mut rng).unwrap();
        let x0_hat = predict_x0(&xt, 50, &oracle.predict_eps(&xt, 50).unwrap(), &s).unwrap();
        assert_eq!(end, x0_hat);
        assert!(ddim_step(&xt, 10, 10, &oracle, &s, &mut rng).is_err());
    }

    #[test]
    fn ddim_rejects_excess_sigma() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.9], false).unwrap();
        let x = SampleTensor::zeros(&[1, 2, 2]);
        // sigma_2^2 = 0.9 > 1 - alpha_bar_1 = 0.5
        assert!(ddim_update(&x, &x, 2, 1, &s, &mut stream(0, 0, Purpose::ReverseNoise)).is_err());
    }

    #[test]
    fn step_sequences() {
        assert_eq!(step_sequence(50, StepSpacing::Stride(5)).unwrap(), vec![50, 45, 40, 35, 30, 25, 20, 15, 10, 5, 0]);
        assert_eq!(step_sequence(50, StepSpacing::Stride(50)).unwrap(), vec![50, 0]);
        assert_eq!(step_sequence(7, StepSpacing::Stride(3)).unwrap(), vec![7, 4, 1, 0]);
        assert_eq!(step_sequence(50, StepSpacing::Count(10)).unwrap(), step_sequence(50, StepSpacing::Stride(5)).unwrap());
        assert_eq!(step_sequence(5, StepSpacing::Stride(1)).unwrap(), vec![5, 4, 3, 2, 1, 0]);
        assert!(step_sequence(5, StepSpacing::Count(6)).is_err());
        assert!(step_sequence(5, StepSpacing::Stride(0)).is_err());
        for n in [1, 2, 5, 10, 20, 50] {
            let ts = step_sequence(50, StepSpacing::Count(n)).unwrap();
            assert_eq!(ts.len(), n + 1);
            assert!(ts.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn ddpm_plan_requires_unit_stride() {
        let mut plan = SamplerPlan::reference(50);
        plan.mode = SamplerMode::Ddpm;
        assert!(plan.transitions(&sched(true)).is_err());
        plan.spacing = StepSpacing::Stride(1);
        assert_eq!(plan.transitions(&sched(true)).unwrap().len(), 50);
    }

    #[test]
    fn zero_scale_gda_is_single_ddim_step() {
        let n = nets();
        let s = sched(true);
        let cfg = guidance_cfg(&n, Preset::Corruption.weights());
        let plan = SamplerPlan {
            spacing: StepSpacing::Stride(50),
            guidance_scale: 0.0,
            clamp: None,
            ..SamplerPlan::reference(50)
        };
        let x0 = rand_sample(7);
        let seed = SampleSeed { master: 3, index: 9 };
        let rec = gda_adapt(&x0, &n, &cfg, &plan, &s, seed).unwrap();
        let xt = diffuse_start(&x0, 50, &s, seed).unwrap();
        let direct = ddim_step(&xt, 50, 0, &n.denoiser, &s, &mut stream(0, 0, Purpose::ReverseNoise)).unwrap();
        assert_eq!(rec.adapted, direct);
        assert_eq!(rec.per_step_loss.len(), 1);
    }

    #[test]
    fn unguided_paths_match_plain_reverse() {
        let n = nets();
        let s = sched(true);
        let x0 = rand_sample(8);
        let seed = SampleSeed { master: 1, index: 2 };
        let plan = SamplerPlan {
            guidance_scale: 0.0,
            ..SamplerPlan::reference(50)
        };
        let plain = plain_reverse(&x0, &n.denoiser, &s, &plan, seed).unwrap();
        let cfg = guidance_cfg(&n, Preset::Corruption.weights());
        assert_eq!(gda_adapt(&x0, &n, &cfg, &plan, &s, seed).unwrap().adapted, plain);
        let zero_w = guidance_cfg(&n, LossWeights::ZERO);
        let scaled = SamplerPlan { guidance_scale: 3.0, ..plan };
        assert_eq!(gda_adapt(&x0, &n, &zero_w, &scaled, &s, seed).unwrap().adapted, plain);
        // a constant input has no low-frequency mismatch with a constant estimate
        let flat = SampleTensor::full(&[1, 16, 16], 0.3);
        let c = dda_low_pass(&flat, 4).unwrap();
        assert!(c.max_abs_diff(&dda_low_pass(&c, 4).unwrap()) <= 1e-5);
    }

    #[test]
    fn dda_with_oracle_on_constant_input_is_plain() {
        let s = sched(true);
        let x0 = SampleTensor::full(&[1, 16, 16], -0.4);
        let oracle = Oracle { x0: &x0, sched: &s };
        let plan = SamplerPlan::reference(50);
        let seed = SampleSeed { master: 1, index: 1 };
        let target = dda_low_pass(&x0, 4).unwrap();
        let out = reverse_loop(&x0, &oracle, &s, &plan, seed, |_, x, x0_hat, _| {
            let corr = target.sub(&low_pass(x0_hat, 4)).unwrap();
            assert!(corr.max_abs() <= 1e-5);
            Ok((x, 0.0))
        })
        .unwrap();
        assert!(out.adapted.max_abs_diff(&x0) <= 1e-5);
        assert!(dda_low_pass(&x0, 3).is_err());
    }

    #[test]
    fn filter_picks_lower_entropy_and_is_deterministic() {
        let n = nets();
        let s = sched(true);
        let cfg = guidance_cfg(&n, Preset::Corruption.weights());
        let plan = SamplerPlan {
            guidance_scale: 1e-4,
            ..SamplerPlan::reference(50)
        };
        for i in 0..4 {
            let x0 = rand_sample(20 + i);
            let seed = SampleSeed { master: 5, index: i };
            let r = gda_adapt(&x0, &n, &cfg, &plan, &s, seed).unwrap();
            assert_eq!(r.per_step_loss.len(), 10);
            assert_eq!(r.filter_kept_adapted, r.entropy_adapted < r.entropy_original);
            assert_eq!(r.entropy_chosen(), r.entropy_adapted.min(r.entropy_original));
            assert!(r.chosen == r.adapted || r.chosen == r.original);
            assert_eq!(r, gda_adapt(&x0, &n, &cfg, &plan, &s, seed).map(|mut q| {
                q.wall_seconds = r.wall_seconds;
                q
            }).unwrap());
        }
    }

    #[test]
    fn diffpure_single_step_round_trip() {
        let s = sched(true);
        let x0 = rand_sample(30);
        let oracle = Oracle { x0: &x0, sched: &s };
        let plan = SamplerPlan {
            start_step: 1,
            spacing: StepSpacing::Stride(1),
            mode: SamplerMode::Ddpm,
            guidance_scale: 0.0,
            clamp: None,
            redraw_per_step: false,
        };
        let out = plain_reverse(&x0, &oracle, &s, &plan, SampleSeed { master: 0, index: 0 }).unwrap();
        assert!(out.max_abs_diff(&x0) <= 1e-5);
        let n = nets();
        let a = diffpure_baseline_adapt(&x0, &n.denoiser, &n.classifier, &s, 20, SampleSeed { master: 0, index: 4 }).unwrap();
        let b = diffpure_baseline_adapt(&x0, &n.denoiser, &n.classifier, &s, 20, SampleSeed { master: 0, index: 4 }).unwrap();
        assert_eq!(a.adapted, b.adapted);
        assert_eq!(a.per_step_loss.len(), 20);
        assert!(diffpure_baseline_adapt(&x0, &n.denoiser, &n.classifier, &s, 51, SampleSeed { master: 0, index: 4 }).is_err());
    }

    #[test]
    fn calibration_hits_target() {
        let n = nets();
        let s = sched(true);
        let cfg = guidance_cfg(&n, Preset::Corruption.weights());
        let plan = SamplerPlan::reference(50);
        let samples: Vec<(SampleTensor, SampleSeed)> = (0..5)
            .map(|i| (rand_sample(50 + i), SampleSeed { master: 2, index: i }))
            .collect();
        let scale = calibrate_guidance_scale(&samples, &n, &cfg, &plan, &s, 0.01).unwrap();
        let mut ratios: Vec<f64> = samples
            .iter()
            .map(|(x, sd)| scale * first_step_update_ratio(x, &n, &cfg, &plan, &s, *sd).unwrap())
            .collect();
        ratios.sort_by(f64::total_cmp);
        assert!((ratios[2] - 0.01).abs() < 1e-9);
    }
}
