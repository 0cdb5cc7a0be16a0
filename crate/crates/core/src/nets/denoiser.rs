use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::rng::StreamRng;
use crate::tensor::{Real, SampleTensor, Tensor};

use super::{check_input, timestep_embedding, ConvLayer, DenseLayer, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserArch {
    pub in_channels: usize,
    pub image_size: (usize, usize),
    /// Width of the first encoder level; deeper levels use twice this.
    pub channels: usize,
    pub time_dim: usize,
    pub total_steps: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: (16, 16),
            channels: 16,
            time_dim: 16,
            total_steps: 50,
        }
    }
}

/// Two-level convolutional encoder-decoder predicting the added noise.
///
/// ```text
/// 16x16: conv(in,C) conv(C,C) ------------------------------ skip --+
///  8x8 :   pool conv(C,2C) [feature tap] ---------- skip --+        |
///  4x4 :     pool conv(2C,2C) + time conv(2C,2C)           |        |
///  8x8 :   up, concat ------------------------> conv(4C,C) |        |
/// 16x16: up, concat --------------------------------------> conv(2C,C) head
/// ```
///
/// The time embedding is added at the bottleneck, and a time-dependent
/// scalar gain multiplies the head output.
#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    arch: DenoiserArch,
    params: ParamSet<T>,
    in1: ConvLayer,
    in2: ConvLayer,
    enc2: ConvLayer,
    mid1: ConvLayer,
    mid2: ConvLayer,
    dec2: ConvLayer,
    dec1: ConvLayer,
    head: ConvLayer,
    time1: DenseLayer,
    time2: DenseLayer,
    gain: DenseLayer,
}

impl<T: Real> Denoiser<T> {
    pub fn new(arch: DenoiserArch, rng: &mut StreamRng) -> Self {
        assert!(arch.image_size.0 % 4 == 0 && arch.image_size.1 % 4 == 0);
        let c = arch.channels;
        let mut ps = ParamSet::default();
        let in1 = ConvLayer::new(&mut ps, "in1", arch.in_channels, c, rng);
        let in2 = ConvLayer::new(&mut ps, "in2", c, c, rng);
        let enc2 = ConvLayer::new(&mut ps, "enc2", c, 2 * c, rng);
        let mid1 = ConvLayer::new(&mut ps, "mid1", 2 * c, 2 * c, rng);
        let mid2 = ConvLayer::new(&mut ps, "mid2", 2 * c, 2 * c, rng);
        let dec2 = ConvLayer::new(&mut ps, "dec2", 4 * c, c, rng);
        let dec1 = ConvLayer::new(&mut ps, "dec1", 2 * c, c, rng);
        let head = ConvLayer::new(&mut ps, "head", c, arch.in_channels, rng);
        let time1 = DenseLayer::new(&mut ps, "time1", arch.time_dim, 2 * c, rng);
        let time2 = DenseLayer::new(&mut ps, "time2", 2 * c, 2 * c, rng);
        let gain = DenseLayer::new(&mut ps, "gain", arch.time_dim, 1, rng);
        // Small head and unit gain: the untrained model starts near zero output.
        for v in ps.tensors_mut()[head.w].data_mut() {
            *v = *v * T::lit(0.1);
        }
        ps.tensors_mut()[gain.w].data_mut().fill(T::zero());
        ps.tensors_mut()[gain.b].data_mut().fill(T::one());
        Self {
            arch,
            params: ps,
            in1,
            in2,
            enc2,
            mid1,
            mid2,
            dec2,
            dec1,
            head,
            time1,
            time2,
            gain,
        }
    }

    pub fn arch(&self) -> DenoiserArch {
        self.arch
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            arch: self.arch,
            params: self.params.cast(),
            in1: self.in1,
            in2: self.in2,
            enc2: self.enc2,
            mid1: self.mid1,
            mid2: self.mid2,
            dec2: self.dec2,
            dec1: self.dec1,
            head: self.head,
            time1: self.time1,
            time2: self.time2,
            gain: self.gain,
        }
    }

    /// Zeroes the output head, making the prediction identically zero.
    pub fn zero_head(&mut self) {
        let ps = self.params.tensors_mut();
        ps[self.head.w].data_mut().fill(T::zero());
        ps[self.head.b].data_mut().fill(T::zero());
    }

    fn first_level(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let h = self.in1.apply(g, p, x);
        let h = g.silu(h);
        let h = self.in2.apply(g, p, h);
        g.silu(h)
    }

    fn second_level(&self, g: &mut Graph<T>, p: &[Var], e1: Var) -> Var {
        let h = g.avg_pool(e1, 2);
        let h = self.enc2.apply(g, p, h);
        g.silu(h)
    }

    /// Activations of the second encoder layer, `[n, 2C, h/2, w/2]`.
    pub fn encoder_features(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let e1 = self.first_level(g, p, x);
        self.second_level(g, p, e1)
    }

    /// Predicted noise for a batch `x [n, c, h, w]` at timesteps `ts`.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var, ts: &[usize]) -> Var {
        let e1 = self.first_level(g, p, x);
        let e2 = self.second_level(g, p, e1);

        let temb = g.constant(timestep_embedding(ts, self.arch.time_dim));
        let tb = self.time1.apply(g, p, temb);
        let tb = g.silu(tb);
        let tb = self.time2.apply(g, p, tb);

        let b = g.avg_pool(e2, 2);
        let b = self.mid1.apply(g, p, b);
        let b = g.add_channel(b, tb);
        let b = g.silu(b);
        let b = self.mid2.apply(g, p, b);
        let b = g.silu(b);

        let u2 = g.upsample_nearest(b, 2);
        let d2 = g.concat(&[u2, e2], 1);
        let d2 = self.dec2.apply(g, p, d2);
        let d2 = g.silu(d2);

        let u1 = g.upsample_nearest(d2, 2);
        let d1 = g.concat(&[u1, e1], 1);
        let d1 = self.dec1.apply(g, p, d1);
        let d1 = g.silu(d1);
        let out = self.head.apply(g, p, d1);

        let gain = self.gain.apply(g, p, temb);
        g.scale_samples(out, gain)
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        check_input(x, self.arch.in_channels, self.arch.image_size)
    }
}

impl Denoiser<f32> {
    /// Noise prediction for one sample `[c, h, w]` at timestep `t`.
    pub fn predict_eps(&self, x: &SampleTensor, t: usize) -> Result<SampleTensor> {
        if t < 1 || t > self.arch.total_steps {
            return Err(crate::GdaError::TimestepOutOfRange {
                t,
                lo: 1,
                hi: self.arch.total_steps,
            });
        }
        let batch = x.unsqueeze0();
        self.check_input(&batch)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(batch);
        let y = self.forward(&mut g, &p, xv, &[t]);
        Ok(g.value(y).index_outer(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_standard_normal, stream, Purpose};

    fn model() -> Denoiser<f32> {
        Denoiser::new(DenoiserArch::default(), &mut stream(1, 0, Purpose::Init))
    }

    #[test]
    fn output_shape_matches_input() {
        let m = model();
        let x = sample_standard_normal(&[1, 16, 16], &mut stream(2, 0, Purpose::Data)).unwrap();
        for t in [1, 25, 50] {
            assert_eq!(m.predict_eps(&x, t).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn zero_head_gives_zero_prediction() {
        let mut m = model();
        m.zero_head();
        let x = sample_standard_normal(&[1, 16, 16], &mut stream(2, 0, Purpose::Data)).unwrap();
        assert!(m.predict_eps(&x, 17).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prediction_is_pure() {
        let m = model();
        let x = sample_standard_normal(&[1, 16, 16], &mut stream(2, 0, Purpose::Data)).unwrap();
        assert_eq!(m.predict_eps(&x, 9).unwrap(), m.predict_eps(&x, 9).unwrap());
    }

    #[test]
    fn time_conditioning_changes_output() {
        let m = model();
        let x = sample_standard_normal(&[1, 16, 16], &mut stream(2, 0, Purpose::Data)).unwrap();
        assert_ne!(m.predict_eps(&x, 3).unwrap(), m.predict_eps(&x, 40).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = model();
        let x = SampleTensor::zeros(&[1, 16, 16]);
        assert!(m.predict_eps(&x, 0).is_err());
        assert!(m.predict_eps(&x, 51).is_err());
        assert!(m.predict_eps(&SampleTensor::zeros(&[1, 8, 8]), 3).is_err());
        let mut bad = x.clone();
        bad.data_mut()[5] = f32::NAN;
        assert!(m.predict_eps(&bad, 3).is_err());
    }

    #[test]
    fn parameter_budget() {
        assert!(model().params().count() <= 100_000);
    }
}
