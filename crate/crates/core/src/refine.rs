//! Residual refinement: seven dilated 3×3 convolutions read the noisy image
//! and the match-average estimate side by side and predict a correction to
//! the estimate.

use rand::Rng;

use crate::error::{Error, Result};
use crate::harness::config::TrainSchedule;
use crate::imgio::{Image, CHANNELS};
use crate::nncore::checkpoint::{arch_digest, Checkpoint};
use crate::nncore::layers::weight_name;
use crate::nncore::{ConvSpec, LayerSpec, Network, NetworkBuilder, Padding, ParamStore, Scalar, Source, Tensor, Trace};

pub const DILATIONS: [usize; 7] = [1, 2, 3, 4, 3, 2, 1];
pub const INPUT_CHANNELS: usize = 2 * CHANNELS;
const SCALE: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefineArch {
    pub width: usize,
}

impl Default for RefineArch {
    fn default() -> Self {
        Self { width: 32 }
    }
}

impl RefineArch {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Contract("refiner width must be positive".into()));
        }
        Ok(())
    }

    pub fn network(&self) -> Network {
        let mut b = NetworkBuilder::new("refine");
        let mut x = Source::Input;
        for (i, &d) in DILATIONS.iter().enumerate() {
            let last = i + 1 == DILATIONS.len();
            let spec = ConvSpec {
                in_ch: if i == 0 { INPUT_CHANNELS } else { self.width },
                out_ch: if last { CHANNELS } else { self.width },
                stride: 1,
                dilation: d,
                padding: Padding::SameZero,
            };
            x = b.push(format!("rconv{}", i + 1), LayerSpec::Conv2d(spec), &[x]);
            if !last {
                x = b.push(format!("rrelu{}", i + 1), LayerSpec::Relu, &[x]);
            }
        }
        b.finish()
    }

    pub fn descriptor(&self) -> String {
        format!("refine width={}", self.width)
    }

    pub fn parse_descriptor(s: &str) -> Result<Self> {
        let w = s
            .strip_prefix("refine width=")
            .and_then(|w| w.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("unrecognized refiner descriptor {s:?}")))?;
        let arch = Self { width: w };
        arch.validate()?;
        Ok(arch)
    }

    pub fn manifest(&self) -> String {
        format!(
            "refine-manifest v1\n{}\ninput concat(noisy, stage1) scale 1/255, output stage1 + 255*residual\n{}",
            self.descriptor(),
            self.network().manifest()
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        arch_digest(&self.manifest())
    }
}

/// One training example.
#[derive(Clone, Debug)]
pub struct RefineSample {
    pub clean: Image,
    pub noisy: Image,
    pub stage1: Image,
}

#[derive(Clone, Debug)]
pub struct Refiner<T> {
    arch: RefineArch,
    net: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Refiner<T> {
    /// He-initialized, with the final layer zeroed so the initial output
    /// equals the stage-1 estimate.
    pub fn new(arch: RefineArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let net = arch.network();
        let mut params = ParamStore::new();
        net.init_params(&mut params, rng)?;
        let last = weight_name(&format!("rconv{}", DILATIONS.len()));
        params.get_mut(&last)?.value.iter_mut().for_each(|v| *v = T::zero());
        Ok(Self { arch, net, params })
    }

    pub fn with_params(arch: RefineArch, params: ParamStore<T>) -> Result<Self> {
        arch.validate()?;
        let net = arch.network();
        net.check_params(&params)?;
        Ok(Self { arch, net, params })
    }

    pub fn arch(&self) -> &RefineArch {
        &self.arch
    }

    /// Checkpoint tied to the matcher parameters it was trained behind.
    pub fn to_checkpoint(&self, matcher_digest: [u8; 32], metadata: Vec<(String, String)>, with_moments: bool) -> Checkpoint {
        Checkpoint {
            arch: self.arch.digest(),
            parent: matcher_digest,
            descriptor: self.arch.descriptor(),
            metadata,
            params: self.params.cast(),
            has_moments: with_moments,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch = RefineArch::parse_descriptor(&ckpt.descriptor)?;
        ckpt.expect_arch(&arch.digest())?;
        Self::with_params(arch, ckpt.params_as()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Final estimate `stage1 + 255·net([noisy, stage1] / 255)`.
    pub fn refine_forward(&self, noisy: &Image, stage1: &Image) -> Result<Image> {
        if !noisy.same_dims(stage1) {
            return Err(Error::Contract(format!(
                "noisy is {}x{} but stage-1 estimate is {}x{}",
                noisy.height(),
                noisy.width(),
                stage1.height(),
                stage1.width()
            )));
        }
        let (h, w) = (noisy.height(), noisy.width());
        let x = input_tensor::<T>(&[(noisy, stage1, 0, 0)], h, w);
        let res = self.net.infer(&self.params, &x)?;
        let scale = T::of(SCALE);
        let data = stage1
            .data()
            .iter()
            .zip(&res.data)
            .map(|(s, r)| (T::of(*s as f64) + scale * *r).as_f64() as f32)
            .collect();
        Image::new(h, w, data)
    }

    /// Forward pass on a prepared batch, for training.
    pub fn forward(&self, input: Tensor<T>) -> Result<Trace<T>> {
        self.net.forward(&self.params, input)
    }

    pub fn backward(&mut self, trace: &Trace<T>, grad_out: Tensor<T>) -> Result<Tensor<T>> {
        self.net.backward(&mut self.params, trace, grad_out)
    }
}

/// Batch of `h×w` crops `(noisy, stage1, row, col)` as a scaled 6-channel
/// tensor.
pub fn input_tensor<T: Scalar>(crops: &[(&Image, &Image, usize, usize)], h: usize, w: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(crops.len(), h, w, INPUT_CHANNELS);
    let inv = T::of(1.0 / SCALE);
    for (n, (noisy, s1, r0, c0)) in crops.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                let dst = ((n * h + r) * w + c) * INPUT_CHANNELS;
                for ch in 0..CHANNELS {
                    t.data[dst + ch] = T::of(noisy.get(r0 + r, c0 + c, ch) as f64) * inv;
                    t.data[dst + CHANNELS + ch] = T::of(s1.get(r0 + r, c0 + c, ch) as f64) * inv;
                }
            }
        }
    }
    t
}

/// Mean squared error in `[0, 1]` intensity units between
/// `stage1 + 255·residual` and `clean`, and its gradient w.r.t. the
/// residual output.
pub fn residual_loss<T: Scalar>(
    residual: &Tensor<T>,
    targets: &[(&Image, &Image, usize, usize)],
    grad: Option<&mut Tensor<T>>,
) -> f64 {
    let (h, w) = (residual.h, residual.w);
    let count = residual.len() as f64;
    let inv = 1.0 / SCALE;
    let mut loss = 0.0;
    let mut grad = grad;
    for (n, (clean, s1, r0, c0)) in targets.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                for ch in 0..CHANNELS {
                    let i = ((n * h + r) * w + c) * CHANNELS + ch;
                    let target = (clean.get(r0 + r, c0 + c, ch) as f64 - s1.get(r0 + r, c0 + c, ch) as f64) * inv;
                    let e = residual.data[i].as_f64() - target;
                    loss += e * e;
                    if let Some(g) = grad.as_deref_mut() {
                        g.data[i] = T::of(2.0 * e / count);
                    }
                }
            }
        }
    }
    loss / count
}

/// Adam on random crops; returns the per-step training loss.
pub fn train_refine(
    refiner: &mut Refiner<f32>,
    data: &[RefineSample],
    schedule: &TrainSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Training("refiner training set is empty".into()));
    }
    for s in data {
        if !(s.clean.same_dims(&s.noisy) && s.clean.same_dims(&s.stage1)) {
            return Err(Error::Training("refiner sample images disagree in size".into()));
        }
    }
    let steps = schedule.refine_steps;
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut inputs = Vec::with_capacity(schedule.refine_batch);
        let mut targets = Vec::with_capacity(schedule.refine_batch);
        let crop_h = data.iter().map(|s| s.clean.height()).min().unwrap().min(schedule.refine_crop);
        let crop_w = data.iter().map(|s| s.clean.width()).min().unwrap().min(schedule.refine_crop);
        for _ in 0..schedule.refine_batch {
            let s = &data[rng.random_range(0..data.len())];
            let r0 = rng.random_range(0..=s.clean.height() - crop_h);
            let c0 = rng.random_range(0..=s.clean.width() - crop_w);
            inputs.push((&s.noisy, &s.stage1, r0, c0));
            targets.push((&s.clean, &s.stage1, r0, c0));
        }
        let trace = refiner.forward(input_tensor(&inputs, crop_h, crop_w))?;
        let out = trace.output();
        let mut g = Tensor::zeros(out.n, out.h, out.w, out.c);
        let loss = residual_loss(out, &targets, Some(&mut g));
        if !loss.is_finite() {
            return Err(Error::Training(format!("refiner loss diverged at step {step}")));
        }
        refiner.backward(&trace, g)?;
        refiner.params.adam_step(schedule.lr_at(step, steps));
        history.push(loss);
    }
    Ok(history)
}
