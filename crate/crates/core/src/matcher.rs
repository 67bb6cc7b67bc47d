//! The matching network: a convolutional feature extractor applied to each
//! 16×16 noisy context, and a fully-connected comparison stack mapping a
//! feature pair to one sigmoid score per coefficient group.
//!
//! The first comparison layer is linear in the concatenated pair, so it is
//! split as `W₁ᵀ[fᵢ; fⱼ] + b = Uᵢ + Vⱼ` with `U = f·W₁[:D]` and
//! `V = f·W₁[D:] + b`. Per-position projections are computed once and only
//! the remaining four layers run per pair.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imgio::{extract_patch_into, Image, PatchRef, SearchWindow, CHANNELS, CONTEXT, CONTEXT_LEN, PATCH};
use crate::nncore::checkpoint::{arch_digest, Checkpoint};
use crate::nncore::layers::{bias_name, weight_name};
use crate::nncore::{
    gemm, ConvSpec, LayerSpec, Network, NetworkBuilder, Padding, ParamStore, Scalar, Source, Tensor, Trace,
};
use crate::transform::GROUPS;

/// Contexts are fed to the network as `intensity / 255`.
pub const INPUT_SCALE: f64 = 1.0 / 255.0;

const FEATURE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatcherArch {
    /// Channel widths at 16×16, 8×8 and 4×4.
    pub stage_widths: [usize; 3],
    /// Width of the 2×2 tail.
    pub tail_width: usize,
    /// Feature vector width `D`.
    pub feature_width: usize,
    /// Hidden width of the comparison stack.
    pub hidden_width: usize,
}

impl Default for MatcherArch {
    fn default() -> Self {
        Self {
            stage_widths: [8, 12, 24],
            tail_width: 32,
            feature_width: 32,
            hidden_width: 32,
        }
    }
}

fn conv(in_ch: usize, out_ch: usize, stride: usize, padding: Padding) -> LayerSpec {
    LayerSpec::Conv2d(ConvSpec {
        in_ch,
        out_ch,
        stride,
        dilation: 1,
        padding,
    })
}

impl MatcherArch {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.contains(&0) || self.tail_width == 0 || self.feature_width == 0 || self.hidden_width == 0 {
            return Err(Error::Contract(format!("matcher widths must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Fourteen 3×3 convolutions, 16×16×3 → 1×1×D, with two concatenative
    /// skip joins.
    pub fn feature_net(&self) -> Network {
        use Padding::{SameZero, Valid};
        let [w0, w1, w2] = self.stage_widths;
        let t = self.tail_width;
        let mut b = NetworkBuilder::new("matcher.features");
        let layer = |b: &mut NetworkBuilder, i: usize, spec: LayerSpec, src: Source, act: bool| {
            let c = b.push(format!("conv{i}"), spec, &[src]);
            if act {
                b.push(format!("relu{i}"), LayerSpec::Relu, &[c])
            } else {
                c
            }
        };
        let x = layer(&mut b, 1, conv(3, w0, 1, SameZero), Source::Input, true);
        let s2 = layer(&mut b, 2, conv(w0, w1, 2, SameZero), x, true);
        let x = layer(&mut b, 3, conv(w1, w1, 1, SameZero), s2, true);
        let x = layer(&mut b, 4, conv(w1, w1, 1, SameZero), x, true);
        let j1 = b.push("join1", LayerSpec::Concat, &[s2, x]);
        let s5 = layer(&mut b, 5, conv(2 * w1, w2, 2, SameZero), j1, true);
        let x = layer(&mut b, 6, conv(w2, w2, 1, SameZero), s5, true);
        let x = layer(&mut b, 7, conv(w2, w2, 1, SameZero), x, true);
        let j2 = b.push("join2", LayerSpec::Concat, &[s5, x]);
        let mut x = layer(&mut b, 8, conv(2 * w2, t, 1, Valid), j2, true);
        for i in 9..=13 {
            x = layer(&mut b, i, conv(t, t, 1, SameZero), x, true);
        }
        layer(&mut b, 14, conv(t, self.feature_width, 2, SameZero), x, false);
        b.finish()
    }

    fn compare_layers(&self, b: &mut NetworkBuilder, mut x: Source, from: usize) {
        let f = self.hidden_width;
        for i in from..=5 {
            let (inw, outw) = match i {
                1 => (2 * self.feature_width, f),
                5 => (f, GROUPS),
                _ => (f, f),
            };
            let fc = b.push(
                format!("fc{i}"),
                LayerSpec::FullyConnected {
                    in_width: inw,
                    out_width: outw,
                },
                &[x],
            );
            let act = if i == 5 { LayerSpec::Sigmoid } else { LayerSpec::Relu };
            let name = if i == 5 { "score".to_string() } else { format!("fc{i}.relu") };
            x = b.push(name, act, &[fc]);
        }
    }

    /// Five fully-connected layers on the concatenated pair `[fᵢ; fⱼ]`.
    pub fn compare_net(&self) -> Network {
        let mut b = NetworkBuilder::new("matcher.compare");
        self.compare_layers(&mut b, Source::Input, 1);
        b.finish()
    }

    /// Layers `fc2..fc5` of the comparison stack, fed with `relu(fc1)`.
    pub fn tail_net(&self) -> Network {
        let mut b = NetworkBuilder::new("matcher.compare.tail");
        self.compare_layers(&mut b, Source::Input, 2);
        b.finish()
    }

    pub fn descriptor(&self) -> String {
        let [a, b, c] = self.stage_widths;
        format!(
            "matcher stages={a},{b},{c} tail={} features={} hidden={}",
            self.tail_width, self.feature_width, self.hidden_width
        )
    }

    pub fn parse_descriptor(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("unrecognized matcher descriptor {s:?}"));
        let mut parts = s.split_whitespace();
        if parts.next() != Some("matcher") {
            return Err(bad());
        }
        let mut arch = Self::default();
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
            match k {
                "stages" => {
                    let w: Vec<usize> = v.split(',').map(num).collect::<Result<_>>()?;
                    arch.stage_widths = w.try_into().map_err(|_| bad())?;
                }
                "tail" => arch.tail_width = num(v)?,
                "features" => arch.feature_width = num(v)?,
                "hidden" => arch.hidden_width = num(v)?,
                _ => return Err(bad()),
            }
        }
        arch.validate().map_err(|_| bad())?;
        Ok(arch)
    }

    /// Versioned text description of both stacks.
    pub fn manifest(&self) -> String {
        format!(
            "matcher-manifest v1\n{}\ninput {CONTEXT}x{CONTEXT}x{CHANNELS} scale 1/255\n{}{}",
            self.descriptor(),
            self.feature_net().manifest(),
            self.compare_net().manifest()
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        arch_digest(&self.manifest())
    }
}

/// Packs the contexts around `positions` into a network input batch.
pub fn context_batch<T: Scalar>(image: &Image, positions: &[PatchRef]) -> Tensor<T> {
    let mut data = vec![T::zero(); positions.len() * CONTEXT_LEN];
    let mut buf = [0f32; CONTEXT_LEN];
    let scale = T::of(INPUT_SCALE);
    for (p, out) in positions.iter().zip(data.chunks_exact_mut(CONTEXT_LEN)) {
        extract_patch_into(image, p.as_context(), &mut buf);
        for (o, v) in out.iter_mut().zip(&buf) {
            *o = T::of(*v as f64) * scale;
        }
    }
    Tensor {
        n: positions.len(),
        h: CONTEXT,
        w: CONTEXT,
        c: CHANNELS,
        data,
    }
}

/// Features and first-layer projections for every patch position of one
/// image, indexed row-major over positions.
#[derive(Clone, Debug)]
pub struct ImageFeatures<T> {
    pub height: usize,
    pub width: usize,
    cols: usize,
    pub features: Vec<T>,
    u: Vec<T>,
    v: Vec<T>,
}

impl<T> ImageFeatures<T> {
    pub fn index(&self, p: PatchRef) -> usize {
        debug_assert!(p.fits(self.height, self.width));
        p.row * self.cols + p.col
    }
}

/// Forward state of a batch of scored pairs, kept for backward.
#[derive(Debug)]
pub struct PairTrace<T> {
    features: Trace<T>,
    pairs: Vec<(usize, usize)>,
    pre: Vec<T>,
    tail: Trace<T>,
}

impl<T: Scalar> PairTrace<T> {
    /// Scores, `GROUPS` per pair, in pair order.
    pub fn scores(&self) -> &[T] {
        &self.tail.output().data
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }
}

/// Something that can score every member of a search window.
pub trait WindowScorer: Sync {
    type Prepared: Sync;

    fn prepare(&self, noisy: &Image) -> Result<Self::Prepared>;

    /// Scores flattened as `[window][member][group]`.
    fn score_windows(&self, prepared: &Self::Prepared, windows: &[SearchWindow]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug)]
pub struct Matcher<T> {
    arch: MatcherArch,
    features: Network,
    compare: Network,
    tail: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Matcher<T> {
    pub fn new(arch: MatcherArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        arch.feature_net().init_params(&mut params, rng)?;
        arch.compare_net().init_params(&mut params, rng)?;
        Self::with_params(arch, params)
    }

    pub fn with_params(arch: MatcherArch, params: ParamStore<T>) -> Result<Self> {
        arch.validate()?;
        let features = arch.feature_net();
        let compare = arch.compare_net();
        features.check_params(&params)?;
        compare.check_params(&params)?;
        Ok(Self {
            arch,
            features,
            compare,
            tail: arch.tail_net(),
            params,
        })
    }

    pub fn arch(&self) -> &MatcherArch {
        &self.arch
    }

    pub fn to_checkpoint(&self, metadata: Vec<(String, String)>, with_moments: bool) -> Checkpoint {
        Checkpoint {
            arch: self.arch.digest(),
            parent: [0; 32],
            descriptor: self.arch.descriptor(),
            metadata,
            params: self.params.cast(),
            has_moments: with_moments,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch = MatcherArch::parse_descriptor(&ckpt.descriptor)?;
        ckpt.expect_arch(&arch.digest())?;
        Self::with_params(arch, ckpt.params_as()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Feature vectors for a batch of scaled contexts, `n × D`.
    pub fn features(&self, contexts: &Tensor<T>) -> Result<Tensor<T>> {
        self.features.infer(&self.params, contexts)
    }

    /// Features of one raw 16×16×3 context (intensities in `[0, 255]`).
    pub fn extract_features(&self, context: &[f32]) -> Result<Vec<T>> {
        if context.len() != CONTEXT_LEN {
            return Err(Error::Contract(format!(
                "context must hold {CONTEXT_LEN} samples, got {}",
                context.len()
            )));
        }
        let scale = T::of(INPUT_SCALE);
        let data = context.iter().map(|v| T::of(*v as f64) * scale).collect();
        let x = Tensor::from_vec(1, CONTEXT, CONTEXT, CHANNELS, data)?;
        Ok(self.features(&x)?.data)
    }

    /// Scores of `feat_i` against `feat_j` by direct evaluation of the
    /// comparison stack.
    pub fn score_pair(&self, feat_i: &[T], feat_j: &[T]) -> Result<Vec<T>> {
        let d = self.arch.feature_width;
        if feat_i.len() != d || feat_j.len() != d {
            return Err(Error::Contract(format!(
                "feature width {d} expected, got {} and {}",
                feat_i.len(),
                feat_j.len()
            )));
        }
        let x = Tensor::from_vec(1, 1, 1, 2 * d, [feat_i, feat_j].concat())?;
        Ok(self.compare.infer(&self.params, &x)?.data)
    }

    /// `(U, V)` for `n` feature rows: `U = f·W₁[:D]`, `V = f·W₁[D:] + b₁`.
    fn project(&self, feats: &[T], n: usize) -> Result<(Vec<T>, Vec<T>)> {
        let (d, f) = (self.arch.feature_width, self.arch.hidden_width);
        let w = &self.params.get(&weight_name("fc1"))?.value;
        let b = &self.params.get(&bias_name("fc1"))?.value;
        let mut u = vec![T::zero(); n * f];
        gemm(false, false, n, f, d, T::one(), feats, &w[..d * f], T::zero(), &mut u);
        let mut v: Vec<T> = b.iter().copied().cycle().take(n * f).collect();
        gemm(false, false, n, f, d, T::one(), feats, &w[d * f..], T::one(), &mut v);
        Ok((u, v))
    }

    fn pair_hidden(&self, u: &[T], v: &[T], pairs: &[(usize, usize)]) -> Vec<T> {
        let f = self.arch.hidden_width;
        let mut z = Vec::with_capacity(pairs.len() * f);
        for &(i, j) in pairs {
            z.extend(u[i * f..(i + 1) * f].iter().zip(&v[j * f..(j + 1) * f]).map(|(a, b)| *a + *b));
        }
        z
    }

    /// Features for all patch positions of `image`.
    pub fn prepare_image(&self, image: &Image) -> Result<ImageFeatures<T>> {
        image.check_pipeline_size()?;
        let (h, w) = (image.height(), image.width());
        let cols = w - PATCH + 1;
        let positions: Vec<PatchRef> = (0..=h - PATCH)
            .flat_map(|r| (0..cols).map(move |c| PatchRef::patch(r, c)))
            .collect();
        let chunks: Vec<Vec<T>> = positions
            .par_chunks(FEATURE_CHUNK)
            .map(|chunk| self.features(&context_batch(image, chunk)).map(|t| t.data))
            .collect::<Result<_>>()?;
        let features = chunks.concat();
        let (u, v) = self.project(&features, positions.len())?;
        Ok(ImageFeatures {
            height: h,
            width: w,
            cols,
            features,
            u,
            v,
        })
    }

    /// Scores for position pairs `(reference, candidate)` of a prepared image.
    pub fn score_prepared(&self, prep: &ImageFeatures<T>, pairs: &[(usize, usize)]) -> Result<Vec<T>> {
        let f = self.arch.hidden_width;
        let mut h = self.pair_hidden(&prep.u, &prep.v, pairs);
        h.iter_mut().for_each(|x| *x = x.max(T::zero()));
        let x = Tensor::from_vec(pairs.len(), 1, 1, f, h)?;
        Ok(self.tail.infer(&self.params, &x)?.data)
    }

    /// Scores for every (reference, member) pair of each window.
    pub fn score_image(&self, noisy: &Image, windows: &[SearchWindow]) -> Result<Vec<Vec<T>>> {
        let prep = self.prepare_image(noisy)?;
        windows
            .iter()
            .map(|win| {
                let i = prep.index(win.center);
                let pairs: Vec<(usize, usize)> = win.members.iter().map(|m| (i, prep.index(*m))).collect();
                self.score_prepared(&prep, &pairs)
            })
            .collect()
    }

    /// Training forward pass: features for a batch of scaled contexts and
    /// scores for `pairs` of row indices into that batch.
    pub fn forward_pairs(&self, contexts: Tensor<T>, pairs: Vec<(usize, usize)>) -> Result<PairTrace<T>> {
        let n = contexts.n;
        if let Some(&(i, j)) = pairs.iter().find(|(i, j)| *i >= n || *j >= n) {
            return Err(Error::Contract(format!("pair ({i}, {j}) outside a batch of {n} contexts")));
        }
        let features = self.features.forward(&self.params, contexts)?;
        let (u, v) = self.project(&features.output().data, n)?;
        let pre = self.pair_hidden(&u, &v, &pairs);
        let h = pre.iter().map(|x| x.max(T::zero())).collect();
        let x = Tensor::from_vec(pairs.len(), 1, 1, self.arch.hidden_width, h)?;
        let tail = self.tail.forward(&self.params, x)?;
        Ok(PairTrace {
            features,
            pairs,
            pre,
            tail,
        })
    }

    /// Accumulates parameter gradients given `∂L/∂scores`.
    pub fn backward_pairs(&mut self, trace: &PairTrace<T>, grad_scores: &[T]) -> Result<()> {
        let (d, f) = (self.arch.feature_width, self.arch.hidden_width);
        let p = trace.pairs.len();
        let go = Tensor::from_vec(p, 1, 1, GROUPS, grad_scores.to_vec())?;
        let mut dz = self.tail.backward(&mut self.params, &trace.tail, go)?.data;
        for (g, z) in dz.iter_mut().zip(&trace.pre) {
            if *z <= T::zero() {
                *g = T::zero();
            }
        }
        let feats = &trace.features.output().data;
        let n = trace.features.input.n;
        let mut du = vec![T::zero(); n * f];
        let mut dv = vec![T::zero(); n * f];
        for (k, &(i, j)) in trace.pairs.iter().enumerate() {
            let g = &dz[k * f..(k + 1) * f];
            du[i * f..(i + 1) * f].iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            dv[j * f..(j + 1) * f].iter_mut().zip(g).for_each(|(a, b)| *a += *b);
        }
        let w = self.params.get(&weight_name("fc1"))?.value.clone();
        {
            let wg = &mut self.params.get_mut(&weight_name("fc1"))?.grad;
            let (top, bottom) = wg.split_at_mut(d * f);
            gemm(true, false, d, f, n, T::one(), feats, &du, T::one(), top);
            gemm(true, false, d, f, n, T::one(), feats, &dv, T::one(), bottom);
        }
        {
            let bg = &mut self.params.get_mut(&bias_name("fc1"))?.grad;
            for row in dv.chunks_exact(f) {
                bg.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
            }
        }
        let mut dfeat = vec![T::zero(); n * d];
        gemm(false, true, n, d, f, T::one(), &du, &w[..d * f], T::zero(), &mut dfeat);
        gemm(false, true, n, d, f, T::one(), &dv, &w[d * f..], T::one(), &mut dfeat);
        let gf = Tensor::from_vec(n, 1, 1, d, dfeat)?;
        self.features.backward(&mut self.params, &trace.features, gf)?;
        Ok(())
    }
}

impl<T: Scalar> WindowScorer for Matcher<T> {
    type Prepared = ImageFeatures<T>;

    fn prepare(&self, noisy: &Image) -> Result<ImageFeatures<T>> {
        self.prepare_image(noisy)
    }

    fn score_windows(&self, prep: &ImageFeatures<T>, windows: &[SearchWindow]) -> Result<Vec<f64>> {
        let pairs: Vec<(usize, usize)> = windows
            .iter()
            .flat_map(|win| {
                let i = prep.index(win.center);
                win.members.iter().map(move |m| (i, prep.index(*m)))
            })
            .collect();
        Ok(self.score_prepared(prep, &pairs)?.iter().map(|s| s.as_f64()).collect())
    }
}
