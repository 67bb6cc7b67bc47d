//! Matcher pre-training and fine-tuning, refiner data generation, and the
//! end-to-end denoising helpers built on them.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{denoise_stage1, loss_full_raw, loss_pair_raw};
use crate::error::{Error, Result};
use crate::harness::config::{Settings, SigmaMode, Stage, TrainSchedule};
use crate::harness::metrics::{evaluate, MetricsReport};
use crate::imgio::{add_noise, extract_patch_into, Image, NoiseModel, PatchRef, SearchWindow, PATCH, PATCH_LEN};
use crate::matcher::{context_batch, Matcher};
use crate::nncore::{ParamStore, Tensor};
use crate::refine::{train_refine, RefineSample, Refiner};
use crate::transform::{analyze, TransformSpec, COEFFS, GROUPS};

/// Noise level for one training image.
pub fn sample_sigma(mode: SigmaMode, rng: &mut impl Rng) -> f64 {
    match mode {
        SigmaMode::Fixed(s) => s,
        SigmaMode::Blind { low, high } => rng.random_range(low..=high),
    }
}

/// Deterministic noisy copies: image `i` gets its own noise stream.
pub fn noisy_set(images: &[Image], sigma: f64, seed: u64) -> Vec<Image> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| add_noise(img, NoiseModel::new(sigma, seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64))))
        .collect()
}

fn coeffs_at(image: &Image, p: PatchRef, spec: &TransformSpec) -> [f64; COEFFS] {
    let mut buf = [0.0; PATCH_LEN];
    extract_patch_into(image, p, &mut buf);
    *analyze(&buf, spec).values()
}

fn check_corpus(images: &[Image]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Training("training corpus is empty".into()));
    }
    for img in images {
        img.check_pipeline_size()?;
    }
    Ok(())
}

fn noise_image(img: &Image, mode: SigmaMode, rng: &mut impl Rng) -> Image {
    let sigma = sample_sigma(mode, rng);
    add_noise(img, NoiseModel::new(sigma, rng.random()))
}

/// Per-step mean losses of a training stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub losses: Vec<f64>,
}

impl LossHistory {
    /// Mean over the `k`-th of `parts` equal slices.
    pub fn slice_mean(&self, k: usize, parts: usize) -> f64 {
        let n = self.losses.len();
        let (a, b) = (k * n / parts, ((k + 1) * n / parts).max(k * n / parts + 1).min(n));
        self.losses[a..b].iter().sum::<f64>() / (b - a) as f64
    }
}

/// Pairwise pre-training: every non-overlapping patch of each sampled
/// image is paired with a shuffled partner and scored in both orders.
pub fn pretrain_match(
    matcher: &mut Matcher<f32>,
    corpus: &[Image],
    sigma: SigmaMode,
    schedule: &TrainSchedule,
    rng: &mut impl Rng,
) -> Result<LossHistory> {
    check_corpus(corpus)?;
    let spec = TransformSpec::default();
    let mut hist = LossHistory::default();
    for step in 0..schedule.pretrain_steps {
        let mut positions_all = Vec::new();
        let mut clean_c = Vec::new();
        let mut noisy_c = Vec::new();
        let mut pairs = Vec::new();
        let mut contexts = Vec::new();
        for _ in 0..schedule.pretrain_images {
            let img = &corpus[rng.random_range(0..corpus.len())];
            let noisy = noise_image(img, sigma, rng);
            let positions: Vec<PatchRef> = (0..=img.height() - PATCH)
                .step_by(PATCH)
                .flat_map(|r| (0..=img.width() - PATCH).step_by(PATCH).map(move |c| PatchRef::patch(r, c)))
                .collect();
            let base = positions_all.len();
            let mut perm: Vec<usize> = (0..positions.len()).collect();
            perm.shuffle(rng);
            for (i, &j) in perm.iter().enumerate() {
                if i != j {
                    pairs.push((base + i, base + j));
                    pairs.push((base + j, base + i));
                }
            }
            for p in &positions {
                clean_c.push(coeffs_at(img, *p, &spec));
                noisy_c.push(coeffs_at(&noisy, *p, &spec));
            }
            contexts.push(context_batch::<f32>(&noisy, &positions));
            positions_all.extend(positions);
        }
        if pairs.is_empty() {
            return Err(Error::Training("pre-training batch has no patch pairs".into()));
        }
        let batch = concat_batches(contexts)?;
        let trace = matcher.forward_pairs(batch, pairs.clone())?;
        let scores = trace.scores();
        let norm = 1.0 / (pairs.len() * COEFFS) as f64;
        let mut grad = vec![0f32; scores.len()];
        let mut loss = 0.0;
        let mut g64 = [0.0; GROUPS];
        let mut m64 = [0.0; GROUPS];
        for (k, &(i, j)) in pairs.iter().enumerate() {
            for g in 0..GROUPS {
                m64[g] = scores[k * GROUPS + g] as f64;
            }
            loss += loss_pair_raw(&clean_c[i], &noisy_c[i], &noisy_c[j], &m64, Some(&mut g64));
            for g in 0..GROUPS {
                grad[k * GROUPS + g] = (g64[g] * norm) as f32;
            }
        }
        let loss = loss * norm;
        if !loss.is_finite() {
            return Err(Error::Training(format!("pre-training loss diverged at step {step}")));
        }
        matcher.backward_pairs(&trace, &grad)?;
        matcher.params.adam_step(schedule.lr);
        hist.losses.push(loss);
    }
    Ok(hist)
}

fn concat_batches(parts: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let first = parts.first().ok_or_else(|| Error::Training("empty batch".into()))?;
    let (h, w, c) = (first.h, first.w, first.c);
    let n = parts.iter().map(|t| t.n).sum();
    let data = parts.into_iter().flat_map(|t| t.data).collect();
    Tensor::from_vec(n, h, w, c, data)
}

/// Validation hook for model selection during fine-tuning.
pub struct Selection<'a> {
    pub every: usize,
    pub clean: &'a [Image],
    pub noisy: &'a [Image],
    pub radius: usize,
}

/// Full-loss fine-tuning: reference patches are drawn uniformly over
/// images, then uniformly over positions, and scored against their whole
/// search window.
pub fn finetune_match(
    matcher: &mut Matcher<f32>,
    corpus: &[Image],
    sigma: SigmaMode,
    schedule: &TrainSchedule,
    selection: Option<Selection<'_>>,
    rng: &mut impl Rng,
) -> Result<LossHistory> {
    check_corpus(corpus)?;
    let spec = TransformSpec::default();
    let steps = schedule.finetune_steps;
    let mut hist = LossHistory::default();
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    matcher.params.reset_moments();
    for step in 0..steps {
        let mut contexts = Vec::new();
        let mut pairs = Vec::new();
        let mut refs = Vec::new();
        let mut base = 0;
        for _ in 0..schedule.finetune_refs {
            let img = &corpus[rng.random_range(0..corpus.len())];
            let noisy = noise_image(img, sigma, rng);
            let (h, w) = (img.height(), img.width());
            let center = PatchRef::patch(rng.random_range(0..=h - PATCH), rng.random_range(0..=w - PATCH));
            let win = SearchWindow::around(center, schedule.train_radius, h, w);
            let mut positions = vec![center];
            positions.extend(&win.members);
            let noisy_c: Vec<[f64; COEFFS]> = positions.iter().map(|p| coeffs_at(&noisy, *p, &spec)).collect();
            let start = pairs.len();
            pairs.extend((1..positions.len()).map(|k| (base, base + k)));
            refs.push((coeffs_at(img, center, &spec), noisy_c, start));
            contexts.push(context_batch::<f32>(&noisy, &positions));
            base += positions.len();
        }
        let trace = matcher.forward_pairs(concat_batches(contexts)?, pairs.clone())?;
        let scores = trace.scores();
        let norm = 1.0 / (refs.len() * COEFFS) as f64;
        let mut grad = vec![0f32; scores.len()];
        let mut loss = 0.0;
        for (clean, noisy_c, start) in &refs {
            let k = noisy_c.len() - 1;
            let s: Vec<f64> = scores[start * GROUPS..(start + k) * GROUPS].iter().map(|v| *v as f64).collect();
            let cands: Vec<&[f64; COEFFS]> = noisy_c[1..].iter().collect();
            let mut g = vec![0.0; s.len()];
            loss += loss_full_raw(clean, &noisy_c[0], &cands, &s, Some(&mut g));
            for (dst, v) in grad[start * GROUPS..(start + k) * GROUPS].iter_mut().zip(&g) {
                *dst = (v * norm) as f32;
            }
        }
        let loss = loss * norm;
        if !loss.is_finite() {
            return Err(Error::Training(format!("fine-tuning loss diverged at step {step}")));
        }
        matcher.backward_pairs(&trace, &grad)?;
        matcher.params.adam_step(schedule.lr_at(step, steps));
        hist.losses.push(loss);
        if let Some(sel) = &selection {
            if sel.every > 0 && ((step + 1) % sel.every == 0 || step + 1 == steps) {
                let psnr = stage1_report(matcher, sel.clean, sel.noisy, sel.radius)?.mean_psnr;
                if best.as_ref().is_none_or(|(b, _)| psnr > *b) {
                    best = Some((psnr, matcher.params.clone()));
                }
            }
        }
    }
    if let Some((_, params)) = best {
        matcher.params = params;
    }
    Ok(hist)
}

/// Stage-1 metrics of `matcher` on a noisy set.
pub fn stage1_report(matcher: &Matcher<f32>, clean: &[Image], noisy: &[Image], radius: usize) -> Result<MetricsReport> {
    let start = Instant::now();
    let out: Vec<Image> = noisy
        .iter()
        .map(|n| denoise_stage1(n, matcher, radius, &TransformSpec::default()))
        .collect::<Result<_>>()?;
    let mut rep = evaluate(clean, noisy, &out)?;
    rep.add_timing("stage1", start.elapsed().as_secs_f64());
    Ok(rep)
}

#[derive(Clone, Debug)]
pub struct MatcherRun {
    pub matcher: Matcher<f32>,
    pub pretrain: LossHistory,
    pub finetune: LossHistory,
}

/// Pre-training (when `pretrain` is set) followed by fine-tuning, from a
/// seed-determined initialization.
pub fn train_matcher(train: &[Image], val: &[Image], settings: &Settings, pretrain: bool) -> Result<MatcherRun> {
    settings.validate()?;
    let seed = settings.denoise.seed;
    let mut matcher = Matcher::new(settings.matcher, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let sigma = settings.denoise.sigma_mode;
    let pre = if pretrain {
        pretrain_match(&mut matcher, train, sigma, &settings.schedule, &mut rng)?
    } else {
        LossHistory::default()
    };
    let val_sigma = match sigma {
        SigmaMode::Fixed(s) => s,
        SigmaMode::Blind { low, high } => 0.5 * (low + high),
    };
    let val_noisy = noisy_set(val, val_sigma, seed.wrapping_add(2));
    let selection = (settings.schedule.select_every > 0 && !val.is_empty()).then(|| Selection {
        every: settings.schedule.select_every,
        clean: val,
        noisy: &val_noisy,
        radius: settings.schedule.train_radius,
    });
    let fine = finetune_match(&mut matcher, train, sigma, &settings.schedule, selection, &mut rng)?;
    Ok(MatcherRun {
        matcher,
        pretrain: pre,
        finetune: fine,
    })
}

/// `(clean, noisy, stage1)` triples from a frozen matcher.
pub fn refine_samples(matcher: &Matcher<f32>, train: &[Image], settings: &Settings) -> Result<Vec<RefineSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.denoise.seed.wrapping_add(3));
    train
        .iter()
        .map(|clean| {
            let noisy = noise_image(clean, settings.denoise.sigma_mode, &mut rng);
            let stage1 = denoise_stage1(&noisy, matcher, settings.denoise.window_radius, &TransformSpec::default())?;
            Ok(RefineSample {
                clean: clean.clone(),
                noisy,
                stage1,
            })
        })
        .collect()
}

pub fn train_refiner(samples: &[RefineSample], settings: &Settings) -> Result<(Refiner<f32>, LossHistory)> {
    let seed = settings.denoise.seed.wrapping_add(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut refiner = Refiner::new(settings.refine, &mut rng)?;
    let losses = train_refine(&mut refiner, samples, &settings.schedule, &mut rng)?;
    Ok((refiner, LossHistory { losses }))
}

/// Stage-1 estimate and, for the full pipeline, the refined estimate.
pub fn denoise_image(
    noisy: &Image,
    matcher: &Matcher<f32>,
    refiner: Option<&Refiner<f32>>,
    stage: Stage,
    radius: usize,
) -> Result<(Image, Option<Image>)> {
    let s1 = denoise_stage1(noisy, matcher, radius, &TransformSpec::default())?;
    let full = match (stage, refiner) {
        (Stage::MatchOnly, _) => None,
        (Stage::Full, Some(r)) => Some(r.refine_forward(noisy, &s1)?),
        (Stage::Full, None) => return Err(Error::Contract("full pipeline needs a refiner".into())),
    };
    Ok((s1, full))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corpus::{tiled_texture, synth_image, CorpusKind};
    use crate::matcher::MatcherArch;

    fn tiny_settings() -> Settings {
        let mut s = Settings::default();
        s.matcher = MatcherArch {
            stage_widths: [4, 6, 8],
            tail_width: 8,
            feature_width: 8,
            hidden_width: 8,
        };
        s.schedule.pretrain_steps = 60;
        s.schedule.finetune_steps = 6;
        s.schedule.train_radius = 3;
        s.schedule.finetune_refs = 2;
        s
    }

    fn corpus(n: usize) -> Vec<Image> {
        (0..n).map(|i| synth_image(CorpusKind::TiledTexture, 32, 5, i as u64)).collect()
    }

    #[test]
    fn blind_sigma_is_uniform_on_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut draws: Vec<f64> = (0..1000).map(|_| sample_sigma(SigmaMode::blind(), &mut rng)).collect();
        draws.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = x / 55.0;
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        // 1% critical value for n = 1000
        assert!(ks < 1.63 / n.sqrt(), "KS statistic {ks}");
        assert!(draws[0] >= 0.0 && draws[999] <= 55.0);
        assert_eq!(sample_sigma(SigmaMode::Fixed(25.0), &mut rng), 25.0);
    }

    #[test]
    fn pretraining_loss_decreases() {
        let s = tiny_settings();
        let mut m = Matcher::new(s.matcher, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let schedule = TrainSchedule {
            pretrain_steps: 150,
            lr: 3e-3,
            ..s.schedule
        };
        let hist = pretrain_match(&mut m, &corpus(4), SigmaMode::Fixed(25.0), &schedule, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_eq!(hist.losses.len(), 150);
        assert!(hist.slice_mean(9, 10) < hist.slice_mean(0, 10), "{} -> {}", hist.slice_mean(0, 10), hist.slice_mean(9, 10));
    }

    #[test]
    fn aligned_identical_tiles_learn_high_scores() {
        // one tile type, pairs drawn only between exact repeats
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = tiny_settings();
        let mut m = Matcher::new(s.matcher, &mut rng).unwrap();
        let (img, placements) = loop {
            let (img, p) = tiled_texture(48, &mut rng);
            if p.iter().all(|q| q.tile == 0) {
                break (img, p);
            }
        };
        let spec = TransformSpec::default();
        let positions: Vec<PatchRef> = placements.iter().map(|p| PatchRef::patch(p.row, p.col)).collect();
        let n = positions.len();
        for step in 0..200 {
            let noisy = add_noise(&img, NoiseModel::new(25.0, step));
            let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j))).collect();
            let clean: Vec<_> = positions.iter().map(|p| coeffs_at(&img, *p, &spec)).collect();
            let nc: Vec<_> = positions.iter().map(|p| coeffs_at(&noisy, *p, &spec)).collect();
            let t = m.forward_pairs(context_batch(&noisy, &positions), pairs.clone()).unwrap();
            let sc = t.scores();
            let mut grad = vec![0f32; sc.len()];
            let mut g = [0.0; GROUPS];
            for (k, &(i, j)) in pairs.iter().enumerate() {
                let mv: [f64; GROUPS] = std::array::from_fn(|q| sc[k * GROUPS + q] as f64);
                loss_pair_raw(&clean[i], &nc[i], &nc[j], &mv, Some(&mut g));
                for q in 0..GROUPS {
                    grad[k * GROUPS + q] = (g[q] / (pairs.len() * COEFFS) as f64) as f32;
                }
            }
            m.backward_pairs(&t, &grad).unwrap();
            m.params.adam_step(3e-3);
        }
        let noisy = add_noise(&img, NoiseModel::new(25.0, 999));
        let prep = m.prepare_image(&noisy).unwrap();
        let pairs: Vec<(usize, usize)> = (1..n).map(|j| (prep.index(positions[0]), prep.index(positions[j]))).collect();
        let sc = m.score_prepared(&prep, &pairs).unwrap();
        let mean = sc.iter().sum::<f32>() / sc.len() as f32;
        assert!(mean > 0.8, "mean score {mean}");
    }

    #[test]
    fn finetune_runs_and_selection_keeps_best() {
        let s = tiny_settings();
        let train = corpus(3);
        let val = corpus(5)[3..].to_vec();
        let mut sel = s.clone();
        sel.schedule.select_every = 3;
        let run = train_matcher(&train, &val, &sel, false).unwrap();
        assert_eq!(run.finetune.losses.len(), 6);
        assert!(run.pretrain.losses.is_empty());
        assert!(run.matcher.params.all_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let s = tiny_settings();
        let train = corpus(2);
        let a = train_matcher(&train, &[], &s, true).unwrap();
        let b = train_matcher(&train, &[], &s, true).unwrap();
        assert_eq!(a.matcher.params.digest(), b.matcher.params.digest());
        assert_eq!(a.finetune, b.finetune);
    }

    #[test]
    fn empty_corpus_rejected() {
        let s = tiny_settings();
        assert!(matches!(train_matcher(&[], &[], &s, true), Err(Error::Training(_))));
    }
}
