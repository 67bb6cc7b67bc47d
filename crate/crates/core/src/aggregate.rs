//! Score-weighted averaging of sub-band coefficients, the two training
//! losses, and the full match-average denoising pass.
//!
//! For a reference `sᵢ` with candidates `sⱼ` and scores `mᵢⱼᵍ`, each group
//! is estimated as
//!
//! ```text
//! r̂ᵍ = (sᵢᵍ + Σⱼ mᵢⱼᵍ sⱼᵍ) / (1 + Σⱼ mᵢⱼᵍ)
//! ```

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imgio::{extract_patch_into, Assembler, Image, PatchRef, SearchWindow, PATCH, PATCH_LEN};
use crate::matcher::WindowScorer;
use crate::transform::{analyze, synthesize, SubbandCoeffs, TransformSpec, COEFFS, GROUPS, GROUP_OFFSETS};

/// Scores for one (reference, candidate) pair, one per coefficient group.
pub type ScoreVector = [f64; GROUPS];

const WINDOW_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationInput {
    pub reference: SubbandCoeffs,
    pub candidates: Vec<SubbandCoeffs>,
    pub scores: Vec<ScoreVector>,
}

impl AggregationInput {
    pub fn new(reference: SubbandCoeffs, candidates: Vec<SubbandCoeffs>, scores: Vec<ScoreVector>) -> Result<Self> {
        let input = Self {
            reference,
            candidates,
            scores,
        };
        input.check()?;
        Ok(input)
    }

    fn check(&self) -> Result<()> {
        if self.candidates.len() != self.scores.len() {
            return Err(Error::Contract(format!(
                "{} candidates but {} score vectors",
                self.candidates.len(),
                self.scores.len()
            )));
        }
        Ok(())
    }

    fn flat_scores(&self) -> Vec<f64> {
        self.scores.iter().flatten().copied().collect()
    }

    fn candidate_refs(&self) -> Vec<&[f64; COEFFS]> {
        self.candidates.iter().map(|c| c.values()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoisedPatch {
    pub coeffs: SubbandCoeffs,
    pub pixels: [f64; PATCH_LEN],
}

/// Weighted average on raw coefficient arrays; `scores` holds `GROUPS`
/// values per candidate.
pub fn weighted_average(reference: &[f64; COEFFS], candidates: &[&[f64; COEFFS]], scores: &[f64]) -> [f64; COEFFS] {
    debug_assert_eq!(scores.len(), candidates.len() * GROUPS);
    let mut num = *reference;
    let mut den = [1.0f64; GROUPS];
    for (c, m) in candidates.iter().zip(scores.chunks_exact(GROUPS)) {
        for g in 0..GROUPS {
            let w = m[g];
            if w == 0.0 {
                continue;
            }
            den[g] += w;
            let (a, b) = (GROUP_OFFSETS[g], GROUP_OFFSETS[g + 1]);
            for (n, s) in num[a..b].iter_mut().zip(&c[a..b]) {
                *n += w * s;
            }
        }
    }
    for g in 0..GROUPS {
        let inv = 1.0 / den[g];
        num[GROUP_OFFSETS[g]..GROUP_OFFSETS[g + 1]].iter_mut().for_each(|v| *v *= inv);
    }
    num
}

pub fn aggregate(input: &AggregationInput, spec: &TransformSpec) -> Result<DenoisedPatch> {
    input.check()?;
    let est = weighted_average(input.reference.values(), &input.candidate_refs(), &input.flat_scores());
    let coeffs = SubbandCoeffs::from_values(est);
    let pixels = synthesize(&coeffs, spec);
    Ok(DenoisedPatch { coeffs, pixels })
}

/// `Σ_g ‖r̂ᵍ − rᵍ‖²` on raw arrays. When `grad` is given, writes
/// `∂L/∂mⱼᵍ = 2⟨r̂ᵍ − rᵍ, sⱼᵍ − r̂ᵍ⟩ / (1 + Σₖ mₖᵍ)` for every candidate.
pub fn loss_full_raw(
    clean: &[f64; COEFFS],
    reference: &[f64; COEFFS],
    candidates: &[&[f64; COEFFS]],
    scores: &[f64],
    grad: Option<&mut [f64]>,
) -> f64 {
    let est = weighted_average(reference, candidates, scores);
    let resid: Vec<f64> = est.iter().zip(clean).map(|(a, b)| a - b).collect();
    let loss = resid.iter().map(|v| v * v).sum();
    if let Some(grad) = grad {
        debug_assert_eq!(grad.len(), scores.len());
        let mut den = [1.0f64; GROUPS];
        for m in scores.chunks_exact(GROUPS) {
            for g in 0..GROUPS {
                den[g] += m[g];
            }
        }
        for (c, gr) in candidates.iter().zip(grad.chunks_exact_mut(GROUPS)) {
            for g in 0..GROUPS {
                let (a, b) = (GROUP_OFFSETS[g], GROUP_OFFSETS[g + 1]);
                let dot: f64 = (a..b).map(|k| resid[k] * (c[k] - est[k])).sum();
                gr[g] = 2.0 * dot / den[g];
            }
        }
    }
    loss
}

/// Squared error of the aggregate against the clean coefficients, and
/// its gradient with respect to every score.
pub fn loss_full(clean: &SubbandCoeffs, input: &AggregationInput) -> Result<(f64, Vec<ScoreVector>)> {
    input.check()?;
    let scores = input.flat_scores();
    let mut grad = vec![0.0; scores.len()];
    let loss = loss_full_raw(clean.values(), input.reference.values(), &input.candidate_refs(), &scores, Some(&mut grad));
    let grad = grad
        .chunks_exact(GROUPS)
        .map(|c| c.try_into().unwrap())
        .collect();
    Ok((loss, grad))
}

/// Pairwise loss `Σ_g [‖sᵢᵍ − rᵍ‖² + (mᵍ)²‖sⱼᵍ − rᵍ‖²] / (1 + mᵍ)²` on raw
/// arrays. Gradient: `2(mᵍ‖sⱼᵍ − rᵍ‖² − ‖sᵢᵍ − rᵍ‖²) / (1 + mᵍ)³`.
pub fn loss_pair_raw(
    clean: &[f64; COEFFS],
    reference: &[f64; COEFFS],
    candidate: &[f64; COEFFS],
    scores: &[f64],
    grad: Option<&mut [f64]>,
) -> f64 {
    let mut loss = 0.0;
    let mut g_out = [0.0; GROUPS];
    for g in 0..GROUPS {
        let (a, b) = (GROUP_OFFSETS[g], GROUP_OFFSETS[g + 1]);
        let ei: f64 = (a..b).map(|k| (reference[k] - clean[k]).powi(2)).sum();
        let ej: f64 = (a..b).map(|k| (candidate[k] - clean[k]).powi(2)).sum();
        let m = scores[g];
        let d = 1.0 + m;
        loss += (ei + m * m * ej) / (d * d);
        g_out[g] = 2.0 * (m * ej - ei) / (d * d * d);
    }
    if let Some(grad) = grad {
        grad.copy_from_slice(&g_out);
    }
    loss
}

pub fn loss_pair(
    clean: &SubbandCoeffs,
    reference: &SubbandCoeffs,
    candidate: &SubbandCoeffs,
    scores: &ScoreVector,
) -> (f64, ScoreVector) {
    let mut grad = [0.0; GROUPS];
    let loss = loss_pair_raw(clean.values(), reference.values(), candidate.values(), scores, Some(&mut grad));
    (loss, grad)
}

/// Sub-band coefficients of every 8×8 position, row-major over positions.
#[derive(Clone, Debug)]
pub struct CoeffTable {
    cols: usize,
    coeffs: Vec<[f64; COEFFS]>,
}

impl CoeffTable {
    pub fn new(image: &Image, spec: &TransformSpec) -> Self {
        let rows = image.height().saturating_sub(PATCH - 1);
        let cols = image.width().saturating_sub(PATCH - 1);
        let coeffs = (0..rows * cols)
            .into_par_iter()
            .map_init(
                || [0.0f64; PATCH_LEN],
                |buf, i| {
                    extract_patch_into(image, PatchRef::patch(i / cols, i % cols), buf);
                    *analyze(buf, spec).values()
                },
            )
            .collect();
        Self { cols, coeffs }
    }

    pub fn get(&self, p: PatchRef) -> &[f64; COEFFS] {
        &self.coeffs[p.row * self.cols + p.col]
    }
}

/// Match-average estimate of a whole image: every stride-1 position is
/// a reference, its window members are scored, aggregated, and the
/// synthesized patches averaged back into an image.
pub fn denoise_stage1<S: WindowScorer>(
    noisy: &Image,
    scorer: &S,
    radius: usize,
    spec: &TransformSpec,
) -> Result<Image> {
    noisy.check_pipeline_size()?;
    if radius == 0 {
        return Err(Error::Contract("window radius must be at least 1".into()));
    }
    let (h, w) = (noisy.height(), noisy.width());
    let table = CoeffTable::new(noisy, spec);
    let prepared = scorer.prepare(noisy)?;
    let centers = crate::imgio::reference_positions(h, w, 1);
    let estimates: Vec<Vec<(PatchRef, [f64; PATCH_LEN])>> = centers
        .par_chunks(WINDOW_CHUNK)
        .map(|chunk| {
            let windows: Vec<SearchWindow> = chunk.iter().map(|c| SearchWindow::around(*c, radius, h, w)).collect();
            let scores = scorer.score_windows(&prepared, &windows)?;
            let expected: usize = windows.iter().map(|w| w.members.len() * GROUPS).sum();
            if scores.len() != expected {
                return Err(Error::Contract(format!(
                    "scorer returned {} scores for {expected} slots",
                    scores.len()
                )));
            }
            let mut off = 0;
            let mut out = Vec::with_capacity(windows.len());
            for win in &windows {
                let n = win.members.len() * GROUPS;
                let cands: Vec<&[f64; COEFFS]> = win.members.iter().map(|m| table.get(*m)).collect();
                let est = weighted_average(table.get(win.center), &cands, &scores[off..off + n]);
                off += n;
                out.push((win.center, synthesize(&SubbandCoeffs::from_values(est), spec)));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut acc = Assembler::new(h, w);
    for (at, px) in estimates.iter().flatten() {
        acc.add(*at, px);
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::{add_noise, NoiseModel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_groups(v: f64) -> SubbandCoeffs {
        SubbandCoeffs::from_values([v; COEFFS])
    }

    fn random_coeffs(rng: &mut impl Rng) -> SubbandCoeffs {
        let mut v = [0.0; COEFFS];
        v.iter_mut().for_each(|x| *x = rng.random_range(-50.0..50.0));
        SubbandCoeffs::from_values(v)
    }

    fn random_input(rng: &mut impl Rng, k: usize) -> AggregationInput {
        let reference = random_coeffs(rng);
        let candidates = (0..k).map(|_| random_coeffs(rng)).collect();
        let scores = (0..k)
            .map(|_| {
                let mut s = [0.0; GROUPS];
                s.iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
                s
            })
            .collect();
        AggregationInput::new(reference, candidates, scores).unwrap()
    }

    #[test]
    fn spec_examples() {
        let spec = TransformSpec::default();
        let one = AggregationInput::new(scalar_groups(2.0), vec![scalar_groups(4.0)], vec![[1.0; GROUPS]]).unwrap();
        assert!(aggregate(&one, &spec).unwrap().coeffs.values().iter().all(|v| *v == 3.0));
        let two = AggregationInput::new(
            scalar_groups(1.0),
            vec![scalar_groups(3.0), scalar_groups(5.0)],
            vec![[1.0; GROUPS]; 2],
        )
        .unwrap();
        assert!(aggregate(&two, &spec).unwrap().coeffs.values().iter().all(|v| *v == 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut zero = random_input(&mut rng, 5);
        zero.scores.iter_mut().for_each(|s| *s = [0.0; GROUPS]);
        assert_eq!(aggregate(&zero, &spec).unwrap().coeffs, zero.reference);
        let empty = AggregationInput::new(zero.reference.clone(), vec![], vec![]).unwrap();
        assert_eq!(aggregate(&empty, &spec).unwrap().coeffs, zero.reference);
        assert!(AggregationInput::new(scalar_groups(0.0), vec![scalar_groups(1.0)], vec![]).is_err());
    }

    #[test]
    fn pixels_are_synthesized_coeffs() {
        let spec = TransformSpec::default();
        let input = random_input(&mut ChaCha8Rng::seed_from_u64(1), 4);
        let out = aggregate(&input, &spec).unwrap();
        let px = synthesize(&out.coeffs, &spec);
        assert!(out.pixels.iter().zip(&px).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn loss_full_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_input(&mut rng, 3);
        let est = aggregate(&input, &TransformSpec::default()).unwrap().coeffs;
        let (l, grad) = loss_full(&est, &input).unwrap();
        assert!(l < 1e-20);
        assert!(grad.iter().flatten().all(|g| g.abs() < 1e-9));

        let clean = random_coeffs(&mut rng);
        let empty = AggregationInput::new(input.reference.clone(), vec![], vec![]).unwrap();
        let noise: f64 = input
            .reference
            .values()
            .iter()
            .zip(clean.values())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!((loss_full(&clean, &empty).unwrap().0 - noise).abs() < 1e-9 * noise);
    }

    #[test]
    fn loss_full_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 4, 9] {
            let input = random_input(&mut rng, k);
            let clean = random_coeffs(&mut rng);
            let (_, grad) = loss_full(&clean, &input).unwrap();
            let h = 1e-5;
            for j in 0..k {
                for g in [0, 7, 17, 29] {
                    let mut up = input.clone();
                    up.scores[j][g] += h;
                    let mut dn = input.clone();
                    dn.scores[j][g] -= h;
                    let num = (loss_full(&clean, &up).unwrap().0 - loss_full(&clean, &dn).unwrap().0) / (2.0 * h);
                    let rel = (num - grad[j][g]).abs() / num.abs().max(grad[j][g].abs()).max(1e-7);
                    assert!(rel < 1e-6, "k={k} j={j} g={g}: {num} vs {}", grad[j][g]);
                }
            }
        }
    }

    #[test]
    fn loss_pair_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (clean, si, sj) = (random_coeffs(&mut rng), random_coeffs(&mut rng), random_coeffs(&mut rng));
        let noise: f64 = si.values().iter().zip(clean.values()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((loss_pair(&clean, &si, &sj, &[0.0; GROUPS]).0 - noise).abs() < 1e-9 * noise);

        // one coarse scalar group with unit error and a perfect candidate
        let g = (0..GROUPS).find(|g| GROUP_OFFSETS[g + 1] - GROUP_OFFSETS[*g] == 1).unwrap();
        let r = [0.0; COEFFS];
        let mut s = r;
        s[GROUP_OFFSETS[g]] = 1.0;
        let mut m = [0.0; GROUPS];
        m[g] = 1.0;
        let l = loss_pair_raw(&r, &s, &r, &m, None);
        assert!((l - 0.25).abs() < 1e-15);
    }

    #[test]
    fn loss_pair_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (clean, si, sj) = (random_coeffs(&mut rng), random_coeffs(&mut rng), random_coeffs(&mut rng));
        let mut m = [0.0; GROUPS];
        m.iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
        let (_, grad) = loss_pair(&clean, &si, &sj, &m);
        for g in 0..GROUPS {
            let h = 1e-5;
            let (mut up, mut dn) = (m, m);
            up[g] += h;
            dn[g] -= h;
            let num = (loss_pair(&clean, &si, &sj, &up).0 - loss_pair(&clean, &si, &sj, &dn).0) / (2.0 * h);
            assert!((num - grad[g]).abs() / num.abs().max(1e-7) < 1e-6);
        }
    }

    #[test]
    fn loss_full_differentiable_on_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = random_input(&mut rng, 1);
        let clean = random_coeffs(&mut rng);
        for step in 0..=10 {
            let mut inp = input.clone();
            inp.scores[0][12] = step as f64 / 10.0;
            let (_, grad) = loss_full(&clean, &inp).unwrap();
            let h = 1e-6;
            let mut up = inp.clone();
            up.scores[0][12] += h;
            let mut dn = inp.clone();
            dn.scores[0][12] -= h;
            let num = (loss_full(&clean, &up).unwrap().0 - loss_full(&clean, &dn).unwrap().0) / (2.0 * h);
            assert!((num - grad[0][12]).abs() / num.abs().max(1e-7) < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn aggregate_is_convex_combination(seed in 0u64..1000, k in 0usize..8) {
            let input = random_input(&mut ChaCha8Rng::seed_from_u64(seed), k);
            let out = aggregate(&input, &TransformSpec::default()).unwrap().coeffs;
            for i in 0..COEFFS {
                let vals = std::iter::once(input.reference.values()[i])
                    .chain(input.candidates.iter().map(|c| c.values()[i]));
                let (lo, hi) = vals.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
                prop_assert!(out.values()[i] >= lo - 1e-9 && out.values()[i] <= hi + 1e-9);
            }
        }

        #[test]
        fn aggregate_and_loss_are_permutation_invariant(seed in 0u64..1000, k in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_input(&mut rng, k);
            let clean = random_coeffs(&mut rng);
            let mut rev = input.clone();
            rev.candidates.reverse();
            rev.scores.reverse();
            let spec = TransformSpec::default();
            let a = aggregate(&input, &spec).unwrap().coeffs;
            let b = aggregate(&rev, &spec).unwrap().coeffs;
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            let (la, _) = loss_full(&clean, &input).unwrap();
            let (lb, _) = loss_full(&clean, &rev).unwrap();
            prop_assert!((la - lb).abs() <= 1e-10 * la.max(1.0));
        }
    }

    struct Constant(f64);

    impl WindowScorer for Constant {
        type Prepared = ();

        fn prepare(&self, _: &Image) -> Result<()> {
            Ok(())
        }

        fn score_windows(&self, _: &(), windows: &[SearchWindow]) -> Result<Vec<f64>> {
            Ok(vec![self.0; windows.iter().map(|w| w.members.len() * GROUPS).sum()])
        }
    }

    #[test]
    fn zero_scores_reproduce_the_input() {
        let clean = Image::from_fn(24, 30, |r, c, ch| ((r * 7 + c * 3 + ch * 40) % 256) as f32);
        let noisy = add_noise(&clean, NoiseModel::new(25.0, 1));
        let out = denoise_stage1(&noisy, &Constant(0.0), 4, &TransformSpec::default()).unwrap();
        assert!(out.data().iter().zip(noisy.data()).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn uniform_scores_smooth_noise() {
        let clean = Image::from_fn(32, 32, |_, _, _| 100.0);
        let noisy = add_noise(&clean, NoiseModel::new(25.0, 2));
        let out = denoise_stage1(&noisy, &Constant(1.0), 3, &TransformSpec::default()).unwrap();
        let mse = |img: &Image| img.data().iter().map(|v| (*v as f64 - 100.0).powi(2)).sum::<f64>();
        assert!(mse(&out) < 0.2 * mse(&noisy));
    }

    #[test]
    fn tiny_image_rejected() {
        let img = Image::zeros(12, 40);
        assert!(denoise_stage1(&img, &Constant(0.0), 3, &TransformSpec::default()).is_err());
    }
}
