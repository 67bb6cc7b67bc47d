//! Procedural images with controllable self-similarity.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imgio::{write_image, Image, CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    TiledTexture,
    RepeatedStripe,
    Mixed,
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TiledTexture => "tiled-texture",
            Self::RepeatedStripe => "repeated-stripe",
            Self::Mixed => "mixed",
        })
    }
}

impl FromStr for CorpusKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tiled-texture" | "tiled" => Ok(Self::TiledTexture),
            "repeated-stripe" | "stripe" => Ok(Self::RepeatedStripe),
            "mixed" => Ok(Self::Mixed),
            _ => Err(format!("unknown corpus kind {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    pub count: usize,
    pub val_count: usize,
    pub size: usize,
    pub kind: CorpusKind,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            count: 64,
            val_count: 16,
            size: 96,
            kind: CorpusKind::TiledTexture,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Contract(format!("corpus image size must be at least 32, got {}", self.size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Image>,
    pub val: Vec<Image>,
}

/// One tile copy: which tile, and its top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub tile: usize,
    pub row: usize,
    pub col: usize,
}

struct Canvas {
    size: usize,
    data: Vec<f32>,
}

impl Canvas {
    /// Smooth color gradient around mid-gray.
    fn gradient(size: usize, rng: &mut impl Rng) -> Self {
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(112.0..144.0));
        let dr: [f32; 3] = std::array::from_fn(|_| rng.random_range(-40.0..40.0));
        let dc: [f32; 3] = std::array::from_fn(|_| rng.random_range(-40.0..40.0));
        let mut data = Vec::with_capacity(size * size * CHANNELS);
        for r in 0..size {
            for c in 0..size {
                let (y, x) = (r as f32 / size as f32 - 0.5, c as f32 / size as f32 - 0.5);
                for ch in 0..CHANNELS {
                    data.push(base[ch] + dr[ch] * y + dc[ch] * x);
                }
            }
        }
        Self { size, data }
    }

    fn add(&mut self, r: usize, c: usize, ch: usize, v: f32) {
        self.data[(r * self.size + c) * CHANNELS + ch] += v;
    }

    fn finish(self) -> Image {
        let data = self.data.into_iter().map(|v| v.clamp(0.0, 255.0)).collect();
        Image::new(self.size, self.size, data).expect("canvas dimensions")
    }
}

/// Random `t×t` texture as offsets from the background: a flat tint,
/// a few colored rectangles, and a faint oriented wave.
fn random_tile(t: usize, rng: &mut impl Rng) -> Vec<f32> {
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-30.0..30.0));
    let mut tile: Vec<f32> = (0..t * t).flat_map(|_| tint).collect();
    for _ in 0..rng.random_range(2..=4) {
        let (h, w) = (rng.random_range(2..=t / 2 + 1), rng.random_range(2..=t / 2 + 1));
        let (r0, c0) = (rng.random_range(0..=t - h), rng.random_range(0..=t - w));
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(-70.0..70.0));
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                for ch in 0..CHANNELS {
                    tile[(r * t + c) * CHANNELS + ch] += color[ch];
                }
            }
        }
    }
    let (fy, fx) = (rng.random_range(0.3..1.6f32), rng.random_range(0.3..1.6f32));
    let amp = rng.random_range(8.0..20.0f32);
    for r in 0..t {
        for c in 0..t {
            let w = amp * (fy * r as f32 + fx * c as f32).sin();
            for ch in 0..CHANNELS {
                tile[(r * t + c) * CHANNELS + ch] += w;
            }
        }
    }
    tile
}

/// Tiles of 8–16 px repeated on a lattice of pitch `tile + 3` with
/// per-copy jitter of up to 3 px.
pub fn tiled_texture(size: usize, rng: &mut impl Rng) -> (Image, Vec<Placement>) {
    let mut canvas = Canvas::gradient(size, rng);
    let kinds = rng.random_range(1..=2);
    let t = rng.random_range(8..=16usize);
    let tiles: Vec<Vec<f32>> = (0..kinds).map(|_| random_tile(t, rng)).collect();
    let pitch = t + 3;
    let mut placements = Vec::new();
    let cells = (size - t - 3) / pitch + 1;
    for i in 0..cells {
        for j in 0..cells {
            let row = i * pitch + rng.random_range(0..=3);
            let col = j * pitch + rng.random_range(0..=3);
            if row + t > size || col + t > size {
                continue;
            }
            let tile = (i + j) % kinds;
            placements.push(Placement { tile, row, col });
            for r in 0..t {
                for c in 0..t {
                    for ch in 0..CHANNELS {
                        canvas.add(row + r, col + c, ch, tiles[tile][(r * t + c) * CHANNELS + ch]);
                    }
                }
            }
        }
    }
    (canvas.finish(), placements)
}

/// A random 1-D profile of period 8–16 px repeated along one of four
/// orientations.
pub fn repeated_stripe(size: usize, rng: &mut impl Rng) -> Image {
    let mut canvas = Canvas::gradient(size, rng);
    let period = rng.random_range(8..=16usize);
    let mut profile = vec![[0f32; 3]; period];
    let mut level: [f32; 3] = std::array::from_fn(|_| rng.random_range(-40.0..40.0));
    for p in profile.iter_mut() {
        if rng.random_bool(0.35) {
            level = std::array::from_fn(|_| rng.random_range(-60.0..60.0));
        }
        *p = level;
    }
    let orient = rng.random_range(0..4);
    for r in 0..size {
        for c in 0..size {
            let k = match orient {
                0 => r,
                1 => c,
                2 => r + c,
                _ => r + size - c,
            } % period;
            for ch in 0..CHANNELS {
                canvas.add(r, c, ch, profile[k][ch]);
            }
        }
    }
    canvas.finish()
}

/// Image `index` of the stream identified by `seed`.
pub fn synth_image(kind: CorpusKind, size: usize, seed: u64, index: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let kind = match kind {
        CorpusKind::Mixed if rng.random_bool(0.5) => CorpusKind::TiledTexture,
        CorpusKind::Mixed => CorpusKind::RepeatedStripe,
        k => k,
    };
    match kind {
        CorpusKind::TiledTexture => tiled_texture(size, &mut rng).0,
        _ => repeated_stripe(size, &mut rng),
    }
}

/// Deterministic train/validation split: training images are indices
/// `0..count`, validation images follow.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let make = |range: std::ops::Range<usize>| -> Vec<Image> {
        range.map(|i| synth_image(spec.kind, spec.size, spec.seed, i as u64)).collect()
    };
    Ok(Corpus {
        train: make(0..spec.count),
        val: make(spec.count..spec.count + spec.val_count),
    })
}

/// Writes `train/NNNN.png` and `val/NNNN.png` under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    for (sub, images) in [("train", &corpus.train), ("val", &corpus.val)] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for (i, img) in images.iter().enumerate() {
            write_image(img, d.join(format!("{i:04}.png")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_tile_repeats_at_least_nine_times() {
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (img, placements) = tiled_texture(96, &mut rng);
            assert_eq!((img.height(), img.width()), (96, 96));
            let kinds = placements.iter().map(|p| p.tile).max().unwrap() + 1;
            for k in 0..kinds {
                let n = placements.iter().filter(|p| p.tile == k).count();
                assert!(n >= 9, "seed {seed}: tile {k} placed {n} times");
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = CorpusSpec {
            count: 3,
            val_count: 2,
            size: 48,
            kind: CorpusKind::Mixed,
            seed: 9,
        };
        let a = synth_corpus(&spec).unwrap();
        assert_eq!(a, synth_corpus(&spec).unwrap());
        assert_eq!((a.train.len(), a.val.len()), (3, 2));
        assert_ne!(a.train[0], a.train[1]);
        let other = synth_corpus(&CorpusSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn mean_intensity_is_mid_gray() {
        for kind in [CorpusKind::TiledTexture, CorpusKind::RepeatedStripe, CorpusKind::Mixed] {
            let c = synth_corpus(&CorpusSpec {
                count: 16,
                val_count: 0,
                size: 96,
                kind,
                seed: 1,
            })
            .unwrap();
            let (sum, n) = c
                .train
                .iter()
                .flat_map(|i| i.data())
                .fold((0.0f64, 0usize), |(s, n), v| (s + *v as f64, n + 1));
            let mean = sum / n as f64;
            assert!((96.0..=160.0).contains(&mean), "{kind}: mean {mean}");
        }
    }

    #[test]
    fn small_size_rejected() {
        let spec = CorpusSpec {
            size: 24,
            ..Default::default()
        };
        assert!(synth_corpus(&spec).is_err());
    }
}
