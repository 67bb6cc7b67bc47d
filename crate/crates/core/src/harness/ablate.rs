//! Window-size ablation and score-map dumps.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::aggregate::denoise_stage1;
use crate::error::{Error, Result};
use crate::harness::metrics::psnr;
use crate::imgio::{Image, PatchRef, SearchWindow, CHANNELS};
use crate::matcher::WindowScorer;
use crate::transform::{group_label, GroupKind, Scale, TransformSpec, GROUPS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub radius: usize,
    pub psnr: f64,
    pub seconds: f64,
}

/// Mean stage-1 PSNR and wall time over a noisy set, per window radius.
pub fn ablate_window<S: WindowScorer>(
    scorer: &S,
    clean: &[Image],
    noisy: &[Image],
    radii: &[usize],
) -> Result<Vec<AblationRow>> {
    if clean.len() != noisy.len() || clean.is_empty() {
        return Err(Error::Contract(format!(
            "ablation needs matching non-empty sets, got {} clean and {} noisy",
            clean.len(),
            noisy.len()
        )));
    }
    let spec = TransformSpec::default();
    radii
        .iter()
        .map(|&radius| {
            let start = Instant::now();
            let mut total = 0.0;
            for (c, n) in clean.iter().zip(noisy) {
                total += psnr(c, &denoise_stage1(n, scorer, radius, &spec)?)?;
            }
            Ok(AblationRow {
                radius,
                psnr: total / clean.len() as f64,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("radius  psnr_db  seconds\n");
    for r in rows {
        out.push_str(&format!("{:>6}  {:>7.3}  {:>7.2}\n", r.radius, r.psnr, r.seconds));
    }
    out
}

/// Which score groups are averaged into one map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreAggregate {
    All,
    Scale(Scale),
    Scaling,
    Group(usize),
}

impl ScoreAggregate {
    pub fn includes(self, g: usize) -> bool {
        match (self, group_label(g).kind) {
            (Self::All, _) => true,
            (Self::Scale(s), GroupKind::Detail { scale, .. }) => s == scale,
            (Self::Scaling, GroupKind::Scaling) => true,
            (Self::Group(k), _) => k == g,
            _ => false,
        }
    }
}

impl fmt::Display for ScoreAggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Scale(Scale::Coarse) => f.write_str("coarse"),
            Self::Scale(Scale::Mid) => f.write_str("mid"),
            Self::Scale(Scale::Fine) => f.write_str("fine"),
            Self::Scaling => f.write_str("scaling"),
            Self::Group(g) => write!(f, "g{g}"),
        }
    }
}

impl FromStr for ScoreAggregate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "coarse" => Ok(Self::Scale(Scale::Coarse)),
            "mid" => Ok(Self::Scale(Scale::Mid)),
            "fine" => Ok(Self::Scale(Scale::Fine)),
            "scaling" => Ok(Self::Scaling),
            _ => match s.strip_prefix('g').and_then(|n| n.parse::<usize>().ok()) {
                Some(g) if g < GROUPS => Ok(Self::Group(g)),
                _ => Err(format!("unknown score aggregate {s:?} (all, coarse, mid, fine, scaling, g0..g29)")),
            },
        }
    }
}

/// `(2r+1)×(2r+1)` gray maps of the scores around `center`, one per
/// aggregate. Offsets outside the image stay black; the center is white.
pub fn score_maps<S: WindowScorer>(
    scorer: &S,
    noisy: &Image,
    center: PatchRef,
    radius: usize,
    aggregates: &[ScoreAggregate],
) -> Result<Vec<Image>> {
    if radius == 0 || !center.fits(noisy.height(), noisy.width()) {
        return Err(Error::Contract(format!(
            "score map needs radius >= 1 and a patch inside the image, got radius {radius} at ({}, {})",
            center.row, center.col
        )));
    }
    let win = SearchWindow::around(center, radius, noisy.height(), noisy.width());
    let prep = scorer.prepare(noisy)?;
    let scores = scorer.score_windows(&prep, std::slice::from_ref(&win))?;
    let side = 2 * radius + 1;
    let mut maps = Vec::with_capacity(aggregates.len());
    for agg in aggregates {
        let groups: Vec<usize> = (0..GROUPS).filter(|g| agg.includes(*g)).collect();
        let mut map = Image::zeros(side, side);
        for ch in 0..CHANNELS {
            map.set(radius, radius, ch, 255.0);
        }
        for (k, m) in win.members.iter().enumerate() {
            let s = &scores[k * GROUPS..(k + 1) * GROUPS];
            let mean = groups.iter().map(|g| s[*g]).sum::<f64>() / groups.len() as f64;
            let (r, c) = (m.row + radius - center.row, m.col + radius - center.col);
            for ch in 0..CHANNELS {
                map.set(r, c, ch, (255.0 * mean).clamp(0.0, 255.0) as f32);
            }
        }
        maps.push(map);
    }
    Ok(maps)
}
