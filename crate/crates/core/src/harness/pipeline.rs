//! Checkpoint loading and image-directory plumbing for the command line.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imgio::{read_image, Image};
use crate::matcher::Matcher;
use crate::nncore::checkpoint::hex;
use crate::nncore::Checkpoint;
use crate::refine::Refiner;

pub fn load_matcher(path: &Path) -> Result<Matcher<f32>> {
    Matcher::from_checkpoint(&Checkpoint::load(path)?)
}

/// Loads a refiner and checks it was trained behind exactly `matcher`.
pub fn load_refiner(path: &Path, matcher: &Matcher<f32>) -> Result<Refiner<f32>> {
    let ckpt = Checkpoint::load(path)?;
    let want = matcher.params.digest();
    if ckpt.parent != want {
        return Err(Error::Checkpoint(format!(
            "{}: refiner was trained behind matcher {}, not {}; retrain the refiner",
            path.display(),
            hex(&ckpt.parent),
            hex(&want)
        )));
    }
    Refiner::from_checkpoint(&ckpt)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "ppm")
    )
}

/// PNG/PPM files of `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Images of `dir` with their file names.
pub fn read_image_dir(dir: &Path) -> Result<(Vec<String>, Vec<Image>)> {
    let paths = list_images(dir)?;
    let names = paths
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let images = paths.iter().map(read_image).collect::<Result<_>>()?;
    Ok((names, images))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::write_image;
    use crate::matcher::MatcherArch;
    use crate::refine::RefineArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> MatcherArch {
        MatcherArch {
            stage_widths: [4, 4, 4],
            tail_width: 4,
            feature_width: 4,
            hidden_width: 4,
        }
    }

    #[test]
    fn refiner_parent_must_match_matcher() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Matcher::<f32>::new(small(), &mut rng).unwrap();
        let other = Matcher::<f32>::new(small(), &mut rng).unwrap();
        let r = Refiner::<f32>::new(RefineArch { width: 4 }, &mut rng).unwrap();
        let (mp, rp) = (dir.path().join("m.ckpt"), dir.path().join("r.ckpt"));
        m.to_checkpoint(vec![], false).save(&mp).unwrap();
        r.to_checkpoint(m.params.digest(), vec![], false).save(&rp).unwrap();
        let loaded = load_matcher(&mp).unwrap();
        assert!(load_refiner(&rp, &loaded).is_ok());
        assert!(matches!(load_refiner(&rp, &other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn image_dir_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.ppm"] {
            write_image(&Image::zeros(4, 5), dir.path().join(name)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let (names, imgs) = read_image_dir(dir.path()).unwrap();
        assert_eq!(names, vec!["a.ppm", "b.png"]);
        assert_eq!(imgs.len(), 2);
        assert!(matches!(read_image_dir(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
