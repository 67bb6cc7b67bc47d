//! Image rasters, file I/O, Gaussian noise, and patch bookkeeping.
//!
//! An [`Image`] always has three channels. Samples are `f32` gray levels on
//! the `[0, 255]` scale, stored row-major with channels interleaved:
//! the sample for `(row, col, ch)` lives at `(row * width + col) * 3 + ch`.
//! Values are never clipped in memory; clamping and rounding happen only in
//! [`write_image`].
//!
//! Denoising patches are 8×8. Each patch also has a 16×16 context centered on
//! it, cut from the image after symmetric reflect padding by 4 pixels
//! (`-1 -> 0`, `-2 -> 1`, ..., mirrored about the edge between pixels).

use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const PATCH: usize = 8;
pub const CONTEXT: usize = 16;
/// Reflect margin added around the image before cutting contexts.
pub const CONTEXT_PAD: usize = (CONTEXT - PATCH) / 2;
/// Samples in one 8×8×3 patch.
pub const PATCH_LEN: usize = PATCH * PATCH * CHANNELS;
/// Samples in one 16×16×3 context.
pub const CONTEXT_LEN: usize = CONTEXT * CONTEXT * CHANNELS;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Contract(format!(
                "image data length {} does not match {height}x{width}x{CHANNELS}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite sample {bad}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..CHANNELS {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * CHANNELS + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Fails unless one full 16×16 context fits inside the image.
    pub fn check_pipeline_size(&self) -> Result<()> {
        if self.height < CONTEXT || self.width < CONTEXT {
            return Err(Error::Contract(format!(
                "image is {}x{}, at least {CONTEXT}x{CONTEXT} is required",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Copy of the rectangle starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Image {
        assert!(row + height <= self.height && col + width <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for r in row..row + height {
            let start = self.index(r, col, 0);
            data.extend_from_slice(&self.data[start..start + width * CHANNELS]);
        }
        Image {
            height,
            width,
            data,
        }
    }

    /// Image enlarged by `pad` pixels on every side using symmetric reflection.
    pub fn reflect_pad(&self, pad: usize) -> Image {
        let h = self.height + 2 * pad;
        let w = self.width + 2 * pad;
        Image::from_fn(h, w, |r, c, ch| {
            let sr = reflect_index(r as isize - pad as isize, self.height);
            let sc = reflect_index(c as isize - pad as isize, self.width);
            self.get(sr, sc, ch)
        })
    }
}

/// Maps a possibly out-of-range coordinate back into `0..n` by mirroring
/// about the image edge, with the edge sample repeated (`-1 -> 0`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    assert!(n > 0);
    let n = n as isize;
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma: f64, seed: u64) -> Self {
        Self { sigma, seed }
    }
}

/// `image + ε`, `ε ~ N(0, σ²)` i.i.d. per sample. The result is not clipped.
pub fn add_noise(image: &Image, noise: NoiseModel) -> Image {
    assert!(noise.sigma >= 0.0, "noise sigma must be non-negative");
    let mut out = image.clone();
    if noise.sigma == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    for v in out.data.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v = (*v as f64 + noise.sigma * e) as f32;
    }
    out
}

/// Top-left corner of a square region. `size` is [`PATCH`] or [`CONTEXT`].
///
/// For contexts, `row`/`col` still name the top-left of the 8×8 patch the
/// context is centered on, in unpadded image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchRef {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl PatchRef {
    pub fn patch(row: usize, col: usize) -> Self {
        Self {
            row,
            col,
            size: PATCH,
        }
    }

    pub fn context(row: usize, col: usize) -> Self {
        Self {
            row,
            col,
            size: CONTEXT,
        }
    }

    /// Same position, context-sized.
    pub fn as_context(self) -> Self {
        Self::context(self.row, self.col)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.row + PATCH <= height && self.col + PATCH <= width
    }
}

/// Copies the square referenced by `at` into `out` (size·size·3 samples).
///
/// Contexts are read through symmetric reflection, so the context of any
/// valid 8×8 position is defined.
pub fn extract_patch_into<T: Copy + From<f32>>(image: &Image, at: PatchRef, out: &mut [T]) {
    assert!(
        at.fits(image.height, image.width),
        "patch at ({}, {}) outside {}x{} image",
        at.row,
        at.col,
        image.height,
        image.width
    );
    assert_eq!(out.len(), at.size * at.size * CHANNELS, "output buffer size");
    match at.size {
        PATCH => {
            for r in 0..PATCH {
                let start = image.index(at.row + r, at.col, 0);
                let src = &image.data[start..start + PATCH * CHANNELS];
                for (o, s) in out[r * PATCH * CHANNELS..(r + 1) * PATCH * CHANNELS]
                    .iter_mut()
                    .zip(src)
                {
                    *o = T::from(*s);
                }
            }
        }
        CONTEXT => {
            let top = at.row as isize - CONTEXT_PAD as isize;
            let left = at.col as isize - CONTEXT_PAD as isize;
            let interior = top >= 0
                && left >= 0
                && top as usize + CONTEXT <= image.height
                && left as usize + CONTEXT <= image.width;
            for r in 0..CONTEXT {
                let sr = if interior {
                    top as usize + r
                } else {
                    reflect_index(top + r as isize, image.height)
                };
                for c in 0..CONTEXT {
                    let sc = if interior {
                        left as usize + c
                    } else {
                        reflect_index(left + c as isize, image.width)
                    };
                    let src = image.index(sr, sc, 0);
                    let dst = (r * CONTEXT + c) * CHANNELS;
                    for ch in 0..CHANNELS {
                        out[dst + ch] = T::from(image.data[src + ch]);
                    }
                }
            }
        }
        other => panic!("unsupported patch size {other}"),
    }
}

/// Owned copy of the square referenced by `at`.
pub fn extract_patch(image: &Image, at: PatchRef) -> Vec<f64> {
    let mut out = vec![0.0; at.size * at.size * CHANNELS];
    extract_patch_into(image, at, &mut out);
    out
}

/// Writes an 8×8×3 raster back at `at`.
pub fn write_patch(image: &mut Image, at: PatchRef, patch: &[f64]) {
    assert_eq!(at.size, PATCH, "only 8x8 patches can be written back");
    assert!(at.fits(image.height, image.width), "patch outside image");
    assert_eq!(patch.len(), PATCH_LEN);
    for r in 0..PATCH {
        let start = image.index(at.row + r, at.col, 0);
        for (d, s) in image.data[start..start + PATCH * CHANNELS]
            .iter_mut()
            .zip(&patch[r * PATCH * CHANNELS..(r + 1) * PATCH * CHANNELS])
        {
            *d = *s as f32;
        }
    }
}

/// Candidate set around one reference patch.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchWindow {
    pub center: PatchRef,
    pub radius: usize,
    pub members: Vec<PatchRef>,
}

impl SearchWindow {
    /// All valid 8×8 positions within `radius` of `center` (Chebyshev
    /// distance), excluding the center, clipped at the image border.
    /// Members are ordered row-major by position.
    pub fn around(center: PatchRef, radius: usize, height: usize, width: usize) -> Self {
        assert!(radius >= 1, "window radius must be at least 1");
        assert!(center.fits(height, width), "window center outside image");
        let max_row = height - PATCH;
        let max_col = width - PATCH;
        let r0 = center.row.saturating_sub(radius);
        let r1 = (center.row + radius).min(max_row);
        let c0 = center.col.saturating_sub(radius);
        let c1 = (center.col + radius).min(max_col);
        let mut members = Vec::with_capacity((r1 - r0 + 1) * (c1 - c0 + 1));
        for row in r0..=r1 {
            for col in c0..=c1 {
                if row != center.row || col != center.col {
                    members.push(PatchRef::patch(row, col));
                }
            }
        }
        Self {
            center,
            radius,
            members,
        }
    }
}

/// Reference positions visited at `stride`. The last row/column of valid
/// positions is always included so every pixel is covered.
pub fn reference_positions(height: usize, width: usize, stride: usize) -> Vec<PatchRef> {
    assert!(stride >= 1, "stride must be at least 1");
    if height < PATCH || width < PATCH {
        return Vec::new();
    }
    let axis = |n: usize| {
        let last = n - PATCH;
        let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
        if *v.last().unwrap() != last {
            v.push(last);
        }
        v
    };
    let rows = axis(height);
    let cols = axis(width);
    rows.iter()
        .flat_map(|&r| cols.iter().map(move |&c| PatchRef::patch(r, c)))
        .collect()
}

/// One search window per reference position.
pub fn enumerate_windows(image: &Image, radius: usize, stride: usize) -> Vec<SearchWindow> {
    reference_positions(image.height, image.width, stride)
        .into_iter()
        .map(|p| SearchWindow::around(p, radius, image.height, image.width))
        .collect()
}

/// Running per-pixel sums for averaging overlapping patch estimates.
#[derive(Clone, Debug)]
pub struct Assembler {
    height: usize,
    width: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl Assembler {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            sums: vec![0.0; height * width * CHANNELS],
            counts: vec![0; height * width],
        }
    }

    pub fn add(&mut self, at: PatchRef, patch: &[f64]) {
        assert_eq!(at.size, PATCH);
        assert!(at.fits(self.height, self.width), "estimate outside image");
        assert_eq!(patch.len(), PATCH_LEN);
        for r in 0..PATCH {
            for c in 0..PATCH {
                let px = (at.row + r) * self.width + at.col + c;
                self.counts[px] += 1;
                let src = (r * PATCH + c) * CHANNELS;
                for ch in 0..CHANNELS {
                    self.sums[px * CHANNELS + ch] += patch[src + ch];
                }
            }
        }
    }

    pub fn finish(self) -> Result<Image> {
        let mut data = Vec::with_capacity(self.sums.len());
        for (px, &n) in self.counts.iter().enumerate() {
            if n == 0 {
                return Err(Error::Contract(format!(
                    "pixel ({}, {}) is not covered by any patch estimate",
                    px / self.width,
                    px % self.width
                )));
            }
            for ch in 0..CHANNELS {
                data.push((self.sums[px * CHANNELS + ch] / n as f64) as f32);
            }
        }
        Image::new(self.height, self.width, data)
    }
}

/// Per-pixel mean over all patch estimates covering that pixel.
pub fn assemble_image(estimates: &[(PatchRef, Vec<f64>)], height: usize, width: usize) -> Result<Image> {
    let mut acc = Assembler::new(height, width);
    for (at, patch) in estimates {
        acc.add(*at, patch);
    }
    acc.finish()
}

fn quantize(v: f32) -> u8 {
    // half-up rounding after clamping
    (v.clamp(0.0, 255.0) + 0.5).floor().min(255.0) as u8
}

/// Reads an 8-bit PNG or binary PPM (P6). Grayscale is replicated to RGB.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(path, &bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(path, &bytes)
    } else {
        Err(Error::format(path, "not a PNG or binary PPM (P6) file"))
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("unsupported bit depth {:?}, only 8-bit is supported", info.bit_depth),
        ));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let buf = &buf[..info.line_size * h];
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        other => {
            return Err(Error::format(
                path,
                format!("unsupported color type {other:?}, expected RGB or grayscale"),
            ))
        }
    };
    let image = Image::from_fn(h, w, |r, c, ch| {
        let base = r * info.line_size + c * channels;
        let i = if channels == 1 { base } else { base + ch };
        buf[i] as f32
    });
    Ok(image)
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Image> {
    // header: "P6" ws width ws height ws maxval, one whitespace byte, raster
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format(path, "truncated PPM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed PPM header"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::format(path, "malformed PPM header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(
            path,
            format!("unsupported PPM maxval {maxval}, only 8-bit (255) is supported"),
        ));
    }
    let raster = &bytes[pos..];
    if raster.len() < w * h * CHANNELS {
        return Err(Error::format(path, "truncated PPM raster"));
    }
    let data = raster[..w * h * CHANNELS].iter().map(|&b| b as f32).collect();
    Image::new(h, w, data)
}

/// Clamps to `[0, 255]`, rounds half-up to 8 bits, and writes PNG or P6 PPM
/// depending on the file extension (`.ppm` selects PPM, anything else PNG).
pub fn write_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = image.data.iter().map(|&v| quantize(v)).collect();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        write!(out, "P6\n{} {}\n255\n", image.width, image.height).map_err(|e| Error::io(path, e))?;
        out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    } else {
        let mut encoder = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let to_err = |e: png::EncodingError| Error::format(path, e.to_string());
        let mut writer = encoder.write_header().map_err(to_err)?;
        writer.write_image_data(&bytes).map_err(to_err)?;
        writer.finish().map_err(to_err)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
