//! Seeded synthetic text lines rendered with the bitmap font.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::font::{glyph, GLYPH_COLS, GLYPH_ROWS};
use super::{preprocess, write_pgm, Charset, DataError, Dataset, DatasetManifest, GrayImage, LineSample, ManifestRecord, ResizeMode};

/// Horizontal pixels per symbol: a 10-px glyph plus a 2-px gap.
pub const CELL_WIDTH: usize = 12;
/// Blank columns at each end of a line.
pub const MARGIN: usize = 4;
const RENDER_HEIGHT: usize = 64;
const X_SCALE: usize = 2;
const Y_SCALE: f64 = 4.0;
const BACKGROUND: f64 = 0.92;
const INK: f64 = 0.1;
const NOISE_STD: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub count: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl SynthSpec {
    fn validate(&self, charset: &Charset) -> Result<(), DataError> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DataError::Synth(format!("length range {}..={} is empty or starts at 0", self.min_len, self.max_len)));
        }
        if let Some(&c) = charset.symbols().iter().find(|&&c| glyph(c).is_none()) {
            return Err(DataError::Uncovered(c));
        }
        if charset.symbols().iter().all(|&c| c == ' ') {
            return Err(DataError::Synth("charset needs a non-space symbol".into()));
        }
        Ok(())
    }
}

fn random_text(charset: &Charset, len: usize, rng: &mut ChaCha8Rng) -> String {
    let symbols = charset.symbols();
    let mut out: Vec<char> = Vec::with_capacity(len);
    for i in 0..len {
        loop {
            let c = symbols[rng.random_range(0..symbols.len())];
            // spaces only between words, never doubled
            let edge = i == 0 || i + 1 == len || out.last() == Some(&' ');
            if c != ' ' || !edge {
                out.push(c);
                break;
            }
        }
    }
    out.into_iter().collect()
}

fn render(text: &str, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> GrayImage {
    let len = text.chars().count();
    let width = 2 * MARGIN + len * CELL_WIDTH;
    let mut canvas = vec![BACKGROUND; RENDER_HEIGHT * width];
    let v_scale: f64 = rng.random_range(0.9..=1.1);
    let row_px = Y_SCALE * v_scale;
    let glyph_h = (GLYPH_ROWS as f64 * row_px).round() as usize;
    let top = (RENDER_HEIGHT - glyph_h) / 2;
    for (i, c) in text.chars().enumerate() {
        let dx: i64 = rng.random_range(-2..=2);
        let mask = glyph(c).expect("coverage checked");
        let left = (MARGIN + i * CELL_WIDTH + 1) as i64 + dx;
        for y in 0..glyph_h {
            let r = ((y as f64 / row_px) as usize).min(GLYPH_ROWS - 1);
            for x in 0..GLYPH_COLS * X_SCALE {
                let px = left + x as i64;
                if mask[r][x / X_SCALE] && (0..width as i64).contains(&px) {
                    canvas[(top + y) * width + px as usize] = INK;
                }
            }
        }
    }
    let pixels = canvas
        .into_iter()
        .map(|v| ((v + noise.sample(rng)).clamp(0.0, 1.0) * 255.0).round() as u16)
        .collect();
    GrayImage { width, height: RENDER_HEIGHT, maxval: 255, pixels }
}

/// Renders `spec.count` random lines; identical for identical inputs.
pub fn synth_lines(charset: &Charset, spec: &SynthSpec) -> Result<Vec<(GrayImage, String)>, DataError> {
    spec.validate(charset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    Ok((0..spec.count)
        .map(|_| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let text = random_text(charset, len, &mut rng);
            (render(&text, &mut rng, &noise), text)
        })
        .collect())
}

/// Manifest (images under `images/`, charset `charset.txt`) plus the images
/// it names, in record order.
pub fn synth_generate(charset: &Charset, split: &str, spec: &SynthSpec) -> Result<(DatasetManifest, Vec<GrayImage>), DataError> {
    let lines = synth_lines(charset, spec)?;
    let mut records = Vec::with_capacity(lines.len());
    let mut images = Vec::with_capacity(lines.len());
    for (i, (img, text)) in lines.into_iter().enumerate() {
        records.push(ManifestRecord { image: PathBuf::from(format!("images/{split}_{i:05}.pgm")), transcript: text });
        images.push(img);
    }
    Ok((DatasetManifest { split: split.into(), charset: "charset.txt".into(), records }, images))
}

/// Writes `charset.txt`, `<split>.tsv` and the images under `out_dir`;
/// returns the manifest path.
pub fn write_synth_dataset(out_dir: &Path, split: &str, charset: &Charset, spec: &SynthSpec) -> Result<PathBuf, DataError> {
    let (manifest, images) = synth_generate(charset, split, spec)?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| DataError::io(&image_dir, e))?;
    charset.save(&out_dir.join("charset.txt"))?;
    for (r, img) in manifest.records.iter().zip(&images) {
        write_pgm(&out_dir.join(&r.image), img)?;
    }
    let path = out_dir.join(format!("{split}.tsv"));
    manifest.save(&path)?;
    Ok(path)
}

/// In-memory equivalent of writing and reloading a synthetic split.
pub fn synth_dataset(
    charset: &Charset,
    split: &str,
    spec: &SynthSpec,
    target_height: usize,
    mode: ResizeMode,
) -> Result<Dataset, DataError> {
    let (manifest, images) = synth_generate(charset, split, spec)?;
    let samples = manifest
        .records
        .iter()
        .zip(&images)
        .map(|(r, img)| LineSample::new(r.image.display().to_string(), preprocess(img, target_height, mode), &r.transcript, charset))
        .collect::<Result<_, _>>()?;
    Ok(Dataset { split: split.into(), samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec { count: 20, seed: 7, min_len: 3, max_len: 10 }
    }

    #[test]
    fn deterministic_and_sized() {
        let cs = Charset::new("abc de".chars()).unwrap();
        let a = synth_lines(&cs, &spec()).unwrap();
        assert_eq!(a, synth_lines(&cs, &spec()).unwrap());
        for (img, text) in &a {
            let n = text.chars().count();
            assert_eq!(img.width, 2 * MARGIN + n * CELL_WIDTH);
            assert_eq!(img.height, 64);
            assert!((3..=10).contains(&n));
            assert!(!text.starts_with(' ') && !text.ends_with(' ') && !text.contains("  "));
        }
    }

    #[test]
    fn uncovered_symbol_rejected() {
        let cs = Charset::new("aZ".chars()).unwrap();
        assert_eq!(synth_lines(&cs, &spec()).unwrap_err(), DataError::Uncovered('Z'));
    }

    #[test]
    fn zero_count_is_empty() {
        let cs = Charset::new("ab".chars()).unwrap();
        let (m, imgs) = synth_generate(&cs, "train", &SynthSpec { count: 0, ..spec() }).unwrap();
        assert!(m.records.is_empty() && imgs.is_empty());
    }
}
