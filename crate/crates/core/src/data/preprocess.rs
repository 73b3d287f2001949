use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_pgm, Charset, DataError, GrayImage};
use crate::ctc::{required_frames, LabelSequence};

/// How the width follows the height rescale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    /// Rescale the height only; the width keeps its pixel count.
    #[default]
    HeightOnly,
    /// Scale the width by the same factor as the height.
    PreserveAspect,
}

/// A standardized single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LineImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Half-pixel-centred bilinear resampling; the identity when sizes match.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, new_h: usize, new_w: usize) -> Vec<f64> {
    if (h, w) == (new_h, new_w) {
        return src.to_vec();
    }
    let axis = |n: usize, new_n: usize| -> Vec<(usize, usize, f64)> {
        let scale = n as f64 / new_n as f64;
        (0..new_n)
            .map(|i| {
                let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    };
    let rows = axis(h, new_h);
    let cols = axis(w, new_w);
    let mut out = Vec::with_capacity(new_h * new_w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = src[r0 * w + c0] * (1.0 - fx) + src[r0 * w + c1] * fx;
            let bottom = src[r1 * w + c0] * (1.0 - fx) + src[r1 * w + c1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Zero mean, unit (population) variance; images with negligible variance
/// map to all zeros.
pub fn standardize(data: &mut [f64]) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var.sqrt() < 1e-8 {
        data.fill(0.0);
        return;
    }
    let inv = 1.0 / var.sqrt();
    for v in data {
        *v = (*v - mean) * inv;
    }
}

/// Rescales to `target_height` and standardizes.
pub fn preprocess(image: &GrayImage, target_height: usize, mode: ResizeMode) -> LineImage {
    let new_w = match mode {
        ResizeMode::HeightOnly => image.width,
        ResizeMode::PreserveAspect => {
            ((image.width as f64 * target_height as f64 / image.height as f64).round() as usize).max(1)
        }
    };
    let mut data = resize_bilinear(&image.to_unit(), image.height, image.width, target_height, new_w);
    standardize(&mut data);
    LineImage { height: target_height, width: new_w, data }
}

pub fn load_and_preprocess(path: &Path, target_height: usize, mode: ResizeMode) -> Result<LineImage, DataError> {
    Ok(preprocess(&read_pgm(path)?, target_height, mode))
}

/// A preprocessed image with its encoded transcript, checked for CTC
/// feasibility at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct LineSample {
    pub id: String,
    pub image: LineImage,
    pub transcript: String,
    pub labels: LabelSequence,
}

impl LineSample {
    pub fn new(id: impl Into<String>, image: LineImage, transcript: &str, charset: &Charset) -> Result<Self, DataError> {
        let id = id.into();
        let labels = charset.encode(transcript)?;
        let frames = image.width / 4;
        let required = required_frames(labels.as_slice());
        if frames < required.max(1) {
            return Err(DataError::Infeasible { sample: id, frames, required: required.max(1) });
        }
        Ok(Self { id, image, transcript: transcript.to_string(), labels })
    }

    pub fn width_px(&self) -> usize {
        self.image.width
    }

    /// Output frames the model produces for this sample.
    pub fn frame_count(&self) -> usize {
        self.image.width / 2 / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_becomes_zero() {
        let img = GrayImage { width: 5, height: 3, maxval: 255, pixels: vec![128; 15] };
        let out = preprocess(&img, 8, ResizeMode::HeightOnly);
        assert_eq!((out.height, out.width), (8, 5));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_height_keeps_geometry() {
        let img = GrayImage { width: 3, height: 2, maxval: 255, pixels: vec![0, 51, 102, 153, 204, 255] };
        let out = preprocess(&img, 2, ResizeMode::HeightOnly);
        let mut expect = img.to_unit();
        standardize(&mut expect);
        assert_eq!(out.data, expect);
    }

    #[test]
    fn standardize_is_idempotent() {
        let mut v: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64).collect();
        standardize(&mut v);
        let once = v.clone();
        standardize(&mut v);
        assert!(once.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn aspect_mode_scales_width() {
        let img = GrayImage { width: 40, height: 20, maxval: 255, pixels: (0..800).map(|i| (i % 256) as u16).collect() };
        assert_eq!(preprocess(&img, 10, ResizeMode::PreserveAspect).width, 20);
        assert_eq!(preprocess(&img, 10, ResizeMode::HeightOnly).width, 40);
    }

    #[test]
    fn infeasible_sample_rejected() {
        let cs = Charset::new("ab".chars()).unwrap();
        let image = LineImage { height: 1, width: 8, data: vec![0.0; 8] };
        assert!(LineSample::new("s", image.clone(), "ab", &cs).is_ok());
        let err = LineSample::new("s", image, "aa", &cs).unwrap_err();
        assert_eq!(err, DataError::Infeasible { sample: "s".into(), frames: 2, required: 3 });
    }
}
