use super::{DataError, LineSample};
use crate::ctc::LabelSequence;
use crate::tensor::{Element, Tensor};

/// Width-padded images `[B, 1, H, W]` with per-sample bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    /// Output frames of each sample's unpadded width.
    pub frames: Vec<usize>,
    pub widths: Vec<usize>,
    pub labels: Vec<LabelSequence>,
    pub transcripts: Vec<String>,
}

/// Pads every sample by edge replication to the widest width rounded up to
/// a multiple of 4.
pub fn collate_batch<T: Element>(samples: &[&LineSample]) -> Result<Batch<T>, DataError> {
    let first = samples.first().ok_or(DataError::EmptyBatch)?;
    let height = first.image.height;
    if samples.iter().any(|s| s.image.height != height) {
        return Err(DataError::HeightMismatch(samples.iter().map(|s| s.image.height).collect()));
    }
    let width = samples.iter().map(|s| s.image.width).max().unwrap_or(0).div_ceil(4) * 4;
    let mut data = Vec::with_capacity(samples.len() * height * width);
    for s in samples {
        let w = s.image.width;
        for row in s.image.data.chunks_exact(w) {
            data.extend(row.iter().map(|&v| T::from_f64_lossy(v)));
            let edge = T::from_f64_lossy(row[w - 1]);
            data.extend(std::iter::repeat_n(edge, width - w));
        }
    }
    let images = Tensor::new(vec![samples.len(), 1, height, width], data).expect("sizes computed above");
    Ok(Batch {
        images,
        frames: samples.iter().map(|s| s.frame_count()).collect(),
        widths: samples.iter().map(|s| s.width_px()).collect(),
        labels: samples.iter().map(|s| s.labels.clone()).collect(),
        transcripts: samples.iter().map(|s| s.transcript.clone()).collect(),
    })
}
