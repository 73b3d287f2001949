use super::TrainError;
use crate::ctc::{ctc_loss_and_gradient, LabelSequence};
use crate::model::lattices_from_log_probs;
use crate::tensor::{Element, Tape, Var};

/// Mean per-sample CTC loss over a batch, recorded on `tape` as a scalar
/// with its exact gradient. Frames beyond `frames[b]` receive no gradient.
/// Returns the loss handle and the per-sample losses.
pub fn batch_ctc_loss<T: Element>(
    tape: &mut Tape<T>,
    log_probs: Var,
    frames: &[usize],
    labels: &[LabelSequence],
    charset_size: usize,
) -> Result<(Var, Vec<f64>), TrainError> {
    let value = tape.value(log_probs);
    let [b, c, _, w] = value.dims4()?;
    if frames.len() != b || labels.len() != b {
        return Err(TrainError::Batch(format!("{b} samples but {} frame counts and {} labels", frames.len(), labels.len())));
    }
    let lattices = lattices_from_log_probs(value, Some(frames), charset_size)?;
    let scale = 1.0 / b as f64;
    let mut grad = vec![T::zero(); value.len()];
    let mut losses = Vec::with_capacity(b);
    for (bi, (lattice, label)) in lattices.iter().zip(labels).enumerate() {
        let out = ctc_loss_and_gradient(lattice, label)?;
        for t in 0..lattice.frames() {
            for k in 0..c {
                grad[(bi * c + k) * w + t] = T::from_f64_lossy(out.grad_log_probs[t * c + k] * scale);
            }
        }
        losses.push(out.loss);
    }
    let mean = losses.iter().sum::<f64>() * scale;
    let loss = tape.precomputed_scalar(log_probs, T::from_f64_lossy(mean), grad)?;
    Ok((loss, losses))
}
