//! Connectionist temporal classification: log-space forward-backward loss
//! and gradient, best-path decoding, and an exhaustive reference.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("infeasible alignment: {frames} frames cannot emit a label needing {required}")]
    Infeasible { frames: usize, required: usize },
    #[error("label index {index} at position {position} is not a character class (classes {classes}, blank {blank})")]
    InvalidLabel { index: usize, position: usize, classes: usize, blank: usize },
    #[error("lattice: {0}")]
    Lattice(String),
    #[error("exhaustive enumeration limited to {max} frames, got {frames}")]
    TooManyFrames { frames: usize, max: usize },
}

pub type Result<T, E = CtcError> = std::result::Result<T, E>;

/// Per-frame log-probabilities over the character classes and the blank.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice {
    frames: usize,
    classes: usize,
    /// Row-major `frames × classes`.
    values: Vec<f64>,
    blank: usize,
}

const NORMALIZATION_TOLERANCE: f64 = 1e-5;

impl LogProbLattice {
    /// Validates that each frame exponentiates to a distribution.
    pub fn new(frames: usize, classes: usize, values: Vec<f64>, blank: usize) -> Result<Self> {
        let lattice = Self::new_unnormalized(frames, classes, values, blank)?;
        for t in 0..frames {
            let total: f64 = lattice.frame(t).iter().map(|v| v.exp()).sum();
            if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(CtcError::Lattice(format!("frame {t} sums to {total}")));
            }
        }
        Ok(lattice)
    }

    /// Shape checks only; used for gradient probes that perturb single
    /// entries.
    pub fn new_unnormalized(frames: usize, classes: usize, values: Vec<f64>, blank: usize) -> Result<Self> {
        if classes == 0 || blank >= classes {
            return Err(CtcError::Lattice(format!("blank {blank} outside {classes} classes")));
        }
        if values.len() != frames * classes {
            return Err(CtcError::Lattice(format!(
                "{} values for {frames} frames × {classes} classes",
                values.len()
            )));
        }
        Ok(Self { frames, classes, values, blank })
    }

    /// Builds a lattice from linear-space probabilities.
    pub fn from_probabilities(frames: usize, classes: usize, probs: &[f64], blank: usize) -> Result<Self> {
        Self::new(frames, classes, probs.iter().map(|p| p.ln()).collect(), blank)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.classes..(t + 1) * self.classes]
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.values[t * self.classes + k]
    }

    /// Most probable class of frame `t`; ties go to the blank, then to the
    /// lowest index.
    pub fn argmax(&self, t: usize) -> usize {
        let row = self.frame(t);
        let mut best = self.blank;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        best
    }
}

/// Target character indices (never the blank).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn new(indices: Vec<usize>) -> Self {
        Self(indices)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Minimum frame count able to emit `label`: one frame per symbol plus a
/// separating blank between each pair of equal neighbours.
pub fn required_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

fn validate(lattice: &LogProbLattice, label: &[usize]) -> Result<()> {
    for (position, &index) in label.iter().enumerate() {
        if index >= lattice.classes || index == lattice.blank {
            return Err(CtcError::InvalidLabel {
                index,
                position,
                classes: lattice.classes,
                blank: lattice.blank,
            });
        }
    }
    let required = required_frames(label);
    if lattice.frames < required || lattice.frames == 0 {
        return Err(CtcError::Infeasible { frames: lattice.frames, required: required.max(1) });
    }
    Ok(())
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Forward (`alpha`, including the emission at `t`) and backward (`beta`,
/// excluding it) variables over the blank-interleaved label, in log space.
#[derive(Clone, Debug)]
pub struct CtcTrellis {
    pub frames: usize,
    /// `2L + 1` extended states.
    pub states: usize,
    pub extended: Vec<usize>,
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
    pub log_likelihood: f64,
}

impl CtcTrellis {
    /// `log Σ_s alpha_t(s) beta_t(s)`; equals the log-likelihood at every `t`.
    pub fn log_likelihood_at(&self, t: usize) -> f64 {
        (0..self.states).fold(f64::NEG_INFINITY, |acc, s| {
            log_add(acc, self.log_alpha[t * self.states + s] + self.log_beta[t * self.states + s])
        })
    }
}

pub fn forward_backward(lattice: &LogProbLattice, label: &LabelSequence) -> Result<CtcTrellis> {
    validate(lattice, label.as_slice())?;
    let blank = lattice.blank;
    let t_len = lattice.frames;
    let mut extended = Vec::with_capacity(2 * label.len() + 1);
    extended.push(blank);
    for &c in label.as_slice() {
        extended.push(c);
        extended.push(blank);
    }
    let s_len = extended.len();
    // A skip transition into state s from s-2 is allowed when l'_s is a
    // character differing from l'_{s-2}.
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && extended[s] != blank && extended[s] != extended[s - 2])
        .collect();

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lattice.get(0, extended[0]);
    if s_len > 1 {
        alpha[1] = lattice.get(0, extended[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip[s] {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == neg { neg } else { acc + lattice.get(t, extended[s]) };
        }
    }

    let mut beta = vec![neg; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut acc = next[s] + lattice.get(t + 1, extended[s]);
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1] + lattice.get(t + 1, extended[s + 1]));
            }
            if s + 2 < s_len && skip[s + 2] {
                acc = log_add(acc, next[s + 2] + lattice.get(t + 1, extended[s + 2]));
            }
            cur[s] = acc;
        }
    }

    let mut log_likelihood = alpha[last + s_len - 1];
    if s_len > 1 {
        log_likelihood = log_add(log_likelihood, alpha[last + s_len - 2]);
    }
    if log_likelihood == neg {
        return Err(CtcError::Infeasible { frames: t_len, required: required_frames(label.as_slice()) });
    }
    Ok(CtcTrellis { frames: t_len, states: s_len, extended, log_alpha: alpha, log_beta: beta, log_likelihood })
}

/// Negative log-likelihood of `label` under `lattice`.
pub fn ctc_loss(lattice: &LogProbLattice, label: &LabelSequence) -> Result<f64> {
    Ok(-forward_backward(lattice, label)?.log_likelihood)
}

#[derive(Clone, Debug)]
pub struct CtcOutput {
    pub loss: f64,
    /// `d loss / d log p_t(k)`, row-major `frames × classes`.
    pub grad_log_probs: Vec<f64>,
}

impl CtcOutput {
    /// Gradient with respect to pre-softmax logits when the lattice is a
    /// log-softmax of them: `softmax − occupancy`.
    pub fn grad_logits(&self, lattice: &LogProbLattice) -> Vec<f64> {
        let c = lattice.classes();
        let mut out = Vec::with_capacity(self.grad_log_probs.len());
        for t in 0..lattice.frames() {
            let g = &self.grad_log_probs[t * c..(t + 1) * c];
            let total: f64 = g.iter().sum();
            out.extend(g.iter().zip(lattice.frame(t)).map(|(&gk, &lp)| gk - lp.exp() * total));
        }
        out
    }
}

pub fn ctc_loss_and_gradient(lattice: &LogProbLattice, label: &LabelSequence) -> Result<CtcOutput> {
    let trellis = forward_backward(lattice, label)?;
    let (t_len, s_len, c) = (trellis.frames, trellis.states, lattice.classes());
    let mut grad = vec![0.0; t_len * c];
    let mut occupancy = vec![f64::NEG_INFINITY; c];
    for t in 0..t_len {
        occupancy.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for s in 0..s_len {
            let k = trellis.extended[s];
            let v = trellis.log_alpha[t * s_len + s] + trellis.log_beta[t * s_len + s];
            occupancy[k] = log_add(occupancy[k], v);
        }
        for k in 0..c {
            grad[t * c + k] = -(occupancy[k] - trellis.log_likelihood).exp();
        }
    }
    Ok(CtcOutput { loss: -trellis.log_likelihood, grad_log_probs: grad })
}

pub fn ctc_gradient(lattice: &LogProbLattice, label: &LabelSequence) -> Result<Vec<f64>> {
    Ok(ctc_loss_and_gradient(lattice, label)?.grad_log_probs)
}

/// Collapses a frame-level path: merge adjacent repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Best-path decoding to class indices.
pub fn greedy_decode_indices(lattice: &LogProbLattice) -> Vec<usize> {
    let path: Vec<usize> = (0..lattice.frames()).map(|t| lattice.argmax(t)).collect();
    collapse(&path, lattice.blank())
}

/// Largest frame count [`brute_force_probability`] will enumerate.
pub const BRUTE_FORCE_MAX_FRAMES: usize = 10;

/// Sums the probability of every path of `classes^frames` that collapses to
/// `label`.
pub fn brute_force_probability(lattice: &LogProbLattice, label: &LabelSequence) -> Result<f64> {
    let t_len = lattice.frames();
    if t_len > BRUTE_FORCE_MAX_FRAMES {
        return Err(CtcError::TooManyFrames { frames: t_len, max: BRUTE_FORCE_MAX_FRAMES });
    }
    let c = lattice.classes();
    let probs: Vec<f64> = lattice.values().iter().map(|v| v.exp()).collect();
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    loop {
        if collapse(&path, lattice.blank()) == label.as_slice() {
            total += path.iter().enumerate().map(|(t, &k)| probs[t * c + k]).product::<f64>();
        }
        // odometer increment
        let mut t = 0;
        loop {
            if t == t_len {
                return Ok(total);
            }
            path[t] += 1;
            if path[t] < c {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

/// `-ln` of [`brute_force_probability`]; zero probability is reported as
/// infeasible.
pub fn brute_force_ctc(lattice: &LogProbLattice, label: &LabelSequence) -> Result<f64> {
    let p = brute_force_probability(lattice, label)?;
    if p == 0.0 {
        return Err(CtcError::Infeasible {
            frames: lattice.frames(),
            required: required_frames(label.as_slice()),
        });
    }
    Ok(-p.ln())
}
