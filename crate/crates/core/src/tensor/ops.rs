use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::norm::{normalize, normalize_backward, NormKind, NormOutput, NormStats};
use super::{invalid, Element, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output<T: Element>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Element>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    input.map(|v| kind.apply(v))
}

pub(crate) fn activation_backward<T: Element>(output: &[T], grad_out: &[T], kind: Activation) -> Vec<T> {
    output
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| g * kind.derivative_from_output(y))
        .collect()
}

fn columns<T: Element>(op: &'static str, input: &Tensor<T>) -> Result<[usize; 4]> {
    let dims = input.dims4()?;
    if dims[2] != 1 {
        return Err(invalid(op, format!("height must be 1, got {}", dims[2])));
    }
    Ok(dims)
}

/// Visits each `(batch, frame)` column of a `[B, C, 1, W]` tensor as the list
/// of flat indices of its `C` entries.
fn for_each_column(dims: [usize; 4], mut f: impl FnMut(&[usize])) {
    let [b, c, _, w] = dims;
    let mut idx = vec![0; c];
    for bi in 0..b {
        for t in 0..w {
            for (ci, slot) in idx.iter_mut().enumerate() {
                *slot = (bi * c + ci) * w + t;
            }
            f(&idx);
        }
    }
}

/// Softmax across channels of a height-collapsed `[B, C, 1, W]` tensor.
pub fn softmax_over_channels<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = columns("softmax_over_channels", input)?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for_each_column(dims, |col| {
        let max = col.iter().map(|&i| x[i]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &i in col {
            out[i] = (x[i] - max).exp();
            z = z + out[i];
        }
        for &i in col {
            out[i] = out[i] / z;
        }
    });
    Tensor::new(input.shape().to_vec(), out)
}

/// Log-softmax across channels of a `[B, C, 1, W]` tensor.
pub fn log_softmax_over_channels<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = columns("log_softmax_over_channels", input)?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for_each_column(dims, |col| {
        let max = col.iter().map(|&i| x[i]).fold(T::neg_infinity(), T::max);
        let z: T = col.iter().map(|&i| (x[i] - max).exp()).sum();
        let lse = max + z.ln();
        for &i in col {
            out[i] = x[i] - lse;
        }
    });
    Tensor::new(input.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<T: Element>(dims: [usize; 4], y: &[T], g: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for_each_column(dims, |col| {
        let dot: T = col.iter().map(|&i| g[i] * y[i]).sum();
        for &i in col {
            dx[i] = y[i] * (g[i] - dot);
        }
    });
    dx
}

pub(crate) fn log_softmax_backward<T: Element>(dims: [usize; 4], logp: &[T], g: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); logp.len()];
    for_each_column(dims, |col| {
        let total: T = col.iter().map(|&i| g[i]).sum();
        for &i in col {
            dx[i] = g[i] - logp[i].exp() * total;
        }
    });
    dx
}

/// Inverted dropout. Returns the output and, when active, the multiplicative
/// mask (`0` or `1 / (1 - p)` per element).
pub fn dropout<T: Element, R: Rng + ?Sized>(
    input: &Tensor<T>,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid("dropout", format!("probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let out = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::new(input.shape().to_vec(), out)?, Some(mask)))
}

/// Adds `N(0, std²)` noise element-wise in training mode.
pub fn gaussian_noise<T: Element, R: Rng + ?Sized>(
    input: &Tensor<T>,
    std: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if std.is_nan() || std < 0.0 {
        return Err(invalid("gaussian_noise", format!("standard deviation {std} is negative")));
    }
    if !training || std == 0.0 {
        return Ok(input.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| invalid("gaussian_noise", e.to_string()))?;
    let data = input.data().iter().map(|&x| x + T::from_f64_lossy(normal.sample(rng))).collect();
    Tensor::new(input.shape().to_vec(), data)
}

pub struct GateOutput<T> {
    pub output: Tensor<T>,
    /// `tanh` of the first channel half, before normalization.
    pub tanh_branch: Tensor<T>,
    /// `sigmoid` of the second channel half, before normalization.
    pub sigmoid_branch: Tensor<T>,
    pub(crate) norm_tanh: NormOutput<T>,
    pub(crate) norm_sigmoid: NormOutput<T>,
}

/// Splits channels in half; the first half goes through `tanh`, the second
/// through `sigmoid`, each is layer-normalized without affine parameters and
/// the two are multiplied element-wise.
pub fn gate<T: Element>(input: &Tensor<T>, eps: T) -> Result<GateOutput<T>> {
    let [_, c2, _, _] = input.dims4()?;
    if c2 % 2 != 0 {
        return Err(invalid("gate", format!("channel count {c2} is odd")));
    }
    let half = c2 / 2;
    let tanh_branch = activation(&input.slice_channels(0, half)?, Activation::Tanh);
    let sigmoid_branch = activation(&input.slice_channels(half, half)?, Activation::Sigmoid);
    let norm_tanh = normalize(&tanh_branch, NormKind::Layer, None, None, eps, NormStats::Input)?;
    let norm_sigmoid = normalize(&sigmoid_branch, NormKind::Layer, None, None, eps, NormStats::Input)?;
    let out = norm_tanh
        .output
        .data()
        .iter()
        .zip(norm_sigmoid.output.data())
        .map(|(&a, &b)| a * b)
        .collect();
    Ok(GateOutput {
        output: Tensor::new(tanh_branch.shape().to_vec(), out)?,
        tanh_branch,
        sigmoid_branch,
        norm_tanh,
        norm_sigmoid,
    })
}

pub(crate) fn gate_backward<T: Element>(saved: &GateOutput<T>, grad_out: &[T]) -> Result<Vec<T>> {
    let dims = saved.output.dims4()?;
    let [b, c, h, w] = dims;
    let na = saved.norm_tanh.output.data();
    let nb = saved.norm_sigmoid.output.data();
    let dna: Vec<T> = grad_out.iter().zip(nb).map(|(&g, &v)| g * v).collect();
    let dnb: Vec<T> = grad_out.iter().zip(na).map(|(&g, &v)| g * v).collect();
    let (dta, _, _) = normalize_backward(dims, NormKind::Layer, &saved.norm_tanh, None, &dna, false)?;
    let (dsb, _, _) = normalize_backward(dims, NormKind::Layer, &saved.norm_sigmoid, None, &dnb, false)?;
    let da = activation_backward(saved.tanh_branch.data(), &dta, Activation::Tanh);
    let db = activation_backward(saved.sigmoid_branch.data(), &dsb, Activation::Sigmoid);
    let chunk = c * h * w;
    let mut dx = Vec::with_capacity(2 * b * chunk);
    for bi in 0..b {
        dx.extend_from_slice(&da[bi * chunk..(bi + 1) * chunk]);
        dx.extend_from_slice(&db[bi * chunk..(bi + 1) * chunk]);
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activation_fixed_points() {
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(-3.0f64), 0.0);
        assert!(Activation::Sigmoid.apply(-800.0f64) >= 0.0);
        assert!(Activation::Sigmoid.apply(800.0f64) <= 1.0);
    }

    #[test]
    fn softmax_uniform_and_extreme_logits() {
        let x = Tensor::<f64>::zeros([1, 5, 1, 2]);
        let y = softmax_over_channels(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let x = Tensor::<f64>::new([1, 2, 1, 1], vec![1000.0, 0.0]).unwrap();
        let y = softmax_over_channels(&x).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] >= 0.0 && y.data()[1] < 1e-12);
        let lp = log_softmax_over_channels(&x).unwrap();
        assert!(lp.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn([2, 6, 1, 4], |_| rng.random_range(-4.0..4.0));
        let y = softmax_over_channels(&x).unwrap();
        for b in 0..2 {
            for t in 0..4 {
                let z: f64 = (0..6).map(|c| x.at4(b, c, 0, t).exp()).sum();
                for c in 0..6 {
                    assert!((y.at4(b, c, 0, t) - x.at4(b, c, 0, t).exp() / z).abs() < 1e-12);
                }
                let s: f64 = (0..6).map(|c| y.at4(b, c, 0, t)).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_requires_unit_height() {
        let x = Tensor::<f64>::zeros([1, 3, 2, 2]);
        assert!(softmax_over_channels(&x).is_err());
        assert!(log_softmax_over_channels(&x).is_err());
    }

    #[test]
    fn dropout_identity_cases_and_rejection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::from_fn([1, 2, 3, 4], |i| i as f64);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.4, false, &mut rng).unwrap().0, x);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
        assert!(dropout(&x, -0.1, false, &mut rng).is_err());
    }

    #[test]
    fn dropout_zero_fraction_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f32>::full([1, 1, 1000, 1000], 1.0);
        let (y, _) = dropout(&x, 0.4, true, &mut rng).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.4).abs() < 0.005, "{zeros}");
        let kept = y.data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.6).abs() < 1e-6);
    }

    #[test]
    fn noise_moments_and_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn([1, 1, 1000, 1000], |i| (i % 7) as f64);
        assert_eq!(gaussian_noise(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(gaussian_noise(&x, 0.5, false, &mut rng).unwrap(), x);
        assert!(gaussian_noise(&x, -1.0, false, &mut rng).is_err());
        let y = gaussian_noise(&x, 0.01, true, &mut rng).unwrap();
        let d: Vec<f64> = y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let s = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!(m.abs() < 1e-4 && (s - 0.01).abs() < 1e-4, "{m} {s}");
    }

    #[test]
    fn gate_zero_input_and_shape() {
        let x = Tensor::<f64>::zeros([2, 6, 3, 4]);
        let g = gate(&x, 1e-5).unwrap();
        assert_eq!(g.output.shape(), &[2, 3, 3, 4]);
        assert!(g.output.data().iter().all(|&v| v == 0.0));
        assert!(gate(&Tensor::<f64>::zeros([1, 3, 2, 2]), 1e-5).is_err());
    }

    #[test]
    fn gate_branches_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::from_fn([2, 8, 3, 5], |_| rng.random_range(-6.0..6.0));
        let g = gate(&x, 1e-5).unwrap();
        assert!(g.tanh_branch.data().iter().all(|&v| v > -1.0 && v < 1.0));
        assert!(g.sigmoid_branch.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
