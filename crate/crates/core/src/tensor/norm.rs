use serde::{Deserialize, Serialize};

use super::{invalid, Element, Result, Tensor, TensorError};

/// Which axes a normalization layer pools its statistics over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per channel over `(B, H, W)`, with running statistics for evaluation.
    Batch,
    /// Per sample over `(C, H, W)`.
    Layer,
    /// Per `(sample, channel)` over `(H, W)`.
    Instance,
    /// Per `(sample, group)` over `(C / groups, H, W)`.
    Group(usize),
}

impl NormKind {
    pub fn label(&self) -> String {
        match self {
            NormKind::Batch => "batch".into(),
            NormKind::Layer => "layer".into(),
            NormKind::Instance => "instance".into(),
            NormKind::Group(g) => format!("group({g})"),
        }
    }
}

/// Where the mean and variance come from.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Computed from the input itself.
    Input,
    /// Batch norm in evaluation mode: per-channel running estimates.
    Running { mean: &'a [T], var: &'a [T] },
}

pub struct NormOutput<T> {
    pub output: Tensor<T>,
    /// Standardized input before the affine transform.
    pub xhat: Vec<T>,
    /// Per-group statistics (biased variance).
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Elements contributing to each group's statistics.
    pub group_size: usize,
}

#[derive(Clone, Copy)]
struct Layout {
    kind: NormKind,
    c: usize,
    plane: usize,
    groups: usize,
    span: usize,
}

impl Layout {
    fn new(kind: NormKind, dims: [usize; 4]) -> Result<Self> {
        let [b, c, h, w] = dims;
        let plane = h * w;
        let (groups, span) = match kind {
            NormKind::Batch => (c, 0),
            NormKind::Layer => (b, c * plane),
            NormKind::Instance => (b * c, plane),
            NormKind::Group(g) => {
                if g == 0 || c % g != 0 {
                    return Err(invalid(
                        "normalize",
                        format!("{c} channels are not divisible into {g} groups"),
                    ));
                }
                (b * g, c / g * plane)
            }
        };
        Ok(Self { kind, c, plane, groups, span })
    }

    #[inline]
    fn group_of(&self, idx: usize) -> usize {
        match self.kind {
            NormKind::Batch => (idx / self.plane) % self.c,
            _ => idx / self.span,
        }
    }

    #[inline]
    fn channel_of(&self, idx: usize) -> usize {
        (idx / self.plane) % self.c
    }
}

fn check_affine<T: Element>(name: &'static str, p: Option<&Tensor<T>>, c: usize) -> Result<()> {
    match p {
        Some(t) if t.len() != c => Err(TensorError::ShapeMismatch {
            op: name,
            left: vec![c],
            right: t.shape().to_vec(),
        }),
        _ => Ok(()),
    }
}

/// Standardizes `input` over the statistics axes of `kind`, then applies the
/// optional per-channel affine transform `gamma * xhat + beta`.
pub fn normalize<T: Element>(
    input: &Tensor<T>,
    kind: NormKind,
    gamma: Option<&Tensor<T>>,
    beta: Option<&Tensor<T>>,
    eps: T,
    stats: NormStats<'_, T>,
) -> Result<NormOutput<T>> {
    let dims = input.dims4()?;
    let layout = Layout::new(kind, dims)?;
    check_affine("normalize(gamma)", gamma, layout.c)?;
    check_affine("normalize(beta)", beta, layout.c)?;
    let x = input.data();
    let group_size = x.len() / layout.groups;
    let (mean, var) = match stats {
        NormStats::Input => {
            let n = T::from_usize(group_size).unwrap();
            let mut mean = vec![T::zero(); layout.groups];
            for (i, &v) in x.iter().enumerate() {
                let g = layout.group_of(i);
                mean[g] = mean[g] + v;
            }
            mean.iter_mut().for_each(|m| *m = *m / n);
            let mut var = vec![T::zero(); layout.groups];
            for (i, &v) in x.iter().enumerate() {
                let g = layout.group_of(i);
                let d = v - mean[g];
                var[g] = var[g] + d * d;
            }
            var.iter_mut().for_each(|s| *s = *s / n);
            (mean, var)
        }
        NormStats::Running { mean, var } => {
            if kind != NormKind::Batch {
                return Err(invalid("normalize", "running statistics only apply to batch norm"));
            }
            if mean.len() != layout.c || var.len() != layout.c {
                return Err(invalid("normalize", "running statistics length differs from channels"));
            }
            (mean.to_vec(), var.to_vec())
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        let g = layout.group_of(i);
        let xh = (v - mean[g]) * inv_std[g];
        xhat.push(xh);
        let c = layout.channel_of(i);
        let mut y = xh;
        if let Some(gm) = gamma {
            y = y * gm.data()[c];
        }
        if let Some(bt) = beta {
            y = y + bt.data()[c];
        }
        out.push(y);
    }
    Ok(NormOutput {
        output: Tensor::new(input.shape().to_vec(), out)?,
        xhat,
        mean,
        var,
        inv_std,
        group_size,
    })
}

/// Gradients `(d_input, d_gamma, d_beta)`; `running` selects the
/// fixed-statistics rule used by batch norm in evaluation mode.
#[allow(clippy::type_complexity)]
pub fn normalize_backward<T: Element>(
    dims: [usize; 4],
    kind: NormKind,
    saved: &NormOutput<T>,
    gamma: Option<&Tensor<T>>,
    grad_out: &[T],
    running: bool,
) -> Result<(Vec<T>, Option<Vec<T>>, Vec<T>)> {
    let layout = Layout::new(kind, dims)?;
    let mut dgamma = gamma.map(|_| vec![T::zero(); layout.c]);
    let mut dbeta = vec![T::zero(); layout.c];
    let mut dxhat = Vec::with_capacity(grad_out.len());
    for (i, &g) in grad_out.iter().enumerate() {
        let c = layout.channel_of(i);
        dbeta[c] = dbeta[c] + g;
        if let Some(dg) = dgamma.as_mut() {
            dg[c] = dg[c] + g * saved.xhat[i];
        }
        dxhat.push(match gamma {
            Some(gm) => g * gm.data()[c],
            None => g,
        });
    }
    if running {
        let dx = dxhat
            .iter()
            .enumerate()
            .map(|(i, &d)| d * saved.inv_std[layout.group_of(i)])
            .collect();
        return Ok((dx, dgamma, dbeta));
    }
    let n = T::from_usize(saved.group_size).unwrap();
    let mut s1 = vec![T::zero(); layout.groups];
    let mut s2 = vec![T::zero(); layout.groups];
    for (i, &d) in dxhat.iter().enumerate() {
        let g = layout.group_of(i);
        s1[g] = s1[g] + d;
        s2[g] = s2[g] + d * saved.xhat[i];
    }
    let dx = dxhat
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let g = layout.group_of(i);
            saved.inv_std[g] * (d - s1[g] / n - saved.xhat[i] * s2[g] / n)
        })
        .collect();
    Ok((dx, dgamma, dbeta))
}
