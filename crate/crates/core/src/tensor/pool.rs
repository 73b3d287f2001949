use super::{invalid, Element, Result, Tensor};

pub struct MaxPoolOutput<T> {
    pub output: Tensor<T>,
    /// Flat input index that produced each output element.
    pub argmax: Vec<usize>,
}

/// Non-overlapping max pooling (stride equals kernel). Ties resolve to the
/// first maximal element in row-major window order.
pub fn maxpool2d<T: Element>(input: &Tensor<T>, kernel: (usize, usize)) -> Result<MaxPoolOutput<T>> {
    let [b, c, h, w] = input.dims4()?;
    let (kh, kw) = kernel;
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(invalid(
            "maxpool2d",
            format!("kernel {kh}x{kw} larger than input {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / kh, w / kw);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    let x = input.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * kh * w + ox * kw;
                for i in 0..kh {
                    for j in 0..kw {
                        let idx = base + (oy * kh + i) * w + ox * kw + j;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPoolOutput { output: Tensor::new([b, c, ho, wo], out)?, argmax })
}

pub(crate) fn maxpool2d_backward<T: Element>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        dx[idx] = dx[idx] + g;
    }
    dx
}
