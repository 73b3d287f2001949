use serde::{Deserialize, Serialize};

use super::{invalid, matmul, Element, MatRef, Result, Tensor, TensorError};

/// Zero padding on each side of the two spatial axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const ZERO: Padding = Padding { top: 0, bottom: 0, left: 0, right: 0 };

    pub fn symmetric(ph: usize, pw: usize) -> Self {
        Self { top: ph, bottom: ph, left: pw, right: pw }
    }

    /// Width-preserving padding for an odd or even kernel; the extra column
    /// of an even kernel goes to the right/bottom.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self { top: (kh - 1) / 2, bottom: kh / 2, left: (kw - 1) / 2, right: kw / 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self { stride: (1, 1), padding: Padding::ZERO }
    }
}

impl ConvGeometry {
    pub fn new(stride: (usize, usize), padding: Padding) -> Self {
        Self { stride, padding }
    }

    /// Output spatial extent for an `h × w` input and `kh × kw` kernel.
    pub fn output_hw(&self, op: &'static str, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        if sh == 0 || sw == 0 {
            return Err(invalid(op, "stride components must be at least 1"));
        }
        let ph = h + self.padding.top + self.padding.bottom;
        let pw = w + self.padding.left + self.padding.right;
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(invalid(
                op,
                format!("kernel {kh}x{kw} does not fit padded input {ph}x{pw}"),
            ));
        }
        Ok(((ph - kh) / sh + 1, (pw - kw) / sw + 1))
    }
}

struct Im2Col {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeometry,
}

impl Im2Col {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// The unfolded matrix is the input plane itself.
    fn is_identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == (1, 1) && self.geom.padding == Padding::ZERO
    }

    fn unfold<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let (sh, sw) = self.geom.stride;
        let (pt, pl) = (self.geom.padding.top as isize, self.geom.padding.left as isize);
        let n = self.cols();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((ci * self.kh + i) * self.kw + j) * n..][..n];
                    for ho in 0..self.ho {
                        let y = (ho * sh + i) as isize - pt;
                        let dst = &mut row[ho * self.wo..(ho + 1) * self.wo];
                        if y < 0 || y >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (wo, d) in dst.iter_mut().enumerate() {
                            let x = (wo * sw + j) as isize - pl;
                            *d = if x < 0 || x >= self.w as isize { T::zero() } else { src[x as usize] };
                        }
                    }
                }
            }
        }
    }

    fn fold_add<T: Element>(&self, cols: &[T], dx: &mut [T]) {
        let (sh, sw) = self.geom.stride;
        let (pt, pl) = (self.geom.padding.top as isize, self.geom.padding.left as isize);
        let n = self.cols();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((ci * self.kh + i) * self.kw + j) * n..][..n];
                    for ho in 0..self.ho {
                        let y = (ho * sh + i) as isize - pt;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for wo in 0..self.wo {
                            let x = (wo * sw + j) as isize - pl;
                            if x >= 0 && x < self.w as isize {
                                dst[x as usize] = dst[x as usize] + row[ho * self.wo + wo];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(TensorError::ShapeMismatch {
                op,
                left: vec![cout],
                right: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Standard 2-D cross-correlation of `input[B,Cin,H,W]` with `weight[Cout,Cin,kh,kw]`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let [b, cin, h, w] = input.dims4()?;
    let [cout, wcin, kh, kw] = weight.dims4()?;
    if wcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    check_bias("conv2d", bias, cout)?;
    let (ho, wo) = geom.output_hw("conv2d", h, w, kh, kw)?;
    let plan = Im2Col { cin, h, w, kh, kw, ho, wo, geom };
    let k = plan.rows();
    let n = plan.cols();
    let mut out = vec![T::zero(); b * cout * n];
    let mut cols = if plan.is_identity() { Vec::new() } else { vec![T::zero(); k * n] };
    for bi in 0..b {
        let x = &input.data()[bi * cin * h * w..(bi + 1) * cin * h * w];
        let colmat: &[T] = if plan.is_identity() {
            x
        } else {
            plan.unfold(x, &mut cols);
            &cols
        };
        let dst = &mut out[bi * cout * n..(bi + 1) * cout * n];
        matmul(MatRef::new(weight.data(), cout, k), MatRef::new(colmat, k, n), dst, false);
        if let Some(bias) = bias {
            for (co, row) in dst.chunks_mut(n).enumerate() {
                let bv = bias.data()[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Tensor::new([b, cout, ho, wo], out)
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let [b, cin, h, w] = input.dims4()?;
    let [cout, _, kh, kw] = weight.dims4()?;
    let (ho, wo) = geom.output_hw("conv2d", h, w, kh, kw)?;
    let plan = Im2Col { cin, h, w, kh, kw, ho, wo, geom };
    let k = plan.rows();
    let n = plan.cols();
    let mut dw = vec![T::zero(); cout * k];
    let mut db = vec![T::zero(); cout];
    let mut dx = if need_input { vec![T::zero(); input.len()] } else { Vec::new() };
    let mut cols = if plan.is_identity() { Vec::new() } else { vec![T::zero(); k * n] };
    let mut dcols = if need_input && !plan.is_identity() { vec![T::zero(); k * n] } else { Vec::new() };
    for bi in 0..b {
        let x = &input.data()[bi * cin * h * w..(bi + 1) * cin * h * w];
        let g = &grad_out.data()[bi * cout * n..(bi + 1) * cout * n];
        for (co, row) in g.chunks(n).enumerate() {
            db[co] = db[co] + row.iter().copied().sum();
        }
        let colmat: &[T] = if plan.is_identity() {
            x
        } else {
            plan.unfold(x, &mut cols);
            &cols
        };
        matmul(MatRef::new(g, cout, n), MatRef::new(colmat, k, n).t(), &mut dw, true);
        if need_input {
            let wt = MatRef::new(weight.data(), cout, k).t();
            let dxb = &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w];
            if plan.is_identity() {
                matmul(wt, MatRef::new(g, cout, n), dxb, true);
            } else {
                matmul(wt, MatRef::new(g, cout, n), &mut dcols, false);
                plan.fold_add(&dcols, dxb);
            }
        }
    }
    let dx = if need_input { Some(Tensor::new(input.shape().to_vec(), dx)?) } else { None };
    Ok((dx, Tensor::new(weight.shape().to_vec(), dw)?, Tensor::new([cout], db)?))
}

/// Channel-wise (multiplier 1) convolution with `weight[C,1,kh,kw]`.
pub fn depthwise_conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = input.dims4()?;
    let [wc, one, kh, kw] = weight.dims4()?;
    if wc != c || one != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "depthwise_conv2d",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    check_bias("depthwise_conv2d", bias, c)?;
    let (ho, wo) = geom.output_hw("depthwise_conv2d", h, w, kh, kw)?;
    let (sh, sw) = geom.stride;
    let (pt, pl) = (geom.padding.top as isize, geom.padding.left as isize);
    let mut out = vec![T::zero(); b * c * ho * wo];
    for bi in 0..b {
        for ci in 0..c {
            let x = &input.data()[(bi * c + ci) * h * w..][..h * w];
            let k = &weight.data()[ci * kh * kw..][..kh * kw];
            let dst = &mut out[(bi * c + ci) * ho * wo..][..ho * wo];
            let bv = bias.map_or(T::zero(), |bt| bt.data()[ci]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bv;
                    for i in 0..kh {
                        let y = (oy * sh + i) as isize - pt;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let row = &x[y as usize * w..][..w];
                        for j in 0..kw {
                            let xx = (ox * sw + j) as isize - pl;
                            if xx >= 0 && xx < w as isize {
                                acc = acc + k[i * kw + j] * row[xx as usize];
                            }
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new([b, c, ho, wo], out)
}

/// Gradients of [`depthwise_conv2d`]: `(d_input, d_weight, d_bias)`.
pub fn depthwise_conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = input.dims4()?;
    let [_, _, kh, kw] = weight.dims4()?;
    let (ho, wo) = geom.output_hw("depthwise_conv2d", h, w, kh, kw)?;
    let (sh, sw) = geom.stride;
    let (pt, pl) = (geom.padding.top as isize, geom.padding.left as isize);
    let mut dx = if need_input { vec![T::zero(); input.len()] } else { Vec::new() };
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let x = &input.data()[base..base + h * w];
            let k = &weight.data()[ci * kh * kw..][..kh * kw];
            let g = &grad_out.data()[(bi * c + ci) * ho * wo..][..ho * wo];
            db[ci] = db[ci] + g.iter().copied().sum();
            let dk = &mut dw[ci * kh * kw..][..kh * kw];
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g[oy * wo + ox];
                    if gv == T::zero() {
                        continue;
                    }
                    for i in 0..kh {
                        let y = (oy * sh + i) as isize - pt;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let xx = (ox * sw + j) as isize - pl;
                            if xx >= 0 && xx < w as isize {
                                let idx = y as usize * w + xx as usize;
                                dk[i * kw + j] = dk[i * kw + j] + gv * x[idx];
                                if need_input {
                                    dx[base + idx] = dx[base + idx] + gv * k[i * kw + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = if need_input { Some(Tensor::new(input.shape().to_vec(), dx)?) } else { None };
    Ok((dx, Tensor::new(weight.shape().to_vec(), dw)?, Tensor::new([c], db)?))
}

/// Depthwise stage (carrying stride and padding) followed by a 1×1 pointwise
/// convolution.
pub fn depthwise_separable_conv<T: Element>(
    input: &Tensor<T>,
    depthwise_weight: &Tensor<T>,
    depthwise_bias: Option<&Tensor<T>>,
    pointwise_weight: &Tensor<T>,
    pointwise_bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let [_, pc, ph, pw] = pointwise_weight.dims4()?;
    if ph != 1 || pw != 1 {
        return Err(invalid("depthwise_separable_conv", "pointwise kernel must be 1x1"));
    }
    let [dc, ..] = depthwise_weight.dims4()?;
    if pc != dc {
        return Err(TensorError::ShapeMismatch {
            op: "depthwise_separable_conv",
            left: depthwise_weight.shape().to_vec(),
            right: pointwise_weight.shape().to_vec(),
        });
    }
    let mid = depthwise_conv2d(input, depthwise_weight, depthwise_bias, geom)?;
    conv2d(&mid, pointwise_weight, pointwise_bias, ConvGeometry::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Quadruple-loop reference over the padded input.
    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, bias: &[f64], g: ConvGeometry) -> Tensor<f64> {
        let [b, cin, h, w] = x.dims4().unwrap();
        let [cout, _, kh, kw] = wt.dims4().unwrap();
        let (ho, wo) = g.output_hw("t", h, w, kh, kw).unwrap();
        Tensor::from_fn([b, cout, ho, wo], |idx| {
            let ox = idx % wo;
            let oy = (idx / wo) % ho;
            let co = (idx / (wo * ho)) % cout;
            let bi = idx / (wo * ho * cout);
            let mut acc = bias[co];
            for ci in 0..cin {
                for i in 0..kh {
                    for j in 0..kw {
                        let y = (oy * g.stride.0 + i) as isize - g.padding.top as isize;
                        let xx = (ox * g.stride.1 + j) as isize - g.padding.left as isize;
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                            acc += wt.at4(co, ci, i, j) * x.at4(bi, ci, y as usize, xx as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn ones_kernel_center_and_corner() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let b = Tensor::<f64>::zeros([1]);
        let y = conv2d(&x, &k, Some(&b), ConvGeometry::new((1, 1), Padding::symmetric(1, 1))).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 2, 5, 7], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let bias = random(&[3], &mut rng);
        for geom in [
            ConvGeometry::new((1, 1), Padding::symmetric(1, 1)),
            ConvGeometry::new((2, 1), Padding { top: 0, bottom: 2, left: 1, right: 0 }),
            ConvGeometry::default(),
        ] {
            let y = conv2d(&x, &w, Some(&bias), geom).unwrap();
            let want = naive_conv(&x, &w, bias.data(), geom);
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros([1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, ConvGeometry::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let x = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let w = Tensor::<f64>::zeros([1, 1, 3, 3]);
        assert!(conv2d(&x, &w, None, ConvGeometry::default()).is_err());
        let z = Tensor::<f64>::zeros([1, 1, 1, 1]);
        assert!(conv2d(&x, &z, None, ConvGeometry::new((0, 1), Padding::ZERO)).is_err());
    }

    #[test]
    fn identity_separable_conv_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let dw = Tensor::full([3, 1, 1, 1], 1.0);
        let pw = Tensor::from_fn([3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let zero3 = Tensor::zeros([3]);
        let y = depthwise_separable_conv(&x, &dw, Some(&zero3), &pw, Some(&zero3), ConvGeometry::default())
            .unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_depthwise_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 3, 4, 5], &mut rng);
        let dw = Tensor::zeros([3, 1, 3, 3]);
        let pw = random(&[4, 3, 1, 1], &mut rng);
        let y = depthwise_separable_conv(
            &x,
            &dw,
            Some(&Tensor::zeros([3])),
            &pw,
            Some(&Tensor::zeros([4])),
            ConvGeometry::new((1, 1), Padding::symmetric(1, 1)),
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn separable_conv_matches_two_stage_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 4, 6, 10], &mut rng);
        let dw = random(&[4, 1, 1, 8], &mut rng);
        let db = random(&[4], &mut rng);
        let pw = random(&[5, 4, 1, 1], &mut rng);
        let pb = random(&[5], &mut rng);
        let y = depthwise_separable_conv(&x, &dw, Some(&db), &pw, Some(&pb), ConvGeometry::default()).unwrap();
        // Depthwise stage as a dense conv with a block-diagonal kernel.
        let dense = Tensor::from_fn([4, 4, 1, 8], |i| {
            let (co, ci, j) = (i / 32, (i / 8) % 4, i % 8);
            if co == ci { dw.data()[co * 8 + j] } else { 0.0 }
        });
        let mid = naive_conv(&x, &dense, db.data(), ConvGeometry::default());
        let want = naive_conv(&mid, &pw, pb.data(), ConvGeometry::default());
        assert_eq!(y.shape(), &[1, 5, 6, 3]);
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn separable_channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros([1, 3, 4, 4]);
        let dw = Tensor::zeros([3, 1, 3, 3]);
        let pw = Tensor::zeros([2, 4, 1, 1]);
        assert!(depthwise_separable_conv(&x, &dw, None, &pw, None, ConvGeometry::default()).is_err());
    }

    #[test]
    fn same_padding_preserves_width_for_even_kernel() {
        let g = ConvGeometry::new((1, 1), Padding::same(1, 8));
        assert_eq!(g.output_hw("t", 1, 25, 1, 8).unwrap(), (1, 25));
        assert_eq!(g.padding, Padding { top: 0, bottom: 0, left: 3, right: 4 });
    }
}
