//! Finite-difference gradient checking shared by the integration targets.
#![allow(dead_code)]

use gfcn::ctc::LabelSequence;
use gfcn::model::{ArchitectureConfig, Model};
use gfcn::tensor::{Activation, ConvGeometry, NormKind, NormStats, Padding, Tape, Tensor, Var};
use gfcn::train::batch_ctc_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step for single operations.
pub const OP_STEP: f64 = 1e-5;
/// Smaller step for the composed model, whose ReLU and max-pool kinks a
/// wider probe is more likely to straddle.
pub const MODEL_STEP: f64 = 1e-7;
/// Tighter bound for the smooth element-wise activations.
pub const ACTIVATION_MAX_REL_ERROR: f64 = 1e-6;
/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-4;
pub const MAX_REL_ERROR: f64 = 1e-4;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero by `gap`, for inputs that feed a ReLU.
pub fn away_from_zero(shape: &[usize], gap: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced `gap` apart in shuffled order, so no max-pool
/// window has a near tie.
pub fn distinct(shape: &[usize], gap: f64, seed: u64) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * gap - 0.5 * n as f64 * gap).collect();
    values.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so that no
/// gradient vanishes through symmetry (a plain sum of a softmax is constant).
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var) -> Var {
    if tape.value(out).is_scalar() {
        return out;
    }
    let weights = uniform(tape.value(out).shape(), -1.0, 1.0, 0xFEED);
    let w = tape.leaf(weights, false);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `build` over every element of every input.
pub fn check_gradients(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> GradCheck {
    check_gradients_with_step(inputs, OP_STEP, build)
}

pub fn check_gradients_with_step(
    inputs: &[Tensor<f64>],
    step: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> GradCheck {
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let loss = weighted_sum(&mut tape, out);
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let loss = weighted_sum(&mut tape, out);
    let grads = tape.backward(loss).unwrap();

    let mut report = GradCheck::default();
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let analytic = grads.get(*var).map_or(0.0, |g| g.data()[j]);
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe);
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            report.record(rel_error(analytic, numeric), format!("input {i}[{j}]"), analytic, numeric);
        }
    }
    report
}

#[derive(Debug, Default, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradCheck {
    pub fn record(&mut self, rel: f64, what: String, analytic: f64, numeric: f64) {
        self.checked += 1;
        if rel >= self.max_rel {
            self.max_rel = rel;
            self.worst = format!("{what}: analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel < MAX_REL_ERROR
    }
}

fn geom(stride: (usize, usize), padding: Padding) -> ConvGeometry {
    ConvGeometry::new(stride, padding)
}

fn seeded() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

/// One gradient check per differentiable tape operation.
pub fn op_gradient_checks() -> Vec<(String, GradCheck)> {
    let mut out = Vec::new();
    let mut push = |name: &str, check: GradCheck| out.push((name.to_string(), check));
    let x = uniform(&[2, 3, 5, 6], -1.0, 1.0, 1);

    let asym = Padding { top: 1, bottom: 0, left: 3, right: 4 };
    push(
        "conv2d",
        check_gradients(&[x.clone(), uniform(&[4, 3, 3, 2], -0.5, 0.5, 2), uniform(&[4], -0.5, 0.5, 3)], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), geom((2, 1), asym)).unwrap()
        }),
    );
    push(
        "depthwise_conv2d",
        check_gradients(&[x.clone(), uniform(&[3, 1, 2, 3], -0.5, 0.5, 4), uniform(&[3], -0.5, 0.5, 5)], |t, v| {
            t.depthwise_conv2d(v[0], v[1], Some(v[2]), geom((1, 2), Padding::same(2, 3))).unwrap()
        }),
    );
    push(
        "depthwise_separable_conv",
        check_gradients(
            &[
                x.clone(),
                uniform(&[3, 1, 1, 8], -0.5, 0.5, 6),
                uniform(&[3], -0.5, 0.5, 7),
                uniform(&[5, 3, 1, 1], -0.5, 0.5, 8),
                uniform(&[5], -0.5, 0.5, 9),
            ],
            |t, v| {
                t.depthwise_separable_conv(v[0], (v[1], Some(v[2])), (v[3], Some(v[4])), geom((1, 1), asym)).unwrap()
            },
        ),
    );
    push(
        "maxpool2d",
        check_gradients(&[distinct(&[2, 2, 4, 6], 0.01, 10)], |t, v| t.maxpool2d(v[0], (2, 2)).unwrap()),
    );
    push(
        "relu",
        check_gradients(&[away_from_zero(&[2, 3, 4, 4], 0.05, 11)], |t, v| t.activation(v[0], Activation::Relu)),
    );
    push("tanh", check_gradients(&[x.clone()], |t, v| t.activation(v[0], Activation::Tanh)));
    push("sigmoid", check_gradients(&[x.clone()], |t, v| t.activation(v[0], Activation::Sigmoid)));
    let rows = uniform(&[2, 5, 1, 6], -2.0, 2.0, 20);
    push("softmax_over_channels", check_gradients(&[rows.clone()], |t, v| t.softmax_over_channels(v[0]).unwrap()));
    push("log_softmax_over_channels", check_gradients(&[rows], |t, v| t.log_softmax_over_channels(v[0]).unwrap()));
    let x4 = uniform(&[2, 4, 3, 5], -1.0, 2.0, 12);
    for kind in [NormKind::Batch, NormKind::Layer, NormKind::Instance, NormKind::Group(2)] {
        push(
            &format!("normalize({})", kind.label()),
            check_gradients(&[x4.clone(), uniform(&[4], 0.5, 1.5, 13), uniform(&[4], -0.5, 0.5, 14)], |t, v| {
                t.normalize(v[0], kind, Some((v[1], v[2])), 1e-5, NormStats::Input).unwrap()
            }),
        );
    }
    let (mean, var) = (vec![0.1, -0.2, 0.3, 0.0], vec![1.5, 0.5, 2.0, 1.0]);
    push(
        "normalize(batch, running)",
        check_gradients(&[x4.clone(), uniform(&[4], 0.5, 1.5, 15), uniform(&[4], -0.5, 0.5, 16)], |t, v| {
            t.normalize(v[0], NormKind::Batch, Some((v[1], v[2])), 1e-5, NormStats::Running { mean: &mean, var: &var })
                .unwrap()
        }),
    );
    push("gate", check_gradients(&[x4.clone()], |t, v| t.gate(v[0], 1e-5).unwrap()));
    push("dropout", check_gradients(&[x.clone()], |t, v| t.dropout(v[0], 0.4, true, &mut seeded()).unwrap()));
    push(
        "gaussian_noise",
        check_gradients(&[x.clone()], |t, v| t.gaussian_noise(v[0], 0.1, true, &mut seeded()).unwrap()),
    );
    let y = uniform(&[2, 3, 5, 6], -1.0, 1.0, 17);
    push("add", check_gradients(&[x.clone(), y.clone()], |t, v| t.add(v[0], v[1]).unwrap()));
    push("mul", check_gradients(&[x.clone(), y], |t, v| t.mul(v[0], v[1]).unwrap()));
    push("sum", check_gradients(&[x.clone()], |t, v| t.sum(v[0])));
    push("slice_channels", check_gradients(&[x4], |t, v| t.slice_channels(v[0], 1, 2).unwrap()));

    // the CTC loss enters the tape as a precomputed scalar over log-probs
    let logits = uniform(&[2, 4, 1, 6], -2.0, 2.0, 18);
    let labels = vec![LabelSequence(vec![0, 1, 1]), LabelSequence(vec![2])];
    push(
        "ctc loss",
        check_gradients(&[logits], |t, v| {
            let lp = t.log_softmax_over_channels(v[0]).unwrap();
            batch_ctc_loss(t, lp, &[6, 4], &labels, 3).unwrap().0
        }),
    );
    out
}

/// Eight-pixel-high, three-symbol network with every regularizer active.
pub fn tiny_config(norm_kind: NormKind) -> ArchitectureConfig {
    ArchitectureConfig {
        input_height: 8,
        convblock_filters: vec![2, 2],
        gateblock_filters: vec![4, 4],
        ending_gate_count: 2,
        ending_channels: 4,
        charset_size: 3,
        dropout_p: 0.2,
        noise_std: 0.01,
        norm_kind,
        init_gain: 1.0,
        ..ArchitectureConfig::default()
    }
}

fn model_loss(model: &Model<f64>, images: &Tensor<f64>, frames: &[usize], labels: &[LabelSequence]) -> (f64, Vec<Option<Tensor<f64>>>) {
    let mut tape = Tape::new();
    let x = tape.leaf(images.clone(), false);
    let pass = model.forward_on_tape(&mut tape, x, &mut seeded()).unwrap();
    let (loss, _) = batch_ctc_loss(&mut tape, pass.log_probs, frames, labels, model.config().charset_size).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    (tape.value(loss).data()[0], pass.params.iter().map(|&v| grads.take(v)).collect())
}

/// Checks every parameter element of the composed tiny model under the CTC
/// loss of a two-sample batch.
///
/// Biases are moved off zero first. With zero biases, a position whose
/// inputs are all dead ReLUs has a pre-activation of exactly zero, which is
/// the ReLU kink, and a bias nudge would cross it everywhere at once.
pub fn model_gradient_check(norm_kind: NormKind) -> GradCheck {
    let mut model: Model<f64> = Model::build(&tiny_config(norm_kind), 3).unwrap();
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        if p.name.ends_with("bias") {
            p.value = uniform(p.value.shape(), -0.1, 0.1, 100 + i as u64);
        }
    }
    let images = uniform(&[2, 1, 8, 24], 0.0, 1.0, 19);
    let frames = [6, 5];
    let labels = [LabelSequence(vec![0, 1, 1]), LabelSequence(vec![2, 0])];
    let (_, grads) = model_loss(&model, &images, &frames, &labels);
    let mut report = GradCheck::default();
    for p in 0..model.params().len() {
        for j in 0..model.params()[p].value.len() {
            let orig = model.params()[p].value.data()[j];
            model.params_mut()[p].value.data_mut()[j] = orig + MODEL_STEP;
            let up = model_loss(&model, &images, &frames, &labels).0;
            model.params_mut()[p].value.data_mut()[j] = orig - MODEL_STEP;
            let down = model_loss(&model, &images, &frames, &labels).0;
            model.params_mut()[p].value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * MODEL_STEP);
            let analytic = grads[p].as_ref().map_or(0.0, |g| g.data()[j]);
            let name = format!("{}[{j}]", model.params()[p].name);
            report.record(rel_error(analytic, numeric), name, analytic, numeric);
        }
    }
    report
}

/// Sums path probabilities over every one of the `classes^frames` frame
/// paths whose collapse (merge repeats, then drop blanks) equals `label`.
/// Returns the negative log-likelihood, or `None` when no path emits it.
pub fn enumerate_nll(probs: &[Vec<f64>], label: &[usize], blank: usize) -> Option<f64> {
    let frames = probs.len();
    let classes = probs[0].len();
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        let mut emitted = Vec::with_capacity(frames);
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != blank {
                emitted.push(k);
            }
            prev = Some(k);
        }
        if emitted == label {
            total += path.iter().enumerate().map(|(t, &k)| probs[t][k]).product::<f64>();
        }
        // odometer increment
        let mut t = 0;
        loop {
            if t == frames {
                return (total > 0.0).then(|| -total.ln());
            }
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

pub struct CtcInstance {
    pub probs: Vec<Vec<f64>>,
    pub label: Vec<usize>,
    pub blank: usize,
}

impl CtcInstance {
    /// Up to 8 frames, labels of length 0 to 4, 2 to 5 classes with the
    /// blank last. Some instances are infeasible by construction.
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let frames = rng.random_range(1..=8);
        let classes = rng.random_range(2..=5);
        let blank = classes - 1;
        let len = rng.random_range(0..=4);
        let label = (0..len).map(|_| rng.random_range(0..blank)).collect();
        let probs = (0..frames)
            .map(|_| {
                // sharpened so that some frames are confident
                let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / z).collect()
            })
            .collect();
        Self { probs, label, blank }
    }

    pub fn lattice(&self) -> gfcn::ctc::LogProbLattice {
        let values = self.probs.iter().flatten().map(|p| p.ln()).collect();
        gfcn::ctc::LogProbLattice::new(self.probs.len(), self.probs[0].len(), values, self.blank).unwrap()
    }
}

pub const CTC_TOLERANCE: f64 = 1e-9;

/// Worst absolute disagreement between the forward-backward loss and the
/// enumeration over `count` random instances, plus the number of feasible
/// ones. Feasibility itself must agree.
pub fn ctc_against_enumeration(count: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut feasible = 0;
    for i in 0..count {
        let inst = CtcInstance::random(&mut rng);
        let expected = enumerate_nll(&inst.probs, &inst.label, inst.blank);
        let got = gfcn::ctc::ctc_loss(&inst.lattice(), &LabelSequence(inst.label.clone()));
        match (expected, got) {
            (Some(e), Ok(g)) => {
                feasible += 1;
                worst = worst.max((e - g).abs());
            }
            (None, Err(gfcn::ctc::CtcError::Infeasible { .. })) => {}
            (e, g) => panic!("instance {i}: enumeration {e:?} vs forward-backward {g:?}"),
        }
    }
    (worst, feasible)
}

/// Edit distance straight from its recursive definition.
pub fn levenshtein_oracle<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let substitute = levenshtein_oracle(ra, rb) + usize::from(x != y);
            let delete = levenshtein_oracle(ra, b) + 1;
            let insert = levenshtein_oracle(a, rb) + 1;
            substitute.min(delete).min(insert)
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;
pub const MOMENT_TOLERANCE: f64 = 1e-4;

/// Index lists of the elements sharing statistics under `kind` for a
/// `[B, C, H, W]` tensor.
pub fn norm_groups(kind: NormKind, shape: [usize; 4]) -> Vec<Vec<usize>> {
    let [b, c, h, w] = shape;
    let at = |bi: usize, ci: usize, p: usize| (bi * c + ci) * h * w + p;
    let plane = h * w;
    match kind {
        NormKind::Batch => (0..c).map(|ci| (0..b).flat_map(|bi| (0..plane).map(move |p| at(bi, ci, p))).collect()).collect(),
        NormKind::Layer => (0..b).map(|bi| (0..c).flat_map(|ci| (0..plane).map(move |p| at(bi, ci, p))).collect()).collect(),
        NormKind::Instance => (0..b)
            .flat_map(|bi| (0..c).map(move |ci| (0..plane).map(|p| at(bi, ci, p)).collect()))
            .collect(),
        NormKind::Group(g) => {
            let per = c / g;
            (0..b)
                .flat_map(|bi| {
                    (0..g).map(move |gi| {
                        (gi * per..(gi + 1) * per).flat_map(|ci| (0..plane).map(move |p| at(bi, ci, p))).collect()
                    })
                })
                .collect()
        }
    }
}

/// Largest departure of any group's mean from 0 or biased variance from 1
/// after normalizing `x` without affine parameters.
pub fn moment_error(kind: NormKind, x: &Tensor<f64>) -> f64 {
    let out = gfcn::tensor::normalize(x, kind, None, None, NORM_EPS, NormStats::Input).unwrap().output;
    let dims = x.dims4().unwrap();
    let y = out.data();
    let mut worst = 0.0f64;
    for group in norm_groups(kind, dims) {
        let n = group.len() as f64;
        let mean = group.iter().map(|&i| y[i]).sum::<f64>() / n;
        let var = group.iter().map(|&i| (y[i] - mean).powi(2)).sum::<f64>() / n;
        worst = worst.max(mean.abs()).max((var - 1.0).abs());
    }
    worst
}

/// Largest magnitude in the normalized output of a constant tensor.
pub fn constant_output(kind: NormKind, shape: [usize; 4], value: f64) -> f64 {
    let x = Tensor::full(shape.to_vec(), value);
    let out = gfcn::tensor::normalize(&x, kind, None, None, NORM_EPS, NormStats::Input).unwrap().output;
    out.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub const NORM_KINDS: [NormKind; 4] = [NormKind::Batch, NormKind::Layer, NormKind::Instance, NormKind::Group(2)];
