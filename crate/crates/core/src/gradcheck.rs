//! Central-difference gradient checks for every differentiable operation.
//!
//! Each case is a bundle of tensors (inputs and parameters) with a scalar
//! objective `Σ w ⊙ op(...)` for a fixed random cotangent `w`, plus the
//! analytic gradient of that objective in the same bundle layout.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::impl_module;
use crate::kernels::{
    dck_backward, dck_generate, dck_modulate, msdp_backward, msdp_forward, DckConfig, DckParams,
    MsdpParams,
};
use crate::losses::{detection_loss, sir_loss, CellTarget, HeadOutput, LevelTargets};
use crate::model::{ModelConfig, ToyModel};
use crate::params::Module;
use crate::pipeline::Sample;
use crate::tensor::{
    avg_pool2d, avg_pool2d_backward, conv2d, conv2d_backward, linear, linear_backward, norm_act,
    norm_act_backward, upsample_nearest, upsample_nearest_backward, NormStats, StatsMode, Tensor,
    BN_EPS,
};
use crate::train::sample_gradients;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    /// Floor on the denominator of the relative error.
    pub floor: f64,
    /// Entries probed per tensor; larger tensors are subsampled.
    pub max_probes: usize,
    /// Multiplies the analytic gradient; anything but 1 must make the check fail.
    pub backward_scale: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            floor: 1e-3,
            max_probes: 64,
            backward_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub probes: usize,
    pub worst: String,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
    pub pass: bool,
}

/// Compares `grad` against central differences of `objective` at `state`.
pub fn check<S, F>(
    op: &str,
    state: &S,
    grad: &S,
    objective: F,
    opts: &GradcheckOptions,
    tol: f64,
) -> OpReport
where
    S: Module + Clone,
    F: Fn(&S) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let analytic: Vec<(String, Vec<f64>)> = grad
        .param_list()
        .into_iter()
        .map(|p| (p.name, p.data.to_vec()))
        .collect();
    let mut work = state.clone();
    let names: Vec<(String, usize, bool)> = state
        .param_list()
        .into_iter()
        .map(|p| (p.name, p.data.len(), p.trainable))
        .collect();
    let (mut max_rel, mut max_abs, mut probes, mut worst) = (0.0f64, 0.0f64, 0usize, String::new());
    for (t, (name, len, trainable)) in names.iter().enumerate() {
        if !trainable {
            continue;
        }
        let idx: Vec<usize> = if *len <= opts.max_probes {
            (0..*len).collect()
        } else {
            (0..opts.max_probes)
                .map(|_| rng.random_range(0..*len))
                .collect()
        };
        for i in idx {
            let orig = work.param_list()[t].data[i];
            let set = |w: &mut S, v: f64| {
                w.param_list_mut()[t].data[i] = v;
            };
            set(&mut work, orig + opts.step);
            let fp = objective(&work);
            set(&mut work, orig - opts.step);
            let fm = objective(&work);
            set(&mut work, orig);
            let fd = (fp - fm) / (2.0 * opts.step);
            let a = analytic[t].1[i] * opts.backward_scale;
            let abs = (a - fd).abs();
            let rel = abs / a.abs().max(fd.abs()).max(opts.floor);
            if !(rel <= max_rel) {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = format!("{name}[{i}] analytic {a:.9e} numeric {fd:.9e}");
            }
            max_abs = max_abs.max(abs);
            probes += 1;
        }
    }
    OpReport {
        op: op.into(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        probes,
        worst,
        pass: max_rel <= tol,
    }
}

fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn weighted(out: &Tensor, w: &Tensor) -> f64 {
    out.dot(w).expect("cotangent shape")
}

#[derive(Clone, Debug, PartialEq)]
struct ConvCase {
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
}
impl_module!(ConvCase { x, weight, bias });

fn case_conv2d(opts: &GradcheckOptions, tol: f64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: Option<OpReport> = None;
    for (stride, padding, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5)] {
        let s = ConvCase {
            x: randn(&[3, 7, 8], &mut rng),
            weight: randn(&[4, 3, k, k], &mut rng),
            bias: randn(&[4], &mut rng),
        };
        let f =
            |s: &ConvCase| conv2d(&s.x, &s.weight, &s.bias, stride, padding).expect("valid case");
        let w = randn(f(&s).shape(), &mut rng);
        let g = conv2d_backward(&w, &s.x, &s.weight, stride, padding)?;
        let grad = ConvCase {
            x: g.input,
            weight: g.weight,
            bias: g.bias,
        };
        let r = check("conv2d", &s, &grad, |s| weighted(&f(s), &w), opts, tol);
        worst = Some(merge(worst, r));
    }
    Ok(worst.expect("cases"))
}

fn merge(acc: Option<OpReport>, r: OpReport) -> OpReport {
    match acc {
        None => r,
        Some(mut a) => {
            a.probes += r.probes;
            a.max_abs_error = a.max_abs_error.max(r.max_abs_error);
            if r.max_rel_error > a.max_rel_error {
                a.max_rel_error = r.max_rel_error;
                a.worst = r.worst;
            }
            a.pass &= r.pass;
            a
        }
    }
}

fn case_linear(opts: &GradcheckOptions, tol: f64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 1);
    let s = ConvCase {
        x: randn(&[2, 3, 4], &mut rng),
        weight: randn(&[3, 4], &mut rng),
        bias: randn(&[3], &mut rng),
    };
    let f = |s: &ConvCase| linear(&s.x, &s.weight, &s.bias).expect("valid case");
    let w = randn(f(&s).shape(), &mut rng);
    let g = linear_backward(&w, &s.x, &s.weight)?;
    let grad = ConvCase {
        x: g.input,
        weight: g.weight,
        bias: g.bias,
    };
    Ok(check(
        "linear",
        &s,
        &grad,
        |s| weighted(&f(s), &w),
        opts,
        tol,
    ))
}

#[derive(Clone, Debug, PartialEq)]
struct NormCase {
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
}
impl_module!(NormCase { x, gamma, beta });

fn case_norm_act(opts: &GradcheckOptions, tol: f64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 2);
    let s = NormCase {
        x: randn(&[4, 5, 6], &mut rng),
        gamma: Tensor::uniform(&[4], 0.5, 1.5, &mut rng),
        beta: randn(&[4], &mut rng).scale(0.3),
    };
    let f = |s: &NormCase| {
        norm_act(&s.x, &s.gamma, &s.beta, NormStats::Batch, BN_EPS).expect("valid case")
    };
    let w = randn(f(&s).0.shape(), &mut rng);
    let (_, cache) = f(&s);
    let g = norm_act_backward(&w, &cache, &s.gamma)?;
    let grad = NormCase {
        x: g.input,
        gamma: g.gamma,
        beta: g.beta,
    };
    Ok(check(
        "norm_act",
        &s,
        &grad,
        |s| weighted(&f(s).0, &w),
        opts,
        tol,
    ))
}

#[derive(Clone, Debug, PartialEq)]
struct One {
    x: Tensor,
}
impl_module!(One { x });

fn case_avg_pool(opts: &GradcheckOptions, tol: f64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 3);
    let s = One {
        x: randn(&[2, 7, 5], &mut rng),
    };
    let f = |s: &One| avg_pool2d(&s.x, 2).expect("valid case");
    let w = randn(f(&s).shape(), &mut rng);
    let grad = One {
        x: avg_pool2d_backward(&w, s.x.shape(), 2)?,
    };
    Ok(check(
        "avg_pool2d",
        &s,
        &grad,
        |s| weighted(&f(s), &w),
        opts,
        tol,
    ))
}

fn case_upsample(opts: &GradcheckOptions, tol: f64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 4);
    let s = One {
        x: randn(&[2, 3, 4], &mut rng),
    };
    let f = |s: &One| upsample_nearest(&s.x, 2).expect("valid case");
    let w = randn(f(&s).shape(), &mut rng);
    let grad = One {
        x: upsample_nearest_backward(&w, 2)?,
    };
    Ok(check(
        "upsample_nearest",
        &s,
        &grad,
        |s| weighted(&f(s), &w),
        opts,
        tol,
    ))
}

#[derive(Clone, Debug, PartialEq)]
struct MsdpCase {
    pyramid: BTreeMap<u32, Tensor>,
    params: MsdpParams,
}
impl_module!(MsdpCase { pyramid, params });

fn case_msdp(opts: &GradcheckOptions, tol: f64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 5);
    let c = 3;
    let mut params = MsdpParams::new([3, 4], c, 2, &mut rng)?;
    for lvl in params.levels.values_mut() {
        lvl.head.bias = randn(&[1], &mut rng);
        for b in &mut lvl.blocks {
            b.norm.beta = randn(&[c], &mut rng).scale(0.3);
        }
    }
    let s = MsdpCase {
        pyramid: [
            (3, randn(&[c, 8, 8], &mut rng)),
            (4, randn(&[c, 4, 4], &mut rng)),
        ]
        .into(),
        params,
    };
    let out = msdp_forward(&s.pyramid, &s.params, StatsMode::Batch)?;
    let wf: BTreeMap<u32, Tensor> = out
        .depth_features
        .iter()
        .map(|(&n, t)| (n, randn(t.shape(), &mut rng)))
        .collect();
    let wd: BTreeMap<u32, Tensor> = out
        .depth_maps
        .iter()
        .map(|(&n, t)| (n, randn(t.shape(), &mut rng)))
        .collect();
    let (gi, gp) = msdp_backward(&out, &s.params, &wf, &wd)?;
    let grad = MsdpCase {
        pyramid: gi,
        params: gp,
    };
    let objective = |s: &MsdpCase| {
        let o = msdp_forward(&s.pyramid, &s.params, StatsMode::Batch).expect("valid case");
        o.depth_features
            .iter()
            .map(|(n, t)| weighted(t, &wf[n]))
            .sum::<f64>()
            + o.depth_maps
                .iter()
                .map(|(n, t)| weighted(t, &wd[n]))
                .sum::<f64>()
    };
    Ok(check("msdp_forward", &s, &grad, objective, opts, tol))
}

#[derive(Clone, Debug, PartialEq)]
struct DckCase {
    features: Tensor,
    depth_feature: Tensor,
    params: DckParams,
}
impl_module!(DckCase {
    features,
    depth_feature,
    params
});

fn case_dck(opts: &GradcheckOptions, tol: f64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 6);
    let cfg = DckConfig {
        kernel_size: 3,
        groups: 2,
        reduction: 2,
        channels: 4,
    };
    let mut params = DckParams::new(&cfg, &mut rng)?;
    params.w2 = randn(params.w2.shape(), &mut rng);
    params.norm.beta = randn(&[cfg.hidden()], &mut rng).scale(0.3);
    let s = DckCase {
        features: randn(&[4, 6, 5], &mut rng),
        depth_feature: randn(&[4, 6, 5], &mut rng),
        params,
    };
    let f = |s: &DckCase| {
        let (k, cache) =
            dck_generate(&s.depth_feature, &s.params, &cfg, StatsMode::Batch).expect("valid case");
        (
            dck_modulate(&s.features, &k, &cfg).expect("valid case"),
            k,
            cache,
        )
    };
    let (out, k, cache) = f(&s);
    let w = randn(out.shape(), &mut rng);
    let g = dck_backward(&w, &s.features, &k, &cache, &s.params, &cfg)?;
    let grad = DckCase {
        features: g.features,
        depth_feature: g.depth_feature,
        params: g.params,
    };
    Ok(check(
        "dck_generate+dck_modulate",
        &s,
        &grad,
        |s| weighted(&f(s).0, &w),
        opts,
        tol,
    ))
}

fn case_sir(opts: &GradcheckOptions, tol: f64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 7);
    let alpha = 0.7;
    let y = Tensor::uniform(&[1, 4, 5], 0.5, 20.0, &mut rng);
    let pseudo = Tensor::uniform(&[1, 4, 5], 0.5, 20.0, &mut rng);
    let (_, g) = sir_loss(&y, &pseudo, alpha)?;
    // the refurbished label is a constant for differentiation
    let label = Tensor::from_vec(
        y.shape(),
        y.data()
            .iter()
            .zip(pseudo.data())
            .map(|(a, b)| alpha * b + (1.0 - alpha) * a)
            .collect(),
    )?;
    let s = One { x: y };
    let grad = One { x: g };
    Ok(check(
        "sir_loss",
        &s,
        &grad,
        |s| sir_loss(&s.x, &label, 1.0).expect("positive").0,
        opts,
        tol,
    ))
}

#[derive(Clone, Debug, PartialEq)]
struct HeadCase {
    levels: Vec<HeadOutputCase>,
}
#[derive(Clone, Debug, PartialEq)]
struct HeadOutputCase {
    objectness: Tensor,
    class_logits: Tensor,
    boxes: Tensor,
}
impl_module!(HeadCase { levels });
impl_module!(HeadOutputCase {
    objectness,
    class_logits,
    boxes
});

impl HeadOutputCase {
    fn to_head(&self) -> HeadOutput {
        HeadOutput {
            objectness: self.objectness.clone(),
            class_logits: self.class_logits.clone(),
            boxes: self.boxes.clone(),
        }
    }

    fn from_head(h: HeadOutput) -> Self {
        Self {
            objectness: h.objectness,
            class_logits: h.class_logits,
            boxes: h.boxes,
        }
    }
}

fn case_detection(opts: &GradcheckOptions, tol: f64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 8);
    let mut levels = Vec::new();
    let mut targets = Vec::new();
    for side in [4, 2] {
        levels.push(HeadOutputCase {
            objectness: randn(&[1, side, side], &mut rng),
            class_logits: randn(&[3, side, side], &mut rng),
            boxes: randn(&[4, side, side], &mut rng),
        });
        let mut t = LevelTargets::empty(side, side);
        for cell in t.cells.iter_mut() {
            if rng.random_bool(0.3) {
                *cell = Some(CellTarget {
                    category: rng.random_range(0..3),
                    offsets: [rng.random(), rng.random(), rng.random(), rng.random()],
                });
            }
        }
        targets.push(t);
    }
    let s = HeadCase { levels };
    let heads = |s: &HeadCase| {
        s.levels
            .iter()
            .map(HeadOutputCase::to_head)
            .collect::<Vec<_>>()
    };
    let loss = detection_loss(&heads(&s), &targets)?;
    let grad = HeadCase {
        levels: loss
            .grads
            .into_iter()
            .map(HeadOutputCase::from_head)
            .collect(),
    };
    Ok(check(
        "detection_loss",
        &s,
        &grad,
        |s| {
            detection_loss(&heads(s), &targets)
                .expect("valid case")
                .total
        },
        opts,
        tol,
    ))
}

fn case_toy_model(opts: &GradcheckOptions, tol: f64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 9);
    let config = ModelConfig {
        input_size: 64,
        widths: [2, 3, 4, 4],
        neck_channels: 4,
        levels: vec![3, 4, 5],
        depth_convs: 1,
        dck: Some(DckConfig {
            kernel_size: 3,
            groups: 2,
            reduction: 2,
            channels: 4,
        }),
        num_classes: 3,
    };
    let mut model = ToyModel::new(config.clone(), opts.seed)?;
    for h in model.head.values_mut() {
        if let Some(d) = h.dck.as_mut() {
            d.w2 = randn(d.w2.shape(), &mut rng);
        }
        h.obj.bias = randn(&[1], &mut rng);
    }
    // zero-initialized shifts put every pre-activation of a constant map on the ReLU kink
    for p in model.param_list_mut() {
        if p.name.ends_with(".beta") {
            for v in p.data.iter_mut() {
                *v = 0.3 * (rng.random::<f64>() - 0.5);
            }
        }
    }
    let image = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng);
    let boxes = vec![
        (0usize, [2.0, 3.0, 10.0, 6.0]),
        (2usize, [12.0, 10.0, 38.0, 40.0]),
    ];
    let targets = crate::model::encode_targets(&config, &boxes);
    let depth = config
        .levels
        .iter()
        .map(|&n| {
            let side = 64 >> n;
            (n, Tensor::uniform(&[1, side, side], 5.0, 50.0, &mut rng))
        })
        .collect();
    let sample = Sample {
        image_id: 0,
        image,
        targets,
        depth,
    };
    // alpha = 1 keeps the label independent of the prediction
    let refurbish = crate::losses::RefurbishConfig {
        alpha: 1.0,
        loss_weight: 0.2,
    };
    let (_, grads, _) = sample_gradients(&model, &sample, &refurbish)?;
    let objective = |m: &ToyModel| {
        sample_gradients(m, &sample, &refurbish)
            .expect("valid case")
            .0
            .total
    };
    let probe = GradcheckOptions {
        max_probes: opts.max_probes.min(6),
        ..*opts
    };
    Ok(check("toy_model", &model, &grads, objective, &probe, tol))
}

type CaseFn = fn(&GradcheckOptions, f64) -> Result<OpReport>;

/// Registered operations, in report order.
pub fn registry() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("conv2d", case_conv2d as CaseFn),
        ("linear", case_linear),
        ("norm_act", case_norm_act),
        ("avg_pool2d", case_avg_pool),
        ("upsample_nearest", case_upsample),
        ("msdp_forward", case_msdp),
        ("dck", case_dck),
        ("sir_loss", case_sir),
        ("detection_loss", case_detection),
        ("toy_model", case_toy_model),
    ]
}

/// Runs one registered op by name, or every op for `all`.
pub fn run(op: &str, tol: f64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be > 0, got {tol}")));
    }
    let reg = registry();
    let selected: Vec<_> = if op == "all" {
        reg
    } else {
        let found: Vec<_> = reg.into_iter().filter(|(n, _)| *n == op).collect();
        if found.is_empty() {
            let names: Vec<_> = registry().iter().map(|(n, _)| *n).collect();
            return Err(Error::invalid(format!(
                "unknown op {op:?}; registered: {}",
                names.join(", ")
            )));
        }
        found
    };
    let mut ops = Vec::new();
    for (_, f) in selected {
        ops.push(f(opts, tol)?);
    }
    let pass = ops.iter().all(|r| r.pass);
    Ok(GradcheckReport {
        tolerance: tol,
        ops,
        pass,
    })
}
