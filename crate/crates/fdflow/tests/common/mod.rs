//! Shared harness for the finite-difference gradient suite: used by the
//! per-op tests in `gradcheck.rs` and re-run in aggregate by the acceptance
//! gate.

use fdflow::gradcheck::{fd_check, FdConfig};
use fdflow::ops::conv::ConvSpec;
use fdflow::ops::correlate::{CorrNorm, CorrSpec};
use fdflow::ops::loss::NormKind;
use fdflow::tape::{Tape, Var};
use fdflow::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

/// One randomized instance: input tensors plus the graph that reduces them
/// to a scalar.
pub struct GradCase {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

#[derive(Debug, Clone)]
pub struct OpGradReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
    pub failures: usize,
    pub detail: String,
}

fn rand_t(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, bound, rng)
}

/// Uniform values with magnitudes in [lo, hi]: keeps inputs away from the
/// kinks of piecewise-linear ops (relu at 0, bilinear taps at integers).
fn rand_away_from_zero(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.random_range(lo..hi)
    })
}

/// Flow whose fractional parts stay in [0.2, 0.8], so no bilinear tap sits
/// within the FD step of an integer crossing.
fn rand_flow_off_grid(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(-bound..bound);
        v.floor() + 0.2 + 0.6 * (v - v.floor())
    })
}

/// Random target for reducing an op output to a scalar through the (already
/// independently checked) L2 loss.
fn loss_to_scalar(tape: &mut Tape<f64>, out: Var, target: &Tensor<f64>) -> Var {
    tape.norm_loss(out, target, NormKind::L2).unwrap()
}

fn target_like(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    // Offset keeps the per-pixel error norm away from the L2 kink at zero.
    Tensor::from_fn(shape, |_| rng.random_range(2.0..3.0))
}

pub fn run_cases(name: &'static str, cases: Vec<GradCase>, cfg: &FdConfig) -> OpGradReport {
    let mut report = OpGradReport {
        name,
        cases: 0,
        max_rel_err: 0.0,
        failures: 0,
        detail: String::new(),
    };
    for (ci, case) in cases.into_iter().enumerate() {
        let mut tape = Tape::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = (case.build)(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let grads: Vec<Tensor<f64>> = vars
            .iter()
            .map(|v| tape.grad(*v).expect("input missing gradient").clone())
            .collect();
        let refs: Vec<&Tensor<f64>> = grads.iter().collect();

        let fd = fd_check(cfg, &case.inputs, &refs, |xs| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let l = (case.build)(&mut t, &vs);
            t.value(l).data()[0]
        });
        report.cases += fd.checked;
        report.max_rel_err = report.max_rel_err.max(fd.max_rel_err);
        report.failures += fd.failures.len();
        for f in fd.failures.iter().take(3) {
            report.detail.push_str(&format!(
                "[case {ci} tensor {} idx {}: analytic {:.6e} vs fd {:.6e} rel {:.3e}] ",
                f.tensor, f.index, f.analytic, f.numeric, f.rel_err
            ));
        }
    }
    report
}

fn conv2d_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let specs = [
        ConvSpec::new(3, 4, (3, 3)),
        ConvSpec::new(4, 2, (3, 3)).with_stride(2),
        ConvSpec::new(2, 3, (3, 3)).with_dilation(2).with_padding(2),
        ConvSpec::new(3, 2, (1, 1)).with_padding(0),
    ];
    specs
        .into_iter()
        .map(|spec| {
            let x = rand_t(&mut rng, &[2, spec.in_channels, 7, 6], 1.0);
            let w = rand_t(&mut rng, &[spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1], 0.6);
            let b = rand_t(&mut rng, &[spec.out_channels], 0.5);
            let (oh, ow) = spec.out_size(7, 6).unwrap();
            let target = target_like(&mut rng, &[2, spec.out_channels, oh, ow]);
            GradCase {
                inputs: vec![x, w, b],
                build: Box::new(move |t, v| {
                    let out = t.conv2d(v[0], v[1], v[2], spec).unwrap();
                    loss_to_scalar(t, out, &target)
                }),
            }
        })
        .collect()
}

fn conv_transpose_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    (0..3)
        .map(|_| {
            let (c_in, c_out) = (4, 3);
            let x = rand_t(&mut rng, &[1, c_in, 5, 4], 1.0);
            let w = rand_t(&mut rng, &[c_in, c_out, 4, 4], 0.5);
            let b = rand_t(&mut rng, &[c_out], 0.5);
            let target = target_like(&mut rng, &[1, c_out, 10, 8]);
            GradCase {
                inputs: vec![x, w, b],
                build: Box::new(move |t, v| {
                    let out = t.conv_transpose2d(v[0], v[1], v[2], 2, 1).unwrap();
                    loss_to_scalar(t, out, &target)
                }),
            }
        })
        .collect()
}

fn leaky_relu_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    (0..3)
        .map(|_| {
            let x = rand_away_from_zero(&mut rng, &[2, 3, 5, 5], 0.05, 1.5);
            let target = target_like(&mut rng, &[2, 3, 5, 5]);
            GradCase {
                inputs: vec![x],
                build: Box::new(move |t, v| {
                    let out = t.leaky_relu(v[0], 0.1);
                    loss_to_scalar(t, out, &target)
                }),
            }
        })
        .collect()
}

fn concat_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    (0..2)
        .map(|_| {
            let a = rand_t(&mut rng, &[1, 2, 4, 4], 1.0);
            let b = rand_t(&mut rng, &[1, 3, 4, 4], 1.0);
            let c = rand_t(&mut rng, &[1, 1, 4, 4], 1.0);
            let target = target_like(&mut rng, &[1, 6, 4, 4]);
            GradCase {
                inputs: vec![a, b, c],
                build: Box::new(move |t, v| {
                    let out = t.concat(&[v[0], v[1], v[2]]).unwrap();
                    loss_to_scalar(t, out, &target)
                }),
            }
        })
        .collect()
}

fn warp_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    // Small flows stay mostly in view; the larger bound exercises border
    // and out-of-view tap handling.
    [1.3f64, 4.7]
        .into_iter()
        .map(|bound| {
            let img = rand_t(&mut rng, &[1, 3, 6, 6], 1.0);
            let flow = rand_flow_off_grid(&mut rng, &[1, 2, 6, 6], bound);
            let target = target_like(&mut rng, &[1, 3, 6, 6]);
            GradCase {
                inputs: vec![img, flow],
                build: Box::new(move |t, v| {
                    let out = t.warp(v[0], v[1]).unwrap();
                    loss_to_scalar(t, out, &target)
                }),
            }
        })
        .collect()
}

fn correlate_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let specs = [
        CorrSpec::new(2),
        CorrSpec { radius: 1, norm: CorrNorm::CostChannels },
        CorrSpec::new(4), // window wider than the 5-pixel map: clipping path
    ];
    specs
        .into_iter()
        .map(|spec| {
            let f1 = rand_t(&mut rng, &[2, 4, 6, 5], 1.0);
            let f2 = rand_t(&mut rng, &[2, 4, 6, 5], 1.0);
            let target = target_like(&mut rng, &[2, spec.out_channels(), 6, 5]);
            GradCase {
                inputs: vec![f1, f2],
                build: Box::new(move |t, v| {
                    let out = t.correlate(v[0], v[1], spec).unwrap();
                    loss_to_scalar(t, out, &target)
                }),
            }
        })
        .collect()
}

fn upsample_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    (0..2)
        .map(|_| {
            let x = rand_t(&mut rng, &[1, 3, 4, 5], 1.0);
            let target = target_like(&mut rng, &[1, 3, 8, 10]);
            GradCase {
                inputs: vec![x],
                build: Box::new(move |t, v| {
                    let out = t.upsample2x(v[0]).unwrap();
                    loss_to_scalar(t, out, &target)
                }),
            }
        })
        .collect()
}

fn loss_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let kinds = [
        NormKind::L2,
        NormKind::Robust { eps: 0.01, q: 0.4 },
        NormKind::Robust { eps: 0.1, q: 1.0 },
    ];
    kinds
        .into_iter()
        .map(|kind| {
            let target = rand_t(&mut rng, &[2, 2, 5, 5], 1.0);
            // Every channel difference at least 0.1 in magnitude: both norms
            // have kinks where a difference crosses zero.
            let offset = rand_away_from_zero(&mut rng, &[2, 2, 5, 5], 0.1, 0.9);
            let pred = Tensor::from_fn(&[2, 2, 5, 5], |i| target.data()[i] + offset.data()[i]);
            GradCase {
                inputs: vec![pred],
                build: Box::new(move |t, v| t.norm_loss(v[0], &target, kind).unwrap()),
            }
        })
        .collect()
}

fn arithmetic_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let a = rand_t(&mut rng, &[1, 2, 4, 4], 1.0);
    let b = rand_t(&mut rng, &[1, 2, 4, 4], 1.0);
    let t1 = target_like(&mut rng, &[1, 2, 4, 4]);
    let t2 = target_like(&mut rng, &[1, 2, 4, 4]);
    vec![GradCase {
        inputs: vec![a, b],
        build: Box::new(move |t, v| {
            let sum = t.add(v[0], v[1]).unwrap();
            let diff = t.sub(v[0], v[1]).unwrap();
            let scaled = t.scale(diff, 1.7);
            let l1 = loss_to_scalar(t, sum, &t1);
            let l2 = loss_to_scalar(t, scaled, &t2);
            t.weighted_sum(&[(0.6, l1), (1.4, l2)]).unwrap()
        }),
    }]
}

/// Every op in the gradient suite, as `(name, case builder)`.
pub fn suite() -> Vec<(&'static str, fn() -> Vec<GradCase>)> {
    vec![
        ("conv2d", conv2d_cases),
        ("conv_transpose2d", conv_transpose_cases),
        ("leaky_relu", leaky_relu_cases),
        ("concat", concat_cases),
        ("warp", warp_cases),
        ("correlate", correlate_cases),
        ("upsample2x", upsample_cases),
        ("norm_loss", loss_cases),
        ("arithmetic", arithmetic_cases),
    ]
}

pub fn op_report(name: &'static str) -> OpGradReport {
    let builder = suite()
        .into_iter()
        .find(|(n, _)| *n == name)
        .unwrap_or_else(|| panic!("no op named {name}"))
        .1;
    run_cases(name, builder(), &FdConfig::default())
}

pub fn assert_op(name: &'static str) {
    let r = op_report(name);
    assert!(r.cases >= 20, "{}: only {} finite-difference cases", r.name, r.cases);
    assert_eq!(
        r.failures, 0,
        "{}: {} of {} gradient checks failed (max rel err {:.3e}) {}",
        r.name, r.failures, r.cases, r.max_rel_err, r.detail
    );
}
