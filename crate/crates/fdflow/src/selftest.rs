//! Built-in oracle and invariant suite behind the `selftest` command: quick,
//! deterministic spot checks of the numerical core against the reference
//! implementations, runnable on any installed binary without the test
//! harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{fd_check, FdConfig};
use crate::metrics::{epe, fl_all};
use crate::ops::conv::ConvSpec;
use crate::ops::correlate::{correlate_forward, CorrSpec};
use crate::ops::loss::NormKind;
use crate::ops::resample::upsample2x_forward;
use crate::ops::warp::warp_forward;
use crate::oracles::{bilinear_zero_pad, naive_correlate};
use crate::params::ModelParams;
use crate::pipeline::{
    receptive_field_decoder_l2, receptive_field_encoder_l2, FlowNet, ModelConfig,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

type CheckResult = std::result::Result<(), String>;

fn expect(cond: bool, msg: impl Into<String>) -> CheckResult {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn conv_gradcheck() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = ConvSpec::new(3, 4, (3, 3)).with_stride(2);
    let x = Tensor::<f64>::rand_uniform(&[1, 3, 6, 6], 1.0, &mut rng);
    let w = Tensor::<f64>::rand_uniform(&[4, 3, 3, 3], 0.5, &mut rng);
    let b = Tensor::<f64>::rand_uniform(&[4], 0.5, &mut rng);
    let target = Tensor::<f64>::rand_uniform(&[1, 4, 3, 3], 1.0, &mut rng);

    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.param(x.clone()), tape.param(w.clone()), tape.param(b.clone()));
    let out = tape.conv2d(xv, wv, bv, spec).map_err(|e| e.to_string())?;
    let loss = tape.norm_loss(out, &target, NormKind::L2).map_err(|e| e.to_string())?;
    tape.backward(loss).map_err(|e| e.to_string())?;
    let grads = [
        tape.grad(xv).unwrap().clone(),
        tape.grad(wv).unwrap().clone(),
        tape.grad(bv).unwrap().clone(),
    ];
    let report = fd_check(
        &FdConfig::default(),
        &[x, w, b],
        &[&grads[0], &grads[1], &grads[2]],
        |inputs| {
            let mut t = Tape::new();
            let xv = t.param(inputs[0].clone());
            let wv = t.param(inputs[1].clone());
            let bv = t.param(inputs[2].clone());
            let out = t.conv2d(xv, wv, bv, spec).unwrap();
            let l = t.norm_loss(out, &target, NormKind::L2).unwrap();
            t.value(l).data()[0]
        },
    );
    expect(report.ok(), format!("max relative error {:.3e}", report.max_rel_err))
}

fn warp_zero_flow_identity() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = Tensor::<f32>::rand_uniform(&[1, 3, 8, 9], 1.0, &mut rng);
    let flow = Tensor::<f32>::zeros(&[1, 2, 8, 9]);
    let out = warp_forward(&img, &flow).map_err(|e| e.to_string())?;
    expect(out.data() == img.data(), "zero-flow warp must be bit-identical")
}

fn warp_bilinear_oracle() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Tensor::<f64>::rand_uniform(&[1, 1, 7, 7], 1.0, &mut rng);
    let flow = Tensor::<f64>::rand_uniform(&[1, 2, 7, 7], 2.5, &mut rng);
    let out = warp_forward(&img, &flow).map_err(|e| e.to_string())?;
    for y in 0..7 {
        for x in 0..7 {
            let i = y * 7 + x;
            let want = bilinear_zero_pad(
                img.plane(0, 0),
                7,
                7,
                x as f64 + flow.plane(0, 0)[i],
                y as f64 + flow.plane(0, 1)[i],
            );
            let got = out.plane(0, 0)[i];
            expect((got - want).abs() < 1e-12, format!("({x},{y}): {got} vs {want}"))?;
        }
    }
    Ok(())
}

fn correlate_bruteforce_oracle() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f1 = Tensor::<f64>::rand_uniform(&[1, 8, 5, 5], 1.0, &mut rng);
    let f2 = Tensor::<f64>::rand_uniform(&[1, 8, 5, 5], 1.0, &mut rng);
    let spec = CorrSpec::new(2);
    let fast = correlate_forward(&f1, &f2, &spec).map_err(|e| e.to_string())?;
    let slow = naive_correlate(&f1, &f2, &spec).map_err(|e| e.to_string())?;
    for (i, (a, b)) in fast.data().iter().zip(slow.data()).enumerate() {
        expect((a - b).abs() < 1e-12, format!("element {i}: {a} vs {b}"))?;
    }
    Ok(())
}

fn upsample_constant_exact() -> CheckResult {
    let img = Tensor::<f32>::full(&[1, 2, 3, 4], 3.7);
    let up = upsample2x_forward(&img).map_err(|e| e.to_string())?;
    expect(
        up.data().iter().all(|&v| v == 3.7),
        "constant input must upsample to the same constant exactly",
    )
}

fn flo_round_trip() -> CheckResult {
    let mut flow = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
    let tricky = [-0.0f32, 1e-40, f32::MIN_POSITIVE, -7.25, 1e30, 0.1, -0.5, 2.0, -1e-20];
    flow.plane_mut(0, 0).copy_from_slice(&tricky);
    flow.plane_mut(0, 1).copy_from_slice(&tricky);
    let mut buf = Vec::new();
    crate::flo::write_flo(&mut buf, &flow).map_err(|e| e.to_string())?;
    let back = crate::flo::read_flo(buf.as_slice()).map_err(|e| e.to_string())?;
    for (a, b) in back.data().iter().zip(flow.data()) {
        expect(a.to_bits() == b.to_bits(), format!("{a} vs {b} not bit-identical"))?;
    }
    Ok(())
}

fn metrics_oracles() -> CheckResult {
    let mut pred = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
    pred.plane_mut(0, 0).fill(3.0);
    pred.plane_mut(0, 1).fill(4.0);
    let gt = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
    let e = epe(&pred, &gt, None).map_err(|e| e.to_string())?;
    expect((e - 5.0).abs() < 1e-12, format!("epe {e} != 5"))?;

    // err 2.9 on |gt|=10: inlier (absolute); err 4 on |gt|=100: inlier
    // (relative); err 4 on |gt|=10: outlier.
    let cases = [(10.0f32, 2.9f32, 0.0f64), (100.0, 4.0, 0.0), (10.0, 4.0, 100.0)];
    for (mag, err, want) in cases {
        let mut gt = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        gt.plane_mut(0, 0)[0] = mag;
        let mut pred = gt.clone();
        pred.plane_mut(0, 0)[0] += err;
        let got = fl_all(&pred, &gt, None).map_err(|e| e.to_string())?;
        expect(got == want, format!("fl_all(|gt|={mag}, err={err}) = {got}, want {want}"))?;
    }
    Ok(())
}

fn checkpoint_round_trip() -> CheckResult {
    let mut params = ModelParams::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    params
        .insert("a.w", Tensor::rand_uniform(&[4, 3, 3, 3], 1.0, &mut rng))
        .map_err(|e| e.to_string())?;
    params
        .insert("a.b", Tensor::new(vec![2], vec![-0.0f32, 1e-40]).unwrap())
        .map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    params.save(&mut buf, "variant=test").map_err(|e| e.to_string())?;
    let (back, cfg) = ModelParams::load(buf.as_slice()).map_err(|e| e.to_string())?;
    expect(cfg == "variant=test", "config blob mismatch")?;
    for (name, t) in params.iter() {
        let b = back.get(name).map_err(|e| e.to_string())?;
        for (x, y) in t.data().iter().zip(b.data()) {
            expect(x.to_bits() == y.to_bits(), format!("{name} not bit-identical"))?;
        }
    }
    Ok(())
}

fn param_accounting() -> CheckResult {
    let mut counted = Vec::new();
    for variant in ["full", "no-ushape", "seq", "dense", "pfc"] {
        let net = FlowNet::new(ModelConfig::variant(variant).unwrap())
            .map_err(|e| e.to_string())?;
        let (analytic, allocated) = (net.count_params(), net.params.total_elements());
        expect(
            analytic == allocated,
            format!("{variant}: closed form {analytic} vs allocated {allocated}"),
        )?;
        counted.push((variant, analytic));
    }
    let find = |v: &str| counted.iter().find(|(n, _)| *n == v).unwrap().1;
    expect(
        find("seq") < find("pfc") && find("pfc") < find("dense"),
        format!("ordering violated: seq={} pfc={} dense={}", find("seq"), find("pfc"), find("dense")),
    )
}

fn receptive_field_order() -> CheckResult {
    let (enc, dec) = (receptive_field_encoder_l2(), receptive_field_decoder_l2());
    expect(dec > enc, format!("decoder RF {dec} must exceed encoder RF {enc}"))
}

fn forward_finite_and_deterministic() -> CheckResult {
    let cfg = SynthTiny::sample();
    let net = FlowNet::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    let a = net.infer(&cfg.0, &cfg.1).map_err(|e| e.to_string())?;
    expect(a.all_finite(), "flow contains non-finite values")?;
    let net2 = FlowNet::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    let b = net2.infer(&cfg.0, &cfg.1).map_err(|e| e.to_string())?;
    expect(a.data() == b.data(), "same seed, same input must give identical flow")
}

struct SynthTiny;
impl SynthTiny {
    fn sample() -> (Tensor<f32>, Tensor<f32>) {
        let cfg = crate::synth::SynthConfig { height: 64, width: 64, ..Default::default() };
        let s = crate::synth::generate(&cfg, 17, 0);
        (s.img1, s.img2)
    }
}

/// Every check with its name, cheap ones first.
pub fn checks() -> Vec<(&'static str, fn() -> CheckResult)> {
    vec![
        ("receptive_field_order", receptive_field_order),
        ("upsample_constant_exact", upsample_constant_exact),
        ("metrics_oracles", metrics_oracles),
        ("flo_round_trip", flo_round_trip),
        ("warp_zero_flow_identity", warp_zero_flow_identity),
        ("warp_bilinear_oracle", warp_bilinear_oracle),
        ("correlate_bruteforce_oracle", correlate_bruteforce_oracle),
        ("checkpoint_round_trip", checkpoint_round_trip),
        ("conv_gradcheck", conv_gradcheck),
        ("param_accounting", param_accounting),
        ("forward_finite_and_deterministic", forward_finite_and_deterministic),
    ]
}

/// Runs everything, reporting one line per check. Returns true when all pass.
pub fn run(out: &mut impl std::io::Write) -> std::io::Result<bool> {
    let mut ok = true;
    for (name, check) in checks() {
        match check() {
            Ok(()) => writeln!(out, "ok {name}")?,
            Err(msg) => {
                ok = false;
                writeln!(out, "FAIL {name}: {msg}")?;
            }
        }
    }
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let mut buf = Vec::new();
        assert!(run(&mut buf).unwrap(), "{}", String::from_utf8_lossy(&buf));
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), checks().len());
        assert!(text.lines().all(|l| l.starts_with("ok ")));
    }
}
