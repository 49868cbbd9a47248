//! Desk-scale training: multi-scale supervision, Adam with decoupled weight
//! decay, and a deterministic loop over the synthetic dataset.
//!
//! Everything that reaches the log is derived from seeded state — no clocks,
//! no thread-count dependence — so two runs with the same config produce
//! byte-identical logs and checkpoints.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::features::{FINEST_LEVEL, PYRAMID_LEVELS};
use crate::metrics::epe;
use crate::ops::loss::NormKind;
use crate::ops::resample::avg_pool2x;
use crate::params::{BoundParams, ModelParams};
use crate::pipeline::{FlowNet, ModelConfig};
use crate::synth::{generate_set, parse_dataset_uri, Sample};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Loss weights for levels 6 down to 2: supervision is strongest at the
/// coarse levels, which anchor the large motions the finer levels refine.
pub const LEVEL_WEIGHTS: [f64; 5] = [0.32, 0.08, 0.02, 0.01, 0.005];

pub fn level_weight(level: usize) -> f64 {
    LEVEL_WEIGHTS[PYRAMID_LEVELS - level]
}

// ─── learning-rate schedule ──────────────────────────────────────────────

/// Piecewise-constant learning rate: each `(step, rate)` entry applies from
/// that 1-based step onward, so the list fully determines the rate at every
/// step. The first entry must cover step 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule(Vec<(usize, f64)>);

/// Default schedule for the 2000-step run: hold 1e-4 through the main
/// descent, then halve twice so the tail settles instead of oscillating.
pub const DEFAULT_LR_SCHEDULE: &str = "1:1e-4,1401:5e-5,1801:2.5e-5";

impl LrSchedule {
    pub fn new(entries: Vec<(usize, f64)>) -> Result<Self> {
        match entries.first() {
            None => return Err(Error::Config("lr schedule needs at least one entry".into())),
            Some(&(step, _)) if step != 1 => {
                return Err(Error::Config(format!(
                    "lr schedule must start at step 1, got step {step}"
                )));
            }
            _ => {}
        }
        for pair in entries.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Config(format!(
                    "lr schedule steps must increase (step {} follows {})",
                    pair[1].0, pair[0].0
                )));
            }
        }
        for &(step, rate) in &entries {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(Error::Config(format!(
                    "lr {rate} at step {step} must be positive and finite"
                )));
            }
        }
        Ok(LrSchedule(entries))
    }

    pub fn constant(rate: f64) -> Result<Self> {
        LrSchedule::new(vec![(1, rate)])
    }

    /// Rate in effect at 1-based `step`: the last entry at or before it.
    pub fn at(&self, step: usize) -> f64 {
        let idx = self.0.partition_point(|&(s, _)| s <= step);
        self.0[idx.saturating_sub(1)].1
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.0
    }

    pub fn initial(&self) -> f64 {
        self.0[0].1
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    /// Accepts a bare rate (`1e-4`, constant from step 1) or a
    /// comma-separated `STEP:RATE` list (`1:1e-4,1401:5e-5`).
    fn from_str(s: &str) -> Result<Self> {
        if !s.contains(':') {
            let rate: f64 =
                s.parse().map_err(|_| Error::Config(format!("bad lr value {s:?}")))?;
            return LrSchedule::constant(rate);
        }
        let mut entries = Vec::new();
        for part in s.split(',') {
            let (step, rate) = part.split_once(':').ok_or_else(|| {
                Error::Config(format!("bad lr schedule entry {part:?} (expected STEP:RATE)"))
            })?;
            let step: usize = step
                .parse()
                .map_err(|_| Error::Config(format!("bad step in lr entry {part:?}")))?;
            let rate: f64 = rate
                .parse()
                .map_err(|_| Error::Config(format!("bad rate in lr entry {part:?}")))?;
            entries.push((step, rate));
        }
        LrSchedule::new(entries)
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let [(1, rate)] = self.0[..] {
            return write!(f, "{rate}");
        }
        for (i, (step, rate)) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{step}:{rate}")?;
        }
        Ok(())
    }
}

// ─── optimizer ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: applied directly to the parameter after the Adam
    /// step, never mixed into the moment estimates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { cfg, t: 0, m, v }
    }

    /// One update at learning rate `lr` (passed per step so a schedule can
    /// drive it). `grads` must align with the parameter iteration order; a
    /// `None` entry leaves that tensor untouched.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Option<Tensor<f32>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "got {} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] as f64;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let step = lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                let mut wj = *w as f64 - step;
                wj -= lr * c.weight_decay * wj;
                *w = wj as f32;
            }
        }
        Ok(())
    }
}

// ─── multi-scale supervision ─────────────────────────────────────────────

/// Ground truth for every estimation level, coarse to fine, matching the
/// order of [`crate::pipeline::ForwardFlows::levels`]. Each halving of the
/// resolution also halves the vectors, keeping them in that level's pixels.
pub fn flow_pyramid(gt: &Tensor<f32>) -> Result<Vec<(usize, Tensor<f32>)>> {
    let mut levels = Vec::new();
    let mut cur = gt.clone();
    for k in 1..=PYRAMID_LEVELS {
        cur = avg_pool2x(&cur)?.map(|v| v * 0.5);
        if k >= FINEST_LEVEL {
            levels.push((k, cur.clone()));
        }
    }
    levels.reverse();
    Ok(levels)
}

/// Weighted multi-scale supervision: per-level norm losses combined with the
/// given weights. `predictions` and `targets` pair up entry by entry and must
/// agree on the level ids. A non-finite level loss is an error naming the
/// level, so a diverging run points at where it first blew up.
pub fn multiscale_loss(
    tape: &mut Tape<f32>,
    predictions: &[(usize, Var)],
    targets: &[(usize, Tensor<f32>)],
    weights: &[f64],
    kind: NormKind,
) -> Result<Var> {
    if predictions.len() != targets.len() || predictions.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "multiscale loss got {} predictions, {} targets, {} weights",
            predictions.len(),
            targets.len(),
            weights.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("multiscale loss needs at least one level".into()));
    }
    let mut terms = Vec::with_capacity(predictions.len());
    for (((level, var), (gt_level, target)), &weight) in
        predictions.iter().zip(targets).zip(weights)
    {
        if level != gt_level {
            return Err(Error::InvalidArgument(format!(
                "prediction level {level} paired with target level {gt_level}"
            )));
        }
        let term = tape.norm_loss(*var, target, kind)?;
        if !tape.value(term).data()[0].is_finite() {
            return Err(Error::NonFinite { stage: format!("loss at level {level}") });
        }
        terms.push((weight as f32, term));
    }
    tape.weighted_sum(&terms)
}

// ─── config ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    pub weight_decay: f64,
    /// Seeds model init, sample augmentation, and nothing else.
    pub seed: u64,
    pub dataset: String,
    pub holdout: String,
    pub variant: String,
    pub loss: NormKind,
    pub augment: bool,
    pub log_every: usize,
    /// 0 evaluates only before the first and after the last step.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 4,
            lr: DEFAULT_LR_SCHEDULE.parse().expect("default schedule parses"),
            weight_decay: 1e-4,
            seed: 0,
            dataset: "synthetic:0:500".into(),
            holdout: "synthetic:900:16".into(),
            variant: "full".into(),
            loss: NormKind::L2,
            augment: false,
            log_every: 25,
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    /// Applies `key=value` overrides onto the defaults, rejecting unknown
    /// keys and unparseable values.
    pub fn parse<I, S>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut cfg = TrainConfig::default();
        for pair in pairs {
            let pair = pair.as_ref();
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                Error::Config(format!("expected key=value, got {pair:?}"))
            })?;
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "steps" => self.steps = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lr" => self.lr = value.parse()?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dataset" => self.dataset = value.to_string(),
            "holdout" => self.holdout = value.to_string(),
            "variant" => {
                ModelConfig::variant(value)?;
                self.variant = value.to_string();
            }
            "loss" => {
                self.loss = match value {
                    "l2" => NormKind::L2,
                    "robust" => NormKind::Robust { eps: 0.01, q: 0.4 },
                    other => {
                        return Err(Error::Config(format!(
                            "bad value {other:?} for loss (expected l2 or robust)"
                        )));
                    }
                }
            }
            "augment" => self.augment = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown option {other:?} (known: steps batch lr weight_decay seed \
                     dataset holdout variant loss augment log_every eval_every)"
                )));
            }
        }
        Ok(())
    }

    fn loss_name(&self) -> &'static str {
        match self.loss {
            NormKind::L2 => "l2",
            NormKind::Robust { .. } => "robust",
        }
    }
}

// ─── training loop ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct TrainReport {
    pub initial_epe: f64,
    pub final_epe: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Mean endpoint error of the model over a set of samples.
pub fn evaluate(net: &FlowNet, samples: &[Sample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let pred = net.infer(&s.img1, &s.img2)?;
        sum += epe(&pred, &s.flow, None)?;
    }
    Ok(sum / samples.len() as f64)
}

/// What one training step saw: the combined loss plus the unweighted
/// endpoint error per level (each in that level's own pixel units).
#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub level_epe: Vec<(usize, f64)>,
}

/// Runs one training step on an assembled batch at learning rate `lr`.
pub fn train_step(
    net: &mut FlowNet,
    adam: &mut Adam,
    img1: &Tensor<f32>,
    img2: &Tensor<f32>,
    gt: &Tensor<f32>,
    loss_kind: NormKind,
    lr: f64,
) -> Result<StepStats> {
    let pyramid = flow_pyramid(gt)?;
    let mut tape = Tape::<f32>::new();
    let bp = BoundParams::bind(&mut tape, &net.params);
    let i1 = tape.leaf(img1.clone());
    let i2 = tape.leaf(img2.clone());
    let flows = net.forward(&mut tape, &bp, i1, i2)?;

    let weights: Vec<f64> = flows.levels.iter().map(|(l, _)| level_weight(*l)).collect();
    let loss = multiscale_loss(&mut tape, &flows.levels, &pyramid, &weights, loss_kind)?;
    let loss_val = tape.value(loss).data()[0] as f64;
    let mut level_epe = Vec::with_capacity(flows.levels.len());
    for ((level, var), (_, target)) in flows.levels.iter().zip(&pyramid) {
        level_epe.push((*level, epe(tape.value(*var), target, None)?));
    }
    tape.backward(loss)?;
    let grads = bp.collect_grads(&mut tape, &net.params);
    adam.step(&mut net.params, &grads, lr)?;
    Ok(StepStats { loss: loss_val, level_epe })
}

fn stack_field(samples: &[&Sample], field: impl Fn(&Sample) -> &Tensor<f32>) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = samples.iter().map(|s| field(s)).collect();
    Tensor::stack_batch(&refs)
}

/// Full training run. Progress lines go to `log`; the returned model holds
/// the final weights.
pub fn train<W: Write>(cfg: &TrainConfig, log: &mut W) -> Result<(FlowNet, TrainReport)> {
    let model_cfg = ModelConfig {
        init_seed: cfg.seed,
        ..ModelConfig::variant(&cfg.variant)?
    };
    let mut net = FlowNet::new(model_cfg)?;
    let mut adam = Adam::new(
        &net.params,
        AdamConfig { weight_decay: cfg.weight_decay, ..Default::default() },
    );

    let (train_cfg, train_seed, train_count) = parse_dataset_uri(&cfg.dataset)?;
    let (hold_cfg, hold_seed, hold_count) = parse_dataset_uri(&cfg.holdout)?;
    if train_count == 0 || cfg.batch == 0 {
        return Err(Error::Config("dataset count and batch must be positive".into()));
    }
    let train_set = generate_set(&train_cfg, train_seed, train_count);
    let holdout = generate_set(&hold_cfg, hold_seed, hold_count);

    writeln!(
        log,
        "config variant={} params={} steps={} batch={} lr={} weight_decay={} seed={} \
         dataset={} holdout={} loss={} augment={}",
        cfg.variant,
        net.count_params(),
        cfg.steps,
        cfg.batch,
        cfg.lr,
        cfg.weight_decay,
        cfg.seed,
        cfg.dataset,
        cfg.holdout,
        cfg.loss_name(),
        cfg.augment,
    )?;

    let initial_epe = evaluate(&net, &holdout)?;
    writeln!(log, "eval step=0 epe={initial_epe:.4}")?;

    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00c0_ffee);
    let aug_cfg = AugmentConfig::default();
    let mut final_loss = f64::NAN;
    for step in 1..=cfg.steps {
        let base = (step - 1) * cfg.batch;
        let picked: Vec<&Sample> =
            (0..cfg.batch).map(|j| &train_set[(base + j) % train_set.len()]).collect();
        let augmented: Vec<Sample>;
        let batch: Vec<&Sample> = if cfg.augment {
            augmented = picked.iter().map(|s| augment(s, &aug_cfg, &mut aug_rng)).collect();
            augmented.iter().collect()
        } else {
            picked
        };
        let img1 = stack_field(&batch, |s| &s.img1)?;
        let img2 = stack_field(&batch, |s| &s.img2)?;
        let gt = stack_field(&batch, |s| &s.flow)?;

        let stats = train_step(&mut net, &mut adam, &img1, &img2, &gt, cfg.loss, cfg.lr.at(step))?;
        final_loss = stats.loss;
        // Step 1 is always logged: it is the untrained loss every later line
        // is judged against.
        if step == 1 || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            write!(log, "step={step} loss={:.6}", stats.loss)?;
            for (level, e) in &stats.level_epe {
                write!(log, " epe{level}={e:.4}")?;
            }
            writeln!(log)?;
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps {
            let e = evaluate(&net, &holdout)?;
            writeln!(log, "eval step={step} epe={e:.4}")?;
        }
    }

    let final_epe = evaluate(&net, &holdout)?;
    writeln!(log, "eval step={} epe={final_epe:.4}", cfg.steps)?;
    writeln!(
        log,
        "done steps={} initial_epe={initial_epe:.4} final_epe={final_epe:.4}",
        cfg.steps
    )?;
    Ok((net, TrainReport { initial_epe, final_epe, final_loss, steps: cfg.steps }))
}
