//! Objective, paired augmentation and the freeze-then-finetune loop.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{write_atomic, Error, IoContext, Result};
use crate::nets::{save_checkpoint, SegModel, Stage};
use crate::preprocess::SampleRecord;

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy over every element, in the stable form
/// `max(z, 0) - z*t + log(1 + exp(-|z|))`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::TensorShape {
            expected: format!("targets {:?}", logits.dims()),
            got: format!("{:?}", targets.dims()),
        });
    }
    let t = targets.to_dtype(logits.dtype())?;
    let softplus = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    let loss = ((logits.relu()? - (logits * &t)?)? + softplus)?;
    Ok(loss.mean_all()?)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub p_hflip: f64,
    pub p_vflip: f64,
    /// Counter-clockwise rotations in degrees, each a multiple of 90.
    pub rotation_choices: Vec<u32>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            p_hflip: 0.5,
            p_vflip: 0.5,
            rotation_choices: vec![0, 90, 180, 270],
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        for p in [self.p_hflip, self.p_vflip] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("flip probability {p} outside [0, 1]"));
            }
        }
        if self.rotation_choices.is_empty() {
            return bad("rotation_choices must not be empty".into());
        }
        if let Some(r) = self.rotation_choices.iter().find(|&&r| r % 90 != 0 || r > 270) {
            return bad(format!("rotation {r} is not one of 0, 90, 180, 270"));
        }
        Ok(())
    }
}

/// Horizontal flip, then vertical flip, then `quarter_turns` × 90° CCW.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

fn hflip<T: Copy>(a: ArrayView2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(r, c)| a[[r, w - 1 - c]])
}

fn vflip<T: Copy>(a: ArrayView2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(r, c)| a[[h - 1 - r, c]])
}

/// One 90° counter-clockwise turn.
fn rot90<T: Copy>(a: ArrayView2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((w, h), |(r, c)| a[[c, w - 1 - r]])
}

fn rotate<T: Copy>(a: Array2<T>, turns: u8) -> Array2<T> {
    (0..turns % 4).fold(a, |acc, _| rot90(acc.view()))
}

impl Transform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let hflip = rng.random_bool(cfg.p_hflip);
        let vflip = rng.random_bool(cfg.p_vflip);
        let deg = *cfg.rotation_choices.choose(rng).expect("validated non-empty");
        Self {
            hflip,
            vflip,
            quarter_turns: (deg / 90) as u8,
        }
    }

    pub fn apply_2d<T: Copy>(&self, a: ArrayView2<T>) -> Array2<T> {
        let mut out = a.to_owned();
        if self.hflip {
            out = hflip(out.view());
        }
        if self.vflip {
            out = vflip(out.view());
        }
        rotate(out, self.quarter_turns)
    }

    /// Undoes [`Transform::apply_2d`].
    pub fn invert_2d<T: Copy>(&self, a: ArrayView2<T>) -> Array2<T> {
        let mut out = rotate(a.to_owned(), (4 - self.quarter_turns % 4) % 4);
        if self.vflip {
            out = vflip(out.view());
        }
        if self.hflip {
            out = hflip(out.view());
        }
        out
    }

    fn apply_stack(&self, stack: &Array3<f32>) -> Array3<f32> {
        let (h, w, s) = stack.dim();
        let (oh, ow) = if self.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
        let mut out = Array3::zeros((oh, ow, s));
        // Slices are transformed one by one and keep their order.
        for n in 0..s {
            out.index_axis_mut(Axis(2), n)
                .assign(&self.apply_2d(stack.index_axis(Axis(2), n)));
        }
        out
    }

    pub fn apply(&self, r: &SampleRecord) -> SampleRecord {
        SampleRecord {
            case_id: r.case_id.clone(),
            center_slice: r.center_slice,
            dwi_stack: self.apply_stack(&r.dwi_stack),
            adc_stack: self.apply_stack(&r.adc_stack),
            target: self.apply_2d(r.target.view()),
        }
    }
}

/// Draws one transform and applies it to all three arrays of the record.
pub fn augment_sample(
    record: &SampleRecord,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (SampleRecord, Transform) {
    let t = Transform::sample(cfg, rng);
    (t.apply(record), t)
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Channel-first tensors for a batch: dwi/adc (B, S, H, W), target (B, 1, H, W).
pub struct Batch {
    pub dwi: Tensor,
    pub adc: Tensor,
    pub target: Tensor,
}

fn channel_first(stack: &Array3<f32>, out: &mut Vec<f32>) {
    for n in 0..stack.dim().2 {
        out.extend(stack.index_axis(Axis(2), n).iter());
    }
}

pub fn make_batch(samples: &[&SampleRecord], device: &Device) -> Result<Batch> {
    let first = samples.first().ok_or(Error::EmptySamples("batch"))?;
    let (h, w, s) = first.dwi_stack.dim();
    let b = samples.len();
    let mut dwi = Vec::with_capacity(b * s * h * w);
    let mut adc = Vec::with_capacity(b * s * h * w);
    let mut target = Vec::with_capacity(b * h * w);
    for r in samples {
        if r.dwi_stack.dim() != (h, w, s) || r.adc_stack.dim() != (h, w, s) || r.target.dim() != (h, w) {
            return Err(Error::TensorShape {
                expected: format!("sample stacks ({h}, {w}, {s})"),
                got: format!("{:?} in {}", r.dwi_stack.dim(), r.file_name()),
            });
        }
        // NaN would otherwise be silently flattened to zero by the ReLUs.
        for (stack, modality) in [(&r.dwi_stack, "DWI"), (&r.adc_stack, "ADC")] {
            if stack.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    case: r.file_name(),
                    modality,
                });
            }
        }
        channel_first(&r.dwi_stack, &mut dwi);
        channel_first(&r.adc_stack, &mut adc);
        target.extend(r.target.iter().map(|&v| v as f32));
    }
    Ok(Batch {
        dwi: Tensor::from_vec(dwi, (b, s, h, w), device)?,
        adc: Tensor::from_vec(adc, (b, s, h, w), device)?,
        target: Tensor::from_vec(target, (b, 1, h, w), device)?,
    })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Moments {
    m: Tensor,
    v: Tensor,
    step: i32,
}

/// Adam with per-parameter step counts, so parameters that sat out the
/// frozen stage start with fresh bias correction.
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr,
            state: HashMap::new(),
        }
    }

    /// Updates every parameter whose group trains in `stage`.
    pub fn step(&mut self, model: &SegModel, grads: &candle_core::backprop::GradStore, stage: Stage) -> Result<()> {
        let c = &self.cfg;
        for p in model.params() {
            if !stage.trains(p.group) {
                continue;
            }
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let mut g = g.clone();
            if c.weight_decay != 0.0 {
                g = (g + (p.var.as_tensor() * c.weight_decay)?)?;
            }
            let st = match self.state.get_mut(&p.name) {
                Some(st) => st,
                None => {
                    let z = p.var.as_tensor().zeros_like()?;
                    self.state.entry(p.name.clone()).or_insert(Moments {
                        m: z.clone(),
                        v: z,
                        step: 0,
                    })
                }
            };
            st.step += 1;
            st.m = ((&st.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            st.v = ((&st.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let bc1 = 1.0 - c.beta1.powi(st.step);
            let bc2 = 1.0 - c.beta2.powi(st.step);
            let mhat = (&st.m / bc1)?;
            let denom = ((&st.v / bc2)?.sqrt()? + c.eps)?;
            let update = ((mhat / denom)? * self.lr)?;
            p.var.set(&(p.var.as_tensor() - update)?)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMetric {
    #[default]
    ValLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub freeze_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    pub select_metric: SelectMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 100,
            freeze_epochs: 5,
            learning_rate: 1e-4,
            seed: 0,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            select_metric: SelectMetric::ValLoss,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidTrainConfig("batch_size must be at least 1".into()));
        }
        if self.freeze_epochs > self.epochs {
            return Err(Error::InvalidTrainConfig(format!(
                "freeze_epochs {} exceeds epochs {}",
                self.freeze_epochs, self.epochs
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidTrainConfig("learning_rate must be positive".into()));
        }
        self.augment.validate()
    }

    /// Stage of 1-based epoch `epoch`.
    pub fn stage(&self, epoch: usize) -> Stage {
        if epoch <= self.freeze_epochs {
            Stage::FrozenEncoder
        } else {
            Stage::Finetune
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

pub const METRIC_LOG_HEADER: &str = "epoch,stage,train_loss,val_loss,val_dice";

pub fn metric_log_csv(log: &[EpochMetrics]) -> String {
    let mut s = String::from(METRIC_LOG_HEADER);
    s.push('\n');
    for m in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            m.epoch,
            m.stage.as_str(),
            m.train_loss,
            m.val_loss,
            m.val_dice
        );
    }
    s
}

/// Hook called after every epoch, e.g. for an external experiment tracker.
pub trait EpochObserver {
    fn on_epoch(&mut self, metrics: &EpochMetrics, model: &SegModel) -> Result<()>;
}

impl EpochObserver for () {
    fn on_epoch(&mut self, _: &EpochMetrics, _: &SegModel) -> Result<()> {
        Ok(())
    }
}

/// Aggregate loss and pooled Dice over a sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub dice: f64,
}

/// Loss (mean over every pixel) and pooled Dice at logit threshold 0.
pub fn evaluate_samples(model: &SegModel, samples: &[SampleRecord], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::EmptySamples("evaluation"));
    }
    let mut loss_sum = 0.0;
    let (mut inter, mut sizes) = (0.0f64, 0.0f64);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        let b = make_batch(&refs, model.device())?;
        let logits = model.forward(&b.dwi, &b.adc)?.detach();
        let loss = bce_with_logits(&logits, &b.target)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        loss_sum += loss * chunk.len() as f64;
        let pred = logits.gt(0.0)?.to_dtype(DType::F64)?;
        let gt = b.target.to_dtype(DType::F64)?;
        inter += (&pred * &gt)?.sum_all()?.to_scalar::<f64>()?;
        sizes += (pred.sum_all()? + gt.sum_all()?)?.to_scalar::<f64>()?;
    }
    let dice = if sizes == 0.0 { 1.0 } else { 2.0 * inter / sizes };
    Ok(Evaluation {
        loss: loss_sum / samples.len() as f64,
        dice,
    })
}

/// Single-consumer optimizer wrapper.
pub struct Trainer<'m> {
    model: &'m SegModel,
    adam: Adam,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m SegModel, cfg: &TrainConfig) -> Self {
        Self {
            model,
            adam: Adam::new(cfg.learning_rate, cfg.adam.clone()),
        }
    }

    /// One forward/backward/update; returns the batch loss.
    pub fn step(&mut self, batch: &Batch, stage: Stage) -> Result<f64> {
        let logits = self.model.forward_staged(&batch.dwi, &batch.adc, stage)?;
        let loss = bce_with_logits(&logits, &batch.target)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = loss.backward()?;
        self.adam.step(self.model, &grads, stage)?;
        Ok(value)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRIC_LOG: &str = "metrics.csv";
pub const MODEL_CONFIG_FILE: &str = "model_config.json";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";

/// Pretty JSON with a trailing newline, written atomically.
pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).at(path)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn train_state(m: &EpochMetrics) -> serde_json::Value {
    serde_json::json!({
        "epoch": m.epoch,
        "stage": m.stage,
        "train_loss": m.train_loss,
        "val_loss": m.val_loss,
        "val_dice": m.val_dice,
    })
}

/// Runs the two-stage schedule. Epochs `1..=freeze_epochs` update only the
/// non-encoder groups, later epochs update everything. After each epoch the
/// un-augmented validation loss is measured and the lowest-loss parameters
/// are kept; on return the model holds those parameters.
///
/// With `run_dir` set, the resolved model and train configs are written
/// there before the first epoch, followed by `metrics.csv`, `best.ckpt` and
/// `last.ckpt` as training proceeds.
pub fn train_loop(
    model: &SegModel,
    train: &[SampleRecord],
    val: &[SampleRecord],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    observer: &mut dyn EpochObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySamples("training"));
    }
    if val.is_empty() {
        return Err(Error::EmptySamples("validation"));
    }
    let s = model.config().slices_per_modality;
    if let Some(r) = train.iter().chain(val).find(|r| r.slices() != s) {
        return Err(Error::TensorShape {
            expected: format!("{s} slices per modality"),
            got: format!("{} in {}", r.slices(), r.file_name()),
        });
    }
    let paths = run_dir.map(|d| -> Result<(PathBuf, PathBuf, PathBuf)> {
        std::fs::create_dir_all(d).at(d)?;
        write_json(model.config(), &d.join(MODEL_CONFIG_FILE))?;
        write_json(cfg, &d.join(TRAIN_CONFIG_FILE))?;
        Ok((d.join(METRIC_LOG), d.join(BEST_CHECKPOINT), d.join(LAST_CHECKPOINT)))
    });
    let paths = paths.transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(model, cfg);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let stage = cfg.stage(epoch);
        order.shuffle(&mut rng);
        // Transforms are drawn in permutation order before any work is done,
        // so the batch contents depend only on the seed.
        let transforms: Vec<Transform> = order
            .iter()
            .map(|_| {
                if cfg.augment.enabled {
                    Transform::sample(&cfg.augment, &mut rng)
                } else {
                    Transform::identity()
                }
            })
            .collect();

        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let offset = bi * cfg.batch_size;
            let augmented: Vec<SampleRecord> = idx
                .iter()
                .zip(&transforms[offset..offset + idx.len()])
                .map(|(&i, t)| t.apply(&train[i]))
                .collect();
            let refs: Vec<&SampleRecord> = augmented.iter().collect();
            let batch = make_batch(&refs, model.device())?;
            let loss = trainer.step(&batch, stage)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi + 1,
                });
            }
            loss_sum += loss * idx.len() as f64;
        }

        let v = evaluate_samples(model, val, cfg.batch_size)?;
        let metrics = EpochMetrics {
            epoch,
            stage,
            train_loss: loss_sum / train.len() as f64,
            val_loss: v.loss,
            val_dice: v.dice,
        };
        log::info!(
            "epoch {epoch} [{}] train_loss={:.6} val_loss={:.6} val_dice={:.4}",
            stage.as_str(),
            metrics.train_loss,
            metrics.val_loss,
            metrics.val_dice
        );
        if !v.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }

        let improved = best.as_ref().is_none_or(|(_, l, _)| v.loss < *l);
        if improved {
            best = Some((epoch, v.loss, model.snapshot()?));
        }
        if let Some((log_path, best_path, last_path)) = &paths {
            if improved {
                save_checkpoint(model, &train_state(&metrics), best_path)?;
            }
            save_checkpoint(model, &train_state(&metrics), last_path)?;
            log.push(metrics.clone());
            write_atomic(log_path, metric_log_csv(&log).as_bytes())?;
        } else {
            log.push(metrics.clone());
        }
        observer.on_epoch(&metrics, model)?;
    }

    let (best_epoch, best_val_loss, snapshot) = best.expect("at least one epoch");
    model.restore(&snapshot)?;
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(t: Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn tensor(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec(), (1, 1, 1, v.len()), &Device::Cpu).unwrap()
    }

    #[test]
    fn bce_at_zero_is_ln2() {
        let z = tensor(&[0.0; 6]);
        let t = tensor(&[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        assert!((scalar(bce_with_logits(&z, &t).unwrap()) - std::f64::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn bce_saturated_cases() {
        let z = tensor(&[100.0, -100.0]);
        let t = tensor(&[1.0, 0.0]);
        assert!(scalar(bce_with_logits(&z, &t).unwrap()) < 1e-10);

        // High-precision reference: -log(sigmoid(-100)) = log(1 + e^100).
        let reference = (1.0f64 + 100f64.exp()).ln();
        let wrong = scalar(bce_with_logits(&tensor(&[-100.0]), &tensor(&[1.0])).unwrap());
        assert!((wrong - reference).abs() < 1e-4, "{wrong} vs {reference}");

        let huge = scalar(bce_with_logits(&tensor(&[1e4, -1e4]), &tensor(&[0.0, 1.0])).unwrap());
        assert!((huge - 1e4).abs() < 1e-2);
    }

    #[test]
    fn bce_rejects_shape_mismatch() {
        assert!(bce_with_logits(&tensor(&[0.0, 1.0]), &tensor(&[0.0])).is_err());
    }

    fn record(h: usize, w: usize, s: usize) -> SampleRecord {
        SampleRecord {
            case_id: "c".into(),
            center_slice: 1,
            dwi_stack: Array3::from_shape_fn((h, w, s), |(r, c, n)| (r * w + c) as f32 + n as f32 * 0.5),
            adc_stack: Array3::from_shape_fn((h, w, s), |(r, c, n)| -((r * w + c) as f32) - n as f32),
            target: Array2::from_shape_fn((h, w), |(r, c)| u8::from((r + 2 * c) % 5 == 0)),
        }
    }

    #[test]
    fn identity_transform_is_noop() {
        let r = record(6, 6, 3);
        assert_eq!(Transform::identity().apply(&r), r);
    }

    #[test]
    fn quarter_turn_group_law() {
        let r = record(5, 5, 3);
        let r90 = Transform { quarter_turns: 1, ..Transform::identity() };
        let r180 = Transform { quarter_turns: 2, ..Transform::identity() };
        assert_eq!(r90.apply(&r90.apply(&r)), r180.apply(&r));
        let full = (0..4).fold(r.clone(), |acc, _| r90.apply(&acc));
        assert_eq!(full, r);
    }

    #[test]
    fn hflip_moves_marker_consistently() {
        let (h, w) = (8, 8);
        let mut r = record(h, w, 3);
        r.target.fill(0);
        r.dwi_stack.fill(0.0);
        let (row, col) = (2, 5);
        r.target[[row, col]] = 1;
        for n in 0..3 {
            r.dwi_stack[[row, col, n]] = 1.0 + n as f32;
        }
        let t = Transform { hflip: true, ..Transform::identity() };
        let a = t.apply(&r);
        assert_eq!(a.target[[row, w - 1 - col]], 1);
        for n in 0..3 {
            // Slice order is preserved.
            assert_eq!(a.dwi_stack[[row, w - 1 - col, n]], 1.0 + n as f32);
        }
    }

    #[test]
    fn inverse_recovers_original_for_all_transforms() {
        let r = record(7, 7, 1);
        for h in [false, true] {
            for v in [false, true] {
                for q in 0..4 {
                    let t = Transform { hflip: h, vflip: v, quarter_turns: q };
                    let a = t.apply(&r);
                    assert_eq!(t.invert_2d(a.target.view()), r.target);
                    assert_eq!(a.target.iter().filter(|&&x| x == 1).count(), r.target.iter().filter(|&&x| x == 1).count());
                }
            }
        }
    }

    #[test]
    fn augment_config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig { p_hflip: 1.5, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { rotation_choices: vec![], ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { rotation_choices: vec![45], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { freeze_epochs: 6, epochs: 5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        let cfg = TrainConfig { freeze_epochs: 2, ..Default::default() };
        assert_eq!(cfg.stage(2), Stage::FrozenEncoder);
        assert_eq!(cfg.stage(3), Stage::Finetune);
    }

    #[test]
    fn batch_is_channel_first() {
        let r = record(4, 4, 3);
        let b = make_batch(&[&r, &r], &Device::Cpu).unwrap();
        assert_eq!(b.dwi.dims(), &[2, 3, 4, 4]);
        assert_eq!(b.target.dims(), &[2, 1, 4, 4]);
        let v: Vec<f32> = b.dwi.get(0).unwrap().get(2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let expect: Vec<f32> = r.dwi_stack.index_axis(Axis(2), 2).iter().copied().collect();
        assert_eq!(v, expect);
    }

    #[test]
    fn csv_has_expected_header() {
        let log = vec![EpochMetrics { epoch: 1, stage: Stage::FrozenEncoder, train_loss: 0.5, val_loss: 0.25, val_dice: 0.1 }];
        assert_eq!(metric_log_csv(&log), "epoch,stage,train_loss,val_loss,val_dice\n1,frozen,0.5,0.25,0.1\n");
    }
}
