//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 6 9`.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::fmt::Display;
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};
use strokeseg::eval::{dice, evaluate_split, EvalOptions};
use strokeseg::nets::{load_checkpoint, ModelConfig, SegModel, Stage, Variant};
use strokeseg::phantom::{generate_case, write_dataset, PhantomSpec};
use strokeseg::preprocess::{
    encode_sample, extract_samples, load_split_samples, nonzero_bbox, prepare_case, preprocess_case,
    preprocess_ids, preprocess_split, read_sample, split_dir, write_sample, PreprocessConfig, SampleRecord,
};
use strokeseg::train::{
    augment_sample, bce_with_logits, evaluate_samples, make_batch, train_loop, AugmentConfig, EpochMetrics,
    EpochObserver, TrainConfig, Trainer, BEST_CHECKPOINT, METRIC_LOG,
};
use strokeseg::volume_io::{discover_cases, make_split, write_manifest, Split, SplitRatios};

type Check = Result<String, String>;

trait OrFail<T> {
    fn or_fail(self, what: &str) -> Result<T, String>;
}

impl<T, E: Display> OrFail<T> for Result<T, E> {
    fn or_fail(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn values(m: &SegModel, encoders_only: bool) -> Vec<Vec<f32>> {
    m.params()
        .iter()
        .filter(|p| !encoders_only || p.group.is_encoder())
        .map(|p| p.var.as_tensor().flatten_all().unwrap().to_vec1().unwrap())
        .collect()
}

fn uniform(shape: (usize, usize, usize, usize), seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn small_phantoms(n: usize, shape: [usize; 3], seed: u64) -> PhantomSpec {
    PhantomSpec {
        n_cases: n,
        shape,
        seed,
        ..PhantomSpec::default()
    }
}

fn samples_of(spec: &PhantomSpec) -> Vec<SampleRecord> {
    (0..spec.n_cases)
        .flat_map(|i| preprocess_case(&generate_case(spec, i).unwrap(), &PreprocessConfig::default()).unwrap())
        .collect()
}

// ---------------------------------------------------------------------------

fn metric_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut both_empty, mut one_empty) = (0, 0);
    for k in 0..1000 {
        let (pd, gd) = match k {
            0 => (0.0, 0.0),
            1 => (0.0, 0.2),
            2 => (0.2, 0.0),
            _ if k % 50 == 0 => (0.0, 0.0),
            _ => (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6)),
        };
        let pred = Array3::from_shape_fn((16, 16, 16), |_| u8::from(rng.random_bool(pd)));
        let gt = if k == 3 {
            pred.clone()
        } else {
            Array3::from_shape_fn((16, 16, 16), |_| u8::from(rng.random_bool(gd)))
        };
        let set = |a: &Array3<u8>| -> HashSet<(usize, usize, usize)> {
            a.indexed_iter().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect()
        };
        let (ps, gs) = (set(&pred), set(&gt));
        let expected = if ps.is_empty() && gs.is_empty() {
            both_empty += 1;
            1.0
        } else {
            if ps.is_empty() || gs.is_empty() {
                one_empty += 1;
            }
            2.0 * ps.intersection(&gs).count() as f64 / (ps.len() + gs.len()) as f64
        };
        let got = dice(pred.view(), gt.view()).or_fail("dice")?;
        ensure!(got == expected, "pair {k}: dice {got} vs oracle {expected}");
        ensure!(k != 3 || got == 1.0, "identical masks gave {got}");
    }
    let t = start.elapsed();
    ensure!(both_empty > 0 && one_empty >= 2, "edge cases not exercised");
    ensure!(t < Duration::from_secs(30), "took {t:?}");
    Ok(format!("1000 pairs exact ({both_empty} empty/empty, {one_empty} one-sided)"))
}

fn preprocessing_conformance() -> Check {
    let dir = tempfile::tempdir().or_fail("tempdir")?;
    let mut n_samples = 0;
    for (shape, seed) in [([32, 32, 8], 1), ([64, 64, 12], 2), ([40, 48, 13], 3)] {
        let spec = small_phantoms(3, shape, seed);
        for i in 0..spec.n_cases {
            let case = generate_case(&spec, i).or_fail("phantom")?;
            // Triple-loop scan for the nonzero extent.
            let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
            let [h, w, d] = case.shape();
            for a in 0..h {
                for b in 0..w {
                    for c in 0..d {
                        if case.dwi[[a, b, c]] != 0.0 {
                            for (ax, v) in [a, b, c].into_iter().enumerate() {
                                lo[ax] = lo[ax].min(v);
                                hi[ax] = hi[ax].max(v + 1);
                            }
                        }
                    }
                }
            }
            let bbox = nonzero_bbox(&case.dwi).or_fail("bbox")?;
            ensure!(bbox.lo == lo && bbox.hi == hi, "{}: bbox {bbox:?} vs scan {lo:?}..{hi:?}", case.case_id);

            let prepared = prepare_case(&case).or_fail("prepare")?;
            let depth = prepared.case.depth();
            let all3 = extract_samples(&prepared.case, 3, None).or_fail("extract")?;
            ensure!(all3.len() == depth - 2, "{}: {} candidates for depth {depth}", case.case_id, all3.len());
            let all1 = extract_samples(&prepared.case, 1, None).or_fail("extract")?;
            ensure!(all1.len() == depth, "S=1 gave {} candidates for depth {depth}", all1.len());

            for (k, r) in all3.iter().enumerate() {
                let in_range = |a: &Array3<f32>| a.iter().all(|v| (0.0..=1.0).contains(v));
                ensure!(in_range(&r.dwi_stack) && in_range(&r.adc_stack), "{}: intensity outside [0,1]", r.file_name());
                let path = dir.path().join(r.file_name());
                write_sample(r, &path).or_fail("write")?;
                let back = read_sample(&path).or_fail("read")?;
                ensure!(&back == r, "{}: decoded sample differs", r.file_name());
                let bytes = std::fs::read(&path).or_fail("read bytes")?;
                ensure!(encode_sample(&back) == bytes, "{}: re-encoding differs", r.file_name());
                ensure!(r.center_slice == k + 1, "center slices not consecutive");
                n_samples += 1;
            }
        }
    }
    Ok(format!("9 cases, {n_samples} samples round-tripped"))
}

fn architecture_contracts() -> Check {
    for (v, s) in [(Variant::SingleEncoder, 1), (Variant::DualEncoder, 1), (Variant::DualEncoder, 3)] {
        let m = SegModel::new(&ModelConfig::tiny(v, s)).or_fail("model")?;
        let x = uniform((2, s, 128, 128), 1, DType::F32);
        let y = m.forward(&x, &x).or_fail("forward")?;
        ensure!(y.dims() == [2, 1, 128, 128], "{}: logits {:?}", m.config().label(), y.dims());
    }
    let m = SegModel::new(&ModelConfig::default()).or_fail("model")?;
    let x = uniform((2, 3, 128, 128), 2, DType::F32);
    ensure!(m.forward(&x, &x).or_fail("forward")?.dims() == [2, 1, 128, 128], "default config shape");

    // Modality separation.
    let m = SegModel::new(&ModelConfig::tiny(Variant::DualEncoder, 3)).or_fail("model")?;
    let dwi = uniform((2, 3, 128, 128), 3, DType::F32);
    let adc = uniform((2, 3, 128, 128), 4, DType::F32);
    let flat = |t: &Tensor| -> Vec<f32> { t.flatten_all().unwrap().to_vec1().unwrap() };
    let with = m.bottleneck_features(&dwi, &adc).or_fail("features")?;
    let without = m.bottleneck_features(&dwi, &adc.zeros_like().unwrap()).or_fail("features")?;
    ensure!(flat(&with[0]) == flat(&without[0]), "DWI features depend on ADC");
    ensure!(flat(&with[1]) != flat(&without[1]), "ADC branch ignores its input");

    // Parameter disjointness.
    let dwi_p: Vec<_> = m.params().iter().filter(|p| p.name.starts_with("encoder_dwi.")).collect();
    let adc_p: Vec<_> = m.params().iter().filter(|p| p.name.starts_with("encoder_adc.")).collect();
    ensure!(!dwi_p.is_empty() && dwi_p.len() == adc_p.len(), "encoder parameter lists differ");
    let before: Vec<Vec<f32>> = adc_p.iter().map(|p| flat(p.var.as_tensor())).collect();
    for p in &dwi_p {
        p.var.set(&p.var.as_tensor().ones_like().unwrap()).or_fail("set")?;
    }
    let after: Vec<Vec<f32>> = adc_p.iter().map(|p| flat(p.var.as_tensor())).collect();
    ensure!(before == after, "writing DWI parameters changed the ADC encoder");

    for s in [1, 3] {
        let m = SegModel::new(&ModelConfig::tiny(Variant::SingleEncoder, s)).or_fail("model")?;
        ensure!(m.encoder_input_channels() == vec![2 * s], "single S={s}: {:?}", m.encoder_input_channels());
    }
    Ok("3 variants (2,1,128,128); separation and disjointness hold; single uses 2·S".into())
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (variant, s) in [(Variant::DualEncoder, 3), (Variant::SingleEncoder, 1)] {
        let m = SegModel::with_dtype(&ModelConfig::tiny(variant, s), DType::F64).or_fail("model")?;
        let dwi = uniform((1, s, 128, 128), 10, DType::F64);
        let adc = uniform((1, s, 128, 128), 11, DType::F64);
        let t = uniform((1, 1, 128, 128), 12, DType::F64).gt(0.7).unwrap().to_dtype(DType::F64).unwrap();
        let loss = |m: &SegModel| -> f64 {
            bce_with_logits(&m.forward(&dwi, &adc).unwrap(), &t).unwrap().to_scalar::<f64>().unwrap()
        };
        let grads = bce_with_logits(&m.forward(&dwi, &adc).or_fail("forward")?, &t)
            .and_then(|l| Ok(l.backward()?))
            .or_fail("backward")?;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let params = m.params();
        let h = 1e-6;
        for _ in 0..10 {
            let p = &params[rng.random_range(0..params.len())];
            let idx = rng.random_range(0..p.elem_count());
            let g = grads.get(p.var.as_tensor()).ok_or(format!("{} has no gradient", p.name))?;
            let analytic = g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx];
            let orig: Vec<f64> = p.var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let at = |delta: f64| {
                let mut v = orig.clone();
                v[idx] += delta;
                p.var.set(&Tensor::from_vec(v, p.var.shape(), &Device::Cpu).unwrap()).unwrap();
                loss(&m)
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            p.var.set(&Tensor::from_vec(orig, p.var.shape(), &Device::Cpu).unwrap()).or_fail("restore")?;
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            ensure!(rel <= 1e-2, "{}[{idx}]: analytic {analytic:e}, numeric {numeric:e}", p.name);
            worst = worst.max(rel);
        }
    }
    let mut covered = 0;
    for variant in [Variant::DualEncoder, Variant::SingleEncoder] {
        let cfg = ModelConfig {
            variant,
            ..ModelConfig::default()
        };
        let m = SegModel::new(&cfg).or_fail("model")?;
        let x = uniform((1, 3, 128, 128), 20, DType::F32);
        let y = uniform((1, 3, 128, 128), 21, DType::F32);
        let t = uniform((1, 1, 128, 128), 22, DType::F32).gt(0.7).unwrap().to_dtype(DType::F32).unwrap();
        let grads = bce_with_logits(&m.forward(&x, &y).or_fail("forward")?, &t)
            .and_then(|l| Ok(l.backward()?))
            .or_fail("backward")?;
        for p in m.params() {
            let g = grads.get(p.var.as_tensor()).ok_or(format!("{}: {} has no gradient", cfg.label(), p.name))?;
            let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            ensure!(norm.is_finite() && norm > 0.0, "{}: gradient norm {norm}", p.name);
            covered += 1;
        }
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(120), "took {t:?}");
    Ok(format!("20 FD entries, worst rel {worst:.1e}; {covered} full-config tensors covered"))
}

#[derive(Default)]
struct Recorder {
    encoders: Vec<Vec<Vec<f32>>>,
    full: Vec<Vec<Vec<f32>>>,
}

impl EpochObserver for Recorder {
    fn on_epoch(&mut self, _: &EpochMetrics, model: &SegModel) -> strokeseg::Result<()> {
        self.encoders.push(values(model, true));
        self.full.push(values(model, false));
        Ok(())
    }
}

fn two_stage_schedule() -> Check {
    let train = samples_of(&small_phantoms(2, [32, 32, 8], 1));
    let val = samples_of(&small_phantoms(1, [32, 32, 8], 2));
    let model = SegModel::new(&ModelConfig::tiny(Variant::DualEncoder, 3)).or_fail("model")?;
    let initial = values(&model, true);
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 8,
        freeze_epochs: 5,
        learning_rate: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().or_fail("tempdir")?;
    let mut rec = Recorder::default();
    let out = train_loop(&model, &train, &val, &cfg, Some(dir.path()), &mut rec).or_fail("train")?;
    for e in 0..5 {
        ensure!(rec.encoders[e] == initial, "encoders changed during epoch {}", e + 1);
        ensure!(out.log[e].stage == Stage::FrozenEncoder, "epoch {} not frozen", e + 1);
    }
    ensure!(rec.encoders[5] != initial, "encoders unchanged at epoch 6");
    let min = out.log.iter().map(|m| m.val_loss).fold(f64::INFINITY, f64::min);
    ensure!(out.best_val_loss == min, "selected loss {} vs minimum {min}", out.best_val_loss);
    let best = &rec.full[out.best_epoch - 1];
    ensure!(&values(&model, false) == best, "returned model is not the best epoch");
    let (ckpt, _) = load_checkpoint(&dir.path().join(BEST_CHECKPOINT)).or_fail("checkpoint")?;
    ensure!(&values(&ckpt, false) == best, "best.ckpt is not the best epoch");
    let again = evaluate_samples(&ckpt, &val, cfg.batch_size).or_fail("evaluate")?;
    ensure!(again.loss == min, "checkpoint val loss {} vs logged {min}", again.loss);
    Ok(format!("frozen 1-5, moved at 6; best epoch {} (val loss {min:.5})", out.best_epoch))
}

fn loss_correctness() -> Check {
    let bce = |z: f64, t: f64, dtype: DType| -> f64 {
        let zt = Tensor::new(&[z], &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
        let tt = Tensor::new(&[t], &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
        bce_with_logits(&zt, &tt).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    };
    let ln2 = std::f64::consts::LN_2;
    for t in [0.0, 1.0] {
        let v = bce(0.0, t, DType::F64);
        ensure!((v - ln2).abs() <= 1e-9, "z=0, t={t}: {v}");
    }
    for dtype in [DType::F64, DType::F32] {
        let v = bce(-100.0, 1.0, dtype);
        ensure!(v.is_finite() && (v - 100.0).abs() <= 1e-4, "{dtype:?} z=-100, t=1: {v}");
        let v = bce(100.0, 0.0, dtype);
        ensure!(v.is_finite() && (v - 100.0).abs() <= 1e-4, "{dtype:?} z=100, t=0: {v}");
    }
    Ok(format!("ln 2 error {:.1e}; saturated case {:.6}", (bce(0.0, 1.0, DType::F64) - ln2).abs(), bce(-100.0, 1.0, DType::F64)))
}

fn end_to_end_learning() -> Check {
    // Overfit: four lesion-bearing samples from four different cases.
    let spec = small_phantoms(8, [64, 64, 12], 21);
    let mut pool: Vec<SampleRecord> = samples_of(&spec);
    pool.sort_by_key(|r| std::cmp::Reverse(r.target.iter().map(|&v| v as u64).sum::<u64>()));
    let mut four: Vec<SampleRecord> = Vec::new();
    for r in pool {
        if four.len() < 4 && !four.iter().any(|f| f.case_id == r.case_id) {
            four.push(r);
        }
    }
    ensure!(four.len() == 4, "not enough lesion-bearing cases");
    let model = SegModel::new(&ModelConfig::tiny(Variant::DualEncoder, 3)).or_fail("model")?;
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let refs: Vec<&SampleRecord> = four.iter().collect();
    let batch = make_batch(&refs, model.device()).or_fail("batch")?;
    let mut trainer = Trainer::new(&model, &cfg);
    let mut reached = None;
    let mut last = 0.0;
    for step in 1..=300 {
        trainer.step(&batch, Stage::Finetune).or_fail("step")?;
        if step % 10 == 0 {
            last = evaluate_samples(&model, &four, 4).or_fail("evaluate")?.dice;
            if last > 0.9 {
                reached = Some(step);
                break;
            }
        }
    }
    let Some(steps) = reached else {
        return Err(format!("training Dice {last:.3} after 300 steps"));
    };

    // Held-out phantom run: 20 training-side cases (16 train + 4 val) and 5 test.
    let start = Instant::now();
    let dir = tempfile::tempdir().or_fail("tempdir")?;
    let spec = PhantomSpec {
        n_cases: 25,
        seed: 7,
        ..PhantomSpec::default()
    };
    write_dataset(&spec, dir.path()).or_fail("phantoms")?;
    let ids = discover_cases(dir.path()).or_fail("discover")?;
    let manifest = make_split(&ids, 7, SplitRatios::new(0.64, 0.16, 0.20)).or_fail("split")?;
    let pre = PreprocessConfig::default();
    let train = preprocess_ids(dir.path(), &manifest.train_ids, &pre).or_fail("preprocess")?;
    let val = preprocess_ids(dir.path(), &manifest.val_ids, &pre).or_fail("preprocess")?;
    let model = SegModel::new(&ModelConfig::tiny(Variant::DualEncoder, 3)).or_fail("model")?;
    let cfg = TrainConfig {
        batch_size: 8,
        epochs: 20,
        freeze_epochs: 5,
        learning_rate: 1e-3,
        seed: 7,
        ..TrainConfig::default()
    };
    train_loop(&model, &train, &val, &cfg, None, &mut ()).or_fail("train")?;
    let opts = EvalOptions {
        preprocess: &pre,
        threshold: 0.5,
        model_label: model.config().label(),
        fingerprint_source: serde_json::json!({}),
        prediction_dir: None,
    };
    let report = evaluate_split(&model, &manifest, Split::Test, dir.path(), &opts).or_fail("evaluate")?;
    let t = start.elapsed();
    ensure!(t <= Duration::from_secs(15 * 60), "held-out run took {t:?}");
    ensure!(report.mean_dice >= 0.60, "held-out mean Dice {:.3}", report.mean_dice);
    Ok(format!(
        "overfit Dice {last:.3} at step {steps}; held-out mean Dice {:.3} on {} cases in {:.0}s",
        report.mean_dice,
        report.per_case.len(),
        t.as_secs_f64()
    ))
}

/// Manifest JSON, every sample file, and the metric log of one run.
fn pipeline_run(root: &Path) -> Result<(String, Vec<(String, Vec<u8>)>, String), String> {
    let data = root.join("data");
    write_dataset(&small_phantoms(8, [32, 32, 8], 11), &data).or_fail("phantoms")?;
    let ids = discover_cases(&data).or_fail("discover")?;
    let manifest = make_split(&ids, 11, SplitRatios::new(0.5, 0.25, 0.25)).or_fail("split")?;
    let manifest_path = root.join("split.json");
    write_manifest(&manifest, &manifest_path).or_fail("manifest")?;
    let samples = root.join("samples");
    let pre = PreprocessConfig::default();
    let mut files = Vec::new();
    for split in Split::ALL {
        preprocess_split(&data, &manifest, split, &pre, &samples).or_fail("preprocess")?;
        let dir = split_dir(&samples, split);
        let mut names: Vec<_> = std::fs::read_dir(&dir).or_fail("list")?.map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            let bytes = std::fs::read(dir.join(&n)).or_fail("read")?;
            files.push((format!("{}/{}", split.as_str(), n.to_string_lossy()), bytes));
        }
    }
    let (_, train) = load_split_samples(&split_dir(&samples, Split::Train)).or_fail("load")?;
    let (_, val) = load_split_samples(&split_dir(&samples, Split::Val)).or_fail("load")?;
    let model = SegModel::new(&ModelConfig {
        init_seed: 11,
        ..ModelConfig::tiny(Variant::DualEncoder, 3)
    })
    .or_fail("model")?;
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 3,
        freeze_epochs: 1,
        learning_rate: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = root.join("run");
    train_loop(&model, &train, &val, &cfg, Some(&run), &mut ()).or_fail("train")?;
    let log = std::fs::read_to_string(run.join(METRIC_LOG)).or_fail("metric log")?;
    Ok((std::fs::read_to_string(&manifest_path).or_fail("manifest")?, files, log))
}

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().or_fail("tempdir")?, tempfile::tempdir().or_fail("tempdir")?);
    let ra = pipeline_run(a.path())?;
    let rb = pipeline_run(b.path())?;
    ensure!(ra.0 == rb.0, "split manifests differ");
    ensure!(ra.1.len() == rb.1.len(), "sample file counts differ");
    for ((na, ba), (nb, bb)) in ra.1.iter().zip(&rb.1) {
        ensure!(na == nb && ba == bb, "sample file {na} differs");
    }
    ensure!(ra.2 == rb.2, "metric logs differ");
    ensure!(ra.2.lines().count() == 4, "expected 3 logged epochs");
    Ok(format!("manifest, {} sample files and 3-epoch metric log identical", ra.1.len()))
}

/// Where a pixel at (r, c) of an h×w image lands: horizontal flip, vertical
/// flip, then counter-clockwise quarter turns.
fn track(mut r: usize, mut c: usize, mut h: usize, mut w: usize, hf: bool, vf: bool, turns: u8) -> (usize, usize) {
    if hf {
        c = w - 1 - c;
    }
    if vf {
        r = h - 1 - r;
    }
    for _ in 0..turns {
        (r, c) = (w - 1 - c, r);
        (h, w) = (w, h);
    }
    (r, c)
}

fn augmentation_equivariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = AugmentConfig::default();
    let mut seen = HashSet::new();
    for k in 0..100 {
        let (h, w) = (rng.random_range(4..40), rng.random_range(4..40));
        let s = if k % 2 == 0 { 3 } else { 1 };
        let mut target = Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(0.3)));
        let (mr, mc) = (rng.random_range(0..h), rng.random_range(0..w));
        target[[mr, mc]] = 1;
        let mut dwi = Array3::from_shape_fn((h, w, s), |_| rng.random_range(0.0f32..0.5));
        for n in 0..s {
            dwi[[mr, mc, n]] = 1.0 + n as f32;
        }
        let adc = dwi.mapv(|v| -v);
        let r = SampleRecord {
            case_id: "x".into(),
            center_slice: 1,
            dwi_stack: dwi,
            adc_stack: adc,
            target,
        };
        let (aug, t) = augment_sample(&r, &cfg, &mut rng);
        seen.insert((t.hflip, t.vflip, t.quarter_turns));
        ensure!(t.invert_2d(aug.target.view()) == r.target, "sample {k}: inverse does not recover the target");
        let (er, ec) = track(mr, mc, h, w, t.hflip, t.vflip, t.quarter_turns);
        for n in 0..s {
            let dslice = aug.dwi_stack.index_axis(Axis(2), n);
            let found: Vec<_> = dslice.indexed_iter().filter(|(_, &v)| v == 1.0 + n as f32).map(|(i, _)| i).collect();
            ensure!(found == vec![(er, ec)], "sample {k}: DWI slice {n} marker at {found:?}, expected {:?}", (er, ec));
            ensure!(aug.adc_stack[[er, ec, n]] == -(1.0 + n as f32), "sample {k}: ADC slice {n} marker moved");
            ensure!(t.invert_2d(dslice) == r.dwi_stack.index_axis(Axis(2), n), "sample {k}: DWI slice {n} not invertible");
        }
        ensure!(aug.target[[er, ec]] == 1, "sample {k}: mask not set under the marker");
    }
    Ok(format!("100 samples; {} distinct transforms exercised", seen.len()))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Check); 9] = [
        (1, "metric oracle", metric_oracle),
        (2, "preprocessing conformance", preprocessing_conformance),
        (3, "architecture contracts", architecture_contracts),
        (4, "gradient correctness", gradient_correctness),
        (5, "two-stage schedule", two_stage_schedule),
        (6, "loss correctness", loss_correctness),
        (7, "end-to-end learning", end_to_end_learning),
        (8, "determinism", determinism),
        (9, "augmentation equivariance", augmentation_equivariance),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(reason) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {reason}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
