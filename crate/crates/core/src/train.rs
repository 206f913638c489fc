//! Joint multi-age training, tiled evaluation, zero-shot transfer and ablation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Batch, ConditioningMode, SegModel};
use crate::checkpoint::{Checkpoint, LogRow};
use crate::config::{AgeSampling, Config};
use crate::data::{load_slice, load_slice_mask, DatasetManifest, VolumeRecord, NUM_AGE_GROUPS};
use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::objectives::{aggregate_by_age, batch_loss, dice_score, AgeReport};
use crate::optim::{AdamW, CosineSchedule};
use crate::plane::Plane;
use crate::sampling::{
    bezier_intensity, sample_crop, tile_plan, AnnotatedPlane, CropBox, CropSample, LoadedVolume, SpatialTransform,
};

pub const METRICS_CSV: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.safetensors";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.safetensors";

/// Seed of the batch drawn at `step` (0-based) in a run seeded with `seed`.
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training volumes plus the slices held out for model selection.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub volumes: Vec<LoadedVolume>,
    pub validation: Vec<(VolumeRecord, AnnotatedPlane)>,
}

impl TrainData {
    /// Loads annotated slices and holds out `val_fraction` of them. Every
    /// volume keeps at least one training slice.
    pub fn load(manifest: &DatasetManifest, val_fraction: f64, seed: u64) -> Result<Self> {
        let mut all = Vec::new();
        for rec in &manifest.volumes {
            if rec.annotated_slices.is_empty() {
                return Err(Error::NoAnnotatedSlices(rec.volume_id.clone()));
            }
            all.push(LoadedVolume::load(rec)?);
        }
        let mut pairs: Vec<(usize, usize)> = all
            .iter()
            .enumerate()
            .flat_map(|(v, vol)| (0..vol.slices.len()).map(move |s| (v, s)))
            .collect();
        let target = (val_fraction * pairs.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7A11);
        pairs.shuffle(&mut rng);
        let mut remaining: Vec<usize> = all.iter().map(|v| v.slices.len()).collect();
        let mut held: Vec<(usize, usize)> = Vec::new();
        for (v, s) in pairs {
            if held.len() == target {
                break;
            }
            if remaining[v] > 1 {
                remaining[v] -= 1;
                held.push((v, s));
            }
        }
        held.sort_unstable();
        let mut validation = Vec::with_capacity(held.len());
        let mut volumes = Vec::with_capacity(all.len());
        for (v, vol) in all.into_iter().enumerate() {
            let mut keep = Vec::new();
            for (s, plane) in vol.slices.into_iter().enumerate() {
                if held.binary_search(&(v, s)).is_ok() {
                    validation.push((vol.record.clone(), plane));
                } else {
                    keep.push(plane);
                }
            }
            volumes.push(LoadedVolume {
                record: vol.record,
                slices: keep,
            });
        }
        Ok(Self { volumes, validation })
    }

    fn ages(&self) -> Vec<usize> {
        let mut a: Vec<usize> = self.volumes.iter().map(|v| v.record.age_index).collect();
        a.sort_unstable();
        a.dedup();
        a
    }
}

/// Crop size usable by `model` on slices of `(height, width)`: `requested`
/// clamped to the slice and rounded down to the model's size multiple.
pub fn effective_crop(model: &SegModel, requested: usize, height: usize, width: usize) -> Result<usize> {
    let m = model.spec().size_multiple();
    let c = requested.min(height).min(width) / m * m;
    if c == 0 {
        return Err(Error::CropTooLarge {
            crop: (m, m),
            slice: (height, width),
        });
    }
    Ok(c)
}

fn masks_tensor(samples: &[CropSample], model: &SegModel) -> Result<Tensor> {
    let (h, w) = samples[0].image.shape();
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        let m = s.mask.as_ref().ok_or_else(|| Error::Shape("training crop without a mask".into()))?;
        data.extend(m.data().iter().map(|&v| v as f64));
    }
    Ok(Tensor::from_vec(data, (samples.len(), h, w), &Device::Cpu)?.to_dtype(model.dtype())?)
}

/// Draws the batch for one step. Pure function of `(cfg, data, seed)`.
pub fn draw_batch(cfg: &Config, data: &TrainData, crop: usize, seed: u64) -> Result<Vec<CropSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ages = data.ages();
    let jitter = cfg.jitter_config();
    let mut out = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let vol = match cfg.age_sampling {
            AgeSampling::UniformVolume => &data.volumes[rng.random_range(0..data.volumes.len())],
            AgeSampling::UniformAge => {
                let age = ages[rng.random_range(0..ages.len())];
                let pool: Vec<&LoadedVolume> = data.volumes.iter().filter(|v| v.record.age_index == age).collect();
                pool[rng.random_range(0..pool.len())]
            }
        };
        let mut s = sample_crop(vol, (crop, crop), jitter.as_ref(), &mut rng)?;
        if rng.random_bool(cfg.intensity_aug_prob) {
            s.image = bezier_intensity(&s.image, &mut rng);
        }
        if cfg.spatial_aug {
            s = SpatialTransform::random(&mut rng, true).apply_sample(&s);
        }
        out.push(s);
    }
    Ok(out)
}

/// Owns the model and optimizer for one training run.
pub struct Trainer {
    cfg: Config,
    model: SegModel,
    opt: AdamW,
    data: TrainData,
    crop: usize,
    schedule: CosineSchedule,
    step: usize,
    log: Vec<LogRow>,
    best: Option<(f64, BTreeMap<String, Tensor>)>,
}

impl Trainer {
    /// `model` must have been built from `cfg` (same backbone and conditioning settings).
    pub fn new(cfg: &Config, model: SegModel, data: TrainData) -> Result<Self> {
        if model.spec() != &cfg.backbone() {
            return Err(Error::Config("model backbone does not match the config".into()));
        }
        if data.volumes.is_empty() {
            return Err(Error::NoAnnotatedSlices("empty training manifest".into()));
        }
        let dims = data.volumes[0].record.dims;
        let crop = effective_crop(&model, cfg.crop_size, dims.height, dims.width)?;
        let opt = AdamW::new(cfg.adamw(), model.store())?;
        let mut cfg = cfg.clone();
        cfg.conditioning = model.mode();
        Ok(Self {
            schedule: CosineSchedule::new(cfg.lr, cfg.total_steps()),
            cfg,
            model,
            opt,
            data,
            crop,
            step: 0,
            log: Vec::new(),
            best: None,
        })
    }

    /// Continues a run from a checkpoint that carries optimizer state.
    pub fn resume(ckpt: &Checkpoint, data: TrainData) -> Result<Self> {
        let model = ckpt.build_model()?;
        let mut t = Self::new(&ckpt.config, model, data)?;
        t.opt = ckpt
            .restore_optimizer()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        t.step = ckpt.step;
        t.log = ckpt.log.clone();
        // the best weights themselves live in their own file; keep the score
        t.best = ckpt.best_val.map(|b| (b, BTreeMap::new()));
        Ok(t)
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn into_model(self) -> SegModel {
        self.model
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    /// Runs one optimizer step and returns the logged row.
    pub fn step_once(&mut self) -> Result<LogRow> {
        let seed = batch_seed(self.cfg.seed, self.step);
        let samples = draw_batch(&self.cfg, &self.data, self.crop, seed)?;
        let batch = Batch::from_samples(&samples, self.model.dtype(), self.model.device())?;
        let masks = masks_tensor(&samples, &self.model)?;
        let mut fwd = Forward::train(seed.rotate_left(17));
        let logits = self.model.forward(&batch, &mut fwd)?;
        let loss = batch_loss(&logits, &masks, &self.cfg.loss())?;
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NaNLoss {
                step: self.step,
                batch_seed: seed,
            });
        }
        let grads = loss.backward()?;
        let lr = self.schedule.lr_at(self.step);
        self.opt.step(self.model.store(), &grads, lr)?;
        self.step += 1;

        let validate = !self.data.validation.is_empty()
            && ((self.cfg.val_every > 0 && self.step % self.cfg.val_every == 0) || self.is_done());
        let dice_val = if validate { Some(self.validation_dice()?) } else { None };
        if let Some(d) = dice_val {
            if self.best.as_ref().is_none_or(|(b, _)| d > *b) {
                self.best = Some((d, self.model.store().snapshot()?));
            }
        }
        let row = LogRow {
            step: self.step,
            lr,
            loss: value,
            dice_val,
        };
        self.log.push(row);
        Ok(row)
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step_once()?;
        }
        Ok(())
    }

    /// Runs until `steps` total steps have been taken (or the run ends).
    pub fn run_until(&mut self, steps: usize) -> Result<()> {
        while self.step < steps && !self.is_done() {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            crop: self.crop,
            overlap: self.cfg.tile_overlap,
            batch_size: self.cfg.batch_size,
        }
    }

    /// Mean Dice over the held-out slices.
    pub fn validation_dice(&self) -> Result<f64> {
        let opts = self.eval_options();
        let mut total = 0.0;
        for (rec, plane) in &self.data.validation {
            let pred = predict_slice(&self.model, rec, plane.z, &plane.image, &opts, &mut |_| {})?;
            total += dice_score(pred.data(), plane.mask.data())?;
        }
        Ok(total / self.data.validation.len() as f64)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(self.cfg.clone(), &self.model, self.step)?.with_optimizer(&self.opt)?;
        c.log = self.log.clone();
        c.best_val = self.best.as_ref().map(|(b, _)| *b);
        Ok(c)
    }

    /// Parameters at the best validation score, if any were recorded in this process.
    pub fn best_checkpoint(&self) -> Result<Option<Checkpoint>> {
        match &self.best {
            Some((score, params)) if !params.is_empty() => {
                let mut c = Checkpoint::new(self.cfg.clone(), &self.model, self.step)?;
                c.params = params.clone();
                c.best_val = Some(*score);
                c.log = self.log.clone();
                Ok(Some(c))
            }
            _ => Ok(None),
        }
    }

    /// Writes the metric log and the final and best checkpoints into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_metric_log(&self.log, &dir.join(METRICS_CSV))?;
        self.checkpoint()?.save(&dir.join(FINAL_CHECKPOINT))?;
        if let Some(best) = self.best_checkpoint()? {
            best.save(&dir.join(BEST_CHECKPOINT))?;
        }
        Ok(())
    }
}

pub fn write_metric_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut s = String::from("step,lr,loss,dice_val\n");
    for r in rows {
        let d = r.dice_val.map(|d| format!("{d:.9}")).unwrap_or_default();
        s.push_str(&format!("{},{:.9e},{:.9},{}\n", r.step, r.lr, r.loss, d));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Trains `model` on the annotated slices of `manifest`.
pub fn train(manifest: &DatasetManifest, model: SegModel, cfg: &Config) -> Result<Trainer> {
    let data = TrainData::load(manifest, cfg.val_fraction, cfg.seed)?;
    let mut t = Trainer::new(cfg, model, data)?;
    t.run()?;
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub crop: usize,
    pub overlap: f64,
    pub batch_size: usize,
}

/// Tiled prediction of one slice. Tiles carry their exact relative centers;
/// overlapping logits are averaged before thresholding. `observer` sees every
/// batch handed to the model.
pub fn predict_slice(
    model: &SegModel,
    record: &VolumeRecord,
    z: usize,
    image: &Plane<f32>,
    opts: &EvalOptions,
    observer: &mut dyn FnMut(&Batch),
) -> Result<Plane<u8>> {
    let dims = record.dims;
    let (h, w) = (dims.height, dims.width);
    let boxes = tile_plan(dims, z, (opts.crop, opts.crop), opts.overlap)?;
    let mut sum = vec![[0.0f64; 2]; h * w];
    let mut count = vec![0u32; h * w];
    for chunk in boxes.chunks(opts.batch_size.max(1)) {
        let batch = Batch::from_tiles(image, chunk, record.age_index, dims, model.dtype(), model.device())?;
        observer(&batch);
        let logits = model.forward(&batch, &mut Forward::eval())?;
        let logits = logits.to_dtype(candle_core::DType::F64)?;
        for (i, b) in chunk.iter().enumerate() {
            let tile: Vec<Vec<Vec<f64>>> = logits.get(i)?.to_vec3()?;
            accumulate(&mut sum, &mut count, w, b, &tile);
        }
    }
    Ok(Plane::from_fn(h, w, |r, c| {
        let [a, b] = sum[r * w + c];
        // averaging both classes by the same count keeps the comparison unchanged
        u8::from(b > a && count[r * w + c] > 0)
    }))
}

fn accumulate(sum: &mut [[f64; 2]], count: &mut [u32], width: usize, b: &CropBox, tile: &[Vec<Vec<f64>>]) {
    for r in 0..b.height() {
        for c in 0..b.width() {
            let idx = (b.top + r) * width + b.left + c;
            sum[idx][0] += tile[0][r][c];
            sum[idx][1] += tile[1][r][c];
            count[idx] += 1;
        }
    }
}

/// Dice of one evaluated slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceScore {
    pub volume_id: String,
    pub cohort: String,
    pub age: usize,
    pub z: usize,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub slices: Vec<SliceScore>,
    pub by_age: AgeReport,
}

/// Per-age Dice over every annotated slice of `manifest`.
pub fn evaluate(manifest: &DatasetManifest, model: &SegModel, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_observed(manifest, model, opts, &mut |_| {})
}

pub fn evaluate_observed(
    manifest: &DatasetManifest,
    model: &SegModel,
    opts: &EvalOptions,
    observer: &mut dyn FnMut(&Batch),
) -> Result<EvalReport> {
    let slices = score_slices(manifest, model, opts, observer)?;
    let pairs: Vec<(usize, f64)> = slices.iter().map(|s| (s.age, s.dice)).collect();
    let by_age = aggregate_by_age(&pairs, NUM_AGE_GROUPS)?;
    Ok(EvalReport { slices, by_age })
}

fn score_slices(
    manifest: &DatasetManifest,
    model: &SegModel,
    opts: &EvalOptions,
    observer: &mut dyn FnMut(&Batch),
) -> Result<Vec<SliceScore>> {
    let mut out = Vec::new();
    for rec in &manifest.volumes {
        for a in &rec.annotated_slices {
            let image = load_slice(rec, a.z)?;
            let truth = load_slice_mask(rec, a.z)?;
            let pred = predict_slice(model, rec, a.z, &image, opts, observer)?;
            out.push(SliceScore {
                volume_id: rec.volume_id.clone(),
                cohort: rec.cohort_tag.clone(),
                age: rec.age_index,
                z: a.z,
                dice: dice_score(pred.data(), truth.data())?,
            });
        }
    }
    Ok(out)
}

/// Mean Dice keyed by `(cohort, age)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotReport {
    pub cells: BTreeMap<(String, usize), f64>,
}

impl ZeroShotReport {
    /// Unweighted mean over all `(cohort, age)` cells.
    pub fn avg(&self) -> f64 {
        self.cells.values().sum::<f64>() / self.cells.len().max(1) as f64
    }
}

/// Evaluates a trained checkpoint on unseen cohorts without touching its parameters.
pub fn zero_shot_eval(ckpt: &Checkpoint, unseen: &DatasetManifest, opts: &EvalOptions) -> Result<ZeroShotReport> {
    let model = ckpt.build_model()?;
    zero_shot_with_model(&model, ckpt.config.num_ages, unseen, opts)
}

pub fn zero_shot_with_model(
    model: &SegModel,
    num_ages: usize,
    unseen: &DatasetManifest,
    opts: &EvalOptions,
) -> Result<ZeroShotReport> {
    let num_ages = model.num_ages().unwrap_or(num_ages);
    if let Some(r) = unseen.volumes.iter().find(|r| r.age_index >= num_ages) {
        return Err(Error::UnknownAge {
            age: r.age_index,
            num_ages,
        });
    }
    let slices = score_slices(unseen, model, opts, &mut |_| {})?;
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for s in slices {
        let e = acc.entry((s.cohort, s.age)).or_default();
        e.0 += s.dice;
        e.1 += 1;
    }
    Ok(ZeroShotReport {
        cells: acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    })
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: ConditioningMode,
    pub params: usize,
    pub report: AgeReport,
}

/// Trains and evaluates one model per mode with the config's shared seed.
/// With `out_dir`, each run's artifacts land in `out_dir/<mode>/`.
pub fn ablate(
    train_manifest: &DatasetManifest,
    test_manifest: &DatasetManifest,
    modes: &[ConditioningMode],
    cfg: &Config,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let data = TrainData::load(train_manifest, cfg.val_fraction, cfg.seed)?;
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let model = cfg.model_with_mode(mode).build()?;
        let mut t = Trainer::new(cfg, model, data.clone())?;
        t.run()?;
        if let Some(dir) = out_dir {
            t.save(&mode_dir(dir, mode))?;
        }
        let opts = t.eval_options();
        let report = evaluate(test_manifest, t.model(), &opts)?;
        rows.push(AblationRow {
            mode,
            params: t.model().num_params(),
            report: report.by_age,
        });
    }
    Ok(rows)
}

/// Directory name for a mode's artifacts (`+` is kept out of paths).
pub fn mode_dir(root: &Path, mode: ConditioningMode) -> PathBuf {
    root.join(mode.as_str().replace('+', "_"))
}
