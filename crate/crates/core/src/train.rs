//! Query sampling, augmentation, the loss, and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::read_bundle;
use crate::config::{ModelConfig, RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    build_gt_cloud, label_queries, normalization_of, random_rotation, unproject_map, Mat3,
    NormalizationTransform, PointCloud, QueryBatch, RgbdFrame, Vec3,
};
use crate::model::{Builder, DecoderOutput, Mcc, ModelInput};
use crate::nn::{
    adam_step, cosine_lr, read_checkpoint, write_checkpoint, AdamConfig, AdamState, Checkpoint,
    Graph, Real, Tensor, Var,
};
use crate::infer::worker_count;
use crate::synthdata::SceneMode;

/// Uniform queries in the mode's box: `[-r, r]³` for objects, `[-r, r]² × (0, r]` for scenes.
pub fn sample_queries<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    mode: SceneMode,
    config: &ModelConfig,
) -> Vec<Vec3> {
    match mode {
        SceneMode::Object => {
            let r = config.object_range;
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-r..=r),
                        rng.random_range(-r..=r),
                        rng.random_range(-r..=r),
                    )
                })
                .collect()
        }
        SceneMode::Scene => {
            let r = config.scene_range;
            (0..n)
                .map(|_| {
                    let x = rng.random_range(-r..=r);
                    let y = rng.random_range(-r..=r);
                    let z = r * (1.0 - rng.random::<f64>());
                    Vec3::new(x, y, z)
                })
                .collect()
        }
    }
}

/// One frame in model coordinates with its normalized ground truth.
#[derive(Debug, Clone)]
pub struct PreparedView {
    pub input: ModelInput,
    pub gt: PointCloud,
    /// Maps the frame's reference coordinates into model coordinates.
    pub norm: NormalizationTransform,
    /// Reference coordinates are world (object mode) or the input camera (scene mode).
    pub camera_frame: bool,
}

/// Normalizes frame `index` of a scene together with the scene's ground truth.
///
/// Object mode works in world coordinates normalized by the full ground-truth
/// cloud. Scene mode works in the input camera's frame, keeping the camera at
/// the origin and dividing by the ground truth's spread.
pub fn prepare_view(
    frames: &[RgbdFrame],
    gt_world: &PointCloud,
    index: usize,
    mode: SceneMode,
) -> Result<PreparedView> {
    let frame = frames.get(index).ok_or_else(|| {
        Error::invalid(format!("frame {index} out of range ({} frames)", frames.len()))
    })?;
    let camera_frame = mode == SceneMode::Scene;
    let gt_ref = if camera_frame {
        gt_world.transformed(|p| frame.pose.apply_inverse(p))
    } else {
        gt_world.clone()
    };
    let mut norm = normalization_of(&gt_ref.positions)?;
    if camera_frame {
        norm.centroid = Vec3::zeros();
    }
    let (points, valid) = unproject_map(frame, !camera_frame)?;
    let points = points
        .iter()
        .zip(&valid)
        .map(|(p, &ok)| if ok { norm.apply(p) } else { Vec3::zeros() })
        .collect();
    Ok(PreparedView {
        input: ModelInput {
            image: frame.image.clone(),
            points,
            valid,
        },
        gt: gt_ref.transformed(|p| norm.apply(p)),
        norm,
        camera_frame,
    })
}

/// Spatially rescales square per-pixel maps about the image center.
///
/// Colors are bilinear (black outside the source); points and validity use the
/// nearest source pixel (invalid outside).
pub fn rescale_input(input: &ModelInput, size: usize, s: f64) -> ModelInput {
    let c = (size as f64 - 1.0) / 2.0;
    let n = size * size;
    let mut out = ModelInput {
        image: vec![[0.0; 3]; n],
        points: vec![Vec3::zeros(); n],
        valid: vec![false; n],
    };
    let last = size as f64 - 1.0;
    for v in 0..size {
        let y = c + (v as f64 - c) / s;
        for u in 0..size {
            let x = c + (u as f64 - c) / s;
            let i = v * size + u;
            let (xn, yn) = ((x + 0.5).floor(), (y + 0.5).floor());
            if (0.0..=last).contains(&xn) && (0.0..=last).contains(&yn) {
                let j = yn as usize * size + xn as usize;
                if input.valid[j] {
                    out.points[i] = input.points[j];
                    out.valid[i] = true;
                }
            }
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let mut acc = [0.0; 3];
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let (sx, sy) = (x0 + dx, y0 + dy);
                    let w = wx * wy;
                    if w == 0.0 || !(0.0..=last).contains(&sx) || !(0.0..=last).contains(&sy) {
                        continue;
                    }
                    let px = input.image[sy as usize * size + sx as usize];
                    for k in 0..3 {
                        acc[k] += w * px[k];
                    }
                }
            }
            out.image[i] = acc.map(|a| a.clamp(0.0, 1.0));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub input: ModelInput,
    pub gt: PointCloud,
    pub rotation: Mat3,
    pub scale: f64,
}

/// Random spatial rescale of the input maps and a joint rotation of seen points and ground truth.
pub fn augment<R: Rng + ?Sized>(
    view: &PreparedView,
    rng: &mut R,
    train: &TrainConfig,
    model: &ModelConfig,
) -> Result<Augmented> {
    view.input.validate(model)?;
    let s = if train.scale_aug_max > train.scale_aug_min {
        rng.random_range(train.scale_aug_min..=train.scale_aug_max)
    } else {
        train.scale_aug_min
    };
    let rotation = if train.rotation_aug && train.mode == SceneMode::Object {
        let r = train.rotation_range;
        random_rotation(rng, [(-r, r); 3])
    } else {
        Mat3::identity()
    };
    Ok(apply_augmentation(view, model, s, rotation))
}

pub fn apply_augmentation(
    view: &PreparedView,
    model: &ModelConfig,
    scale: f64,
    rotation: Mat3,
) -> Augmented {
    let mut input = rescale_input(&view.input, model.image_size, scale);
    let identity = rotation == Mat3::identity();
    if !identity {
        for (p, &ok) in input.points.iter_mut().zip(&input.valid) {
            if ok {
                *p = rotation * *p;
            }
        }
    }
    let gt = if identity {
        view.gt.clone()
    } else {
        view.gt.transformed(|p| rotation * p)
    };
    Augmented {
        input,
        gt,
        rotation,
        scale,
    }
}

/// Model input, queries and their labels for one optimization example.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: ModelInput,
    pub labels: QueryBatch,
}

pub fn make_sample<R: Rng + ?Sized>(
    view: &PreparedView,
    rng: &mut R,
    run: &RunConfig,
) -> Result<TrainSample> {
    let aug = augment(view, rng, &run.train, &run.model)?;
    let queries = sample_queries(rng, run.model.n_queries, run.train.mode, &run.model);
    let labels = label_queries(&queries, &aug.gt, run.model.tau)?;
    Ok(TrainSample {
        input: aug.input,
        labels,
    })
}

/// Loss value and its two components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub occupancy: f64,
    pub color: f64,
}

/// `BCE(occupancy) + λ · CE(color over occupied queries)` as graph nodes.
pub fn loss_graph<T: Real>(
    g: &mut Graph<T>,
    occ: Var,
    color: Var,
    labels: &QueryBatch,
    color_weight: f64,
) -> Result<(Var, Var, Option<Var>)> {
    let occ_loss = g.bce_with_logits(occ, &labels.occupied)?;
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for (i, (&o, bins)) in labels.occupied.iter().zip(&labels.color_bins).enumerate() {
        if o {
            for (ch, &b) in bins.iter().enumerate() {
                rows.push(3 * i + ch);
                classes.push(b as usize);
            }
        }
    }
    if rows.is_empty() {
        return Ok((occ_loss, occ_loss, None));
    }
    let picked = g.gather_rows(color, &rows)?;
    let color_loss = g.cross_entropy(picked, &classes)?;
    let total = g.weighted_sum(&[(occ_loss, T::one()), (color_loss, T::c(color_weight))])?;
    Ok((total, occ_loss, Some(color_loss)))
}

/// Loss of a finished decoder output against labels.
pub fn compute_loss<T: Real>(
    pred: &DecoderOutput<T>,
    labels: &QueryBatch,
    color_weight: f64,
) -> Result<LossParts> {
    let n = pred.len();
    if labels.len() != n || pred.color_logits.len() != n * 3 * 256 {
        return Err(Error::shape("compute_loss", &[n], &[labels.len()]));
    }
    let mut g = Graph::<T>::new();
    let occ = g.input(Tensor::new(&[n], pred.occupancy_logits.clone())?);
    let col = g.input(Tensor::new(&[n * 3, 256], pred.color_logits.clone())?);
    let (t, o, c) = loss_graph(&mut g, occ, col, labels, color_weight)?;
    Ok(LossParts {
        total: g.value(t).item().f64(),
        occupancy: g.value(o).item().f64(),
        color: c.map_or(0.0, |c| g.value(c).item().f64()),
    })
}

/// Forward and backward for one example; returns parameter gradients.
pub fn sample_gradients<T: Real>(
    model: &Mcc<T>,
    sample: &TrainSample,
    color_weight: f64,
) -> Result<(LossParts, Vec<Tensor<T>>)> {
    let mut g = Graph::<T>::new();
    let mut b = Builder::new(&mut g, &model.params);
    let r = b.encode(&model.config, &sample.input)?;
    let (occ, col) = b.decode(&model.config, r, &sample.labels.points)?;
    let (total, o, c) = loss_graph(&mut g, occ, col, &sample.labels, color_weight)?;
    let parts = LossParts {
        total: g.value(total).item().f64(),
        occupancy: g.value(o).item().f64(),
        color: c.map_or(0.0, |c| g.value(c).item().f64()),
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is {} (occupancy {}, color {})",
            parts.total, parts.occupancy, parts.color
        )));
    }
    let grads = g.backward(total)?.params(&g, &model.params);
    Ok((parts, grads))
}

/// Evaluates the loss without updating anything.
pub fn evaluate_loss<T: Real>(model: &Mcc<T>, batch: &[TrainSample], color_weight: f64) -> Result<LossParts> {
    let mut acc = LossParts {
        total: 0.0,
        occupancy: 0.0,
        color: 0.0,
    };
    for s in batch {
        let mut g = Graph::<T>::new();
        let mut b = Builder::new(&mut g, &model.params);
        let r = b.encode(&model.config, &s.input)?;
        let (occ, col) = b.decode(&model.config, r, &s.labels.points)?;
        let (t, o, c) = loss_graph(&mut g, occ, col, &s.labels, color_weight)?;
        acc.total += g.value(t).item().f64();
        acc.occupancy += g.value(o).item().f64();
        acc.color += c.map_or(0.0, |c| g.value(c).item().f64());
    }
    let k = batch.len() as f64;
    Ok(LossParts {
        total: acc.total / k,
        occupancy: acc.occupancy / k,
        color: acc.color / k,
    })
}

/// Per-example gradients in batch order, computed on up to `threads` workers.
pub fn batch_gradients<T: Real>(
    model: &Mcc<T>,
    batch: &[TrainSample],
    color_weight: f64,
    threads: usize,
) -> Result<Vec<(LossParts, Vec<Tensor<T>>)>> {
    let threads = threads.clamp(1, batch.len().max(1));
    if threads == 1 {
        return batch.iter().map(|s| sample_gradients(model, s, color_weight)).collect();
    }
    let per = batch.len().div_ceil(threads);
    let chunks: Vec<Result<Vec<_>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(per)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|s| sample_gradients(model, s, color_weight))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(batch.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub loss: LossParts,
}

/// One Adam update on the batch-mean loss at `cosine_lr(step)`.
pub fn train_step<T: Real>(
    model: &mut Mcc<T>,
    state: &mut AdamState<T>,
    batch: &[TrainSample],
    step: u64,
    train: &TrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let per_sample = batch_gradients(model, batch, train.color_weight, worker_count())?;
    let mut sum: Option<Vec<Tensor<T>>> = None;
    let mut loss = LossParts {
        total: 0.0,
        occupancy: 0.0,
        color: 0.0,
    };
    for (parts, grads) in per_sample {
        loss.total += parts.total;
        loss.occupancy += parts.occupancy;
        loss.color += parts.color;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += *y;
                    }
                }
            }
        }
    }
    let mut grads = sum.unwrap();
    let k = batch.len() as f64;
    if batch.len() > 1 {
        let inv = T::c(1.0 / k);
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
    }
    let lr = cosine_lr(step, train.total_steps, train.warmup_frac, train.lr);
    adam_step(&mut model.params, &grads, state, lr, &AdamConfig::default())?;
    Ok(StepStats {
        lr,
        loss: LossParts {
            total: loss.total / k,
            occupancy: loss.occupancy / k,
            color: loss.color / k,
        },
    })
}

/// Frames of one scene plus their ground-truth union.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub frames: Vec<RgbdFrame>,
    pub gt: PointCloud,
}

impl SceneData {
    pub fn new(frames: Vec<RgbdFrame>) -> Result<Self> {
        let gt = build_gt_cloud(&frames)?;
        Ok(Self { frames, gt })
    }
}

/// Datasets up to this many scenes are kept in memory by [`Dataset::open`].
pub const MEMORY_SCENES: usize = 16;

/// Training scenes, held in memory or read from bundle directories on demand.
#[derive(Debug, Clone)]
pub enum Dataset {
    Memory(Vec<SceneData>),
    Disk(Vec<PathBuf>),
}

impl Dataset {
    /// A single bundle directory, or a directory whose subdirectories are bundles.
    ///
    /// Every bundle is read once up front so bad data fails before training.
    pub fn open(dir: &Path) -> Result<Self> {
        let dirs = if dir.join("scene.txt").exists() {
            vec![dir.to_path_buf()]
        } else {
            let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            let mut dirs = Vec::new();
            for e in entries {
                let p = e.map_err(|e| Error::io(dir, e))?.path();
                if p.join("scene.txt").exists() {
                    dirs.push(p);
                }
            }
            dirs.sort();
            dirs
        };
        if dirs.is_empty() {
            return Err(Error::parse(dir, "bundles", "no scene bundles found"));
        }
        let mut scenes = Vec::new();
        for d in &dirs {
            let (frames, _) = read_bundle(d)?;
            if dirs.len() <= MEMORY_SCENES {
                scenes.push(SceneData::new(frames)?);
            }
        }
        if dirs.len() <= MEMORY_SCENES {
            Ok(Dataset::Memory(scenes))
        } else {
            Ok(Dataset::Disk(dirs))
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Memory(v) => v.len(),
            Dataset::Disk(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scene(&self, i: usize) -> Result<std::borrow::Cow<'_, SceneData>> {
        match self {
            Dataset::Memory(v) => Ok(std::borrow::Cow::Borrowed(&v[i])),
            Dataset::Disk(v) => {
                let (frames, _) = read_bundle(&v[i])?;
                Ok(std::borrow::Cow::Owned(SceneData::new(frames)?))
            }
        }
    }
}

/// Random stream for step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// The batch drawn at `step`: for each example pick a scene and an input frame,
/// then augment, sample queries and label.
pub fn draw_batch(data: &Dataset, run: &RunConfig, step: u64) -> Result<Vec<TrainSample>> {
    let mut rng = step_rng(run.train.seed, step);
    let mut batch = Vec::with_capacity(run.train.batch_size);
    for _ in 0..run.train.batch_size {
        let si = rng.random_range(0..data.len());
        let scene = data.scene(si)?;
        let fi = rng.random_range(0..scene.frames.len());
        let view = prepare_view(&scene.frames, &scene.gt, fi, run.train.mode)?;
        batch.push(make_sample(&view, &mut rng, run)?);
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: LossParts,
}

pub const LOG_HEADER: &str = "step,lr,loss,occ_loss,color_loss";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.lr, self.loss.total, self.loss.occupancy, self.loss.color
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoint: PathBuf,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this many steps are complete.
    pub stop_after: Option<u64>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub model: Mcc<f32>,
    pub steps_done: u64,
    pub log: Vec<LogRow>,
}

pub fn checkpoint_of(model: &Mcc<f32>, state: &AdamState<f32>, run: &RunConfig) -> Checkpoint {
    Checkpoint {
        params: model.params.clone(),
        step: state.step,
        optimizer: Some(state.clone()),
        config: Some(run.to_text()),
    }
}

/// Rebuilds a model from a checkpoint, checking its stored configuration against `expected`.
pub fn model_from_checkpoint(
    ckpt: &Checkpoint,
    expected: Option<&ModelConfig>,
) -> Result<Mcc<f32>> {
    let stored = ckpt
        .config
        .as_deref()
        .map(|t| RunConfig::parse(t, Path::new("<checkpoint>")))
        .transpose()?;
    let config = match (stored, expected) {
        (Some(s), Some(e)) => {
            let d = s.model.diff(e);
            if !d.is_empty() {
                return Err(Error::ConfigMismatch(d));
            }
            s.model
        }
        (Some(s), None) => s.model,
        (None, Some(e)) => e.clone(),
        (None, None) => {
            return Err(Error::invalid("checkpoint carries no configuration"));
        }
    };
    Mcc::from_params(config, ckpt.params.clone())
}

/// Runs (or resumes) training, logging every `log_interval` steps and checkpointing
/// every `checkpoint_interval` steps and at the end.
pub fn train_loop(data: &Dataset, run: &RunConfig, opts: &TrainOptions) -> Result<TrainReport> {
    run.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let (mut model, mut state) = match &opts.resume {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            let model = model_from_checkpoint(&ckpt, Some(&run.model))?;
            let state = ckpt
                .optimizer
                .ok_or_else(|| Error::parse(path, "optimizer", "checkpoint has no optimizer state"))?;
            (model, state)
        }
        None => {
            let model = Mcc::<f64>::init(run.model.clone(), run.train.seed)?.cast::<f32>();
            let state = AdamState::new(&model.params);
            (model, state)
        }
    };
    let mut log_file = match &opts.log {
        Some(p) => {
            let fresh = opts.resume.is_none() || !p.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            if fresh {
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
            }
            Some((f, p.clone()))
        }
        None => None,
    };
    let end = opts
        .stop_after
        .unwrap_or(run.train.total_steps)
        .min(run.train.total_steps);
    let mut log = Vec::new();
    while state.step < end {
        let step = state.step;
        let batch = draw_batch(data, run, step)?;
        let stats = train_step(&mut model, &mut state, &batch, step, &run.train)?;
        let done = step + 1;
        if done % run.train.log_interval == 0 {
            let row = LogRow {
                step: done,
                lr: stats.lr,
                loss: stats.loss,
            };
            if let Some((f, p)) = &mut log_file {
                writeln!(f, "{}", row.csv()).map_err(|e| Error::io(p.as_path(), e))?;
            }
            log::info!("step {done}: loss {:.5} lr {:.3e}", stats.loss.total, stats.lr);
            log.push(row);
        }
        let ci = run.train.checkpoint_interval;
        if ci > 0 && done % ci == 0 && done < end {
            write_checkpoint(&opts.checkpoint, &checkpoint_of(&model, &state, run))?;
        }
    }
    write_checkpoint(&opts.checkpoint, &checkpoint_of(&model, &state, run))?;
    Ok(TrainReport {
        steps_done: state.step,
        model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_boxes() {
        let c = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = sample_queries(&mut rng, 5000, SceneMode::Object, &c);
        assert!(q.iter().all(|p| p.iter().all(|v| v.abs() <= 3.0)));
        let q = sample_queries(&mut rng, 5000, SceneMode::Scene, &c);
        assert!(q.iter().all(|p| p.z > 0.0 && p.z <= 6.0 && p.x.abs() <= 6.0));
        let a = sample_queries(&mut ChaCha8Rng::seed_from_u64(3), 10, SceneMode::Object, &c);
        let b = sample_queries(&mut ChaCha8Rng::seed_from_u64(3), 10, SceneMode::Object, &c);
        assert_eq!(a, b);
    }

    #[test]
    fn step_streams_differ() {
        let a: u64 = step_rng(5, 0).random();
        let b: u64 = step_rng(5, 1).random();
        let c: u64 = step_rng(5, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
