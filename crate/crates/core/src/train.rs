//! Two-phase training.
//!
//! Phase 1 fits the background network on random patches, regressing
//! `f − BCNN(f)` onto the median background. Phase 2 freezes it and fits the
//! residual processing module and segmentation network on full frames
//! against the ground-truth masks.
//!
//! Every random draw comes from a generator seeded by `(seed, stream,
//! update index)`, so a run is fully determined by its seed, configuration
//! and data, independent of the rayon thread count.

use std::fs::OpenOptions;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{extract_training_patches, split_train_val, write_split, FrameSequence, PatchBatch, Split};
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph, NodeId};
use crate::loss::{self, Reduction};
use crate::model::{save_checkpoint, Mcrcnn, Phase, Stage, TrainingMeta};
use crate::ops::Mode;
use crate::optim::{adam_step, AdamState, PlateauConfig, PlateauSchedule};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const STREAM_SPLIT: u64 = 1;
const STREAM_BCNN: u64 = 2;
const STREAM_SCNN: u64 = 3;
const STREAM_VALIDATION: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub updates_per_epoch: usize,
    pub bcnn_batch_size: usize,
    /// Full frames per phase-2 update. Only 1 is supported: min-max
    /// normalization spans the whole batch, which would couple frames.
    pub scnn_batch_size: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    pub plateau: PlateauConfig,
    /// Epochs without a new best validation loss before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub train_fraction: f64,
    /// The median background uses the first this-many frames.
    pub background_frames: usize,
    /// Phase-1 validation patches, drawn once from the held-out frames.
    pub val_patches: usize,
    /// Frame indices eligible for training and validation; empty means all.
    pub frames: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            updates_per_epoch: 500,
            bcnn_batch_size: 128,
            scnn_batch_size: 1,
            patch_size: 40,
            learning_rate: 1e-3,
            plateau: PlateauConfig::default(),
            early_stop_patience: 15,
            seed: 0,
            train_fraction: 0.8,
            background_frames: 100,
            val_patches: 256,
            frames: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("max_epochs", self.max_epochs),
            ("updates_per_epoch", self.updates_per_epoch),
            ("bcnn_batch_size", self.bcnn_batch_size),
            ("patch_size", self.patch_size),
            ("early_stop_patience", self.early_stop_patience),
            ("background_frames", self.background_frames),
            ("val_patches", self.val_patches),
        ] {
            if v == 0 {
                return fail(format!("train.{name} must be >= 1"));
            }
        }
        if self.scnn_batch_size != 1 {
            return fail(format!("train.scnn_batch_size must be 1, got {}", self.scnn_batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("train.learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train.train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        self.plateau.validate()
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_loss.to_bits() == other.val_loss.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
    }
}

pub const RUN_LOG: &str = "run.log";

fn append_run_log(path: &Path, record: &EpochRecord) -> Result<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(record)
        .and_then(|_| w.flush().map_err(Into::into))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_run_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Seeded train/validation split of the configured frames of a sequence
/// with `frame_count` frames. Both lists are returned sorted.
pub fn frame_split(frame_count: usize, cfg: &TrainConfig) -> Result<Split> {
    let items: Vec<usize> = if cfg.frames.is_empty() {
        (0..frame_count).collect()
    } else {
        cfg.frames.clone()
    };
    if let Some(&i) = items.iter().find(|&&i| i >= frame_count) {
        return Err(Error::Config(format!("train.frames lists frame {i}, sequence has {frame_count}")));
    }
    let (mut train, mut val) = split_train_val(&items, cfg.train_fraction, &mut Rng::derived(cfg.seed, STREAM_SPLIT))?;
    train.sort_unstable();
    val.sort_unstable();
    Ok(Split { train, val })
}

fn batch_seed(seed: u64, stream: u64, update: usize) -> u64 {
    derive_seed(derive_seed(seed, stream), update as u64)
}

/// Shared epoch loop. `make_loss` records one update's graph; `validate`
/// returns the monitored loss.
fn run_phase(
    model: &mut Mcrcnn,
    cfg: &TrainConfig,
    phase: Phase,
    stream: u64,
    run_dir: Option<&Path>,
    mut make_loss: impl FnMut(&mut Mcrcnn, &mut Rng) -> Result<(Graph<f32>, NodeId)>,
    validate: impl Fn(&Mcrcnn) -> Result<f64>,
) -> Result<TrainOutcome> {
    let tag = match phase {
        Phase::Scnn => "scnn",
        _ => "bcnn",
    };
    let mut adam = AdamState::new(model.params(), cfg.learning_rate);
    let mut schedule = PlateauSchedule::new(cfg.learning_rate, cfg.plateau);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Mcrcnn)> = None;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let lr = schedule.learning_rate;
        let mut total = 0.0;
        for u in 0..cfg.updates_per_epoch {
            let update = epoch * cfg.updates_per_epoch + u;
            let seed = batch_seed(cfg.seed, stream, update);
            let (g, loss_node) = make_loss(model, &mut Rng::new(seed))?;
            let value = g.value(loss_node).item()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    update,
                    batch_seed: seed,
                });
            }
            model.params_mut().zero_grad();
            g.backward_into(loss_node, model.params_mut())?;
            adam_step(model.params_mut(), &mut adam, lr)?;
            total += value;
        }
        let val_loss = validate(model)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("validation loss after epoch {epoch}"),
                index: 0,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / cfg.updates_per_epoch as f64,
            val_loss,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        let improved = best.as_ref().is_none_or(|(_, b, _)| val_loss < *b);
        if improved {
            best = Some((epoch, val_loss, model.clone()));
        }
        let best_loss = best.as_ref().map(|b| b.1).unwrap_or(f64::INFINITY);
        if let Some(dir) = run_dir {
            append_run_log(&dir.join(RUN_LOG), &record)?;
            let meta = TrainingMeta {
                phase,
                epoch: epoch as u32,
                best_loss,
                seed: cfg.seed,
            };
            save_checkpoint(&dir.join(format!("phase-{tag}-epoch-{epoch}.ckpt")), model, &meta, Some(&adam))?;
            if improved {
                save_checkpoint(&dir.join("best.ckpt"), model, &meta, None)?;
            }
        }
        log::info!(
            "{tag} epoch {epoch}: train {:.6} val {:.6} lr {:e} ({:.1}s)",
            record.train_loss,
            record.val_loss,
            record.lr,
            record.seconds
        );
        log.push(record);
        schedule.update(val_loss);
        let best_epoch = best.as_ref().map(|b| b.0).unwrap_or(epoch);
        if epoch - best_epoch >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_loss, snapshot) = best.expect("max_epochs >= 1");
    *model = snapshot;
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}

/// Graph and loss node for one phase-1 batch. Runs batch norm in train
/// mode, which updates the running statistics.
pub fn bcnn_batch_loss(model: &mut Mcrcnn, batch: &PatchBatch) -> Result<(Graph<f32>, NodeId)> {
    let mut g = Graph::new();
    let p = g.bind(model.params());
    let f = g.input(batch.input.clone());
    let r = model.bcnn_forward(&mut g, &p, f, Mode::Train)?;
    let b = g.sub(f, r)?;
    let s = g.input(batch.target.clone());
    let loss = g.background_loss(b, s)?;
    Ok((g, loss))
}

/// Phase-1 training. `background` is the `[1, 3, H, W]` regression target.
pub fn train_bcnn(
    model: &mut Mcrcnn,
    seq: &FrameSequence,
    background: &Tensor,
    split: &Split,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::InvalidArgument("phase 1 needs training and validation frames".into()));
    }
    let (w, h) = seq.resolution();
    let bs = background.shape();
    if (bs.w, bs.h) != (w as usize, h as usize) {
        return Err(Error::InvalidArgument(format!("background {bs} does not match {w}x{h} frames")));
    }
    if let Some(dir) = run_dir {
        write_split(&dir.join("split.txt"), split)?;
    }
    model.set_stage_trainable(Stage::Bcnn, true);

    let val = extract_training_patches(
        seq.frames(),
        &split.val,
        background,
        cfg.val_patches,
        cfg.patch_size,
        &mut Rng::derived(cfg.seed, STREAM_VALIDATION),
    )?;
    let chunk = cfg.bcnn_batch_size;
    let validate = |m: &Mcrcnn| -> Result<f64> {
        let mut total = 0.0;
        for start in (0..cfg.val_patches).step_by(chunk) {
            let end = (start + chunk).min(cfg.val_patches);
            let slice = |t: &Tensor| {
                let per = t.len() / t.shape().n;
                let s = t.shape();
                Tensor::new([end - start, s.c, s.h, s.w], t.data()[start * per..end * per].to_vec())
            };
            let (f, s) = (slice(&val.input)?, slice(&val.target)?);
            let b = f.sub(&m.residual(&f)?)?;
            total += loss::background_loss(&b, &s)?;
        }
        // Scaled to one training batch so both losses are comparable.
        Ok(total * chunk as f64 / cfg.val_patches as f64)
    };

    let frames = seq.frames();
    run_phase(
        model,
        cfg,
        Phase::Bcnn,
        STREAM_BCNN,
        run_dir,
        |m, rng| {
            let batch = extract_training_patches(frames, &split.train, background, cfg.bcnn_batch_size, cfg.patch_size, rng)?;
            bcnn_batch_loss(m, &batch)
        },
        validate,
    )
}

/// Graph and loss node for one phase-2 frame, given its precomputed
/// residual. Dropout draws come from `rng`.
pub fn scnn_frame_loss(
    model: &Mcrcnn,
    frame: &Tensor,
    residual: &Tensor,
    target: &Tensor,
    include: &Tensor,
    rng: &mut Rng,
) -> Result<(Graph<f32>, NodeId)> {
    let mut g = Graph::new();
    let p = g.bind(model.params());
    let f = g.input(frame.clone());
    let r = g.input(residual.clone());
    let refined = model.rpm_forward(&mut g, &p, r, Mode::Train, rng)?;
    let prob = model.scnn_forward(&mut g, &p, f, refined, Mode::Train)?;
    let loss = g.segmentation_loss(prob, target.clone(), Some(include.clone()), Reduction::Sum)?;
    Ok((g, loss))
}

/// Summed segmentation loss of one frame in inference mode.
pub fn scnn_frame_eval_loss(model: &Mcrcnn, frame: &Tensor, residual: &Tensor, target: &Tensor, include: &Tensor) -> Result<f64> {
    let mut ex = Eager;
    let p = Eager::bind::<f32>(model.params());
    let refined = model.rpm_forward(&mut ex, &p, residual.clone(), Mode::Infer, &mut Rng::new(0))?;
    let prob = model.scnn_forward(&mut ex, &p, frame.clone(), refined, Mode::Infer)?;
    loss::segmentation_loss(&prob, target, Some(include), Reduction::Sum)
}

struct FrameData {
    frame: Tensor,
    residual: Tensor,
    target: Tensor,
    include: Tensor,
}

/// Phase-2 training. The background network is frozen and run in inference
/// mode, so its residuals are computed once up front.
pub fn train_scnn(model: &mut Mcrcnn, seq: &FrameSequence, split: &Split, cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !seq.has_ground_truth() {
        return Err(Error::Data(format!(
            "{}: phase 2 needs ground-truth masks",
            seq.root.display()
        )));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::InvalidArgument("phase 2 needs training and validation frames".into()));
    }
    if let Some(dir) = run_dir {
        write_split(&dir.join("split.txt"), split)?;
    }
    model.set_stage_trainable(Stage::Bcnn, false);
    model.set_stage_trainable(Stage::Rpm, true);
    model.set_stage_trainable(Stage::Scnn, true);

    let prepare = |i: usize| -> Result<FrameData> {
        let frame = seq.frame_tensor(i);
        let labels = seq.require_labels(i)?;
        Ok(FrameData {
            residual: model.residual(&frame)?,
            frame,
            target: labels.target(),
            include: labels.include_mask(),
        })
    };
    let train: Vec<FrameData> = split.train.iter().map(|&i| prepare(i)).collect::<Result<_>>()?;
    let val: Vec<FrameData> = split.val.iter().map(|&i| prepare(i)).collect::<Result<_>>()?;

    let validate = |m: &Mcrcnn| -> Result<f64> {
        let mut total = 0.0;
        for d in &val {
            total += scnn_frame_eval_loss(m, &d.frame, &d.residual, &d.target, &d.include)?;
        }
        Ok(total / val.len() as f64)
    };
    run_phase(
        model,
        cfg,
        Phase::Scnn,
        STREAM_SCNN,
        run_dir,
        |m, rng| {
            let d = &train[rng.below(train.len())];
            scnn_frame_loss(m, &d.frame, &d.residual, &d.target, &d.include, rng)
        },
        validate,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{median_background, synth_sequence, load_sequence, SynthSpec};
    use crate::model::ModelConfig;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            max_epochs: 2,
            updates_per_epoch: 3,
            bcnn_batch_size: 4,
            patch_size: 16,
            val_patches: 6,
            ..TrainConfig::default()
        }
    }

    fn fixture() -> (tempfile::TempDir, FrameSequence) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            width: 24,
            height: 24,
            frames: 6,
            object_size: 8,
            ..SynthSpec::default()
        };
        synth_sequence(&spec, dir.path()).unwrap();
        let seq = load_sequence(dir.path()).unwrap();
        (dir, seq)
    }

    fn small_model() -> Mcrcnn {
        Mcrcnn::build(ModelConfig::reduced(4, 3, 2), &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { scnn_batch_size: 2, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig { updates_per_epoch: 0, ..TrainConfig::default() },
            TrainConfig { train_fraction: 1.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn split_is_seeded_and_configurable() {
        let cfg = TrainConfig::default();
        let a = frame_split(20, &cfg).unwrap();
        assert_eq!(a, frame_split(20, &cfg).unwrap());
        assert_eq!((a.train.len(), a.val.len()), (16, 4));
        let pick = TrainConfig { frames: vec![2, 4, 6, 8, 10], ..cfg };
        let b = frame_split(20, &pick).unwrap();
        assert_eq!((b.train.len(), b.val.len()), (4, 1));
        assert!(b.train.iter().chain(&b.val).all(|i| pick.frames.contains(i)));
        assert!(frame_split(5, &pick).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (_d, seq) = fixture();
        let bg = median_background(seq.frames()).unwrap();
        let mut m = small_model();
        let before = m.clone();
        let cfg = TrainConfig { learning_rate: 0.0, max_epochs: 1, ..tiny_cfg() };
        let split = frame_split(seq.len(), &cfg).unwrap();
        train_bcnn(&mut m, &seq, &bg, &split, &cfg, None).unwrap();
        for (a, b) in before.params().iter().zip(m.params().iter()) {
            assert!(a.value().bitwise_eq(b.value()), "{}", a.name());
        }
    }

    #[test]
    fn run_directory_contents_and_freezing() {
        let (_d, seq) = fixture();
        let out = tempfile::tempdir().unwrap();
        let bg = median_background(seq.frames()).unwrap();
        let mut m = small_model();
        let cfg = tiny_cfg();
        let split = frame_split(seq.len(), &cfg).unwrap();
        let o = train_bcnn(&mut m, &seq, &bg, &split, &cfg, Some(out.path())).unwrap();
        assert_eq!(o.log.len(), 2);
        for f in ["run.log", "split.txt", "best.ckpt", "phase-bcnn-epoch-0.ckpt", "phase-bcnn-epoch-1.ckpt"] {
            assert!(out.path().join(f).is_file(), "{f}");
        }
        let log = read_run_log(&out.path().join("run.log")).unwrap();
        assert!(log.iter().zip(&o.log).all(|(a, b)| a.same_outcome(b)));

        let bcnn_before: Vec<Tensor> = m.stage_params(Stage::Bcnn).into_iter().map(|id| m.params().get(id).value().clone()).collect();
        train_scnn(&mut m, &seq, &split, &cfg, None).unwrap();
        for (id, before) in m.stage_params(Stage::Bcnn).into_iter().zip(&bcnn_before) {
            assert!(m.params().get(id).value().bitwise_eq(before));
        }
    }

    #[test]
    fn phase_two_requires_ground_truth() {
        let frames = vec![image::RgbImage::new(8, 8); 3];
        let seq = FrameSequence::from_frames("v", frames, None).unwrap();
        let mut m = small_model();
        let split = Split { train: vec![0, 1], val: vec![2] };
        assert!(matches!(train_scnn(&mut m, &seq, &split, &tiny_cfg(), None), Err(Error::Data(_))));
    }
}
