//! AdamW training with cosine warm restarts, deep-supervised targets,
//! checkpoint cadence and deterministic replay.

pub mod infer;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::canonical::{canonical_json_pretty, digest};
use crate::data::corpus::{mix_seed, Corpus, Split};
use crate::data::{augment, extract_targets, macenko_normalize, Annotated, AugmentConfig, MacenkoParams, StainReference};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::losses::{total_loss, LevelTargets, LossConfig, NucleiLoss};
use crate::model::{checkpoint, CiaNet, CiaNetConfig, Param};
use crate::post::PostConfig;
use crate::tensor::{Mode, Scalar, Tape, Tensor};

pub use infer::{evaluate_checkpoint, evaluate_model, predict_instances, predict_maps, EvalConfig};

/// Cosine annealing with warm restarts; cycle `i` lasts `t0·t_mult^i` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    /// First cycle length in steps; `None` means one epoch.
    pub t0: Option<usize>,
    pub t_mult: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            eta_max: 1e-3,
            eta_min: 1e-5,
            t0: None,
            t_mult: 2,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min < self.eta_max) || self.eta_min < 0.0 {
            return Err(Error::Config(format!(
                "learning rates need 0 ≤ eta_min < eta_max, got {} and {}",
                self.eta_min, self.eta_max
            )));
        }
        if self.t0 == Some(0) || self.t_mult == 0 {
            return Err(Error::Config("t0 and t_mult must be at least 1".into()));
        }
        Ok(())
    }
}

/// Position inside the restart cycles: `(T_cur, T_i)`.
pub fn cycle_position(step: usize, t0: usize, t_mult: usize) -> (usize, usize) {
    let mut len = t0.max(1);
    if t_mult == 1 {
        return (step % len, len);
    }
    let mut start = 0;
    while step >= start + len {
        start += len;
        len *= t_mult;
    }
    (step - start, len)
}

/// `η_min + ½(η_max − η_min)(1 + cos(π·T_cur/T_i))`. `t0` resolves a `None` cycle length.
pub fn lr_at(step: usize, schedule: &LrSchedule, t0: usize) -> f64 {
    let (t_cur, t_i) = cycle_position(step, schedule.t0.unwrap_or(t0), schedule.t_mult);
    let frac = t_cur as f64 / t_i as f64;
    schedule.eta_min + 0.5 * (schedule.eta_max - schedule.eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient (β of the objective's weight penalty).
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments per parameter, kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new<T: Scalar>(params: &[Param<T>]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was NaN or infinite; nothing changed.
    Skipped,
}

/// One AdamW update with bias correction and decoupled decay.
pub fn adamw_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<StepOutcome> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("adamw_step", "params", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.tensor.shape() != g.shape() {
            return Err(Error::dim("adamw_step", "numel", p.tensor.len(), g.len()));
        }
    }
    if grads.iter().any(|g| g.data().iter().any(|v| !v.as_f64().is_finite())) {
        return Ok(StepOutcome::Skipped);
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, gv)) in p.tensor.data_mut().iter_mut().zip(g.data()).enumerate() {
            let g = gv.as_f64();
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let (mh, vh) = (m[j] / c1, v[j] / c2);
            let w0 = w.as_f64();
            *w = T::from_f64(w0 - lr * mh / (vh.sqrt() + cfg.eps) - lr * cfg.weight_decay * w0);
        }
    }
    Ok(StepOutcome::Applied)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Every code path is single-threaded and seeded; the flag is recorded for provenance.
    pub deterministic: bool,
    pub model: CiaNetConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    pub contour_radius: usize,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
    /// Train the nuclei head with BCE for this many leading epochs before switching to `loss.nuclei_loss`.
    pub bce_warmup_epochs: usize,
    pub stain_normalize: bool,
    /// Training images held out to select the best checkpoint by AJI (0: none).
    pub validation_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 3,
            epochs: 30,
            seed: 0,
            deterministic: true,
            model: CiaNetConfig::toy(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            schedule: LrSchedule::default(),
            optimizer: AdamWConfig::default(),
            contour_radius: 1,
            checkpoint_every: 10,
            grad_clip: None,
            bce_warmup_epochs: 1,
            stain_normalize: false,
            validation_images: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.contour_radius == 0 {
            return Err(Error::Config("contour_radius must be at least 1".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.schedule.validate()?;
        if self.loss.level_weights.len() != crate::model::DECODER_LEVELS + 1 {
            return Err(Error::Config(format!(
                "level_weights needs {} entries (three decoder levels and the final map)",
                crate::model::DECODER_LEVELS + 1
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub accepted: bool,
}

pub const LOG_HEADER: &str = "step,lr,loss,grad_norm";

fn write_log_rows(rows: &[LogRow], w: &mut impl Write) -> std::io::Result<()> {
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.lr, r.loss, r.grad_norm)?;
    }
    Ok(())
}

/// `step,lr,loss,grad_norm`; skipped steps carry NaN.
pub fn write_log_csv(rows: &[LogRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    write_log_rows(rows, &mut w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub skipped_steps: usize,
    pub validation_aji: Option<f64>,
}

pub struct TrainOutcome {
    /// Final weights (or the best validation checkpoint when validation is on).
    pub model: CiaNet<f32>,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<PathBuf>,
}

/// Image as the network should see it: optionally stain-normalized.
pub fn prepare_image(image: &RgbImage, stain_normalize: bool) -> Result<RgbImage> {
    if !stain_normalize {
        return Ok(image.clone());
    }
    Ok(macenko_normalize(image, &StainReference::standard(), &MacenkoParams::default())?.image)
}

/// Batched input and max-pooled targets for the 1/8, 1/4, 1/2 and full-resolution maps.
pub fn batch_tensors(items: &[Annotated]) -> Result<(Tensor<f32>, Vec<LevelTargets<f32>>)> {
    let input = Tensor::stack(&items.iter().map(|a| a.image.to_tensor()).collect::<Vec<_>>())?;
    let mut targets = Vec::with_capacity(4);
    for factor in [8, 4, 2, 1] {
        let pool = |m: &crate::image::Mask| m.max_pool(factor).map(|p| p.to_tensor::<f32>());
        let nuclei: Vec<_> = items.iter().map(|a| pool(&a.targets.nuclei)).collect::<Result<_>>()?;
        let contour: Vec<_> = items.iter().map(|a| pool(&a.targets.contour)).collect::<Result<_>>()?;
        targets.push(LevelTargets {
            nuclei: Tensor::stack(&nuclei)?,
            contour: Tensor::stack(&contour)?,
        });
    }
    Ok((input, targets))
}

fn training_items(cfg: &TrainConfig, corpus: &Corpus) -> Result<(Vec<Annotated>, Vec<Annotated>)> {
    let mut items = Vec::new();
    for (entry, rec) in corpus.split(Split::Train) {
        let image = prepare_image(&rec.image, cfg.stain_normalize)?;
        let side = cfg.augment.crop.unwrap_or(image.width().min(image.height()));
        let (w, h) = match cfg.augment.crop {
            Some(c) => (c, c),
            None => (image.width(), image.height()),
        };
        if w % 16 != 0 || h % 16 != 0 || side > image.width().min(image.height()) {
            return Err(Error::Contract(format!(
                "{}: training size {w}×{h} from a {}×{} image must fit and be a multiple of 16",
                entry.image,
                image.width(),
                image.height()
            )));
        }
        items.push(Annotated {
            targets: extract_targets(&rec.labels, cfg.contour_radius),
            labels: rec.labels.clone(),
            image,
        });
    }
    if let Some(first) = items.first() {
        let dims = (first.image.width(), first.image.height());
        if cfg.augment.crop.is_none() && items.iter().any(|a| (a.image.width(), a.image.height()) != dims) {
            return Err(Error::Contract("training images differ in size; set augment.crop".into()));
        }
    }
    if cfg.validation_images >= items.len() {
        return Err(Error::Contract(format!(
            "corpus has {} training images, need more than {} (validation hold-out)",
            items.len(),
            cfg.validation_images
        )));
    }
    let held = items.split_off(items.len() - cfg.validation_images);
    Ok((items, held))
}

pub fn run_training(cfg: &TrainConfig, corpus: &Corpus, post: &PostConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    run_training_with(cfg, corpus, post, out, &mut |_| {})
}

/// Trains from scratch. With `out`, writes `train_log.csv`, `train_config.json`,
/// `checkpoints/epoch-NNNN.ckpt`, `final.ckpt` and (with validation) `best.ckpt`.
pub fn run_training_with(
    cfg: &TrainConfig,
    corpus: &Corpus,
    post: &PostConfig,
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    post.validate()?;
    let (items, validation) = training_items(cfg, corpus)?;
    let config_digest = digest(cfg);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train_config.json");
        std::fs::write(&path, canonical_json_pretty(cfg)).map_err(|e| Error::io(path, e))?;
    }
    let log_path = out.map(|dir| dir.join("train_log.csv"));
    let mut log_file = match &log_path {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
            Some(f)
        }
        None => None,
    };

    let mut model = CiaNet::<f32>::build(&cfg.model, mix_seed(cfg.seed, 0xC1A))?;
    let mut state = OptimizerState::new(&model.params);
    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut best: Option<(f64, CiaNet<f32>)> = None;
    let mut step = 0usize;

    let warmup_loss = LossConfig {
        nuclei_loss: NucleiLoss::Bce,
        ..cfg.loss.clone()
    };
    for epoch in 0..cfg.epochs {
        let epoch_start = log.len();
        let loss_cfg = if epoch < cfg.bce_warmup_epochs { &warmup_loss } else { &cfg.loss };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1 + epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut accepted, mut skipped) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Annotated> = chunk
                .iter()
                .map(|&i| {
                    let s = mix_seed(mix_seed(cfg.seed, 0xA06), (epoch * items.len() + i) as u64);
                    augment(&items[i], &cfg.augment, s)
                })
                .collect::<Result<_>>()?;
            let (input, targets) = batch_tensors(&batch)?;

            let saved_stats = model.bn_stats.clone();
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let x = tape.constant(input);
            let fwd = model.forward(&mut tape, &vars, x, Mode::Train)?;
            let lr = lr_at(step, &cfg.schedule, steps_per_epoch);
            let outputs = fwd.supervised();
            let finite = outputs
                .iter()
                .all(|l| [l.nuclei, l.contour].iter().all(|&v| tape.value(v).data().iter().all(|p| p.is_finite())));
            if !finite {
                model.bn_stats = saved_stats;
                skipped += 1;
                log.push(LogRow {
                    step,
                    epoch,
                    lr,
                    loss: f64::NAN,
                    grad_norm: f64::NAN,
                    accepted: false,
                });
                step += 1;
                continue;
            }
            let loss = total_loss(&mut tape, &outputs, &targets, loss_cfg)?;
            let mut g = tape.backward(loss.var)?;
            let mut grads: Vec<Tensor<f32>> = vars
                .iter()
                .map(|&v| g.take(v).expect("parameter gradient"))
                .collect();
            let grad_norm = grads
                .iter()
                .flat_map(|t| t.data())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if let Some(clip) = cfg.grad_clip {
                if grad_norm.is_finite() && grad_norm > clip {
                    let s = (clip / grad_norm) as f32;
                    for t in &mut grads {
                        t.data_mut().iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
            let outcome = if loss.value.is_finite() {
                adamw_step(&mut model.params, &grads, &mut state, lr, &cfg.optimizer)?
            } else {
                StepOutcome::Skipped
            };
            if outcome == StepOutcome::Skipped {
                model.bn_stats = saved_stats;
                skipped += 1;
            } else {
                loss_sum += loss.value;
                accepted += 1;
            }
            log.push(LogRow {
                step,
                epoch,
                lr,
                loss: loss.value,
                grad_norm,
                accepted: outcome == StepOutcome::Applied,
            });
            step += 1;
        }
        if let (Some(f), Some(path)) = (log_file.as_mut(), &log_path) {
            write_log_rows(&log[epoch_start..], f)
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(path, e))?;
        }

        if model.params.iter().any(|p| p.tensor.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("parameters diverged during epoch {}", epoch + 1)));
        }
        if accepted == 0 {
            return Err(Error::Numeric(format!(
                "every step of epoch {} had a non-finite loss or gradient",
                epoch + 1
            )));
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
        let mut validation_aji = None;
        if (due || last) && !validation.is_empty() {
            let aji = infer::validation_aji(&model, &validation, post)?;
            validation_aji = Some(aji);
            if best.as_ref().is_none_or(|(b, _)| aji > *b) {
                best = Some((aji, model.clone()));
                if let Some(dir) = out {
                    let meta = json!({"epoch": epoch + 1, "step": step, "validation_aji": aji, "train_config": config_digest});
                    checkpoint::save(&model, &meta, &dir.join("best.ckpt"))?;
                }
            }
        }
        if let Some(dir) = out {
            let meta = json!({"epoch": epoch + 1, "step": step, "train_config": config_digest});
            if due {
                let path = dir.join("checkpoints").join(format!("epoch-{:04}.ckpt", epoch + 1));
                checkpoint::save(&model, &meta, &path)?;
                checkpoints.push(path);
            }
            if last {
                let path = dir.join("final.ckpt");
                checkpoint::save(&model, &meta, &path)?;
                checkpoints.push(path);
            }
        }
        let summary = EpochSummary {
            epoch: epoch + 1,
            mean_loss: if accepted > 0 { loss_sum / accepted as f64 } else { f64::NAN },
            skipped_steps: skipped,
            validation_aji,
        };
        on_epoch(&summary);
        epochs.push(summary);
    }

    let model = match best {
        Some((_, m)) => m,
        None => model,
    };
    Ok(TrainOutcome {
        model,
        log,
        epochs,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn param(v: f32) -> Vec<Param<f32>> {
        vec![Param {
            name: "w".into(),
            tensor: Tensor::full(Shape::scalar(), v),
        }]
    }

    #[test]
    fn adamw_hand_values() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = param(1.0);
        let mut s = OptimizerState::new(&p);
        let g = vec![Tensor::full(Shape::scalar(), 1.0f32)];
        assert_eq!(adamw_step(&mut p, &g, &mut s, 1e-3, &cfg).unwrap(), StepOutcome::Applied);
        assert!((p[0].tensor.data()[0] as f64 - 0.999).abs() < 1e-6);

        let decayed = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut p = param(1.0);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &g, &mut s, 1e-3, &decayed).unwrap();
        assert!((p[0].tensor.data()[0] as f64 - 0.99899).abs() < 1e-6);

        let mut p = param(0.7);
        let mut s = OptimizerState::new(&p);
        let zero = vec![Tensor::full(Shape::scalar(), 0.0f32)];
        adamw_step(&mut p, &zero, &mut s, 1e-3, &cfg).unwrap();
        assert_eq!(p[0].tensor.data()[0], 0.7);
    }

    #[test]
    fn non_finite_gradient_skips_the_step() {
        let mut p = param(1.0);
        let mut s = OptimizerState::new(&p);
        let g = vec![Tensor::full(Shape::scalar(), f32::NAN)];
        let before = s.clone();
        assert_eq!(
            adamw_step(&mut p, &g, &mut s, 1e-3, &AdamWConfig::default()).unwrap(),
            StepOutcome::Skipped
        );
        assert_eq!(s, before);
        assert_eq!(p[0].tensor.data()[0], 1.0);
        let wrong = vec![Tensor::zeros(Shape::new(1, 1, 1, 2))];
        assert!(adamw_step(&mut p, &wrong, &mut s, 1e-3, &AdamWConfig::default()).is_err());
    }

    #[test]
    fn schedule_hand_values() {
        let s = LrSchedule::default();
        assert_eq!(lr_at(0, &s, 10), 1e-3);
        assert!((lr_at(5, &s, 10) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        // Cycles of 10, 20, 40 steps.
        assert_eq!(lr_at(10, &s, 10), 1e-3);
        assert_eq!(lr_at(30, &s, 10), 1e-3);
        assert!((lr_at(20, &s, 10) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert_eq!(cycle_position(29, 10, 2), (19, 20));
        assert_eq!(cycle_position(7, 3, 1), (1, 3));
        assert!(LrSchedule { eta_min: 1e-2, ..s.clone() }.validate().is_err());
    }
}
