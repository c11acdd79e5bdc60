//! Optimisation loop: RMSProp, plateau learning-rate decay, early stopping,
//! on-the-fly augmentation and per-epoch validation.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{DataError, Dataset, Sample};
use crate::eval::{self, EvalError, MetricSpec, Normalization};
use crate::hourglass::{NetError, StackedHourglassNet};
use crate::imaging;
use crate::keypoints::{render_heatmaps, transform_pose, Affine, JointId, PoseAnnotation};
use crate::rng;
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("epoch {epoch}, iteration {iteration}: {detail}")]
    NonFinite {
        epoch: usize,
        iteration: usize,
        detail: String,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub rot_max_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.75,
            scale_max: 1.25,
            rot_max_deg: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience_epochs: usize,
    pub early_stop_patience_epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub max_epochs: usize,
    /// Gaussian target width in heatmap pixels.
    pub sigma: f64,
    /// Validation PCK threshold (heatmap/10 normalisation).
    pub val_threshold: f64,
    /// Record wall-clock seconds per epoch. Off by default so that histories
    /// and logs of identical runs stay byte-identical.
    pub record_wall_time: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.5e-4,
            lr_decay_factor: 5.0,
            plateau_patience_epochs: 3,
            early_stop_patience_epochs: 10,
            iterations_per_epoch: 50,
            batch_size: 4,
            rmsprop_alpha: 0.99,
            rmsprop_eps: 1e-8,
            augment: AugmentConfig::default(),
            seed: 0,
            max_epochs: 30,
            sigma: 1.0,
            val_threshold: 0.5,
            record_wall_time: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        let positive = [
            ("learning_rate", self.learning_rate),
            ("rmsprop_eps", self.rmsprop_eps),
            ("sigma", self.sigma),
            ("val_threshold", self.val_threshold),
            ("augment.scale_min", self.augment.scale_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.lr_decay_factor > 1.0) {
            return err(format!("lr_decay_factor must exceed 1, got {}", self.lr_decay_factor));
        }
        if !(0.0..1.0).contains(&self.rmsprop_alpha) {
            return err(format!("rmsprop_alpha must lie in [0, 1), got {}", self.rmsprop_alpha));
        }
        if self.augment.scale_min > self.augment.scale_max {
            return err(format!(
                "augment.scale_min {} exceeds scale_max {}",
                self.augment.scale_min, self.augment.scale_max
            ));
        }
        if !(self.augment.rot_max_deg >= 0.0) {
            return err("augment.rot_max_deg must be non-negative".into());
        }
        for (name, v) in [
            ("plateau_patience_epochs", self.plateau_patience_epochs),
            ("early_stop_patience_epochs", self.early_stop_patience_epochs),
            ("iterations_per_epoch", self.iterations_per_epoch),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

/// Running squared-gradient averages, keyed by parameter name.
pub type RmsPropState = BTreeMap<String, Vec<f32>>;

/// `v ← α·v + (1−α)·g²; p ← p − lr·g/(√v + eps)` for every parameter with a
/// gradient, skipping frozen ones entirely. All gradients are checked before
/// anything is modified.
pub fn rmsprop_step(
    params: &mut BTreeMap<String, Tensor<f32>>,
    state: &mut RmsPropState,
    lr: f64,
    alpha: f64,
    eps: f64,
    frozen: &BTreeSet<String>,
) -> Result<(), TrainError> {
    let live = |name: &String| !frozen.contains(name);
    if let Some((name, _)) = params
        .iter()
        .filter(|(n, _)| live(n))
        .find(|(_, p)| p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
    {
        return Err(TrainError::NonFiniteGradient(name.clone()));
    }
    let (lr, alpha, eps) = (lr as f32, alpha as f32, eps as f32);
    for (name, p) in params.iter_mut().filter(|(n, _)| live(n)) {
        let Some(g) = p.grad().map(<[f32]>::to_vec) else {
            continue;
        };
        let v = state.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *vv = alpha * *vv + (1.0 - alpha) * gv * gv;
            *pv -= lr * gv / (vv.sqrt() + eps);
        }
    }
    Ok(())
}

/// Divides the learning rate when validation accuracy stops improving.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    patience: usize,
    factor: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: None,
            stale: 0,
        }
    }

    /// Feeds one epoch's accuracy; returns the learning rate for the next epoch.
    pub fn observe(&mut self, accuracy: f64, lr: f64) -> f64 {
        if self.best.is_none_or(|b| accuracy > b) {
            self.best = Some(accuracy);
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            lr / self.factor
        } else {
            lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, accuracy: f64) -> StopDecision {
        if self.best.is_none_or(|b| accuracy > b) {
            self.best = Some(accuracy);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// Draws `(scale, rotation in degrees)` from the configured ranges.
pub fn draw_augmentation<R: Rng>(rng: &mut R, cfg: &AugmentConfig) -> (f64, f64) {
    let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
    let rot = rng.gen_range(-cfg.rot_max_deg..=cfg.rot_max_deg);
    (scale, rot)
}

/// Warps image and annotation with one shared similarity transform.
pub fn augment_with(sample: &Sample, scale: f64, rotation_degrees: f64) -> Sample {
    let r = sample.resolution();
    let affine = Affine::new(scale, rotation_degrees, r, r);
    Sample {
        image: imaging::warp_affine(&sample.image, &affine),
        annotation: transform_pose(&sample.annotation, &affine),
    }
}

pub fn augment<R: Rng>(sample: &Sample, rng: &mut R, cfg: &AugmentConfig) -> Sample {
    let (s, r) = draw_augmentation(rng, cfg);
    augment_with(sample, s, r)
}

/// `[B, |subset|, H, H]` Gaussian targets for a batch of poses.
pub fn batch_targets(
    poses: &[&PoseAnnotation],
    subset: &[JointId],
    image_resolution: usize,
    heatmap_resolution: usize,
    sigma: f64,
) -> Tensor<f32> {
    let mut data = Vec::with_capacity(poses.len() * subset.len() * heatmap_resolution * heatmap_resolution);
    for p in poses {
        data.extend(render_heatmaps(p, subset, image_resolution, heatmap_resolution, sigma).data);
    }
    Tensor::new(
        vec![poses.len(), subset.len(), heatmap_resolution, heatmap_resolution],
        data,
    )
    .expect("target shape")
}

/// Σ over supervised units of `mse(head_u, target_u)`; `None` when no unit
/// is supervised.
pub fn supervised_loss<T: Scalar>(
    g: &mut Graph<T>,
    heads: &[Var],
    targets: &[Option<Var>],
) -> Result<Option<Var>, TensorError> {
    let mut total = None;
    for (&h, t) in heads.iter().zip(targets) {
        if let Some(t) = *t {
            let l = g.mse_loss(h, t)?;
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
    }
    Ok(total)
}

/// What to train and how each unit is supervised.
#[derive(Clone, Debug)]
pub struct TrainingJob {
    pub net: StackedHourglassNet<f32>,
    /// Target joints per unit; `None` means the unit adds no loss term.
    pub unit_targets: Vec<Option<Vec<JointId>>>,
    pub frozen: BTreeSet<String>,
}

impl TrainingJob {
    /// Joints decoded from the final unit for validation.
    pub fn eval_subset(&self) -> Result<&[JointId], TrainError> {
        self.unit_targets
            .last()
            .and_then(Option::as_deref)
            .ok_or_else(|| TrainError::Config("the final unit must be supervised".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Percent.
    pub val_pck: f64,
    /// Rate used during this epoch.
    pub learning_rate: f64,
    pub wall_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    /// Validation PCK of the untrained network.
    pub initial_val_pck: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl RunHistory {
    pub fn best_val_pck(&self) -> f64 {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .map_or(self.initial_val_pck, |e| e.val_pck)
    }

    /// First epoch whose validation PCK reaches `fraction` of the best value
    /// of the run.
    pub fn epochs_to_fraction(&self, fraction: f64) -> Option<usize> {
        let target = fraction * self.best_val_pck();
        self.epochs.iter().find(|e| e.val_pck >= target).map(|e| e.epoch)
    }
}

/// Validation metric driving scheduling and stopping.
pub fn validation_spec(job: &TrainingJob, config: &TrainingConfig) -> MetricSpec {
    let arch = job.net.arch();
    MetricSpec {
        threshold: config.val_threshold,
        normalization: Normalization::HeatmapTenth {
            image_resolution: arch.input_resolution,
            heatmap_resolution: arch.heatmap_resolution,
        },
    }
}

fn validate_pck(
    net: &StackedHourglassNet<f32>,
    val: &Dataset,
    subset: &[JointId],
    spec: &MetricSpec,
) -> Result<f64, TrainError> {
    Ok(eval::evaluate_model(net, val, subset, spec)?.average().unwrap_or(0.0))
}

/// Called after every epoch; `best` carries the network when the epoch set a
/// new best validation score.
pub type EpochObserver<'a> = dyn FnMut(&EpochRecord, Option<&StackedHourglassNet<f32>>) -> Result<(), TrainError> + 'a;

pub struct TrainingOutcome {
    /// Network at the best validation epoch.
    pub best: StackedHourglassNet<f32>,
    pub history: RunHistory,
}

pub fn run_training(
    job: TrainingJob,
    train: &Dataset,
    val: &Dataset,
    config: &TrainingConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainingOutcome, TrainError> {
    config.validate()?;
    let TrainingJob {
        mut net,
        unit_targets,
        frozen,
    } = job;
    let arch = net.arch().clone();
    if unit_targets.len() != arch.num_stacks {
        return Err(TrainError::Config(format!(
            "{} unit targets for {} stacks",
            unit_targets.len(),
            arch.num_stacks
        )));
    }
    for (u, t) in unit_targets.iter().enumerate() {
        if let Some(t) = t {
            if t.len() != net.head_channels()[u] {
                return Err(TrainError::Config(format!(
                    "unit {u} head has {} channels but {} target joints",
                    net.head_channels()[u],
                    t.len()
                )));
            }
        }
    }
    for d in [train, val] {
        if d.resolution() != arch.input_resolution {
            return Err(TrainError::Config(format!(
                "dataset resolution {} does not match network input {}",
                d.resolution(),
                arch.input_resolution
            )));
        }
    }
    if let Some(name) = frozen.iter().find(|n| !net.params().contains_key(*n)) {
        return Err(TrainError::Config(format!("frozen parameter `{name}` does not exist")));
    }
    let job_view = TrainingJob {
        net: net.clone(),
        unit_targets: unit_targets.clone(),
        frozen: frozen.clone(),
    };
    let eval_subset = job_view.eval_subset()?.to_vec();
    let spec = validation_spec(&job_view, config);
    drop(job_view);

    let res = arch.input_resolution;
    let hm = arch.heatmap_resolution;
    let started = Instant::now();
    let shuffle_seed = rng::labelled(config.seed, "batch-order");
    let augment_seed = rng::labelled(config.seed, "augment");

    let initial_val_pck = validate_pck(&net, val, &eval_subset, &spec)?;
    let mut best = net.clone();
    let mut best_pck = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut state = RmsPropState::new();
    let mut lr = config.learning_rate;
    let mut scheduler = PlateauScheduler::new(config.plateau_patience_epochs, config.lr_decay_factor);
    let mut stopper = EarlyStopper::new(config.early_stop_patience_epochs);
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(rng::mix(shuffle_seed, &[epoch as u64])));
        let mut loss_sum = 0.0;
        for it in 0..config.iterations_per_epoch {
            let batch: Vec<Sample> = (0..config.batch_size)
                .into_par_iter()
                .map(|slot| {
                    let idx = order[(it * config.batch_size + slot) % order.len()];
                    let mut r = rng::stream(rng::mix(augment_seed, &[epoch as u64, it as u64, slot as u64]));
                    augment(train.get(idx), &mut r, &config.augment)
                })
                .collect();
            let mut data = Vec::with_capacity(batch.len() * 3 * res * res);
            for s in &batch {
                data.extend_from_slice(s.image.data());
            }
            let input = Tensor::new(vec![batch.len(), 3, res, res], data)?;
            let poses: Vec<&PoseAnnotation> = batch.iter().map(|s| &s.annotation).collect();

            let abort = |detail: String| TrainError::NonFinite {
                epoch,
                iteration: it + 1,
                detail,
            };
            let mut g = Graph::new();
            let x = g.constant(&input).map_err(|e| match e {
                t @ TensorError::NonFinite { .. } => abort(t.to_string()),
                other => other.into(),
            })?;
            let pass = net.forward_train(&mut g, x, &frozen).map_err(|e| match e {
                NetError::Tensor(t @ TensorError::NonFinite { .. }) => abort(t.to_string()),
                other => other.into(),
            })?;
            let mut targets = Vec::with_capacity(unit_targets.len());
            for t in &unit_targets {
                targets.push(match t {
                    Some(subset) => Some(g.constant(&batch_targets(&poses, subset, res, hm, config.sigma))?),
                    None => None,
                });
            }
            let loss = supervised_loss(&mut g, &pass.heads, &targets)?
                .ok_or_else(|| TrainError::Config("no unit is supervised".into()))?;
            let value = f64::from(g.value(loss)[0]);
            if !value.is_finite() {
                return Err(abort(format!("loss is {value}")));
            }
            loss_sum += value;
            g.backward(loss)?;
            net.zero_grads();
            net.accumulate_grads(&g, &pass.bindings)?;
            rmsprop_step(
                net.params_mut(),
                &mut state,
                lr,
                config.rmsprop_alpha,
                config.rmsprop_eps,
                &frozen,
            )
            .map_err(|e| abort(e.to_string()))?;
        }
        net.zero_grads();

        let val_pck = validate_pck(&net, val, &eval_subset, &spec)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / config.iterations_per_epoch as f64,
            val_pck,
            learning_rate: lr,
            wall_seconds: config.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        let improved = val_pck > best_pck;
        if improved {
            best_pck = val_pck;
            best_epoch = epoch;
            best = net.clone();
        }
        observer(&record, improved.then_some(&best))?;
        epochs.push(record);
        lr = scheduler.observe(val_pck, lr);
        if stopper.observe(val_pck) == StopDecision::Stop {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    Ok(TrainingOutcome {
        best,
        history: RunHistory {
            initial_val_pck,
            epochs,
            best_epoch,
            stopped_early,
        },
    })
}
