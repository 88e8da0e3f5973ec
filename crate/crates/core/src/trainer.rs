//! Training loops, evaluation and multi-seed sweeps.
//!
//! One epoch of the hybrid loop walks shuffled mini-batches of the training
//! split. Per batch it runs, in order: latent-model updates on the
//! constraint loss with the classifier frozen, a classifier update (hidden
//! layers only) on the same loss with the latent model frozen, a classifier
//! update on supervised plus consistency loss, and the teacher's EMA update.
//! The baseline modes run subsets of those steps.

use crate::constraints::{self, ConstraintSpec, KnownParams, TraceWindow};
use crate::gridsim::{self, Dataset, GridError};
use crate::hybrid::{
    self, baseline_loss, loss_consistency, loss_constraint, loss_supervised, Architecture, HybridError,
    HybridModel, LossBreakdown, RampUp,
};
use crate::neural::{self, ema_update, Network, NeuralError, NoiseMasks, Optimizer, OptimizerConfig};
use crate::numkit::{Matrix, Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

// Child streams of a run's seed.
const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_LABELS: u64 = 4;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] HybridError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("training diverged: {0}")]
    Diverged(Box<DivergenceReport>),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

impl From<NeuralError> for TrainError {
    fn from(e: NeuralError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<constraints::ConstraintError> for TrainError {
    fn from(e: constraints::ConstraintError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<crate::numkit::NumError> for TrainError {
    fn from(e: crate::numkit::NumError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// State captured when a loss goes non-finite.
#[derive(Debug, Clone, Serialize)]
pub struct DivergenceReport {
    pub mode: Mode,
    pub seed: u64,
    pub epoch: usize,
    pub batch: usize,
    pub step: &'static str,
    pub losses: LossBreakdown,
    pub alpha: f64,
    /// Frobenius norm of every parameter tensor of the primary model.
    pub primary_param_norms: Vec<f64>,
    pub encoder_param_norms: Vec<f64>,
}

impl std::fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "non-finite loss in {} at epoch {}, batch {} (seed {}, losses {:?})",
            self.step, self.epoch, self.batch, self.seed, self.losses
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Hybrid,
    BaselineMeanteacher,
    BaselinePseudolabel,
    SupervisedOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Hybrid => "hybrid",
            Mode::BaselineMeanteacher => "baseline_meanteacher",
            Mode::BaselinePseudolabel => "baseline_pseudolabel",
            Mode::SupervisedOnly => "supervised_only",
        }
    }

    fn uses_teacher(self) -> bool {
        matches!(self, Mode::Hybrid | Mode::BaselineMeanteacher | Mode::BaselinePseudolabel)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [Mode::Hybrid, Mode::BaselineMeanteacher, Mode::BaselinePseudolabel, Mode::SupervisedOnly]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode \"{s}\""))
    }
}

/// Which rule refreshes the teacher after each classifier update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaRule {
    /// `teacher <- beta * teacher + (1 - beta) * student`
    Average,
    /// `teacher <- beta * student_new + (1 - beta) * student_old`
    StudentPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Dropout rate on the teacher's hidden activations.
    pub dropout: f64,
    /// DropConnect rate on the teacher's first-layer weights.
    pub dropconnect: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            dropout: 0.1,
            dropconnect: 0.05,
        }
    }
}

/// Input perturbation for the student pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Gaussian noise std, as a fraction of each feature's training std.
    pub noise_std: f64,
    /// Largest circular time shift, in window points.
    pub max_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.01,
            max_shift: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Rows drawn from the shuffled training split per batch.
    pub batch_size: usize,
    /// Labeled rows appended to every batch, cycled through the labeled pool.
    pub labeled_per_batch: usize,
    /// Redraw the labeled subset at this fraction (per seed) before
    /// training. Unset keeps the dataset's own split.
    pub label_fraction: Option<f64>,
    pub seeds: Vec<u64>,
    pub optimizer: OptimizerConfig,
    pub latent_optimizer: OptimizerConfig,
    pub ramp: RampUp,
    pub ema_beta: f64,
    pub ema_rule: EmaRule,
    /// Spread of the latent Gaussians; `inf` drops the latent KL term.
    pub sigma: f64,
    pub constraints: ConstraintSpec,
    /// Latent-model steps per batch.
    pub e_steps: usize,
    /// Classifier steps on the constraint loss per batch.
    pub m_steps: usize,
    pub noise: NoiseConfig,
    pub augment: AugmentConfig,
    pub architecture: Architecture,
    /// Stop once validation error moved less than `early_stop_tol` over this
    /// many epochs; 0 disables early stopping.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hybrid,
            epochs: 150,
            batch_size: 256,
            labeled_per_batch: 32,
            label_fraction: None,
            seeds: vec![0, 1, 2, 3, 4],
            optimizer: OptimizerConfig::adam(1e-3),
            latent_optimizer: OptimizerConfig::adam(1e-3),
            ramp: RampUp::default(),
            ema_beta: 0.99,
            ema_rule: EmaRule::Average,
            sigma: 1.0,
            constraints: ConstraintSpec::default(),
            e_steps: 1,
            m_steps: 1,
            noise: NoiseConfig::default(),
            augment: AugmentConfig::default(),
            architecture: Architecture::default(),
            early_stop_window: 20,
            early_stop_tol: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(f) = self.label_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("label_fraction {f} not in (0, 1]"));
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        for (name, o) in [("optimizer", &self.optimizer), ("latent_optimizer", &self.latent_optimizer)] {
            if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
                return bad(format!("{name}.learning_rate must be positive"));
            }
        }
        if !(self.ramp.alpha_max >= 0.0 && self.ramp.alpha_max.is_finite()) {
            return bad("ramp.alpha_max must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return bad(format!("ema_beta {} not in [0, 1]", self.ema_beta));
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma {} must be positive", self.sigma));
        }
        for (name, p) in [("noise.dropout", self.noise.dropout), ("noise.dropconnect", self.noise.dropconnect)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} not in [0, 1)"));
            }
        }
        if !(self.augment.noise_std >= 0.0) {
            return bad("augment.noise_std must be >= 0".into());
        }
        if self.architecture.hidden.is_empty() || self.architecture.hidden.contains(&0) {
            return bad("architecture.hidden needs positive widths".into());
        }
        if self.architecture.encoder_hidden.contains(&0) {
            return bad("architecture.encoder_hidden needs positive widths".into());
        }
        if !(self.early_stop_tol >= 0.0) {
            return bad("early_stop_tol must be >= 0".into());
        }
        self.constraints
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: Mode,
    pub seed: u64,
    pub n_labeled: usize,
    pub alpha: f64,
    pub losses: LossBreakdown,
    pub val_accuracy: f64,
    pub val_error: f64,
    pub teacher_accuracy: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub error_rate: f64,
    pub correct: usize,
    pub total: usize,
}

fn accuracy_from_probs(probs: &Matrix, truth: &[usize]) -> Evaluation {
    let pred = probs.argmax_rows();
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let total = truth.len();
    let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    Evaluation {
        accuracy,
        error_rate: 1.0 - accuracy,
        correct,
        total,
    }
}

fn split_labels(data: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| {
            let y = data.labels()[i];
            if y < 0 || y as usize >= data.class_count() {
                Err(TrainError::Config(format!("sample {i} has no usable label ({y})")))
            } else {
                Ok(y as usize)
            }
        })
        .collect()
}

fn evaluate_net(model: &HybridModel, net: &Network, x: &Matrix, truth: &[usize]) -> Result<Evaluation> {
    let probs = net.forward(&model.normalize(x)?, None)?.output;
    Ok(accuracy_from_probs(&probs, truth))
}

/// Accuracy of the primary model (inference mode) on `indices`.
pub fn evaluate(model: &HybridModel, data: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    let truth = split_labels(data, indices)?;
    evaluate_net(model, &model.primary, &data.features.select_rows(indices), &truth)
}

/// Knowledge the constraint loss needs, derived from the dataset.
pub fn known_params(data: &Dataset) -> Result<KnownParams> {
    let m = &data.manifest;
    let case = gridsim::build_wscc_scenarios(&m.config)?;
    Ok(KnownParams {
        m: m.inertia.clone(),
        d: m.damping.clone(),
        dt: m.window_dt,
        settle_index: m.settle_index,
        z_reference: constraints::z_from_model(&case.base),
    })
}

/// Frequency/angle windows of every sample.
pub fn trace_windows(data: &Dataset, dt: f64) -> Result<Vec<TraceWindow>> {
    (0..data.len())
        .map(|i| Ok(TraceWindow::from_feature_row(data.features.row(i), data.theta0.row(i), dt)?))
        .collect()
}

/// One mini-batch: dataset rows and the labels visible to training.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<Option<usize>>,
}

/// Steps of the training loop, reported in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    LatentUpdate { epoch: usize, batch: usize },
    ClassifierConstraintUpdate { epoch: usize, batch: usize },
    ClassifierUpdate { epoch: usize, batch: usize },
    TeacherUpdate { epoch: usize, batch: usize },
    EpochEnd { epoch: usize },
}

struct ConstraintContext {
    spec: ConstraintSpec,
    known: KnownParams,
    windows: Vec<TraceWindow>,
}

/// A single training run: model, optimizers and random streams.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: Dataset,
    seed: u64,
    pub model: HybridModel,
    opt_primary: Optimizer,
    opt_primary_constraint: Optimizer,
    opt_encoder: Optimizer,
    opt_decoder: Optimizer,
    data_rng: Rng,
    noise_rng: Rng,
    constraint: Option<ConstraintContext>,
    train_idx: Vec<usize>,
    labeled_idx: Vec<usize>,
    val_idx: Vec<usize>,
    val_truth: Vec<usize>,
    labeled_cursor: usize,
}

impl<'a> Trainer<'a> {
    /// Prepares a run. With `cfg.label_fraction` set, the labeled subset is
    /// redrawn from a stream of `seed`.
    pub fn new(cfg: &'a TrainConfig, data: &Dataset, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let data = match cfg.label_fraction {
            Some(f) => data.relabel(f, &mut root.fork(STREAM_LABELS))?,
            None => data.clone(),
        };
        let m = &data.manifest;
        let labeled_idx = m.labeled_indices.clone();
        if labeled_idx.is_empty() {
            return Err(TrainError::Config("dataset has no labeled training samples".into()));
        }
        let train_idx = data.train_indices();
        let val_idx = m.val_indices.clone();
        let train_set: std::collections::HashSet<usize> = train_idx.iter().copied().collect();
        if val_idx.iter().any(|i| train_set.contains(i)) {
            return Err(TrainError::Config("validation and training splits overlap".into()));
        }
        if train_idx.iter().chain(&val_idx).any(|&i| i >= data.len()) {
            return Err(TrainError::Config("split index out of range".into()));
        }
        split_labels(&data, &labeled_idx)?;
        let val_truth = split_labels(&data, &val_idx)?;

        let z_dim = constraints::z_dim(m.n_gen.max(1));
        let mut model = HybridModel::new(
            data.features.cols(),
            data.class_count(),
            z_dim,
            &cfg.architecture,
            &root.fork(STREAM_INIT),
        )?;
        model.fit_normalization(&data.features.select_rows(&train_idx));

        let constraint = if cfg.mode == Mode::Hybrid {
            let known = known_params(&data)?;
            let windows = trace_windows(&data, known.dt)?;
            let spec = cfg.constraints.resolved(m.c_sync, m.c_phase);
            Some(ConstraintContext { spec, known, windows })
        } else {
            None
        };
        Ok(Self {
            cfg,
            seed,
            opt_primary: Optimizer::new(cfg.optimizer, &model.primary),
            opt_primary_constraint: Optimizer::new(cfg.optimizer, &model.primary),
            opt_encoder: Optimizer::new(cfg.latent_optimizer, &model.encoder),
            opt_decoder: Optimizer::new(cfg.latent_optimizer, &model.decoder),
            model,
            data_rng: root.fork(STREAM_DATA),
            noise_rng: root.fork(STREAM_NOISE),
            constraint,
            train_idx,
            labeled_idx,
            val_idx,
            val_truth,
            labeled_cursor: 0,
            data,
        })
    }

    /// The dataset as seen by this run (after any relabeling).
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    fn visible_label(&self, i: usize) -> Option<usize> {
        let y = self.data.labels()[i];
        (y >= 0).then_some(y as usize)
    }

    /// Mini-batches for one epoch.
    pub fn epoch_batches(&mut self) -> Vec<Batch> {
        let mut order = self.train_idx.clone();
        self.data_rng.shuffle(&mut order);
        let mut out = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let mut indices: Vec<usize> = chunk.to_vec();
            for _ in 0..self.cfg.labeled_per_batch {
                if self.labeled_cursor == 0 {
                    self.data_rng.shuffle(&mut self.labeled_idx);
                }
                indices.push(self.labeled_idx[self.labeled_cursor]);
                self.labeled_cursor = (self.labeled_cursor + 1) % self.labeled_idx.len();
            }
            // Only rows of the training split carry labels; val labels are
            // never visible here because val rows are never drawn.
            let labels = indices.iter().map(|&i| self.visible_label(i)).collect();
            out.push(Batch { indices, labels });
        }
        out
    }

    fn teacher_masks(&mut self, rows: usize) -> NoiseMasks {
        let net = &self.model.secondary;
        let n = net.layers().len();
        let mut masks = NoiseMasks::none(n);
        let p = self.cfg.noise;
        if p.dropout > 0.0 {
            for l in 0..n - 1 {
                masks.dropout[l] = Some(neural::dropout_mask(
                    &mut self.noise_rng,
                    rows,
                    net.layers()[l].outputs(),
                    p.dropout,
                ));
            }
        }
        if p.dropconnect > 0.0 {
            let w = &net.layers()[0].weights;
            masks.dropconnect[0] = Some(neural::dropconnect_mask(&mut self.noise_rng, w.shape(), p.dropconnect));
        }
        masks
    }

    fn diverged(&self, epoch: usize, batch: usize, step: &'static str, losses: LossBreakdown, alpha: f64) -> TrainError {
        TrainError::Diverged(Box::new(DivergenceReport {
            mode: self.cfg.mode,
            seed: self.seed,
            epoch,
            batch,
            step,
            losses,
            alpha,
            primary_param_norms: self.model.primary.params().map(Matrix::frobenius_norm).collect(),
            encoder_param_norms: self.model.encoder.params().map(Matrix::frobenius_norm).collect(),
        }))
    }

    /// Losses can stay finite (probabilities are floored) while weights
    /// overflow, so parameters are checked too.
    fn params_finite(&self) -> bool {
        [&self.model.primary, &self.model.encoder, &self.model.decoder]
            .iter()
            .all(|n| n.params().all(|m| m.validate().is_ok()))
    }

    fn batch_windows<'w>(ctx: &'w ConstraintContext, batch: &Batch) -> Vec<&'w TraceWindow> {
        batch.indices.iter().map(|&i| &ctx.windows[i]).collect()
    }

    fn batch_inputs(&self, batch: &Batch) -> Result<Matrix> {
        Ok(self.model.normalize(&self.data.features.select_rows(&batch.indices))?)
    }

    /// Latent-model steps on one batch with the classifier frozen. Returns
    /// the constraint loss before each step.
    pub fn latent_steps(&mut self, batch: &Batch, steps: usize) -> Result<Vec<f64>> {
        let x = self.batch_inputs(batch)?;
        let trace = self.model.primary.forward(&x, None)?;
        self.latent_updates(batch, trace.latent(), steps)
    }

    fn latent_updates(&mut self, batch: &Batch, latent: &Matrix, steps: usize) -> Result<Vec<f64>> {
        let Some(ctx) = self.constraint.as_ref() else {
            return Ok(Vec::new());
        };
        let windows = Self::batch_windows(ctx, batch);
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let l = loss_constraint(
                latent,
                &self.model.encoder,
                &self.model.decoder,
                &ctx.spec,
                &windows,
                &ctx.known,
                self.cfg.sigma,
            )?;
            history.push(l.total());
            self.opt_encoder.step(&mut self.model.encoder, &l.encoder_grads)?;
            self.opt_decoder.step(&mut self.model.decoder, &l.decoder_grads)?;
        }
        Ok(history)
    }

    /// Classifier steps on the constraint loss with the latent model frozen.
    /// Only the hidden layers move. `trace` is the classifier's current
    /// forward pass on `x`. Returns `(kl, penalty)` before the first step.
    fn classifier_constraint_updates(
        &mut self,
        batch: &Batch,
        x: &Matrix,
        trace: neural::ForwardTrace,
        steps: usize,
    ) -> Result<(f64, f64)> {
        let Some(ctx) = self.constraint.as_ref() else {
            return Ok((0.0, 0.0));
        };
        let windows = Self::batch_windows(ctx, batch);
        let top = self.model.primary.layers().len() - 1;
        let mut trace = trace;
        let mut first = None;
        for step in 0..steps.max(1) {
            if step > 0 {
                trace = self.model.primary.forward(x, None)?;
            }
            let l = loss_constraint(
                trace.latent(),
                &self.model.encoder,
                &self.model.decoder,
                &ctx.spec,
                &windows,
                &ctx.known,
                self.cfg.sigma,
            )?;
            first.get_or_insert((l.kl, l.penalty));
            if steps == 0 {
                break;
            }
            let grads = self.model.primary.backward_from(&trace, top, &l.latent_grad, false)?;
            self.opt_primary_constraint.step(&mut self.model.primary, &grads)?;
        }
        Ok(first.unwrap_or((0.0, 0.0)))
    }

    /// Supervised plus unlabeled-data step on the classifier. Returns `(l1, l2)`.
    fn classifier_step(&mut self, batch: &Batch, alpha: f64) -> Result<(f64, f64)> {
        let raw = self.data.features.select_rows(&batch.indices);
        let channels = self.data.manifest.n_gen.max(1);
        let aug = &self.cfg.augment;
        let shifted = gridsim::augment(&raw, &mut self.data_rng, 0.0, aug.max_shift, channels);
        // Noise is added after normalization, so its scale is relative to
        // each feature's standard deviation on the training split.
        let x = gridsim::augment(&self.model.normalize(&shifted)?, &mut self.data_rng, aug.noise_std, 0, channels);
        let trace = self.model.primary.forward(&x, None)?;
        let probs = &trace.output;
        let (l1, grad, l2) = match self.cfg.mode {
            Mode::SupervisedOnly => {
                let (l1, g) = loss_supervised(probs, &batch.labels)?;
                (l1, g, 0.0)
            }
            Mode::Hybrid | Mode::BaselineMeanteacher => {
                let (l1, mut g) = loss_supervised(probs, &batch.labels)?;
                let mut l2 = 0.0;
                if alpha != 0.0 {
                    let masks = self.teacher_masks(raw.rows());
                    let teacher = self
                        .model
                        .secondary
                        .forward(&self.model.normalize(&raw)?, Some(&masks))?
                        .output;
                    let (v, g2) = loss_consistency(probs, &teacher, alpha)?;
                    g.axpy(1.0, &g2)?;
                    l2 = v;
                }
                (l1, g, l2)
            }
            Mode::BaselinePseudolabel => {
                let lab: Vec<usize> = (0..batch.indices.len()).filter(|&r| batch.labels[r].is_some()).collect();
                let unl: Vec<usize> = (0..batch.indices.len()).filter(|&r| batch.labels[r].is_none()).collect();
                let y: Vec<usize> = lab.iter().map(|&r| batch.labels[r].expect("labeled")).collect();
                let pseudo = if alpha != 0.0 && !unl.is_empty() {
                    let x_u = self.model.normalize(&raw.select_rows(&unl))?;
                    self.model.secondary.forward(&x_u, None)?.output.argmax_rows()
                } else {
                    vec![0; unl.len()]
                };
                let (total, gl, gu) =
                    baseline_loss(&probs.select_rows(&lab), &y, &probs.select_rows(&unl), &pseudo, alpha)?;
                let mut g = Matrix::zeros(probs.rows(), probs.cols());
                for (k, &r) in lab.iter().enumerate() {
                    g.row_mut(r).copy_from_slice(gl.row(k));
                }
                if alpha != 0.0 {
                    for (k, &r) in unl.iter().enumerate() {
                        g.row_mut(r).copy_from_slice(gu.row(k));
                    }
                }
                let l1 = loss_supervised(&probs.select_rows(&lab), &y.iter().map(|&v| Some(v)).collect::<Vec<_>>())?.0;
                (l1, g, total - l1)
            }
        };
        // A non-finite loss is reported by the caller; skip the update.
        if l1.is_finite() && l2.is_finite() {
            let grads = self.model.primary.backward(&trace, &grad)?;
            self.opt_primary.step(&mut self.model.primary, &grads)?;
        }
        Ok((l1, l2))
    }

    fn teacher_step(&mut self, before: Option<Network>) -> Result<()> {
        match (self.cfg.ema_rule, before) {
            (EmaRule::StudentPair, Some(old)) => {
                let mut next = self.model.primary.clone();
                ema_update(&mut next, &old, self.cfg.ema_beta)?;
                self.model.secondary = next;
            }
            _ => ema_update(&mut self.model.secondary, &self.model.primary, self.cfg.ema_beta)?,
        }
        Ok(())
    }

    /// Runs one epoch and returns its metrics.
    pub fn run_epoch(&mut self, epoch: usize, observer: &mut dyn FnMut(StepEvent)) -> Result<EpochMetrics> {
        let start = Instant::now();
        let alpha = match self.cfg.mode {
            Mode::SupervisedOnly => 0.0,
            _ => hybrid::ramp(&self.cfg.ramp, epoch),
        };
        let batches = self.epoch_batches();
        let mut losses = LossBreakdown::default();
        let weight = 1.0 / batches.len().max(1) as f64;
        let hybrid = self.cfg.mode == Mode::Hybrid;
        for (b, batch) in batches.iter().enumerate() {
            let before = (self.cfg.ema_rule == EmaRule::StudentPair).then(|| self.model.primary.clone());
            let (mut kl, mut pen) = (0.0, 0.0);
            if hybrid && (self.cfg.e_steps > 0 || self.cfg.m_steps > 0) {
                let x = self.batch_inputs(batch)?;
                let trace = self.model.primary.forward(&x, None)?;
                if self.cfg.e_steps > 0 {
                    let hist = self.latent_updates(batch, trace.latent(), self.cfg.e_steps)?;
                    if hist.iter().any(|v| !v.is_finite()) {
                        return Err(self.diverged(epoch, b, "latent update", losses, alpha));
                    }
                    observer(StepEvent::LatentUpdate { epoch, batch: b });
                }
                (kl, pen) = self.classifier_constraint_updates(batch, &x, trace, self.cfg.m_steps)?;
                if !(kl.is_finite() && pen.is_finite()) {
                    let l = LossBreakdown::new(0.0, 0.0, kl, pen);
                    return Err(self.diverged(epoch, b, "classifier constraint update", l, alpha));
                }
                if self.cfg.m_steps > 0 {
                    observer(StepEvent::ClassifierConstraintUpdate { epoch, batch: b });
                }
            }
            let (l1, l2) = self.classifier_step(batch, alpha)?;
            let step_losses = LossBreakdown::new(l1, l2, kl, pen);
            if !step_losses.total.is_finite() || !self.params_finite() {
                return Err(self.diverged(epoch, b, "classifier update", step_losses, alpha));
            }
            observer(StepEvent::ClassifierUpdate { epoch, batch: b });
            losses.accumulate(&step_losses, weight);
            if self.cfg.mode.uses_teacher() {
                self.teacher_step(before)?;
                observer(StepEvent::TeacherUpdate { epoch, batch: b });
            }
        }
        let x_val = self.data.features.select_rows(&self.val_idx);
        let student = evaluate_net(&self.model, &self.model.primary, &x_val, &self.val_truth)?;
        let teacher = evaluate_net(&self.model, &self.model.secondary, &x_val, &self.val_truth)?;
        observer(StepEvent::EpochEnd { epoch });
        Ok(EpochMetrics {
            epoch,
            mode: self.cfg.mode,
            seed: self.seed,
            n_labeled: self.data.manifest.n_labeled,
            alpha,
            losses,
            val_accuracy: student.accuracy,
            val_error: student.error_rate,
            teacher_accuracy: teacher.accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains until the epoch budget or early stop.
    pub fn run(&mut self, observer: &mut dyn FnMut(StepEvent)) -> Result<Vec<EpochMetrics>> {
        let mut metrics: Vec<EpochMetrics> = Vec::new();
        for epoch in 0..self.cfg.epochs {
            metrics.push(self.run_epoch(epoch, observer)?);
            if should_stop(&metrics, self.cfg.early_stop_window, self.cfg.early_stop_tol) {
                break;
            }
        }
        Ok(metrics)
    }
}

/// True once the last `window + 1` validation errors span less than `tol`.
pub fn should_stop(metrics: &[EpochMetrics], window: usize, tol: f64) -> bool {
    if window == 0 || metrics.len() <= window {
        return false;
    }
    let recent = &metrics[metrics.len() - window - 1..];
    let (lo, hi) = recent.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
        (lo.min(m.val_error), hi.max(m.val_error))
    });
    hi - lo < tol
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: HybridModel,
    pub metrics: Vec<EpochMetrics>,
    pub n_labeled: usize,
}

pub fn train_observed(
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn FnMut(StepEvent),
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg, data, seed)?;
    let metrics = t.run(observer)?;
    Ok(TrainOutcome {
        n_labeled: t.data.manifest.n_labeled,
        model: t.model,
        metrics,
    })
}

/// Trains in the configured mode.
pub fn train(data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    train_observed(data, cfg, seed, &mut |_| {})
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub modes: Vec<Mode>,
    pub label_fractions: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Hybrid, Mode::BaselineMeanteacher],
            label_fractions: vec![0.0125, 0.025, 0.05, 0.10],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub mode: Mode,
    pub label_fraction: f64,
    pub seed: u64,
    pub n_labels: usize,
    pub accuracy: f64,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub label_fraction: f64,
    pub n_labels: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub seeds: Vec<u64>,
}

/// Trains every `(mode, fraction, seed)` cell of the grid in parallel and
/// aggregates the final validation accuracies. `on_cell` sees each finished
/// cell (in completion order).
pub fn sweep(
    data: &Dataset,
    template: &TrainConfig,
    grid: &SweepConfig,
    on_cell: &(dyn Fn(&SweepCell) -> Result<()> + Sync),
) -> Result<(Vec<SweepCell>, Vec<SweepRow>)> {
    if grid.modes.is_empty() || grid.label_fractions.is_empty() {
        return Err(TrainError::Config("sweep grid is empty".into()));
    }
    let mut jobs = Vec::new();
    for &mode in &grid.modes {
        for &fraction in &grid.label_fractions {
            for &seed in &template.seeds {
                jobs.push((mode, fraction, seed));
            }
        }
    }
    let cells: Vec<SweepCell> = jobs
        .par_iter()
        .map(|&(mode, fraction, seed)| {
            let cfg = TrainConfig {
                mode,
                label_fraction: Some(fraction),
                ..template.clone()
            };
            let out = train(data, &cfg, seed)?;
            let cell = SweepCell {
                mode,
                label_fraction: fraction,
                seed,
                n_labels: out.n_labeled,
                accuracy: out.metrics.last().map_or(0.0, |m| m.val_accuracy),
                metrics: out.metrics,
            };
            on_cell(&cell)?;
            Ok(cell)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &mode in &grid.modes {
        for &fraction in &grid.label_fractions {
            let group: Vec<&SweepCell> = cells
                .iter()
                .filter(|c| c.mode == mode && c.label_fraction == fraction)
                .collect();
            let acc: Vec<f64> = group.iter().map(|c| c.accuracy).collect();
            let (mean_acc, std_acc) = mean_std(&acc);
            rows.push(SweepRow {
                mode,
                label_fraction: fraction,
                n_labels: group.first().map_or(0, |c| c.n_labels),
                mean_acc,
                std_acc,
                seeds: group.iter().map(|c| c.seed).collect(),
            });
        }
    }
    Ok((cells, rows))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// One JSON object per line.
pub fn write_metrics_jsonl(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<EpochMetrics>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            msg: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

pub const RESULTS_HEADER: &str = "mode,label_fraction,n_labels,mean_acc,std_acc,seeds";

pub fn results_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mode.name(),
            r.label_fraction,
            r.n_labels,
            r.mean_acc,
            r.std_acc,
            seeds.join(";")
        ));
    }
    out
}

pub fn write_results_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(results_csv(rows).as_bytes()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metric(epoch: usize, err: f64) -> EpochMetrics {
        EpochMetrics {
            epoch,
            mode: Mode::Hybrid,
            seed: 0,
            n_labeled: 1,
            alpha: 0.0,
            losses: LossBreakdown::default(),
            val_accuracy: 1.0 - err,
            val_error: err,
            teacher_accuracy: 1.0 - err,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[0.9, 1.0]);
        assert!((m - 0.95).abs() < 1e-15);
        assert!((s - 0.05).abs() < 1e-15);
    }

    #[test]
    fn early_stop_window() {
        let flat: Vec<EpochMetrics> = (0..21).map(|e| metric(e, 0.1)).collect();
        assert!(should_stop(&flat, 20, 1e-4));
        assert!(!should_stop(&flat[..20], 20, 1e-4));
        let mut moving = flat.clone();
        moving[5].val_error = 0.2;
        assert!(!should_stop(&moving, 20, 1e-4));
        assert!(!should_stop(&flat, 0, 1e-4));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let probs = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]).unwrap();
        let e = accuracy_from_probs(&probs, &[0, 1, 0]);
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.accuracy + e.error_rate, 1.0);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(toml::from_str::<TrainConfig>("epochs = 3\nbogus = 1\n").is_err());
        let bad = TrainConfig {
            ema_beta: 1.5,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let typo = "[optimizer]\nlearning_rate = 0.1\nkind = \"adam\"\nbeta1 = 0.9\nbeta2 = 0.99\nepsilon = 1e-8\nmomentun = 0.5\n";
        assert!(toml::from_str::<TrainConfig>(typo).is_err());
        let inf: TrainConfig = toml::from_str("sigma = inf\n").unwrap();
        assert!(inf.sigma.is_infinite());
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in [Mode::Hybrid, Mode::BaselineMeanteacher, Mode::BaselinePseudolabel, Mode::SupervisedOnly] {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }

    #[test]
    fn csv_layout() {
        let rows = vec![SweepRow {
            mode: Mode::Hybrid,
            label_fraction: 0.0125,
            n_labels: 90,
            mean_acc: 0.95,
            std_acc: 0.05,
            seeds: vec![0, 1],
        }];
        assert_eq!(
            results_csv(&rows),
            "mode,label_fraction,n_labels,mean_acc,std_acc,seeds\nhybrid,0.0125,90,0.95,0.05,0;1\n"
        );
    }
}
