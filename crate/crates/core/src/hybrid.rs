//! The three-model assembly and its losses.
//!
//! All loss functions return gradients with respect to the final-layer
//! outputs before the head (logits for the classifiers), ready for
//! [`Network::backward`].

use crate::constraints::{self, ConstraintError, ConstraintSpec, KnownParams, TraceWindow};
use crate::neural::{Checkpoint, NeuralError, Network, OutputHead, ParamGrads};
use crate::numkit::{Matrix, NumError, Rng};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Probability floor applied before every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum HybridError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error("label {label} out of range for {classes} classes (row {row})")]
    Label { row: usize, label: usize, classes: usize },
    #[error("invalid model: {0}")]
    Model(String),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HybridError>;

/// Layer widths of the three models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Hidden widths of the classifier; the last one is the latent width.
    pub hidden: Vec<usize>,
    /// Hidden widths of the latent encoder. The decoder mirrors them.
    pub encoder_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64, 32],
            encoder_hidden: vec![64, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub primary: Network,
    pub secondary: Network,
    pub encoder: Network,
    pub decoder: Network,
    /// Per-column input shift and scale, `1 x input_dim`.
    pub input_mean: Matrix,
    pub input_scale: Matrix,
}

impl HybridModel {
    pub fn new(
        input_dim: usize,
        classes: usize,
        z_dim: usize,
        arch: &Architecture,
        rng: &Rng,
    ) -> Result<Self> {
        if arch.hidden.is_empty() {
            return Err(HybridError::Model("classifier needs a hidden layer".into()));
        }
        let mut widths = vec![input_dim];
        widths.extend(&arch.hidden);
        widths.push(classes);
        let primary = Network::new(&widths, OutputHead::Softmax, &mut rng.fork(0))?;
        let latent = primary.latent_width();
        let mut enc = vec![latent];
        enc.extend(&arch.encoder_hidden);
        enc.push(z_dim);
        let mut dec: Vec<usize> = enc.iter().rev().copied().collect();
        *dec.last_mut().expect("non-empty") = latent;
        let encoder = Network::new(&enc, OutputHead::Identity, &mut rng.fork(1))?;
        let decoder = Network::new(&dec, OutputHead::Identity, &mut rng.fork(2))?;
        let model = Self {
            secondary: primary.clone(),
            primary,
            encoder,
            decoder,
            input_mean: Matrix::zeros(1, input_dim),
            input_scale: Matrix::filled(1, input_dim, 1.0),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.primary.same_architecture(&self.secondary) {
            return Err(HybridError::Model("primary and secondary differ".into()));
        }
        let latent = self.primary.latent_width();
        if self.encoder.input_width() != latent || self.decoder.output_width() != latent {
            return Err(HybridError::Model(format!(
                "encoder input {} / decoder output {} do not match latent width {latent}",
                self.encoder.input_width(),
                self.decoder.output_width()
            )));
        }
        if self.decoder.input_width() != self.encoder.output_width() {
            return Err(HybridError::Model("decoder input does not match encoder output".into()));
        }
        let d = self.primary.input_width();
        if self.input_mean.shape() != (1, d) || self.input_scale.shape() != (1, d) {
            return Err(HybridError::Model("normalization rows do not match input width".into()));
        }
        if self.input_scale.as_slice().iter().any(|s| *s <= 0.0) {
            return Err(HybridError::Model("non-positive input scale".into()));
        }
        Ok(())
    }

    /// Sets the input normalization from the rows of `x` (zero mean, unit
    /// variance per column; constant columns keep scale 1).
    pub fn fit_normalization(&mut self, x: &Matrix) {
        let n = x.rows().max(1) as f64;
        let mean = x.col_sums().scale(1.0 / n);
        let mut var = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (c, v) in x.row(r).iter().enumerate() {
                let d = v - mean.get(0, c);
                var.set(0, c, var.get(0, c) + d * d / n);
            }
        }
        self.input_scale = var.map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
        self.input_mean = mean;
    }

    pub fn normalize(&self, x: &Matrix) -> Result<Matrix> {
        let shifted = x.add_row_broadcast(&self.input_mean.scale(-1.0))?;
        let inv = self.input_scale.map(|s| 1.0 / s);
        let mut out = shifted;
        for r in 0..out.rows() {
            for (v, k) in out.row_mut(r).iter_mut().zip(inv.as_slice()) {
                *v *= k;
            }
        }
        Ok(out)
    }

    /// Class probabilities of the primary model in inference mode.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.primary.forward(&self.normalize(x)?, None)?.output)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            networks: vec![
                self.primary.clone(),
                self.secondary.clone(),
                self.encoder.clone(),
                self.decoder.clone(),
            ],
            extras: vec![self.input_mean.clone(), self.input_scale.clone()],
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let (Ok([primary, secondary, encoder, decoder]), Ok([input_mean, input_scale])) = (
            <[Network; 4]>::try_from(ck.networks),
            <[Matrix; 2]>::try_from(ck.extras),
        ) else {
            return Err(HybridError::Model(
                "checkpoint must hold 4 networks and 2 normalization rows".into(),
            ));
        };
        let model = Self {
            primary,
            secondary,
            encoder,
            decoder,
            input_mean,
            input_scale,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| HybridError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::new();
        self.to_checkpoint().write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| HybridError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_checkpoint(Checkpoint::read_from(&mut bytes.as_slice())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampShape {
    SigmoidExp,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RampUp {
    pub alpha_max: f64,
    pub ramp_epochs: usize,
    pub shape: RampShape,
}

impl Default for RampUp {
    fn default() -> Self {
        Self {
            alpha_max: 1.0,
            ramp_epochs: 30,
            shape: RampShape::SigmoidExp,
        }
    }
}

/// Weight of the unlabeled-data loss at `epoch`.
///
/// The sigmoid shape starts at `alpha_max * exp(-5)`, not exactly zero.
pub fn ramp(r: &RampUp, epoch: usize) -> f64 {
    if r.ramp_epochs == 0 {
        return r.alpha_max;
    }
    let x = epoch.min(r.ramp_epochs) as f64 / r.ramp_epochs as f64;
    match r.shape {
        RampShape::SigmoidExp => r.alpha_max * (-5.0 * (1.0 - x) * (1.0 - x)).exp(),
        RampShape::Linear => r.alpha_max * x,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3_kl: f64,
    pub l3_penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l1: f64, l2: f64, l3_kl: f64, l3_penalty: f64) -> Self {
        Self {
            l1,
            l2,
            l3_kl,
            l3_penalty,
            total: l1 + l2 + l3_kl + l3_penalty,
        }
    }

    /// Componentwise sum (used to average over batches).
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        *self = Self::new(
            self.l1 + weight * other.l1,
            self.l2 + weight * other.l2,
            self.l3_kl + weight * other.l3_kl,
            self.l3_penalty + weight * other.l3_penalty,
        );
    }
}

fn check_label(row: usize, label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(HybridError::Label { row, label, classes });
    }
    Ok(())
}

/// Mean cross-entropy over rows with a label; unlabeled rows (`None`)
/// contribute nothing. Gradient is `(p - y) / n_labeled` on labeled rows.
pub fn loss_supervised(probs: &Matrix, labels: &[Option<usize>]) -> Result<(f64, Matrix)> {
    if labels.len() != probs.rows() {
        return Err(HybridError::Model(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.rows()
        )));
    }
    let classes = probs.cols();
    let mut grad = Matrix::zeros(probs.rows(), classes);
    let n = labels.iter().flatten().count();
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    for (r, label) in labels.iter().enumerate() {
        let Some(y) = *label else { continue };
        check_label(r, y, classes)?;
        loss -= probs.get(r, y).max(PROB_FLOOR).ln();
        let g = grad.row_mut(r);
        for (c, p) in probs.row(r).iter().enumerate() {
            g[c] = (p - if c == y { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((loss * inv, grad))
}

/// `alpha * mean_rows KL(teacher || student)`, teacher held constant.
pub fn loss_consistency(student: &Matrix, teacher: &Matrix, alpha: f64) -> Result<(f64, Matrix)> {
    if student.shape() != teacher.shape() {
        return Err(NumError::Shape {
            op: "loss_consistency",
            left: student.shape(),
            right: teacher.shape(),
        }
        .into());
    }
    let n = student.rows();
    let mut grad = Matrix::zeros(n, student.cols());
    if n == 0 || alpha == 0.0 {
        return Ok((0.0, grad));
    }
    let k = alpha / n as f64;
    let mut total = 0.0;
    for r in 0..n {
        let (s, t) = (student.row(r), teacher.row(r));
        let mass: f64 = t.iter().sum();
        for c in 0..s.len() {
            let tf = t[c].max(PROB_FLOOR);
            total += t[c] * (tf / s[c].max(PROB_FLOOR)).ln();
        }
        let g = grad.row_mut(r);
        for c in 0..s.len() {
            g[c] = k * (s[c] * mass - t[c]);
        }
    }
    Ok((k * total, grad))
}

/// Value and gradients of the constraint loss on one batch.
#[derive(Debug, Clone)]
pub struct ConstraintLoss {
    pub kl: f64,
    pub penalty: f64,
    pub latent_grad: Matrix,
    pub encoder_grads: ParamGrads,
    pub decoder_grads: ParamGrads,
    /// Parameter estimates `z_reference + encoder(latent)`, one row per sample.
    pub z_hat: Matrix,
}

impl ConstraintLoss {
    pub fn total(&self) -> f64 {
        self.kl + self.penalty
    }
}

/// Latent KL plus constraint penalty.
///
/// `z_hat = z_reference + encoder(latent)` and `latent_hat =
/// decoder(encoder(latent))`. The KL term is `mean ||latent_hat -
/// latent||^2 / (2 sigma^2)`; an infinite `sigma` drops it. The penalty is
/// evaluated on batch expectations of the constraint terms at `z_hat`.
pub fn loss_constraint(
    latent: &Matrix,
    encoder: &Network,
    decoder: &Network,
    spec: &ConstraintSpec,
    windows: &[&TraceWindow],
    known: &KnownParams,
    sigma: f64,
) -> Result<ConstraintLoss> {
    if latent.rows() != windows.len() {
        return Err(HybridError::Model(format!(
            "{} latent rows for {} windows",
            latent.rows(),
            windows.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(HybridError::Model(format!("sigma must be positive, got {sigma}")));
    }
    let n = latent.rows().max(1) as f64;
    let enc = encoder.forward(latent, None)?;
    let offset = &enc.output;
    let z_ref = Matrix::row_vector(&known.z_reference)?;
    let z_hat = offset.add_row_broadcast(&z_ref)?;

    let (penalty, mut grad_offset) = if spec.gamma == 0.0 {
        (0.0, Matrix::zeros(offset.rows(), offset.cols()))
    } else {
        constraints::penalty_grad(spec, &z_hat, windows, known)?
    };

    let mut latent_grad = Matrix::zeros(latent.rows(), latent.cols());
    let (kl, decoder_grads) = if sigma.is_finite() {
        let dec = decoder.forward(offset, None)?;
        let diff = dec.output.sub(latent)?;
        let kl = diff.as_slice().iter().map(|v| v * v).sum::<f64>() / (2.0 * sigma * sigma * n);
        let d_hat = diff.scale(1.0 / (sigma * sigma * n));
        let grads = decoder.backward(&dec, &d_hat)?;
        grad_offset.axpy(1.0, &grads.input)?;
        latent_grad.axpy(-1.0, &d_hat)?;
        (kl, grads)
    } else {
        (0.0, ParamGrads::zeros_like(decoder, latent.rows()))
    };
    let encoder_grads = encoder.backward(&enc, &grad_offset)?;
    latent_grad.axpy(1.0, &encoder_grads.input)?;
    Ok(ConstraintLoss {
        kl,
        penalty,
        latent_grad,
        encoder_grads,
        decoder_grads,
        z_hat,
    })
}

/// Pseudo-label loss: cross-entropy on labeled rows plus `alpha` times
/// cross-entropy of the unlabeled rows against hard teacher labels.
/// Returns the value and the logit gradients of both parts.
pub fn baseline_loss(
    probs_labeled: &Matrix,
    labels: &[usize],
    probs_unlabeled: &Matrix,
    pseudo_labels: &[usize],
    alpha: f64,
) -> Result<(f64, Matrix, Matrix)> {
    let wrap = |v: &[usize]| v.iter().map(|&y| Some(y)).collect::<Vec<_>>();
    let (l, gl) = loss_supervised(probs_labeled, &wrap(labels))?;
    let (u, gu) = loss_supervised(probs_unlabeled, &wrap(pseudo_labels))?;
    Ok((l + alpha * u, gl, gu.scale(alpha)))
}
