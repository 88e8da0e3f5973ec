//! Kron-reduced multi-machine swing-equation simulator and the outage
//! dataset built on it.
//!
//! Machine `i` obeys
//!
//! ```text
//! d(theta_i)/dt = omega_i
//! M_i d(omega_i)/dt = -D_i omega_i + P_mi - |E_i|^2 G_ii
//!                     - sum_{j != i} P_ij sin(theta_i - theta_j + phi_ij)
//! P_ij = |E_i||E_j| sqrt(G_ij^2 + B_ij^2),  phi_ij = atan2(G_ij, B_ij)
//! ```
//!
//! with `omega` the deviation from synchronous speed in rad/s. An outage is
//! a switch to a re-reduced network at a fixed event time.

use crate::numkit::{Matrix, NumError, Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// Bundled WSCC 9-bus parameter file (see `tools/wscc_kron.py`).
pub const WSCC9_PARAMS: &str = include_str!("../data/wscc9.toml");

/// `|omega|` above this (rad/s) aborts integration.
pub const DIVERGENCE_LIMIT: f64 = 10.0 * 2.0 * std::f64::consts::PI * 60.0;

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("invalid grid model: {0}")]
    InvalidModel(String),
    #[error("parameter file: {0}")]
    ParamFile(String),
    #[error("unstable trajectory: |omega_{generator}| = {omega:.3e} rad/s at t = {time:.4} s")]
    Instability {
        time: f64,
        generator: usize,
        omega: f64,
    },
    #[error("scenario {class_id} ({description}), sample {sample}: {source}")]
    Scenario {
        class_id: usize,
        description: String,
        sample: usize,
        #[source]
        source: Box<GridError>,
    },
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("dataset file {path}: {msg}")]
    DatasetFile { path: PathBuf, msg: String },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, GridError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GridError + '_ {
    move |source| GridError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    /// Inertia `M_i` (pu s^2/rad).
    pub m: Vec<f64>,
    /// Damping `D_i` (pu s/rad).
    pub d: Vec<f64>,
    pub e_mag: Vec<f64>,
    pub p_m: Vec<f64>,
    pub g: Matrix,
    pub b: Matrix,
}

/// Coupling coefficients derived from a [`GridModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    /// `P_mi - |E_i|^2 G_ii`
    pub effective_power: Vec<f64>,
    /// `P_ij`, zero on the diagonal.
    pub magnitude: Matrix,
    /// `phi_ij`, zero on the diagonal.
    pub phase: Matrix,
}

impl GridModel {
    pub fn n_gen(&self) -> usize {
        self.m.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_gen();
        let bad = |msg: String| Err(GridError::InvalidModel(msg));
        if n == 0 {
            return bad("no generators".into());
        }
        if [self.d.len(), self.e_mag.len(), self.p_m.len()] != [n, n, n] {
            return bad("per-generator vectors differ in length".into());
        }
        if self.g.shape() != (n, n) || self.b.shape() != (n, n) {
            return bad(format!("G/B must be {n}x{n}"));
        }
        for i in 0..n {
            if !(self.m[i] > 0.0) {
                return bad(format!("M_{i} = {} must be positive", self.m[i]));
            }
            if !(self.d[i] >= 0.0) {
                return bad(format!("D_{i} = {} must be non-negative", self.d[i]));
            }
            if !(self.e_mag[i] > 0.0) {
                return bad(format!("|E_{i}| = {} must be positive", self.e_mag[i]));
            }
            for j in 0..n {
                let tol = 1e-12 * (1.0 + self.g.get(i, j).abs().max(self.b.get(i, j).abs()));
                if (self.g.get(i, j) - self.g.get(j, i)).abs() > tol
                    || (self.b.get(i, j) - self.b.get(j, i)).abs() > tol
                {
                    return bad(format!("G/B not symmetric at ({i}, {j})"));
                }
            }
        }
        if self.p_m.iter().chain(&self.m).chain(&self.d).any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }

    pub fn coupling(&self) -> Coupling {
        let n = self.n_gen();
        let mut magnitude = Matrix::zeros(n, n);
        let mut phase = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let (g, b) = (self.g.get(i, j), self.b.get(i, j));
                    magnitude.set(i, j, self.e_mag[i] * self.e_mag[j] * g.hypot(b));
                    phase.set(i, j, g.atan2(b));
                }
            }
        }
        let effective_power = (0..n)
            .map(|i| self.p_m[i] - self.e_mag[i] * self.e_mag[i] * self.g.get(i, i))
            .collect();
        Coupling {
            effective_power,
            magnitude,
            phase,
        }
    }

    /// Copy with `P_m` multiplied entrywise by `scale`.
    pub fn with_pm_scale(&self, scale: &[f64]) -> Self {
        let mut out = self.clone();
        for (p, s) in out.p_m.iter_mut().zip(scale) {
            *p *= s;
        }
        out
    }

    /// Copy with the network (`G`, `B`) of `other`.
    pub fn with_network(&self, g: Matrix, b: Matrix) -> Self {
        Self {
            g,
            b,
            ..self.clone()
        }
    }
}

struct SwingSystem<'a> {
    model: &'a GridModel,
    coupling: Coupling,
}

impl<'a> SwingSystem<'a> {
    fn new(model: &'a GridModel) -> Self {
        Self {
            coupling: model.coupling(),
            model,
        }
    }

    fn rhs(&self, theta: &[f64], omega: &[f64], dtheta: &mut [f64], domega: &mut [f64]) {
        let n = theta.len();
        let c = &self.coupling;
        for i in 0..n {
            let mut acc = c.effective_power[i] - self.model.d[i] * omega[i];
            for j in 0..n {
                if j != i {
                    acc -= c.magnitude.get(i, j) * (theta[i] - theta[j] + c.phase.get(i, j)).sin();
                }
            }
            dtheta[i] = omega[i];
            domega[i] = acc / self.model.m[i];
        }
    }
}

/// Right-hand side of the swing equation: `(dtheta/dt, domega/dt)`.
pub fn swing_rhs(model: &GridModel, theta: &[f64], omega: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = model.n_gen();
    assert_eq!(theta.len(), n);
    assert_eq!(omega.len(), n);
    let mut dtheta = vec![0.0; n];
    let mut domega = vec![0.0; n];
    SwingSystem::new(model).rhs(theta, omega, &mut dtheta, &mut domega);
    (dtheta, domega)
}

/// Sampled trajectory; row `k` is the state at `t = k * dt` (row 0 is the
/// initial state, so a run of `steps` steps has `steps + 1` rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub dt: f64,
    pub omega: Matrix,
    pub theta: Matrix,
}

impl Trace {
    pub fn steps(&self) -> usize {
        self.omega.rows() - 1
    }
}

/// A parameter switch applied at `time`.
#[derive(Debug, Clone, Copy)]
pub struct Event<'a> {
    pub time: f64,
    pub post_model: &'a GridModel,
}

/// Classic fourth-order Runge-Kutta. The model switches at the first step
/// boundary at or after the event time.
pub fn integrate_rk4(
    model: &GridModel,
    theta0: &[f64],
    omega0: &[f64],
    dt: f64,
    steps: usize,
    event: Option<Event<'_>>,
) -> Result<Trace> {
    if !(dt > 0.0) {
        return Err(GridError::Config(format!("dt = {dt} must be positive")));
    }
    model.validate()?;
    let n = model.n_gen();
    if theta0.len() != n || omega0.len() != n {
        return Err(GridError::InvalidModel("initial state length".into()));
    }
    let pre = SwingSystem::new(model);
    let post = match event {
        Some(e) => {
            e.post_model.validate()?;
            if e.post_model.n_gen() != n {
                return Err(GridError::InvalidModel("post-event model size".into()));
            }
            Some((((e.time / dt) - 1e-9).ceil().max(0.0) as usize, SwingSystem::new(e.post_model)))
        }
        None => None,
    };
    let mut th = theta0.to_vec();
    let mut om = omega0.to_vec();
    let mut omega_out = Vec::with_capacity((steps + 1) * n);
    let mut theta_out = Vec::with_capacity((steps + 1) * n);
    omega_out.extend_from_slice(&om);
    theta_out.extend_from_slice(&th);
    // k[stage] = (dtheta, domega)
    let mut k = vec![(vec![0.0; n], vec![0.0; n]); 4];
    let mut tmp_th = vec![0.0; n];
    let mut tmp_om = vec![0.0; n];
    for s in 0..steps {
        let sys = match &post {
            Some((switch, post_sys)) if s >= *switch => post_sys,
            _ => &pre,
        };
        for stage in 0..4 {
            let h = match stage {
                0 => 0.0,
                1 | 2 => 0.5 * dt,
                _ => dt,
            };
            if stage == 0 {
                tmp_th.copy_from_slice(&th);
                tmp_om.copy_from_slice(&om);
            } else {
                let (prev_th, prev_om) = &k[stage - 1];
                for i in 0..n {
                    tmp_th[i] = th[i] + h * prev_th[i];
                    tmp_om[i] = om[i] + h * prev_om[i];
                }
            }
            let (kt, kw) = &mut k[stage];
            sys.rhs(&tmp_th, &tmp_om, kt, kw);
        }
        for i in 0..n {
            th[i] += dt / 6.0 * (k[0].0[i] + 2.0 * k[1].0[i] + 2.0 * k[2].0[i] + k[3].0[i]);
            om[i] += dt / 6.0 * (k[0].1[i] + 2.0 * k[1].1[i] + 2.0 * k[2].1[i] + k[3].1[i]);
        }
        for (i, &w) in om.iter().enumerate() {
            if !(w.abs() <= DIVERGENCE_LIMIT) {
                return Err(GridError::Instability {
                    time: (s + 1) as f64 * dt,
                    generator: i,
                    omega: w,
                });
            }
        }
        omega_out.extend_from_slice(&om);
        theta_out.extend_from_slice(&th);
    }
    Ok(Trace {
        dt,
        omega: Matrix::from_raw(steps + 1, n, omega_out),
        theta: Matrix::from_raw(steps + 1, n, theta_out),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutageScenario {
    pub class_id: usize,
    pub post_outage_model: GridModel,
    pub event_time: f64,
    pub description: String,
}

/// Base model, its equilibrium rotor angles and the outage table.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub name: String,
    pub base: GridModel,
    pub initial_angles: Vec<f64>,
    pub scenarios: Vec<OutageScenario>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamFile {
    meta: ParamMeta,
    base: BaseSection,
    scenario: Vec<ScenarioSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamMeta {
    name: String,
    #[allow(dead_code)]
    base_mva: f64,
    #[allow(dead_code)]
    frequency_hz: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseSection {
    m: Vec<f64>,
    d: Vec<f64>,
    e_mag: Vec<f64>,
    p_m: Vec<f64>,
    delta0: Vec<f64>,
    g: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSection {
    class_id: usize,
    description: String,
    g: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

fn square(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    Matrix::from_rows(rows).map_err(|e| GridError::ParamFile(format!("{what}: {e}")))
}

/// Parses a grid parameter file (TOML; schema documented in the README).
pub fn parse_grid_params(text: &str, event_time: f64) -> Result<GridCase> {
    let file: ParamFile = toml::from_str(text).map_err(|e| GridError::ParamFile(e.to_string()))?;
    let base = GridModel {
        m: file.base.m,
        d: file.base.d,
        e_mag: file.base.e_mag,
        p_m: file.base.p_m,
        g: square(&file.base.g, "base.g")?,
        b: square(&file.base.b, "base.b")?,
    };
    base.validate()?;
    if file.base.delta0.len() != base.n_gen() {
        return Err(GridError::ParamFile("delta0 length".into()));
    }
    let mut scenarios = Vec::with_capacity(file.scenario.len());
    for s in file.scenario {
        let post = base.with_network(
            square(&s.g, &format!("scenario {} g", s.class_id))?,
            square(&s.b, &format!("scenario {} b", s.class_id))?,
        );
        post.validate()
            .map_err(|e| GridError::ParamFile(format!("scenario {}: {e}", s.class_id)))?;
        scenarios.push(OutageScenario {
            class_id: s.class_id,
            post_outage_model: post,
            event_time,
            description: s.description,
        });
    }
    let mut ids: Vec<usize> = scenarios.iter().map(|s| s.class_id).collect();
    ids.sort_unstable();
    if ids.iter().enumerate().any(|(i, &c)| i != c) {
        return Err(GridError::ParamFile(format!(
            "scenario class ids must be 0..{} exactly once, got {ids:?}",
            scenarios.len()
        )));
    }
    scenarios.sort_by_key(|s| s.class_id);
    Ok(GridCase {
        name: file.meta.name,
        base,
        initial_angles: file.base.delta0,
        scenarios,
    })
}

/// Loads the configured parameter file (or the bundled WSCC case).
pub fn build_wscc_scenarios(config: &SimConfig) -> Result<GridCase> {
    let text = match &config.param_file {
        Some(path) => fs::read_to_string(path).map_err(io_err(path))?,
        None => WSCC9_PARAMS.to_string(),
    };
    parse_grid_params(&text, config.event_time)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFormat {
    #[default]
    Binary,
    Csv,
}

/// Data-generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub samples_per_class: usize,
    /// Simulated seconds per sample.
    pub duration: f64,
    /// Integration rate; `dt = 1 / steps_per_second`.
    pub steps_per_second: usize,
    pub event_time: f64,
    /// Downsampled points per generator in the post-event window.
    pub window: usize,
    /// Relative spread of the uniform `P_m` perturbation per generator.
    pub pm_spread: f64,
    pub label_fraction: f64,
    pub val_fraction: f64,
    /// Seconds after the event before frequency synchronization is checked.
    pub settle_time: f64,
    /// Quantile of the per-sample statistics used for `c_sync` / `c_phase`.
    pub bound_quantile: f64,
    pub seed: u64,
    pub param_file: Option<PathBuf>,
    pub feature_format: FeatureFormat,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 800,
            duration: 3.0,
            steps_per_second: 600,
            event_time: 0.5,
            window: 60,
            pm_spread: 0.05,
            label_fraction: 0.0125,
            val_fraction: 0.2,
            settle_time: 1.0,
            bound_quantile: 0.99,
            seed: 2024,
            param_file: None,
            feature_format: FeatureFormat::Binary,
        }
    }
}

/// Step layout derived from a [`SimConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub dt: f64,
    pub steps: usize,
    pub event_step: usize,
    pub stride: usize,
    pub window_dt: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GridError::Config(m));
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad(format!("label_fraction {} not in (0, 1]", self.label_fraction));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} not in [0, 1)", self.val_fraction));
        }
        if !(0.0..1.0).contains(&self.pm_spread) {
            return bad(format!("pm_spread {} not in [0, 1)", self.pm_spread));
        }
        if !(0.0..=1.0).contains(&self.bound_quantile) {
            return bad("bound_quantile not in [0, 1]".into());
        }
        if self.window < 3 {
            return bad("window must hold at least 3 points".into());
        }
        let t = self.timing_unchecked();
        if t.event_step >= t.steps {
            return bad("event must happen before the end of the simulation".into());
        }
        if (t.steps - t.event_step) % self.window != 0 {
            return bad(format!(
                "{} post-event steps do not split into {} window points",
                t.steps - t.event_step,
                self.window
            ));
        }
        if self.settle_time < 0.0 || self.settle_time >= self.duration - self.event_time {
            return bad("settle_time must fall inside the post-event window".into());
        }
        Ok(())
    }

    fn timing_unchecked(&self) -> Timing {
        let rate = self.steps_per_second.max(1) as f64;
        let steps = (self.duration * rate).round() as usize;
        let event_step = (self.event_time * rate).round() as usize;
        let stride = steps.saturating_sub(event_step) / self.window.max(1);
        Timing {
            dt: 1.0 / rate,
            steps,
            event_step,
            stride,
            window_dt: stride as f64 / rate,
        }
    }

    pub fn timing(&self) -> Result<Timing> {
        self.validate()?;
        Ok(self.timing_unchecked())
    }

    /// Index of the first window point counted as settled.
    pub fn settle_index(&self) -> Result<usize> {
        let t = self.timing()?;
        Ok(((self.settle_time / t.window_dt).round() as usize).min(self.window - 1))
    }
}

/// Simulator ground truth for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    pub class_id: usize,
    pub pm_scale: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub case_name: String,
    pub class_count: usize,
    pub class_descriptions: Vec<String>,
    pub n_samples: usize,
    pub n_gen: usize,
    pub window: usize,
    pub window_dt: f64,
    pub feature_dim: usize,
    pub seed: u64,
    pub label_fraction: f64,
    pub n_labeled: usize,
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// Label vector with `-1` for unlabeled samples.
    pub labels: Vec<i64>,
    pub class_counts: Vec<usize>,
    pub labeled_class_counts: Vec<usize>,
    /// Calibrated frequency-synchronization bound (rad/s).
    pub c_sync: f64,
    /// Calibrated phase-cohesiveness bound (rad).
    pub c_phase: f64,
    pub settle_index: usize,
    /// Known machine constants for the constraint set.
    pub inertia: Vec<f64>,
    pub damping: Vec<f64>,
    pub truth: Vec<SampleTruth>,
    pub feature_file: String,
    pub theta0_file: String,
    pub config: SimConfig,
}

/// Features are `samples x (n_gen * window)`, channel-major: the `window`
/// points of generator 0, then generator 1, and so on. `theta0` holds the
/// rotor angles at the first window point.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub theta0: Matrix,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn labels(&self) -> &[i64] {
        &self.manifest.labels
    }

    pub fn class_count(&self) -> usize {
        self.manifest.class_count
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    /// Training indices (labeled and unlabeled), ascending.
    pub fn train_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .manifest
            .labeled_indices
            .iter()
            .chain(&self.manifest.unlabeled_indices)
            .copied()
            .collect();
        idx.sort_unstable();
        idx
    }

    /// Re-draws the labeled training subset for a new fraction, keeping the
    /// validation split.
    pub fn relabel(&self, label_fraction: f64, rng: &mut Rng) -> Result<Dataset> {
        if !(label_fraction > 0.0 && label_fraction <= 1.0) {
            return Err(GridError::Config(format!(
                "label_fraction {label_fraction} not in (0, 1]"
            )));
        }
        let mut out = self.clone();
        let classes: Vec<usize> = self.manifest.truth.iter().map(|t| t.class_id).collect();
        let train = self.train_indices();
        apply_label_split(&mut out.manifest, &classes, &train, label_fraction, rng);
        out.manifest.label_fraction = label_fraction;
        out.manifest.config.label_fraction = label_fraction;
        Ok(out)
    }
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return 0.0;
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn apply_label_split(
    manifest: &mut Manifest,
    classes: &[usize],
    train: &[usize],
    label_fraction: f64,
    rng: &mut Rng,
) {
    let c = manifest.class_count;
    let total = classes.len();
    let n_labeled = ((label_fraction * total as f64).round() as usize).min(train.len());
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
    for &i in train {
        pools[classes[i]].push(i);
    }
    for pool in pools.iter_mut() {
        rng.shuffle(pool);
    }
    // Stratified quota: floor(n/C) each, remainder to random classes with room.
    let mut quota = vec![n_labeled / c; c];
    let mut order: Vec<usize> = (0..c).collect();
    rng.shuffle(&mut order);
    let mut remaining = n_labeled - quota.iter().sum::<usize>();
    for &k in order.iter().cycle().take(c * 4) {
        if remaining == 0 {
            break;
        }
        if quota[k] < pools[k].len() {
            quota[k] += 1;
            remaining -= 1;
        }
    }
    // Classes short on training samples hand their deficit to others.
    let mut deficit: usize = (0..c).map(|k| quota[k].saturating_sub(pools[k].len())).sum();
    for k in 0..c {
        quota[k] = quota[k].min(pools[k].len());
    }
    for &k in &order {
        let room = pools[k].len() - quota[k];
        let add = room.min(deficit);
        quota[k] += add;
        deficit -= add;
    }
    let mut labeled = Vec::with_capacity(n_labeled);
    for k in 0..c {
        labeled.extend_from_slice(&pools[k][..quota[k]]);
    }
    labeled.sort_unstable();
    let labeled_set: std::collections::HashSet<usize> = labeled.iter().copied().collect();
    let mut unlabeled: Vec<usize> = train.iter().copied().filter(|i| !labeled_set.contains(i)).collect();
    unlabeled.sort_unstable();

    let mut labels = vec![-1i64; total];
    for &i in labeled.iter().chain(&manifest.val_indices) {
        labels[i] = classes[i] as i64;
    }
    manifest.labeled_class_counts = quota;
    manifest.n_labeled = labeled.len();
    manifest.labeled_indices = labeled;
    manifest.unlabeled_indices = unlabeled;
    manifest.labels = labels;
}

struct SampleOut {
    features: Vec<f64>,
    theta0: Vec<f64>,
    sync: f64,
    phase: f64,
}

/// Largest pairwise `|x_i - x_j|` over rows `from..` of a channel-major window.
pub(crate) fn max_pairwise_spread(channels: &[&[f64]], from: usize) -> f64 {
    let len = channels.first().map_or(0, |c| c.len());
    let mut best: f64 = 0.0;
    for t in from..len {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for c in channels {
            lo = lo.min(c[t]);
            hi = hi.max(c[t]);
        }
        best = best.max(hi - lo);
    }
    best
}

/// Simulates every `(scenario, sample)` pair and assembles the labeled /
/// unlabeled / validation splits. Output is identical for any thread count.
pub fn generate_dataset(case: &GridCase, config: &SimConfig) -> Result<Dataset> {
    let timing = config.timing()?;
    let settle_index = config.settle_index()?;
    let n_gen = case.base.n_gen();
    let c = case.scenarios.len();
    if c == 0 {
        return Err(GridError::Config("no scenarios".into()));
    }
    let n = c * config.samples_per_class;
    let master = Rng::new(config.seed);
    let omega0 = vec![0.0; n_gen];
    let w = config.window;

    let samples: Vec<Result<(SampleOut, SampleTruth)>> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let scenario = &case.scenarios[idx / config.samples_per_class];
            let mut rng = master.fork(idx as u64);
            let pm_scale: Vec<f64> = (0..n_gen)
                .map(|_| rng.uniform_range(1.0 - config.pm_spread, 1.0 + config.pm_spread))
                .collect();
            let pre = case.base.with_pm_scale(&pm_scale);
            let post = scenario.post_outage_model.with_pm_scale(&pm_scale);
            let trace = integrate_rk4(
                &pre,
                &case.initial_angles,
                &omega0,
                timing.dt,
                timing.steps,
                Some(Event {
                    time: scenario.event_time,
                    post_model: &post,
                }),
            )
            .map_err(|e| GridError::Scenario {
                class_id: scenario.class_id,
                description: scenario.description.clone(),
                sample: idx,
                source: Box::new(e),
            })?;
            let rows: Vec<usize> = (1..=w).map(|k| timing.event_step + k * timing.stride).collect();
            let mut features = Vec::with_capacity(n_gen * w);
            for g in 0..n_gen {
                features.extend(rows.iter().map(|&r| trace.omega.get(r, g)));
            }
            let theta_first: Vec<f64> = (0..n_gen).map(|g| trace.theta.get(rows[0], g)).collect();
            let chans: Vec<&[f64]> = features.chunks(w).collect();
            let sync = max_pairwise_spread(&chans, settle_index);
            let theta_win: Vec<Vec<f64>> = (0..n_gen)
                .map(|g| rows.iter().map(|&r| trace.theta.get(r, g)).collect())
                .collect();
            let theta_refs: Vec<&[f64]> = theta_win.iter().map(Vec::as_slice).collect();
            let phase = max_pairwise_spread(&theta_refs, 0);
            Ok((
                SampleOut {
                    features,
                    theta0: theta_first,
                    sync,
                    phase,
                },
                SampleTruth {
                    class_id: scenario.class_id,
                    pm_scale,
                },
            ))
        })
        .collect();

    let mut features = Vec::with_capacity(n * n_gen * w);
    let mut theta0 = Vec::with_capacity(n * n_gen);
    let mut syncs = Vec::with_capacity(n);
    let mut phases = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for s in samples {
        let (out, t) = s?;
        features.extend(out.features);
        theta0.extend(out.theta0);
        syncs.push(out.sync);
        phases.push(out.phase);
        truth.push(t);
    }

    // Stratified validation split, then the labeled subset of the rest.
    let mut split_rng = master.fork(u64::MAX);
    let per_class_val = (config.val_fraction * config.samples_per_class as f64).round() as usize;
    let mut val = Vec::with_capacity(per_class_val * c);
    for k in 0..c {
        let mut ids: Vec<usize> = (k * config.samples_per_class..(k + 1) * config.samples_per_class).collect();
        split_rng.shuffle(&mut ids);
        val.extend_from_slice(&ids[..per_class_val]);
    }
    val.sort_unstable();
    let val_set: std::collections::HashSet<usize> = val.iter().copied().collect();
    let train: Vec<usize> = (0..n).filter(|i| !val_set.contains(i)).collect();
    let classes: Vec<usize> = truth.iter().map(|t| t.class_id).collect();

    let mut manifest = Manifest {
        format_version: 1,
        case_name: case.name.clone(),
        class_count: c,
        class_descriptions: case.scenarios.iter().map(|s| s.description.clone()).collect(),
        n_samples: n,
        n_gen,
        window: w,
        window_dt: timing.window_dt,
        feature_dim: n_gen * w,
        seed: config.seed,
        label_fraction: config.label_fraction,
        n_labeled: 0,
        labeled_indices: Vec::new(),
        unlabeled_indices: Vec::new(),
        val_indices: val,
        labels: Vec::new(),
        class_counts: vec![config.samples_per_class; c],
        labeled_class_counts: Vec::new(),
        c_sync: quantile(&syncs, config.bound_quantile),
        c_phase: quantile(&phases, config.bound_quantile),
        settle_index,
        inertia: case.base.m.clone(),
        damping: case.base.d.clone(),
        truth,
        feature_file: match config.feature_format {
            FeatureFormat::Binary => "features.bin".into(),
            FeatureFormat::Csv => "features.csv".into(),
        },
        theta0_file: "theta0.bin".into(),
        config: config.clone(),
    };
    apply_label_split(&mut manifest, &classes, &train, config.label_fraction, &mut split_rng);
    Ok(Dataset {
        features: Matrix::from_raw(n, n_gen * w, features),
        theta0: Matrix::from_raw(n, n_gen, theta0),
        manifest,
    })
}

/// Additive Gaussian noise plus a circular time shift of up to `max_shift`
/// points, the same shift for every channel of a sample. `channels` is the
/// number of equal-width blocks in each row.
pub fn augment(batch: &Matrix, rng: &mut Rng, noise_std: f64, max_shift: usize, channels: usize) -> Matrix {
    assert!(channels > 0 && batch.cols() % channels == 0, "row must split into channels");
    let width = batch.cols() / channels;
    let mut out = batch.clone();
    if max_shift > 0 && width > 1 {
        for r in 0..batch.rows() {
            let shift = rng.below(2 * max_shift + 1) as isize - max_shift as isize;
            let src = batch.row(r);
            let dst = out.row_mut(r);
            for ch in 0..channels {
                let base = ch * width;
                for t in 0..width {
                    let from = (t as isize - shift).rem_euclid(width as isize) as usize;
                    dst[base + t] = src[base + from];
                }
            }
        }
    }
    if noise_std > 0.0 {
        for v in out.as_mut_slice() {
            *v += noise_std * rng.gaussian();
        }
    }
    out
}

// Matrix file layout: magic "HSSLMAT\0", version u32 = 1, rows u64, cols u64,
// then rows * cols f64 values, little-endian, row-major.
const MATRIX_MAGIC: &[u8; 8] = b"HSSLMAT\0";

pub fn write_matrix_bin(path: &Path, m: &Matrix) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    write().map_err(io_err(path))
}

pub fn read_matrix_bin(path: &Path) -> Result<Matrix> {
    let bad = |msg: &str| GridError::DatasetFile {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut r = BufReader::new(fs::File::open(path).map_err(io_err(path))?);
    let mut header = [0u8; 28];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    if &header[..8] != MATRIX_MAGIC {
        return Err(bad("bad magic"));
    }
    if u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) != 1 {
        return Err(bad("unsupported version"));
    }
    let rows = u64::from_le_bytes(header[12..20].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(header[20..28].try_into().expect("8 bytes")) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err(path))?;
    if bytes.len() != rows * cols * 8 {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data).map_err(|e| bad(&e.to_string()))
}

/// One sample per line, comma-separated, shortest round-trip float text.
pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for r in 0..m.rows() {
            let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        w.flush()
    };
    write().map_err(io_err(path))
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let r = BufReader::new(fs::File::open(path).map_err(io_err(path))?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| GridError::DatasetFile {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })?;
        rows.push(row);
    }
    Matrix::from_rows(&rows).map_err(|e| GridError::DatasetFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes features, `theta0` and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let feat = dir.join(&data.manifest.feature_file);
    match data.manifest.config.feature_format {
        FeatureFormat::Binary => write_matrix_bin(&feat, &data.features)?,
        FeatureFormat::Csv => write_matrix_csv(&feat, &data.features)?,
    }
    write_matrix_bin(&dir.join(&data.manifest.theta0_file), &data.theta0)?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&data.manifest).map_err(|e| GridError::DatasetFile {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    fs::write(&path, json).map_err(io_err(&path))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| GridError::DatasetFile {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let feat = dir.join(&manifest.feature_file);
    let features = match manifest.config.feature_format {
        FeatureFormat::Binary => read_matrix_bin(&feat)?,
        FeatureFormat::Csv => read_matrix_csv(&feat)?,
    };
    let theta0 = read_matrix_bin(&dir.join(&manifest.theta0_file))?;
    let bad = |msg: String| GridError::DatasetFile {
        path: dir.to_path_buf(),
        msg,
    };
    if features.shape() != (manifest.n_samples, manifest.feature_dim) {
        return Err(bad(format!("features are {:?}", features.shape())));
    }
    if theta0.shape() != (manifest.n_samples, manifest.n_gen) {
        return Err(bad(format!("theta0 is {:?}", theta0.shape())));
    }
    if manifest.labels.len() != manifest.n_samples
        || manifest
            .labels
            .iter()
            .any(|&l| l < -1 || l >= manifest.class_count as i64)
    {
        return Err(bad("label vector invalid".into()));
    }
    Ok(Dataset {
        features,
        theta0,
        manifest,
    })
}
