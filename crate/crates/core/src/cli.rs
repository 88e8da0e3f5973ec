//! Experiment configuration and the command implementations behind the
//! `hybridssl` binary.
//!
//! Every command writes below the experiment's output directory:
//!
//! ```text
//! <out>/data/                      dataset (gen-data, or first train/sweep)
//! <out>/train/<mode>/model.ckpt    checkpoint
//! <out>/train/<mode>/metrics.jsonl per-epoch metrics
//! <out>/sweep/results.csv          aggregated accuracies
//! <out>/sweep/metrics/*.jsonl      per-cell metrics
//! <out>/divergence.json            written when training diverges
//! ```

use crate::gridsim::{self, Dataset, GridError, SimConfig};
use crate::hybrid::{HybridError, HybridModel};
use crate::trainer::{self, EpochMetrics, Evaluation, Mode, SweepConfig, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Process exit codes.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// A failed command: message plus exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: msg.into(),
        }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: msg.into(),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        let code = match &e {
            GridError::InvalidModel(_) | GridError::ParamFile(_) | GridError::Config(_) => EXIT_CONFIG,
            GridError::Instability { .. } | GridError::Scenario { .. } | GridError::Num(_) => EXIT_NUMERICAL,
            GridError::DatasetFile { .. } | GridError::Io { .. } => EXIT_IO,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<HybridError> for CliError {
    fn from(e: HybridError) -> Self {
        let code = match &e {
            HybridError::Io { .. } => EXIT_IO,
            HybridError::Neural(crate::neural::NeuralError::Io(_))
            | HybridError::Neural(crate::neural::NeuralError::Checkpoint(_)) => EXIT_IO,
            HybridError::Model(_) | HybridError::Label { .. } => EXIT_CONFIG,
            _ => EXIT_NUMERICAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::config(e.to_string()),
            TrainError::Model(inner) => inner.into(),
            TrainError::Grid(inner) => inner.into(),
            TrainError::Diverged(_) => Self {
                code: EXIT_NUMERICAL,
                message: e.to_string(),
            },
            TrainError::Io { .. } => Self::io(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub data: SimConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            data: SimConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Data seed for `gen-data`; training seed (single run) otherwise.
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    /// Dataset label fraction for `gen-data`; training relabel fraction
    /// otherwise.
    pub label_fraction: Option<f64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.sweep.modes.is_empty() || self.sweep.label_fractions.is_empty() {
            return Err(CliError::config("sweep needs at least one mode and one label fraction"));
        }
        if let Some(f) = self.sweep.label_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(CliError::config(format!("sweep label fraction {f} not in (0, 1]")));
        }
        Ok(())
    }

    /// Applies overrides for the data-generation command.
    pub fn with_data_overrides(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.data.seed = s;
        }
        if let Some(f) = o.label_fraction {
            self.data.label_fraction = f;
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        self.validate()?;
        Ok(self)
    }

    /// Applies overrides for training and sweeps.
    pub fn with_train_overrides(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.train.seeds = vec![s];
        }
        if let Some(m) = o.mode {
            self.train.mode = m;
        }
        if let Some(f) = o.label_fraction {
            self.train.label_fraction = Some(f);
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

/// Generates and writes the dataset. Returns it with a printable summary.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<(Dataset, String)> {
    let case = gridsim::build_wscc_scenarios(&cfg.data)?;
    let data = gridsim::generate_dataset(&case, &cfg.data)?;
    gridsim::write_dataset(&cfg.data_dir(), &data)?;
    Ok((data.clone(), dataset_summary(&data, &cfg.data_dir())))
}

pub fn dataset_summary(data: &Dataset, dir: &Path) -> String {
    let m = &data.manifest;
    let mut s = String::new();
    let _ = writeln!(s, "dataset {} -> {}", m.case_name, dir.display());
    let _ = writeln!(
        s,
        "samples {} (seed {}), features {}, window {} x {} machines",
        m.n_samples, m.seed, m.feature_dim, m.window, m.n_gen
    );
    let _ = writeln!(s, "class  count  labeled  description");
    for (k, desc) in m.class_descriptions.iter().enumerate() {
        let _ = writeln!(s, "{k:>5}  {:>5}  {:>7}  {desc}", m.class_counts[k], m.labeled_class_counts[k]);
    }
    let _ = writeln!(
        s,
        "labels: {} labeled, {} unlabeled, {} validation (fraction {})",
        m.n_labeled,
        m.unlabeled_indices.len(),
        m.val_indices.len(),
        m.label_fraction
    );
    let _ = write!(s, "bounds: c_sync {:.6e} rad/s, c_phase {:.6e} rad", m.c_sync, m.c_phase);
    s
}

/// Loads the dataset under the output directory, generating it first when
/// absent. An existing dataset built from a different data config is an
/// error rather than being overwritten.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.data_dir();
    if dir.join(gridsim::MANIFEST_FILE).exists() {
        let data = gridsim::read_dataset(&dir)?;
        if data.manifest.config != cfg.data {
            return Err(CliError::config(format!(
                "dataset in {} was generated from a different [data] section; rerun gen-data or pick another --out",
                dir.display()
            )));
        }
        Ok(data)
    } else {
        Ok(gen_data(cfg)?.0)
    }
}

fn write_divergence(cfg: &ExperimentConfig, err: &TrainError) {
    if let TrainError::Diverged(report) = err {
        if let Ok(json) = serde_json::to_string_pretty(report) {
            let _ = std::fs::create_dir_all(&cfg.out_dir);
            let _ = std::fs::write(cfg.out_dir.join("divergence.json"), json);
        }
    }
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics_file: PathBuf,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains one model with the first configured seed.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainArtifacts> {
    let data = load_or_generate(cfg)?;
    let seed = cfg.train.seeds[0];
    let outcome = trainer::train(&data, &cfg.train, seed).map_err(|e| {
        write_divergence(cfg, &e);
        CliError::from(e)
    })?;
    let dir = cfg.out_dir.join("train").join(cfg.train.mode.name());
    create_dir(&dir)?;
    let checkpoint = dir.join("model.ckpt");
    outcome.model.save(&checkpoint)?;
    let metrics_file = dir.join("metrics.jsonl");
    trainer::write_metrics_jsonl(&metrics_file, &outcome.metrics)?;
    Ok(TrainArtifacts {
        checkpoint,
        metrics_file,
        metrics: outcome.metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Val,
    Train,
    All,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "val" => Ok(Split::Val),
            "train" => Ok(Split::Train),
            "all" => Ok(Split::All),
            _ => Err(format!("unknown split \"{s}\" (val, train, all)")),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub dataset: String,
    pub split: Split,
    #[serde(flatten)]
    pub evaluation: Evaluation,
}

/// Evaluates a checkpoint's primary model on a dataset split. Training and
/// "all" splits use the simulator's ground-truth classes.
pub fn eval(checkpoint: &Path, data_dir: &Path, split: Split) -> Result<EvalReport> {
    let model = HybridModel::load(checkpoint)?;
    let mut data = gridsim::read_dataset(data_dir)?;
    let indices = match split {
        Split::Val => data.manifest.val_indices.clone(),
        Split::Train => data.train_indices(),
        Split::All => (0..data.len()).collect(),
    };
    if split != Split::Val {
        let truth: Vec<i64> = data.manifest.truth.iter().map(|t| t.class_id as i64).collect();
        if truth.len() != data.len() {
            return Err(CliError::config("dataset lacks ground truth for every sample"));
        }
        data.manifest.labels = truth;
    }
    if model.primary.input_width() != data.features.cols() || model.primary.output_width() != data.class_count() {
        return Err(CliError::config("checkpoint does not match the dataset's shape"));
    }
    let evaluation = trainer::evaluate(&model, &data, &indices)?;
    Ok(EvalReport {
        checkpoint: checkpoint.display().to_string(),
        dataset: data_dir.display().to_string(),
        split,
        evaluation,
    })
}

/// Runs the mode x fraction x seed grid and writes the results table.
pub fn sweep(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<trainer::SweepRow>)> {
    let data = load_or_generate(cfg)?;
    let dir = cfg.out_dir.join("sweep");
    let metrics_dir = dir.join("metrics");
    create_dir(&metrics_dir)?;
    let on_cell = |cell: &trainer::SweepCell| -> trainer::Result<()> {
        let name = format!("{}_{}_seed{}.jsonl", cell.mode.name(), cell.label_fraction, cell.seed);
        trainer::write_metrics_jsonl(&metrics_dir.join(name), &cell.metrics)
    };
    let (_, rows) = trainer::sweep(&data, &cfg.train, &cfg.sweep, &on_cell).map_err(|e| {
        write_divergence(cfg, &e);
        CliError::from(e)
    })?;
    let path = dir.join("results.csv");
    trainer::write_results_csv(&path, &rows)?;
    Ok((path, rows))
}

/// A named error-rate curve.
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Error rate versus epoch, one polyline per curve.
pub fn render_svg(curves: &[Curve]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 20.0, 50.0);
    let max_epoch = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let max_err = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.1))
        .fold(0.0f64, f64::max)
        .max(1e-3);
    let sx = |x: f64| left + (w - left - right) * x / max_epoch;
    let sy = |y: f64| top + (h - top - bottom) * (1.0 - y / max_err);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (x0, y0, x1, y1) = (sx(0.0), sy(0.0), sx(max_epoch), sy(max_err));
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=5 {
        let e = max_epoch * k as f64 / 5.0;
        let r = max_err * k as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#,
            sx(e),
            y0 + 16.0,
            e
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            x0 - 6.0,
            sy(r) + 4.0,
            r
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epoch</text>"#,
        (x0 + x1) / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">validation error rate</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 16.0 * i as f64;
        let lx = w - right - 170.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 26.0, escape(&c.label));
    }
    s.push_str("</svg>\n");
    s
}

/// Reads metrics files and writes `<out>/error_curves.svg`.
pub fn plot(metrics_files: &[PathBuf], out_dir: &Path) -> Result<PathBuf> {
    if metrics_files.is_empty() {
        return Err(CliError::config("plot needs at least one metrics file"));
    }
    let mut curves = Vec::new();
    for path in metrics_files {
        if !path.exists() {
            return Err(CliError::io(format!("metrics file {} not found", path.display())));
        }
        let metrics = trainer::read_metrics_jsonl(path)?;
        let label = metrics.first().map_or_else(
            || path.display().to_string(),
            |m| format!("{} (seed {})", m.mode.name(), m.seed),
        );
        curves.push(Curve {
            label,
            points: metrics.iter().map(|m| (m.epoch as f64, m.val_error)).collect(),
        });
    }
    // Identical labels get the file stem appended.
    for i in 0..curves.len() {
        if curves.iter().filter(|c| c.label == curves[i].label).count() > 1 {
            let stem = metrics_files[i].file_stem().map(|s| s.to_string_lossy().into_owned());
            curves[i].label = format!("{} [{}]", curves[i].label, stem.unwrap_or_default());
        }
    }
    create_dir(out_dir)?;
    let path = out_dir.join("error_curves.svg");
    write_file(&path, render_svg(&curves).as_bytes())?;
    Ok(path)
}
