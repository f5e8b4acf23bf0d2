//! Multi-window protocol: GAN on train+validation, then a real-only and an
//! augmented forecaster evaluated on the same test split.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    augment, ema_smooth, load_price_csv, make_windows, normalize_set, split_dataset, synthetic_count, PriceSeries,
    SequenceSet, SplitMethod, SplitSpec, SplitTag, WindowSpec,
};
use crate::error::{Error, Result};
use crate::forecaster::{evaluate_mse, train_forecaster, ForecasterConfig};
use crate::gan::{DiscriminatorConfig, GeneratorConfig};
use crate::metrics::{DedimsConfig, MetricReport};
use crate::stats::{aggregate, AggregateReport, PairedSample};
use crate::training::{
    generate_dataset, train_from, write_epoch_log, SelectBy, TrainOptions, TrainingConfig, TrainingState,
};

/// Minimum number of windowed samples a period must yield.
pub const MIN_WINDOW_SAMPLES: usize = 10;
pub const DEFAULT_EMA_SPAN: usize = 5;

/// One time period of one price series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowEntry {
    /// Dataset label used for grouping, e.g. an asset name.
    pub label: String,
    /// Price CSV; relative paths resolve against the spec file's directory.
    pub series: PathBuf,
    /// First row index, inclusive.
    pub start: usize,
    /// Last row index, exclusive.
    pub end: usize,
}

fn default_ratio() -> f64 {
    1.0
}

fn default_ema_span() -> usize {
    DEFAULT_EMA_SPAN
}

fn default_window() -> WindowSpec {
    WindowSpec::new(60, 30, 1).expect("valid default window")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub windows: Vec<WindowEntry>,
    #[serde(default = "default_window")]
    pub window_spec: WindowSpec,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub split_method: SplitMethod,
    #[serde(default = "default_ema_span")]
    pub ema_span: usize,
    /// Defaults to the standard generator adapted to K.
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub discriminator: Option<DiscriminatorConfig>,
    #[serde(default)]
    pub training: TrainingConfig,
    /// T and S are always taken from `window_spec`.
    #[serde(default)]
    pub forecaster: ForecasterConfig,
    /// Synthetic-to-real ratio of the augmented training set.
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default)]
    pub master_seed: u64,
    /// Keeps only the most recent training samples of each window.
    #[serde(default)]
    pub max_train_samples: Option<usize>,
    #[serde(default)]
    pub select_by: SelectBy,
    #[serde(default)]
    pub parallel: bool,
    /// Write GAN checkpoints under each window's output directory.
    #[serde(default)]
    pub save_checkpoints: bool,
}

impl ExperimentSpec {
    pub fn generator_config(&self) -> GeneratorConfig {
        let mut g = self
            .generator
            .clone()
            .unwrap_or_else(|| GeneratorConfig::for_seq_len(self.window_spec.k));
        g.seq_len = self.window_spec.k;
        g
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        let mut d = self
            .discriminator
            .clone()
            .unwrap_or_else(|| DiscriminatorConfig::for_seq_len(self.window_spec.k));
        d.seq_len = self.window_spec.k;
        d
    }

    pub fn forecaster_config(&self) -> ForecasterConfig {
        ForecasterConfig {
            input_len: self.window_spec.t,
            horizon: self.window_spec.s,
            ..self.forecaster.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.windows.is_empty() {
            return fail("no windows".into());
        }
        if !(self.ratio >= 0.0 && self.ratio.is_finite()) {
            return fail(format!("ratio {} must be a non-negative number", self.ratio));
        }
        if self.ema_span == 0 {
            return Err(Error::InvalidSpan(0));
        }
        if self.max_train_samples == Some(0) {
            return fail("max_train_samples must be positive".into());
        }
        self.window_spec.validate()?;
        self.split.validate()?;
        self.generator_config().validate()?;
        self.discriminator_config().validate()?;
        self.training.validate()?;
        self.forecaster_config().validate()?;
        for (i, w) in self.windows.iter().enumerate() {
            if w.start >= w.end {
                return fail(format!("window {i} ({}) has start {} >= end {}", w.label, w.start, w.end));
            }
            if w.label.is_empty() || w.label.contains(['/', ',', '\n']) {
                return fail(format!("window {i} label {:?} must be non-empty without '/', ',' or newlines", w.label));
            }
        }
        for (i, a) in self.windows.iter().enumerate() {
            for (j, b) in self.windows.iter().enumerate().skip(i + 1) {
                if a.series == b.series && a.start < b.end && b.start < a.end {
                    return fail(format!(
                        "windows {i} [{}, {}) and {j} [{}, {}) of {} overlap",
                        a.start,
                        a.end,
                        b.start,
                        b.end,
                        a.series.display()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Reads a spec and resolves relative series paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: ExperimentSpec = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for w in &mut spec.windows {
            if w.series.is_relative() {
                w.series = base.join(&w.series);
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-phase seed: first eight bytes of sha256(master ‖ window index ‖ phase).
pub fn derive_seed(master: u64, window: usize, phase: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((window as u64).to_le_bytes());
    h.update(phase.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    pub dataset_id: String,
    pub label: String,
    pub k: usize,
    pub start: usize,
    pub end: usize,
    pub mse_real: f64,
    pub mse_aug: f64,
    pub n_train: usize,
    pub n_synthetic: usize,
    pub n_validation: usize,
    pub n_test: usize,
    /// Metrics of the last logged GAN epoch.
    pub gan_report: Option<MetricReport>,
    pub selected_epoch: usize,
    pub curves: Option<PathBuf>,
}

impl WindowResult {
    pub fn group(&self) -> String {
        group_key(&self.label, self.k)
    }

    pub fn improvement(&self) -> f64 {
        self.mse_real - self.mse_aug
    }
}

pub fn group_key(label: &str, k: usize) -> String {
    format!("{label}/{k}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFailure {
    pub dataset_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub windows: Vec<WindowResult>,
    pub failures: Vec<WindowFailure>,
    pub groups: Vec<AggregateReport>,
    /// Groups with fewer than two successful windows.
    pub skipped_groups: Vec<String>,
}

fn dataset_id(index: usize, w: &WindowEntry) -> String {
    format!("{:03}-{}-{}-{}", index, w.label, w.start, w.end)
}

/// Windowed, normalized, split samples of one period.
pub fn prepare_window(spec: &ExperimentSpec, series: &PriceSeries, entry: &WindowEntry, seed: u64) -> Result<Prepared> {
    let period = series.slice(entry.start, entry.end)?;
    let smooth = ema_smooth(&period, spec.ema_span)?;
    let raw = make_windows(&smooth, &spec.window_spec)?;
    let (set, dropped) = normalize_set(&raw)?;
    if dropped > 0 {
        warn!("{}: dropped {dropped} samples with a constant observation window", entry.label);
    }
    if set.len() < MIN_WINDOW_SAMPLES {
        return Err(Error::InsufficientSamples {
            got: set.len(),
            needed: MIN_WINDOW_SAMPLES,
        });
    }
    let mut splits = split_dataset(&set, &spec.split, spec.split_method, seed)?;
    if let Some(max) = spec.max_train_samples {
        let n = splits.train.samples.len();
        if n > max {
            splits.train.samples.drain(..n - max);
        }
    }
    Ok(Prepared {
        train: splits.train,
        validation: splits.validation,
        test: splits.test,
    })
}

pub struct Prepared {
    pub train: SequenceSet,
    pub validation: SequenceSet,
    pub test: SequenceSet,
}

/// Runs the three phases for one period. `out_dir` receives the GAN curves
/// (and checkpoints when enabled).
pub fn run_window(
    spec: &ExperimentSpec,
    index: usize,
    series: &PriceSeries,
    out_dir: Option<&Path>,
) -> Result<WindowResult> {
    let entry = &spec.windows[index];
    let id = dataset_id(index, entry);
    let seed = |phase: &str| derive_seed(spec.master_seed, index, phase);
    let Prepared { train, validation, test } = prepare_window(spec, series, entry, seed("split"))?;
    info!(
        "{id}: {} train, {} validation, {} test samples",
        train.len(),
        validation.len(),
        test.len()
    );

    // phase 1: generative model on train and validation only
    let gan_data = train.concat(&validation, SplitTag::Train)?;
    let t_cfg = TrainingConfig {
        seed: seed("gan"),
        ..spec.training.clone()
    };
    let state = TrainingState::new(&spec.generator_config(), &spec.discriminator_config(), &t_cfg)?;
    let window_dir = out_dir.map(|d| d.join(&id));
    let opts = TrainOptions {
        checkpoint_dir: window_dir
            .as_ref()
            .filter(|_| spec.save_checkpoints)
            .map(|d| d.join("ckpt")),
        select_by: spec.select_by,
    };
    let outcome = train_from(&gan_data, state, &t_cfg, &opts)?;
    let curves = match &window_dir {
        Some(d) => {
            let path = d.join("curves.csv");
            write_epoch_log(&path, &outcome.log)?;
            Some(path)
        }
        None => None,
    };
    let n_synthetic = synthetic_count(train.len(), spec.ratio);
    let augmented = if n_synthetic == 0 {
        train.clone()
    } else {
        let synthetic = generate_dataset(&outcome.selected, n_synthetic, seed("generate"), &train.window)?;
        augment(&train, &synthetic, spec.ratio)?
    };

    // phases 2 and 3: identical config, seed, validation and test sets
    let f_cfg = ForecasterConfig {
        seed: seed("forecaster"),
        ..spec.forecaster_config()
    };
    let real_model = train_forecaster(&train, &validation, &f_cfg)?;
    let mse_real = evaluate_mse(&real_model.model, &test)?.mse;
    let aug_model = train_forecaster(&augmented, &validation, &f_cfg)?;
    let mse_aug = evaluate_mse(&aug_model.model, &test)?.mse;
    info!("{id}: mse real {mse_real:.6} augmented {mse_aug:.6}");

    Ok(WindowResult {
        dataset_id: id,
        label: entry.label.clone(),
        k: spec.window_spec.k,
        start: entry.start,
        end: entry.end,
        mse_real,
        mse_aug,
        n_train: train.len(),
        n_synthetic,
        n_validation: validation.len(),
        n_test: test.len(),
        gan_report: outcome.final_report,
        selected_epoch: outcome.selected_epoch,
        curves,
    })
}

/// Runs every window, aggregates per (label, K) group, and writes
/// `windows.csv`, `table1.csv` and `summary.json` into `out_dir` if given.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut series: HashMap<PathBuf, PriceSeries> = HashMap::new();
    for w in &spec.windows {
        if !series.contains_key(&w.series) {
            series.insert(w.series.clone(), load_price_csv(&w.series)?);
        }
    }
    let run = |i: usize| {
        let entry = &spec.windows[i];
        run_window(spec, i, &series[&entry.series], out_dir).map_err(|e| WindowFailure {
            dataset_id: dataset_id(i, entry),
            error: e.to_string(),
        })
    };
    let outcomes: Vec<std::result::Result<WindowResult, WindowFailure>> = if spec.parallel {
        (0..spec.windows.len()).into_par_iter().map(run).collect()
    } else {
        (0..spec.windows.len()).map(run).collect()
    };
    let mut windows = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => windows.push(r),
            Err(f) => {
                warn!("window {} failed: {}", f.dataset_id, f.error);
                failures.push(f);
            }
        }
    }

    let mut grouped: BTreeMap<(String, usize), Vec<PairedSample>> = BTreeMap::new();
    for spec_window in &spec.windows {
        grouped.entry((spec_window.label.clone(), spec.window_spec.k)).or_default();
    }
    for r in &windows {
        grouped.entry((r.label.clone(), r.k)).or_default().push(PairedSample {
            mse_real: r.mse_real,
            mse_aug: r.mse_aug,
            dataset_id: r.dataset_id.clone(),
        });
    }
    let mut groups = Vec::new();
    let mut skipped_groups = Vec::new();
    for ((label, k), pairs) in grouped {
        let key = group_key(&label, k);
        if pairs.len() < 2 {
            warn!("group {key}: {} successful windows, need 2; skipped", pairs.len());
            skipped_groups.push(key);
            continue;
        }
        groups.push(aggregate(&pairs, &key)?);
    }
    let report = ExperimentReport {
        windows,
        failures,
        groups,
        skipped_groups,
    };
    if let Some(dir) = out_dir {
        write_report(dir, &report)?;
    }
    Ok(report)
}

pub const WINDOWS_HEADER: &str =
    "dataset_id,label,k,start,end,mse_real,mse_aug,improvement,n_train,n_synthetic,n_test,wasserstein,dtw_dedims";

pub fn windows_csv(results: &[WindowResult]) -> String {
    let mut out = format!("{WINDOWS_HEADER}\n");
    for r in results {
        let (w, d) = match &r.gan_report {
            Some(m) => (m.wasserstein.to_string(), m.dtw_dedims.to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.dataset_id,
            r.label,
            r.k,
            r.start,
            r.end,
            r.mse_real,
            r.mse_aug,
            r.improvement(),
            r.n_train,
            r.n_synthetic,
            r.n_test,
            w,
            d
        );
    }
    out
}

pub fn table_csv(groups: &[AggregateReport]) -> String {
    let mut out = format!("{}\n", AggregateReport::CSV_HEADER);
    for g in groups {
        out.push_str(&g.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    n_windows: usize,
    n_succeeded: usize,
    n_failed: usize,
    failures: &'a [WindowFailure],
    groups: &'a [AggregateReport],
    skipped_groups: &'a [String],
    /// How the reported metrics were computed.
    metric_notes: MetricNotes,
}

#[derive(Serialize)]
struct MetricNotes {
    dedims_subsample: &'static str,
    dedims_reference: &'static str,
    wasserstein: &'static str,
}

pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("windows.csv", windows_csv(&report.windows))?;
    write("table1.csv", table_csv(&report.groups))?;
    let summary = Summary {
        n_windows: report.windows.len() + report.failures.len(),
        n_succeeded: report.windows.len(),
        n_failed: report.failures.len(),
        failures: &report.failures,
        groups: &report.groups,
        skipped_groups: &report.skipped_groups,
        metric_notes: MetricNotes {
            dedims_subsample: "both nearest-neighbour steps iterate over the seeded subsample of each set",
            dedims_reference: "reference distances exclude the self match",
            wasserstein: "order-1 distance between the pooled values of all time steps, exact quantile integration",
        },
    };
    write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")
}

/// Every configurable default, as committed in `defaults.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    pub ema_span: usize,
    pub window: WindowSpec,
    pub split: SplitSpec,
    pub split_method: SplitMethod,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub training: TrainingConfig,
    pub dedims: DedimsConfig,
    pub forecaster: ForecasterConfig,
    pub ratio: f64,
    pub master_seed: u64,
    pub select_by: SelectBy,
    pub parallel: bool,
}

impl Default for Defaults {
    fn default() -> Self {
        let window = default_window();
        Defaults {
            ema_span: DEFAULT_EMA_SPAN,
            window,
            split: SplitSpec::default(),
            split_method: SplitMethod::default(),
            generator: GeneratorConfig::for_seq_len(window.k),
            discriminator: DiscriminatorConfig::for_seq_len(window.k),
            training: TrainingConfig::default(),
            dedims: DedimsConfig::dtw(DedimsConfig::DEFAULT_N, 0),
            forecaster: ForecasterConfig::for_window(&window),
            ratio: default_ratio(),
            master_seed: 0,
            select_by: SelectBy::default(),
            parallel: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::noisy_sine_prices;

    fn entry(label: &str, series: &str, start: usize, end: usize) -> WindowEntry {
        WindowEntry {
            label: label.into(),
            series: series.into(),
            start,
            end,
        }
    }

    fn spec(windows: Vec<WindowEntry>) -> ExperimentSpec {
        serde_json::from_value(serde_json::json!({ "windows": windows })).unwrap()
    }

    #[test]
    fn seeds_differ_by_window_and_phase() {
        let a = derive_seed(7, 0, "gan");
        assert_eq!(a, derive_seed(7, 0, "gan"));
        assert_ne!(a, derive_seed(7, 1, "gan"));
        assert_ne!(a, derive_seed(7, 0, "forecaster"));
        assert_ne!(a, derive_seed(8, 0, "gan"));
    }

    #[test]
    fn overlapping_windows_rejected() {
        let ok = spec(vec![entry("A", "a.csv", 0, 100), entry("A", "a.csv", 100, 200)]);
        assert!(ok.validate().is_ok());
        let other_file = spec(vec![entry("A", "a.csv", 0, 100), entry("B", "b.csv", 50, 150)]);
        assert!(other_file.validate().is_ok());
        let bad = spec(vec![entry("A", "a.csv", 0, 100), entry("A", "a.csv", 99, 200)]);
        assert!(matches!(bad.validate(), Err(Error::InvalidSpec(_))));
        let mut neg = ok.clone();
        neg.ratio = -1.0;
        assert!(neg.validate().is_err());
    }

    #[test]
    fn spec_defaults_follow_window() {
        let mut s = spec(vec![entry("A", "a.csv", 0, 100)]);
        s.window_spec = WindowSpec::new(16, 8, 1).unwrap();
        assert_eq!(s.generator_config().patch_size, 4);
        assert_eq!(s.forecaster_config().input_len, 16);
        assert_eq!(s.forecaster_config().horizon, 8);
        assert_eq!(s.ratio, 1.0);
        assert_eq!(s.ema_span, 5);
    }

    #[test]
    fn short_period_is_rejected() {
        let mut s = spec(vec![entry("A", "a.csv", 0, 30)]);
        s.window_spec = WindowSpec::new(16, 8, 1).unwrap();
        let prices = noisy_sine_prices(40, 20.0, 0.01, 1).unwrap();
        assert!(matches!(
            prepare_window(&s, &prices, &s.windows[0], 0),
            Err(Error::InsufficientSamples { got: 7, needed: 10 })
        ));
    }

    #[test]
    fn truncation_keeps_most_recent_training_samples() {
        let mut s = spec(vec![entry("A", "a.csv", 0, 200)]);
        s.window_spec = WindowSpec::new(16, 8, 1).unwrap();
        let prices = noisy_sine_prices(200, 20.0, 0.01, 1).unwrap();
        let full = prepare_window(&s, &prices, &s.windows[0], 0).unwrap();
        s.max_train_samples = Some(10);
        let cut = prepare_window(&s, &prices, &s.windows[0], 0).unwrap();
        assert_eq!(cut.train.len(), 10);
        assert_eq!(cut.train.samples[..], full.train.samples[full.train.len() - 10..]);
        assert_eq!(cut.test, full.test);
    }

    #[test]
    fn csv_layouts() {
        let g = AggregateReport {
            group: "toy/24".into(),
            n: 2,
            mean_improvement: 0.5,
            se: 0.25,
            t: Some(2.0),
            p: Some(0.3),
            degenerate: false,
        };
        assert_eq!(table_csv(&[g]), "group,n,mean_improvement,se,t,p\ntoy/24,2,0.5,0.25,2,0.3\n");
    }
}
