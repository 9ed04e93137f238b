//! Experiment configuration, end-to-end runs and CSV output.
//!
//! A run's CSV starts with `#`-prefixed provenance lines (the resolved
//! configuration as TOML, the calibrated noise scale and party sizes),
//! followed by the body
//!
//! ```text
//! round,test_accuracy,train_loss,uplink_bytes,downlink_bytes
//! ```
//!
//! with one row per round, and ends with a `# summary` line whose values are
//! all derived from the body. Byte columns count what a single party sends
//! and receives in that round.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryConfig, AdversaryKind};
use crate::data::{load_mnist_idx, partition_by_labels, synthetic_dataset, Dataset, PartitionSpec, MNIST_CLASSES};
use crate::error::{Error, Result};
use crate::federation::{
    Algorithm, Federation, FederationSettings, PrivacyBudget, ResidualScale, RoundMetrics,
    SensitivityMode,
};
use crate::model::MlpModel;
use crate::privacy::PrivacyParams;

/// Environment variable naming the directory that holds the MNIST IDX files.
pub const DATA_DIR_ENV: &str = "DPSIGN_DATA_DIR";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const CSV_HEADER: &str = "round,test_accuracy,train_loss,uplink_bytes,downlink_bytes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    /// IDX files named as in the official distribution. `dir` falls back to
    /// the `DPSIGN_DATA_DIR` environment variable.
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    Synthetic {
        input_dim: usize,
        num_classes: usize,
        train_size: usize,
        test_size: usize,
        separation: f64,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Mnist {
            dir: None,
            train_limit: None,
            test_limit: None,
        }
    }
}

impl DatasetSource {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSource::Mnist { .. } => MNIST_CLASSES,
            DatasetSource::Synthetic { num_classes, .. } => *num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub dataset: DatasetSource,
    /// Honest parties M.
    pub parties: usize,
    /// Distinct labels per party c.
    pub labels_per_party: usize,
    pub byzantine_kind: AdversaryKind,
    /// Share of all parties (honest plus Byzantine) that is Byzantine.
    pub byzantine_frac: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
    pub sensitivity: SensitivityMode,
    pub batch_size: usize,
    pub eta: f64,
    pub lambda: f64,
    pub residual_scale: ResidualScale,
    pub hidden_units: Vec<usize>,
    pub rounds: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::DpSignSgd,
            dataset: DatasetSource::default(),
            parties: 31,
            labels_per_party: 4,
            byzantine_kind: AdversaryKind::Negative,
            byzantine_frac: 0.0,
            epsilon: 1.0,
            delta: 1e-5,
            clip: 4.0,
            sensitivity: SensitivityMode::ClipBound,
            batch_size: 256,
            eta: 0.005,
            lambda: 0.5,
            residual_scale: ResidualScale::InverseVoters,
            hidden_units: vec![64],
            rounds: 300,
            seed: 0,
            out: None,
        }
    }
}

/// Command-line style overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigOverrides {
    pub algorithm: Option<Algorithm>,
    pub data_dir: Option<PathBuf>,
    pub parties: Option<usize>,
    pub labels_per_party: Option<usize>,
    pub byzantine_kind: Option<AdversaryKind>,
    pub byzantine_frac: Option<f64>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub clip: Option<f64>,
    pub sensitivity: Option<SensitivityMode>,
    pub batch_size: Option<usize>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    pub residual_scale: Option<ResidualScale>,
    pub rounds: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn apply(&mut self, o: &ConfigOverrides) {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = &o.$field {
                    self.$field = v.clone();
                })*
            };
        }
        take!(
            algorithm,
            parties,
            labels_per_party,
            byzantine_kind,
            byzantine_frac,
            epsilon,
            delta,
            clip,
            sensitivity,
            batch_size,
            eta,
            lambda,
            residual_scale,
            rounds,
            seed
        );
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        if let Some(d) = &o.data_dir {
            match &mut self.dataset {
                DatasetSource::Mnist { dir, .. } => *dir = Some(d.clone()),
                DatasetSource::Synthetic { .. } => {
                    self.dataset = DatasetSource::Mnist {
                        dir: Some(d.clone()),
                        train_limit: None,
                        test_limit: None,
                    }
                }
            }
        }
    }

    /// Number of Byzantine parties B such that B/(M+B) is closest to the
    /// configured fraction.
    pub fn byzantine_count(&self) -> usize {
        if self.byzantine_frac <= 0.0 {
            return 0;
        }
        let m = self.parties as f64;
        (self.byzantine_frac * m / (1.0 - self.byzantine_frac)).round() as usize
    }

    /// Fill in the MNIST directory from `env_dir` when the config has none.
    pub fn resolve_data_dir(&mut self, env_dir: Option<PathBuf>) {
        if let DatasetSource::Mnist { dir, .. } = &mut self.dataset {
            if dir.is_none() {
                *dir = env_dir;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return bad(format!("clip bound must be positive, got {}", self.clip));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be non-negative, got {}", self.eta));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.parties == 0 {
            return bad("parties must be positive".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be positive".into());
        }
        if !(0.0..1.0).contains(&self.byzantine_frac) {
            return bad(format!(
                "byzantine_frac must lie in [0, 1), got {}",
                self.byzantine_frac
            ));
        }
        if self.hidden_units.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        let classes = self.dataset.num_classes();
        if self.labels_per_party == 0 || self.labels_per_party > classes {
            return bad(format!(
                "labels_per_party must be in 1..={classes}, got {}",
                self.labels_per_party
            ));
        }
        match &self.dataset {
            DatasetSource::Mnist { dir: None, .. } => {
                return bad(format!(
                    "no MNIST directory: set dataset.dir or {DATA_DIR_ENV}"
                ))
            }
            DatasetSource::Synthetic {
                input_dim,
                num_classes,
                train_size,
                test_size,
                separation,
            } => {
                if *input_dim == 0 || *num_classes == 0 {
                    return bad("synthetic dims must be positive".into());
                }
                if train_size < num_classes || test_size < num_classes {
                    return bad("synthetic splits need one example per class".into());
                }
                if !(*separation >= 0.0 && separation.is_finite()) {
                    return bad(format!("invalid separation {separation}"));
                }
            }
            DatasetSource::Mnist { .. } => {}
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(self.hidden_units.iter().copied())
            .chain(std::iter::once(num_classes))
            .collect()
    }
}

/// Read the optional config file, apply overrides and the environment's data
/// directory, and validate.
pub fn parse_config(
    file: Option<&Path>,
    overrides: &ConfigOverrides,
    env_data_dir: Option<PathBuf>,
) -> Result<ExperimentConfig> {
    let mut config = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
            ExperimentConfig::from_toml_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    config.apply(overrides);
    config.resolve_data_dir(env_data_dir);
    config.validate()?;
    Ok(config)
}

/// Train and test splits for a run.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(source: &DatasetSource, seed: u64) -> Result<LoadedData> {
    match source {
        DatasetSource::Mnist {
            dir,
            train_limit,
            test_limit,
        } => {
            let dir = dir
                .as_ref()
                .ok_or_else(|| Error::Config(format!("no MNIST directory: set {DATA_DIR_ENV}")))?;
            let mut train = load_mnist_idx(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))?;
            let mut test = load_mnist_idx(dir.join(TEST_IMAGES), dir.join(TEST_LABELS))?;
            if let Some(n) = train_limit {
                train = train.truncated(*n)?;
            }
            if let Some(n) = test_limit {
                test = test.truncated(*n)?;
            }
            Ok(LoadedData { train, test })
        }
        DatasetSource::Synthetic {
            input_dim,
            num_classes,
            train_size,
            test_size,
            separation,
        } => {
            let all = synthetic_dataset(
                *input_dim,
                *num_classes,
                train_size + test_size,
                *separation,
                seed,
            )?;
            let train_idx: Vec<usize> = (0..*train_size).collect();
            let test_idx: Vec<usize> = (*train_size..train_size + test_size).collect();
            Ok(LoadedData {
                train: all.subset(&train_idx)?,
                test: all.subset(&test_idx)?,
            })
        }
    }
}

/// Outcome of one configured run.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub num_params: usize,
    pub byzantine_count: usize,
    pub party_sizes: Vec<usize>,
    /// Distinct calibrated privacy parameters across parties.
    pub privacy: Vec<PrivacyParams>,
    pub metrics: Vec<RoundMetrics>,
}

/// Summary statistics, all computable from the CSV body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub rounds: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub final_train_loss: f64,
    pub total_uplink_bytes: usize,
    pub total_downlink_bytes: usize,
}

impl Summary {
    pub fn from_metrics(metrics: &[RoundMetrics]) -> Option<Self> {
        let last = metrics.last()?;
        Some(Self {
            rounds: metrics.len(),
            final_accuracy: last.test_accuracy,
            best_accuracy: metrics
                .iter()
                .map(|m| m.test_accuracy)
                .fold(f64::NEG_INFINITY, f64::max),
            final_train_loss: last.train_loss,
            total_uplink_bytes: metrics.iter().map(|m| m.uplink_bytes).sum(),
            total_downlink_bytes: metrics.iter().map(|m| m.downlink_bytes).sum(),
        })
    }
}

impl ExperimentReport {
    pub fn summary(&self) -> Summary {
        Summary::from_metrics(&self.metrics).expect("runs have at least one round")
    }

    pub fn final_accuracy(&self) -> f64 {
        self.summary().final_accuracy
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "# dpsign experiment")?;
        for line in self.config.to_toml_string().lines() {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "# num_params = {}", self.num_params)?;
        writeln!(out, "# honest_parties = {}", self.party_sizes.len())?;
        writeln!(out, "# byzantine_parties = {}", self.byzantine_count)?;
        let sizes: Vec<String> = self.party_sizes.iter().map(usize::to_string).collect();
        writeln!(out, "# party_sizes = [{}]", sizes.join(", "))?;
        for p in &self.privacy {
            writeln!(
                out,
                "# sigma = {:?} (epsilon = {:?}, delta = {:?}, sensitivity = {:?})",
                p.sigma(),
                p.epsilon(),
                p.delta(),
                p.sensitivity()
            )?;
        }
        writeln!(out, "# bytes columns are per party per round")?;
        self.write_body(out)?;
        let s = self.summary();
        writeln!(
            out,
            "# summary rounds={} final_accuracy={:.6} best_accuracy={:.6} final_train_loss={:.6} total_uplink_bytes={} total_downlink_bytes={}",
            s.rounds,
            s.final_accuracy,
            s.best_accuracy,
            s.final_train_loss,
            s.total_uplink_bytes,
            s.total_downlink_bytes
        )
    }

    fn write_body<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for m in &self.metrics {
            writeln!(
                out,
                "{},{:.6},{:.6},{},{}",
                m.round, m.test_accuracy, m.train_loss, m.uplink_bytes, m.downlink_bytes
            )?;
        }
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Lines of a CSV that are not `#` comments.
pub fn csv_body(csv: &str) -> String {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// Parse the rows of a CSV body back into metrics.
pub fn parse_csv_body(csv: &str) -> Result<Vec<RoundMetrics>> {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::Config(format!("unexpected CSV header {other:?}"))),
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let parse_err = || Error::Config(format!("malformed CSV row {line:?}"));
            if f.len() != 5 {
                return Err(parse_err());
            }
            Ok(RoundMetrics {
                round: f[0].parse().map_err(|_| parse_err())?,
                test_accuracy: f[1].parse().map_err(|_| parse_err())?,
                train_loss: f[2].parse().map_err(|_| parse_err())?,
                uplink_bytes: f[3].parse().map_err(|_| parse_err())?,
                downlink_bytes: f[4].parse().map_err(|_| parse_err())?,
            })
        })
        .collect()
}

/// Build the federation described by `config` on already-loaded data.
pub fn build_federation(config: &ExperimentConfig, data: &LoadedData) -> Result<Federation> {
    config.validate_without_paths()?;
    let classes = data.train.num_classes();
    if config.labels_per_party > classes {
        return Err(Error::Config(format!(
            "labels_per_party {} exceeds {classes} classes",
            config.labels_per_party
        )));
    }
    let spec = PartitionSpec {
        num_parties: config.parties,
        labels_per_party: config.labels_per_party,
        seed: config.seed,
    };
    let parties = partition_by_labels(&data.train, &spec)?
        .iter()
        .enumerate()
        .map(|(m, idx)| {
            if idx.is_empty() {
                Err(Error::Config(format!(
                    "party {m} received no training examples; use fewer parties or more data"
                )))
            } else {
                data.train.subset(idx)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let dims = config.layer_dims(data.train.input_dim(), classes);
    let model = MlpModel::init(&dims, config.seed)?;
    let settings = FederationSettings {
        algorithm: config.algorithm,
        batch_size: config.batch_size,
        clip_bound: config.clip,
        lambda: config.lambda,
        eta: config.eta,
        residual_scale: config.residual_scale,
        privacy: PrivacyBudget {
            epsilon: config.epsilon,
            delta: config.delta,
            sensitivity: config.sensitivity,
        },
        adversary: AdversaryConfig {
            kind: config.byzantine_kind,
            count: config.byzantine_count(),
        },
        seed: config.seed,
    };
    Federation::new(settings, model, parties, data.test.clone())
}

impl ExperimentConfig {
    fn validate_without_paths(&self) -> Result<()> {
        let mut probe = self.clone();
        if let DatasetSource::Mnist { dir, .. } = &mut probe.dataset {
            dir.get_or_insert_with(PathBuf::new);
        }
        probe.validate()
    }
}

/// Run a full experiment on pre-loaded data, calling `on_round` after each
/// round.
pub fn run_with_data(
    config: &ExperimentConfig,
    data: &LoadedData,
    mut on_round: impl FnMut(&RoundMetrics),
) -> Result<ExperimentReport> {
    let mut federation = build_federation(config, data)?;
    let mut privacy: Vec<PrivacyParams> = Vec::new();
    for p in federation.privacy().iter().flatten() {
        if !privacy.contains(p) {
            privacy.push(*p);
        }
    }
    let mut metrics = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let m = federation.run_round()?;
        on_round(&m);
        metrics.push(m);
    }
    Ok(ExperimentReport {
        config: config.clone(),
        num_params: federation.state().model.num_params(),
        byzantine_count: config.byzantine_count(),
        party_sizes: federation.party_sizes(),
        privacy,
        metrics,
    })
}

/// Load the configured data and run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let data = load_data(&config.dataset, config.seed)?;
    run_with_data(config, &data, |_| {})
}

/// Named sweeps mirroring the published experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Both DP variants over ε ∈ {0.05, 0.1, 0.5, 1, 2}, δ = 1e−5, c = 4.
    Table1,
    /// EF-DP-SIGNSGD, ε = 1, c = 10, negative adversaries at 0/20/40 % of parties.
    Byzantine,
    /// All four algorithms at ε = 1 for c ∈ {1, 2, 4, 10}.
    Baselines,
}

pub const TABLE1_EPSILONS: [f64; 5] = [0.05, 0.1, 0.5, 1.0, 2.0];
pub const BYZANTINE_FRACTIONS: [f64; 3] = [0.0, 0.2, 0.4];
pub const BASELINE_LABELS: [usize; 4] = [1, 2, 4, 10];

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Preset::Table1),
            "byzantine" => Ok(Preset::Byzantine),
            "baselines" => Ok(Preset::Baselines),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected table1, byzantine or baselines)"
            ))),
        }
    }
}

impl Preset {
    /// The runs of this preset as `(name, config)`, derived from `base`.
    pub fn runs(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let mut runs = Vec::new();
        match self {
            Preset::Table1 => {
                for algorithm in [Algorithm::DpSignSgd, Algorithm::EfDpSignSgd] {
                    for eps in TABLE1_EPSILONS {
                        let mut c = base.clone();
                        c.algorithm = algorithm;
                        c.epsilon = eps;
                        c.delta = 1e-5;
                        c.labels_per_party = 4;
                        c.byzantine_frac = 0.0;
                        runs.push((format!("table1-{algorithm}-eps{eps}"), c));
                    }
                }
            }
            Preset::Byzantine => {
                for frac in BYZANTINE_FRACTIONS {
                    let mut c = base.clone();
                    c.algorithm = Algorithm::EfDpSignSgd;
                    c.epsilon = 1.0;
                    c.labels_per_party = 10;
                    c.byzantine_kind = AdversaryKind::Negative;
                    c.byzantine_frac = frac;
                    runs.push((format!("byzantine-negative-frac{frac}"), c));
                }
            }
            Preset::Baselines => {
                for labels in BASELINE_LABELS {
                    for algorithm in Algorithm::ALL {
                        let mut c = base.clone();
                        c.algorithm = algorithm;
                        c.epsilon = 1.0;
                        c.labels_per_party = labels;
                        c.byzantine_frac = 0.0;
                        runs.push((format!("baselines-c{labels}-{algorithm}"), c));
                    }
                }
            }
        }
        runs
    }
}
