//! Subcommand implementations behind the `kwsf` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use kwsf::dataset::{self, ManifestConfig, ManifestEntry, Split};
use kwsf::features::FeatureConfig;
use kwsf::fixture::{self, FixtureConfig};
use kwsf::model::{Checkpoint, NetworkConfig};
use kwsf::pbt::{self, PbtConfig, SurrogateBackend, TrainerBackend};
use kwsf::trainer::{self, Control, EpochMetrics, Hooks, PreparedData, TrainConfig, TrainState};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_CORRUPT: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PbtBackendKind {
    #[default]
    Trainer,
    /// Closed-form score of the hyper-parameters; no training.
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            split: Split::Validation,
        }
    }
}

/// Everything a run needs, in one file. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus root laid out as `<root>/<word>/<file>.wav`.
    pub data_root: Option<PathBuf>,
    /// Prebuilt manifest; built from `data_root` and `[manifest]` when unset.
    pub manifest_path: Option<PathBuf>,
    pub manifest: ManifestConfig,
    pub features: FeatureConfig,
    /// `edge` or `full`; ignored when `[network]` is given.
    pub network_preset: String,
    pub network: Option<NetworkConfig>,
    pub train: TrainConfig,
    pub pbt: PbtConfig,
    pub pbt_backend: PbtBackendKind,
    pub fixture: FixtureConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            manifest_path: None,
            manifest: ManifestConfig::default(),
            features: FeatureConfig::default(),
            network_preset: "edge".into(),
            network: None,
            train: TrainConfig::default(),
            pbt: PbtConfig::default(),
            pbt_backend: PbtBackendKind::default(),
            fixture: FixtureConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Input-side failure that maps to exit code 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_err(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

/// Exit code for an error chain: 3 divergence, 4 corrupt artifact, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<kwsf::Error>() {
            return match e {
                kwsf::Error::Diverged { .. } | kwsf::Error::NonFinite(_) => EXIT_DIVERGED,
                kwsf::Error::CorruptCheckpoint(_) => EXIT_CORRUPT,
                _ => EXIT_INPUT,
            };
        }
    }
    EXIT_INPUT
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| input_err(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text).map_err(|e| input_err(format!("{}: {e}", path.display())))?,
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut cfg.data_root);
        fix(&mut cfg.manifest_path);
        fix(&mut cfg.manifest.validation_list);
        fix(&mut cfg.eval.checkpoint);
        Ok(cfg)
    }

    /// Replace every seed in the config.
    pub fn override_seed(&mut self, seed: u64) {
        self.manifest.seed = seed;
        self.train.seed = seed;
        self.pbt.seed = seed;
        self.fixture.seed = seed;
    }

    pub fn network(&self) -> anyhow::Result<NetworkConfig> {
        let mut net = match &self.network {
            Some(n) => n.clone(),
            None => NetworkConfig::by_name(&self.network_preset)?,
        };
        let (rows, cols) = self.features.output_shape();
        net.input_shape = [rows, cols];
        net.validate()?;
        Ok(net)
    }

    fn data_root(&self) -> anyhow::Result<&Path> {
        self.data_root.as_deref().ok_or_else(|| input_err("data_root is not set"))
    }

    pub fn manifest_entries(&self) -> anyhow::Result<Vec<ManifestEntry>> {
        match &self.manifest_path {
            Some(p) => Ok(dataset::read_manifest(p)?),
            None => build_manifest(self.data_root()?, &self.manifest),
        }
    }

    pub fn prepared_data(&self) -> anyhow::Result<PreparedData> {
        let entries = self.manifest_entries()?;
        Ok(PreparedData::load(self.data_root()?, &entries, &self.features, self.train.normalize_input, true)?)
    }
}

fn build_manifest(root: &Path, cfg: &ManifestConfig) -> anyhow::Result<Vec<ManifestEntry>> {
    if !root.is_dir() {
        bail!(input_err(format!("dataset root {} does not exist", root.display())));
    }
    Ok(dataset::build_manifest(root, cfg)?)
}

/// Output directory that only appears under its final name once the run
/// is over. Work happens in a hidden sibling.
pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
}

impl RunDir {
    pub fn create(target: &Path) -> anyhow::Result<Self> {
        if target.exists() && fs::read_dir(target)?.next().is_some() {
            bail!(input_err(format!("output directory {} is not empty", target.display())));
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let name = target
            .file_name()
            .ok_or_else(|| input_err(format!("bad output path {}", target.display())))?
            .to_string_lossy();
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(Self {
            staging,
            target: target.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn finish(self) -> anyhow::Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving {} into place", self.target.display()))?;
        Ok(self.target)
    }
}

#[derive(Debug, Clone, Serialize)]
struct RunRecord<'a> {
    subcommand: &'a str,
    tool_version: &'static str,
    library_version: &'static str,
    workers: usize,
    config: &'a RunConfig,
}

pub fn write_run_json(dir: &RunDir, subcommand: &str, workers: usize, cfg: &RunConfig) -> anyhow::Result<()> {
    let rec = RunRecord {
        subcommand,
        tool_version: env!("CARGO_PKG_VERSION"),
        library_version: kwsf::VERSION,
        workers,
        config: cfg,
    };
    dir.write("run.json", serde_json::to_string_pretty(&rec)? + "\n")
}

/// Counts per split, in manifest split order.
pub fn split_counts(entries: &[ManifestEntry]) -> [(Split, usize); 4] {
    [Split::TrainLabeled, Split::TrainUnlabeled, Split::Holdout, Split::Validation]
        .map(|s| (s, entries.iter().filter(|e| e.split == s).count()))
}

pub fn cmd_prepare_data(cfg: &RunConfig, dir: &RunDir) -> anyhow::Result<String> {
    let entries = build_manifest(cfg.data_root()?, &cfg.manifest)?;
    dir.write("manifest.jsonl", dataset::manifest_to_string(&entries))?;
    let mut report = String::new();
    for (s, n) in split_counts(&entries) {
        report.push_str(&format!("{}: {n}\n", s.name()));
    }
    Ok(report)
}

pub fn cmd_make_fixture(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let s = fixture::make_fixture(out, &cfg.fixture)?;
    Ok(format!(
        "command words: {}\nout-of-vocabulary: {}\nnoise: {}\n",
        s.command_files, s.oov_files, s.noise_files
    ))
}

pub fn cmd_train(cfg: &RunConfig, dir: &RunDir) -> anyhow::Result<String> {
    let net = cfg.network()?;
    cfg.train.validate()?;
    let data = cfg.prepared_data()?;
    let state = TrainState::new(&net, cfg.train.seed, cfg.train.learning_rate)?;
    let mut seen: Vec<EpochMetrics> = Vec::new();
    let mut record = |m: &EpochMetrics, _: &TrainState<f32>| {
        seen.push(m.clone());
        Control::Continue
    };
    let hooks = Hooks {
        on_epoch: Some(&mut record),
        commands: None,
    };
    match trainer::train_loop(&net, &cfg.train, &data, state, hooks) {
        Ok(out) => {
            let mut run_net = net.clone();
            run_net.dropout_rate = cfg.train.dropout_rate;
            out.state
                .to_checkpoint(&run_net, cfg.train.mode, cfg.train.seed)
                .save(&dir.path("checkpoint.ckpt"))?;
            dir.write("metrics.csv", trainer::metrics_csv(&out.metrics))?;
            let last = out.metrics.last();
            Ok(format!(
                "epochs: {}\nsteps: {}\nholdout accuracy: {}\nvalidation accuracy: {}\n",
                out.metrics.len(),
                out.state.steps,
                fmt_acc(last.and_then(|m| m.holdout_accuracy)),
                fmt_acc(last.and_then(|m| m.validation_accuracy)),
            ))
        }
        Err(e) => {
            dir.write("metrics.csv", trainer::metrics_csv(&seen))?;
            dir.write("diagnostics.txt", format!("{e}\n"))?;
            Err(e.into())
        }
    }
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
}

pub fn cmd_pbt(cfg: &RunConfig, workers: usize, dir: &RunDir) -> anyhow::Result<String> {
    let mut pcfg = cfg.pbt.clone();
    pcfg.worker_limit = workers;
    let outcome = match cfg.pbt_backend {
        PbtBackendKind::Surrogate => pbt::run_pbt(&pcfg, &SurrogateBackend)?,
        PbtBackendKind::Trainer => {
            pcfg.checkpoint_dir = Some(dir.path("checkpoints"));
            let data = cfg.prepared_data()?;
            let backend = TrainerBackend {
                network: cfg.network()?,
                train: cfg.train.clone(),
                data: &data,
            };
            pbt::run_pbt(&pcfg, &backend)?
        }
    };
    pbt::export_trajectory(&outcome.trajectory, &dir.path("trajectory.jsonl"))?;
    dir.write("final_scores.csv", pbt::final_scores_csv(&outcome.final_population))?;
    if let Some(bytes) = &outcome.best.checkpoint {
        dir.write("best.ckpt", bytes)?;
    }
    dir.write("best.json", serde_json::to_string_pretty(&best_summary(&outcome.best))? + "\n")?;
    Ok(format!(
        "events: {}\nbest score: {:.6}\nbest member: generation {} id {}\n",
        outcome.trajectory.len(),
        outcome.best.holdout_score.unwrap_or(0.0),
        outcome.best.generation,
        outcome.best.member_id
    ))
}

fn best_summary(m: &pbt::PopulationMember) -> serde_json::Value {
    serde_json::json!({
        "generation": m.generation,
        "member_id": m.member_id,
        "parent_id": m.parent_id,
        "hyper": m.hyper,
        "holdout_score": m.holdout_score,
    })
}

pub fn cmd_eval(cfg: &RunConfig, dir: &RunDir) -> anyhow::Result<String> {
    let ck_path = cfg
        .eval
        .checkpoint
        .as_deref()
        .ok_or_else(|| input_err("eval.checkpoint is not set"))?;
    let ck = Checkpoint::load(ck_path)?;
    let entries: Vec<ManifestEntry> = cfg.manifest_entries()?;
    let data = PreparedData::load(cfg.data_root()?, &entries, &cfg.features, cfg.train.normalize_input, true)?;
    let examples = data.split(cfg.eval.split);
    let (acc, cm) = trainer::evaluate(ck.model(), &ck.config, examples)?;
    dir.write("confusion.csv", cm.to_csv())?;
    Ok(format!("split: {}\nsamples: {}\naccuracy: {acc:.3}\n", cfg.eval.split.name(), cm.total()))
}

/// Re-export a trajectory log sorted by (generation, member id), plus the
/// last generation's scores as a one-column-per-row CSV.
pub fn cmd_export_trajectory(input: &Path, dir: &RunDir) -> anyhow::Result<String> {
    let file = if input.is_dir() { input.join("trajectory.jsonl") } else { input.to_path_buf() };
    if !file.is_file() {
        bail!(input_err(format!("trajectory {} not found", file.display())));
    }
    let log = pbt::read_trajectory(&file)?;
    pbt::export_trajectory(&log, &dir.path("trajectory.jsonl"))?;
    let last = log.iter().map(|e| e.generation).max().unwrap_or(0);
    let mut rows: Vec<_> = log.iter().filter(|e| e.generation == last).collect();
    rows.sort_by_key(|e| e.member_id);
    let mut csv = String::from("member_id,score\n");
    for e in rows {
        csv.push_str(&format!("{},{}\n", e.member_id, e.holdout_score));
    }
    dir.write("final_scores.csv", csv)?;
    Ok(format!("events: {}\n", log.len()))
}
