//! Config-driven experiments and their run directories.
//!
//! A config is a TOML file describing one experiment: the dataset (a coupling
//! tree or one of the variants), the model, the training recipe, evaluation
//! options and, optionally, last-layer retraining. A `[profiles.<name>]` table
//! holds overrides that are merged over the base document when that profile
//! is selected (`full` is the base itself unless a `full` table exists).
//!
//! ```toml
//! name = "mnist_patch"
//! seed = 0
//!
//! [dataset]
//! kind = "coupled"
//! sources = ["mnist", "patch"]
//! paths = [[1, 0], [1, 1], [2, 2], [2, 3]]
//!
//! [model]
//! family = "mlp10"
//!
//! [profiles.desk.train]
//! epochs = 5
//! lr_decay_epochs = [3, 4]
//! ```
//!
//! Run directory (`<out_root>/<name>/<profile>/`):
//!
//! | path                              | content                                  |
//! |-----------------------------------|------------------------------------------|
//! | `config.toml`                     | resolved config snapshot                 |
//! | `metrics.csv`                     | epoch, lr, loss, train_acc               |
//! | `checkpoints/*.safetensors`       | model state, spec and epoch              |
//! | `confusion/<test>/*.csv`          | per-group and aggregate matrices         |
//! | `heatmaps/<test>/*.png`           | row-normalised heatmaps                  |
//! | `metrics.json`                    | [`RunMetrics`]                           |
//! | `tree.dot`, `tree.txt`            | inferred decision tree (coupled data)    |
//! | `dfr.json`, `dfr.txt`             | three-model comparison (when configured) |
//! | `baseline/`                       | the fine-only baseline's checkpoints     |
//! | `data/*.hsb`                      | dataset containers (`build-dataset`)     |
//!
//! Every artifact carries the config hash (a comment line, checkpoint or PNG
//! metadata, or a JSON field).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::coupling::{build_test_with, build_train_with, ComposedDataset, Composition, CouplingTree};
use crate::datasets::{SourceKind, SourceStore};
use crate::dfr::{self, DfrConfig, DfrFit, TripletReport};
use crate::error::{Error, Result};
use crate::evaluation::{self, CountMatrix, GroupedConfusionMatrix, LabelHierarchy, MetricsReport};
use crate::heatmap;
use crate::imageset::{GroupKey, ImageSet, Label};
use crate::models::{build_model, Model, ModelFamily, ModelSpec};
use crate::training::{self, CheckpointPlan, History, TrainConfig, FINAL_CHECKPOINT};
use crate::treeview::{infer_tree, render_tree, TreeFormat};
use crate::util::{mix_seed, sha256_hex};
use crate::variants::{
    build_corrupted_cifar, build_half_inverted_mnist, corruption_hierarchy, default_corruption_specs,
    half_inverted_hierarchy, CorruptionSpec, HalfInvertedSplit,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// The reproduction protocol.
    #[default]
    Full,
    /// Reduced schedules for desk-scale checks.
    Desk,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Desk => "desk",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::spec(format!("unknown profile {other:?} (full|desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Channel-stacked sources under a coupling tree.
    Coupled {
        sources: Vec<SourceKind>,
        paths: Vec<Vec<u32>>,
        #[serde(default)]
        composition: Composition,
    },
    /// MNIST with digits 0–4 inverted in training.
    HalfInvertedMnist,
    /// CIFAR-10 with one corruption per class pair.
    CorruptedCifar {
        #[serde(default = "default_corruption_specs")]
        corruptions: Vec<CorruptionSpec>,
    },
}

fn default_width() -> usize {
    1024
}

fn default_depth() -> usize {
    10
}

/// Model family and MLP shape; channels and classes follow from the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: ModelFamily,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
}

impl ModelConfig {
    pub fn spec(&self, in_channels: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            family: self.family,
            in_channels,
            num_classes,
            width: self.width,
            depth: self.depth,
        }
    }
}

fn default_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Grouping depths for HCA/AHCA; empty means every coarse depth.
    #[serde(default)]
    pub depths: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_groups: Option<Vec<Vec<Label>>>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            depths: Vec::new(),
            semantic_groups: None,
            batch_size: default_batch(),
        }
    }
}

/// One experiment. `train.seed` is always replaced by `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dfr: Option<DfrConfig>,
    /// Default output root; the command line takes precedence.
    #[serde(default, skip_serializing)]
    pub output_root: Option<PathBuf>,
    #[serde(default, skip_serializing)]
    pub profiles: BTreeMap<String, toml::Table>,
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses a config document and applies `profile`.
    pub fn parse(text: &str, origin: &Path, profile: Profile) -> Result<Self> {
        let err = |message: String| Error::Config {
            path: origin.to_path_buf(),
            message,
        };
        // First pass validates the whole document with line-anchored errors.
        let base: ExperimentConfig = toml::from_str(text).map_err(|e| err(e.to_string()))?;
        let mut cfg = match base.profiles.get(profile.name()) {
            Some(over) => {
                let mut doc: toml::Table = toml::from_str(text).map_err(|e| err(e.to_string()))?;
                doc.remove("profiles");
                merge(&mut doc, over);
                ExperimentConfig::deserialize(toml::Value::Table(doc))
                    .map_err(|e| err(format!("in [profiles.{}]: {e}", profile.name())))?
            }
            None if profile == Profile::Full => base,
            None => {
                return Err(err(format!("profile {:?} is not defined", profile.name())));
            }
        };
        cfg.profiles.clear();
        cfg.train.seed = cfg.seed;
        cfg.validate().map_err(|e| err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text, path, profile)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn tree(&self) -> Result<Option<CouplingTree>> {
        match &self.dataset {
            DatasetConfig::Coupled { sources, paths, .. } => {
                Ok(Some(CouplingTree::new(sources.clone(), paths.clone())?))
            }
            _ => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::spec("name must be a non-empty path component"));
        }
        let tree = self.tree()?;
        if let DatasetConfig::CorruptedCifar { corruptions } = &self.dataset {
            corruption_hierarchy(corruptions)?;
        }
        self.model.spec(1, 2).validate()?;
        self.train.validate()?;
        if self.evaluation.batch_size == 0 {
            return Err(Error::spec("evaluation.batch_size must be positive"));
        }
        let max_depth = tree.as_ref().map_or(1, CouplingTree::coarse_depth);
        if let Some(&d) = self.evaluation.depths.iter().find(|&&d| d == 0 || d > max_depth) {
            return Err(Error::spec(format!("evaluation depth {d} outside 1..={max_depth}")));
        }
        if let Some(dfr) = &self.dfr {
            dfr.validate()?;
            if tree.is_none() {
                return Err(Error::spec("dfr needs a coupled dataset"));
            }
        }
        Ok(())
    }

    pub fn depths(&self) -> Result<Vec<usize>> {
        if !self.evaluation.depths.is_empty() {
            return Ok(self.evaluation.depths.clone());
        }
        Ok(match self.tree()? {
            Some(t) => (1..=t.coarse_depth()).collect(),
            None => vec![1],
        })
    }

    /// SHA-256 over the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::spec(format!("serialising config: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Datasets

/// Train and test data of one experiment.
pub struct Datasets {
    pub train: ImageSet,
    /// Coupled builds keep their composed form (provenance, tree).
    pub train_composed: Option<ComposedDataset>,
    pub test_composed: Option<ComposedDataset>,
    /// Variant test sets, by name.
    pub variant_tests: Vec<(String, ImageSet)>,
    pub hierarchy: Box<dyn LabelHierarchy + Send + Sync>,
    pub tree: Option<CouplingTree>,
}

impl Datasets {
    pub fn test_sets(&self) -> Vec<(&str, &ImageSet)> {
        match &self.test_composed {
            Some(t) => vec![("test", t.images())],
            None => self.variant_tests.iter().map(|(n, s)| (n.as_str(), s)).collect(),
        }
    }

    /// Content hashes of every set, by name.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        let mut h = BTreeMap::new();
        h.insert(
            "train".to_string(),
            self.train_composed
                .as_ref()
                .map_or_else(|| self.train.content_hash(), ComposedDataset::content_hash),
        );
        match &self.test_composed {
            Some(t) => {
                h.insert("test".into(), t.content_hash());
            }
            None => {
                for (n, s) in &self.variant_tests {
                    h.insert(n.clone(), s.content_hash());
                }
            }
        }
        h
    }
}

pub fn build_datasets(cfg: &ExperimentConfig, store: &SourceStore) -> Result<Datasets> {
    match &cfg.dataset {
        DatasetConfig::Coupled { composition, .. } => {
            let tree = cfg.tree()?.expect("coupled");
            let train = build_train_with(store, &tree, cfg.seed, *composition)?;
            let test = build_test_with(store, &tree, cfg.seed, *composition)?;
            Ok(Datasets {
                train: train.images().clone(),
                train_composed: Some(train),
                test_composed: Some(test),
                variant_tests: Vec::new(),
                hierarchy: Box::new(tree.clone()),
                tree: Some(tree),
            })
        }
        DatasetConfig::HalfInvertedMnist => {
            let tests = [HalfInvertedSplit::TestOriginal, HalfInvertedSplit::TestInverted]
                .into_iter()
                .map(|s| Ok((s.name().to_string(), build_half_inverted_mnist(store, s)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Datasets {
                train: build_half_inverted_mnist(store, HalfInvertedSplit::Train)?,
                train_composed: None,
                test_composed: None,
                variant_tests: tests,
                hierarchy: Box::new(half_inverted_hierarchy()),
                tree: None,
            })
        }
        DatasetConfig::CorruptedCifar { corruptions } => {
            let d = build_corrupted_cifar(store, corruptions, cfg.seed)?;
            Ok(Datasets {
                train: d.train,
                train_composed: None,
                test_composed: None,
                variant_tests: vec![("test".to_string(), d.test)],
                hierarchy: Box::new(corruption_hierarchy(corruptions)?),
                tree: None,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Run directory

/// Paths inside one run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(out_root: &Path, cfg: &ExperimentConfig, profile: Profile) -> Self {
        RunDir {
            root: out_root.join(&cfg.name).join(profile.name()),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn history(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join(FINAL_CHECKPOINT)
    }
    pub fn baseline(&self) -> PathBuf {
        self.root.join("baseline")
    }
    pub fn confusion(&self, test: &str) -> PathBuf {
        self.root.join("confusion").join(test)
    }
    pub fn heatmaps(&self, test: &str) -> PathBuf {
        self.root.join("heatmaps").join(test)
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
}

fn hash_comment(hash: &str) -> Vec<String> {
    vec![format!("config_hash={hash}")]
}

/// Writes the resolved config, headed by its hash.
pub fn write_config_snapshot(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&run.root)?;
    let text = format!("# config_hash = {}\n{}", cfg.hash(), cfg.to_toml()?);
    std::fs::write(run.config(), text)?;
    Ok(())
}

/// Writes dataset containers into `data/`.
pub fn write_datasets(run: &RunDir, cfg: &ExperimentConfig, data: &Datasets) -> Result<Vec<PathBuf>> {
    let hash = cfg.hash();
    let dir = run.data();
    let mut out = Vec::new();
    if let (Some(train), Some(test)) = (&data.train_composed, &data.test_composed) {
        for (n, d) in [("train", train), ("test", test)] {
            let p = dir.join(format!("{n}.hsb"));
            container::write_composed(&p, &format!("{}/{n}", cfg.name), d, Some(&hash))?;
            out.push(p);
        }
    } else {
        let p = dir.join("train.hsb");
        container::write_images(&p, &format!("{}/train", cfg.name), &data.train, cfg.seed, Some(&hash))?;
        out.push(p);
        for (n, s) in &data.variant_tests {
            let p = dir.join(format!("{n}.hsb"));
            container::write_images(&p, &format!("{}/{n}", cfg.name), s, cfg.seed, Some(&hash))?;
            out.push(p);
        }
    }
    Ok(out)
}

fn model_seed(cfg: &ExperimentConfig, role: u64) -> u64 {
    mix_seed(&[cfg.seed, 0x4d4f_4445_4c, role])
}

fn checkpoint_plan(dir: PathBuf, cfg: &ExperimentConfig) -> CheckpointPlan {
    CheckpointPlan {
        dir: Some(dir),
        metadata: BTreeMap::from([
            ("config_hash".to_string(), cfg.hash()),
            ("experiment".to_string(), cfg.name.clone()),
        ])
        .into_iter()
        .collect(),
    }
}

/// Trains the experiment's model and writes checkpoints and `metrics.csv`.
pub fn train_stage(cfg: &ExperimentConfig, data: &Datasets, run: &RunDir) -> Result<(Model, History)> {
    let spec = cfg.model.spec(data.train.channels(), data.train.num_labels());
    let model = build_model(&spec, model_seed(cfg, 0))?;
    log::info!(
        "training {} ({:?}, {} parameters) on {} examples",
        cfg.name,
        spec.family,
        model.num_parameters(),
        data.train.len()
    );
    let history = training::train(&model, &data.train, &cfg.train, &checkpoint_plan(run.checkpoints(), cfg))?;
    std::fs::write(run.history(), history.to_csv(&hash_comment(&cfg.hash())))?;
    Ok((model, history))
}

/// Loads the trained model, refusing checkpoints written under another config.
pub fn load_trained(run: &RunDir, cfg: &ExperimentConfig) -> Result<Model> {
    let (model, meta) = training::load_checkpoint(&run.final_checkpoint())?;
    let want = cfg.hash();
    match meta.extra.get("config_hash") {
        Some(h) if *h == want => Ok(model),
        other => Err(Error::Protocol(format!(
            "checkpoint {} was written for config {:?}, not {want}",
            run.final_checkpoint().display(),
            other
        ))),
    }
}

/// Grouped confusion and metrics on one test set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub name: String,
    pub confusion: GroupedConfusionMatrix,
    pub report: MetricsReport,
}

fn group_file(key: &GroupKey) -> String {
    let parts: Vec<String> = key.0.iter().map(u32::to_string).collect();
    format!("group_{}", parts.join("-"))
}

fn write_confusions(run: &RunDir, test: &str, cm: &GroupedConfusionMatrix, hash: &str) -> Result<()> {
    let cdir = run.confusion(test);
    let hdir = run.heatmaps(test);
    std::fs::create_dir_all(&cdir)?;
    std::fs::create_dir_all(&hdir)?;
    let text = [("config_hash", hash)];
    let mut entries: Vec<(String, Option<&GroupKey>, &CountMatrix)> = vec![("aggregate".into(), None, cm.aggregate())];
    for (k, m) in cm.groups() {
        entries.push((group_file(k), Some(k), m));
    }
    for (file, key, m) in entries {
        let mut comments = hash_comment(hash);
        if let Some(k) = key {
            comments.push(format!("group={}", serde_json::to_string(k)?));
        }
        std::fs::write(cdir.join(format!("{file}.csv")), m.to_csv(&comments))?;
        heatmap::write_png(&hdir.join(format!("{file}.png")), m, &text)?;
    }
    Ok(())
}

/// Reads the per-group CSVs of one test set back, checking the config hash.
pub fn read_confusions(run: &RunDir, test: &str, hash: &str) -> Result<GroupedConfusionMatrix> {
    let dir = run.confusion(test);
    let mut groups = BTreeMap::new();
    let mut n = None;
    let entries = std::fs::read_dir(&dir).map_err(|_| Error::DataUnavailable {
        path: dir.clone(),
        hint: "run `evaluate` first".into(),
    })?;
    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    files.sort();
    for path in files {
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        if !(name.starts_with("group_") && name.ends_with(".csv")) {
            continue;
        }
        let (m, comments) = CountMatrix::from_csv(&std::fs::read_to_string(&path)?)?;
        if !comments.iter().any(|c| c == &format!("config_hash={hash}")) {
            return Err(Error::Protocol(format!("{} belongs to another config", path.display())));
        }
        let key = comments
            .iter()
            .find_map(|c| c.strip_prefix("group="))
            .ok_or_else(|| Error::data(format!("{} lacks its group key", path.display())))?;
        let key: GroupKey = serde_json::from_str(key)?;
        n = Some(m.size());
        groups.insert(key, m);
    }
    let n = n.ok_or_else(|| Error::data(format!("no group matrices in {}", dir.display())))?;
    GroupedConfusionMatrix::from_groups(n, groups)
}

/// Predicts every test set, writes confusion CSVs and heatmaps.
pub fn evaluate_stage(cfg: &ExperimentConfig, model: &Model, data: &Datasets, run: &RunDir) -> Result<Vec<Evaluation>> {
    let hash = cfg.hash();
    let depths = cfg.depths()?;
    let semantic = cfg.evaluation.semantic_groups.as_deref();
    let mut out = Vec::new();
    for (name, images) in data.test_sets() {
        let pred = training::predict(model, images, cfg.evaluation.batch_size)?;
        let cm = evaluation::confusion(
            images.num_labels(),
            &evaluation::records(images.groups(), images.labels(), &pred),
        )?;
        let report = evaluation::report(&cm, data.hierarchy.as_ref(), &depths, semantic)?;
        write_confusions(run, name, &cm, &hash)?;
        out.push(Evaluation {
            name: name.to_string(),
            confusion: cm,
            report,
        });
    }
    Ok(out)
}

/// Writes `tree.dot` and `tree.txt` from the full-depth test confusion.
pub fn tree_stage(cfg: &ExperimentConfig, tree: &CouplingTree, cm: &GroupedConfusionMatrix, run: &RunDir) -> Result<()> {
    let t = infer_tree(cm, tree)?;
    let comments = hash_comment(&cfg.hash());
    std::fs::write(run.root.join("tree.dot"), render_tree(&t, TreeFormat::Dot, &comments))?;
    std::fs::write(run.root.join("tree.txt"), render_tree(&t, TreeFormat::Text, &comments))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfrOutcome {
    pub config_hash: String,
    pub fit: DfrFit,
    pub report: TripletReport,
}

/// Refits the trained model's head, trains the fine-only baseline and
/// compares the three on the evaluation split.
pub fn dfr_stage(cfg: &ExperimentConfig, data: &Datasets, run: &RunDir) -> Result<DfrOutcome> {
    let dcfg = cfg
        .dfr
        .as_ref()
        .ok_or_else(|| Error::spec("the config has no [dfr] section"))?;
    let (Some(test), Some(tree)) = (&data.test_composed, &data.tree) else {
        return Err(Error::spec("dfr needs a coupled dataset"));
    };
    let split = dfr::split_reweight_eval(test, dcfg.reweight_per_class)?;
    let spurious = load_trained(run, cfg)?;
    let refit = load_trained(run, cfg)?;
    let fit = dfr::run_dfr(&refit, test, &split, dcfg)?;

    let fine = tree.channel_range(tree.num_levels() - 1);
    let base_train = data.train.select_channels(fine)?;
    let spec = cfg.model.spec(base_train.channels(), base_train.num_labels());
    let baseline = build_model(&spec, model_seed(cfg, 1))?;
    let dir = run.baseline();
    let plan = checkpoint_plan(dir.join("checkpoints"), cfg);
    let history = training::train(&baseline, &base_train, &cfg.train, &plan)?;
    std::fs::write(dir.join("metrics.csv"), history.to_csv(&hash_comment(&cfg.hash())))?;

    let report = dfr::evaluate_triplet(&spurious, &refit, &baseline, test, &split, dcfg)?;
    let outcome = DfrOutcome {
        config_hash: cfg.hash(),
        fit,
        report,
    };
    std::fs::write(run.root.join("dfr.json"), serde_json::to_string_pretty(&outcome)?)?;
    let table = format!("# config_hash={}\n{}", cfg.hash(), outcome.report.to_table());
    std::fs::write(run.root.join("dfr.txt"), table)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub final_train_acc: f64,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config_hash: String,
    pub name: String,
    pub profile: Profile,
    pub seed: u64,
    pub dataset_hashes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSummary>,
    pub evaluations: BTreeMap<String, MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dfr: Option<TripletReport>,
}

impl RunMetrics {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::DataUnavailable {
            path: path.to_path_buf(),
            hint: "metrics.json missing; run the experiment first".into(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

fn summary(history: &History) -> Option<TrainSummary> {
    history.epochs.last().map(|r| TrainSummary {
        epochs: history.epochs.len(),
        final_loss: r.loss,
        final_train_acc: r.train_acc,
    })
}

pub fn write_metrics(run: &RunDir, m: &RunMetrics) -> Result<()> {
    std::fs::write(run.metrics(), serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

/// Everything an end-to-end run produced.
pub struct RunOutcome {
    pub run: RunDir,
    pub metrics: RunMetrics,
    pub evaluations: Vec<Evaluation>,
    pub history: History,
    pub dfr: Option<DfrOutcome>,
}

/// Builds data, trains, evaluates, infers the tree and (if configured) runs
/// the DFR comparison, writing every artifact under the run directory.
pub fn run_experiment(cfg: &ExperimentConfig, profile: Profile, store: &SourceStore, out_root: &Path) -> Result<RunOutcome> {
    let run = RunDir::new(out_root, cfg, profile);
    write_config_snapshot(&run, cfg)?;
    let data = build_datasets(cfg, store)?;
    let (model, history) = train_stage(cfg, &data, &run)?;
    let evaluations = evaluate_stage(cfg, &model, &data, &run)?;
    if let Some(tree) = &data.tree {
        tree_stage(cfg, tree, &evaluations[0].confusion, &run)?;
    }
    let dfr = if cfg.dfr.is_some() {
        Some(dfr_stage(cfg, &data, &run)?)
    } else {
        None
    };
    let metrics = RunMetrics {
        config_hash: cfg.hash(),
        name: cfg.name.clone(),
        profile,
        seed: cfg.seed,
        dataset_hashes: data.hashes(),
        train: summary(&history),
        evaluations: evaluations
            .iter()
            .map(|e| (e.name.clone(), e.report.clone()))
            .collect(),
        dfr: dfr.as_ref().map(|d| d.report.clone()),
    };
    write_metrics(&run, &metrics)?;
    Ok(RunOutcome {
        run,
        metrics,
        evaluations,
        history,
        dfr,
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub profile: Profile,
    pub test_set: String,
    pub depth: usize,
    pub ahca: f64,
    pub pcs: Option<f64>,
    pub semantic_accuracy: Option<f64>,
}

/// One row per (run, test set, grouping depth).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub fn report(run_dirs: &[PathBuf]) -> Result<Report> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        let m = RunMetrics::read(&dir.join("metrics.json"))?;
        for (test, r) in &m.evaluations {
            for d in &r.depths {
                rows.push(ReportRow {
                    name: m.name.clone(),
                    profile: m.profile,
                    test_set: test.clone(),
                    depth: d.depth,
                    ahca: d.ahca,
                    pcs: r.pcs,
                    semantic_accuracy: r.semantic_accuracy,
                });
            }
        }
    }
    Ok(Report { rows })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl Report {
    /// Percentages to two decimals.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<24} {:<7} {:<14} {:>5} {:>8} {:>8} {:>9}\n",
            "dataset", "profile", "test", "depth", "AHCA", "PCS", "semantic"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:<7} {:<14} {:>5} {:>8} {:>8} {:>9}",
                r.name,
                r.profile.name(),
                r.test_set,
                r.depth,
                pct(Some(r.ahca)),
                pct(r.pcs),
                pct(r.semantic_accuracy)
            );
        }
        s
    }

    /// Full-precision fractions.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = String::from("name,profile,test_set,depth,ahca,pcs,semantic_accuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.name,
                r.profile.name(),
                r.test_set,
                r.depth,
                r.ahca,
                opt(r.pcs),
                opt(r.semantic_accuracy)
            );
        }
        s
    }
}
