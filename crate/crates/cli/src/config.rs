//! Run configuration: a flat `key=value` file with dotted sections
//! (`data.*`, `model.*`, `train.*`) plus command-line overrides.
//!
//! The model section starts from a preset chosen by `task` and
//! `model.preset`; every other key overrides it. Unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ibt_core::data::{
    gen_synthetic, load_off, load_xyz, normalize_cloud, Dataset, DatasetTask, Family, Split, SyntheticSpec,
};
use ibt_core::geometry::{sample_points, PointCloud};
use ibt_core::layers::derive_seed;
use ibt_core::model::{IbtConfig, Task};
use ibt_core::trainer::{Schedule, TrainConfig, DEFAULT_LR, DEFAULT_MOMENTUM};
use ibt_core::{IbtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Full-size network: ModelNet40 widths for classification, ShapeNetPart
    /// for segmentation.
    Reference,
    ScanObjectNN,
    /// Small widths for CPU runs on synthetic shapes.
    Desk,
}

impl FromStr for Preset {
    type Err = IbtError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "reference" => Ok(Preset::Reference),
            "scanobjectnn" => Ok(Preset::ScanObjectNN),
            "desk" => Ok(Preset::Desk),
            other => Err(IbtError::Config(format!(
                "model.preset must be reference, scanobjectnn or desk, got {other:?}"
            ))),
        }
    }
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Reference => "reference",
            Preset::ScanObjectNN => "scanobjectnn",
            Preset::Desk => "desk",
        }
    }

    fn build(self, task: Task, families: usize) -> IbtConfig {
        let parts: usize = Family::ALL.iter().take(families).map(|f| f.num_parts()).sum();
        match (self, task) {
            (Preset::Reference, Task::Classification) => IbtConfig::modelnet40(),
            (Preset::Reference, Task::Segmentation) => IbtConfig::shapenet_part(),
            (Preset::ScanObjectNN, Task::Classification) => IbtConfig::scanobjectnn(),
            (Preset::ScanObjectNN, Task::Segmentation) => IbtConfig::shapenet_part(),
            (Preset::Desk, Task::Classification) => IbtConfig::desk_classification(families),
            (Preset::Desk, Task::Segmentation) => IbtConfig::desk_segmentation(families, parts),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// One sub-directory per class holding `.xyz` or `.off` files.
    Files { train_dir: PathBuf, test_dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub families: Vec<Family>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub noise: f64,
    pub jitter: f64,
    pub rotate: bool,
    /// Center and scale every cloud to the unit sphere before use.
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            families: Family::ALL.to_vec(),
            train_per_class: 8,
            test_per_class: 8,
            points: 1024,
            noise: 0.01,
            jitter: 0.15,
            rotate: false,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 200,
            batch_size: 8,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            schedule: Schedule::Constant,
            target_train_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: Option<String>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub preset: Preset,
    pub data: DataConfig,
    pub model: IbtConfig,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_pairs(&[]).expect("defaults are valid")
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| IbtError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_families(value: &str) -> Result<Vec<Family>> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// Splits `key=value`, ignoring blank lines and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| IbtError::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    /// Later pairs win. `task`, `model.preset` and `data.families` are read
    /// first because the model preset depends on them.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let task: Task = match last("task").or(last("model.task")) {
            Some(v) => v.parse()?,
            None => Task::Classification,
        };
        let preset: Preset = match last("model.preset") {
            Some(v) => v.parse()?,
            None => Preset::Reference,
        };
        let families = match last("data.families") {
            Some(v) => parse_families(v)?,
            None => Family::ALL.to_vec(),
        };
        let mut cfg = RunConfig {
            name: None,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            preset,
            data: DataConfig {
                families: families.clone(),
                ..Default::default()
            },
            model: preset.build(task, families.len()),
            train: TrainSettings::default(),
        };
        if preset == Preset::Desk {
            cfg.train.lr = ibt_core::trainer::DESK_LR;
            cfg.data.points = 128;
        }
        let (mut train_dir, mut test_dir) = (None, None);
        for (key, value) in pairs {
            let v = value.as_str();
            match key.as_str() {
                "task" | "model.task" | "model.preset" => {}
                "name" => cfg.name = Some(v.to_string()).filter(|s| !s.is_empty()),
                "seed" => cfg.seed = parse(key, v)?,
                "output_dir" => cfg.output_dir = PathBuf::from(v),
                "data.source" => match v {
                    "synthetic" | "files" => {}
                    other => return Err(IbtError::Config(format!("data.source must be synthetic or files, got {other:?}"))),
                },
                "data.families" => cfg.data.families = parse_families(v)?,
                "data.train_per_class" => cfg.data.train_per_class = parse(key, v)?,
                "data.test_per_class" => cfg.data.test_per_class = parse(key, v)?,
                "data.points" => cfg.data.points = parse(key, v)?,
                "data.noise" => cfg.data.noise = parse(key, v)?,
                "data.jitter" => cfg.data.jitter = parse(key, v)?,
                "data.rotate" => cfg.data.rotate = parse(key, v)?,
                "data.normalize" => cfg.data.normalize = parse(key, v)?,
                "data.train_dir" => train_dir = Some(PathBuf::from(v)),
                "data.test_dir" => test_dir = Some(PathBuf::from(v)),
                "train.epochs" => cfg.train.epochs = parse(key, v)?,
                "train.batch_size" => cfg.train.batch_size = parse(key, v)?,
                "train.lr" => cfg.train.lr = parse(key, v)?,
                "train.momentum" => cfg.train.momentum = parse(key, v)?,
                "train.schedule" => {
                    cfg.train.schedule = match v {
                        "constant" => Schedule::Constant,
                        "cosine" => Schedule::Cosine,
                        other => return Err(IbtError::Config(format!("train.schedule must be constant or cosine, got {other:?}"))),
                    }
                }
                "train.target_train_accuracy" => {
                    cfg.train.target_train_accuracy = if v == "none" { None } else { Some(parse(key, v)?) }
                }
                k => match k.strip_prefix("model.") {
                    Some(field) => cfg.model.set(field, v)?,
                    None => return Err(IbtError::Config(format!("unknown key {k:?}"))),
                },
            }
        }
        cfg.model.task = task;
        if last("data.source") == Some("files") {
            let (Some(train_dir), Some(test_dir)) = (train_dir, test_dir) else {
                return Err(IbtError::Config("data.source=files needs data.train_dir and data.test_dir".into()));
            };
            cfg.data.source = DataSource::Files { train_dir, test_dir };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Reads `path` (if any) and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| IbtError::Config(format!("cannot read config {}: {e}", p.display())))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let d = &self.data;
        if d.families.is_empty() {
            return Err(IbtError::Config("data.families is empty".into()));
        }
        if d.points < self.model.k {
            return Err(IbtError::Config(format!(
                "data.points = {} is smaller than model.k = {}",
                d.points, self.model.k
            )));
        }
        if self.train.batch_size == 0 {
            return Err(IbtError::Config("train.batch_size must be at least 1".into()));
        }
        if d.source == DataSource::Synthetic {
            let classes = match self.model.task {
                Task::Classification => self.model.num_classes,
                Task::Segmentation => self.model.num_categories,
            };
            if d.families.len() > classes {
                return Err(IbtError::Config(format!(
                    "{} shape families but the model has {classes} outputs",
                    d.families.len()
                )));
            }
        }
        Ok(())
    }

    pub fn dataset_task(&self) -> DatasetTask {
        match self.model.task {
            Task::Classification => DatasetTask::Classification,
            Task::Segmentation => DatasetTask::PartSegmentation,
        }
    }

    pub fn train_config(&self, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            schedule: self.train.schedule,
            seed: self.seed,
            target_train_accuracy: self.train.target_train_accuracy,
            checkpoint_dir,
        }
    }

    /// Resolved configuration; feeding it back reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let d = &self.data;
        let t = &self.train;
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        line("task", self.model.task.to_string());
        if let Some(n) = &self.name {
            line("name", n.clone());
        }
        line("seed", self.seed.to_string());
        line("output_dir", self.output_dir.display().to_string());
        match &d.source {
            DataSource::Synthetic => line("data.source", "synthetic".into()),
            DataSource::Files { train_dir, test_dir } => {
                line("data.source", "files".into());
                line("data.train_dir", train_dir.display().to_string());
                line("data.test_dir", test_dir.display().to_string());
            }
        }
        line("data.families", d.families.iter().map(|f| f.name()).collect::<Vec<_>>().join(","));
        line("data.train_per_class", d.train_per_class.to_string());
        line("data.test_per_class", d.test_per_class.to_string());
        line("data.points", d.points.to_string());
        line("data.noise", d.noise.to_string());
        line("data.jitter", d.jitter.to_string());
        line("data.rotate", d.rotate.to_string());
        line("data.normalize", d.normalize.to_string());
        line("model.preset", self.preset.name().into());
        for (k, v) in self.model.to_pairs() {
            if k != "task" {
                line(&format!("model.{k}"), v);
            }
        }
        line("train.epochs", t.epochs.to_string());
        line("train.batch_size", t.batch_size.to_string());
        line("train.lr", t.lr.to_string());
        line("train.momentum", t.momentum.to_string());
        line(
            "train.schedule",
            match t.schedule {
                Schedule::Constant => "constant",
                Schedule::Cosine => "cosine",
            }
            .into(),
        );
        line(
            "train.target_train_accuracy",
            t.target_train_accuracy.map_or_else(|| "none".into(), |v| v.to_string()),
        );
        out
    }

    /// Part ranges of the synthetic families, in family order.
    pub fn synthetic_part_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut offset = 0;
        self.data
            .families
            .iter()
            .map(|f| {
                offset += f.num_parts();
                offset - f.num_parts()..offset
            })
            .collect()
    }

    /// Train and test sets. Synthetic data is generated from `seed`; file
    /// data is resampled to `data.points` per cloud.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = match &self.data.source {
            DataSource::Synthetic => {
                let spec = |split, per_class| SyntheticSpec {
                    families: self.data.families.clone(),
                    per_class,
                    points: self.data.points,
                    noise: self.data.noise,
                    jitter: self.data.jitter,
                    rotate: self.data.rotate,
                    task: self.dataset_task(),
                    split,
                    seed: derive_seed(self.seed, "data"),
                };
                (
                    gen_synthetic(&spec(Split::Train, self.data.train_per_class))?,
                    gen_synthetic(&spec(Split::Test, self.data.test_per_class))?,
                )
            }
            DataSource::Files { train_dir, test_dir } => {
                let train = load_dir(train_dir, Split::Train, self)?;
                let mut test = load_dir(test_dir, Split::Test, self)?;
                if test.class_names != train.class_names {
                    return Err(IbtError::Data(format!(
                        "class folders differ between {} and {}",
                        train_dir.display(),
                        test_dir.display()
                    )));
                }
                test.part_ranges = train.part_ranges.clone();
                test.validate()?;
                (train, test)
            }
        };
        if self.data.normalize {
            for c in train.clouds.iter_mut().chain(test.clouds.iter_mut()) {
                *c = normalize_cloud(c);
            }
        }
        Ok((train, test))
    }
}

/// Loads one cloud from `.xyz` or `.off` by extension.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz" | "txt" | "pts") => load_xyz(path),
        Some("off") => load_off(path),
        _ => Err(IbtError::Data(format!("{}: expected an .xyz or .off file", path.display()))),
    }
}

fn load_dir(dir: &Path, split: Split, cfg: &RunConfig) -> Result<Dataset> {
    let read = |p: &Path| fs::read_dir(p).map_err(|e| IbtError::Data(format!("cannot list {}: {e}", p.display())));
    let mut classes: Vec<PathBuf> = read(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    classes.sort();
    if classes.is_empty() {
        return Err(IbtError::Data(format!("{} has no class folders", dir.display())));
    }
    let seg = cfg.model.task == Task::Segmentation;
    let mut clouds = Vec::new();
    let mut part_ranges = Vec::new();
    for (class, class_dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = read(class_dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
        files.sort();
        let (mut lo, mut hi) = (usize::MAX, 0);
        for f in files {
            let cloud = load_cloud(&f)?;
            let name = format!("{split}/{}", f.strip_prefix(dir).unwrap_or(&f).display());
            let mut cloud = sample_points(&cloud, cfg.data.points, derive_seed(cfg.seed, &name))?.with_category(class);
            cloud.name = name;
            if seg {
                let labels = cloud
                    .point_labels
                    .as_ref()
                    .ok_or_else(|| IbtError::Data(format!("{}: segmentation needs per-point labels", f.display())))?;
                lo = lo.min(*labels.iter().min().unwrap_or(&0));
                hi = hi.max(labels.iter().max().map_or(0, |m| m + 1));
            } else {
                cloud.point_labels = None;
            }
            clouds.push(cloud);
        }
        if seg {
            part_ranges.push(lo.min(hi)..hi);
        }
    }
    let ds = Dataset {
        clouds,
        class_names: classes
            .iter()
            .map(|p| p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()))
            .collect(),
        split,
        task: cfg.dataset_task(),
        part_ranges,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.model.k, 40);
        assert_eq!(c.model.embed_dim, 128);
        assert_eq!((c.train.lr, c.train.momentum), (0.1, 0.9));
        assert_eq!(c.data.points, 1024);
        let seg = RunConfig::from_pairs(&pairs(&[("task", "segmentation")])).unwrap();
        assert_eq!(seg.model.k, 80);
    }

    #[test]
    fn later_values_win_and_text_round_trips() {
        let c = RunConfig::from_text("model.preset=desk\nseed=3\nseed=4\nmodel.k=8\ndata.points=64\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.model.k, 8);
        assert_eq!(c.model.embed_dim, 64);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["colour=red", "model.depth=3", "train.speed=1", "data.source=web"] {
            assert!(matches!(RunConfig::from_text(bad), Err(IbtError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn desk_segmentation_sizes_follow_families() {
        let c = RunConfig::from_text("task=segmentation\nmodel.preset=desk\ndata.families=sphere,cylinder\n").unwrap();
        assert_eq!((c.model.num_categories, c.model.num_parts), (2, 5));
        assert_eq!(c.synthetic_part_ranges(), vec![0..2, 2..5]);
    }
}
