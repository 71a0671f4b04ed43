//! Classification and part-segmentation networks.
//!
//! Both share a backbone: a pointwise embedding, then a stack of IBT layers
//! over one coordinate-space neighbor graph per cloud. The classifier
//! concatenates the layer outputs with the max-pooled embedding, lifts them
//! to a global width, max-pools over points and finishes with a small fully
//! connected head. The segmenter reuses that global feature, broadcasts it
//! back to every point together with a learned category vector, and predicts
//! a part label per point.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{IbtError, Result};
use crate::layers::{
    AblationSwitches, BatchGraph, Ctx, IbtLayer, LayerConfig, Linear, LocalityStream, MlpLayer, ParamBuilder,
    SharedMlp,
};
use crate::numerics::{self as nx, checkpoint, ParamStore, Tensor};

pub const EMBED_HIDDEN: usize = 64;
pub const HEAD_WIDTHS: [usize; 2] = [512, 256];
pub const SEG_WIDTHS: [usize; 3] = [512, 256, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Segmentation,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
        })
    }
}

impl FromStr for Task {
    type Err = IbtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "segmentation" => Ok(Task::Segmentation),
            other => Err(IbtError::Config(format!(
                "task must be classification or segmentation, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IbtConfig {
    pub task: Task,
    pub embed_dim: usize,
    pub num_ibt_layers: usize,
    pub k: usize,
    pub num_classes: usize,
    pub num_parts: usize,
    pub num_categories: usize,
    pub category_embed_dim: usize,
    pub global_dim: usize,
    pub dropout: f64,
    pub switches: AblationSwitches,
    pub locality_stream: LocalityStream,
    /// Also feed the embedding output to the per-point segmentation trunk.
    pub seg_include_f0: bool,
}

impl Default for IbtConfig {
    fn default() -> Self {
        IbtConfig::modelnet40()
    }
}

impl IbtConfig {
    /// Reference classification setup, 40 classes.
    pub fn modelnet40() -> Self {
        IbtConfig {
            task: Task::Classification,
            embed_dim: 128,
            num_ibt_layers: 3,
            k: 40,
            num_classes: 40,
            num_parts: 50,
            num_categories: 16,
            category_embed_dim: 64,
            global_dim: 1024,
            dropout: 0.5,
            switches: AblationSwitches::default(),
            locality_stream: LocalityStream::default(),
            seg_include_f0: false,
        }
    }

    pub fn scanobjectnn() -> Self {
        IbtConfig {
            num_classes: 15,
            ..Self::modelnet40()
        }
    }

    /// Reference part-segmentation setup: 16 categories, 50 parts.
    pub fn shapenet_part() -> Self {
        IbtConfig {
            task: Task::Segmentation,
            k: 80,
            ..Self::modelnet40()
        }
    }

    /// Small classifier for CPU experiments on synthetic shapes.
    pub fn desk_classification(num_classes: usize) -> Self {
        IbtConfig {
            embed_dim: 64,
            k: 16,
            num_classes,
            global_dim: 256,
            ..Self::modelnet40()
        }
    }

    pub fn desk_segmentation(num_categories: usize, num_parts: usize) -> Self {
        IbtConfig {
            task: Task::Segmentation,
            num_categories,
            num_parts,
            ..Self::desk_classification(num_categories)
        }
    }

    pub fn layer_config(&self) -> LayerConfig {
        LayerConfig {
            dim: self.embed_dim,
            switches: self.switches,
            locality_stream: self.locality_stream,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("num_ibt_layers", self.num_ibt_layers),
            ("k", self.k),
            ("num_classes", self.num_classes),
            ("global_dim", self.global_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(IbtError::Config(format!("{name} must be at least 1")));
        }
        if self.task == Task::Segmentation
            && (self.num_parts == 0 || self.num_categories == 0 || self.category_embed_dim == 0)
        {
            return Err(IbtError::Config(
                "segmentation needs num_parts, num_categories and category_embed_dim ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(IbtError::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        self.layer_config().validate()
    }

    /// `key=value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let s = &self.switches;
        vec![
            ("task", self.task.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("num_ibt_layers", self.num_ibt_layers.to_string()),
            ("k", self.k.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("num_parts", self.num_parts.to_string()),
            ("num_categories", self.num_categories.to_string()),
            ("category_embed_dim", self.category_embed_dim.to_string()),
            ("global_dim", self.global_dim.to_string()),
            ("dropout", self.dropout.to_string()),
            ("use_position_encoding", s.use_position_encoding.to_string()),
            ("use_max_pool", s.use_max_pool.to_string()),
            ("use_attention_pool", s.use_attention_pool.to_string()),
            ("use_channel_gate_w", s.use_channel_gate_w.to_string()),
            ("use_position_embedding", s.use_position_embedding.to_string()),
            ("use_pooling_module", s.use_pooling_module.to_string()),
            ("use_transformer", s.use_transformer.to_string()),
            ("locality_stream", self.locality_stream.to_string()),
            ("seg_include_f0", self.seg_include_f0.to_string()),
        ]
    }

    pub const KEYS: [&'static str; 19] = [
        "task",
        "embed_dim",
        "num_ibt_layers",
        "k",
        "num_classes",
        "num_parts",
        "num_categories",
        "category_embed_dim",
        "global_dim",
        "dropout",
        "use_position_encoding",
        "use_max_pool",
        "use_attention_pool",
        "use_channel_gate_w",
        "use_position_embedding",
        "use_pooling_module",
        "use_transformer",
        "locality_stream",
        "seg_include_f0",
    ];

    /// Sets one field from its text form. Unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| IbtError::Config(format!("{key}: cannot parse {value:?}")))
        }
        let s = &mut self.switches;
        match key {
            "task" => self.task = value.trim().parse()?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "num_ibt_layers" => self.num_ibt_layers = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "num_parts" => self.num_parts = parse(key, value)?,
            "num_categories" => self.num_categories = parse(key, value)?,
            "category_embed_dim" => self.category_embed_dim = parse(key, value)?,
            "global_dim" => self.global_dim = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "use_position_encoding" => s.use_position_encoding = parse(key, value)?,
            "use_max_pool" => s.use_max_pool = parse(key, value)?,
            "use_attention_pool" => s.use_attention_pool = parse(key, value)?,
            "use_channel_gate_w" => s.use_channel_gate_w = parse(key, value)?,
            "use_position_embedding" => s.use_position_embedding = parse(key, value)?,
            "use_pooling_module" => s.use_pooling_module = parse(key, value)?,
            "use_transformer" => s.use_transformer = parse(key, value)?,
            "locality_stream" => self.locality_stream = value.trim().parse()?,
            "seg_include_f0" => self.seg_include_f0 = parse(key, value)?,
            other => return Err(IbtError::Config(format!("unknown model key {other:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = IbtConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| IbtError::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
enum Head {
    Classification {
        fc: Vec<MlpLayer>,
        out: Linear,
    },
    Segmentation {
        category: MlpLayer,
        trunk: Vec<MlpLayer>,
        out: Linear,
    },
}

/// Backbone activations for one batch.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub graph: BatchGraph,
    /// Embedding output `[B, N, D]`.
    pub f0: Tensor,
    /// One `[B, N, D]` tensor per IBT layer.
    pub layers: Vec<Tensor>,
    /// Max of `f0` over points, `[B, D]`.
    pub coarse_global: Tensor,
}

#[derive(Debug, Clone)]
pub struct IbtModel {
    pub config: IbtConfig,
    pub params: ParamStore,
    embed: SharedMlp,
    pub layers: Vec<IbtLayer>,
    global: SharedMlp,
    head: Head,
}

impl IbtModel {
    pub fn new(config: IbtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = ParamBuilder::new(&mut params, seed);
        let d = config.embed_dim;
        let embed = SharedMlp::new(&mut b, "embed", &[3, EMBED_HIDDEN, d], true, true)?;
        let layers = (0..config.num_ibt_layers)
            .map(|i| IbtLayer::new(&mut b, &format!("ibt{}", i + 1), config.layer_config()))
            .collect::<Result<Vec<_>>>()?;
        let concat = (config.num_ibt_layers + 1) * d;
        let global = SharedMlp::new(&mut b, "global", &[concat, config.global_dim], true, true)?;
        let head = {
            let mut b = b.sub("head");
            match config.task {
                Task::Classification => {
                    let mut fc = Vec::new();
                    let mut width = config.global_dim;
                    for (i, &w) in HEAD_WIDTHS.iter().enumerate() {
                        fc.push(MlpLayer::new(&mut b, &format!("fc{}", i + 1), width, w, true, true)?);
                        width = w;
                    }
                    let out = Linear::new(&mut b, "out", width, config.num_classes, true)?;
                    Head::Classification { fc, out }
                }
                Task::Segmentation => {
                    let category = MlpLayer::new(
                        &mut b,
                        "category",
                        config.num_categories,
                        config.category_embed_dim,
                        false,
                        true,
                    )?;
                    let f0 = if config.seg_include_f0 { d } else { 0 };
                    let mut width = config.num_ibt_layers * d + f0 + config.global_dim + config.category_embed_dim;
                    let mut trunk = Vec::new();
                    for (i, &w) in SEG_WIDTHS.iter().enumerate() {
                        trunk.push(MlpLayer::new(&mut b, &format!("seg{}", i + 1), width, w, true, true)?);
                        width = w;
                    }
                    let out = Linear::new(&mut b, "out", width, config.num_parts, true)?;
                    Head::Segmentation { category, trunk, out }
                }
            }
        };
        Ok(IbtModel {
            config,
            params,
            embed,
            layers,
            global,
            head,
        })
    }

    /// Trainable scalar count.
    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    pub fn embed(&self, ctx: &mut Ctx, coords: &Tensor) -> Result<Tensor> {
        self.embed.forward(ctx, coords)
    }

    pub fn backbone(&self, ctx: &mut Ctx, coords: &Tensor) -> Result<Backbone> {
        let graph = BatchGraph::from_coords(coords, self.config.k)?;
        let f0 = self.embed(ctx, coords)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut f = f0.clone();
        for layer in &self.layers {
            f = layer.forward(ctx, coords, &f, &graph)?;
            layers.push(f.clone());
        }
        let coarse_global = nx::reduce_max(&f0, 1)?.0;
        Ok(Backbone {
            graph,
            f0,
            layers,
            coarse_global,
        })
    }

    /// `[B, G]` global feature: layer outputs plus the broadcast coarse
    /// feature, lifted pointwise and max-pooled over points.
    fn global_feature(&self, ctx: &mut Ctx, bb: &Backbone) -> Result<Tensor> {
        let shape = bb.f0.shape().to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let coarse = nx::broadcast_to(&nx::reshape(&bb.coarse_global, &[b, 1, d])?, &[b, n, d])?;
        let mut parts: Vec<&Tensor> = bb.layers.iter().collect();
        parts.push(&coarse);
        let lifted = self.global.forward(ctx, &nx::concat(&parts, 2)?)?;
        Ok(nx::reduce_max(&lifted, 1)?.0)
    }

    /// `[B, N, 3]` coordinates to `[B, num_classes]` logits.
    pub fn classify(&self, ctx: &mut Ctx, coords: &Tensor) -> Result<Tensor> {
        let Head::Classification { fc, out } = &self.head else {
            return Err(IbtError::Contract("classify called on a segmentation model".into()));
        };
        let bb = self.backbone(ctx, coords)?;
        let mut x = self.global_feature(ctx, &bb)?;
        for layer in fc {
            x = layer.forward(ctx, &x)?;
            x = ctx.dropout(&x, self.config.dropout)?;
        }
        out.forward(ctx, &x)
    }

    /// `[B, N, 3]` coordinates and `[B, num_categories]` one-hot rows to
    /// `[B, N, num_parts]` logits.
    pub fn segment(&self, ctx: &mut Ctx, coords: &Tensor, category_onehot: &Tensor) -> Result<Tensor> {
        let Head::Segmentation { category, trunk, out } = &self.head else {
            return Err(IbtError::Contract("segment called on a classification model".into()));
        };
        let b = coords.shape().first().copied().unwrap_or(0);
        check_one_hot(category_onehot, b, self.config.num_categories)?;
        let bb = self.backbone(ctx, coords)?;
        let n = bb.f0.shape()[1];
        let global = self.global_feature(ctx, &bb)?;
        let g = self.config.global_dim;
        let global = nx::broadcast_to(&nx::reshape(&global, &[b, 1, g])?, &[b, n, g])?;
        let c = self.config.category_embed_dim;
        let cat = category.forward(ctx, category_onehot)?;
        let cat = nx::broadcast_to(&nx::reshape(&cat, &[b, 1, c])?, &[b, n, c])?;

        let mut parts: Vec<&Tensor> = Vec::new();
        if self.config.seg_include_f0 {
            parts.push(&bb.f0);
        }
        parts.extend(bb.layers.iter());
        parts.push(&global);
        parts.push(&cat);
        let mut x = nx::concat(&parts, 2)?;
        for (i, layer) in trunk.iter().enumerate() {
            x = layer.forward(ctx, &x)?;
            if i + 1 < trunk.len() {
                x = ctx.dropout(&x, self.config.dropout)?;
            }
        }
        out.forward(ctx, &x)
    }

    /// Task-dispatching forward. `categories` is required for segmentation.
    pub fn forward(&self, ctx: &mut Ctx, coords: &Tensor, categories: Option<&[usize]>) -> Result<Tensor> {
        match self.config.task {
            Task::Classification => self.classify(ctx, coords),
            Task::Segmentation => {
                let cats = categories
                    .ok_or_else(|| IbtError::Contract("segmentation forward needs shape categories".into()))?;
                self.segment(ctx, coords, &one_hot(cats, self.config.num_categories)?)
            }
        }
    }

    /// Writes the parameters to `path` and the config next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)?;
        let cfg = config_path(path);
        fs::write(&cfg, self.config.to_text()).map_err(|e| IbtError::io(&cfg, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = config_path(path);
        let text = fs::read_to_string(&cfg).map_err(|e| IbtError::io(&cfg, e))?;
        let mut model = IbtModel::new(IbtConfig::from_text(&text)?, 0)?;
        checkpoint::restore(&mut model.params, &checkpoint::load(path)?)?;
        Ok(model)
    }
}

/// Sibling file holding the model config of a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn one_hot(categories: &[usize], n: usize) -> Result<Tensor> {
    let mut data = vec![0.0; categories.len() * n];
    for (row, &c) in categories.iter().enumerate() {
        if c >= n {
            return Err(IbtError::Data(format!("category {c} out of range for {n} categories")));
        }
        data[row * n + c] = 1.0;
    }
    Tensor::new(data, &[categories.len(), n])
}

fn check_one_hot(t: &Tensor, b: usize, n: usize) -> Result<()> {
    if t.shape() != [b, n] {
        return Err(IbtError::dim(format!(
            "category one-hot must be [{b}, {n}], got {:?}",
            t.shape()
        )));
    }
    for (row, vals) in t.data().chunks(n.max(1)).enumerate() {
        let ones = vals.iter().filter(|&&v| v == 1.0).count();
        let zeros = vals.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != n {
            return Err(IbtError::Data(format!("category row {row} is not one-hot: {vals:?}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: Task) -> IbtConfig {
        IbtConfig {
            task,
            embed_dim: 8,
            k: 4,
            num_classes: 3,
            num_parts: 5,
            num_categories: 2,
            category_embed_dim: 4,
            global_dim: 16,
            ..IbtConfig::modelnet40()
        }
    }

    fn cloud(b: usize, n: usize) -> Tensor {
        let data = (0..b * n * 3).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        Tensor::new(data, &[b, n, 3]).unwrap()
    }

    #[test]
    fn config_text_round_trips() {
        let mut c = IbtConfig::desk_segmentation(4, 10);
        c.switches.use_max_pool = false;
        c.locality_stream = LocalityStream::FeedForward;
        assert_eq!(IbtConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(c.to_pairs().iter().map(|p| p.0).collect::<Vec<_>>(), IbtConfig::KEYS);
        assert!(matches!(IbtConfig::default().set("colour", "red"), Err(IbtError::Config(_))));
    }

    #[test]
    fn output_shapes() {
        let m = IbtModel::new(tiny(Task::Classification), 1).unwrap();
        let ctx = &mut Ctx::eval(&m.params);
        assert_eq!(m.classify(ctx, &cloud(2, 10)).unwrap().shape(), [2, 3]);
        let bb = m.backbone(ctx, &cloud(2, 10)).unwrap();
        assert_eq!(bb.layers.len(), 3);
        assert!(bb.layers.iter().all(|l| l.shape() == [2, 10, 8]));

        let m = IbtModel::new(tiny(Task::Segmentation), 1).unwrap();
        let ctx = &mut Ctx::eval(&m.params);
        let y = m.forward(ctx, &cloud(2, 10), Some(&[1, 0])).unwrap();
        assert_eq!(y.shape(), [2, 10, 5]);
    }

    #[test]
    fn too_few_points_is_domain_error() {
        let m = IbtModel::new(tiny(Task::Classification), 1).unwrap();
        let err = m.classify(&mut Ctx::eval(&m.params), &cloud(1, 3)).unwrap_err();
        assert!(matches!(err, IbtError::Domain(_)), "{err}");
    }

    #[test]
    fn malformed_one_hot_is_data_error() {
        let m = IbtModel::new(tiny(Task::Segmentation), 1).unwrap();
        let bad = Tensor::new(vec![1.0, 1.0, 0.0, 1.0], &[2, 2]).unwrap();
        let err = m.segment(&mut Ctx::eval(&m.params), &cloud(2, 6), &bad).unwrap_err();
        assert!(matches!(err, IbtError::Data(_)), "{err}");
    }

    #[test]
    fn reference_widths() {
        let m = IbtModel::new(IbtConfig::shapenet_part(), 0).unwrap();
        let trunk_in = m.params.by_name("head.seg1.linear.weight").unwrap().shape()[0];
        assert_eq!(trunk_in, 1472);
        let m = IbtModel::new(IbtConfig::modelnet40(), 0).unwrap();
        assert_eq!(m.params.by_name("ibt1.rpe.encoder.mlp1.linear.weight").unwrap().shape(), [132, 128]);
        assert_eq!(m.params.by_name("ibt1.lat.query.weight").unwrap().shape(), [128, 32]);
        assert_eq!(m.params.by_name("global.mlp1.linear.weight").unwrap().shape(), [512, 1024]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ibt");
        let m = IbtModel::new(tiny(Task::Classification), 9).unwrap();
        m.save(&path).unwrap();
        let back = IbtModel::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(checkpoint::encode(&back.params), checkpoint::encode(&m.params));
    }
}
