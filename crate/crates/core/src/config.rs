//! Training configuration: dataset presets, `key = value` files and overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::network::{GROUP_CAPSULE, GROUP_DECODER, GROUP_EMBEDDING, GROUP_GATE};
use crate::model::{Frontend, ModelConfig, Routing};
use crate::optim::L2Constants;

/// Named hyperparameter sets, one per benchmark dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    News20,
    Reuters10,
    Mr2004,
    Mr2005,
    Trec,
    Mpqa,
    Imdb,
}

/// Row values of a preset: `b, l2_gate, f_n, f_s, lr, a, M, N, k`.
struct Row {
    batch: usize,
    l2_gate: f64,
    filters: usize,
    filter_size: usize,
    lr: f64,
    capsules: usize,
    capsule_dim: usize,
    class_dim: usize,
    classes: usize,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::News20,
        Preset::Reuters10,
        Preset::Mr2004,
        Preset::Mr2005,
        Preset::Trec,
        Preset::Mpqa,
        Preset::Imdb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::News20 => "20news",
            Preset::Reuters10 => "reuters10",
            Preset::Mr2004 => "mr2004",
            Preset::Mr2005 => "mr2005",
            Preset::Trec => "trec",
            Preset::Mpqa => "mpqa",
            Preset::Imdb => "imdb",
        }
    }

    fn row(self) -> Row {
        let r = |batch, l2_gate, filter_size, lr, capsules, capsule_dim, class_dim, classes| Row {
            batch,
            l2_gate,
            filters: 256,
            filter_size,
            lr,
            capsules,
            capsule_dim,
            class_dim,
            classes,
        };
        match self {
            Preset::News20 => r(40, 0.001, 5, 0.001, 6, 10, 16, 20),
            Preset::Reuters10 => r(40, 0.001, 3, 0.0001, 6, 10, 16, 10),
            Preset::Mr2004 => r(50, 0.001, 3, 0.001, 6, 16, 16, 2),
            Preset::Mr2005 => r(50, 0.02, 1, 0.0001, 16, 16, 24, 2),
            Preset::Trec => r(50, 0.0085, 5, 0.001, 16, 32, 16, 6),
            Preset::Mpqa => r(40, 0.01, 1, 0.00008, 16, 8, 16, 2),
            Preset::Imdb => r(50, 0.01, 6, 0.001, 6, 8, 16, 2),
        }
    }

    pub fn num_classes(self) -> usize {
        self.row().classes
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_ROUTE_ITERS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Option<Preset>,
    /// Class count; taken from the preset or the data when absent.
    pub num_classes: Option<usize>,
    pub batch_size: usize,
    pub l2_gate: f64,
    pub l2_other: f64,
    pub l2_embedding: f64,
    pub filters: usize,
    pub filter_size: usize,
    pub lr: f64,
    pub capsules: usize,
    pub capsule_dim: usize,
    pub class_dim: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    pub embed_dim: usize,
    /// Padded length; the 95th-percentile training length when absent.
    pub max_len: Option<usize>,
    pub routing: Routing,
    pub frontend: Frontend,
    pub reconstruction: bool,
    pub recon_weight: f64,
    pub dataset: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub pretrained: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: None,
            num_classes: None,
            batch_size: 50,
            l2_gate: 0.001,
            l2_other: 0.01,
            l2_embedding: 0.0,
            filters: 256,
            filter_size: 3,
            lr: 0.001,
            capsules: 6,
            capsule_dim: 16,
            class_dim: 16,
            dropout: 0.5,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            embed_dim: 300,
            max_len: None,
            routing: Routing::Static,
            frontend: Frontend::EluGate,
            reconstruction: false,
            recon_weight: 0.03,
            dataset: None,
            embeddings: None,
            pretrained: false,
        }
    }
}

const KEYS: [&str; 25] = [
    "preset",
    "classes",
    "batch_size",
    "l2_gate",
    "l2_other",
    "l2_embedding",
    "filters",
    "filter_size",
    "lr",
    "capsules",
    "capsule_dim",
    "class_dim",
    "dropout",
    "epochs",
    "seed",
    "embed_dim",
    "max_len",
    "routing",
    "route_iters",
    "frontend",
    "reconstruction",
    "recon_weight",
    "dataset",
    "embeddings",
    "pretrained",
];

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let r = preset.row();
        Self {
            preset: Some(preset),
            num_classes: Some(r.classes),
            batch_size: r.batch,
            l2_gate: r.l2_gate,
            filters: r.filters,
            filter_size: r.filter_size,
            lr: r.lr,
            capsules: r.capsules,
            capsule_dim: r.capsule_dim,
            class_dim: r.class_dim,
            ..Self::default()
        }
    }

    /// Reads a config file; relative `dataset`/`embeddings` paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let kv = KvMap::parse(&text, path)?;
        let mut cfg = Self::from_kv(&kv)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.embeddings].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Starts from `preset` (or the defaults) and applies every other key.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        if let Some(bad) = kv.keys().find(|k| !KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown config key `{bad}`")));
        }
        let mut cfg = match kv.parse_value::<String>("preset")? {
            Some(p) => Self::preset(p.parse()?),
            None => Self::default(),
        };
        cfg.apply(kv)?;
        Ok(cfg)
    }

    /// Overrides fields with the keys present in `kv` (except `preset`).
    pub fn apply(&mut self, kv: &KvMap) -> Result<()> {
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parse_value($key)? {
                    $field = v;
                }
            };
        }
        take!("batch_size", self.batch_size);
        take!("l2_gate", self.l2_gate);
        take!("l2_other", self.l2_other);
        take!("l2_embedding", self.l2_embedding);
        take!("filters", self.filters);
        take!("filter_size", self.filter_size);
        take!("lr", self.lr);
        take!("capsules", self.capsules);
        take!("capsule_dim", self.capsule_dim);
        take!("class_dim", self.class_dim);
        take!("dropout", self.dropout);
        take!("epochs", self.epochs);
        take!("seed", self.seed);
        take!("embed_dim", self.embed_dim);
        take!("reconstruction", self.reconstruction);
        take!("recon_weight", self.recon_weight);
        take!("pretrained", self.pretrained);
        if let Some(k) = kv.parse_value("classes")? {
            self.num_classes = Some(k);
        }
        if let Some(l) = kv.parse_value("max_len")? {
            self.max_len = Some(l);
        }
        if let Some(f) = kv.get("frontend") {
            self.frontend = f.parse()?;
        }
        let iters = kv.parse_value::<usize>("route_iters")?;
        if let Some(r) = kv.get("routing") {
            self.routing = match r {
                "static" => Routing::Static,
                "dynamic" => Routing::Dynamic {
                    iterations: DEFAULT_ROUTE_ITERS,
                },
                other => other.parse()?,
            };
        }
        if let (Some(n), Routing::Dynamic { iterations }) = (iters, &mut self.routing) {
            *iterations = n;
        }
        if let Some(p) = kv.get("dataset") {
            self.dataset = Some(PathBuf::from(p));
        }
        if let Some(p) = kv.get("embeddings") {
            self.embeddings = Some(PathBuf::from(p));
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("filters", self.filters),
            ("filter_size", self.filter_size),
            ("capsules", self.capsules),
            ("capsule_dim", self.capsule_dim),
            ("class_dim", self.class_dim),
            ("epochs", self.epochs),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if self.max_len == Some(0) || self.num_classes == Some(0) {
            return Err(Error::Config("`max_len` and `classes` must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, v) in [
            ("l2_gate", self.l2_gate),
            ("l2_other", self.l2_other),
            ("l2_embedding", self.l2_embedding),
            ("recon_weight", self.recon_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{name}` must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Routing::Dynamic { iterations: 0 } = self.routing {
            return Err(Error::Config("route_iters must be at least 1".into()));
        }
        if self.pretrained && self.embeddings.is_none() {
            return Err(Error::Config("`pretrained` needs an `embeddings` path".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        if let Some(p) = self.preset {
            kv.set("preset", p);
        }
        if let Some(k) = self.num_classes {
            kv.set("classes", k);
        }
        kv.set("batch_size", self.batch_size);
        kv.set("l2_gate", self.l2_gate);
        kv.set("l2_other", self.l2_other);
        kv.set("l2_embedding", self.l2_embedding);
        kv.set("filters", self.filters);
        kv.set("filter_size", self.filter_size);
        kv.set("lr", self.lr);
        kv.set("capsules", self.capsules);
        kv.set("capsule_dim", self.capsule_dim);
        kv.set("class_dim", self.class_dim);
        kv.set("dropout", self.dropout);
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv.set("embed_dim", self.embed_dim);
        if let Some(l) = self.max_len {
            kv.set("max_len", l);
        }
        kv.set("routing", self.routing);
        kv.set("frontend", self.frontend);
        kv.set("reconstruction", self.reconstruction);
        kv.set("recon_weight", self.recon_weight);
        if let Some(p) = &self.dataset {
            kv.set("dataset", p.display());
        }
        if let Some(p) = &self.embeddings {
            kv.set("embeddings", p.display());
        }
        kv.set("pretrained", self.pretrained);
        kv
    }

    /// Architecture for a vocabulary of `vocab_size`, length `max_len` and `num_classes`.
    pub fn model_config(&self, vocab_size: usize, max_len: usize, num_classes: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            max_len,
            num_classes,
            frontend: self.frontend,
            filters: self.filters,
            filter_size: self.filter_size,
            multi_filter_sizes: vec![3, 4, 5],
            multi_filter_count: 100,
            pool: 2,
            capsules: self.capsules,
            capsule_dim: self.capsule_dim,
            class_dim: self.class_dim,
            routing: self.routing,
            dropout: self.dropout,
            reconstruction: self.reconstruction,
            decoder_hidden: [512, 1024],
            recon_weight: self.recon_weight,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Gate constant for front-end weights, `l2_other` for capsule and
    /// decoder weights, `l2_embedding` for the word vectors.
    pub fn l2_constants(&self) -> L2Constants {
        L2Constants::new()
            .with(GROUP_GATE, self.l2_gate)
            .with(GROUP_CAPSULE, self.l2_other)
            .with(GROUP_DECODER, self.l2_other)
            .with(GROUP_EMBEDDING, self.l2_embedding)
    }
}
