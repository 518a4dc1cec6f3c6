use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::{join_list, parse_list, KvMap};

use super::routing::Routing;

/// Feature extractor placed between the embedding and the capsule layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frontend {
    /// `(D∗W + b) ⊗ elu(D∗V + c)`
    EluGate,
    /// Single convolution followed by ELU, no gate.
    ConvPlain,
    /// Several filter heights, maps cropped to a common length and concatenated.
    MultiFilter,
    /// [`Frontend::MultiFilter`] followed by 2×1 max-pooling.
    MultiFilterMaxPool,
}

impl Frontend {
    pub const ALL: [Frontend; 4] = [
        Frontend::EluGate,
        Frontend::ConvPlain,
        Frontend::MultiFilter,
        Frontend::MultiFilterMaxPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Frontend::EluGate => "elu_gate",
            Frontend::ConvPlain => "conv_plain",
            Frontend::MultiFilter => "multi_filter",
            Frontend::MultiFilterMaxPool => "multi_filter_maxpool",
        }
    }
}

impl fmt::Display for Frontend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Frontend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Frontend::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown front-end variant `{s}`")))
    }
}

impl FromStr for Routing {
    type Err = Error;

    /// Accepts `static`, `dynamic` (3 iterations) or `dynamic:N`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Routing::Static),
            "dynamic" => Ok(Routing::Dynamic { iterations: 3 }),
            other => match other.strip_prefix("dynamic:").map(str::parse::<usize>) {
                Some(Ok(iterations)) if iterations > 0 => Ok(Routing::Dynamic { iterations }),
                _ => Err(Error::Config(format!("unknown routing `{other}`"))),
            },
        }
    }
}

impl fmt::Display for Routing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Routing::Static => f.write_str("static"),
            Routing::Dynamic { iterations } => write!(f, "dynamic:{iterations}"),
        }
    }
}

/// Architecture of a [`CapsNet`](super::CapsNet).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Padded sequence length `l`.
    pub max_len: usize,
    pub num_classes: usize,
    pub frontend: Frontend,
    /// Filter count `n` of the gate / plain convolution.
    pub filters: usize,
    /// Filter height `f`.
    pub filter_size: usize,
    pub multi_filter_sizes: Vec<usize>,
    pub multi_filter_count: usize,
    pub pool: usize,
    /// Number of convolutional capsules `a`.
    pub capsules: usize,
    /// Convolutional capsule dimension `M`.
    pub capsule_dim: usize,
    /// Text capsule dimension `N`.
    pub class_dim: usize,
    pub routing: Routing,
    pub dropout: f64,
    pub reconstruction: bool,
    pub decoder_hidden: [usize; 2],
    /// Weight of the reconstruction MSE in the loss.
    pub recon_weight: f64,
}

impl ModelConfig {
    /// A small configuration, convenient for tests and toy data.
    pub fn small(vocab_size: usize, max_len: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 8,
            max_len,
            num_classes,
            frontend: Frontend::EluGate,
            filters: 8,
            filter_size: 3,
            multi_filter_sizes: vec![3, 4, 5],
            multi_filter_count: 4,
            pool: 2,
            capsules: 4,
            capsule_dim: 4,
            class_dim: 4,
            routing: Routing::Static,
            dropout: 0.0,
            reconstruction: false,
            decoder_hidden: [512, 1024],
            recon_weight: 0.03,
        }
    }

    /// Rows and channels of the front-end feature map.
    pub fn feature_shape(&self) -> Result<(usize, usize)> {
        let l = self.max_len;
        let too_short = |f: usize| Error::Config(format!("sequence length {l} is shorter than filter height {f}"));
        match self.frontend {
            Frontend::EluGate | Frontend::ConvPlain => {
                if l < self.filter_size {
                    return Err(too_short(self.filter_size));
                }
                Ok((l - self.filter_size + 1, self.filters))
            }
            Frontend::MultiFilter | Frontend::MultiFilterMaxPool => {
                let fmax = *self
                    .multi_filter_sizes
                    .iter()
                    .max()
                    .ok_or_else(|| Error::Config("empty multi_filter_sizes".into()))?;
                if l < fmax {
                    return Err(too_short(fmax));
                }
                let channels = self.multi_filter_count * self.multi_filter_sizes.len();
                let rows = l - fmax + 1;
                if self.frontend == Frontend::MultiFilter {
                    return Ok((rows, channels));
                }
                if self.pool == 0 || rows < self.pool {
                    return Err(Error::Config(format!(
                        "{rows} feature rows cannot be pooled with window {}",
                        self.pool
                    )));
                }
                Ok((rows / self.pool, channels))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("max_len", self.max_len),
            ("num_classes", self.num_classes),
            ("filters", self.filters),
            ("filter_size", self.filter_size),
            ("multi_filter_count", self.multi_filter_count),
            ("capsules", self.capsules),
            ("capsule_dim", self.capsule_dim),
            ("class_dim", self.class_dim),
            ("decoder_hidden", self.decoder_hidden[0].min(self.decoder_hidden[1])),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if self.multi_filter_sizes.contains(&0) {
            return Err(Error::Config("multi_filter_sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Routing::Dynamic { iterations: 0 } = self.routing {
            return Err(Error::Config("route_iters must be at least 1".into()));
        }
        self.feature_shape().map(|_| ())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("vocab_size", self.vocab_size);
        kv.set("embed_dim", self.embed_dim);
        kv.set("max_len", self.max_len);
        kv.set("num_classes", self.num_classes);
        kv.set("frontend", self.frontend);
        kv.set("filters", self.filters);
        kv.set("filter_size", self.filter_size);
        kv.set("multi_filter_sizes", join_list(&self.multi_filter_sizes));
        kv.set("multi_filter_count", self.multi_filter_count);
        kv.set("pool", self.pool);
        kv.set("capsules", self.capsules);
        kv.set("capsule_dim", self.capsule_dim);
        kv.set("class_dim", self.class_dim);
        kv.set("routing", self.routing);
        kv.set("dropout", self.dropout);
        kv.set("reconstruction", self.reconstruction);
        kv.set("decoder_hidden", join_list(&self.decoder_hidden));
        kv.set("recon_weight", self.recon_weight);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let hidden: Vec<usize> = parse_list(&kv.require::<String>("decoder_hidden")?, "decoder_hidden")?;
        let [h1, h2] = hidden[..] else {
            return Err(Error::Config("decoder_hidden needs two sizes".into()));
        };
        let cfg = Self {
            vocab_size: kv.require("vocab_size")?,
            embed_dim: kv.require("embed_dim")?,
            max_len: kv.require("max_len")?,
            num_classes: kv.require("num_classes")?,
            frontend: kv.require::<String>("frontend")?.parse()?,
            filters: kv.require("filters")?,
            filter_size: kv.require("filter_size")?,
            multi_filter_sizes: parse_list(&kv.require::<String>("multi_filter_sizes")?, "multi_filter_sizes")?,
            multi_filter_count: kv.require("multi_filter_count")?,
            pool: kv.require("pool")?,
            capsules: kv.require("capsules")?,
            capsule_dim: kv.require("capsule_dim")?,
            class_dim: kv.require("class_dim")?,
            routing: kv.require::<String>("routing")?.parse()?,
            dropout: kv.require("dropout")?,
            reconstruction: kv.require("reconstruction")?,
            decoder_hidden: [h1, h2],
            recon_weight: kv.require("recon_weight")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(text, Path::new("<model config>"))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::small(20, 9, 3);
        cfg.routing = Routing::Dynamic { iterations: 2 };
        cfg.frontend = Frontend::MultiFilterMaxPool;
        cfg.reconstruction = true;
        let back = ModelConfig::from_text(&cfg.to_kv().to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn feature_shapes() {
        let mut cfg = ModelConfig::small(10, 12, 2);
        assert_eq!(cfg.feature_shape().unwrap(), (10, 8));
        cfg.frontend = Frontend::MultiFilter;
        assert_eq!(cfg.feature_shape().unwrap(), (8, 12));
        cfg.frontend = Frontend::MultiFilterMaxPool;
        assert_eq!(cfg.feature_shape().unwrap(), (4, 12));
        cfg.max_len = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parses_variants_and_routing() {
        assert_eq!("conv_plain".parse::<Frontend>().unwrap(), Frontend::ConvPlain);
        assert!(matches!("pooling".parse::<Frontend>(), Err(Error::Config(_))));
        assert_eq!(
            "dynamic:5".parse::<Routing>().unwrap(),
            Routing::Dynamic { iterations: 5 }
        );
        assert!("dynamic:0".parse::<Routing>().is_err());
    }
}
