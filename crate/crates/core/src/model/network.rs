use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::vocab::PAD_ID;
use crate::error::{Error, Result};
use crate::optim::dropout_mask;
use crate::real::Real;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

use super::config::{Frontend, ModelConfig};
use super::layers::{class_mask, DecoderParams, FrontendWeights, GateConvParams, PrimaryCapsuleParams};
use super::loss::Margins;
use super::routing::{classify, ClassCapsules, Routing};

pub const GROUP_EMBEDDING: &str = "embedding";
pub const GROUP_GATE: &str = "gate";
pub const GROUP_CAPSULE: &str = "capsule";
pub const GROUP_DECODER: &str = "decoder";

/// Standard deviation of the normal weight initialisation.
pub const INIT_STD: f64 = 0.1;
/// Half-width of the uniform initialisation for word vectors.
pub const EMBED_INIT_RANGE: f64 = 0.25;

#[derive(Clone, Debug)]
enum FrontendIds {
    Gate {
        w: ParamId,
        v: ParamId,
        b: ParamId,
        c: ParamId,
    },
    Plain {
        w: ParamId,
        b: ParamId,
    },
    Multi(Vec<(ParamId, ParamId)>),
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: ParamId,
    frontend: FrontendIds,
    primary_kernel: ParamId,
    primary_bias: ParamId,
    route: ParamId,
    decoder: Option<[(ParamId, ParamId); 3]>,
}

#[derive(Clone, Copy)]
enum Init {
    Embedding,
    Weight,
    Bias,
}

/// Vars recorded by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `l×e` embedded document.
    pub embedded: Var,
    pub features: Var,
    /// `a×M` squashed convolutional capsules.
    pub primary: Var,
    /// `a×k×N` prediction vectors.
    pub h_hat: Var,
    /// `k×N` class capsules.
    pub v: Var,
    /// Final coupling coefficients (dynamic routing only).
    pub coupling: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub margin: Var,
    /// Unweighted reconstruction MSE, when the decoder is enabled.
    pub recon_mse: Option<Var>,
}

/// Capsule network for text classification.
#[derive(Clone, Debug)]
pub struct CapsNet<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
    margins: Margins,
}

impl<T: Real> CapsNet<T> {
    /// Randomly initialised network: normal(0, 0.1) weights, zero biases,
    /// uniform word vectors with a zero pad row.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Self::build(config, |kind, shape| match kind {
            Init::Bias => Tensor::zeros(shape),
            Init::Weight => Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut rng))),
            Init::Embedding => {
                let mut t = Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-EMBED_INIT_RANGE..=EMBED_INIT_RANGE)));
                t.row_mut(PAD_ID).fill(T::zero());
                t
            }
        })
    }

    /// Rebuilds a network from named tensors, e.g. read from a checkpoint.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut net = Self::build(config, |_, shape| Tensor::zeros(shape))?;
        let mut seen = vec![false; net.params.len()];
        for (name, value) in named {
            let id = net
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            net.params.set(id, value)?;
            seen[id.index()] = true;
        }
        if let Some(missing) = net.params.ids().find(|id| !seen[id.index()]) {
            return Err(Error::Checkpoint(format!(
                "missing tensor `{}`",
                net.params.info(missing).name
            )));
        }
        Ok(net)
    }

    fn build(config: ModelConfig, mut init: impl FnMut(Init, &[usize]) -> Tensor<T>) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let e = config.embed_dim;
        let mut reg = |p: &mut ParamStore<T>, name: &str, group: &str, kind: Init, shape: &[usize]| {
            p.register(name, group, matches!(kind, Init::Bias), init(kind, shape))
        };
        let embedding = reg(
            &mut p,
            "embedding",
            GROUP_EMBEDDING,
            Init::Embedding,
            &[config.vocab_size, e],
        )?;
        let (f, n) = (config.filter_size, config.filters);
        let frontend = match config.frontend {
            Frontend::EluGate => FrontendIds::Gate {
                w: reg(&mut p, "gate.w", GROUP_GATE, Init::Weight, &[f, e, n])?,
                v: reg(&mut p, "gate.v", GROUP_GATE, Init::Weight, &[f, e, n])?,
                b: reg(&mut p, "gate.b", GROUP_GATE, Init::Bias, &[n])?,
                c: reg(&mut p, "gate.c", GROUP_GATE, Init::Bias, &[n])?,
            },
            Frontend::ConvPlain => FrontendIds::Plain {
                w: reg(&mut p, "conv.w", GROUP_GATE, Init::Weight, &[f, e, n])?,
                b: reg(&mut p, "conv.b", GROUP_GATE, Init::Bias, &[n])?,
            },
            Frontend::MultiFilter | Frontend::MultiFilterMaxPool => {
                let count = config.multi_filter_count;
                let mut banks = Vec::new();
                for &fs in &config.multi_filter_sizes {
                    banks.push((
                        reg(
                            &mut p,
                            &format!("multi.{fs}.w"),
                            GROUP_GATE,
                            Init::Weight,
                            &[fs, e, count],
                        )?,
                        reg(&mut p, &format!("multi.{fs}.b"), GROUP_GATE, Init::Bias, &[count])?,
                    ));
                }
                FrontendIds::Multi(banks)
            }
        };
        let (rows, channels) = config.feature_shape()?;
        let (a, m, k, nn) = (
            config.capsules,
            config.capsule_dim,
            config.num_classes,
            config.class_dim,
        );
        let primary_kernel = reg(
            &mut p,
            "primary.kernel",
            GROUP_CAPSULE,
            Init::Weight,
            &[rows, channels, a * m],
        )?;
        let primary_bias = reg(&mut p, "primary.bias", GROUP_CAPSULE, Init::Bias, &[a * m])?;
        let route = reg(&mut p, "route.w", GROUP_CAPSULE, Init::Weight, &[a, k, m, nn])?;
        let decoder = if config.reconstruction {
            let [h1, h2] = config.decoder_hidden;
            let sizes = [(k * nn, h1), (h1, h2), (h2, config.max_len * e)];
            let mut layers = Vec::new();
            for (i, (din, dout)) in sizes.into_iter().enumerate() {
                layers.push((
                    reg(
                        &mut p,
                        &format!("decoder.{i}.w"),
                        GROUP_DECODER,
                        Init::Weight,
                        &[din, dout],
                    )?,
                    reg(&mut p, &format!("decoder.{i}.b"), GROUP_DECODER, Init::Bias, &[dout])?,
                ));
            }
            Some([layers[0], layers[1], layers[2]])
        } else {
            None
        };
        Ok(Self {
            config,
            params: p,
            layout: Layout {
                embedding,
                frontend,
                primary_kernel,
                primary_bias,
                route,
                decoder,
            },
            margins: Margins::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn margins(&self) -> &Margins {
        &self.margins
    }

    pub fn set_margins(&mut self, margins: Margins) {
        self.margins = margins;
    }

    /// Switches the routing scheme; both schemes share every parameter.
    pub fn set_routing(&mut self, routing: Routing) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.routing = routing;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        self.params.get(self.layout.embedding)
    }

    /// Replaces the word-vector table; the pad row is forced to zero.
    pub fn set_embeddings(&mut self, mut table: Tensor<T>) -> Result<()> {
        table.expect_shape(&[self.config.vocab_size, self.config.embed_dim], "embedding table")?;
        table.row_mut(PAD_ID).fill(T::zero());
        self.params.set(self.layout.embedding, table)
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(_, info, t)| (info.name.as_str(), t))
    }

    pub fn has_decoder(&self) -> bool {
        self.layout.decoder.is_some()
    }

    pub fn cast<U: Real>(&self) -> CapsNet<U> {
        CapsNet {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            margins: self.margins,
        }
    }

    pub fn frontend_weights(&self) -> FrontendWeights<T> {
        let g = |id| self.params.get(id).clone();
        match &self.layout.frontend {
            FrontendIds::Gate { w, v, b, c } => FrontendWeights::EluGate(GateConvParams {
                w: g(*w),
                v: g(*v),
                b: g(*b),
                c: g(*c),
            }),
            FrontendIds::Plain { w, b } => FrontendWeights::ConvPlain { w: g(*w), b: g(*b) },
            FrontendIds::Multi(banks) => FrontendWeights::MultiFilter {
                banks: banks.iter().map(|&(w, b)| (g(w), g(b))).collect(),
                pool: (self.config.frontend == Frontend::MultiFilterMaxPool).then_some(self.config.pool),
            },
        }
    }

    pub fn primary_params(&self) -> PrimaryCapsuleParams<T> {
        PrimaryCapsuleParams {
            kernel: self.params.get(self.layout.primary_kernel).clone(),
            bias: self.params.get(self.layout.primary_bias).clone(),
            capsules: self.config.capsules,
            dim: self.config.capsule_dim,
        }
    }

    /// `a×k×M×N` transformation matrices shared by both routing schemes.
    pub fn route_weights(&self) -> &Tensor<T> {
        self.params.get(self.layout.route)
    }

    pub fn decoder_params(&self) -> Option<DecoderParams<T>> {
        let ids = self.layout.decoder?;
        let g = |(w, b): (ParamId, ParamId)| (self.params.get(w).clone(), self.params.get(b).clone());
        Some(DecoderParams {
            layers: [g(ids[0]), g(ids[1]), g(ids[2])],
        })
    }

    /// Records the forward pass. Dropout is applied to the front-end output
    /// when `dropout_rng` is given and the configured rate is positive.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        ids: &[usize],
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward> {
        if ids.len() != self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence of length {} fed to a model built for length {}",
                ids.len(),
                self.config.max_len
            )));
        }
        let embedded = tape.embed(self.layout.embedding, ids, Some(PAD_ID))?;
        let mut features = self.frontend_var(tape, embedded)?;
        if let Some(rng) = dropout_rng {
            if self.config.dropout > 0.0 {
                let mask = dropout_mask(tape.value(features).shape(), self.config.dropout, rng)?;
                features = tape.mul_const(features, mask)?;
            }
        }
        let kernel = tape.param(self.layout.primary_kernel);
        let bias = tape.param(self.layout.primary_bias);
        let flat = tape.conv1d(features, kernel, bias)?;
        let shaped = tape.reshape(flat, &[self.config.capsules, self.config.capsule_dim])?;
        let primary = tape.squash(shaped)?;
        let w = tape.param(self.layout.route);
        let h_hat = tape.predict_upper(primary, w)?;
        let (v, coupling) = match self.config.routing {
            Routing::Static => {
                let s = tape.sum_lower(h_hat)?;
                (tape.squash(s)?, None)
            }
            Routing::Dynamic { iterations } => {
                let (v, c) = dynamic_route_var(tape, h_hat, iterations)?;
                (v, Some(c))
            }
        };
        Ok(Forward {
            embedded,
            features,
            primary,
            h_hat,
            v,
            coupling,
        })
    }

    fn frontend_var(&self, tape: &mut Tape<'_, T>, d: Var) -> Result<Var> {
        match &self.layout.frontend {
            FrontendIds::Gate { w, v, b, c } => {
                let (w, v, b, c) = (tape.param(*w), tape.param(*v), tape.param(*b), tape.param(*c));
                let linear = tape.conv1d(d, w, b)?;
                let pre = tape.conv1d(d, v, c)?;
                let gate = tape.elu(pre);
                tape.mul(linear, gate)
            }
            FrontendIds::Plain { w, b } => {
                let (w, b) = (tape.param(*w), tape.param(*b));
                let y = tape.conv1d(d, w, b)?;
                Ok(tape.elu(y))
            }
            FrontendIds::Multi(banks) => {
                let (rows, _) = self.config.feature_shape()?;
                let rows = if self.config.frontend == Frontend::MultiFilterMaxPool {
                    rows * self.config.pool
                } else {
                    rows
                };
                let mut maps = Vec::with_capacity(banks.len());
                for &(w, b) in banks {
                    let (w, b) = (tape.param(w), tape.param(b));
                    let y = tape.conv1d(d, w, b)?;
                    let y = tape.elu(y);
                    maps.push(tape.crop_rows(y, rows)?);
                }
                let joined = tape.concat_cols(&maps)?;
                if self.config.frontend == Frontend::MultiFilterMaxPool {
                    tape.maxpool_rows(joined, self.config.pool)
                } else {
                    Ok(joined)
                }
            }
        }
    }

    /// Margin loss plus, with the decoder enabled, the weighted reconstruction MSE.
    ///
    /// The decoder sees the capsule of `label`; the embedded input is the
    /// (fixed) reconstruction target.
    pub fn loss(&self, tape: &mut Tape<'_, T>, fwd: &Forward, label: usize) -> Result<LossVars> {
        let margin = tape.margin_loss(fwd.v, label, self.margins)?;
        if !self.has_decoder() {
            return Ok(LossVars {
                total: margin,
                margin,
                recon_mse: None,
            });
        }
        let target = tape.value(fwd.embedded).clone();
        let decoded = self.decode_var(tape, fwd.v, label)?;
        let mse = tape.mse(decoded, target)?;
        let weighted = tape.scale(mse, T::lit(self.config.recon_weight));
        let total = tape.add(margin, weighted)?;
        Ok(LossVars {
            total,
            margin,
            recon_mse: Some(mse),
        })
    }

    fn decode_var(&self, tape: &mut Tape<'_, T>, v: Var, class: usize) -> Result<Var> {
        let ids = self
            .layout
            .decoder
            .ok_or_else(|| Error::Config("model has no reconstruction decoder".into()))?;
        let (k, n) = (self.config.num_classes, self.config.class_dim);
        if class >= k {
            return Err(Error::Index(format!("class {class} with {k} capsules")));
        }
        let masked = tape.mul_const(v, class_mask(k, n, class))?;
        let mut x = tape.reshape(masked, &[k * n])?;
        for (i, (w, b)) in ids.into_iter().enumerate() {
            let (w, b) = (tape.param(w), tape.param(b));
            x = tape.linear(x, w, b)?;
            if i < 2 {
                x = tape.elu(x);
            }
        }
        tape.reshape(x, &[self.config.max_len, self.config.embed_dim])
    }

    /// Inference-mode class capsules for one padded sequence.
    pub fn class_capsules(&self, ids: &[usize]) -> Result<ClassCapsules<T>> {
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward(&mut tape, ids, None)?;
        ClassCapsules::new(tape.value(fwd.v).clone())
    }

    pub fn predict(&self, ids: &[usize]) -> Result<usize> {
        Ok(classify(&self.class_capsules(ids)?))
    }

    /// Decodes the capsule of `class` back to an `l×e` matrix.
    pub fn reconstruct(&self, v: &ClassCapsules<T>, class: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.params);
        let var = tape.constant(v.v.clone());
        let out = self.decode_var(&mut tape, var, class)?;
        Ok(tape.value(out).clone())
    }
}

/// Dynamic routing recorded on a tape, returning `(v, final coupling)`.
pub fn dynamic_route_var<T: Real>(tape: &mut Tape<'_, T>, h_hat: Var, iterations: usize) -> Result<(Var, Var)> {
    if iterations == 0 {
        return Err(Error::Config("dynamic routing needs at least one iteration".into()));
    }
    let shape = tape.value(h_hat).shape().to_vec();
    let mut logits = tape.constant(Tensor::zeros(&shape[..2]));
    let mut out = None;
    for it in 0..iterations {
        let c = tape.softmax_rows(logits)?;
        let s = tape.route_sum(c, h_hat)?;
        let v = tape.squash(s)?;
        if it + 1 < iterations {
            let agree = tape.agreement(v, h_hat)?;
            logits = tape.add(logits, agree)?;
        }
        out = Some((v, c));
    }
    Ok(out.expect("at least one iteration"))
}
