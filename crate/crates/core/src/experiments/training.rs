use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::{load_pretrained_vectors, percentile_length, Corpus, Dataset, EmbeddingMatrix, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::model::CapsNet;
use crate::optim::{adam_step, l2_accumulate_grad, l2_penalty, lr_schedule, AdamState};
use crate::real::Real;
use crate::tape::{Gradients, Tape};

use super::parallel::{map_shards, worker_threads};

/// Encoded splits and the vocabulary they share.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Pretrained word vectors, when requested by the config.
    pub embeddings: Option<EmbeddingMatrix>,
}

impl Prepared {
    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn max_len(&self) -> usize {
        self.train.max_len
    }

    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Builds the vocabulary (train + val), picks the sequence length and
/// class count, encodes every split and loads pretrained vectors if asked.
pub fn prepare(cfg: &TrainConfig, corpus: &Corpus) -> Result<Prepared> {
    cfg.validate()?;
    let vocab = corpus.build_vocab();
    let max_len = cfg
        .max_len
        .unwrap_or_else(|| percentile_length(&corpus.train).max(needed_len(cfg)));
    let k = cfg.num_classes.unwrap_or(corpus.num_classes);
    if k < corpus.num_classes {
        return Err(Error::Config(format!(
            "config declares {k} classes but the data has labels up to {}",
            corpus.num_classes - 1
        )));
    }
    let enc = |split| Dataset::encode(corpus.split(split), &vocab, max_len, k, split);
    let embeddings = if cfg.pretrained {
        let path = cfg
            .embeddings
            .as_ref()
            .ok_or_else(|| Error::Config("`pretrained` needs an `embeddings` path".into()))?;
        if !path.is_file() {
            return Err(Error::Config(format!(
                "embeddings file {} does not exist",
                path.display()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Some(load_pretrained_vectors(path, &vocab, Some(cfg.embed_dim), &mut rng)?)
    } else {
        None
    };
    Ok(Prepared {
        train: enc(Split::Train)?,
        val: enc(Split::Val)?,
        test: enc(Split::Test)?,
        vocab,
        embeddings,
    })
}

/// Shortest length every front-end variant can convolve and pool.
fn needed_len(cfg: &TrainConfig) -> usize {
    cfg.filter_size.max(6)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-batch loss including the L2 penalty.
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    /// Mean unweighted reconstruction MSE, with the decoder enabled.
    pub recon_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc: Option<f64>,
    pub seed: u64,
    pub config: TrainConfig,
}

impl RunRecord {
    /// `epoch,train_loss,val_acc,lr` rows followed by a `#` summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_acc,lr\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_acc, e.lr);
        }
        let test = self.test_acc.map_or("none".to_string(), |a| a.to_string());
        let _ = writeln!(
            out,
            "# best_epoch={} best_val_acc={} test_acc={} seed={} routing={} frontend={}",
            self.best_epoch, self.best_val_acc, test, self.seed, self.config.routing, self.config.frontend
        );
        out
    }
}

pub struct TrainOutcome<T: Real> {
    pub record: RunRecord,
    /// Parameters of the epoch with the best validation accuracy.
    pub model: CapsNet<T>,
}

/// Per-example dropout seed, independent of batch sharding.
fn example_seed(seed: u64, epoch: usize, step: usize, index: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for x in [epoch as u64, step as u64, index as u64] {
        h = (h ^ x).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

struct ShardResult<T: Real> {
    grads: Gradients<T>,
    loss: f64,
    recon: f64,
}

fn batch_gradients<T: Real>(
    net: &CapsNet<T>,
    data: &Dataset,
    batch: &[usize],
    seed: u64,
    epoch: usize,
    step: usize,
    threads: usize,
) -> Result<ShardResult<T>> {
    let shards = map_shards(batch.len(), threads, |range| -> Result<ShardResult<T>> {
        let mut grads = Gradients::zeros_like(net.params());
        let (mut loss, mut recon) = (0.0, 0.0);
        for pos in range {
            let ex = &data.examples[batch[pos]];
            let mut rng = ChaCha8Rng::seed_from_u64(example_seed(seed, epoch, step, pos));
            let mut tape = Tape::new(net.params());
            let fwd = net.forward(&mut tape, &ex.ids, Some(&mut rng))?;
            let lv = net.loss(&mut tape, &fwd, ex.label)?;
            loss += tape.value(lv.total).item()?.to_f64();
            if let Some(m) = lv.recon_mse {
                recon += tape.value(m).item()?.to_f64();
            }
            tape.backward(lv.total, &mut grads)?;
        }
        Ok(ShardResult { grads, loss, recon })
    });
    let mut iter = shards.into_iter();
    let mut total = iter.next().ok_or_else(|| Error::Contract("empty batch".into()))??;
    for s in iter {
        let s = s?;
        total.grads.add_assign(&s.grads)?;
        total.loss += s.loss;
        total.recon += s.recon;
    }
    Ok(total)
}

fn check_compatible<T: Real>(net: &CapsNet<T>, data: &Dataset) -> Result<()> {
    let cfg = net.config();
    if data.max_len != cfg.max_len || data.num_classes != cfg.num_classes {
        return Err(Error::Shape(format!(
            "model expects length {} and {} classes, {} split has length {} and {} classes",
            cfg.max_len, cfg.num_classes, data.split, data.max_len, data.num_classes
        )));
    }
    Ok(())
}

/// Fraction of examples whose longest class capsule is the true label.
pub fn evaluate_accuracy<T: Real>(net: &CapsNet<T>, data: &Dataset) -> Result<f64> {
    check_compatible(net, data)?;
    if data.is_empty() {
        return Err(Error::Contract(format!("{} split is empty", data.split)));
    }
    let counts = map_shards(data.len(), worker_threads(), |range| -> Result<usize> {
        let mut hits = 0;
        for ex in &data.examples[range] {
            if net.predict(&ex.ids)? == ex.label {
                hits += 1;
            }
        }
        Ok(hits)
    });
    let hits = counts.into_iter().sum::<Result<usize>>()?;
    Ok(hits as f64 / data.len() as f64)
}

/// Predicted class for every example, in order.
pub fn predict_all<T: Real>(net: &CapsNet<T>, ids: &[Vec<usize>]) -> Result<Vec<usize>> {
    let parts = map_shards(ids.len(), worker_threads(), |range| {
        ids[range].iter().map(|x| net.predict(x)).collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::with_capacity(ids.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Trains with Adam, per-epoch decay, dropout and L2, keeping the
/// parameters of the epoch with the best validation accuracy (earliest on ties).
pub fn run_training<T: Real>(cfg: &TrainConfig, data: &Prepared) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let model_cfg = cfg.model_config(data.vocab.len(), data.max_len(), data.num_classes())?;
    let mut net = CapsNet::<T>::new(model_cfg, cfg.seed)?;
    if let Some(emb) = &data.embeddings {
        net.set_embeddings(emb.table.cast())?;
    }
    check_compatible(&net, &data.train)?;
    check_compatible(&net, &data.val)?;

    let l2 = cfg.l2_constants();
    let threads = worker_threads();
    let mut adam = AdamState::new(net.params());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, crate::tape::ParamStore<T>)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = lr_schedule(cfg.lr, epoch);
        let (mut loss_sum, mut recon_sum, mut batches) = (0.0, 0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut res = batch_gradients(&net, &data.train, batch, cfg.seed, epoch, step, threads)?;
            let n = batch.len() as f64;
            res.grads.scale(T::lit(1.0 / n));
            l2_accumulate_grad(net.params(), &l2, &mut res.grads)?;
            let loss = res.loss / n + l2_penalty(net.params(), &l2)?.to_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    what: format!("loss is {loss}"),
                });
            }
            adam_step(net.params_mut(), &res.grads, &mut adam, lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::Divergence { epoch, step, what },
                other => other,
            })?;
            loss_sum += loss;
            recon_sum += res.recon / n;
            batches += 1;
        }
        let val_acc = evaluate_accuracy(&net, &data.val)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_acc,
            lr,
            recon_mse: net.has_decoder().then(|| recon_sum / batches as f64),
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, net.params().clone()));
        }
    }
    let (best_epoch, best_val_acc, params) = best.ok_or_else(|| Error::Config("epochs must be positive".into()))?;
    *net.params_mut() = params;
    let test_acc = if data.test.is_empty() {
        None
    } else {
        Some(evaluate_accuracy(&net, &data.test)?)
    };
    Ok(TrainOutcome {
        record: RunRecord {
            epochs,
            best_epoch,
            best_val_acc,
            test_acc,
            seed: cfg.seed,
            config: cfg.clone(),
        },
        model: net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawExample;
    use crate::model::Routing;

    pub(crate) fn toy_corpus() -> Corpus {
        let rows = [
            (0, "good great fine film"),
            (0, "great good movie fine"),
            (0, "fine good great story"),
            (0, "good film great fine"),
            (1, "bad awful poor film"),
            (1, "awful bad movie poor"),
            (1, "poor bad awful story"),
            (1, "bad film awful poor"),
        ];
        let ex: Vec<RawExample> = rows
            .iter()
            .map(|&(label, t)| RawExample {
                label,
                tokens: crate::data::tokenize(t),
            })
            .collect();
        Corpus::from_splits(ex.clone(), ex.clone(), ex, None).unwrap()
    }

    pub(crate) fn toy_config(routing: Routing) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            filters: 64,
            filter_size: 3,
            capsules: 4,
            capsule_dim: 8,
            class_dim: 8,
            embed_dim: 16,
            epochs: 50,
            lr: 0.01,
            dropout: 0.0,
            max_len: Some(10),
            routing,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn toy_reaches_full_train_accuracy() {
        for routing in [Routing::Static, Routing::Dynamic { iterations: 3 }] {
            let cfg = toy_config(routing);
            let data = prepare(&cfg, &toy_corpus()).unwrap();
            let out = run_training::<f32>(&cfg, &data).unwrap();
            assert_eq!(evaluate_accuracy(&out.model, &data.train).unwrap(), 1.0, "{routing}");
            let max = out.record.epochs.iter().map(|e| e.val_acc).fold(0.0, f64::max);
            assert_eq!(out.record.best_val_acc, max);
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let mut cfg = toy_config(Routing::Static);
        cfg.epochs = 3;
        cfg.dropout = 0.5;
        let data = prepare(&cfg, &toy_corpus()).unwrap();
        let a = run_training::<f32>(&cfg, &data).unwrap().record;
        let b = run_training::<f32>(&cfg, &data).unwrap().record;
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a, b);
        assert_eq!(a.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn divergence_reports_epoch_and_step() {
        let mut cfg = toy_config(Routing::Static);
        cfg.lr = 1e30;
        cfg.epochs = 3;
        let data = prepare(&cfg, &toy_corpus()).unwrap();
        match run_training::<f32>(&cfg, &data) {
            Err(Error::Divergence { .. }) => {}
            Err(other) => panic!("{other}"),
            Ok(r) => panic!("did not diverge: {:?}", r.record.epochs),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = toy_config(Routing::Static);
        let data = prepare(&cfg, &toy_corpus()).unwrap();
        let mut other = cfg.clone();
        other.max_len = Some(12);
        let data2 = prepare(&other, &toy_corpus()).unwrap();
        let net = CapsNet::<f32>::new(cfg.model_config(data.vocab.len(), 10, 2).unwrap(), 0).unwrap();
        assert!(matches!(evaluate_accuracy(&net, &data2.test), Err(Error::Shape(_))));
    }
}
