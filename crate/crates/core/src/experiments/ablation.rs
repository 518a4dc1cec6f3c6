use std::fmt::Write as _;

use crate::config::{TrainConfig, DEFAULT_ROUTE_ITERS};
use crate::error::{Error, Result};
use crate::model::{Frontend, Routing};

use super::training::{evaluate_accuracy, run_training, Prepared};

/// Seeds averaged per cell.
pub const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub frontend: Frontend,
    pub routing: Routing,
    /// `(seed, accuracy)` in seed order.
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Split the accuracies were measured on.
    pub measured_on: &'static str,
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("frontend\trouting\tmean");
        if let Some(r) = self.rows.first() {
            for (seed, _) in &r.per_seed {
                let _ = write!(out, "\tseed{seed}");
            }
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}\t{}\t{:.4}", r.frontend, r.routing, r.mean);
            for (_, acc) in &r.per_seed {
                let _ = write!(out, "\t{acc:.4}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per (front-end, routing, seed) and reports mean test
/// accuracy (validation accuracy when there is no test split).
pub fn run_ablation(
    base: &TrainConfig,
    data: &Prepared,
    frontends: &[Frontend],
    seeds: &[u64],
) -> Result<AblationTable> {
    if frontends.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one front-end and one seed".into(),
        ));
    }
    let iterations = match base.routing {
        Routing::Dynamic { iterations } => iterations,
        Routing::Static => DEFAULT_ROUTE_ITERS,
    };
    let eval_split = if data.test.is_empty() { &data.val } else { &data.test };
    let mut rows = Vec::new();
    for &frontend in frontends {
        for routing in [Routing::Static, Routing::Dynamic { iterations }] {
            let mut per_seed = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let cfg = TrainConfig {
                    frontend,
                    routing,
                    seed,
                    ..base.clone()
                };
                let out = run_training::<f32>(&cfg, data)?;
                per_seed.push((seed, evaluate_accuracy(&out.model, eval_split)?));
            }
            let mean = per_seed.iter().map(|(_, a)| a).sum::<f64>() / per_seed.len() as f64;
            rows.push(AblationRow {
                frontend,
                routing,
                per_seed,
                mean,
            });
        }
    }
    Ok(AblationTable {
        rows,
        measured_on: eval_split.split.name(),
    })
}
