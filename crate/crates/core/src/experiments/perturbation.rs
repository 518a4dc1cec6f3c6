use std::fmt::Write as _;

use crate::data::{pad_sequence, shuffle_word_order, RawExample, RewriteTable, ShuffleMode, Vocabulary};
use crate::error::{Error, Result};
use crate::model::CapsNet;
use crate::real::Real;

use super::training::predict_all;

/// How each sentence is reordered before classification.
#[derive(Clone, Copy, Debug)]
pub enum Perturbation<'a> {
    /// Sentences are classified as given.
    Identity,
    /// Seeded uniform shuffle; example `i` uses `seed + i`.
    Shuffle { seed: u64 },
    /// Hand-written variants looked up by sentence.
    Rewrite(&'a RewriteTable),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbationRow {
    pub original: Vec<String>,
    pub perturbed: Vec<String>,
    pub actual: usize,
    pub static_original: usize,
    pub static_perturbed: usize,
    pub dynamic_original: usize,
    pub dynamic_perturbed: usize,
}

impl PerturbationRow {
    /// The two models disagree on the perturbed sentence, or either one
    /// changed its answer because of the perturbation.
    pub fn is_disagreement(&self) -> bool {
        self.static_perturbed != self.dynamic_perturbed
            || self.static_original != self.static_perturbed
            || self.dynamic_original != self.dynamic_perturbed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationReport {
    pub rows: Vec<PerturbationRow>,
    pub static_accuracy: f64,
    pub dynamic_accuracy: f64,
}

impl PerturbationReport {
    fn from_rows(rows: Vec<PerturbationRow>) -> Self {
        let n = rows.len() as f64;
        let acc = |f: fn(&PerturbationRow) -> usize| rows.iter().filter(|r| f(r) == r.actual).count() as f64 / n;
        Self {
            static_accuracy: acc(|r| r.static_perturbed),
            dynamic_accuracy: acc(|r| r.dynamic_perturbed),
            rows,
        }
    }

    pub fn disagreements(&self) -> impl Iterator<Item = &PerturbationRow> {
        self.rows.iter().filter(|r| r.is_disagreement())
    }

    /// One row per example, then `# accuracy` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "actual\tstatic_original\tstatic_perturbed\tdynamic_original\tdynamic_perturbed\toriginal\tperturbed\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.actual,
                r.static_original,
                r.static_perturbed,
                r.dynamic_original,
                r.dynamic_perturbed,
                r.original.join(" "),
                r.perturbed.join(" ")
            );
        }
        let _ = writeln!(out, "# static_accuracy\t{:.4}", self.static_accuracy);
        let _ = writeln!(out, "# dynamic_accuracy\t{:.4}", self.dynamic_accuracy);
        out
    }
}

/// Classifies every example before and after perturbation with both models.
pub fn run_order_perturbation<T: Real>(
    static_net: &CapsNet<T>,
    dynamic_net: &CapsNet<T>,
    vocab: &Vocabulary,
    examples: &[RawExample],
    perturbation: Perturbation<'_>,
) -> Result<PerturbationReport> {
    let (sc, dc) = (static_net.config(), dynamic_net.config());
    if sc.num_classes != dc.num_classes || sc.max_len != dc.max_len || sc.vocab_size != dc.vocab_size {
        return Err(Error::Config(
            "the two models were not trained on the same dataset".into(),
        ));
    }
    if sc.vocab_size != vocab.len() {
        return Err(Error::Config("vocabulary does not match the models".into()));
    }
    if examples.is_empty() {
        return Err(Error::Config("no examples to perturb".into()));
    }
    if let Some(bad) = examples.iter().find(|e| e.label >= sc.num_classes) {
        return Err(Error::Index(format!(
            "label {} with {} classes",
            bad.label, sc.num_classes
        )));
    }
    let perturbed = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| match perturbation {
            Perturbation::Identity => Ok(ex.tokens.clone()),
            Perturbation::Shuffle { seed } => {
                shuffle_word_order(&ex.tokens, ShuffleMode::Full, seed.wrapping_add(i as u64))
            }
            Perturbation::Rewrite(table) => shuffle_word_order(&ex.tokens, ShuffleMode::Rewrite(table), 0),
        })
        .collect::<Result<Vec<_>>>()?;
    let encode = |toks: &[String]| pad_sequence(&vocab.encode(toks), sc.max_len);
    let orig_ids: Vec<_> = examples.iter().map(|e| encode(&e.tokens)).collect();
    let pert_ids: Vec<_> = perturbed.iter().map(|t| encode(t)).collect();
    let so = predict_all(static_net, &orig_ids)?;
    let sp = predict_all(static_net, &pert_ids)?;
    let dy_o = predict_all(dynamic_net, &orig_ids)?;
    let dy_p = predict_all(dynamic_net, &pert_ids)?;
    let rows = examples
        .iter()
        .zip(perturbed)
        .enumerate()
        .map(|(i, (ex, p))| PerturbationRow {
            original: ex.tokens.clone(),
            perturbed: p,
            actual: ex.label,
            static_original: so[i],
            static_perturbed: sp[i],
            dynamic_original: dy_o[i],
            dynamic_perturbed: dy_p[i],
        })
        .collect();
    Ok(PerturbationReport::from_rows(rows))
}
