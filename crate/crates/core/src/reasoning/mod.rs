//! Prompt-based zero-shot classification at the `[MASK]` position.

mod prompts;

pub use prompts::{
    builtin_templates, default_color_labels, parse_label_file, parse_prompt_pack, LabelSet,
    PromptTemplate, RenderedPrompt, ITEM_SLOT, MASK_SLOT,
};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::adaptation::FeatureSource;
use crate::encoder::{EncoderModel, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::xadapter::{stack_paired_features, FeatureMatrix, InsertionPlan};

/// Logits at the single `[MASK]` of `seq`, restricted to `labels` in
/// declaration order.
pub fn mask_logits(
    model: &EncoderModel,
    plan: Option<&InsertionPlan>,
    seq: &TokenSequence,
    features: Option<&FeatureMatrix>,
    labels: &LabelSet,
) -> Result<Vec<f64>> {
    let mask_id = model.config().special.mask;
    let positions: Vec<usize> = (0..seq.len()).filter(|&i| seq.ids[i] == mask_id).collect();
    if positions.len() != 1 {
        return Err(Error::contract(format!(
            "expected exactly one [MASK], found {}",
            positions.len()
        )));
    }
    let plan = plan.filter(|p| !p.is_empty());
    let logits = model.logits(seq, plan, features.filter(|_| plan.is_some()))?;
    let row = logits.row(positions[0]);
    Ok(labels.ids().iter().map(|&id| row[id as usize]).collect())
}

/// Arithmetic mean of per-template label logits.
pub fn aggregate_logits(per_template: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_template
        .first()
        .ok_or_else(|| Error::contract("no templates to aggregate"))?;
    let n = per_template.len() as f64;
    let mut out = vec![0.0; first.len()];
    for row in per_template {
        if row.len() != out.len() {
            return Err(Error::Dimension {
                op: "aggregate_logits",
                left: vec![out.len()],
                right: vec![row.len()],
            });
        }
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Outcome for one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub item: String,
    pub label: String,
    /// Mean label logits across templates, in label order.
    pub scores: Vec<f64>,
    /// Winning label of each template on its own.
    pub per_template: Vec<String>,
}

/// Everything needed to answer prompts.
pub struct Reasoner<'a> {
    pub model: &'a EncoderModel,
    pub vocab: &'a Vocabulary,
    pub plan: Option<&'a InsertionPlan>,
    /// Feature source for the adapters; ignored without a plan.
    pub source: Option<&'a dyn FeatureSource>,
}

impl Reasoner<'_> {
    /// Label logits for one rendered prompt.
    pub fn prompt_logits(
        &self,
        prompt: &RenderedPrompt,
        labels: &LabelSet,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>> {
        let plan = self.plan.filter(|p| !p.is_empty());
        let features = match (plan, self.source) {
            (Some(_), Some(src)) => Some(src.features(&prompt.text, rng)?),
            (Some(_), None) => {
                return Err(Error::contract("adapters present but no feature source"))
            }
            _ => None,
        };
        mask_logits(self.model, plan, &prompt.seq, features.as_ref(), labels)
    }

    /// Mean-of-logits prediction over `templates`.
    pub fn classify(
        &self,
        item: &str,
        templates: &[PromptTemplate],
        labels: &LabelSet,
        rng: &mut dyn RngCore,
    ) -> Result<Prediction> {
        if templates.is_empty() {
            return Err(Error::contract("zero-shot classification needs a template"));
        }
        let mut rows = Vec::with_capacity(templates.len());
        for t in templates {
            let prompt = t.render_prompt(item, self.vocab)?;
            rows.push(self.prompt_logits(&prompt, labels, rng)?);
        }
        let scores = aggregate_logits(&rows)?;
        let names = labels.labels();
        Ok(Prediction {
            item: item.to_string(),
            label: names[argmax_first(&scores)].clone(),
            per_template: rows
                .iter()
                .map(|r| names[argmax_first(r)].clone())
                .collect(),
            scores,
        })
    }
}

/// Features for a sentence pair: each side fetched separately, stacked
/// a-first and tagged with the side it came from.
pub fn paired_features(
    source: &dyn FeatureSource,
    text_a: &str,
    text_b: &str,
    rng: &mut dyn RngCore,
) -> Result<FeatureMatrix> {
    let a = source.features(text_a, rng)?;
    let b = source.features(text_b, rng)?;
    stack_paired_features(&a, &b)
}

#[cfg(test)]
mod tests;
