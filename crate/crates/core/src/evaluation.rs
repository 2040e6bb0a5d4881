//! Evaluation of a model over a labelled test set.

use std::collections::HashMap;

use crate::data::SegSample;
use crate::embeddings::{EmbeddingBundle, EmbeddingProvider};
use crate::error::Result;
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::model::{ImageInput, SegModel};

/// Image embeddings keyed by sample, valid for one set of prompt values.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingCache {
    prompts: Vec<String>,
    map: HashMap<String, EmbeddingBundle>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Embedding of `sample` under the model's current prompts.
    pub fn get(
        &mut self,
        model: &SegModel,
        provider: &EmbeddingProvider,
        sample: &SegSample,
    ) -> Result<&EmbeddingBundle> {
        let sums = model
            .prompt_names()
            .iter()
            .map(|n| model.registry.checksum(n))
            .collect::<Result<Vec<_>>>()?;
        if sums != self.prompts {
            self.map.clear();
            self.prompts = sums;
        }
        if !self.map.contains_key(&sample.key) {
            let b = model.embed(provider, sample)?;
            self.map.insert(sample.key.clone(), b);
        }
        Ok(&self.map[&sample.key])
    }
}

/// Confusion counts over `test` with the deterministic evaluation seed.
/// Labels outside the model vocabulary are ignored.
pub fn confusion(
    model: &SegModel,
    provider: &EmbeddingProvider,
    test: &[SegSample],
    cache: &mut EmbeddingCache,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.vocab.channels());
    for s in test {
        let size = (s.labels.h, s.labels.w);
        let opts = model.eval_options(&s.key, size);
        let b = cache.get(model, provider, s)?;
        let pred = model.predict(provider, ImageInput::Embedded(b), &opts)?;
        cm.accumulate(&model.vocab.to_channels(&s.labels.data), &pred.channels)?;
    }
    Ok(cm)
}

pub fn evaluate(model: &SegModel, provider: &EmbeddingProvider, test: &[SegSample]) -> Result<EvalReport> {
    evaluate_cached(model, provider, test, &mut EmbeddingCache::new())
}

pub fn evaluate_cached(
    model: &SegModel,
    provider: &EmbeddingProvider,
    test: &[SegSample],
    cache: &mut EmbeddingCache,
) -> Result<EvalReport> {
    let cm = confusion(model, provider, test, cache)?;
    EvalReport::from_confusion(&cm, &model.vocab)
}
