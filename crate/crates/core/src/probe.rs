//! Prompt-only search for features tied to the think tokens.
//!
//! One SAE per probed layer reads that layer's activations on a probe prompt.
//! A feature counts when it fires at both `<think>` and `</think>` and at no
//! other position.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{TokenId, TriggerExample, Vocab};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::sae::{harvest_layers, train_on_activations, SaeInit, SaeTrainConfig, SparseAutoencoder};
use crate::tensor::Array;

/// Fixed probe prompt: an instruction followed by empty think and answer
/// blocks.
pub const PROBE_PROMPT: &str = "Problem: first think about the problem, then give the answer. \
<think> reasoning </think> <answer> Answer: answer </answer>";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureActivationMap {
    pub layer: usize,
    /// Latent codes `[positions × m]`.
    pub z: Array,
}

impl FeatureActivationMap {
    pub fn positions(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.z.shape()[1]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FeatureCountProfile {
    /// `(layer, count)` in increasing layer order.
    pub entries: Vec<(usize, usize)>,
}

impl FeatureCountProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,count\n");
        for (l, c) in &self.entries {
            writeln!(s, "{l},{c}").expect("string write");
        }
        s
    }
}

/// Layers probed in a model of depth `num_layers`: the first and last are
/// left out.
pub fn probe_layers(num_layers: usize) -> Vec<usize> {
    (2..num_layers).collect()
}

/// Tokenize and check a probe prompt: exactly one of each think token.
pub fn encode_probe(prompt: &str, vocab: &Vocab) -> Result<TriggerExample> {
    TriggerExample::from_ids(vocab.tokenize(prompt)?, vocab)
}

/// Activation maps for every probed layer. Observational only: the
/// forward pass is not altered.
pub fn probe(
    model: &TransformerModel,
    saes: &BTreeMap<usize, SparseAutoencoder>,
    prompt: &TriggerExample,
) -> Result<Vec<FeatureActivationMap>> {
    probe_with_logits(model, saes, &prompt.ids).map(|(maps, _)| maps)
}

/// [`probe`] that also returns the model's logits from the same pass.
pub fn probe_with_logits(
    model: &TransformerModel,
    saes: &BTreeMap<usize, SparseAutoencoder>,
    tokens: &[TokenId],
) -> Result<(Vec<FeatureActivationMap>, Array)> {
    let layers = probe_layers(model.config.num_layers);
    if let Some(missing) = layers.iter().find(|l| !saes.contains_key(l)) {
        return Err(Error::Config(format!("no SAE supplied for probed layer {missing}")));
    }
    let (logits, acts) = model.forward_capture(tokens, &layers)?;
    let maps = layers
        .iter()
        .map(|&layer| {
            let sae = &saes[&layer];
            let x = acts[&layer].cast(sae.w_enc.precision());
            Ok(FeatureActivationMap {
                layer,
                z: sae.encode(&x)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((maps, logits))
}

/// Features active at both think positions and inactive everywhere else.
/// "Active" means `|z| > eps`; `eps = 0` is plain nonzero.
pub fn count_reasoning_features(
    map: &FeatureActivationMap,
    think_open: usize,
    think_close: usize,
    eps: f64,
) -> usize {
    reasoning_features(map, think_open, think_close, eps).len()
}

/// The feature indices behind [`count_reasoning_features`].
pub fn reasoning_features(
    map: &FeatureActivationMap,
    think_open: usize,
    think_close: usize,
    eps: f64,
) -> Vec<usize> {
    let (p, m) = (map.positions(), map.features());
    let z = map.z.to_f64_vec();
    let active = |pos: usize, f: usize| z[pos * m + f].abs() > eps;
    // Features active anywhere other than the two think positions.
    let mut elsewhere = vec![false; m];
    for pos in (0..p).filter(|&q| q != think_open && q != think_close) {
        for (f, e) in elsewhere.iter_mut().enumerate() {
            *e |= active(pos, f);
        }
    }
    (0..m)
        .filter(|&f| !elsewhere[f] && active(think_open, f) && active(think_close, f))
        .collect()
}

/// Train one SAE per probed layer on `source` activations over `trigger`,
/// probe, and count. All layers share the config, seed and step budget.
pub fn layer_sweep(
    source: &TransformerModel,
    trigger: &[Vec<TokenId>],
    prompt: &TriggerExample,
    cfg: &SaeTrainConfig,
    eps: f64,
) -> Result<(FeatureCountProfile, BTreeMap<usize, SparseAutoencoder>)> {
    if trigger.is_empty() {
        return Err(Error::Input("trigger dataset is empty".into()));
    }
    let layers = probe_layers(source.config.num_layers);
    let acts = harvest_layers(source, trigger, &layers, cfg.harvest_batch)?;
    let mut saes = BTreeMap::new();
    for (&layer, a) in &acts {
        let (sae, _) = train_on_activations(a, layer, cfg, SaeInit::FromScratch)?;
        saes.insert(layer, sae);
    }
    let maps = probe(source, &saes, prompt)?;
    let entries = maps
        .iter()
        .map(|m| {
            (
                m.layer,
                count_reasoning_features(m, prompt.think_open, prompt.think_close, eps),
            )
        })
        .collect();
    Ok((FeatureCountProfile { entries }, saes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: &[&[f64]]) -> FeatureActivationMap {
        let m = rows[0].len();
        let v: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureActivationMap {
            layer: 2,
            z: Array::from_f64(&[rows.len(), m], &v).unwrap(),
        }
    }

    #[test]
    fn all_zero_map_counts_nothing() {
        let z = map(&[&[0.0; 5], &[0.0; 5], &[0.0; 5]]);
        assert_eq!(count_reasoning_features(&z, 0, 2, 0.0), 0);
    }

    #[test]
    fn hand_built_map() {
        // Feature 2 fires only at both think positions; feature 5 also
        // fires at position 3.
        let z = map(&[
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            &[0.0, 0.0, 2.0, 0.0, 0.0, 1.0],
            &[0.0, 0.0, 0.5, 0.0, 0.0, 3.0],
            &[0.0, 0.0, 0.0, 0.0, 0.0, 4.0],
        ]);
        assert_eq!(count_reasoning_features(&z, 1, 2, 0.0), 1);
        assert_eq!(reasoning_features(&z, 1, 2, 0.0), vec![2]);
        assert_eq!(count_reasoning_features(&z, 1, 2, 1.0), 0);
    }

    #[test]
    fn probe_prompt_has_one_of_each_think_token() {
        let v = Vocab::task_default();
        let ex = encode_probe(PROBE_PROMPT, &v).unwrap();
        assert!(ex.think_open < ex.think_close);
        assert!(matches!(
            encode_probe("Problem: no tokens here", &v),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn probe_layers_skip_first_and_last() {
        assert_eq!(probe_layers(8), vec![2, 3, 4, 5, 6, 7]);
    }
}
