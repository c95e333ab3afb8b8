//! Low-rank adapters on the projection weights of a frozen model.
//!
//! Each adapted site `W: [d_in × d_out]` gains `scale · (x·A)·B` with
//! `A: [d_in × r]` Gaussian and `B: [r × d_out]` zero, so a freshly attached
//! set leaves the model's function unchanged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{site_weight_name, LanguageModel, ModelConfig, TokenBatch, TransformerModel};
use crate::model::{ATTENTION_SITES, MLP_SITES};
use crate::rng;
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Site names: any of `query`, `key`, `value`, `dense`, `fc_in`, `fc_out`.
    pub targets: Vec<String>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 32.0,
            dropout: 0.05,
            targets: ATTENTION_SITES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

impl LoraConfig {
    /// Attention targets plus both MLP projections.
    pub fn with_mlp_targets(mut self) -> Self {
        for s in MLP_SITES {
            if !self.targets.iter().any(|t| t == s) {
                self.targets.push(s.to_string());
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "lora dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        for t in &self.targets {
            if !ATTENTION_SITES.contains(&t.as_str()) && !MLP_SITES.contains(&t.as_str()) {
                return Err(Error::Config(format!("unknown lora target {t:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Array,
    pub b: Array,
}

/// Base-model geometry the adapters were built for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub sites: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub config: LoraConfig,
    pub fingerprint: Fingerprint,
    /// Keyed by the adapted weight's parameter name.
    pairs: BTreeMap<String, LoraPair>,
}

fn site_dims(cfg: &ModelConfig, site: &str) -> (usize, usize) {
    let (d, f) = (cfg.hidden_dim, cfg.mlp_dim());
    match site {
        "fc_in" => (d, f),
        "fc_out" => (f, d),
        _ => (d, d),
    }
}

impl AdapterSet {
    /// Fresh adapters for every target site in every layer.
    pub fn attach(model: &TransformerModel, config: LoraConfig) -> Result<Self> {
        config.validate()?;
        let mc = &model.config;
        let mut r = rng::stream(config.seed, "lora/init");
        let mut pairs = BTreeMap::new();
        for layer in 1..=mc.num_layers {
            for site in &config.targets {
                let (din, dout) = site_dims(mc, site);
                let name = site_weight_name(layer, site).expect("validated site");
                let a = rng::gaussian_array(&mut r, &[din, config.rank], 1.0 / (din as f64).sqrt());
                let b = Array::zeros(&[config.rank, dout]);
                pairs.insert(name, LoraPair { a, b });
            }
        }
        let fingerprint = Fingerprint {
            num_layers: mc.num_layers,
            hidden_dim: mc.hidden_dim,
            mlp_dim: mc.mlp_dim(),
            sites: pairs.keys().cloned().collect(),
        };
        Ok(AdapterSet {
            config,
            fingerprint,
            pairs,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    pub fn site(&self, weight_name: &str) -> Option<&LoraPair> {
        self.pairs.get(weight_name)
    }

    pub fn sites(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(String::as_str)
    }

    pub fn named_params(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::with_capacity(self.pairs.len() * 2);
        for (n, p) in &self.pairs {
            out.push((format!("{n}.lora_a"), &p.a));
            out.push((format!("{n}.lora_b"), &p.b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Array)> {
        let mut out = Vec::with_capacity(self.pairs.len() * 2);
        for (n, p) in self.pairs.iter_mut() {
            out.push((format!("{n}.lora_a"), &mut p.a));
            out.push((format!("{n}.lora_b"), &mut p.b));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, a)| a.len()).sum()
    }

    /// Check that this set fits `model`; errors name the offending site.
    pub fn check_compatible(&self, model: &TransformerModel) -> Result<()> {
        let mc = &model.config;
        for (name, p) in &self.pairs {
            let w = model
                .named_params()
                .into_iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a.shape().to_vec())
                .ok_or_else(|| Error::Load(format!("{name}: no such site in the target model")))?;
            if p.a.shape()[0] != w[0] || p.b.shape()[1] != w[1] {
                return Err(Error::Load(format!(
                    "{name}: adapter expects [{} × {}] but the target model has {:?}",
                    p.a.shape()[0],
                    p.b.shape()[1],
                    w
                )));
            }
        }
        if self.fingerprint.num_layers != mc.num_layers
            || self.fingerprint.hidden_dim != mc.hidden_dim
            || self.fingerprint.mlp_dim != mc.mlp_dim()
        {
            return Err(Error::Load(format!(
                "adapter built for {} layers, width {}, mlp {}; target model has {}, {}, {}",
                self.fingerprint.num_layers,
                self.fingerprint.hidden_dim,
                self.fingerprint.mlp_dim,
                mc.num_layers,
                mc.hidden_dim,
                mc.mlp_dim()
            )));
        }
        Ok(())
    }

    pub fn export(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "fingerprint": self.fingerprint,
        });
        let mut ck = Checkpoint::new("lora", self.config.seed, meta);
        for (n, a) in self.named_params() {
            ck.push(n, a.clone());
        }
        ck
    }

    /// Load exported adapters and verify them against `model`.
    pub fn import(ck: &Checkpoint, model: &TransformerModel) -> Result<Self> {
        ck.require_kind("lora")?;
        let bad = |e: serde_json::Error| Error::Load(format!("bad adapter header: {e}"));
        let config: LoraConfig =
            serde_json::from_value(ck.header.meta["config"].clone()).map_err(bad)?;
        let fingerprint: Fingerprint =
            serde_json::from_value(ck.header.meta["fingerprint"].clone()).map_err(bad)?;
        let mut pairs = BTreeMap::new();
        for site in &fingerprint.sites {
            let a = ck.get(&format!("{site}.lora_a"))?.clone();
            let b = ck.get(&format!("{site}.lora_b"))?.clone();
            if a.shape().len() != 2
                || b.shape().len() != 2
                || a.shape()[1] != config.rank
                || b.shape()[0] != config.rank
            {
                return Err(Error::Load(format!("{site}: adapter factors have the wrong rank")));
            }
            pairs.insert(site.clone(), LoraPair { a, b });
        }
        let set = AdapterSet {
            config,
            fingerprint,
            pairs,
        };
        set.check_compatible(model)?;
        Ok(set)
    }
}

/// A frozen base model with trained adapters applied at inference time.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    pub base: TransformerModel,
    pub adapters: AdapterSet,
}

impl AdaptedModel {
    pub fn new(base: TransformerModel, adapters: AdapterSet) -> Result<Self> {
        adapters.check_compatible(&base)?;
        Ok(AdaptedModel { base, adapters })
    }
}

impl LanguageModel for AdaptedModel {
    fn config(&self) -> &ModelConfig {
        &self.base.config
    }

    fn logits(&self, batch: &TokenBatch) -> Result<Array> {
        self.base.logits_with(batch, Some(&self.adapters), None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(layers: usize, d: usize) -> TransformerModel {
        TransformerModel::new(ModelConfig {
            num_layers: layers,
            hidden_dim: d,
            num_heads: 2,
            vocab_size: 10,
            context_len: 8,
            mlp_ratio: 2,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn fresh_adapters_leave_logits_unchanged() {
        let m = model(2, 8);
        let set = AdapterSet::attach(&m, LoraConfig::default().with_mlp_targets()).unwrap();
        let batch = TokenBatch::single(&[1, 2, 3]).unwrap();
        let plain = m.logits(&batch).unwrap();
        let adapted = AdaptedModel::new(m, set).unwrap().logits(&batch).unwrap();
        assert!(plain.bit_eq(&adapted));
    }

    #[test]
    fn unknown_target_is_config_error() {
        let m = model(2, 8);
        let cfg = LoraConfig {
            targets: vec!["gate".into()],
            ..Default::default()
        };
        assert!(matches!(AdapterSet::attach(&m, cfg), Err(Error::Config(_))));
    }

    #[test]
    fn import_into_wrong_width_names_site() {
        let set = AdapterSet::attach(&model(2, 8), LoraConfig::default()).unwrap();
        let err = AdapterSet::import(&set.export(), &model(2, 12)).unwrap_err();
        assert!(matches!(err, Error::Load(_)));
        assert!(err.to_string().contains("layers.1.attn"), "{err}");
    }

    #[test]
    fn export_import_round_trip() {
        let m = model(2, 8);
        let set = AdapterSet::attach(&m, LoraConfig::default()).unwrap();
        let back = AdapterSet::import(&Checkpoint::from_bytes(&set.export().to_bytes()).unwrap(), &m)
            .unwrap();
        assert_eq!(back, set);
    }
}
