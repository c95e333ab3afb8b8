use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::checkpoint::Checkpoint;
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::rng::{self, Rng};
use crate::tensor::{Array, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Projection sites inside the attention sublayer.
pub const ATTENTION_SITES: [&str; 4] = ["query", "key", "value", "dense"];
/// Projection sites inside the MLP sublayer.
pub const MLP_SITES: [&str; 2] = ["fc_in", "fc_out"];

/// Name of the weight matrix at `site` in 1-based `layer`.
pub fn site_weight_name(layer: usize, site: &str) -> Option<String> {
    if ATTENTION_SITES.contains(&site) {
        Some(format!("layers.{layer}.attn.{site}"))
    } else if MLP_SITES.contains(&site) {
        Some(format!("layers.{layer}.mlp.{site}"))
    } else {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gamma: Array,
    pub ln1_beta: Array,
    pub query: Array,
    pub key: Array,
    pub value: Array,
    pub dense: Array,
    pub ln2_gamma: Array,
    pub ln2_beta: Array,
    pub fc_in: Array,
    pub fc_in_bias: Array,
    pub fc_out: Array,
    pub fc_out_bias: Array,
}

impl Block {
    fn fields(&self) -> [(&'static str, &Array); 12] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.query", &self.query),
            ("attn.key", &self.key),
            ("attn.value", &self.value),
            ("attn.dense", &self.dense),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("mlp.fc_in", &self.fc_in),
            ("mlp.fc_in_bias", &self.fc_in_bias),
            ("mlp.fc_out", &self.fc_out),
            ("mlp.fc_out_bias", &self.fc_out_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Array); 12] {
        [
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("attn.query", &mut self.query),
            ("attn.key", &mut self.key),
            ("attn.value", &mut self.value),
            ("attn.dense", &mut self.dense),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("mlp.fc_in", &mut self.fc_in),
            ("mlp.fc_in_bias", &mut self.fc_in_bias),
            ("mlp.fc_out", &mut self.fc_out),
            ("mlp.fc_out_bias", &mut self.fc_out_bias),
        ]
    }

    pub fn site(&self, site: &str) -> Option<&Array> {
        Some(match site {
            "query" => &self.query,
            "key" => &self.key,
            "value" => &self.value,
            "dense" => &self.dense,
            "fc_in" => &self.fc_in,
            "fc_out" => &self.fc_out,
            _ => return None,
        })
    }
}

/// Decoder-only pre-norm transformer. Weights are stored `[d_in × d_out]`
/// and applied as `x · W` to row-major activations.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub tok_emb: Array,
    pub pos_emb: Array,
    pub blocks: Vec<Block>,
    pub lnf_gamma: Array,
    pub lnf_beta: Array,
    pub unembed: Array,
}

/// Right-padded batch of token sequences, packed `[batch·seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<TokenId>,
    pub batch: usize,
    pub seq: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn pack(seqs: &[&[TokenId]], pad: TokenId) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Input("batch needs at least one non-empty sequence".into()));
        }
        let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(pad).take(seq - s.len()));
        }
        Ok(TokenBatch {
            ids,
            batch: seqs.len(),
            seq,
            lengths: seqs.iter().map(|s| s.len()).collect(),
        })
    }

    pub fn single(tokens: &[TokenId]) -> Result<Self> {
        TokenBatch::pack(&[tokens], 0)
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    /// True for rows holding real (non-padding) tokens.
    pub fn real_rows(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.rows());
        for &len in &self.lengths {
            m.extend((0..self.seq).map(|t| t < len));
        }
        m
    }

    /// Next-token targets; `None` for padding and the final real token.
    pub fn next_token_targets(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.rows());
        for (b, &len) in self.lengths.iter().enumerate() {
            for t in 0..self.seq {
                out.push(if t + 1 < len {
                    Some(self.ids[b * self.seq + t + 1])
                } else {
                    None
                });
            }
        }
        out
    }
}

/// Intercepts each layer's MLP output before it joins the residual stream.
pub trait ForwardHook {
    /// `layer` is 1-based. Returning `out` unchanged is a pass-through.
    fn mlp_out(&mut self, layer: usize, out: Tensor) -> Result<Tensor>;
}

/// Records the MLP-output activations of selected layers.
#[derive(Debug, Default)]
pub struct Capture {
    layers: BTreeSet<usize>,
    pub captured: BTreeMap<usize, Array>,
}

impl Capture {
    pub fn new(layers: impl IntoIterator<Item = usize>) -> Self {
        Capture {
            layers: layers.into_iter().collect(),
            captured: BTreeMap::new(),
        }
    }
}

impl ForwardHook for Capture {
    fn mlp_out(&mut self, layer: usize, out: Tensor) -> Result<Tensor> {
        if self.layers.contains(&layer) {
            self.captured.insert(layer, out.value().clone());
        }
        Ok(out)
    }
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub adapters: Option<&'a AdapterSet>,
    /// Record base weights as gradient leaves.
    pub track_base: bool,
    /// Record adapter factors as gradient leaves.
    pub track_adapters: bool,
    /// Training-mode adapter dropout draws masks from this stream.
    pub dropout_rng: Option<&'a mut Rng>,
    pub hook: Option<&'a mut dyn ForwardHook>,
    /// Stop after this 1-based layer; no logits are produced.
    pub stop_after: Option<usize>,
}

pub struct ForwardOutput {
    pub logits: Option<Tensor>,
    pub base_leaves: Vec<(String, Tensor)>,
    pub adapter_leaves: Vec<(String, Tensor)>,
}

struct Binder {
    track: bool,
    leaves: Vec<(String, Tensor)>,
}

impl Binder {
    fn new(track: bool) -> Self {
        Binder {
            track,
            leaves: Vec::new(),
        }
    }

    fn bind(&mut self, name: String, a: &Array) -> Tensor {
        if self.track {
            let t = Tensor::param(a.clone());
            self.leaves.push((name, t.clone()));
            t
        } else {
            Tensor::constant(a.clone())
        }
    }
}

struct Pass<'a, 'b> {
    base: Binder,
    lora: Binder,
    adapters: Option<&'a AdapterSet>,
    dropout_rng: Option<&'b mut Rng>,
}

impl Pass<'_, '_> {
    /// `x·W`, plus the low-rank branch when an adapter covers this site.
    fn project(&mut self, name: String, x: &Tensor, w: &Array) -> Result<Tensor> {
        let wt = self.base.bind(name.clone(), w);
        let y = x.matmul(&wt)?;
        let Some(set) = self.adapters else {
            return Ok(y);
        };
        let Some(pair) = set.site(&name) else {
            return Ok(y);
        };
        let a = self.lora.bind(format!("{name}.lora_a"), &pair.a);
        let b = self.lora.bind(format!("{name}.lora_b"), &pair.b);
        let p = set.config.dropout;
        let xin = match self.dropout_rng.as_deref_mut() {
            Some(r) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..x.value().len())
                    .map(|_| if r.gen::<f64>() < p { 0.0 } else { keep })
                    .collect();
                x.mul(&Tensor::from_f64(x.shape(), &mask)?)?
            }
            _ => x.clone(),
        };
        let delta = xin.matmul(&a)?.matmul(&b)?.scale(set.scaling());
        y.add(&delta)
    }
}

impl TransformerModel {
    /// Seeded initialization: Gaussian weights (std 0.02), unit layer-norm
    /// gains, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "model/init");
        let d = config.hidden_dim;
        let f = config.mlp_dim();
        let mut g = |shape: &[usize]| rng::gaussian_array(&mut r, shape, INIT_STD);
        let tok_emb = g(&[config.vocab_size, d]);
        let pos_emb = g(&[config.context_len, d]);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            blocks.push(Block {
                ln1_gamma: Array::full(&[d], 1.0),
                ln1_beta: Array::zeros(&[d]),
                query: g(&[d, d]),
                key: g(&[d, d]),
                value: g(&[d, d]),
                dense: g(&[d, d]),
                ln2_gamma: Array::full(&[d], 1.0),
                ln2_beta: Array::zeros(&[d]),
                fc_in: g(&[d, f]),
                fc_in_bias: Array::zeros(&[f]),
                fc_out: g(&[f, d]),
                fc_out_bias: Array::zeros(&[d]),
            });
        }
        let unembed = g(&[d, config.vocab_size]);
        Ok(TransformerModel {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gamma: Array::full(&[d], 1.0),
            lnf_beta: Array::zeros(&[d]),
            unembed,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Array)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, a) in b.fields() {
                out.push((format!("layers.{}.{n}", i + 1), a));
            }
        }
        out.push(("ln_f.gamma".to_string(), &self.lnf_gamma));
        out.push(("ln_f.beta".to_string(), &self.lnf_beta));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Array)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, a) in b.fields_mut() {
                out.push((format!("layers.{}.{n}", i + 1), a));
            }
        }
        out.push(("ln_f.gamma".to_string(), &mut self.lnf_gamma));
        out.push(("ln_f.beta".to_string(), &mut self.lnf_beta));
        out.push(("unembed".to_string(), &mut self.unembed));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, a)| a.len()).sum()
    }

    /// SHA-256 over parameter names and raw bytes, hex encoded.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (n, a) in self.named_params() {
            h.update(n.as_bytes());
            h.update(a.storage().to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn cast(&self, p: crate::tensor::Precision) -> TransformerModel {
        let mut m = self.clone();
        for (_, a) in m.named_params_mut() {
            *a = a.cast(p);
        }
        m
    }

    fn check_tokens(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq > self.config.context_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds context length {}",
                batch.seq, self.config.context_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &TokenBatch, opts: ForwardOptions<'_>) -> Result<ForwardOutput> {
        self.check_tokens(batch)?;
        let ForwardOptions {
            adapters,
            track_base,
            track_adapters,
            dropout_rng,
            mut hook,
            stop_after,
        } = opts;
        let mut pass = Pass {
            base: Binder::new(track_base),
            lora: Binder::new(track_adapters),
            adapters,
            dropout_rng,
        };
        let heads = self.config.num_heads;
        let pos_ids: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let tok = pass.base.bind("tok_emb".into(), &self.tok_emb);
        let pos = pass.base.bind("pos_emb".into(), &self.pos_emb);
        let mut x = Tensor::embedding(&tok, &batch.ids)?.add(&Tensor::embedding(&pos, &pos_ids)?)?;

        for (i, blk) in self.blocks.iter().enumerate() {
            let layer = i + 1;
            let name = |s: &str| format!("layers.{layer}.{s}");
            let g1 = pass.base.bind(name("ln1.gamma"), &blk.ln1_gamma);
            let b1 = pass.base.bind(name("ln1.beta"), &blk.ln1_beta);
            let h = x.layer_norm(&g1, &b1, LN_EPS)?;
            let q = pass.project(name("attn.query"), &h, &blk.query)?;
            let k = pass.project(name("attn.key"), &h, &blk.key)?;
            let v = pass.project(name("attn.value"), &h, &blk.value)?;
            let att = Tensor::causal_attention(&q, &k, &v, batch.batch, batch.seq, heads)?;
            x = x.add(&pass.project(name("attn.dense"), &att, &blk.dense)?)?;

            let g2 = pass.base.bind(name("ln2.gamma"), &blk.ln2_gamma);
            let b2 = pass.base.bind(name("ln2.beta"), &blk.ln2_beta);
            let h = x.layer_norm(&g2, &b2, LN_EPS)?;
            let fb = pass.base.bind(name("mlp.fc_in_bias"), &blk.fc_in_bias);
            let mid = pass.project(name("mlp.fc_in"), &h, &blk.fc_in)?.add_row(&fb)?.gelu();
            let ob = pass.base.bind(name("mlp.fc_out_bias"), &blk.fc_out_bias);
            let mut out = pass.project(name("mlp.fc_out"), &mid, &blk.fc_out)?.add_row(&ob)?;
            if let Some(hk) = hook.as_deref_mut() {
                out = hk.mlp_out(layer, out)?;
            }
            x = x.add(&out)?;
            if stop_after == Some(layer) {
                return Ok(ForwardOutput {
                    logits: None,
                    base_leaves: pass.base.leaves,
                    adapter_leaves: pass.lora.leaves,
                });
            }
        }
        let gf = pass.base.bind("ln_f.gamma".into(), &self.lnf_gamma);
        let bf = pass.base.bind("ln_f.beta".into(), &self.lnf_beta);
        let h = x.layer_norm(&gf, &bf, LN_EPS)?;
        let logits = h.matmul(&pass.base.bind("unembed".into(), &self.unembed))?;
        Ok(ForwardOutput {
            logits: Some(logits),
            base_leaves: pass.base.leaves,
            adapter_leaves: pass.lora.leaves,
        })
    }

    /// Untracked forward returning pre-softmax logits `[batch·seq × V]`.
    pub fn logits(&self, batch: &TokenBatch) -> Result<Array> {
        self.logits_with(batch, None, None)
    }

    pub fn logits_with<'a>(
        &self,
        batch: &TokenBatch,
        adapters: Option<&'a AdapterSet>,
        hook: Option<&'a mut dyn ForwardHook>,
    ) -> Result<Array> {
        let out = self.forward(
            batch,
            ForwardOptions {
                adapters,
                hook,
                ..Default::default()
            },
        )?;
        Ok(out.logits.expect("full forward").value().clone())
    }

    /// Logits for one sequence plus the MLP-output activations of the
    /// requested layers, each `[seq × d]`.
    pub fn forward_capture(
        &self,
        tokens: &[TokenId],
        capture_layers: &[usize],
    ) -> Result<(Array, BTreeMap<usize, Array>)> {
        if let Some(&bad) = capture_layers
            .iter()
            .find(|&&l| l == 0 || l > self.config.num_layers)
        {
            return Err(Error::Input(format!(
                "capture layer {bad} outside 1..={}",
                self.config.num_layers
            )));
        }
        let batch = TokenBatch::single(tokens)?;
        let mut cap = Capture::new(capture_layers.iter().copied());
        let logits = self.logits_with(&batch, None, Some(&mut cap))?;
        Ok((logits, cap.captured))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_value(&self.config).expect("config serializes");
        let mut ck = Checkpoint::new("model", self.config.seed, meta);
        for (n, a) in self.named_params() {
            ck.push(n, a.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.require_kind("model")?;
        let config: ModelConfig = serde_json::from_value(ck.header.meta.clone())
            .map_err(|e| Error::Load(format!("bad model config in header: {e}")))?;
        let mut m = TransformerModel::new(config)?;
        for (n, a) in m.named_params_mut() {
            let shape = a.shape().to_vec();
            *a = ck.expect(&n, &shape)?;
        }
        Ok(m)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerModel {
        TransformerModel::new(ModelConfig {
            num_layers: 3,
            hidden_dim: 16,
            num_heads: 2,
            vocab_size: 12,
            context_len: 10,
            mlp_ratio: 2,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn capture_shapes() {
        let m = tiny();
        let (logits, caps) = m.forward_capture(&[1, 2, 3, 4], &[]).unwrap();
        assert_eq!(logits.shape(), &[4, 12]);
        assert!(caps.is_empty());
        let (_, caps) = m.forward_capture(&[1, 2, 3, 4], &[1, 2, 3]).unwrap();
        assert_eq!(caps.len(), 3);
        assert!(caps.values().all(|a| a.shape() == [4, 16]));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny();
        assert!(matches!(m.forward_capture(&[12], &[]), Err(Error::Input(_))));
        assert!(matches!(m.forward_capture(&[1; 11], &[]), Err(Error::Input(_))));
        assert!(matches!(m.forward_capture(&[1], &[4]), Err(Error::Input(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny();
        let back = TransformerModel::from_checkpoint(
            &Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.param_hash(), m.param_hash());
        assert_eq!(back, m);
    }

    #[test]
    fn padded_batch_matches_unpadded_rows() {
        let m = tiny();
        let a = [3usize, 4, 5, 6, 7];
        let b = [8usize, 9];
        let batch = TokenBatch::pack(&[&a, &b], 0).unwrap();
        let both = m.logits(&batch).unwrap().to_f64_vec();
        let solo = m.logits(&TokenBatch::single(&b).unwrap()).unwrap().to_f64_vec();
        assert_eq!(&both[5 * 12..5 * 12 + 2 * 12], &solo[..]);
    }
}
