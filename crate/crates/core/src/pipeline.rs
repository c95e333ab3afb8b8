//! Run configuration and the stages that turn it into models: data
//! generation, base pretraining, source fine-tuning, SAE training and
//! SAE-guided adapter tuning.

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{
    check_disjoint, encode_all, ingest, question_hash, split_disjoint, QaPair, SynthSpec, Task, TokenId, Vocab,
};
use crate::error::{Error, Result};
use crate::lora::{AdaptedModel, AdapterSet, LoraConfig};
use crate::model::{train_lm, LmTrainConfig, LmTrainReport, ModelConfig, TransformerModel};
use crate::rng::derive_seed;
use crate::sae::{train_sae, SaeInit, SaeTrainConfig, SaeTrainReport, SparseAutoencoder};
use crate::tuning::{SpliceSession, TuneConfig, TuneReport};

/// How the Stage I SAE is initialised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaeMode {
    #[default]
    Scratch,
    /// Start from a checkpoint and keep training.
    FineTune,
    /// Use a checkpoint as is.
    Pretrained,
}

impl std::str::FromStr for SaeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(SaeMode::Scratch),
            "finetune" | "fine-tune" => Ok(SaeMode::FineTune),
            "pretrained" => Ok(SaeMode::Pretrained),
            _ => Err(Error::Config(format!(
                "unknown sae mode {s:?} (scratch | finetune | pretrained)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub trigger_task: Task,
    pub elicitation_task: Task,
    /// Task the base model is pretrained on; `None` leaves it at init.
    /// Held-out questions of the run are removed from this corpus.
    pub base_task: Option<Task>,
    pub modulus: u64,
    pub operand_max: u64,
    /// Pairs generated per task before the held-out split.
    pub n_examples: usize,
    pub eval_fraction: f64,
    /// Cap on held-out questions scored per task.
    pub eval_size: usize,
    /// Replace the generated trigger pairs with a records file.
    pub trigger_path: Option<PathBuf>,
    pub elicitation_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            trigger_task: Task::ModAdd,
            elicitation_task: Task::ModAdd,
            base_task: Some(Task::ModMul),
            modulus: 10,
            operand_max: 100,
            n_examples: 6000,
            eval_fraction: 0.1,
            eval_size: 300,
            trigger_path: None,
            elicitation_path: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    /// Activation threshold for the reasoning-feature rule.
    pub probe_eps: f64,
    pub gmm_max_iters: usize,
    pub gmm_tol: f64,
    /// Score distribution uses `score - min score` instead of raw scores.
    pub gmm_min_subtracted: bool,
    pub entropy_base: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_new_tokens: 24,
            probe_eps: 0.0,
            gmm_max_iters: 500,
            gmm_tol: 1e-9,
            gmm_min_subtracted: false,
            entropy_base: std::f64::consts::E,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub base_train: LmTrainConfig,
    pub sft: LmTrainConfig,
    pub sae: SaeTrainConfig,
    pub sae_layer: usize,
    pub sae_mode: SaeMode,
    pub lora: LoraConfig,
    pub tune: TuneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vocab = Vocab::task_default();
        RunConfig {
            seed: 0,
            model: ModelConfig {
                num_layers: 4,
                hidden_dim: 32,
                num_heads: 4,
                vocab_size: vocab.len(),
                context_len: 128,
                mlp_ratio: 4,
                seed: 0,
            },
            data: DataConfig::default(),
            base_train: LmTrainConfig {
                steps: 1500,
                batch_size: 16,
                ..Default::default()
            },
            sft: LmTrainConfig {
                steps: 3000,
                batch_size: 16,
                ..Default::default()
            },
            sae: SaeTrainConfig {
                epochs: 100,
                max_steps: Some(3000),
                ..Default::default()
            },
            sae_layer: 2,
            sae_mode: SaeMode::Scratch,
            lora: LoraConfig::default(),
            tune: TuneConfig {
                epochs: 10,
                max_steps: Some(500),
                ..Default::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Copy with every component seed derived from the run seed by name.
    pub fn resolved(&self) -> RunConfig {
        let s = self.seed;
        let mut c = self.clone();
        c.model.seed = derive_seed(s, "model");
        c.data.seed = derive_seed(s, "data");
        c.base_train.seed = derive_seed(s, "base-train");
        c.sft.seed = derive_seed(s, "sft");
        c.sae.seed = derive_seed(s, "sae");
        c.lora.seed = derive_seed(s, "lora");
        c.tune.seed = derive_seed(s, "tune");
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sae.validate()?;
        self.lora.validate()?;
        self.tune.validate()?;
        for (name, t) in [("base_train", &self.base_train), ("sft", &self.sft)] {
            if !(t.lr > 0.0) {
                return Err(Error::Config(format!("{name}.lr must be positive, got {}", t.lr)));
            }
            if t.batch_size == 0 {
                return Err(Error::Config(format!("{name}.batch_size must be positive")));
            }
        }
        if self.sae_layer == 0 || self.sae_layer > self.model.num_layers {
            return Err(Error::Config(format!(
                "sae layer {} outside 1..={}",
                self.sae_layer, self.model.num_layers
            )));
        }
        let d = &self.data;
        if d.modulus < 2 || d.operand_max == 0 {
            return Err(Error::Config("modulus must be >= 2 and operand_max >= 1".into()));
        }
        if !(0.0..1.0).contains(&d.eval_fraction) || d.eval_size == 0 {
            return Err(Error::Config(
                "eval_fraction must be in [0, 1) and eval_size positive".into(),
            ));
        }
        if self.eval.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        if !(self.eval.entropy_base > 1.0) {
            return Err(Error::Config(format!(
                "entropy_base must exceed 1, got {}",
                self.eval.entropy_base
            )));
        }
        Ok(())
    }
}

/// Train and held-out pairs for every task a run touches.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub trigger_train: Vec<QaPair>,
    pub trigger_eval: Vec<QaPair>,
    pub elicitation_train: Vec<QaPair>,
    pub elicitation_eval: Vec<QaPair>,
    pub base_corpus: Vec<QaPair>,
}

fn task_pairs(cfg: &DataConfig, task: Task, path: Option<&PathBuf>, tag: &str) -> Result<Vec<QaPair>> {
    match path {
        Some(p) => {
            let report = ingest(p)?;
            if report.pairs.is_empty() {
                return Err(Error::Input(format!("{} holds no valid records", p.display())));
            }
            Ok(report.pairs)
        }
        None => SynthSpec {
            task,
            n: cfg.n_examples,
            modulus: cfg.modulus,
            operand_max: cfg.operand_max,
            seed: derive_seed(cfg.seed, tag),
        }
        .generate(),
    }
}

fn split(cfg: &DataConfig, pairs: &[QaPair], tag: &str) -> (Vec<QaPair>, Vec<QaPair>) {
    let (train, mut eval) = split_disjoint(pairs, cfg.eval_fraction, derive_seed(cfg.seed, tag));
    eval.truncate(cfg.eval_size);
    (train, eval)
}

/// Generate (or ingest) and split every dataset, then check that no
/// training set shares a question with any held-out set.
pub fn prepare_data(cfg: &DataConfig) -> Result<Datasets> {
    let trigger = task_pairs(cfg, cfg.trigger_task, cfg.trigger_path.as_ref(), "trigger")?;
    let (trigger_train, trigger_eval) = split(cfg, &trigger, "split/trigger");
    let same = cfg.elicitation_task == cfg.trigger_task && cfg.elicitation_path == cfg.trigger_path;
    let (elicitation_train, elicitation_eval) = if same {
        (trigger_train.clone(), trigger_eval.clone())
    } else {
        let e = task_pairs(cfg, cfg.elicitation_task, cfg.elicitation_path.as_ref(), "elicitation")?;
        split(cfg, &e, "split/elicitation")
    };
    let held_out: HashSet<[u8; 32]> = trigger_eval
        .iter()
        .chain(&elicitation_eval)
        .map(|p| question_hash(&p.question))
        .collect();
    let base_corpus = match cfg.base_task {
        Some(t) => SynthSpec {
            task: t,
            n: cfg.n_examples,
            modulus: cfg.modulus,
            operand_max: cfg.operand_max,
            seed: derive_seed(cfg.seed, "base"),
        }
        .generate()?
        .into_iter()
        .filter(|p| !held_out.contains(&question_hash(&p.question)))
        .collect(),
        None => Vec::new(),
    };
    if trigger_eval.is_empty() || elicitation_eval.is_empty() {
        return Err(Error::Input("held-out split is empty; raise eval_fraction or n_examples".into()));
    }
    for train in [&trigger_train, &elicitation_train, &base_corpus] {
        for eval in [&trigger_eval, &elicitation_eval] {
            check_disjoint(train, eval)?;
        }
    }
    Ok(Datasets {
        trigger_train,
        trigger_eval,
        elicitation_train,
        elicitation_eval,
        base_corpus,
    })
}

pub fn encode_seqs(pairs: &[QaPair], vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
    Ok(encode_all(pairs, vocab)?.into_iter().map(|e| e.ids).collect())
}

/// Fresh model with the given init seed, pretrained on the base corpus.
pub fn build_base(
    cfg: &RunConfig,
    model_seed: u64,
    data: &Datasets,
    vocab: &Vocab,
) -> Result<(TransformerModel, LmTrainReport)> {
    if cfg.model.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match tokenizer size {}",
            cfg.model.vocab_size,
            vocab.len()
        )));
    }
    let mut model = TransformerModel::new(ModelConfig {
        seed: model_seed,
        ..cfg.model.clone()
    })?;
    let report = if data.base_corpus.is_empty() {
        LmTrainReport::default()
    } else {
        train_lm(&mut model, &encode_seqs(&data.base_corpus, vocab)?, &cfg.base_train)?
    };
    Ok((model, report))
}

/// The base fine-tuned on the trigger task with answers.
pub fn build_source(
    cfg: &RunConfig,
    base: &TransformerModel,
    data: &Datasets,
    vocab: &Vocab,
) -> Result<(TransformerModel, LmTrainReport)> {
    let mut source = base.clone();
    let report = train_lm(&mut source, &encode_seqs(&data.trigger_train, vocab)?, &cfg.sft)?;
    Ok((source, report))
}

/// Stage I on `source` activations over the trigger sequences.
pub fn train_stage1(
    cfg: &RunConfig,
    source: &TransformerModel,
    trigger: &[Vec<TokenId>],
    layer: usize,
    init: SaeInit,
) -> Result<(SparseAutoencoder, SaeTrainReport)> {
    train_sae(source, trigger, layer, &cfg.sae, init)
}

#[derive(Clone, Debug)]
pub struct TunedRun {
    pub adapters: AdapterSet,
    pub report: TuneReport,
    pub model: AdaptedModel,
    /// `(base, sae)` parameter hashes before and after tuning.
    pub hashes_before: (String, String),
    pub hashes_after: (String, String),
}

/// Stage II: splice `sae` into `target`, train fresh adapters on the
/// elicitation sequences, and verify that nothing but the adapters moved.
pub fn train_stage2(
    cfg: &RunConfig,
    target: &TransformerModel,
    sae: &SparseAutoencoder,
    elicitation: &[Vec<TokenId>],
) -> Result<TunedRun> {
    let adapters = AdapterSet::attach(target, cfg.lora.clone())?;
    let hashes_before = (target.param_hash(), sae.param_hash());
    let mut session = SpliceSession::new(target.clone(), sae.clone(), adapters, cfg.tune.clone())?;
    let report = session.tune(elicitation)?;
    let hashes_after = (session.base().param_hash(), session.sae().param_hash());
    if hashes_after != hashes_before {
        return Err(Error::Contract(
            "tuning modified frozen base or SAE parameters".into(),
        ));
    }
    let model = session.finalize();
    Ok(TunedRun {
        adapters: model.adapters.clone(),
        report,
        model,
        hashes_before,
        hashes_after,
    })
}

/// Everything the experiment suites share: data, base and source.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub data: Datasets,
    pub base: TransformerModel,
    pub source: TransformerModel,
    pub base_report: LmTrainReport,
    pub source_report: LmTrainReport,
}

impl Workspace {
    /// Resolve seeds, build data, pretrain the base and fine-tune the
    /// source.
    pub fn build(config: &RunConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let vocab = Vocab::task_default();
        let data = prepare_data(&config.data)?;
        let (base, base_report) = build_base(&config, config.model.seed, &data, &vocab)?;
        let (source, source_report) = build_source(&config, &base, &data, &vocab)?;
        Ok(Workspace {
            config,
            vocab,
            data,
            base,
            source,
            base_report,
            source_report,
        })
    }

    /// Assemble from existing models, e.g. loaded checkpoints.
    pub fn from_models(
        config: &RunConfig,
        base: TransformerModel,
        source: TransformerModel,
    ) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        if !base.config.same_architecture(&source.config) {
            return Err(Error::Load("base and source architectures differ".into()));
        }
        let vocab = Vocab::task_default();
        let data = prepare_data(&config.data)?;
        Ok(Workspace {
            config,
            vocab,
            data,
            base,
            source,
            base_report: LmTrainReport::default(),
            source_report: LmTrainReport::default(),
        })
    }

    pub fn trigger_seqs(&self) -> Result<Vec<Vec<TokenId>>> {
        encode_seqs(&self.data.trigger_train, &self.vocab)
    }

    pub fn elicitation_seqs(&self) -> Result<Vec<Vec<TokenId>>> {
        encode_seqs(&self.data.elicitation_train, &self.vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            n_examples: 400,
            eval_size: 20,
            ..Default::default()
        }
    }

    #[test]
    fn splits_are_disjoint_and_capped() {
        let d = prepare_data(&small()).unwrap();
        assert!(d.trigger_eval.len() <= 20);
        assert_eq!(d.trigger_train, d.elicitation_train);
        check_disjoint(&d.trigger_train, &d.trigger_eval).unwrap();
        assert!(d.base_corpus.iter().all(|p| p.question.contains('*')));
    }

    #[test]
    fn base_corpus_skips_held_out_questions() {
        let cfg = DataConfig {
            base_task: Some(Task::ModAdd),
            operand_max: 10,
            ..small()
        };
        let d = prepare_data(&cfg).unwrap();
        assert!(!d.base_corpus.is_empty());
        check_disjoint(&d.base_corpus, &d.trigger_eval).unwrap();
    }

    #[test]
    fn resolved_seeds_depend_only_on_run_seed() {
        let a = RunConfig::default().resolved();
        let mut b = RunConfig::default();
        b.tune.seed = 99;
        assert_eq!(a, b.resolved());
        let c = RunConfig {
            seed: 1,
            ..Default::default()
        }
        .resolved();
        assert_ne!(a.model.seed, c.model.seed);
    }

    #[test]
    fn bad_layer_fails_validation() {
        let cfg = RunConfig {
            sae_layer: 9,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
