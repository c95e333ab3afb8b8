//! Flat sectioned `key = value` run configuration.
//!
//! Sections: `[model] [sae] [lora] [train] [data] [eval]`. Blank lines and
//! lines starting with `#` or `;` are ignored. Unknown sections and keys
//! are errors. Relative paths are resolved against the config file's
//! directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use saetune::data::Task;
use saetune::optim::Schedule;
use saetune::pipeline::{RunConfig, SaeMode};
use saetune::tuning::ReferenceMode;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Input artifacts named by a config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub base: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Second same-shape model for transfer runs.
    pub second: Option<PathBuf>,
    /// Existing SAE to splice instead of training one.
    pub sae: Option<PathBuf>,
    /// SAE to start from in `finetune` or `pretrained` mode.
    pub sae_init: Option<PathBuf>,
    pub adapters: Option<PathBuf>,
    pub feature_csv: Option<PathBuf>,
    pub score_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    pub run: RunConfig,
    pub paths: Paths,
    pub transfer_task: Task,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            run: RunConfig::default(),
            paths: Paths::default(),
            transfer_task: Task::ModMul,
        }
    }
}

struct Entry<'a> {
    line: usize,
    section: &'a str,
    key: &'a str,
    value: &'a str,
}

const SECTIONS: [&str; 6] = ["model", "sae", "lora", "train", "data", "eval"];

fn entries(text: &str) -> Result<Vec<Entry<'_>>, CliError> {
    let mut section = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(CliError::config(format!("line {}: unknown section [{name}]", i + 1)));
            }
            section = Some(name);
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::config(format!("line {}: expected key = value", i + 1)));
        };
        let Some(section) = section else {
            return Err(CliError::config(format!("line {}: key outside any section", i + 1)));
        };
        out.push(Entry {
            line: i + 1,
            section,
            key: k.trim(),
            value: v.trim(),
        });
    }
    Ok(out)
}

fn parse<T: FromStr>(e: &Entry) -> Result<T, CliError> {
    e.value.parse().map_err(|_| {
        CliError::config(format!(
            "line {}: bad value {:?} for [{}] {}",
            e.line, e.value, e.section, e.key
        ))
    })
}

fn parse_opt_usize(e: &Entry) -> Result<Option<usize>, CliError> {
    if e.value == "none" {
        Ok(None)
    } else {
        parse(e).map(Some)
    }
}

fn parse_with<T, E: std::fmt::Display>(e: &Entry, r: Result<T, E>) -> Result<T, CliError> {
    r.map_err(|err| CliError::config(format!("line {}: [{}] {}: {err}", e.line, e.section, e.key)))
}

fn path(e: &Entry, dir: &Path) -> Option<PathBuf> {
    if e.value.is_empty() || e.value == "none" {
        return None;
    }
    let p = Path::new(e.value);
    Some(if p.is_absolute() { p.to_path_buf() } else { dir.join(p) })
}

impl CliConfig {
    /// Parse config text; relative paths are joined onto `dir`.
    pub fn parse(text: &str, dir: &Path) -> Result<Self, CliError> {
        let mut c = CliConfig::default();
        let mut schedule = "constant".to_string();
        let (mut sched_warmup, mut sched_min) = (0usize, 0.0f64);
        for e in entries(text)? {
            let r = &mut c.run;
            match (e.section, e.key) {
                ("model", "num_layers") => r.model.num_layers = parse(&e)?,
                ("model", "hidden_dim") => r.model.hidden_dim = parse(&e)?,
                ("model", "num_heads") => r.model.num_heads = parse(&e)?,
                ("model", "context_len") => r.model.context_len = parse(&e)?,
                ("model", "mlp_ratio") => r.model.mlp_ratio = parse(&e)?,
                ("model", "base_path") => c.paths.base = path(&e, dir),
                ("model", "source_path") => c.paths.source = path(&e, dir),
                ("model", "target_path") => c.paths.target = path(&e, dir),
                ("model", "second_path") => c.paths.second = path(&e, dir),

                ("sae", "layer") => r.sae_layer = parse(&e)?,
                ("sae", "mode") => r.sae_mode = parse_with(&e, e.value.parse::<SaeMode>())?,
                ("sae", "path") => c.paths.sae = path(&e, dir),
                ("sae", "init_path") => c.paths.sae_init = path(&e, dir),
                ("sae", "expansion_factor") => r.sae.expansion_factor = parse(&e)?,
                ("sae", "k") => r.sae.k = parse(&e)?,
                ("sae", "lr") => r.sae.lr = parse(&e)?,
                ("sae", "momentum") => r.sae.momentum = parse(&e)?,
                ("sae", "schedule") => schedule = e.value.to_string(),
                ("sae", "schedule_warmup") => sched_warmup = parse(&e)?,
                ("sae", "schedule_min_ratio") => sched_min = parse(&e)?,
                ("sae", "epochs") => r.sae.epochs = parse(&e)?,
                ("sae", "max_steps") => r.sae.max_steps = parse_opt_usize(&e)?,
                ("sae", "batch_tokens") => r.sae.batch_tokens = parse(&e)?,
                ("sae", "dead_feature_window") => r.sae.dead_feature_window = parse(&e)?,
                ("sae", "normalize_decoder") => r.sae.normalize_decoder = parse(&e)?,
                ("sae", "resample_dead") => r.sae.resample_dead = parse(&e)?,
                ("sae", "eval_tokens") => r.sae.eval_tokens = parse(&e)?,
                ("sae", "harvest_batch") => r.sae.harvest_batch = parse(&e)?,

                ("lora", "rank") => r.lora.rank = parse(&e)?,
                ("lora", "alpha") => r.lora.alpha = parse(&e)?,
                ("lora", "dropout") => r.lora.dropout = parse(&e)?,
                ("lora", "targets") => {
                    r.lora.targets = e
                        .value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                ("lora", "adapters_path") => c.paths.adapters = path(&e, dir),

                ("train", "seed") => r.seed = parse(&e)?,
                ("train", "base_steps") => r.base_train.steps = parse(&e)?,
                ("train", "base_batch_size") => r.base_train.batch_size = parse(&e)?,
                ("train", "base_lr") => r.base_train.lr = parse(&e)?,
                ("train", "base_warmup") => r.base_train.warmup = parse(&e)?,
                ("train", "base_weight_decay") => r.base_train.weight_decay = parse(&e)?,
                ("train", "base_grad_clip") => r.base_train.grad_clip = parse(&e)?,
                ("train", "sft_steps") => r.sft.steps = parse(&e)?,
                ("train", "sft_batch_size") => r.sft.batch_size = parse(&e)?,
                ("train", "sft_lr") => r.sft.lr = parse(&e)?,
                ("train", "sft_warmup") => r.sft.warmup = parse(&e)?,
                ("train", "sft_weight_decay") => r.sft.weight_decay = parse(&e)?,
                ("train", "sft_grad_clip") => r.sft.grad_clip = parse(&e)?,
                ("train", "lr") => r.tune.lr = parse(&e)?,
                ("train", "epochs") => r.tune.epochs = parse(&e)?,
                ("train", "max_steps") => r.tune.max_steps = parse_opt_usize(&e)?,
                ("train", "batch_size") => r.tune.batch_size = parse(&e)?,
                ("train", "weight_decay") => r.tune.weight_decay = parse(&e)?,
                ("train", "warmup") => r.tune.warmup = parse(&e)?,
                ("train", "min_lr_ratio") => r.tune.min_lr_ratio = parse(&e)?,
                ("train", "reference") => {
                    r.tune.reference = parse_with(&e, e.value.parse::<ReferenceMode>())?
                }
                ("train", "eval_sequences") => r.tune.eval_sequences = parse(&e)?,
                ("train", "checkpoint_every") => r.tune.checkpoint_every = parse(&e)?,

                ("data", "trigger_task") => r.data.trigger_task = parse_with(&e, e.value.parse())?,
                ("data", "elicitation_task") => {
                    r.data.elicitation_task = parse_with(&e, e.value.parse())?
                }
                ("data", "base_task") => {
                    r.data.base_task = if e.value == "none" {
                        None
                    } else {
                        Some(parse_with(&e, e.value.parse())?)
                    }
                }
                ("data", "transfer_task") => c.transfer_task = parse_with(&e, e.value.parse())?,
                ("data", "modulus") => r.data.modulus = parse(&e)?,
                ("data", "operand_max") => r.data.operand_max = parse(&e)?,
                ("data", "n_examples") => r.data.n_examples = parse(&e)?,
                ("data", "eval_fraction") => r.data.eval_fraction = parse(&e)?,
                ("data", "eval_size") => r.data.eval_size = parse(&e)?,
                ("data", "trigger_path") => r.data.trigger_path = path(&e, dir),
                ("data", "elicitation_path") => r.data.elicitation_path = path(&e, dir),

                ("eval", "max_new_tokens") => r.eval.max_new_tokens = parse(&e)?,
                ("eval", "probe_eps") => r.eval.probe_eps = parse(&e)?,
                ("eval", "gmm_max_iters") => r.eval.gmm_max_iters = parse(&e)?,
                ("eval", "gmm_tol") => r.eval.gmm_tol = parse(&e)?,
                ("eval", "gmm_min_subtracted") => r.eval.gmm_min_subtracted = parse(&e)?,
                ("eval", "entropy_base") => r.eval.entropy_base = parse(&e)?,
                ("eval", "feature_csv") => c.paths.feature_csv = path(&e, dir),
                ("eval", "score_csv") => c.paths.score_csv = path(&e, dir),

                (s, k) => {
                    return Err(CliError::config(format!("line {}: unknown key [{s}] {k}", e.line)))
                }
            }
        }
        c.run.sae.schedule = match schedule.as_str() {
            "constant" => Schedule::Constant,
            "cosine" => Schedule::Cosine {
                total: c.run.sae.max_steps.ok_or_else(|| {
                    CliError::config("[sae] schedule = cosine needs [sae] max_steps")
                })?,
                warmup: sched_warmup,
                min_ratio: sched_min,
            },
            other => {
                return Err(CliError::config(format!(
                    "unknown [sae] schedule {other:?} (constant | cosine)"
                )))
            }
        };
        c.run.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, dir)
    }

    /// Every key, so that `parse(to_ini())` reproduces this config.
    pub fn to_ini(&self) -> String {
        let r = &self.run;
        let mut s = String::new();
        let opt_path = |p: &Option<PathBuf>| {
            p.as_ref().map_or("none".to_string(), |p| p.display().to_string())
        };
        let opt_steps = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        let w = &mut s;
        writeln!(w, "[model]").unwrap();
        writeln!(w, "num_layers = {}", r.model.num_layers).unwrap();
        writeln!(w, "hidden_dim = {}", r.model.hidden_dim).unwrap();
        writeln!(w, "num_heads = {}", r.model.num_heads).unwrap();
        writeln!(w, "context_len = {}", r.model.context_len).unwrap();
        writeln!(w, "mlp_ratio = {}", r.model.mlp_ratio).unwrap();
        writeln!(w, "base_path = {}", opt_path(&self.paths.base)).unwrap();
        writeln!(w, "source_path = {}", opt_path(&self.paths.source)).unwrap();
        writeln!(w, "target_path = {}", opt_path(&self.paths.target)).unwrap();
        writeln!(w, "second_path = {}", opt_path(&self.paths.second)).unwrap();

        writeln!(w, "\n[sae]").unwrap();
        writeln!(w, "layer = {}", r.sae_layer).unwrap();
        let mode = match r.sae_mode {
            SaeMode::Scratch => "scratch",
            SaeMode::FineTune => "finetune",
            SaeMode::Pretrained => "pretrained",
        };
        writeln!(w, "mode = {mode}").unwrap();
        writeln!(w, "path = {}", opt_path(&self.paths.sae)).unwrap();
        writeln!(w, "init_path = {}", opt_path(&self.paths.sae_init)).unwrap();
        writeln!(w, "expansion_factor = {}", r.sae.expansion_factor).unwrap();
        writeln!(w, "k = {}", r.sae.k).unwrap();
        writeln!(w, "lr = {}", r.sae.lr).unwrap();
        writeln!(w, "momentum = {}", r.sae.momentum).unwrap();
        match r.sae.schedule {
            Schedule::Constant => writeln!(w, "schedule = constant").unwrap(),
            Schedule::Cosine {
                warmup, min_ratio, ..
            } => {
                writeln!(w, "schedule = cosine").unwrap();
                writeln!(w, "schedule_warmup = {warmup}").unwrap();
                writeln!(w, "schedule_min_ratio = {min_ratio}").unwrap();
            }
        }
        writeln!(w, "epochs = {}", r.sae.epochs).unwrap();
        writeln!(w, "max_steps = {}", opt_steps(r.sae.max_steps)).unwrap();
        writeln!(w, "batch_tokens = {}", r.sae.batch_tokens).unwrap();
        writeln!(w, "dead_feature_window = {}", r.sae.dead_feature_window).unwrap();
        writeln!(w, "normalize_decoder = {}", r.sae.normalize_decoder).unwrap();
        writeln!(w, "resample_dead = {}", r.sae.resample_dead).unwrap();
        writeln!(w, "eval_tokens = {}", r.sae.eval_tokens).unwrap();
        writeln!(w, "harvest_batch = {}", r.sae.harvest_batch).unwrap();

        writeln!(w, "\n[lora]").unwrap();
        writeln!(w, "rank = {}", r.lora.rank).unwrap();
        writeln!(w, "alpha = {}", r.lora.alpha).unwrap();
        writeln!(w, "dropout = {}", r.lora.dropout).unwrap();
        writeln!(w, "targets = {}", r.lora.targets.join(",")).unwrap();
        writeln!(w, "adapters_path = {}", opt_path(&self.paths.adapters)).unwrap();

        writeln!(w, "\n[train]").unwrap();
        writeln!(w, "seed = {}", r.seed).unwrap();
        for (p, t) in [("base", &r.base_train), ("sft", &r.sft)] {
            writeln!(w, "{p}_steps = {}", t.steps).unwrap();
            writeln!(w, "{p}_batch_size = {}", t.batch_size).unwrap();
            writeln!(w, "{p}_lr = {}", t.lr).unwrap();
            writeln!(w, "{p}_warmup = {}", t.warmup).unwrap();
            writeln!(w, "{p}_weight_decay = {}", t.weight_decay).unwrap();
            writeln!(w, "{p}_grad_clip = {}", t.grad_clip).unwrap();
        }
        writeln!(w, "lr = {}", r.tune.lr).unwrap();
        writeln!(w, "epochs = {}", r.tune.epochs).unwrap();
        writeln!(w, "max_steps = {}", opt_steps(r.tune.max_steps)).unwrap();
        writeln!(w, "batch_size = {}", r.tune.batch_size).unwrap();
        writeln!(w, "weight_decay = {}", r.tune.weight_decay).unwrap();
        writeln!(w, "warmup = {}", r.tune.warmup).unwrap();
        writeln!(w, "min_lr_ratio = {}", r.tune.min_lr_ratio).unwrap();
        let reference = match r.tune.reference {
            ReferenceMode::Base => "base",
            ReferenceMode::Adapted => "adapted",
        };
        writeln!(w, "reference = {reference}").unwrap();
        writeln!(w, "eval_sequences = {}", r.tune.eval_sequences).unwrap();
        writeln!(w, "checkpoint_every = {}", r.tune.checkpoint_every).unwrap();

        writeln!(w, "\n[data]").unwrap();
        writeln!(w, "trigger_task = {}", r.data.trigger_task).unwrap();
        writeln!(w, "elicitation_task = {}", r.data.elicitation_task).unwrap();
        writeln!(
            w,
            "base_task = {}",
            r.data.base_task.map_or("none".to_string(), |t| t.to_string())
        )
        .unwrap();
        writeln!(w, "transfer_task = {}", self.transfer_task).unwrap();
        writeln!(w, "modulus = {}", r.data.modulus).unwrap();
        writeln!(w, "operand_max = {}", r.data.operand_max).unwrap();
        writeln!(w, "n_examples = {}", r.data.n_examples).unwrap();
        writeln!(w, "eval_fraction = {}", r.data.eval_fraction).unwrap();
        writeln!(w, "eval_size = {}", r.data.eval_size).unwrap();
        writeln!(w, "trigger_path = {}", opt_path(&r.data.trigger_path)).unwrap();
        writeln!(w, "elicitation_path = {}", opt_path(&r.data.elicitation_path)).unwrap();

        writeln!(w, "\n[eval]").unwrap();
        writeln!(w, "max_new_tokens = {}", r.eval.max_new_tokens).unwrap();
        writeln!(w, "probe_eps = {}", r.eval.probe_eps).unwrap();
        writeln!(w, "gmm_max_iters = {}", r.eval.gmm_max_iters).unwrap();
        writeln!(w, "gmm_tol = {}", r.eval.gmm_tol).unwrap();
        writeln!(w, "gmm_min_subtracted = {}", r.eval.gmm_min_subtracted).unwrap();
        writeln!(w, "entropy_base = {}", r.eval.entropy_base).unwrap();
        writeln!(w, "feature_csv = {}", opt_path(&self.paths.feature_csv)).unwrap();
        writeln!(w, "score_csv = {}", opt_path(&self.paths.score_csv)).unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = CliConfig::default();
        assert_eq!(CliConfig::parse(&c.to_ini(), Path::new("/")).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = CliConfig::parse("[sae]\nbogus = 1\n", Path::new(".")).unwrap_err();
        assert_eq!(e.kind, "config");
        assert!(e.message.contains("[sae] bogus"), "{}", e.message);
    }

    #[test]
    fn negative_lr_is_rejected() {
        let e = CliConfig::parse("[train]\nlr = -1\n", Path::new(".")).unwrap_err();
        assert_eq!(e.kind, "config");
    }

    #[test]
    fn relative_paths_join_config_dir() {
        let c = CliConfig::parse("[model]\nbase_path = ck/base.ck\n", Path::new("/tmp/x")).unwrap();
        assert_eq!(c.paths.base, Some(PathBuf::from("/tmp/x/ck/base.ck")));
    }

    #[test]
    fn cosine_needs_max_steps() {
        let e = CliConfig::parse("[sae]\nschedule = cosine\nmax_steps = none\n", Path::new("."));
        assert!(e.is_err());
        let c = CliConfig::parse(
            "[sae]\nschedule = cosine\nmax_steps = 10\nschedule_min_ratio = 0.5\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(CliConfig::parse(&c.to_ini(), Path::new(".")).unwrap(), c);
    }
}
