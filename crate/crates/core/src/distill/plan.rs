use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{distill_run, DistillOutcome, DistillSegment, DistillSpec, LossRecipe};
use crate::corpus::read_corpus;
use crate::encoder::{EncoderCheckpoint, EncoderConfig};
use crate::error::{Error, Result};
use crate::io::read_string;
use crate::pretrain::{encode_sequences, TrainConfig};
use crate::tensor::ParameterSet;
use crate::tokenizer::TokenizerModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    /// Teacher checkpoint directory.
    pub teacher: PathBuf,
    /// Corpus file (`.jsonl` records or plain lines).
    pub corpus: PathBuf,
    pub updates: u64,
    #[serde(default)]
    pub recipe: LossRecipe,
}

/// A distillation plan file. Relative paths resolve against the plan's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillPlan {
    pub tokenizer: PathBuf,
    pub student: EncoderConfig,
    /// Student checkpoint to start from; random initialization otherwise.
    #[serde(default)]
    pub init: Option<PathBuf>,
    pub val_corpus: PathBuf,
    pub train: TrainConfig,
    pub segments: Vec<SegmentSpec>,
}

/// A plan with every referenced artifact read into memory.
pub struct LoadedPlan {
    pub tokenizer: TokenizerModel,
    pub segments: Vec<DistillSegment>,
    pub val: Vec<Vec<u32>>,
    pub init: Option<ParameterSet>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl DistillPlan {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut plan: DistillPlan = toml::from_str(text).map_err(|e| Error::config(format!("distill plan: {e}")))?;
        plan.tokenizer = resolve(base, &plan.tokenizer);
        plan.val_corpus = resolve(base, &plan.val_corpus);
        plan.init = plan.init.map(|p| resolve(base, &p));
        for s in &mut plan.segments {
            s.teacher = resolve(base, &s.teacher);
            s.corpus = resolve(base, &s.corpus);
        }
        plan.validate()?;
        Ok(plan)
    }

    /// Reads a plan file, applying `DFORGE_*` overrides from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(&read_string(path)?).map_err(|e| Error::config(format!("distill plan: {e}")))?;
        crate::pipeline::apply_env_overrides(&mut table, std::env::vars())?;
        let text = toml::to_string(&table).expect("table serializes");
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("distill plan serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        self.train.validate()?;
        for (k, s) in self.segments.iter().enumerate() {
            s.recipe.validate().map_err(|e| match e {
                Error::Config(m) => Error::config(format!("segment {k}: {m}")),
                Error::Validation(m) => Error::validation(format!("segment {k}: {m}")),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn total_updates(&self) -> u64 {
        self.segments.iter().map(|s| s.updates).sum()
    }

    pub fn materialize(&self) -> Result<LoadedPlan> {
        let tokenizer = TokenizerModel::load(&self.tokenizer)?;
        if tokenizer.vocab_size() != self.student.vocab_size {
            return Err(Error::config(format!(
                "student vocabulary {} differs from the tokenizer's {}",
                self.student.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let encode = |path: &Path| -> Result<Vec<Vec<u32>>> {
            let texts: Vec<String> = read_corpus(path)?.into_iter().map(|r| r.text).collect();
            Ok(encode_sequences(&tokenizer, &texts, self.student.max_len))
        };
        let segments = self
            .segments
            .iter()
            .map(|s| {
                Ok(DistillSegment {
                    teacher: EncoderCheckpoint::load(&s.teacher)?,
                    train: encode(&s.corpus)?,
                    updates: s.updates,
                    recipe: s.recipe.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let val = encode(&self.val_corpus)?;
        let init = match &self.init {
            Some(p) => {
                let ck = EncoderCheckpoint::load(p)?;
                ck.require_fingerprint(&tokenizer.fingerprint())?;
                Some(ck.params)
            }
            None => None,
        };
        Ok(LoadedPlan { tokenizer, segments, val, init })
    }

    /// Loads every artifact and runs the plan, writing into `out_dir`.
    pub fn run(&self, out_dir: Option<&Path>) -> Result<DistillOutcome> {
        let loaded = self.materialize()?;
        let fp = loaded.tokenizer.fingerprint();
        let spec = DistillSpec { student: &self.student, train: &self.train, fingerprint: &fp, out_dir };
        distill_run(&spec, &loaded.segments, &loaded.val, loaded.init)
    }
}
