use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::env::parse_with_overrides;
use crate::distill::{LossRecipe, TaskDistillConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, FinetuneMode};
use crate::io::read_string;
use crate::pretrain::TrainConfig;

/// The toy recipe shipped with the crate.
pub const TOY_RECIPE: &str = include_str!("../../recipes/toy.toml");

fn d_max_len() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub hidden: usize,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig { max_len: self.max_len, ..EncoderConfig::toy(self.layers, self.hidden, vocab_size) }
    }
}

fn d_grammar() -> String {
    "assistant".into()
}
fn d_spoken() -> f64 {
    0.3
}
fn d_share() -> f64 {
    1.0 / 3.0
}

/// Synthetic corpora the pipeline generates for itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    #[serde(default = "d_grammar")]
    pub grammar: String,
    pub general_sentences: usize,
    pub general_val: usize,
    /// Share of Stage-1 text converted to spoken form.
    #[serde(default = "d_spoken")]
    pub spoken_fraction: f64,
    /// Packing target in words; 0 keeps single sentences.
    #[serde(default)]
    pub pack_words: usize,
    pub in_domain_utterances: usize,
    pub in_domain_val: usize,
    pub stage2_size: usize,
    /// Share of in-domain records in the Stage-2 mixture.
    #[serde(default = "d_share")]
    pub stage2_in_domain_share: f64,
    pub nlu_train: usize,
    pub nlu_val: usize,
    pub nlu_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    /// Train a tokenizer of this size on the Stage-1 and Stage-2 text.
    #[serde(default)]
    pub vocab_size: Option<usize>,
    /// Or use an existing tokenizer file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub forced: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillStage {
    pub train: TrainConfig,
    /// Update budget per segment.
    pub updates: Vec<u64>,
    #[serde(default)]
    pub recipe: LossRecipe,
}

fn d_baseline() -> String {
    "stage1".into()
}
fn d_mask_seed() -> u64 {
    77
}
fn d_frozen() -> FinetuneConfig {
    FinetuneConfig::new(FinetuneMode::Frozen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    /// Report every run relative to this one.
    #[serde(default = "d_baseline")]
    pub baseline: String,
    #[serde(default = "d_mask_seed")]
    pub mask_seed: u64,
    /// Frozen-encoder probe applied to every pretrained encoder.
    #[serde(default = "d_frozen")]
    pub frozen: FinetuneConfig,
}

/// Stage 1 → Stage 2 → intermediate distillation across both teachers →
/// teacherless interlude → final distillation → fine-tuning (→ optional
/// task distillation) → evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecipe {
    pub name: String,
    pub seed: u64,
    pub data: DataSpec,
    pub tokenizer: Option<TokenizerSpec>,
    pub teacher: ModelShape,
    pub intermediate: ModelShape,
    pub student: ModelShape,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub intermediate_distill: DistillStage,
    pub interlude: TrainConfig,
    pub final_distill: DistillStage,
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub task_distill: Option<TaskDistillConfig>,
    pub evaluate: EvalSpec,
}

impl PipelineRecipe {
    pub fn toy() -> Self {
        Self::from_toml(TOY_RECIPE, Path::new("."), std::iter::empty()).expect("shipped recipe is valid")
    }

    /// Parses a recipe, applying `DFORGE_*` overrides from `vars`. A relative
    /// tokenizer path resolves against `base`.
    pub fn from_toml<I>(text: &str, base: &Path, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut r: PipelineRecipe = parse_with_overrides(text, vars)?;
        if let Some(p) = r.tokenizer.as_mut().and_then(|t| t.path.as_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        r.validate()?;
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_string(path)?, path.parent().unwrap_or(Path::new(".")), std::env::vars())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("recipe serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let tk = self.tokenizer.as_ref().ok_or_else(|| Error::validation("recipe names no tokenizer"))?;
        match (&tk.path, tk.vocab_size) {
            (None, None) => return Err(Error::validation("tokenizer needs either a vocab_size or a path")),
            (Some(p), _) if !p.is_file() => {
                return Err(Error::validation(format!("tokenizer file {} does not exist", p.display())))
            }
            _ => {}
        }
        let d = &self.data;
        if [d.general_sentences, d.general_val, d.in_domain_utterances, d.in_domain_val, d.stage2_size, d.nlu_train, d.nlu_val, d.nlu_test]
            .contains(&0)
        {
            return Err(Error::validation("every data size must be positive"));
        }
        if !(0.0..1.0).contains(&d.spoken_fraction) || !(d.stage2_in_domain_share > 0.0 && d.stage2_in_domain_share < 1.0) {
            return Err(Error::config("spoken_fraction must lie in [0, 1) and stage2_in_domain_share in (0, 1)"));
        }
        for (name, tc) in [("stage1", &self.stage1), ("stage2", &self.stage2), ("interlude", &self.interlude)] {
            tc.validate().map_err(|e| Error::config(format!("{name}: {e}")))?;
        }
        let check_distill = |name: &str, ds: &DistillStage, segments: usize, teachers: &[ModelShape], student: &ModelShape| {
            ds.train.validate()?;
            ds.recipe.validate()?;
            if ds.updates.len() != segments {
                return Err(Error::config(format!("{name} needs {segments} segment budget(s), got {}", ds.updates.len())));
            }
            if let Some(h) = &ds.recipe.hidden_match {
                for t in teachers {
                    h.validate(student.layers, t.layers)?;
                }
            }
            Ok(())
        };
        check_distill("intermediate_distill", &self.intermediate_distill, 2, &[self.teacher], &self.intermediate)?;
        check_distill("final_distill", &self.final_distill, 1, &[self.intermediate], &self.student)?;
        self.finetune.validate()?;
        if let Some(t) = &self.task_distill {
            t.recipe.validate()?;
            t.train.validate()?;
            t.teacher_config().validate()?;
            if let Some(h) = &t.recipe.hidden_match {
                h.validate(self.student.layers, self.intermediate.layers)?;
            }
        }
        self.evaluate.frozen.validate()?;
        if self.evaluate.frozen.mode != FinetuneMode::Frozen {
            return Err(Error::config("the evaluation probe must use frozen mode"));
        }
        for s in [&self.teacher, &self.intermediate, &self.student] {
            s.config(100).validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_recipe_parses_and_roundtrips() {
        let r = PipelineRecipe::toy();
        let back = PipelineRecipe::from_toml(&r.to_toml(), Path::new("."), std::iter::empty()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn overrides_and_missing_tokenizer() {
        let vars = vec![("DFORGE_STAGE1__MAX_STEPS".to_string(), "7".to_string())];
        let r = PipelineRecipe::from_toml(TOY_RECIPE, Path::new("."), vars).unwrap();
        assert_eq!(r.stage1.max_steps, 7);
        let mut t: toml::Table = toml::from_str(TOY_RECIPE).unwrap();
        t.remove("tokenizer");
        let text = toml::to_string(&t).unwrap();
        assert!(matches!(PipelineRecipe::from_toml(&text, Path::new("."), std::iter::empty()), Err(Error::Validation(_))));
        let vars = vec![("DFORGE_TOKENIZER__PATH".to_string(), "\"/no/such/tokenizer.model\"".to_string())];
        assert!(matches!(PipelineRecipe::from_toml(TOY_RECIPE, Path::new("."), vars), Err(Error::Validation(_))));
    }
}
