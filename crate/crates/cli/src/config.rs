//! The run configuration file.
//!
//! Every section is optional. Keys given in a section replace the matching
//! field of its default (the desk-scale model profile for `model`, the
//! library defaults elsewhere); unknown keys are rejected.

use std::path::Path;

use mindbridge::data::{CohortSpec, Split};
use mindbridge::model::ModelConfig;
use mindbridge::training::{AdaptConfig, TrainConfig};
use mindbridge::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    cohort: Option<Value>,
    model: Option<Value>,
    train: Option<Value>,
    adapt: Option<Value>,
    eval: Option<Value>,
    subjects: Option<SubjectsSection>,
}

/// Which subjects each stage works on. Unset lists fall back to what the
/// data and checkpoint imply.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjectsSection {
    /// Subjects trained jointly by `pretrain` (default: all in the data).
    pub pretrain: Option<Vec<String>>,
    /// Subject adapted by `adapt` (default: the one subject of the data the
    /// checkpoint does not know).
    pub new: Option<String>,
    /// Previously trained subjects used for pseudo augmentation (default:
    /// all subjects of the checkpoint).
    pub old: Option<Vec<String>>,
    /// Source subjects of `synthesize` (default: all of the checkpoint).
    pub synth_from: Option<Vec<String>>,
    /// Target subjects of `synthesize` (default: all of the checkpoint).
    pub synth_to: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `"test"` or `"train"`.
    pub split: String,
    pub trials: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: "test".into(), trials: mindbridge::syntheval::DEFAULT_TRIALS }
    }
}

impl EvalSection {
    pub fn split(&self) -> Result<Split> {
        match self.split.as_str() {
            "test" => Ok(Split::Test),
            "train" => Ok(Split::Train),
            other => Err(Error::config(format!("eval.split must be \"test\" or \"train\", got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub cohort: CohortSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalSection,
    pub subjects: SubjectsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cohort: CohortSpec::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalSection::default(),
            subjects: SubjectsSection::default(),
        }
    }
}

fn overlay<T: Serialize + DeserializeOwned>(section: &str, base: T, patch: Option<Value>) -> Result<T> {
    let Some(patch) = patch else { return Ok(base) };
    let Value::Object(patch) = patch else {
        return Err(Error::config(format!("section `{section}` must be a JSON object")));
    };
    let Value::Object(mut merged) = serde_json::to_value(&base)? else {
        unreachable!("config sections serialize to objects")
    };
    merged.extend(patch);
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::config(format!("section `{section}`: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        let d = Self::default();
        let cfg = Self {
            cohort: overlay("cohort", d.cohort, raw.cohort)?,
            model: overlay("model", d.model, raw.model)?,
            train: overlay("train", d.train, raw.train)?,
            adapt: overlay("adapt", d.adapt, raw.adapt)?,
            eval: overlay("eval", d.eval, raw.eval)?,
            subjects: raw.subjects.unwrap_or_default(),
        };
        cfg.eval.split()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// Applies `--seed` to every seeded section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            self.cohort.seed = seed;
            self.train.seed = seed;
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_the_other_fields() {
        let cfg = RunConfig::parse(r#"{"model": {"hidden_size": 64}, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.model, ModelConfig { hidden_size: 64, ..ModelConfig::desk() });
        assert_eq!(cfg.train, TrainConfig { epochs: 3, ..TrainConfig::default() });
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for bad in [
            r#"{"modle": {}}"#,
            r#"{"train": {"epoch": 3}}"#,
            r#"{"train": 3}"#,
            r#"{"eval": {"split": "val"}}"#,
            r#"{"adapt": {"strategy": "partial"}}"#,
            "not json",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn seed_flag_reaches_data_and_training() {
        let cfg = RunConfig::default().with_seed(Some(9));
        assert_eq!((cfg.cohort.seed, cfg.train.seed), (9, 9));
        assert_eq!(RunConfig::default().with_seed(None), RunConfig::default());
    }

    #[test]
    fn written_config_parses_back() {
        let cfg = RunConfig::parse(r#"{"subjects": {"pretrain": ["subj01"]}, "adapt": {"epochs": 4}}"#).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_json().unwrap()).unwrap(), cfg);
    }
}
