//! Training state persisted in the array container (magic `MBCK`).
//!
//! Arrays: `param/<name>`, `optim/m/<name>` (attrs `{"step": n}`) and
//! `optim/v/<name>`, plus an empty `meta/checkpoint` entry whose attrs hold
//! the configurations, subject list, freeze flags and progress counters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{fingerprint, AdaptConfig, TrainConfig};
use super::optim::{AdamW, Moments, OptimState};
use crate::data::container::{find, read_file, write_file, ArrayData, NamedArray, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState, SubjectId};
use crate::numerics::{DType, Real};

const META: &str = "meta/checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub two_way: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelState<T>,
    pub optim: OptimState<T>,
    pub train: TrainConfig,
    pub adapt: Option<AdaptConfig>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps. All per-step randomness is derived from
    /// `(train.seed, step)`, so this is the whole RNG state.
    pub step: u64,
    pub best: Option<BestRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    dtype: DType,
    fingerprint: String,
    model: ModelConfig,
    train: TrainConfig,
    adapt: Option<AdaptConfig>,
    subjects: Vec<SubjectId>,
    frozen_subjects: Vec<SubjectId>,
    translator_frozen: bool,
    init_seed: u64,
    epoch: usize,
    step: u64,
    best: Option<BestRecord>,
}

impl<T: Real> Checkpoint<T> {
    /// Freshly initialized model for `subjects` with an empty optimizer.
    pub fn fresh(model: ModelConfig, train: TrainConfig, subjects: &[SubjectId]) -> Result<Self> {
        train.validate()?;
        let model = ModelState::init(model, subjects, train.seed)?;
        Ok(Self {
            model,
            optim: OptimState::new(),
            train,
            adapt: None,
            epoch: 0,
            step: 0,
            best: None,
        })
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.model.config, &self.train, self.adapt.as_ref())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.adam_eps,
            weight_decay: self.train.weight_decay,
        }
    }

    /// Refuses to continue under a different configuration.
    pub fn ensure_compatible(&self, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
        if &self.model.config != model {
            return Err(Error::config(format!(
                "checkpoint model config {} does not match requested {}",
                serde_json::to_string(&self.model.config)?,
                serde_json::to_string(model)?
            )));
        }
        let expected = fingerprint(model, train, self.adapt.as_ref());
        let found = self.fingerprint();
        if expected != found {
            return Err(Error::config(format!(
                "checkpoint fingerprint {found} does not match configuration fingerprint {expected}"
            )));
        }
        Ok(())
    }

    pub fn to_arrays(&self) -> Result<Vec<NamedArray>> {
        let meta = Meta {
            dtype: T::DTYPE,
            fingerprint: self.fingerprint(),
            model: self.model.config.clone(),
            train: self.train.clone(),
            adapt: self.adapt.clone(),
            subjects: self.model.subject_ids(),
            frozen_subjects: self.model.frozen_subjects.iter().cloned().collect(),
            translator_frozen: self.model.translator.frozen,
            init_seed: self.model.seed,
            epoch: self.epoch,
            step: self.step,
            best: self.best,
        };
        let serde_json::Value::Object(attrs) = serde_json::to_value(&meta)? else {
            unreachable!("Meta serializes to an object")
        };
        let empty = match T::DTYPE {
            DType::F32 => ArrayData::F32(Vec::new()),
            DType::F64 => ArrayData::F64(Vec::new()),
        };
        let mut out = vec![NamedArray::new(META, vec![0], empty)?.with_attrs(attrs.into_iter().collect())];
        for (name, t) in self.model.named_params() {
            out.push(NamedArray::from_tensor(format!("param/{name}"), t));
        }
        for (name, mo) in &self.optim.moments {
            let step = BTreeMap::from([("step".to_string(), serde_json::json!(mo.step))]);
            out.push(NamedArray::from_tensor(format!("optim/m/{name}"), &mo.m).with_attrs(step));
            out.push(NamedArray::from_tensor(format!("optim/v/{name}"), &mo.v));
        }
        Ok(out)
    }

    pub fn from_arrays(arrays: &[NamedArray]) -> Result<Self> {
        let meta_entry = find(arrays, META)?;
        let meta: Meta = serde_json::from_value(serde_json::Value::Object(
            meta_entry.attrs.clone().into_iter().collect(),
        ))
        .map_err(|e| Error::config(format!("checkpoint metadata: {e}")))?;
        let mut model = ModelState::<T>::init(meta.model.clone(), &meta.subjects, meta.init_seed)?;
        for (name, t) in model.named_params_mut() {
            let stored = find(arrays, &format!("param/{name}"))?.to_tensor::<T>()?;
            if stored.shape() != t.shape() {
                return Err(Error::config(format!(
                    "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            *t = stored;
        }
        model.set_translator_frozen(meta.translator_frozen);
        for s in &meta.frozen_subjects {
            model.set_subject_frozen(s, true);
        }
        let mut optim = OptimState::new();
        for a in arrays {
            let Some(name) = a.name.strip_prefix("optim/m/") else { continue };
            let step = a
                .attrs
                .get("step")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::config(format!("optimizer entry `{name}` lacks a step count")))?;
            let m = a.to_tensor::<T>()?;
            let v = find(arrays, &format!("optim/v/{name}"))?.to_tensor::<T>()?;
            if m.shape() != v.shape() {
                return Err(Error::config(format!("optimizer moments of `{name}` disagree in shape")));
            }
            optim.moments.insert(name.to_string(), Moments { m, v, step });
        }
        let ckpt = Self {
            model,
            optim,
            train: meta.train,
            adapt: meta.adapt,
            epoch: meta.epoch,
            step: meta.step,
            best: meta.best,
        };
        if ckpt.fingerprint() != meta.fingerprint {
            return Err(Error::config(format!(
                "stored fingerprint {} does not match its configuration ({})",
                meta.fingerprint,
                ckpt.fingerprint()
            )));
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    write_file(path.as_ref(), CHECKPOINT_MAGIC, &ckpt.to_arrays()?)
}

/// Loads a checkpoint, casting stored values to `T` if the file was written
/// in the other precision.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    Checkpoint::from_arrays(&read_file(path.as_ref(), CHECKPOINT_MAGIC)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::container::{decode, encode};
    use crate::numerics::Tensor;

    fn tiny() -> ModelConfig {
        ModelConfig {
            pooled_size: 6,
            hidden_size: 4,
            adapter_rank: 2,
            translator_blocks: 2,
            image_tokens: 2,
            image_channels: 3,
            text_tokens: 1,
            text_channels: 2,
            ..ModelConfig::default()
        }
    }

    fn sample() -> Checkpoint<f32> {
        let mut c = Checkpoint::<f32>::fresh(tiny(), TrainConfig::default(), &["a".into(), "b".into()]).unwrap();
        c.optim.moments.insert(
            "translator/image_head/bias".into(),
            Moments { m: Tensor::full(vec![6], 0.25), v: Tensor::full(vec![6], 1e-3), step: 7 },
        );
        c.model.set_subject_frozen(&"a".into(), true);
        c.epoch = 3;
        c.step = 42;
        c.best = Some(BestRecord { epoch: 2, two_way: 0.8125 });
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = encode(CHECKPOINT_MAGIC, &c.to_arrays().unwrap()).unwrap();
        let back = Checkpoint::<f32>::from_arrays(&decode(CHECKPOINT_MAGIC, &bytes).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode(CHECKPOINT_MAGIC, &back.to_arrays().unwrap()).unwrap(), bytes);
        assert!(decode(crate::data::container::DATASET_MAGIC, &bytes).is_err());
    }

    #[test]
    fn mismatched_config_is_refused() {
        let c = sample();
        let other_model = ModelConfig { hidden_size: 8, ..tiny() };
        let err = c.ensure_compatible(&other_model, &c.train).unwrap_err();
        assert!(err.to_string().contains("model config"), "{err}");
        let other_train = TrainConfig { lr: 3e-4, ..c.train.clone() };
        let err = c.ensure_compatible(&tiny(), &other_train).unwrap_err().to_string();
        assert!(err.contains(&c.fingerprint()), "{err}");
        c.ensure_compatible(&tiny(), &TrainConfig { epochs: 9, ..c.train.clone() }).unwrap();
    }

    #[test]
    fn missing_parameter_is_an_error() {
        let mut arrays = sample().to_arrays().unwrap();
        arrays.retain(|a| a.name != "param/translator/text_head/weight");
        assert!(Checkpoint::<f32>::from_arrays(&arrays).is_err());
    }
}
