//! Per-subject brain embedders and builders around one shared translator.
//!
//! ```text
//!   v_s ──ℰ_s──▶ e_s ──𝒯──▶ (ê_image, ê_text)
//!                 │
//!                 └──ℬ_s──▶ v̂_s
//! ```
//!
//! Every parameter has a stable path name (`subject/<id>/embedder/linear/weight`,
//! `translator/block/2/norm/gamma`, ...). Graph construction, the optimizer
//! and checkpoints all key on these names.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::rng::{name_key, stream_rng, Rng, Stream};
use crate::numerics::{Graph, NodeId, Real, Tensor, LAYER_NORM_EPS};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectId(pub String);

impl SubjectId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SubjectId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width every subject's voxels are pooled to.
    pub pooled_size: usize,
    pub hidden_size: usize,
    pub adapter_rank: usize,
    pub translator_blocks: usize,
    pub image_tokens: usize,
    pub image_channels: usize,
    pub text_tokens: usize,
    pub text_channels: usize,
    pub dropout_embedder: f64,
    pub dropout_translator: f64,
    /// Residual add around each translator block; `false` stacks the blocks
    /// plainly.
    pub residual: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pooled_size: 8192,
            hidden_size: 2048,
            adapter_rank: 128,
            translator_blocks: 4,
            image_tokens: 257,
            image_channels: 768,
            text_tokens: 77,
            text_channels: 768,
            dropout_embedder: 0.5,
            dropout_translator: 0.15,
            residual: true,
            layer_norm_eps: LAYER_NORM_EPS,
        }
    }
}

impl ModelConfig {
    /// Laptop-sized profile with the same shape relationships as the default.
    pub fn desk() -> Self {
        Self {
            pooled_size: 256,
            hidden_size: 128,
            adapter_rank: 16,
            image_tokens: 17,
            image_channels: 32,
            text_tokens: 5,
            text_channels: 32,
            ..Self::default()
        }
    }

    pub fn image_dim(&self) -> usize {
        self.image_tokens * self.image_channels
    }

    pub fn text_dim(&self) -> usize {
        self.text_tokens * self.text_channels
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("pooled_size", self.pooled_size),
            ("hidden_size", self.hidden_size),
            ("adapter_rank", self.adapter_rank),
            ("translator_blocks", self.translator_blocks),
            ("image_tokens", self.image_tokens),
            ("image_channels", self.image_channels),
            ("text_tokens", self.text_tokens),
            ("text_channels", self.text_channels),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.adapter_rank > self.pooled_size {
            return Err(Error::config(format!(
                "adapter_rank {} exceeds pooled_size {}",
                self.adapter_rank, self.pooled_size
            )));
        }
        for (name, p) in [
            ("dropout_embedder", self.dropout_embedder),
            ("dropout_translator", self.dropout_translator),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return Err(Error::config("layer_norm_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    /// Weights uniform in `±1/√fan_in`, zero bias.
    fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Tensor::from_fn(vec![fan_in, fan_out], |_| {
                T::lit(rng.random_range(-bound..bound))
            }),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    fn forward(&self, g: &mut Graph<T>, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = g.param(&format!("{prefix}/weight"), &self.weight);
        let b = g.param(&format!("{prefix}/bias"), &self.bias);
        g.affine(x, w, Some(b))
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}/weight"), &self.weight));
        out.push((format!("{prefix}/bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}/weight"), &mut self.weight));
        out.push((format!("{prefix}/bias"), &mut self.bias));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> Norm<T> {
    fn init(width: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![width], T::one()),
            beta: Tensor::zeros(vec![width]),
        }
    }

    fn forward(&self, g: &mut Graph<T>, prefix: &str, x: NodeId, eps: f64) -> Result<NodeId> {
        let gamma = g.param(&format!("{prefix}/gamma"), &self.gamma);
        let beta = g.param(&format!("{prefix}/beta"), &self.beta);
        g.layer_norm(x, gamma, beta, eps)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}/gamma"), &self.gamma));
        out.push((format!("{prefix}/beta"), &self.beta));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}/gamma"), &mut self.gamma));
        out.push((format!("{prefix}/beta"), &mut self.beta));
    }
}

/// Residual low-rank map `a(v) = v + (v·down)·up`. `up` starts at zero, so a
/// fresh adapter is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<T> {
    /// `[width, rank]`
    pub down: Tensor<T>,
    /// `[rank, width]`
    pub up: Tensor<T>,
}

impl<T: Real> Adapter<T> {
    fn init(width: usize, rank: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        Self {
            down: Tensor::from_fn(vec![width, rank], |_| {
                T::lit(rng.random_range(-bound..bound))
            }),
            up: Tensor::zeros(vec![rank, width]),
        }
    }

    fn forward(&self, g: &mut Graph<T>, prefix: &str, x: NodeId) -> Result<NodeId> {
        let down = g.param(&format!("{prefix}/down"), &self.down);
        let up = g.param(&format!("{prefix}/up"), &self.up);
        let low = g.matmul(x, down)?;
        let back = g.matmul(low, up)?;
        g.add(x, back)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}/down"), &self.down));
        out.push((format!("{prefix}/up"), &self.up));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}/down"), &mut self.down));
        out.push((format!("{prefix}/up"), &mut self.up));
    }
}

/// adapter → linear → norm → GELU → dropout
#[derive(Clone, Debug, PartialEq)]
pub struct Embedder<T> {
    pub adapter: Adapter<T>,
    pub linear: Linear<T>,
    pub norm: Norm<T>,
}

/// linear → norm → GELU → adapter
#[derive(Clone, Debug, PartialEq)]
pub struct Builder<T> {
    pub linear: Linear<T>,
    pub norm: Norm<T>,
    pub adapter: Adapter<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectModules<T> {
    pub embedder: Embedder<T>,
    pub builder: Builder<T>,
}

impl<T: Real> SubjectModules<T> {
    fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let (m, h, r) = (config.pooled_size, config.hidden_size, config.adapter_rank);
        let embedder = Embedder {
            adapter: Adapter::init(m, r, rng),
            linear: Linear::init(m, h, rng),
            norm: Norm::init(h),
        };
        let builder = Builder {
            linear: Linear::init(h, m, rng),
            norm: Norm::init(m),
            adapter: Adapter::init(m, r, rng),
        };
        Self { embedder, builder }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.embedder.adapter.collect(&format!("{prefix}/embedder/adapter"), out);
        self.embedder.linear.collect(&format!("{prefix}/embedder/linear"), out);
        self.embedder.norm.collect(&format!("{prefix}/embedder/norm"), out);
        self.builder.linear.collect(&format!("{prefix}/builder/linear"), out);
        self.builder.norm.collect(&format!("{prefix}/builder/norm"), out);
        self.builder.adapter.collect(&format!("{prefix}/builder/adapter"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        let Self { embedder, builder } = self;
        embedder.adapter.collect_mut(&format!("{prefix}/embedder/adapter"), out);
        embedder.linear.collect_mut(&format!("{prefix}/embedder/linear"), out);
        embedder.norm.collect_mut(&format!("{prefix}/embedder/norm"), out);
        builder.linear.collect_mut(&format!("{prefix}/builder/linear"), out);
        builder.norm.collect_mut(&format!("{prefix}/builder/norm"), out);
        builder.adapter.collect_mut(&format!("{prefix}/builder/adapter"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslatorBlock<T> {
    pub linear: Linear<T>,
    pub norm: Norm<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translator<T> {
    pub blocks: Vec<TranslatorBlock<T>>,
    pub image_head: Linear<T>,
    pub text_head: Linear<T>,
    /// While set, optimizer steps leave every translator value untouched.
    pub frozen: bool,
}

impl<T: Real> Translator<T> {
    fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let h = config.hidden_size;
        let blocks = (0..config.translator_blocks)
            .map(|_| TranslatorBlock {
                linear: Linear::init(h, h, rng),
                norm: Norm::init(h),
            })
            .collect();
        Self {
            blocks,
            image_head: Linear::init(h, config.image_dim(), rng),
            text_head: Linear::init(h, config.text_dim(), rng),
            frozen: false,
        }
    }

    fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, block) in self.blocks.iter().enumerate() {
            block.linear.collect(&format!("translator/block/{i}/linear"), out);
            block.norm.collect(&format!("translator/block/{i}/norm"), out);
        }
        self.image_head.collect("translator/image_head", out);
        self.text_head.collect("translator/text_head", out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.linear.collect_mut(&format!("translator/block/{i}/linear"), out);
            block.norm.collect_mut(&format!("translator/block/{i}/norm"), out);
        }
        self.image_head.collect_mut("translator/image_head", out);
        self.text_head.collect_mut("translator/text_head", out);
    }
}

pub const TRANSLATOR_PREFIX: &str = "translator/";

fn subject_prefix(subject: &SubjectId) -> String {
    format!("subject/{subject}")
}

/// The subject a parameter path belongs to, if any.
pub fn subject_of(param: &str) -> Option<&str> {
    param.strip_prefix("subject/")?.split('/').next()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub subjects: BTreeMap<SubjectId, SubjectModules<T>>,
    pub translator: Translator<T>,
    /// Subjects whose modules the optimizer must leave untouched.
    pub frozen_subjects: BTreeSet<SubjectId>,
    pub seed: u64,
}

impl<T: Real> ModelState<T> {
    /// Deterministic initialization. Each subject's modules come from their
    /// own init stream, so adding or reordering subjects never changes the
    /// others' initial values.
    pub fn init(config: ModelConfig, subjects: &[SubjectId], seed: u64) -> Result<Self> {
        config.validate()?;
        if subjects.is_empty() {
            return Err(Error::config("at least one subject is required"));
        }
        let unique: BTreeSet<_> = subjects.iter().collect();
        if unique.len() != subjects.len() {
            return Err(Error::config("duplicate subject ids"));
        }
        let mut rng = stream_rng(seed, Stream::Init, &[name_key(TRANSLATOR_PREFIX)]);
        let translator = Translator::init(&config, &mut rng);
        let mut state = Self {
            config,
            subjects: BTreeMap::new(),
            translator,
            frozen_subjects: BTreeSet::new(),
            seed,
        };
        for s in subjects {
            state.reset_subject(s, seed);
        }
        Ok(state)
    }

    /// Re-initializes (or adds) one subject's embedder and builder. Nothing
    /// else in the state changes.
    pub fn reset_subject(&mut self, subject: &SubjectId, seed: u64) {
        let mut rng = stream_rng(seed, Stream::Init, &[name_key(subject.as_str())]);
        let modules = SubjectModules::init(&self.config, &mut rng);
        self.subjects.insert(subject.clone(), modules);
    }

    pub fn set_translator_frozen(&mut self, frozen: bool) {
        self.translator.frozen = frozen;
    }

    pub fn set_subject_frozen(&mut self, subject: &SubjectId, frozen: bool) {
        if frozen {
            self.frozen_subjects.insert(subject.clone());
        } else {
            self.frozen_subjects.remove(subject);
        }
    }

    /// Whether the optimizer may change the named parameter.
    pub fn is_trainable(&self, param: &str) -> bool {
        if param.starts_with(TRANSLATOR_PREFIX) {
            return !self.translator.frozen;
        }
        match subject_of(param) {
            Some(s) => !self.frozen_subjects.iter().any(|f| f.as_str() == s),
            None => true,
        }
    }

    pub fn subject_ids(&self) -> Vec<SubjectId> {
        self.subjects.keys().cloned().collect()
    }

    fn modules(&self, subject: &SubjectId) -> Result<&SubjectModules<T>> {
        self.subjects
            .get(subject)
            .ok_or_else(|| Error::UnknownSubject(subject.to_string()))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (id, modules) in &self.subjects {
            modules.collect(&subject_prefix(id), &mut out);
        }
        self.translator.collect(&mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        let Self {
            subjects,
            translator,
            ..
        } = self;
        for (id, modules) in subjects.iter_mut() {
            modules.collect_mut(&subject_prefix(id), &mut out);
        }
        translator.collect_mut(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over the names and little-endian bytes of the selected
    /// parameters.
    pub fn digest_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.named_params() {
            if !keep(&name) {
                continue;
            }
            hasher.update(name.as_bytes());
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    pub fn translator_digest(&self) -> String {
        self.digest_where(|n| n.starts_with(TRANSLATOR_PREFIX))
    }

    pub fn subject_digest(&self, subject: &SubjectId) -> String {
        let prefix = format!("{}/", subject_prefix(subject));
        self.digest_where(|n| n.starts_with(&prefix))
    }

    fn check_width(&self, g: &Graph<T>, x: NodeId, width: usize, what: &str) -> Result<()> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != width {
            return Err(Error::dim(format!(
                "{what} expects [n, {width}] input, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// `e = dropout(gelu(norm(linear(adapter(v)))))`, `v: [n, m] → [n, h]`.
    pub fn embed_node(&self, g: &mut Graph<T>, subject: &SubjectId, v: NodeId) -> Result<NodeId> {
        let modules = self.modules(subject)?;
        self.check_width(g, v, self.config.pooled_size, "embedder")?;
        let prefix = format!("{}/embedder", subject_prefix(subject));
        let e = &modules.embedder;
        let x = e.adapter.forward(g, &format!("{prefix}/adapter"), v)?;
        let x = e.linear.forward(g, &format!("{prefix}/linear"), x)?;
        let x = e.norm.forward(g, &format!("{prefix}/norm"), x, self.config.layer_norm_eps)?;
        let x = g.gelu(x)?;
        g.dropout(x, self.config.dropout_embedder)
    }

    /// `v̂ = adapter(gelu(norm(linear(e))))`, `e: [n, h] → [n, m]`.
    pub fn build_node(&self, g: &mut Graph<T>, subject: &SubjectId, e: NodeId) -> Result<NodeId> {
        let modules = self.modules(subject)?;
        self.check_width(g, e, self.config.hidden_size, "builder")?;
        let prefix = format!("{}/builder", subject_prefix(subject));
        let b = &modules.builder;
        let x = b.linear.forward(g, &format!("{prefix}/linear"), e)?;
        let x = b.norm.forward(g, &format!("{prefix}/norm"), x, self.config.layer_norm_eps)?;
        let x = g.gelu(x)?;
        b.adapter.forward(g, &format!("{prefix}/adapter"), x)
    }

    /// Residual MLP trunk plus the two heads. Returns image and text
    /// predictions shaped `[n, tokens, channels]`.
    pub fn translate_node(&self, g: &mut Graph<T>, e: NodeId) -> Result<(NodeId, NodeId)> {
        self.check_width(g, e, self.config.hidden_size, "translator")?;
        let n = g.value(e).rows();
        let eps = self.config.layer_norm_eps;
        let mut x = e;
        for (i, block) in self.translator.blocks.iter().enumerate() {
            let prefix = format!("translator/block/{i}");
            let y = block.linear.forward(g, &format!("{prefix}/linear"), x)?;
            let y = block.norm.forward(g, &format!("{prefix}/norm"), y, eps)?;
            let y = g.gelu(y)?;
            let y = g.dropout(y, self.config.dropout_translator)?;
            x = if self.config.residual { g.add(x, y)? } else { y };
        }
        let c = &self.config;
        let image = self.translator.image_head.forward(g, "translator/image_head", x)?;
        let image = g.reshape(image, &[n, c.image_tokens, c.image_channels])?;
        let text = self.translator.text_head.forward(g, "translator/text_head", x)?;
        let text = g.reshape(text, &[n, c.text_tokens, c.text_channels])?;
        Ok((image, text))
    }

    /// Tensor-level embed. `dropout` switches on training mode.
    pub fn embed(&self, subject: &SubjectId, v: &Tensor<T>, dropout: Option<Rng>) -> Result<Tensor<T>> {
        let mut g = graph_for(dropout);
        let x = g.constant(v.clone());
        let e = self.embed_node(&mut g, subject, x)?;
        Ok(g.value(e).clone())
    }

    pub fn build(&self, subject: &SubjectId, e: &Tensor<T>, dropout: Option<Rng>) -> Result<Tensor<T>> {
        let mut g = graph_for(dropout);
        let x = g.constant(e.clone());
        let v = self.build_node(&mut g, subject, x)?;
        Ok(g.value(v).clone())
    }

    pub fn translate(&self, e: &Tensor<T>, dropout: Option<Rng>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = graph_for(dropout);
        let x = g.constant(e.clone());
        let (image, text) = self.translate_node(&mut g, x)?;
        Ok((g.value(image).clone(), g.value(text).clone()))
    }
}

fn graph_for<T: Real>(dropout: Option<Rng>) -> Graph<T> {
    match dropout {
        Some(rng) => Graph::training(rng),
        None => Graph::new(),
    }
}
