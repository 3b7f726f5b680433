//! Cross-subject pretraining.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng as _;

use super::checkpoint::{BestRecord, Checkpoint};
use super::config::TrainConfig;
use super::optim::{optimizer_step, AdamW, OptimState};
use crate::data::{Batch, PooledCohort, Split};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport, LossTerms, ModalityLoss};
use crate::model::{ModelState, SubjectId};
use crate::numerics::rng::{stream_rng, Rng, Stream};
use crate::numerics::{Graph, NodeId, Real};
use crate::syntheval::{evaluate, EvalConfig, EvalReport};

/// Adds the term name and step to a numerical failure.
pub(crate) fn tag(err: Error, term: &str, step: u64) -> Error {
    match err {
        Error::Numerical(msg) => Error::numerical(format!("loss term `{term}` at step {step}: {msg}")),
        other => other,
    }
}

pub(crate) fn modality(cfg: &TrainConfig) -> ModalityLoss {
    ModalityLoss {
        tau: cfg.tau,
        normalize: cfg.normalize_clip,
        with_mse: cfg.enable_mse,
    }
}

/// Image and text terms for the embedding `e` against the batch targets.
/// Terms with zero weight are not built.
pub(crate) fn supervised_terms<T: Real>(
    state: &ModelState<T>,
    g: &mut Graph<T>,
    e: NodeId,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Option<NodeId>, Option<NodeId>)> {
    let w = &cfg.weights;
    if w.image == 0.0 && w.text == 0.0 {
        return Ok((None, None));
    }
    let (image, text) = state.translate_node(g, e).map_err(|e| tag(e, "image", step))?;
    let loss = modality(cfg);
    let image = (w.image > 0.0)
        .then(|| loss.node(g, image, &batch.image).map_err(|e| tag(e, "image", step)))
        .transpose()?;
    let text = (w.text > 0.0)
        .then(|| loss.node(g, text, &batch.text).map_err(|e| tag(e, "text", step)))
        .transpose()?;
    Ok((image, text))
}

/// `mean((E_b(B_b(e_a)) − e_a)²)`, optionally with the reverse cycle from the
/// synthesized signal back into `a`, averaged in.
pub(crate) fn cycle_term<T: Real>(
    state: &ModelState<T>,
    g: &mut Graph<T>,
    a: &SubjectId,
    b: &SubjectId,
    e_a: NodeId,
    cfg: &TrainConfig,
    step: u64,
) -> Result<NodeId> {
    let run = |g: &mut Graph<T>| -> Result<NodeId> {
        let src = if cfg.stop_grad_cycle { g.detach(e_a) } else { e_a };
        let v_b = state.build_node(g, b, src)?;
        let e_b = state.embed_node(g, b, v_b)?;
        let forward = g.mse(e_b, src)?;
        if !cfg.symmetric_cycle {
            return Ok(forward);
        }
        let v_a = state.build_node(g, a, e_b)?;
        let e_back = state.embed_node(g, a, v_a)?;
        let backward = g.mse(e_back, e_b)?;
        g.weighted_sum(&[(forward, 0.5), (backward, 0.5)])
    };
    run(g).map_err(|e| tag(e, "cyc", step))
}

/// The weighted objective of one batch from `batch.subject`, cycling through
/// `partner`. Terms with zero weight, or disabled by `enable_rec_cyc`, are
/// not part of the graph at all.
pub fn composite_loss<T: Real>(
    state: &ModelState<T>,
    g: &mut Graph<T>,
    batch: &Batch<T>,
    partner: &SubjectId,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(NodeId, LossReport)> {
    let a = &batch.subject;
    let v = g.constant(batch.voxels.clone());
    let e = state.embed_node(g, a, v).map_err(|e| tag(e, "image", step))?;
    let (image, text) = supervised_terms(state, g, e, batch, cfg, step)?;
    let mut terms = LossTerms { image, text, ..LossTerms::default() };
    if cfg.enable_rec_cyc {
        if cfg.weights.rec > 0.0 {
            let rebuild = |g: &mut Graph<T>| -> Result<NodeId> {
                let v_hat = state.build_node(g, a, e)?;
                g.mse(v_hat, v)
            };
            terms.rec = Some(rebuild(g).map_err(|e| tag(e, "rec", step))?);
        }
        if cfg.weights.cyc > 0.0 {
            terms.cyc = Some(cycle_term(state, g, a, partner, e, cfg, step)?);
        }
    }
    if terms.image.is_none() && terms.text.is_none() && terms.rec.is_none() && terms.cyc.is_none() {
        return Err(Error::config("every loss term is disabled"));
    }
    total_loss(g, &terms, &cfg.weights, step)
}

/// Backpropagates `loss` and updates the trainable parameters present in the
/// graph.
pub(crate) fn apply_gradients<T: Real>(
    state: &mut ModelState<T>,
    optim: &mut OptimState<T>,
    g: &Graph<T>,
    loss: NodeId,
    hp: &AdamW,
    lr: f64,
    step: u64,
) -> Result<()> {
    let grads = g.backward(loss).map_err(|e| tag(e, "total", step))?.into_params();
    let trainable: BTreeSet<String> = grads.keys().filter(|n| state.is_trainable(n)).cloned().collect();
    let params = state
        .named_params_mut()
        .into_iter()
        .filter(|(n, _)| trainable.contains(n));
    optimizer_step(params, &grads, optim, hp, lr);
    Ok(())
}

/// Partner for the cycle term: uniform over the other subjects, or the
/// source itself when it is alone.
fn pick_partner(rng: &mut Rng, source: &SubjectId, subjects: &[SubjectId]) -> SubjectId {
    let others: Vec<&SubjectId> = subjects.iter().filter(|s| *s != source).collect();
    if others.is_empty() {
        source.clone()
    } else {
        others[rng.random_range(0..others.len())].clone()
    }
}

/// One optimizer update on a batch of `batch.subject`. The partner and the
/// dropout masks come from streams keyed by `(cfg.seed, step)`.
pub fn pretrain_step<T: Real>(
    state: &mut ModelState<T>,
    optim: &mut OptimState<T>,
    batch: &Batch<T>,
    subjects: &[SubjectId],
    cfg: &TrainConfig,
    step: u64,
    lr: f64,
) -> Result<LossReport> {
    let mut pairing = stream_rng(cfg.seed, Stream::Pairing, &[step]);
    let partner = pick_partner(&mut pairing, &batch.subject, subjects);
    let mut g = Graph::training(stream_rng(cfg.seed, Stream::Dropout, &[step]));
    let (loss, report) = composite_loss(state, &mut g, batch, &partner, cfg, step)?;
    let hp = AdamW {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    apply_gradients(state, optim, &g, loss, &hp, lr, step)?;
    Ok(report)
}

/// One line of the per-epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    /// 1-based.
    pub epoch: usize,
    pub split: Split,
    pub image: Option<f64>,
    pub text: Option<f64>,
    pub rec: Option<f64>,
    pub cyc: Option<f64>,
    pub total: f64,
    pub two_way: Option<f64>,
    pub top1: Option<f64>,
}

impl EpochRow {
    pub const CSV_HEADER: &'static str = "epoch,split,image,text,rec,cyc,total,two_way,top1";

    pub fn csv_row(&self) -> String {
        let cell = crate::losses::opt_cell;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split.name(),
            cell(self.image),
            cell(self.text),
            cell(self.rec),
            cell(self.cyc),
            self.total,
            cell(self.two_way),
            cell(self.top1)
        )
    }

    pub(crate) fn from_reports(epoch: usize, split: Split, reports: &[LossReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&LossReport) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = reports.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Self {
            epoch,
            split,
            image: mean(|r| r.image),
            text: mean(|r| r.text),
            rec: mean(|r| r.rec),
            cyc: mean(|r| r.cyc),
            total: reports.iter().map(|r| r.total).sum::<f64>() / n,
            two_way: None,
            top1: None,
        }
    }
}

pub fn log_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(EpochRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.csv_row()).expect("writing to a String cannot fail");
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutput<T> {
    pub last: Checkpoint<T>,
    /// Snapshot with the best mean test two-way score seen so far, when this
    /// run improved on the record it started from.
    pub best: Option<Checkpoint<T>>,
    pub log: Vec<EpochRow>,
    pub last_eval: Option<EvalReport>,
}

/// Inference-mode losses on each subject's test split; the cycle partner is
/// the next subject in order.
pub(crate) fn test_losses<T: Real>(
    state: &ModelState<T>,
    cohort: &PooledCohort<T>,
    subjects: &[SubjectId],
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<LossReport>> {
    let mut out = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        let batch = cohort.full_split(s, Split::Test)?;
        let partner = &subjects[(i + 1) % subjects.len()];
        let mut g = Graph::new();
        out.push(composite_loss(state, &mut g, &batch, partner, cfg, step)?.1);
    }
    Ok(out)
}

pub(crate) fn check_cohort<T: Real>(ckpt: &Checkpoint<T>, cohort: &PooledCohort<T>) -> Result<()> {
    let c = &ckpt.model.config;
    if cohort.pooled_size != c.pooled_size {
        return Err(Error::config(format!(
            "data pooled to {} but the model expects {}",
            cohort.pooled_size, c.pooled_size
        )));
    }
    if cohort.aggregation != ckpt.train.aggregation {
        return Err(Error::config("data aggregation differs from the training configuration"));
    }
    let img = &cohort.image_targets.shape()[1..];
    let txt = &cohort.text_targets.shape()[1..];
    if img != [c.image_tokens, c.image_channels] || txt != [c.text_tokens, c.text_channels] {
        return Err(Error::config(format!(
            "targets {img:?}/{txt:?} do not match the model heads [{}, {}]/[{}, {}]",
            c.image_tokens, c.image_channels, c.text_tokens, c.text_channels
        )));
    }
    Ok(())
}

/// Trains every subject of the checkpoint from `ckpt.epoch` up to
/// `ckpt.train.epochs`. Source subjects take turns step by step; each
/// subject's batches are reshuffled per epoch.
pub fn pretrain<T: Real>(mut ckpt: Checkpoint<T>, cohort: &PooledCohort<T>) -> Result<TrainOutput<T>> {
    ckpt.train.validate()?;
    check_cohort(&ckpt, cohort)?;
    let cfg = ckpt.train.clone();
    let subjects = ckpt.model.subject_ids();
    for s in &subjects {
        cohort.subject(s)?;
    }
    let steps_per_epoch: u64 = subjects
        .iter()
        .map(|s| cohort.subject(s).map(|p| p.train_ids.len().div_ceil(cfg.batch_size) as u64))
        .sum::<Result<u64>>()?;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let fingerprint = ckpt.fingerprint();
    let eval_cfg = EvalConfig {
        split: Split::Test,
        trials: cfg.eval_trials,
        seed: cfg.seed,
    };
    let mut log = Vec::new();
    let mut best = None;
    let mut last_eval = None;
    while ckpt.epoch < cfg.epochs {
        let epoch = ckpt.epoch;
        let per_subject = subjects
            .iter()
            .map(|s| cohort.batches(s, cfg.batch_size, cfg.seed, epoch as u64))
            .collect::<Result<Vec<_>>>()?;
        let rounds = per_subject.iter().map(Vec::len).max().unwrap_or(0);
        let mut reports = Vec::with_capacity(steps_per_epoch as usize);
        for r in 0..rounds {
            for batches in &per_subject {
                let Some(batch) = batches.get(r) else { continue };
                let lr = cfg.lr_at(ckpt.step, total_steps);
                let report = pretrain_step(&mut ckpt.model, &mut ckpt.optim, batch, &subjects, &cfg, ckpt.step, lr)?;
                reports.push(report);
                ckpt.step += 1;
            }
        }
        ckpt.epoch += 1;
        log.push(EpochRow::from_reports(ckpt.epoch, Split::Train, &reports));

        if ckpt.epoch.is_multiple_of(cfg.eval_every) || ckpt.epoch == cfg.epochs {
            let report = evaluate(&ckpt.model, cohort, &eval_cfg, &fingerprint)?;
            let losses = test_losses(&ckpt.model, cohort, &subjects, &cfg, ckpt.step)?;
            let mut row = EpochRow::from_reports(ckpt.epoch, Split::Test, &losses);
            row.two_way = Some(report.mean.two_way_id);
            row.top1 = Some(report.mean.top1_retrieval);
            log.push(row);
            if ckpt.best.is_none_or(|b| report.mean.two_way_id > b.two_way) {
                ckpt.best = Some(BestRecord {
                    epoch: ckpt.epoch,
                    two_way: report.mean.two_way_id,
                });
                best = Some(ckpt.clone());
            }
            last_eval = Some(report);
        }
    }
    Ok(TrainOutput {
        last: ckpt,
        best,
        log,
        last_eval,
    })
}
