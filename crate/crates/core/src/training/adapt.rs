//! Adapting a pretrained model to a new subject.

use rand::Rng as _;

use super::checkpoint::{BestRecord, Checkpoint};
use super::config::{AdaptConfig, FinetuneStrategy, TrainConfig};
use super::optim::OptimState;
use super::pretrain::{apply_gradients, check_cohort, composite_loss, cycle_term, pretrain, supervised_terms, tag, EpochRow, TrainOutput};
use crate::data::{Batch, PooledCohort, Split};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport, LossTerms};
use crate::model::{ModelConfig, ModelState, SubjectId};
use crate::numerics::rng::{name_key, stream_rng, Stream};
use crate::numerics::{Graph, NodeId, Real};
use crate::syntheval::{evaluate, EvalConfig};

fn sum_terms<T: Real>(g: &mut Graph<T>, a: Option<NodeId>, b: Option<NodeId>) -> Result<Option<NodeId>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (a, b) => a.or(b),
    })
}

/// Objective of one adaptation step. The real batch drives the image and
/// text terms. With augmentation, the real batch also gets reconstruction
/// and cycle terms, and `pseudo` (a batch of an old subject `p`) is converted
/// into the new subject's space as `v' = B_new(E_p(v_p))` and contributes
/// `mean((B_new(E_new(v')) − v')²)` and `mean((E_new(v') − E_p(v_p))²)` to
/// the same two terms.
#[allow(clippy::too_many_arguments)]
pub fn adapt_loss<T: Real>(
    state: &ModelState<T>,
    g: &mut Graph<T>,
    real: &Batch<T>,
    pseudo: Option<&Batch<T>>,
    partner: &SubjectId,
    cfg: &TrainConfig,
    adapt: &AdaptConfig,
    step: u64,
) -> Result<(NodeId, LossReport)> {
    let Some(pseudo) = pseudo.filter(|_| adapt.pseudo_augment) else {
        return composite_loss(state, g, real, partner, cfg, step);
    };
    let new = &real.subject;
    let w = &cfg.weights;
    let v = g.constant(real.voxels.clone());
    let e = state.embed_node(g, new, v).map_err(|e| tag(e, "image", step))?;
    let (mut image, mut text) = supervised_terms(state, g, e, real, cfg, step)?;

    let vp = g.constant(pseudo.voxels.clone());
    let e_p = state.embed_node(g, &pseudo.subject, vp).map_err(|e| tag(e, "rec", step))?;
    let v_conv = state.build_node(g, new, e_p).map_err(|e| tag(e, "rec", step))?;
    let e_conv = state.embed_node(g, new, v_conv).map_err(|e| tag(e, "rec", step))?;
    if adapt.pseudo_supervised {
        let (pi, pt) = supervised_terms(state, g, e_conv, pseudo, cfg, step)?;
        image = sum_terms(g, image, pi)?;
        text = sum_terms(g, text, pt)?;
    }
    let mut rec = None;
    if w.rec > 0.0 {
        let build = |g: &mut Graph<T>| -> Result<NodeId> {
            let real_hat = state.build_node(g, new, e)?;
            let real_rec = g.mse(real_hat, v)?;
            let conv_hat = state.build_node(g, new, e_conv)?;
            let conv_rec = g.mse(conv_hat, v_conv)?;
            g.add(real_rec, conv_rec)
        };
        rec = Some(build(g).map_err(|e| tag(e, "rec", step))?);
    }
    let mut cyc = None;
    if w.cyc > 0.0 {
        let real_cyc = cycle_term(state, g, new, partner, e, cfg, step)?;
        let conv_cyc = g.mse(e_conv, e_p).map_err(|e| tag(e, "cyc", step))?;
        cyc = Some(g.add(real_cyc, conv_cyc).map_err(|e| tag(e, "cyc", step))?);
    }
    let terms = LossTerms { image, text, rec, cyc };
    total_loss(g, &terms, w, step)
}

#[derive(Clone, Copy, Debug)]
struct Run<'a> {
    new: &'a SubjectId,
    old: &'a [SubjectId],
}

fn eval_losses<T: Real>(
    state: &ModelState<T>,
    cohort: &PooledCohort<T>,
    run: Run<'_>,
    cfg: &TrainConfig,
    adapt: &AdaptConfig,
    step: u64,
) -> Result<LossReport> {
    let real = cohort.full_split(run.new, Split::Test)?;
    let mut g = Graph::new();
    let (partner, pseudo) = match run.old.first() {
        Some(p) => (p, Some(cohort.full_split(p, Split::Test)?)),
        None => (run.new, None),
    };
    Ok(adapt_loss(state, &mut g, &real, pseudo.as_ref(), partner, cfg, adapt, step)?.1)
}

/// Reset-tuning (or full tuning) of `pretrained` onto `new_subject`.
///
/// The new subject gets a freshly initialized embedder and builder; every
/// previously trained subject is frozen, and so is the translator under
/// [`FinetuneStrategy::Reset`]. Each step pairs one real batch of the new
/// subject with one converted batch of an old subject, cycling through
/// `old_subjects`.
pub fn adapt_new_subject<T: Real>(
    pretrained: &Checkpoint<T>,
    cohort: &PooledCohort<T>,
    new_subject: &SubjectId,
    old_subjects: &[SubjectId],
    train: &TrainConfig,
    adapt: &AdaptConfig,
) -> Result<TrainOutput<T>> {
    adapt.validate()?;
    let mut cfg = train.clone();
    cfg.epochs = adapt.epochs;
    cfg.enable_rec_cyc = adapt.pseudo_augment;
    cfg.validate()?;
    if old_subjects.contains(new_subject) {
        return Err(Error::config(format!("`{new_subject}` is listed as both new and old")));
    }
    for p in old_subjects {
        if !pretrained.model.subjects.contains_key(p) {
            return Err(Error::config(format!(
                "checkpoint has no modules for previously trained subject `{p}`"
            )));
        }
        cohort.subject(p)?;
    }
    if adapt.pseudo_augment && old_subjects.is_empty() {
        return Err(Error::config("pseudo augmentation needs at least one previously trained subject"));
    }
    cohort.subject(new_subject)?;

    let mut model = pretrained.model.clone();
    for s in model.subject_ids() {
        model.set_subject_frozen(&s, true);
    }
    model.reset_subject(new_subject, cfg.seed);
    model.set_subject_frozen(new_subject, false);
    model.set_translator_frozen(adapt.strategy == FinetuneStrategy::Reset);
    let mut ckpt = Checkpoint {
        model,
        optim: OptimState::new(),
        train: cfg.clone(),
        adapt: Some(adapt.clone()),
        epoch: 0,
        step: 0,
        best: None,
    };
    check_cohort(&ckpt, cohort)?;

    let run = Run { new: new_subject, old: old_subjects };
    let eval_cohort = cohort.restrict(std::slice::from_ref(new_subject))?;
    let fingerprint = ckpt.fingerprint();
    let eval_cfg = EvalConfig {
        split: Split::Test,
        trials: cfg.eval_trials,
        seed: cfg.seed,
    };
    let steps_per_epoch = cohort.subject(new_subject)?.train_ids.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let hp = ckpt.adamw();
    let adapt_key = name_key("adapt");
    let mut log = Vec::new();
    let mut best = None;
    let mut last_eval = None;
    while ckpt.epoch < cfg.epochs {
        let epoch = ckpt.epoch as u64;
        let real = cohort.batches(new_subject, cfg.batch_size, cfg.seed, epoch)?;
        let old_batches = if adapt.pseudo_augment {
            old_subjects
                .iter()
                .map(|p| cohort.batches(p, cfg.batch_size, cfg.seed, epoch))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut reports = Vec::with_capacity(real.len());
        for (k, batch) in real.iter().enumerate() {
            let step = ckpt.step;
            let pseudo = (!old_batches.is_empty()).then(|| {
                let from = &old_batches[k % old_batches.len()];
                let b = &from[(k / old_batches.len()) % from.len()];
                let rows: Vec<usize> = (0..b.len().min(batch.len())).collect();
                truncate(b, &rows)
            });
            let mut pairing = stream_rng(cfg.seed, Stream::Pairing, &[adapt_key, step]);
            let partner = if old_subjects.is_empty() {
                new_subject
            } else {
                &old_subjects[pairing.random_range(0..old_subjects.len())]
            };
            let mut g = Graph::training(stream_rng(cfg.seed, Stream::Dropout, &[adapt_key, step]));
            let (loss, report) = adapt_loss(&ckpt.model, &mut g, batch, pseudo.as_ref(), partner, &cfg, adapt, step)?;
            let lr = cfg.lr_at(step, total_steps);
            apply_gradients(&mut ckpt.model, &mut ckpt.optim, &g, loss, &hp, lr, step)?;
            reports.push(report);
            ckpt.step += 1;
        }
        ckpt.epoch += 1;
        log.push(EpochRow::from_reports(ckpt.epoch, Split::Train, &reports));
        if ckpt.epoch % cfg.eval_every == 0 || ckpt.epoch == cfg.epochs {
            let report = evaluate(&ckpt.model, &eval_cohort, &eval_cfg, &fingerprint)?;
            let losses = eval_losses(&ckpt.model, cohort, run, &cfg, adapt, ckpt.step)?;
            let mut row = EpochRow::from_reports(ckpt.epoch, Split::Test, &[losses]);
            row.two_way = Some(report.mean.two_way_id);
            row.top1 = Some(report.mean.top1_retrieval);
            log.push(row);
            if ckpt.best.is_none_or(|b| report.mean.two_way_id > b.two_way) {
                ckpt.best = Some(BestRecord { epoch: ckpt.epoch, two_way: report.mean.two_way_id });
                best = Some(ckpt.clone());
            }
            last_eval = Some(report);
        }
    }
    Ok(TrainOutput { last: ckpt, best, log, last_eval })
}

fn truncate<T: Real>(b: &Batch<T>, rows: &[usize]) -> Batch<T> {
    if rows.len() == b.len() {
        return b.clone();
    }
    Batch {
        subject: b.subject.clone(),
        voxels: b.voxels.select_rows(rows),
        image: b.image.select_rows(rows),
        text: b.text.select_rows(rows),
        ids: rows.iter().map(|&r| b.ids[r]).collect(),
    }
}

/// Single-subject baseline trained from scratch with the image and text
/// terms only.
pub fn train_scratch<T: Real>(
    cohort: &PooledCohort<T>,
    subject: &SubjectId,
    model: ModelConfig,
    train: &TrainConfig,
    epochs: usize,
) -> Result<TrainOutput<T>> {
    let cfg = TrainConfig {
        epochs,
        enable_rec_cyc: false,
        ..train.clone()
    };
    let ckpt = Checkpoint::fresh(model, cfg, std::slice::from_ref(subject))?;
    pretrain(ckpt, cohort)
}
