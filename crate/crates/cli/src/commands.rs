use std::path::{Path, PathBuf};

use mindbridge::data::container::{load_container, save_container, NamedArray};
use mindbridge::data::{generate_cohort, Cohort, PooledCohort};
use mindbridge::model::SubjectId;
use mindbridge::numerics::Real;
use mindbridge::syntheval::{
    cosine_matrix, evaluate, synthesize_fmri, topk_from_similarity, two_way_from_similarity, EvalConfig, EvalReport,
};
use mindbridge::training::{
    adapt_new_subject, load_checkpoint, log_csv, pretrain, save_checkpoint, train_scratch, Checkpoint, TrainOutput,
};
use mindbridge::numerics::rng::name_key;
use mindbridge::{Error, Result};

use super::config::RunConfig;
use super::{Command, Common, Precision};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn new(common: &Common, config_required: bool) -> Result<Self> {
        let cfg = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None if config_required => return Err(Error::Usage("--config is required".into())),
            None => RunConfig::default(),
        };
        std::fs::create_dir_all(&common.out).map_err(io_err(&common.out))?;
        let run = Self { cfg: cfg.with_seed(common.seed), out: common.out.clone() };
        write(&run.path("config.json"), run.cfg.to_json()?)?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_report(&self, stem: &str, report: &EvalReport) -> Result<()> {
        write(&self.path(&format!("{stem}.json")), report.to_json()? + "\n")?;
        write(&self.path(&format!("{stem}.csv")), report.to_csv())
    }

    fn write_training<T: Real>(&self, stem: &str, out: &TrainOutput<T>) -> Result<()> {
        save_checkpoint(self.path(&format!("{stem}.mbck")), &out.last)?;
        if let Some(best) = &out.best {
            save_checkpoint(self.path(&format!("{stem}_best.mbck")), best)?;
        }
        write(&self.path(&format!("{stem}_log.csv")), log_csv(&out.log))?;
        if let Some(report) = &out.last_eval {
            self.write_report(&format!("{stem}_eval"), report)?;
        }
        Ok(())
    }
}

fn precision(flag: Option<Precision>) -> Result<Precision> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match std::env::var("MB_PRECISION") {
        Err(_) => Ok(Precision::F32),
        Ok(v) if v == "f32" => Ok(Precision::F32),
        Ok(v) if v == "f64" => Ok(Precision::F64),
        Ok(v) => Err(Error::Usage(format!("MB_PRECISION must be f32 or f64, got {v:?}"))),
    }
}

fn ids(names: &[String]) -> Vec<SubjectId> {
    names.iter().map(SubjectId::new).collect()
}

fn load_cohort(path: &Path) -> Result<Cohort> {
    Cohort::from_arrays(&load_container(path)?)
}

/// Subjects of the data that the checkpoint knows, in data order.
fn known<T: Real>(ckpt: &Checkpoint<T>, cohort: &Cohort) -> Vec<SubjectId> {
    cohort
        .subject_ids()
        .into_iter()
        .filter(|s| ckpt.model.subjects.contains_key(s))
        .collect()
}

fn pool<T: Real>(ckpt: &Checkpoint<T>, cohort: &Cohort, subjects: &[SubjectId]) -> Result<PooledCohort<T>> {
    PooledCohort::new(&cohort.restrict(subjects)?, ckpt.model.config.pooled_size, ckpt.train.aggregation)
}

pub(crate) fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::Pretrain { common, data, resume } => match precision(common.precision)? {
            Precision::F32 => pretrain_cmd::<f32>(&common, &data, resume.as_deref()),
            Precision::F64 => pretrain_cmd::<f64>(&common, &data, resume.as_deref()),
        },
        Command::Adapt { common, checkpoint, data, subset, baseline_scratch } => {
            let args = AdaptArgs { checkpoint: &checkpoint, data: &data, subset, baseline_scratch };
            match precision(common.precision)? {
                Precision::F32 => adapt_cmd::<f32>(&common, args),
                Precision::F64 => adapt_cmd::<f64>(&common, args),
            }
        }
        Command::Synthesize { common, checkpoint, data } => match precision(common.precision)? {
            Precision::F32 => synthesize_cmd::<f32>(&common, &checkpoint, &data),
            Precision::F64 => synthesize_cmd::<f64>(&common, &checkpoint, &data),
        },
        Command::Eval { common, checkpoint, data } => match precision(common.precision)? {
            Precision::F32 => eval_cmd::<f32>(&common, &checkpoint, &data),
            Precision::F64 => eval_cmd::<f64>(&common, &checkpoint, &data),
        },
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let run = Run::new(common, true)?;
    let cohort = generate_cohort(&run.cfg.cohort)?;
    save_container(run.path("cohort.mbds"), &cohort.to_arrays())?;
    eprintln!(
        "wrote {} subjects, {} stimuli to {}",
        cohort.subjects.len(),
        cohort.n_stimuli(),
        run.path("cohort.mbds").display()
    );
    Ok(())
}

fn pretrain_cmd<T: Real>(common: &Common, data: &Path, resume: Option<&Path>) -> Result<()> {
    let run = Run::new(common, true)?;
    let cfg = &run.cfg;
    let cohort = load_cohort(data)?;
    let subjects = match &cfg.subjects.pretrain {
        Some(list) => ids(list),
        None => cohort.subject_ids(),
    };
    let ckpt = match resume {
        Some(path) => {
            let mut ckpt = load_checkpoint::<T>(path)?;
            ckpt.ensure_compatible(&cfg.model, &cfg.train)?;
            if ckpt.model.subject_ids() != subjects {
                return Err(Error::config("resumed checkpoint was trained on different subjects"));
            }
            ckpt.train.epochs = cfg.train.epochs;
            ckpt
        }
        None => Checkpoint::fresh(cfg.model.clone(), cfg.train.clone(), &subjects)?,
    };
    let pooled = pool(&ckpt, &cohort, &subjects)?;
    let out = pretrain(ckpt, &pooled)?;
    run.write_training("pretrain", &out)?;
    if let Some(r) = &out.last_eval {
        eprintln!(
            "epoch {}: two-way {:.3}, top-1 {:.3}",
            out.last.epoch, r.mean.two_way_id, r.mean.top1_retrieval
        );
    }
    Ok(())
}

struct AdaptArgs<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    subset: Option<usize>,
    baseline_scratch: bool,
}

fn adapt_cmd<T: Real>(common: &Common, args: AdaptArgs<'_>) -> Result<()> {
    let run = Run::new(common, true)?;
    let cfg = &run.cfg;
    let pretrained = load_checkpoint::<T>(args.checkpoint)?;
    let cohort = load_cohort(args.data)?;
    let new = match &cfg.subjects.new {
        Some(s) => SubjectId::new(s),
        None => {
            let unseen: Vec<SubjectId> = cohort
                .subject_ids()
                .into_iter()
                .filter(|s| !pretrained.model.subjects.contains_key(s))
                .collect();
            match unseen.as_slice() {
                [one] => one.clone(),
                _ => {
                    return Err(Error::config(format!(
                        "set subjects.new: the data has {} subjects unknown to the checkpoint",
                        unseen.len()
                    )))
                }
            }
        }
    };
    let old = match &cfg.subjects.old {
        Some(list) => ids(list),
        None => pretrained.model.subject_ids().into_iter().filter(|s| *s != new).collect(),
    };
    let cohort = match args.subset {
        Some(n) => cohort.with_train_subset(&new, n, cfg.train.seed)?,
        None => cohort,
    };
    let mut subjects = old.clone();
    subjects.push(new.clone());
    let pooled = pool(&pretrained, &cohort, &subjects)?;
    let n_train = pooled.subject(&new)?.train_ids.len();
    eprintln!("adapting {new} on {n_train} training samples");
    let tuned = adapt_new_subject(&pretrained, &pooled, &new, &old, &cfg.train, &cfg.adapt)?;
    run.write_training("adapt", &tuned)?;
    if !args.baseline_scratch {
        return Ok(());
    }
    let scratch = train_scratch(&pooled, &new, pretrained.model.config.clone(), &cfg.train, cfg.adapt.epochs)?;
    run.write_training("scratch", &scratch)?;
    let mut table = String::from("method,subject,n_train,seed,pixcorr,cosine_image,cosine_text,top1_retrieval,two_way_id\n");
    for (method, out) in [("reset_tuning", &tuned), ("scratch", &scratch)] {
        let m = &out.last_eval.as_ref().expect("training ends with an evaluation").mean;
        table.push_str(&format!(
            "{method},{new},{n_train},{},{},{},{},{},{}\n",
            cfg.train.seed, m.pixcorr, m.cosine_image, m.cosine_text, m.top1_retrieval, m.two_way_id
        ));
    }
    write(&run.path("comparison.csv"), table)
}

fn synthesize_cmd<T: Real>(common: &Common, checkpoint: &Path, data: &Path) -> Result<()> {
    let run = Run::new(common, true)?;
    let cfg = &run.cfg;
    let split = cfg.eval.split()?;
    let ckpt = load_checkpoint::<T>(checkpoint)?;
    let cohort = load_cohort(data)?;
    let from = cfg.subjects.synth_from.as_deref().map_or_else(|| known(&ckpt, &cohort), ids);
    let to = cfg.subjects.synth_to.as_deref().map_or_else(|| ckpt.model.subject_ids(), ids);
    let pooled = pool(&ckpt, &cohort, &from)?;
    let mut arrays = Vec::new();
    let mut table = String::from("from,to,split,n,top1_retrieval,two_way_id\n");
    for a in &from {
        let batch = pooled.full_split(a, split)?;
        arrays.push(NamedArray::from_ids(format!("ids/{a}/{}", split.name()), &batch.ids));
        for b in to.iter().filter(|b| *b != a) {
            let v = synthesize_fmri(&ckpt.model, a, b, &batch.voxels)?;
            let e = ckpt.model.embed(b, &v, None)?;
            let (image, _) = ckpt.model.translate(&e, None)?;
            let sim = cosine_matrix(&image, &batch.image)?;
            let path = [name_key(a.as_str()), name_key(b.as_str())];
            let two_way = two_way_from_similarity(&sim, cfg.eval.trials, cfg.train.seed, &path)?;
            let top1 = topk_from_similarity(&sim, 1)?;
            table.push_str(&format!("{a},{b},{},{},{top1},{two_way}\n", split.name(), batch.len()));
            arrays.push(NamedArray::from_tensor(format!("synth/{a}/{b}"), &v));
        }
    }
    save_container(run.path("synthesized.mbds"), &arrays)?;
    write(&run.path("synthesis_eval.csv"), table)
}

fn eval_cmd<T: Real>(common: &Common, checkpoint: &Path, data: &Path) -> Result<()> {
    let run = Run::new(common, false)?;
    let cfg = &run.cfg;
    let ckpt = load_checkpoint::<T>(checkpoint)?;
    let cohort = load_cohort(data)?;
    let subjects = known(&ckpt, &cohort);
    if subjects.is_empty() {
        return Err(Error::config("no subject of the data is known to the checkpoint"));
    }
    let pooled = pool(&ckpt, &cohort, &subjects)?;
    let eval = EvalConfig { split: cfg.eval.split()?, trials: cfg.eval.trials, seed: cfg.train.seed };
    let report = evaluate(&ckpt.model, &pooled, &eval, &ckpt.fingerprint())?;
    run.write_report("eval", &report)?;
    eprintln!(
        "two-way {:.3}, top-1 {:.3} over {} subjects",
        report.mean.two_way_id,
        report.mean.top1_retrieval,
        report.subjects.len()
    );
    Ok(())
}
