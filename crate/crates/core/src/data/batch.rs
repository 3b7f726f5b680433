//! Pooled views of a cohort and deterministic mini-batches.

use rand::seq::SliceRandom;

use super::cohort::{Cohort, SubjectData};
use crate::error::{Error, Result};
use crate::model::SubjectId;
use crate::numerics::aggregate::aggregate;
use crate::numerics::rng::{name_key, stream_rng, Stream};
use crate::numerics::{Aggregation, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub subject: SubjectId,
    /// `[n, m]`
    pub voxels: Tensor<T>,
    /// `[n, T_I, C_I]`
    pub image: Tensor<T>,
    /// `[n, T_T, C_T]`
    pub text: Tensor<T>,
    pub ids: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledSubject<T> {
    pub id: SubjectId,
    pub voxel_count: usize,
    pub train: Tensor<T>,
    pub train_ids: Vec<usize>,
    pub test: Tensor<T>,
    pub test_ids: Vec<usize>,
}

impl<T: Real> PooledSubject<T> {
    fn split(&self, split: Split) -> (&Tensor<T>, &[usize]) {
        match split {
            Split::Train => (&self.train, &self.train_ids),
            Split::Test => (&self.test, &self.test_ids),
        }
    }
}

fn pool_rows<T: Real>(x: &Tensor<f32>, m: usize, how: Aggregation) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(x.rows() * m);
    for i in 0..x.rows() {
        let row: Vec<T> = x.row(i).iter().map(|&v| T::lit(v as f64)).collect();
        data.extend(aggregate(&row, m, how)?);
    }
    Tensor::new(vec![x.rows(), m], data)
}

pub fn pool_subject<T: Real>(s: &SubjectData, m: usize, how: Aggregation) -> Result<PooledSubject<T>> {
    Ok(PooledSubject {
        id: s.id.clone(),
        voxel_count: s.voxel_count(),
        train: pool_rows(&s.train, m, how)?,
        train_ids: s.train_ids.clone(),
        test: pool_rows(&s.test, m, how)?,
        test_ids: s.test_ids.clone(),
    })
}

/// A cohort whose recordings are already pooled to width `m` and cast to `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledCohort<T> {
    pub pooled_size: usize,
    pub aggregation: Aggregation,
    pub image_targets: Tensor<T>,
    pub text_targets: Tensor<T>,
    pub subjects: Vec<PooledSubject<T>>,
}

impl<T: Real> PooledCohort<T> {
    pub fn new(cohort: &Cohort, m: usize, how: Aggregation) -> Result<Self> {
        let subjects = cohort
            .subjects
            .iter()
            .map(|s| pool_subject(s, m, how))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pooled_size: m,
            aggregation: how,
            image_targets: cohort.image_targets.cast(),
            text_targets: cohort.text_targets.cast(),
            subjects,
        })
    }

    pub fn subject(&self, id: &SubjectId) -> Result<&PooledSubject<T>> {
        self.subjects
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))
    }

    pub fn subject_ids(&self) -> Vec<SubjectId> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    /// Keeps only the listed subjects, in the given order.
    pub fn restrict(&self, ids: &[SubjectId]) -> Result<Self> {
        let subjects = ids
            .iter()
            .map(|id| self.subject(id).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pooled_size: self.pooled_size,
            aggregation: self.aggregation,
            image_targets: self.image_targets.clone(),
            text_targets: self.text_targets.clone(),
            subjects,
        })
    }

    /// Rows `rows` of a subject's split, with their targets.
    pub fn gather(&self, id: &SubjectId, split: Split, rows: &[usize]) -> Result<Batch<T>> {
        let s = self.subject(id)?;
        let (voxels, ids) = s.split(split);
        let ids: Vec<usize> = rows.iter().map(|&r| ids[r]).collect();
        Ok(Batch {
            subject: id.clone(),
            voxels: voxels.select_rows(rows),
            image: self.image_targets.select_rows(&ids),
            text: self.text_targets.select_rows(&ids),
            ids,
        })
    }

    /// The whole split as one batch, in stored order.
    pub fn full_split(&self, id: &SubjectId, split: Split) -> Result<Batch<T>> {
        let n = self.subject(id)?.split(split).1.len();
        self.gather(id, split, &(0..n).collect::<Vec<_>>())
    }

    /// Shuffled train batches for one epoch; the last batch may be short.
    pub fn batches(&self, id: &SubjectId, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch<T>>> {
        if batch_size == 0 {
            return Err(Error::param("batch_size must be positive"));
        }
        let n = self.subject(id)?.train_ids.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(seed, Stream::Shuffle, &[name_key(id.as_str()), epoch]);
        order.shuffle(&mut rng);
        order
            .chunks(batch_size)
            .map(|rows| self.gather(id, Split::Train, rows))
            .collect()
    }
}

/// Pools one subject with adaptive max pooling and returns its shuffled
/// train batches for `epoch`.
pub fn batch_iter<T: Real>(
    cohort: &Cohort,
    subject: &SubjectId,
    batch_size: usize,
    m: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch<T>>> {
    let view = cohort.restrict(std::slice::from_ref(subject))?;
    PooledCohort::<T>::new(&view, m, Aggregation::Max)?.batches(subject, batch_size, seed, epoch)
}
