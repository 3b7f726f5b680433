//! Synthetic multi-subject cohort.
//!
//! Every stimulus has a latent `z ~ N(0, I)`. Targets are fixed linear maps
//! of `z`; subject `s` responds with `relu(G_s z + b_s) + σ ε` where `G_s` is
//! 80% zeros. Train stimuli are disjoint across subjects, test stimuli are
//! shared and their recordings averaged over repeats.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::container::{find, NamedArray};
use crate::error::{Error, Result};
use crate::model::SubjectId;
use crate::numerics::rng::{name_key, stream_rng, Stream};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub voxel_min: usize,
    pub voxel_max: usize,
    pub latent_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_std: f64,
    pub test_repeats: usize,
    /// Fraction of mixing entries forced to zero.
    pub sparsity: f64,
    pub bias_std: f64,
    pub image_tokens: usize,
    pub image_channels: usize,
    pub text_tokens: usize,
    pub text_channels: usize,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_subjects: 3,
            voxel_min: 1300,
            voxel_max: 1600,
            latent_dim: 16,
            n_train: 2000,
            n_test: 64,
            noise_std: 0.1,
            test_repeats: 3,
            sparsity: 0.8,
            bias_std: 0.5,
            image_tokens: 17,
            image_channels: 32,
            text_tokens: 5,
            text_channels: 32,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn n_stimuli(&self) -> usize {
        self.n_test + self.n_subjects * self.n_train
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.n_subjects == 0 {
            return fail("n_subjects must be positive".into());
        }
        if self.voxel_min == 0 || self.voxel_min > self.voxel_max {
            return fail(format!(
                "voxel range [{}, {}] is empty",
                self.voxel_min, self.voxel_max
            ));
        }
        let distinct = self.voxel_max - self.voxel_min + 1;
        if self.n_subjects > distinct {
            return fail(format!(
                "{} subjects need distinct voxel counts but range [{}, {}] holds only {distinct}",
                self.n_subjects, self.voxel_min, self.voxel_max
            ));
        }
        if self.latent_dim == 0 || self.n_train == 0 || self.n_test == 0 || self.test_repeats == 0 {
            return fail("latent_dim, n_train, n_test and test_repeats must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return fail(format!("sparsity must lie in [0, 1), got {}", self.sparsity));
        }
        if !(self.bias_std >= 0.0 && self.bias_std.is_finite()) {
            return fail(format!("bias_std must be finite and >= 0, got {}", self.bias_std));
        }
        if self.image_tokens * self.image_channels == 0 || self.text_tokens * self.text_channels == 0 {
            return fail("target token and channel counts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectData {
    pub id: SubjectId,
    /// `[n_train, F_s]`, standardized.
    pub train: Tensor<f32>,
    pub train_ids: Vec<usize>,
    /// `[n_test, F_s]`, repeat-averaged then standardized with train statistics.
    pub test: Tensor<f32>,
    pub test_ids: Vec<usize>,
    /// Ground truth `[F_s, d_z]`; absent for ingested data.
    pub mixing: Option<Tensor<f32>>,
    pub bias: Option<Tensor<f32>>,
}

impl SubjectData {
    pub fn voxel_count(&self) -> usize {
        self.train.row_len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    /// `[n_stimuli, d_z]`; absent for ingested data.
    pub latents: Option<Tensor<f32>>,
    /// `[n_stimuli, T_I, C_I]`, indexed by stimulus id.
    pub image_targets: Tensor<f32>,
    pub text_targets: Tensor<f32>,
    pub subjects: Vec<SubjectData>,
}

fn gauss(rng: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| scale * gauss(rng))
        .collect::<Vec<f64>>()
}

/// `out[i, j] = Σ_k a[i, k] b[j, k]` in f64.
fn rows_times_transposed(a: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let (n, m) = (a.len() / k, b.len() / k);
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let bj = &b[j * k..(j + 1) * k];
            out.push(ai.iter().zip(bj).map(|(x, y)| x * y).sum());
        }
    }
    out
}

fn to_f32(shape: Vec<usize>, data: &[f64]) -> Tensor<f32> {
    Tensor::new(shape, data.iter().map(|&v| v as f32).collect()).expect("shape matches data")
}

pub fn subject_name(index: usize) -> SubjectId {
    SubjectId::new(format!("subj{:02}", index + 1))
}

/// Distinct voxel counts, drawn per subject from its own stream so that a
/// larger cohort extends a smaller one without changing its subjects.
fn voxel_counts(spec: &CohortSpec) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(spec.n_subjects);
    for s in 0..spec.n_subjects {
        let mut rng = stream_rng(spec.seed, Stream::Data, &[name_key("voxel_count"), s as u64]);
        loop {
            let f = rng.random_range(spec.voxel_min..=spec.voxel_max);
            if !counts.contains(&f) {
                counts.push(f);
                break;
            }
        }
    }
    counts
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let d = spec.latent_dim;
    let n_stim = spec.n_stimuli();
    let seed = spec.seed;

    let mut rng = stream_rng(seed, Stream::Data, &[name_key("latents")]);
    let z = normal_matrix(&mut rng, n_stim, d, 1.0);

    let unit = 1.0 / (d as f64).sqrt();
    let d_image = spec.image_tokens * spec.image_channels;
    let d_text = spec.text_tokens * spec.text_channels;
    let mut rng = stream_rng(seed, Stream::Data, &[name_key("targets/image")]);
    let a_image = normal_matrix(&mut rng, d_image, d, unit);
    let mut rng = stream_rng(seed, Stream::Data, &[name_key("targets/text")]);
    let a_text = normal_matrix(&mut rng, d_text, d, unit);
    let image = rows_times_transposed(&z, &a_image, d);
    let text = rows_times_transposed(&z, &a_text, d);

    let counts = voxel_counts(spec);

    let test_ids: Vec<usize> = (0..spec.n_test).collect();
    let keep = 1.0 - spec.sparsity;
    let g_scale = 1.0 / (d as f64 * keep).sqrt();
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for (s, &f) in counts.iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::Data, &[name_key("mixing"), s as u64]);
        let g: Vec<f64> = (0..f * d)
            .map(|_| {
                let keep_entry = rng.random::<f64>() < keep;
                let w = gauss(&mut rng);
                if keep_entry {
                    g_scale * w
                } else {
                    0.0
                }
            })
            .collect();
        let mut rng = stream_rng(seed, Stream::Data, &[name_key("bias"), s as u64]);
        let b = normal_matrix(&mut rng, 1, f, spec.bias_std);

        let train_ids: Vec<usize> = (0..spec.n_train)
            .map(|k| spec.n_test + s * spec.n_train + k)
            .collect();
        let clean = |ids: &[usize]| -> Vec<f64> {
            let zs: Vec<f64> = ids.iter().flat_map(|&i| z[i * d..(i + 1) * d].to_vec()).collect();
            let mut act = rows_times_transposed(&zs, &g, d);
            for row in act.chunks_mut(f) {
                for (v, bias) in row.iter_mut().zip(&b) {
                    *v = (*v + bias).max(0.0);
                }
            }
            act
        };

        let mut train = clean(&train_ids);
        let mut rng = stream_rng(seed, Stream::Data, &[name_key("noise/train"), s as u64]);
        for v in train.iter_mut() {
            *v += spec.noise_std * gauss(&mut rng);
        }

        let mut test = clean(&test_ids);
        let mut rng = stream_rng(seed, Stream::Data, &[name_key("noise/test"), s as u64]);
        let mut noise_sum = vec![0.0f64; test.len()];
        for _ in 0..spec.test_repeats {
            for acc in noise_sum.iter_mut() {
                *acc += gauss(&mut rng);
            }
        }
        let reps = spec.test_repeats as f64;
        for (v, acc) in test.iter_mut().zip(&noise_sum) {
            *v += spec.noise_std * (acc / reps);
        }

        let (mean, std) = column_stats(&train, f);
        standardize(&mut train, &mean, &std);
        standardize(&mut test, &mean, &std);

        subjects.push(SubjectData {
            id: subject_name(s),
            train: to_f32(vec![spec.n_train, f], &train),
            train_ids,
            test: to_f32(vec![spec.n_test, f], &test),
            test_ids: test_ids.clone(),
            mixing: Some(to_f32(vec![f, d], &g)),
            bias: Some(to_f32(vec![f], &b)),
        });
    }

    Ok(Cohort {
        latents: Some(to_f32(vec![n_stim, d], &z)),
        image_targets: to_f32(vec![n_stim, spec.image_tokens, spec.image_channels], &image),
        text_targets: to_f32(vec![n_stim, spec.text_tokens, spec.text_channels], &text),
        subjects,
    })
}

/// Per-column mean and population standard deviation.
fn column_stats(data: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (data.len() / cols) as f64;
    let mut mean = vec![0.0; cols];
    for row in data.chunks(cols) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for row in data.chunks(cols) {
        for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    // A constant voxel carries no signal; leave it centred at zero.
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn standardize(data: &mut [f64], mean: &[f64], std: &[f64]) {
    for row in data.chunks_mut(mean.len()) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
}

impl Cohort {
    pub fn subject(&self, id: &SubjectId) -> Result<&SubjectData> {
        self.subjects
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))
    }

    pub fn subject_ids(&self) -> Vec<SubjectId> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    pub fn n_stimuli(&self) -> usize {
        self.image_targets.rows()
    }

    /// Keeps only the listed subjects, in the given order.
    pub fn restrict(&self, ids: &[SubjectId]) -> Result<Cohort> {
        let subjects = ids
            .iter()
            .map(|id| self.subject(id).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(Cohort {
            latents: self.latents.clone(),
            image_targets: self.image_targets.clone(),
            text_targets: self.text_targets.clone(),
            subjects,
        })
    }

    /// Replaces one subject's train split by `n` rows drawn without
    /// replacement (kept in original order).
    pub fn with_train_subset(&self, id: &SubjectId, n: usize, seed: u64) -> Result<Cohort> {
        let s = self.subject(id)?;
        if n == 0 || n > s.train.rows() {
            return Err(Error::config(format!(
                "subset of {n} rows requested from {} train rows of `{id}`",
                s.train.rows()
            )));
        }
        let mut rng = stream_rng(seed, Stream::Subset, &[name_key(id.as_str())]);
        let mut rows = index::sample(&mut rng, s.train.rows(), n).into_vec();
        rows.sort_unstable();
        let mut out = self.clone();
        let target = out.subjects.iter_mut().find(|x| &x.id == id).expect("checked above");
        target.train = s.train.select_rows(&rows);
        target.train_ids = rows.iter().map(|&r| s.train_ids[r]).collect();
        Ok(out)
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        if let Some(z) = &self.latents {
            out.push(NamedArray::from_tensor("latents", z));
        }
        out.push(NamedArray::from_tensor("targets/image", &self.image_targets));
        out.push(NamedArray::from_tensor("targets/text", &self.text_targets));
        for s in &self.subjects {
            let id = s.id.as_str();
            out.push(NamedArray::from_tensor(format!("voxels/{id}/train"), &s.train));
            out.push(NamedArray::from_tensor(format!("voxels/{id}/test"), &s.test));
            out.push(NamedArray::from_ids(format!("ids/{id}/train"), &s.train_ids));
            out.push(NamedArray::from_ids(format!("ids/{id}/test"), &s.test_ids));
            if let Some(g) = &s.mixing {
                out.push(NamedArray::from_tensor(format!("truth/{id}/mixing"), g));
            }
            if let Some(b) = &s.bias {
                out.push(NamedArray::from_tensor(format!("truth/{id}/bias"), b));
            }
        }
        out
    }

    /// Reads the reserved names. Subjects appear in the order of their
    /// `voxels/<id>/train` entries; `latents` and `truth/*` are optional.
    pub fn from_arrays(arrays: &[NamedArray]) -> Result<Cohort> {
        let image_targets = find(arrays, "targets/image")?.to_tensor::<f32>()?;
        let text_targets = find(arrays, "targets/text")?.to_tensor::<f32>()?;
        if image_targets.shape().len() != 3 || text_targets.shape().len() != 3 {
            return Err(Error::dim("targets must be [n_stimuli, tokens, channels]"));
        }
        let n_stim = image_targets.rows();
        if text_targets.rows() != n_stim {
            return Err(Error::dim(format!(
                "targets/text has {} stimuli, targets/image has {n_stim}",
                text_targets.rows()
            )));
        }
        let optional = |name: &str| -> Result<Option<Tensor<f32>>> {
            arrays
                .iter()
                .find(|a| a.name == name)
                .map(|a| a.to_tensor::<f32>())
                .transpose()
        };
        let mut subjects = Vec::new();
        for a in arrays {
            let Some(id) = a
                .name
                .strip_prefix("voxels/")
                .and_then(|rest| rest.strip_suffix("/train"))
            else {
                continue;
            };
            let train = a.to_tensor::<f32>()?;
            let test = find(arrays, &format!("voxels/{id}/test"))?.to_tensor::<f32>()?;
            let train_ids = find(arrays, &format!("ids/{id}/train"))?.to_ids()?;
            let test_ids = find(arrays, &format!("ids/{id}/test"))?.to_ids()?;
            if train.shape().len() != 2 || test.shape().len() != 2 || train.row_len() != test.row_len() {
                return Err(Error::dim(format!(
                    "subject `{id}`: train {:?} and test {:?} must be 2-D with equal width",
                    train.shape(),
                    test.shape()
                )));
            }
            if train_ids.len() != train.rows() || test_ids.len() != test.rows() {
                return Err(Error::dim(format!("subject `{id}`: ids do not match recording rows")));
            }
            if let Some(&bad) = train_ids.iter().chain(&test_ids).find(|&&i| i >= n_stim) {
                return Err(Error::config(format!(
                    "subject `{id}`: stimulus id {bad} outside {n_stim} targets"
                )));
            }
            subjects.push(SubjectData {
                id: SubjectId::new(id),
                train,
                train_ids,
                test,
                test_ids,
                mixing: optional(&format!("truth/{id}/mixing"))?,
                bias: optional(&format!("truth/{id}/bias"))?,
            });
        }
        if subjects.is_empty() {
            return Err(Error::config("container holds no voxels/<subject>/train arrays"));
        }
        Ok(Cohort {
            latents: optional("latents")?,
            image_targets,
            text_targets,
            subjects,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> CohortSpec {
        CohortSpec {
            n_subjects: 3,
            voxel_min: 40,
            voxel_max: 60,
            latent_dim: 4,
            n_train: 50,
            n_test: 8,
            image_tokens: 3,
            image_channels: 4,
            text_tokens: 2,
            text_channels: 4,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_cohort(&small()).unwrap(), generate_cohort(&small()).unwrap());
        let other = CohortSpec { seed: 1, ..small() };
        assert_ne!(generate_cohort(&small()).unwrap(), generate_cohort(&other).unwrap());
    }

    #[test]
    fn noiseless_repeats_agree() {
        let one = CohortSpec { noise_std: 0.0, test_repeats: 1, ..small() };
        let three = CohortSpec { test_repeats: 3, ..one.clone() };
        let (a, b) = (generate_cohort(&one).unwrap(), generate_cohort(&three).unwrap());
        for (x, y) in a.subjects.iter().zip(&b.subjects) {
            assert_eq!(x.test, y.test);
            assert_eq!(x.train, y.train);
        }
    }

    #[test]
    fn split_contract() {
        let c = generate_cohort(&small()).unwrap();
        let mut seen = BTreeSet::new();
        for s in &c.subjects {
            for &i in &s.train_ids {
                assert!(seen.insert(i), "train id {i} reused");
            }
            assert_eq!(s.test_ids, c.subjects[0].test_ids);
            assert!(s.test_ids.iter().all(|i| !seen.contains(i)));
        }
        let counts: BTreeSet<usize> = c.subjects.iter().map(|s| s.voxel_count()).collect();
        assert_eq!(counts.len(), 3);
        assert!(counts.iter().all(|&f| (40..=60).contains(&f)));
    }

    #[test]
    fn train_is_standardized() {
        let c = generate_cohort(&small()).unwrap();
        for s in &c.subjects {
            let n = s.train.rows() as f64;
            for j in 0..s.voxel_count() {
                let col: Vec<f64> = (0..s.train.rows()).map(|i| s.train.row(i)[j] as f64).collect();
                let mean = col.iter().sum::<f64>() / n;
                let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                assert!(mean.abs() < 1e-6, "mean {mean}");
                assert!((std - 1.0).abs() < 1e-5, "std {std}");
            }
        }
    }

    #[test]
    fn shapes_follow_spec() {
        let c = generate_cohort(&small()).unwrap();
        assert_eq!(c.latents.as_ref().unwrap().shape(), &[8 + 150, 4]);
        assert_eq!(c.image_targets.shape(), &[c.n_stimuli(), 3, 4]);
        assert_eq!(c.text_targets.shape(), &[c.n_stimuli(), 2, 4]);
        for s in &c.subjects {
            assert_eq!(s.mixing.as_ref().unwrap().shape(), &[s.voxel_count(), 4]);
            assert_eq!(s.test.shape(), &[8, s.voxel_count()]);
        }
    }

    #[test]
    fn extra_subjects_leave_existing_ones_unchanged() {
        let three = generate_cohort(&small()).unwrap();
        let four = generate_cohort(&CohortSpec { n_subjects: 4, ..small() }).unwrap();
        assert_eq!(three.subjects[..], four.subjects[..3]);
        let n = three.n_stimuli();
        assert_eq!(three.image_targets.data(), &four.image_targets.data()[..n * 12]);
    }

    #[test]
    fn infeasible_voxel_range() {
        let spec = CohortSpec { n_subjects: 5, voxel_min: 10, voxel_max: 13, ..small() };
        assert!(matches!(generate_cohort(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn arrays_round_trip() {
        let c = generate_cohort(&small()).unwrap();
        let back = Cohort::from_arrays(&c.to_arrays()).unwrap();
        assert_eq!(back, c);
        let restricted = c.restrict(&[subject_name(2)]).unwrap();
        assert_eq!(restricted.subjects.len(), 1);
        assert!(c.restrict(&[SubjectId::new("nobody")]).is_err());
    }
}
