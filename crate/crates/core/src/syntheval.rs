//! Cross-subject synthesis and embedding-space evaluation.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{PooledCohort, Split};
use crate::error::{Error, Result};
use crate::model::{ModelState, SubjectId};
use crate::numerics::rng::{name_key, stream_rng, Stream};
use crate::numerics::{Real, Tensor};

pub const DEFAULT_TRIALS: usize = 50;

/// `v_b' = B_b(E_a(v_a))` in inference mode.
pub fn synthesize_fmri<T: Real>(
    state: &ModelState<T>,
    from: &SubjectId,
    to: &SubjectId,
    v_a: &Tensor<T>,
) -> Result<Tensor<T>> {
    if !state.subjects.contains_key(to) {
        return Err(Error::UnknownSubject(to.to_string()));
    }
    let e = state.embed(from, v_a, None)?;
    state.build(to, &e, None)
}

/// Pearson correlation.
pub fn pixcorr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::dim(format!(
            "pixcorr needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::numerical("correlation undefined for a zero-variance signal"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn flat_rows<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v.as_f64()).collect())
        .collect()
}

fn unit(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                r
            } else {
                r.into_iter().map(|v| v / norm).collect()
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sim[i][j] = cos(pred_i, target_j)` over flattened rows. Zero rows have
/// cosine 0 with everything.
pub fn cosine_matrix<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    if pred.rows() != target.rows() || pred.row_len() != target.row_len() {
        return Err(Error::dim(format!(
            "predictions {:?} against targets {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let p = unit(flat_rows(pred));
    let t = unit(flat_rows(target));
    Ok(p.iter().map(|pi| t.iter().map(|tj| dot(pi, tj)).collect()).collect())
}

/// Mean of `cos(pred_i, target_i)`.
pub fn mean_matched_cosine<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let sim = cosine_matrix(pred, target)?;
    Ok(sim.iter().enumerate().map(|(i, r)| r[i]).sum::<f64>() / sim.len().max(1) as f64)
}

/// For each row, `trials` distractors `j ≠ i` are drawn uniformly (with
/// replacement); a comparison is won when `cos(ê_i, e_i) > cos(ê_i, e_j)`,
/// with ties worth one half. Returns the fraction won.
pub fn two_way_from_similarity(sim: &[Vec<f64>], trials: usize, seed: u64, path: &[u64]) -> Result<f64> {
    let n = sim.len();
    if n < 2 {
        return Err(Error::param("two-way identification needs at least 2 samples"));
    }
    if trials == 0 {
        return Err(Error::param("trials must be positive"));
    }
    let mut rng = stream_rng(seed, Stream::Eval, path);
    let mut won = 0.0;
    for (i, row) in sim.iter().enumerate() {
        for _ in 0..trials {
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            won += match row[i].partial_cmp(&row[j]) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    Ok(won / (n * trials) as f64)
}

pub fn two_way_identification<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    two_way_from_similarity(&cosine_matrix(pred, target)?, trials, seed, &[])
}

/// Fraction of rows whose own target ranks within the `k` most similar
/// targets. Ties are resolved against the true target.
pub fn topk_from_similarity(sim: &[Vec<f64>], k: usize) -> Result<f64> {
    let n = sim.len();
    if k == 0 || k > n {
        return Err(Error::param(format!("top-k needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let hits = sim
        .iter()
        .enumerate()
        .filter(|(i, row)| row.iter().filter(|&&s| s >= row[*i]).count() <= k)
        .count();
    Ok(hits as f64 / n as f64)
}

pub fn topk_retrieval<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, k: usize) -> Result<f64> {
    topk_from_similarity(&cosine_matrix(pred, target)?, k)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pixcorr: f64,
    pub cosine_image: f64,
    pub cosine_text: f64,
    pub top1_retrieval: f64,
    pub two_way_id: f64,
}

impl Metrics {
    fn mean(all: &[&Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        let avg = |f: fn(&Metrics) -> f64| all.iter().map(|m| f(m)).sum::<f64>() / n;
        Metrics {
            pixcorr: avg(|m| m.pixcorr),
            cosine_image: avg(|m| m.cosine_image),
            cosine_text: avg(|m| m.cosine_text),
            top1_retrieval: avg(|m| m.top1_retrieval),
            two_way_id: avg(|m| m.two_way_id),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject: SubjectId,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_test: usize,
    pub seed: u64,
    pub trials: usize,
    pub fingerprint: String,
    pub subjects: Vec<SubjectMetrics>,
    pub mean: Metrics,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "split,subject,n_test,seed,pixcorr,cosine_image,cosine_text,top1_retrieval,two_way_id";

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per subject plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let rows = self
            .subjects
            .iter()
            .map(|s| (s.subject.as_str(), &s.metrics))
            .chain(std::iter::once(("mean", &self.mean)));
        for (name, m) in rows {
            writeln!(
                out,
                "{},{name},{},{},{},{},{},{},{}",
                self.split,
                self.n_test,
                self.seed,
                m.pixcorr,
                m.cosine_image,
                m.cosine_text,
                m.top1_retrieval,
                m.two_way_id
            )
            .expect("writing to a String cannot fail");
        }
        out
    }

    pub fn subject(&self, id: &SubjectId) -> Option<&Metrics> {
        self.subjects.iter().find(|s| &s.subject == id).map(|s| &s.metrics)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub split: Split,
    pub trials: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            trials: DEFAULT_TRIALS,
            seed: 0,
        }
    }
}

/// Inference-mode metrics of one subject's split: retrieval and two-way on
/// the image grid, matched cosine on both grids, and the mean per-sample
/// correlation of the embed-then-build reconstruction.
pub fn evaluate_subject<T: Real>(
    state: &ModelState<T>,
    cohort: &PooledCohort<T>,
    id: &SubjectId,
    config: &EvalConfig,
) -> Result<Metrics> {
    let batch = cohort.full_split(id, config.split)?;
    let e = state.embed(id, &batch.voxels, None)?;
    let (image, text) = state.translate(&e, None)?;
    let rebuilt = state.build(id, &e, None)?;
    let sim = cosine_matrix(&image, &batch.image)?;
    let mut pix = 0.0;
    for i in 0..batch.len() {
        let a: Vec<f64> = rebuilt.row(i).iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = batch.voxels.row(i).iter().map(|v| v.as_f64()).collect();
        pix += pixcorr(&a, &b).unwrap_or(0.0);
    }
    Ok(Metrics {
        pixcorr: pix / batch.len().max(1) as f64,
        cosine_image: (0..sim.len()).map(|i| sim[i][i]).sum::<f64>() / sim.len().max(1) as f64,
        cosine_text: mean_matched_cosine(&text, &batch.text)?,
        top1_retrieval: topk_from_similarity(&sim, 1)?,
        two_way_id: two_way_from_similarity(&sim, config.trials, config.seed, &[name_key(id.as_str())])?,
    })
}

/// Metrics for every subject of `cohort` that the model knows, and their mean.
pub fn evaluate<T: Real>(
    state: &ModelState<T>,
    cohort: &PooledCohort<T>,
    config: &EvalConfig,
    fingerprint: &str,
) -> Result<EvalReport> {
    let mut subjects = Vec::new();
    let mut n_test = 0;
    for s in &cohort.subjects {
        if !state.subjects.contains_key(&s.id) {
            continue;
        }
        n_test = match config.split {
            Split::Train => s.train_ids.len(),
            Split::Test => s.test_ids.len(),
        };
        subjects.push(SubjectMetrics {
            subject: s.id.clone(),
            metrics: evaluate_subject(state, cohort, &s.id, config)?,
        });
    }
    if subjects.is_empty() {
        return Err(Error::config("no subject of the data is known to the model"));
    }
    let mean = Metrics::mean(&subjects.iter().map(|s| &s.metrics).collect::<Vec<_>>());
    Ok(EvalReport {
        split: config.split.name().to_string(),
        n_test,
        seed: config.seed,
        trials: config.trials,
        fingerprint: fingerprint.to_string(),
        subjects,
        mean,
    })
}

/// Embedding agreement across subjects on shared stimuli: mean cosine of
/// `E_a(v_a)` against `E_b(v_b)` for the same stimulus and for different
/// stimuli, over all ordered subject pairs.
pub fn subject_invariance<T: Real>(state: &ModelState<T>, cohort: &PooledCohort<T>) -> Result<(f64, f64)> {
    let ids: Vec<&SubjectId> = cohort.subjects.iter().map(|s| &s.id).collect();
    let mut embeds = Vec::new();
    for id in &ids {
        let b = cohort.full_split(id, Split::Test)?;
        embeds.push((b.ids.clone(), state.embed(id, &b.voxels, None)?));
    }
    let (mut matched, mut n_matched, mut mismatched, mut n_mismatched) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..embeds.len() {
        for b in 0..embeds.len() {
            if a == b {
                continue;
            }
            let (ids_a, ea) = &embeds[a];
            let (ids_b, eb) = &embeds[b];
            // Align b's rows to a's stimulus order.
            let order: Vec<usize> = ids_a
                .iter()
                .map(|s| ids_b.iter().position(|t| t == s))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::config("test stimuli are not shared across subjects"))?;
            let sim = cosine_matrix(ea, &eb.select_rows(&order))?;
            for (i, row) in sim.iter().enumerate() {
                for (j, &s) in row.iter().enumerate() {
                    if i == j {
                        matched += s;
                        n_matched += 1;
                    } else {
                        mismatched += s;
                        n_mismatched += 1;
                    }
                }
            }
        }
    }
    if n_matched == 0 || n_mismatched == 0 {
        return Err(Error::config("subject invariance needs two subjects and two shared stimuli"));
    }
    Ok((matched / n_matched as f64, mismatched / n_mismatched as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![rows, cols], |_| StandardNormal.sample(&mut rng))
    }

    /// Textbook two-pass formula written out separately.
    fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx: f64 = x.iter().sum::<f64>() / n;
        let my: f64 = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
        cov / (sx * sy)
    }

    #[test]
    fn pixcorr_cases() {
        let x = [1.0, 2.0, 4.0, 8.0];
        assert!((pixcorr(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pixcorr(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pixcorr(&x, &[3.0; 4]), Err(Error::Numerical(_))));
        assert!(pixcorr(&[1.0], &[1.0]).is_err());
        let a = random(1, 500, 1);
        let b = random(1, 500, 2);
        let got = pixcorr(a.data(), b.data()).unwrap();
        assert!((got - pearson_oracle(a.data(), b.data())).abs() < 1e-10);
    }

    #[test]
    fn identical_embeddings_are_perfect() {
        let e = random(20, 8, 3);
        assert_eq!(two_way_identification(&e, &e, 50, 0).unwrap(), 1.0);
        assert_eq!(topk_retrieval(&e, &e, 1).unwrap(), 1.0);
    }

    #[test]
    fn chance_levels() {
        let pred = random(64, 16, 4);
        let target = random(64, 16, 5);
        let two_way = two_way_identification(&pred, &target, 50, 9).unwrap();
        assert!((two_way - 0.5).abs() < 0.05, "{two_way}");
        let mut total = 0.0;
        for s in 0..40 {
            total += topk_retrieval(&random(64, 16, 100 + s), &target, 1).unwrap();
        }
        let mean = total / 40.0;
        assert!(mean < 3.0 / 64.0, "{mean}");
    }

    #[test]
    fn two_samples_reduce_to_one_pair() {
        let sim = vec![vec![0.9, 0.1], vec![0.8, 0.2]];
        // Row 0 wins its only comparison, row 1 loses it.
        assert_eq!(two_way_from_similarity(&sim, 7, 0, &[]).unwrap(), 0.5);
        let tie = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert_eq!(two_way_from_similarity(&tie, 3, 0, &[]).unwrap(), 0.5);
        assert!(two_way_from_similarity(&[vec![1.0]], 3, 0, &[]).is_err());
    }

    #[test]
    fn topk_bounds() {
        let e = random(5, 3, 6);
        assert!(topk_retrieval(&e, &e, 0).is_err());
        assert!(topk_retrieval(&e, &e, 6).is_err());
        assert_eq!(topk_retrieval(&random(5, 3, 7), &e, 5).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn topk_is_monotone(seed in any::<u64>(), n in 2usize..12) {
            let pred = random(n, 4, seed);
            let target = random(n, 4, seed ^ 0xabcdef);
            let mut prev = 0.0;
            for k in 1..=n {
                let r = topk_retrieval(&pred, &target, k).unwrap();
                prop_assert!(r >= prev && (0.0..=1.0).contains(&r));
                prev = r;
            }
            prop_assert_eq!(prev, 1.0);
        }
    }

    #[test]
    fn report_formats() {
        let m = Metrics { pixcorr: 0.5, cosine_image: 0.25, cosine_text: -0.125, top1_retrieval: 0.0625, two_way_id: 0.75 };
        let r = EvalReport {
            split: "test".into(),
            n_test: 64,
            seed: 3,
            trials: 50,
            fingerprint: "abc".into(),
            subjects: vec![SubjectMetrics { subject: "subj01".into(), metrics: m.clone() }],
            mean: m,
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], EvalReport::CSV_HEADER);
        assert_eq!(lines[1], "test,subj01,64,3,0.5,0.25,-0.125,0.0625,0.75");
        assert_eq!(lines[2], "test,mean,64,3,0.5,0.25,-0.125,0.0625,0.75");
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
