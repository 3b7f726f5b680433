//! Training objectives.
//!
//! Reductions: the contrastive term is a plain double sum over the batch; the
//! squared-error terms (embedding MSE, reconstruction, cycle) average over
//! every element.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Real, Tensor};

pub const DEFAULT_TAU: f64 = 0.125;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub image: f64,
    pub text: f64,
    pub rec: f64,
    pub cyc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            image: 1.0,
            text: 1e4,
            rec: 1.0,
            cyc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if w.is_nan() || w < 0.0 || w.is_infinite() {
                return Err(Error::config(format!(
                    "loss weight `{name}` must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("image", self.image),
            ("text", self.text),
            ("rec", self.rec),
            ("cyc", self.cyc),
        ]
    }
}

/// Scalar loss nodes of one step; absent terms were not computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub image: Option<NodeId>,
    pub text: Option<NodeId>,
    pub rec: Option<NodeId>,
    pub cyc: Option<NodeId>,
}

/// Per-term values of one step. `total` is the weighted sum of the present
/// terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub image: Option<f64>,
    pub text: Option<f64>,
    pub rec: Option<f64>,
    pub cyc: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,image,text,rec,cyc,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            opt_cell(self.image),
            opt_cell(self.text),
            opt_cell(self.rec),
            opt_cell(self.cyc),
            self.total
        )
    }

    /// Recomputes the weighted total from the components.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        [
            (self.image, w.image),
            (self.text, w.text),
            (self.rec, w.rec),
            (self.cyc, w.cyc),
        ]
        .iter()
        .map(|(v, w)| v.map_or(0.0, |v| v * w))
        .sum()
    }
}

pub(crate) fn opt_cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Unit-norm copy of each row of a 2-D (or flattened-to-2-D) tensor.
pub fn normalize_rows<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = t.clone().reshape(vec![t.rows(), t.row_len()])?;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm == T::zero() {
            return Err(Error::numerical(format!("cannot normalize row {i}: zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// SoftCLIP loss on given rows, without any normalization.
pub fn soft_clip_loss<T: Real>(p: &Tensor<T>, t: &Tensor<T>, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let pn = g.constant(p.clone());
    let l = g.soft_clip(pn, t, tau)?;
    Ok(g.scalar(l).as_f64())
}

pub fn mse_loss<T: Real>(p: &Tensor<T>, t: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(p.clone());
    let b = g.constant(t.clone());
    let l = g.mse(a, b)?;
    Ok(g.scalar(l).as_f64())
}

/// Reconstruction loss `mean((v̂ − v)²)`.
pub fn recon_loss<T: Real>(rebuilt: &Tensor<T>, v: &Tensor<T>) -> Result<f64> {
    mse_loss(rebuilt, v)
}

/// Cycle loss `mean((e_b − e_a)²)`.
pub fn cycle_loss<T: Real>(e_a: &Tensor<T>, e_b: &Tensor<T>) -> Result<f64> {
    mse_loss(e_b, e_a)
}

#[derive(Clone, Copy, Debug)]
pub struct ModalityLoss {
    pub tau: f64,
    /// L2-normalize flattened rows before the contrastive term.
    pub normalize: bool,
    pub with_mse: bool,
}

impl ModalityLoss {
    /// `SoftCLIP(norm(flat(ê)), norm(flat(e))) + MSE(ê, e)` for a prediction
    /// node `[n, tokens, channels]` against constant targets of equal shape.
    pub fn node<T: Real>(&self, g: &mut Graph<T>, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let shape = g.value(pred).shape().to_vec();
        if shape != target.shape() {
            return Err(Error::dim(format!(
                "prediction {shape:?} against target {:?}",
                target.shape()
            )));
        }
        let n = shape.first().copied().unwrap_or(1);
        let d = target.row_len();
        let flat = g.reshape(pred, &[n, d])?;
        let flat_target = target.clone().reshape(vec![n, d])?;
        let clip = if self.normalize {
            let p = g.l2_normalize_rows(flat)?;
            g.soft_clip(p, &normalize_rows(&flat_target)?, self.tau)?
        } else {
            g.soft_clip(flat, &flat_target, self.tau)?
        };
        if !self.with_mse {
            return Ok(clip);
        }
        let t = g.constant(target.clone());
        let mse = g.mse(pred, t)?;
        g.add(clip, mse)
    }

    pub fn eval<T: Real>(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let l = self.node(&mut g, p, target)?;
        Ok(g.scalar(l).as_f64())
    }
}

/// Weighted total over the present terms. Fails naming the first
/// non-finite component.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    terms: &LossTerms,
    weights: &LossWeights,
    step: u64,
) -> Result<(NodeId, LossReport)> {
    weights.validate()?;
    let mut report = LossReport {
        step,
        ..LossReport::default()
    };
    let mut weighted = Vec::new();
    for (name, node, w, slot) in [
        ("image", terms.image, weights.image, &mut report.image),
        ("text", terms.text, weights.text, &mut report.text),
        ("rec", terms.rec, weights.rec, &mut report.rec),
        ("cyc", terms.cyc, weights.cyc, &mut report.cyc),
    ] {
        let Some(node) = node else { continue };
        let v = g.scalar(node).as_f64();
        if !v.is_finite() {
            return Err(Error::numerical(format!(
                "loss term `{name}` is {v} at step {step}"
            )));
        }
        *slot = Some(v);
        weighted.push((node, w));
    }
    let total = g.weighted_sum(&weighted)?;
    report.total = g.scalar(total).as_f64();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct evaluation of the double sum, no log-sum-exp tricks.
    fn soft_clip_oracle(p: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let n = p.len();
        let mut loss = 0.0;
        for i in 0..n {
            let zt: f64 = (0..n).map(|m| (dot(&t[i], &t[m]) / tau).exp()).sum();
            let zp: f64 = (0..n).map(|m| (dot(&p[i], &t[m]) / tau).exp()).sum();
            for j in 0..n {
                let q = (dot(&t[i], &t[j]) / tau).exp() / zt;
                let s = (dot(&p[i], &t[j]) / tau).exp() / zp;
                loss -= q * s.ln();
            }
        }
        loss
    }

    #[test]
    fn soft_clip_orthonormal_pair() {
        let e = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let got = soft_clip_loss(&e, &e, 1.0).unwrap();
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let want = soft_clip_oracle(&rows, &rows, 1.0);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 1.1644).abs() < 1e-4);
    }

    #[test]
    fn soft_clip_matches_oracle_on_random_rows() {
        let p: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..3).map(|j| ((i * 3 + j) as f64 * 0.77).sin()).collect())
            .collect();
        let tt: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..3).map(|j| ((i * 5 + j) as f64 * 0.31).cos()).collect())
            .collect();
        let got = soft_clip_loss(
            &Tensor::from_rows(&p).unwrap(),
            &Tensor::from_rows(&tt).unwrap(),
            0.5,
        )
        .unwrap();
        assert!((got - soft_clip_oracle(&p, &tt, 0.5)).abs() < 1e-10);
    }

    #[test]
    fn mse_examples() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&a.map(|x| x + 1.0), &a).unwrap(), 1.0);
        assert!(mse_loss(&a, &t(&[4], &[0.0; 4])).is_err());
    }

    #[test]
    fn cycle_offset_gives_square() {
        let a = t(&[2, 3], &[0.1, 0.2, 0.3, -1.0, 0.0, 2.0]);
        let got = cycle_loss(&a, &a.map(|x| x + 0.5)).unwrap();
        assert!((got - 0.25).abs() < 1e-15);
    }

    #[test]
    fn modality_loss_is_sum_of_parts() {
        let pred = Tensor::from_fn(vec![3, 2, 2], |i| (i as f64 * 0.9).sin());
        let target = Tensor::from_fn(vec![3, 2, 2], |i| (i as f64 * 0.4).cos());
        let ml = ModalityLoss {
            tau: 0.125,
            normalize: true,
            with_mse: true,
        };
        let whole = ml.eval(&pred, &target).unwrap();
        let p = normalize_rows(&pred).unwrap();
        let q = normalize_rows(&target).unwrap();
        let parts = soft_clip_loss(&p, &q, 0.125).unwrap() + mse_loss(&pred, &target).unwrap();
        assert!((whole - parts).abs() < 1e-12);

        let single = Tensor::from_fn(vec![1, 2, 2], |i| i as f64 + 1.0);
        assert_eq!(ml.eval(&single, &single).unwrap(), 0.0);
    }

    #[test]
    fn zero_norm_row_is_rejected() {
        let pred = t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]);
        let ml = ModalityLoss {
            tau: 0.125,
            normalize: true,
            with_mse: false,
        };
        assert!(ml.eval(&pred, &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn total_uses_default_weights() {
        let mut g = Graph::<f64>::new();
        let [a, b, c, d] = [0.5, 0.002, 1.5, 0.25].map(|v| g.constant(Tensor::scalar(v)));
        let terms = LossTerms {
            image: Some(a),
            text: Some(b),
            rec: Some(c),
            cyc: Some(d),
        };
        let (node, report) = total_loss(&mut g, &terms, &LossWeights::default(), 7).unwrap();
        let want = 0.5 + 1e4 * 0.002 + 1.5 + 0.25;
        assert!((g.scalar(node) - want).abs() < 1e-12);
        assert!((report.weighted_total(&LossWeights::default()) - report.total).abs() < 1e-12);
        assert_eq!(report.csv_row(), format!("7,0.5,0.002,1.5,0.25,{}", report.total));
    }

    #[test]
    fn total_of_zero_terms_is_zero() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::scalar(0.0));
        let terms = LossTerms {
            image: Some(z),
            text: Some(z),
            rec: Some(z),
            cyc: Some(z),
        };
        let (_, r) = total_loss(&mut g, &terms, &LossWeights::default(), 0).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn zero_weight_gates_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", &t(&[2], &[1.0, 2.0]));
        let y = g.param("y", &t(&[2], &[3.0, -1.0]));
        let zx = g.constant(Tensor::zeros(vec![2]));
        let lx = g.mse(x, zx).unwrap();
        let ly = g.mse(y, zx).unwrap();
        let terms = LossTerms {
            image: Some(lx),
            rec: Some(ly),
            ..LossTerms::default()
        };
        let w = LossWeights {
            rec: 0.0,
            ..LossWeights::default()
        };
        let (total, _) = total_loss(&mut g, &terms, &w, 0).unwrap();
        let grads = g.backward(total).unwrap();
        assert!(grads.param("y").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.param("x").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn nan_term_is_named() {
        let mut g = Graph::<f64>::new();
        let ok = g.constant(Tensor::scalar(1.0));
        // constants skip the finiteness check that op outputs get
        let bad = g.constant(Tensor::scalar(f64::NAN));
        let terms = LossTerms {
            image: Some(ok),
            cyc: Some(bad),
            ..LossTerms::default()
        };
        let err = total_loss(&mut g, &terms, &LossWeights::default(), 3).unwrap_err();
        assert!(err.to_string().contains("cyc"), "{err}");
    }
}
