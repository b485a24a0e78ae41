//! Depth and detection objectives.
//!
//! The depth term is a scale-invariant log error against a refurbished label
//! `α·y* + (1−α)·y`; the label blend is held constant during backprop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefurbishConfig {
    /// Confidence in the pseudo-label.
    pub alpha: f64,
    /// Multiplier on the depth term in the total objective.
    pub loss_weight: f64,
}

impl Default for RefurbishConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            loss_weight: 0.2,
        }
    }
}

impl RefurbishConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        if !(self.loss_weight >= 0.0) {
            return Err(Error::invalid(format!(
                "loss_weight must be >= 0, got {}",
                self.loss_weight
            )));
        }
        Ok(())
    }
}

/// `(1/n)·Σd² − (1/n²)·(Σd)²`, evaluated in the algebraically equal centred
/// form `(1/n)·Σ(d − mean)²` so it stays non-negative under rounding.
pub fn scale_invariant_error(deltas: &[f64]) -> f64 {
    if deltas.is_empty() {
        return 0.0;
    }
    let n = deltas.len() as f64;
    let mean = pairwise_sum(deltas) / n;
    let sq: Vec<f64> = deltas.iter().map(|d| (d - mean) * (d - mean)).collect();
    pairwise_sum(&sq) / n
}

/// Log residuals `log(y) − log(α·y* + (1−α)·y)`.
pub fn refurbished_residuals(pred: &Tensor, pseudo: &Tensor, alpha: f64) -> Result<Vec<f64>> {
    pred.same_shape(pseudo, "sir_loss pred vs pseudo")?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!(
            "alpha must be in [0,1], got {alpha}"
        )));
    }
    for (name, t) in [("prediction", pred), ("pseudo-label", pseudo)] {
        if let Some(i) = t.data().iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!(
                "{name} depth {} at flat index {i} is not strictly positive",
                t.data()[i]
            )));
        }
    }
    Ok(pred
        .data()
        .iter()
        .zip(pseudo.data())
        .map(|(&y, &ys)| y.ln() - (alpha * ys + (1.0 - alpha) * y).ln())
        .collect())
}

/// Returns the loss and `∂L/∂y` with the refurbished label detached.
pub fn sir_loss(pred: &Tensor, pseudo: &Tensor, alpha: f64) -> Result<(f64, Tensor)> {
    let deltas = refurbished_residuals(pred, pseudo, alpha)?;
    let loss = scale_invariant_error(&deltas);
    let n = deltas.len() as f64;
    let mean = pairwise_sum(&deltas) / n;
    let grad = deltas
        .iter()
        .zip(pred.data())
        .map(|(&d, &y)| 2.0 / n * (d - mean) / y)
        .collect();
    Ok((loss, Tensor::from_vec(pred.shape(), grad)?))
}

pub fn total_loss(detection: f64, depth: f64, loss_weight: f64) -> f64 {
    detection + loss_weight * depth
}

/// Raw outputs of the toy head at one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `[1, H, W]` logits.
    pub objectness: Tensor,
    /// `[num_classes, H, W]` logits.
    pub class_logits: Tensor,
    /// `[4, H, W]` encoded box offsets.
    pub boxes: Tensor,
}

impl HeadOutput {
    pub fn zeros_like(&self) -> Self {
        Self {
            objectness: Tensor::zeros(self.objectness.shape()),
            class_logits: Tensor::zeros(self.class_logits.shape()),
            boxes: Tensor::zeros(self.boxes.shape()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub category: usize,
    /// `(dx, dy, log w/stride, log h/stride)`
    pub offsets: [f64; 4],
}

/// Positive cells of one level; `cells` is row-major `H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<Option<CellTarget>>,
}

impl LevelTargets {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![None; height * width],
        }
    }

    pub fn positives(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

#[derive(Clone, Debug)]
pub struct DetectionLoss {
    pub total: f64,
    pub objectness: f64,
    pub classification: f64,
    pub box_l1: f64,
    pub num_positive: usize,
    pub grads: Vec<HeadOutput>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `BCE(sigmoid(x), t)` and its derivative in `x`.
fn bce_with_logits(x: f64, t: f64) -> (f64, f64) {
    let loss = x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    (loss, sigmoid(x) - t)
}

/// Objectness BCE over every cell, class BCE and box L1 on positive cells;
/// all three terms are summed and divided by `max(#positives, 1)`.
pub fn detection_loss(outputs: &[HeadOutput], targets: &[LevelTargets]) -> Result<DetectionLoss> {
    if outputs.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} head outputs but {} target levels",
            outputs.len(),
            targets.len()
        )));
    }
    let num_positive: usize = targets.iter().map(LevelTargets::positives).sum();
    let norm = num_positive.max(1) as f64;
    let mut obj_terms = Vec::new();
    let mut cls_terms = Vec::new();
    let mut box_terms = Vec::new();
    let mut grads = Vec::with_capacity(outputs.len());
    for (out, tgt) in outputs.iter().zip(targets) {
        let (one, h, w) = out.objectness.dims3()?;
        let (nc, ch, cw) = out.class_logits.dims3()?;
        let (four, bh, bw) = out.boxes.dims3()?;
        if one != 1
            || four != 4
            || (h, w) != (ch, cw)
            || (h, w) != (bh, bw)
            || (h, w) != (tgt.height, tgt.width)
        {
            return Err(Error::shape(format!(
                "head layout mismatch: obj {:?} cls {:?} box {:?} targets {}x{}",
                out.objectness.shape(),
                out.class_logits.shape(),
                out.boxes.shape(),
                tgt.height,
                tgt.width
            )));
        }
        let plane = h * w;
        let mut g = out.zeros_like();
        for (p, cell) in tgt.cells.iter().enumerate() {
            let t = if cell.is_some() { 1.0 } else { 0.0 };
            let (l, d) = bce_with_logits(out.objectness.data()[p], t);
            obj_terms.push(l);
            g.objectness.data_mut()[p] = d / norm;
            if let Some(cell) = cell {
                if cell.category >= nc {
                    return Err(Error::invalid(format!(
                        "target category {} with only {nc} class logits",
                        cell.category
                    )));
                }
                for k in 0..nc {
                    let idx = k * plane + p;
                    let tk = if k == cell.category { 1.0 } else { 0.0 };
                    let (l, d) = bce_with_logits(out.class_logits.data()[idx], tk);
                    cls_terms.push(l);
                    g.class_logits.data_mut()[idx] = d / norm;
                }
                for k in 0..4 {
                    let idx = k * plane + p;
                    let r = out.boxes.data()[idx] - cell.offsets[k];
                    box_terms.push(r.abs());
                    g.boxes.data_mut()[idx] = r.signum() * f64::from(r != 0.0) / norm;
                }
            }
        }
        grads.push(g);
    }
    let objectness = pairwise_sum(&obj_terms) / norm;
    let classification = pairwise_sum(&cls_terms) / norm;
    let box_l1 = pairwise_sum(&box_terms) / norm;
    Ok(DetectionLoss {
        total: objectness + classification + box_l1,
        objectness,
        classification,
        box_l1,
        num_positive,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, LN_2};

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    /// Direct evaluation of the two-sum form, kept apart from the library path.
    fn oracle(y: &[f64], ys: &[f64], alpha: f64) -> f64 {
        let d: Vec<f64> = y
            .iter()
            .zip(ys)
            .map(|(a, b)| a.ln() - (alpha * b + (1.0 - alpha) * a).ln())
            .collect();
        let n = d.len() as f64;
        let s: f64 = d.iter().sum();
        let s2: f64 = d.iter().map(|v| v * v).sum();
        s2 / n - s * s / (n * n)
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let y = t(&[1.0, 5.0, 30.0]);
        let (l, g) = sir_loss(&y, &y, 0.7).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn uniform_ratio_has_zero_loss() {
        let deltas = refurbished_residuals(&t(&[1.0, 2.0]), &t(&[2.0, 4.0]), 0.7).unwrap();
        assert!((deltas[0] + 0.530628).abs() < 1e-6);
        assert!((deltas[1] + 0.530628).abs() < 1e-6);
        let (l, _) = sir_loss(&t(&[1.0, 2.0]), &t(&[2.0, 4.0]), 0.7).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn hand_case_matches_oracle() {
        let want = oracle(&[1.0, 1.0], &[1.0, E], 0.7);
        assert!((want - 0.155918).abs() < 1e-6);
        let (l, _) = sir_loss(&t(&[1.0, 1.0]), &t(&[1.0, E]), 0.7).unwrap();
        assert!((l - want).abs() < 1e-12);
        let d = refurbished_residuals(&t(&[1.0, 1.0]), &t(&[1.0, E]), 0.7).unwrap();
        assert_eq!(d[0], 0.0);
        assert!((d[1] + 0.789728).abs() < 1e-6);
    }

    #[test]
    fn rejects_nonpositive_and_mismatched() {
        assert!(sir_loss(&t(&[1.0, 0.0]), &t(&[1.0, 1.0]), 0.7).is_err());
        assert!(sir_loss(&t(&[1.0]), &t(&[-1.0]), 0.7).is_err());
        assert!(matches!(
            sir_loss(&t(&[1.0, 2.0]), &t(&[1.0]), 0.7),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.3, 7.0, 0.0), 1.3);
        assert!((total_loss(1.0, 0.5, 0.2) - 1.1).abs() < 1e-15);
        assert_eq!(RefurbishConfig::default().loss_weight, 0.2);
        assert_eq!(RefurbishConfig::default().alpha, 0.7);
    }

    fn head(h: usize, w: usize, nc: usize, fill: f64) -> HeadOutput {
        HeadOutput {
            objectness: Tensor::full(&[1, h, w], fill),
            class_logits: Tensor::full(&[nc, h, w], fill),
            boxes: Tensor::zeros(&[4, h, w]),
        }
    }

    #[test]
    fn uniform_logits_give_log2_per_cell() {
        let out = head(4, 4, 3, 0.0);
        let mut tgt = LevelTargets::empty(4, 4);
        tgt.cells[5] = Some(CellTarget {
            category: 1,
            offsets: [0.0; 4],
        });
        let l = detection_loss(&[out], &[tgt]).unwrap();
        assert!((l.objectness - 16.0 * LN_2).abs() < 1e-12);
        assert!((l.classification - 3.0 * LN_2).abs() < 1e-12);
        assert_eq!(l.box_l1, 0.0);
    }

    #[test]
    fn saturated_matching_predictions_have_tiny_loss() {
        let mut out = head(2, 2, 3, -40.0);
        let mut tgt = LevelTargets::empty(2, 2);
        let offsets = [0.25, 0.75, 0.1, -0.3];
        tgt.cells[3] = Some(CellTarget {
            category: 2,
            offsets,
        });
        out.objectness.data_mut()[3] = 40.0;
        out.class_logits.data_mut()[2 * 4 + 3] = 40.0;
        for k in 0..4 {
            out.boxes.data_mut()[k * 4 + 3] = offsets[k];
        }
        let l = detection_loss(&[out], &[tgt]).unwrap();
        assert!(l.total < 1e-6 && l.total >= 0.0, "{}", l.total);
    }

    #[test]
    fn no_positives_leaves_classification_only() {
        let l = detection_loss(&[head(2, 3, 3, 0.3)], &[LevelTargets::empty(2, 3)]).unwrap();
        assert_eq!(l.num_positive, 0);
        assert_eq!(l.classification, 0.0);
        assert_eq!(l.box_l1, 0.0);
        assert!(l.objectness > 0.0);
    }

    #[test]
    fn layout_mismatch_rejected() {
        assert!(detection_loss(&[head(2, 3, 3, 0.0)], &[LevelTargets::empty(3, 3)]).is_err());
    }
}
