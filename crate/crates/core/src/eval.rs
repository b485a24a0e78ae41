//! Detection metrics: IoU, per-class AP with greedy one-to-one matching and
//! all-points interpolation, and mAP.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, Category, Manifest};
use crate::error::{Error, Result};

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub bbox: BBox,
    pub category: Category,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !(self.bbox[2] > 0.0 && self.bbox[3] > 0.0) {
            return Err(Error::invalid(format!(
                "detection on image {} has non-positive size",
                self.image_id
            )));
        }
        if !self.score.is_finite() {
            return Err(Error::invalid(format!(
                "detection on image {} has non-finite score",
                self.image_id
            )));
        }
        Ok(())
    }
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dets: Vec<Detection> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    for d in &dets {
        d.validate()?;
    }
    Ok(dets)
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(dets).expect("detections serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let iy = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// A detection as seen by the matcher: image plus box and score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

/// Ground truth boxes of one class, keyed by image.
pub type GroundTruths = BTreeMap<u64, Vec<BBox>>;

/// True-positive flags in ranked order (descending score, stable on ties).
pub fn match_detections(dets: &[ScoredBox], gts: &GroundTruths, threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken: BTreeMap<u64, Vec<bool>> = gts
        .iter()
        .map(|(&k, v)| (k, vec![false; v.len()]))
        .collect();
    order
        .into_iter()
        .map(|i| {
            let det = &dets[i];
            let Some(boxes) = gts.get(&det.image_id) else {
                return false;
            };
            let used = taken.get_mut(&det.image_id).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in boxes.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let o = iou(&det.bbox, gt);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-points interpolated area under the PR curve given ranked TP flags.
pub fn ap_from_flags(flags: &[bool], num_gts: usize) -> f64 {
    if num_gts == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / num_gts as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
    }
    ap
}

/// AP for one class; `None` when the class has no ground truth.
pub fn average_precision(dets: &[ScoredBox], gts: &GroundTruths, threshold: f64) -> Option<f64> {
    let n: usize = gts.values().map(Vec::len).sum();
    if n == 0 {
        return None;
    }
    Some(ap_from_flags(&match_detections(dets, gts, threshold), n))
}

pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid("mAP undefined: no class has ground truth"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassCounts {
    pub detections: usize,
    pub ground_truths: usize,
    pub true_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    #[serde(rename = "per_class_AP")]
    pub per_class_ap: BTreeMap<Category, Option<f64>>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub counts: BTreeMap<Category, ClassCounts>,
    /// Classes that have detections but no ground truth.
    pub undefined: Vec<Category>,
    /// Mean of mAP over IoU 0.50:0.05:0.95, when requested.
    #[serde(rename = "mAP_50_95", skip_serializing_if = "Option::is_none")]
    pub map_sweep: Option<f64>,
}

fn split_by_class(
    manifest: &Manifest,
    dets: &[Detection],
) -> BTreeMap<Category, (Vec<ScoredBox>, GroundTruths)> {
    let mut by_class: BTreeMap<Category, (Vec<ScoredBox>, GroundTruths)> = Category::ALL
        .iter()
        .map(|&c| (c, Default::default()))
        .collect();
    for a in &manifest.annotations {
        by_class
            .get_mut(&a.category)
            .expect("all classes")
            .1
            .entry(a.image_id)
            .or_default()
            .push(a.bbox);
    }
    for d in dets {
        by_class
            .get_mut(&d.category)
            .expect("all classes")
            .0
            .push(ScoredBox {
                image_id: d.image_id,
                bbox: d.bbox,
                score: d.score,
            });
    }
    by_class
}

fn map_at(
    classes: &BTreeMap<Category, (Vec<ScoredBox>, GroundTruths)>,
    threshold: f64,
) -> Result<f64> {
    let aps: Vec<Option<f64>> = classes
        .values()
        .map(|(d, g)| average_precision(d, g, threshold))
        .collect();
    mean_ap(&aps)
}

pub fn evaluate(
    manifest: &Manifest,
    dets: &[Detection],
    threshold: f64,
    sweep: bool,
) -> Result<EvalReport> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "IoU threshold must be in (0, 1], got {threshold}"
        )));
    }
    for d in dets {
        d.validate()?;
    }
    let classes = split_by_class(manifest, dets);
    let mut per_class_ap = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut undefined = Vec::new();
    for (&cat, (d, g)) in &classes {
        let n_gt: usize = g.values().map(Vec::len).sum();
        let flags = match_detections(d, g, threshold);
        let ap = average_precision(d, g, threshold);
        if ap.is_none() && !d.is_empty() {
            undefined.push(cat);
        }
        per_class_ap.insert(cat, ap);
        counts.insert(
            cat,
            ClassCounts {
                detections: d.len(),
                ground_truths: n_gt,
                true_positives: flags.iter().filter(|&&f| f).count(),
            },
        );
    }
    let map = mean_ap(&per_class_ap.values().copied().collect::<Vec<_>>())?;
    let map_sweep = if sweep {
        let mut acc = 0.0;
        for k in 0..10 {
            acc += map_at(&classes, 0.5 + 0.05 * f64::from(k))?;
        }
        Some(acc / 10.0)
    } else {
        None
    };
    Ok(EvalReport {
        iou_threshold: threshold,
        per_class_ap,
        map,
        counts,
        undefined,
        map_sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sb(image_id: u64, bbox: BBox, score: f64) -> ScoredBox {
        ScoredBox {
            image_id,
            bbox,
            score,
        }
    }

    #[test]
    fn iou_examples() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[5.0, 5.0, 1.0, 1.0]), 0.0);
        assert!((iou(&a, &[1.0, 1.0, 2.0, 2.0]) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn ap_hand_cases() {
        let gt: GroundTruths = [(0, vec![[0.0, 0.0, 10.0, 10.0]])].into();
        assert_eq!(
            average_precision(&[sb(0, [0.0, 0.0, 10.0, 10.0], 0.7)], &gt, 0.5),
            Some(1.0)
        );
        let dets = [
            sb(0, [50.0, 50.0, 10.0, 10.0], 0.9),
            sb(0, [0.0, 0.0, 10.0, 10.0], 0.8),
        ];
        assert_eq!(average_precision(&dets, &gt, 0.5), Some(0.5));
        assert_eq!(average_precision(&[], &gt, 0.5), Some(0.0));
        assert_eq!(average_precision(&dets, &GroundTruths::new(), 0.5), None);
    }

    #[test]
    fn mean_ap_examples() {
        assert_eq!(mean_ap(&[Some(1.0), Some(0.0), Some(0.5)]).unwrap(), 0.5);
        assert_eq!(mean_ap(&[Some(0.3), None]).unwrap(), 0.3);
        assert!(mean_ap(&[None, None]).is_err());
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gt: GroundTruths = [(0, vec![[0.0, 0.0, 10.0, 10.0]])].into();
        let dets = [
            sb(0, [0.0, 0.0, 10.0, 10.0], 0.9),
            sb(0, [0.0, 0.0, 10.0, 10.0], 0.8),
        ];
        assert_eq!(match_detections(&dets, &gt, 0.5), vec![true, false]);
    }

    #[test]
    fn evaluate_reports_undefined_classes() {
        use crate::dataset::{Annotation, ImageRecord};
        let m = Manifest {
            images: vec![ImageRecord {
                id: 0,
                file: "a.png".into(),
                width: 20,
                height: 20,
                depth_file: None,
                depth_scale: 1.0,
                split: None,
                haze_params: None,
            }],
            annotations: vec![Annotation {
                id: 0,
                image_id: 0,
                bbox: [0.0, 0.0, 10.0, 10.0],
                category: Category::Car,
            }],
            categories: Category::ALL.to_vec(),
        };
        let dets = vec![
            Detection {
                image_id: 0,
                bbox: [0.0, 0.0, 10.0, 10.0],
                category: Category::Car,
                score: 0.9,
            },
            Detection {
                image_id: 0,
                bbox: [0.0, 0.0, 5.0, 5.0],
                category: Category::Bus,
                score: 0.4,
            },
        ];
        let r = evaluate(&m, &dets, 0.5, true).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.undefined, vec![Category::Bus]);
        assert_eq!(r.map_sweep, Some(1.0));
    }
}
