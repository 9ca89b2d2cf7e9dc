//! Grounding accuracy (Acc@t, mAcc) and COCO-style detection AP.

use crate::geom::BoundingBox;
use crate::refdb::QueryAnnotation;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

/// IoU thresholds averaged by mAcc: 0.50, 0.55, ..., 0.90.
pub const MACC_THRESHOLDS: [f64; 9] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90];

/// IoU thresholds averaged by AP: 0.50, 0.55, ..., 0.95.
pub const AP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Intersection over union of two half-open boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// How an IoU is compared against a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdRule {
    /// `iou > t`
    #[default]
    Strict,
    /// `iou >= t`
    Inclusive,
}

impl ThresholdRule {
    pub fn passes(self, iou: f64, t: f64) -> bool {
        match self {
            ThresholdRule::Strict => iou > t,
            ThresholdRule::Inclusive => iou >= t,
        }
    }
}

/// Fraction of IoU values above `t`. Missing predictions should be passed as 0.
pub fn acc_at_ious(ious: &[f64], t: f64, rule: ThresholdRule) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| rule.passes(v, t)).count() as f64 / ious.len() as f64
}

/// Acc@t over `(prediction, ground truth)` pairs; a `None` prediction counts
/// as IoU 0.
pub fn acc_at(pairs: &[(Option<BoundingBox>, BoundingBox)], t: f64, rule: ThresholdRule) -> f64 {
    acc_at_ious(&pair_ious(pairs), t, rule)
}

fn pair_ious(pairs: &[(Option<BoundingBox>, BoundingBox)]) -> Vec<f64> {
    pairs
        .iter()
        .map(|(p, g)| p.as_ref().map_or(0.0, |p| iou(p, g)))
        .collect()
}

pub fn macc(pairs: &[(Option<BoundingBox>, BoundingBox)], rule: ThresholdRule) -> f64 {
    let ious = pair_ious(pairs);
    MACC_THRESHOLDS.iter().map(|&t| acc_at_ious(&ious, t, rule)).sum::<f64>() / MACC_THRESHOLDS.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionOutcome {
    pub image: String,
    pub expression_id: u32,
    pub iou: f64,
    pub correct_at_50: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    /// Keyed by threshold formatted with two decimals (`"0.50"`).
    pub acc: BTreeMap<String, f64>,
    pub macc: f64,
    pub rule: ThresholdRule,
    pub per_expression: Vec<ExpressionOutcome>,
}

impl GroundingReport {
    pub fn acc_at(&self, t: f64) -> Option<f64> {
        self.acc.get(&format!("{t:.2}")).copied()
    }

    /// Plain-text table with the Acc0.5 / Acc0.75 / Acc0.9 / mAcc columns, in percent.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        format!(
            "{:>8} {:>8} {:>8} {:>8}\n{:>8} {:>8} {:>8} {:>8}\n",
            "Acc0.5",
            "Acc0.75",
            "Acc0.9",
            "mAcc",
            pct(self.acc_at(0.5)),
            pct(self.acc_at(0.75)),
            pct(self.acc_at(0.9)),
            pct(Some(self.macc)),
        )
    }
}

/// Predicted box for one expression of one query image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingPrediction<'a> {
    pub image: &'a str,
    pub expression_id: u32,
    pub bbox: BoundingBox,
}

/// Score predictions against every annotation. Annotations without a
/// prediction count as IoU 0.
pub fn evaluate_grounding(
    predictions: &[GroundingPrediction<'_>],
    annotations: &[QueryAnnotation],
    rule: ThresholdRule,
) -> GroundingReport {
    let lookup: HashMap<(&str, u32), &BoundingBox> = predictions
        .iter()
        .map(|p| ((p.image, p.expression_id), &p.bbox))
        .collect();
    let mut ious = Vec::with_capacity(annotations.len());
    let mut per_expression = Vec::with_capacity(annotations.len());
    for a in annotations {
        let v = lookup
            .get(&(a.query_image_path.as_str(), a.expression_id))
            .map_or(0.0, |p| iou(p, &a.gt_box));
        ious.push(v);
        per_expression.push(ExpressionOutcome {
            image: a.query_image_path.clone(),
            expression_id: a.expression_id,
            iou: v,
            correct_at_50: rule.passes(v, 0.5),
        });
    }
    let acc: BTreeMap<String, f64> = MACC_THRESHOLDS
        .iter()
        .map(|&t| (format!("{t:.2}"), acc_at_ious(&ious, t, rule)))
        .collect();
    let macc = acc.values().sum::<f64>() / acc.len() as f64;
    GroundingReport {
        acc,
        macc,
        rule,
        per_expression,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox<'a> {
    pub image: &'a str,
    pub category: u32,
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox<'a> {
    pub image: &'a str,
    pub category: u32,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// 101-point interpolated AP for one category at one IoU threshold, or
/// `None` when the category has no ground truth.
fn category_ap(dets: &[&ScoredBox<'_>], gts: &[&GroundTruthBox<'_>], t: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<&&ScoredBox> = dets.iter().collect();
    // stable: equal scores keep input order
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(order.len());
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if matched[gi] || g.image != d.image {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= t && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let npos = gts.len() as f64;
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0.0, 0.0);
    for hit in tp {
        if hit {
            ctp += 1.0;
        } else {
            cfp += 1.0;
        }
        precision.push(ctp / (ctp + cfp));
        recall.push(ctp / npos);
    }
    // monotone envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

/// Mean AP over categories with ground truth, for one IoU threshold.
pub fn average_precision_at(dets: &[ScoredBox<'_>], gts: &[GroundTruthBox<'_>], t: f64) -> f64 {
    let mut by_cat: BTreeMap<u32, (Vec<&ScoredBox>, Vec<&GroundTruthBox>)> = BTreeMap::new();
    for g in gts {
        by_cat.entry(g.category).or_default().1.push(g);
    }
    for d in dets {
        by_cat.entry(d.category).or_default().0.push(d);
    }
    let aps: Vec<f64> = by_cat
        .values()
        .filter_map(|(d, g)| category_ap(d, g, t))
        .collect();
    if aps.is_empty() {
        return 0.0;
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// COCO-style AP (mean over IoU 0.50:0.95), AP50 and AP75.
pub fn average_precision(dets: &[ScoredBox<'_>], gts: &[GroundTruthBox<'_>]) -> ApSummary {
    if gts.is_empty() && !dets.is_empty() {
        log::warn!("no ground truth boxes; reporting AP 0 for {} detections", dets.len());
    }
    let per_t: Vec<f64> = AP_THRESHOLDS
        .iter()
        .map(|&t| average_precision_at(dets, gts, t))
        .collect();
    ApSummary {
        ap: per_t.iter().sum::<f64>() / per_t.len() as f64,
        ap50: per_t[0],
        ap75: per_t[5],
    }
}
