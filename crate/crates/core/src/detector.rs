//! Proposal classification against the template bank, plus greedy NMS.

use crate::adapter::{adapt_all, AdapterError, AdapterParams};
use crate::evalkit::iou;
use crate::featio::{Embedding, TemplateBank};
use crate::geom::{BoundingBox, RasterMask};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

pub const DEFAULT_SIM_THRESHOLD: f64 = 0.35;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("template bank is empty")]
    EmptyBank,
    #[error("embedding dims differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub mask: Option<RasterMask>,
    pub embedding: Embedding,
    pub objectness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub instance_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub similarity: f64,
    #[serde(rename = "view")]
    pub best_view: u32,
    #[serde(default)]
    pub proposal_index: usize,
    #[serde(default = "one")]
    pub objectness: f64,
    #[serde(skip)]
    pub mask: Option<RasterMask>,
}

fn one() -> f64 {
    1.0
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64, DetectError> {
    if a.dim() != b.dim() {
        return Err(DetectError::DimMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(DetectError::ZeroNorm);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// The bank after the adapter has been applied, normalised for fast scoring.
pub struct AdaptedBank {
    /// `(instance_id, view, unit vector)` in id then view order.
    entries: Vec<(u32, u32, Vec<f64>)>,
    dim: usize,
}

impl AdaptedBank {
    pub fn new(bank: &TemplateBank, params: &AdapterParams) -> Result<Self, DetectError> {
        if bank.is_empty() {
            return Err(DetectError::EmptyBank);
        }
        let raw: Vec<&Embedding> = bank.iter().map(|(_, _, e)| e).collect();
        let adapted = adapt_all(params, &raw)?;
        let entries = bank
            .iter()
            .zip(adapted)
            .map(|((id, view, _), e)| {
                let n = e.norm();
                if n == 0.0 {
                    return Err(DetectError::ZeroNorm);
                }
                Ok((id, view, e.values.iter().map(|v| v / n).collect()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            entries,
            dim: bank.dim(),
        })
    }

    /// Best `(instance_id, similarity, view)`: max over each instance's
    /// views, argmax over instances, lowest id on ties.
    pub fn best_match(&self, adapted: &Embedding) -> Result<(u32, f64, u32), DetectError> {
        if adapted.dim() != self.dim {
            return Err(DetectError::DimMismatch(adapted.dim(), self.dim));
        }
        let n = adapted.norm();
        if n == 0.0 {
            return Err(DetectError::ZeroNorm);
        }
        let mut best: Option<(u32, f64, u32)> = None;
        for (id, view, unit) in &self.entries {
            let s = (unit.iter().zip(&adapted.values).map(|(a, b)| a * b).sum::<f64>() / n).clamp(-1.0, 1.0);
            // entries are id-ordered, so strict > keeps the lowest id / view on ties
            if best.is_none_or(|(_, bs, _)| s > bs) {
                best = Some((*id, s, *view));
            }
        }
        best.ok_or(DetectError::EmptyBank)
    }
}

/// Label each proposal with its closest instance. Proposals scoring below
/// `sim_threshold` are dropped; output keeps proposal order.
pub fn classify_proposals(
    proposals: &[Proposal],
    bank: &TemplateBank,
    params: &AdapterParams,
    sim_threshold: f64,
) -> Result<Vec<Detection>, DetectError> {
    let adapted_bank = AdaptedBank::new(bank, params)?;
    let raw: Vec<&Embedding> = proposals.iter().map(|p| &p.embedding).collect();
    for e in &raw {
        if e.dim() != bank.dim() {
            return Err(DetectError::DimMismatch(e.dim(), bank.dim()));
        }
    }
    let adapted = adapt_all(params, &raw)?;
    let mut out = Vec::new();
    for (index, (p, e)) in proposals.iter().zip(&adapted).enumerate() {
        let (instance_id, similarity, best_view) = adapted_bank.best_match(e)?;
        if similarity < sim_threshold {
            continue;
        }
        out.push(Detection {
            instance_id,
            bbox: p.bbox,
            similarity,
            best_view,
            proposal_index: index,
            objectness: p.objectness,
            mask: p.mask.clone(),
        });
    }
    Ok(out)
}

/// Greedy class-agnostic suppression by similarity. Output is sorted by
/// similarity, descending (proposal index breaks ties).
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(Ordering::Equal)
            .then(a.proposal_index.cmp(&b.proposal_index))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d.clone());
        }
    }
    kept
}
