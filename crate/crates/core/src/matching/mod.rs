//! Similarity between sequences and optimal one-to-one matching of
//! ground truths to dense predictions.
//!
//! A ground truth is written against the region of each candidate pixel
//! before comparison, so the region words coincide and the center distance
//! shows up in the location words.

mod hungarian;

pub use hungarian::{assign, assign_brute_force, total};

use serde::{Deserialize, Serialize};

use crate::decoder::DenseSequenceMap;
use crate::geometry::{box_corners, iou3d, Box3D};
use crate::words::{decode, encode, ObjectSequence};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// L1 distance over the raw word components.
    #[default]
    WordDistance,
    /// L1 distance over the eight decoded corners.
    CornerDistance,
    /// `exp(-(1 - α) IoU)` as printed, or `exp(-(1 - α)(1 - IoU))` when
    /// `corrected_iou` is set.
    Iou3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityMetric {
    pub metric: MetricKind,
    pub alpha: f64,
    pub corrected_iou: bool,
}

impl Default for SimilarityMetric {
    fn default() -> Self {
        Self::new(MetricKind::WordDistance)
    }
}

impl SimilarityMetric {
    pub const DEFAULT_ALPHA: f64 = 0.25;

    pub fn new(metric: MetricKind) -> Self {
        Self {
            metric,
            alpha: Self::DEFAULT_ALPHA,
            corrected_iou: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.alpha < 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("similarity alpha must lie in (0, 1), got {}", self.alpha)))
        }
    }
}

fn word_l1(a: &ObjectSequence, b: &ObjectSequence) -> f64 {
    let (ra, rb) = (&a.region, &b.region);
    let (la, lb) = (&a.location, &b.location);
    let (oa, ob) = (&a.orientation, &b.orientation);
    let (sa, sb) = (&a.size, &b.size);
    [
        ra.r_x - rb.r_x,
        ra.r_y - rb.r_y,
        la.l_x - lb.l_x,
        la.l_y - lb.l_y,
        la.z - lb.z,
        oa.s - ob.s,
        oa.c - ob.c,
        sa.u_l - sb.u_l,
        sa.u_w - sb.u_w,
        sa.u_h - sb.u_h,
    ]
    .iter()
    .map(|d| d.abs())
    .sum()
}

fn corner_l1(a: &Box3D, b: &Box3D) -> f64 {
    box_corners(a)
        .iter()
        .zip(box_corners(b).iter())
        .map(|(p, q)| (0..3).map(|d| (p[d] - q[d]).abs()).sum::<f64>())
        .sum()
}

/// Similarity in `[0, 1]` between a prediction and a target; `None` is the
/// empty target, which scores 0.
pub fn similarity(pred: &ObjectSequence, gt: Option<&ObjectSequence>, m: &SimilarityMetric) -> Result<f64> {
    m.validate()?;
    let Some(gt) = gt else { return Ok(0.0) };
    if pred.category.p.len() != gt.category.p.len() {
        return Err(Error::shape("category words", &[pred.category.p.len()], &[gt.category.p.len()]));
    }
    let class = pred.category.dot(&gt.category).clamp(0.0, 1.0);
    if class == 0.0 {
        return Ok(0.0);
    }
    let distance = match m.metric {
        MetricKind::WordDistance => {
            if !pred.is_finite() || !gt.is_finite() {
                return Err(Error::NonFinite("sequence in similarity".into()));
            }
            word_l1(pred, gt)
        }
        MetricKind::CornerDistance => corner_l1(&decode(pred)?.b, &decode(gt)?.b),
        MetricKind::Iou3d => {
            let iou = iou3d(&decode(pred)?.b, &decode(gt)?.b);
            if m.corrected_iou {
                1.0 - iou
            } else {
                iou
            }
        }
    };
    Ok((class.powf(m.alpha) * (-(1.0 - m.alpha) * distance).exp()).clamp(0.0, 1.0))
}

/// The optimal assignment of ground truths to prediction indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Prediction index for each ground truth, all distinct.
    pub assignment: Vec<usize>,
    pub pair_scores: Vec<f64>,
    pub total: f64,
}

impl MatchResult {
    fn from_scores(scores: &[Vec<f64>], columns: &[usize], assignment: Vec<usize>) -> Self {
        let pair_scores: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| scores[i][j]).collect();
        Self {
            total: pair_scores.iter().sum(),
            assignment: assignment.iter().map(|&j| columns[j]).collect(),
            pair_scores,
        }
    }

    /// True when no prediction is used twice.
    pub fn is_injective(&self) -> bool {
        let mut seen = self.assignment.clone();
        seen.sort_unstable();
        seen.windows(2).all(|w| w[0] != w[1])
    }
}

/// Similarity of every ground truth (rows) to every prediction (columns),
/// with each ground truth encoded against the prediction's region.
pub fn score_matrix(preds: &[&ObjectSequence], gts: &[Box3D], m: &SimilarityMetric) -> Result<Vec<Vec<f64>>> {
    gts.iter()
        .map(|gt| {
            preds
                .iter()
                .map(|p| {
                    let target = encode(gt, &p.region, p.category.classes())?;
                    similarity(p, Some(&target), m)
                })
                .collect()
        })
        .collect()
}

/// Optimal matching over an explicit prediction list.
pub fn match_candidates(preds: &[ObjectSequence], gts: &[Box3D], m: &SimilarityMetric) -> Result<MatchResult> {
    if gts.len() > preds.len() {
        return Err(Error::TooManyGroundTruths {
            ground_truths: gts.len(),
            predictions: preds.len(),
        });
    }
    let refs: Vec<&ObjectSequence> = preds.iter().collect();
    let scores = score_matrix(&refs, gts, m)?;
    let columns: Vec<usize> = (0..preds.len()).collect();
    Ok(MatchResult::from_scores(&scores, &columns, assign(&scores)))
}

/// Exhaustive optimum for instances of at most 8 × 8.
pub fn brute_force_match(preds: &[ObjectSequence], gts: &[Box3D], m: &SimilarityMetric) -> Result<MatchResult> {
    if preds.len() > 8 || gts.len() > 8 {
        return Err(Error::InstanceTooLarge {
            ground_truths: gts.len(),
            predictions: preds.len(),
        });
    }
    if gts.len() > preds.len() {
        return Err(Error::TooManyGroundTruths {
            ground_truths: gts.len(),
            predictions: preds.len(),
        });
    }
    let refs: Vec<&ObjectSequence> = preds.iter().collect();
    let scores = score_matrix(&refs, gts, m)?;
    let columns: Vec<usize> = (0..preds.len()).collect();
    Ok(MatchResult::from_scores(&scores, &columns, assign_brute_force(&scores)))
}

/// Default pruning radius in cells.
pub const DEFAULT_PRUNE_RADIUS: f64 = 8.0;

/// Matches ground truths to pixels of a dense map.
///
/// Only pixels whose region center lies within `radius` cells of a ground
/// truth center are scored against it; all other pairs score exactly 0.
/// Pass `f64::INFINITY` to score every pair.
pub fn match_dense(map: &DenseSequenceMap, gts: &[Box3D], m: &SimilarityMetric, radius: f64) -> Result<MatchResult> {
    let pixels = map.sequences.len();
    if gts.len() > pixels {
        return Err(Error::TooManyGroundTruths {
            ground_truths: gts.len(),
            predictions: pixels,
        });
    }
    m.validate()?;
    if gts.is_empty() {
        return Ok(MatchResult {
            assignment: Vec::new(),
            pair_scores: Vec::new(),
            total: 0.0,
        });
    }
    let near = |gt: &Box3D, s: &ObjectSequence| {
        let (dx, dy) = ((s.region.r_x - gt.x) / s.region.r_l, (s.region.r_y - gt.y) / s.region.r_w);
        dx * dx + dy * dy <= radius * radius
    };
    let mut columns: Vec<usize> = (0..pixels)
        .filter(|&p| gts.iter().any(|gt| near(gt, &map.sequences[p])))
        .collect();
    // zero-score filler so every ground truth has a column
    let mut filler = 0;
    while columns.len() < gts.len() {
        if columns.binary_search(&filler).is_err() {
            let at = columns.partition_point(|&c| c < filler);
            columns.insert(at, filler);
        }
        filler += 1;
    }
    let mut scores = vec![vec![0.0; columns.len()]; gts.len()];
    for (i, gt) in gts.iter().enumerate() {
        for (j, &p) in columns.iter().enumerate() {
            let s = &map.sequences[p];
            if near(gt, s) {
                let target = encode(gt, &s.region, s.category.classes())?;
                scores[i][j] = similarity(s, Some(&target), m)?;
            }
        }
    }
    Ok(MatchResult::from_scores(&scores, &columns, assign(&scores)))
}
