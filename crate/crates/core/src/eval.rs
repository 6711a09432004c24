//! Score filtering of dense predictions and average precision.
//!
//! Inference keeps every pixel whose best foreground probability clears the
//! score threshold. Nothing is suppressed afterwards: the matching used in
//! training already assigns one pixel per object.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::DenseSequenceMap;
use crate::geometry::{bev_iou, iou3d, Box3D};
use crate::numerics::ParamStore;
use crate::parallel::par_map;
use crate::scenegen::Scene;
use crate::training::{check_compatible, infer, ModelConfig};
use crate::words::decode;
use crate::{Error, Result};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.2;

/// Boundary between the near and far distance buckets, in meters.
pub const NEAR_RANGE: f64 = 30.0;

/// JSON schema of [`EvalReport`].
pub const EVAL_REPORT_SCHEMA: &str = include_str!("../schema/eval_report.schema.json");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub b: Box3D,
    /// Best foreground probability, in `[0, 1]`.
    pub score: f64,
    /// Row-major pixel the detection was read from.
    pub pixel: usize,
}

impl Detection {
    pub fn class_id(&self) -> usize {
        self.b.class_id
    }
}

/// Decodes every pixel whose best foreground probability is at least
/// `threshold`.
pub fn filter_predictions(map: &DenseSequenceMap, threshold: f64) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    let mut kept = 0;
    for (pixel, s) in map.sequences.iter().enumerate() {
        let (_, p) = s.category.best_foreground();
        if p < threshold {
            continue;
        }
        kept += 1;
        let sb = decode(s)?;
        out.push(Detection {
            b: sb.b,
            score: sb.score.clamp(0.0, 1.0),
            pixel,
        });
    }
    // one detection per surviving pixel: no suppression step exists
    assert_eq!(out.len(), kept, "inference must not drop scored pixels");
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouKind {
    Bev,
    #[default]
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouKind {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouKind::Bev => bev_iou(a, b),
            IouKind::ThreeD => iou3d(a, b),
        }
    }
}

/// Detections and ground truths of one scene.
#[derive(Clone, Copy, Debug)]
pub struct Frame<'a> {
    pub detections: &'a [Detection],
    pub ground_truths: &'a [Box3D],
}

/// A precision–recall curve in score order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` after each detection.
    pub points: Vec<(f64, f64)>,
    pub ground_truths: usize,
}

impl PrCurve {
    /// Area under the all-points interpolated curve; `None` without ground
    /// truths.
    pub fn average_precision(&self) -> Option<f64> {
        if self.ground_truths == 0 {
            return None;
        }
        let env = self.envelope();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for (r, p) in env {
            ap += (r - prev) * p;
            prev = r;
        }
        Some(ap.clamp(0.0, 1.0))
    }

    /// Interpolated precision at each listed recall level.
    pub fn samples(&self, levels: &[f64]) -> Vec<(f64, f64)> {
        let env = self.envelope();
        levels
            .iter()
            .map(|&r| {
                let p = env.iter().find(|(er, _)| *er >= r).map_or(0.0, |(_, p)| *p);
                (r, p)
            })
            .collect()
    }

    /// Points with precision replaced by its running maximum from the right.
    fn envelope(&self) -> Vec<(f64, f64)> {
        let mut env = self.points.clone();
        for i in (0..env.len().saturating_sub(1)).rev() {
            env[i].1 = env[i].1.max(env[i + 1].1);
        }
        env
    }
}

/// Ranks detections of `class` (all classes when `None`) across frames and
/// greedily matches each to the highest-IoU unmatched ground truth of its
/// class in the same frame.
pub fn pr_curve(frames: &[Frame], class: Option<usize>, iou_threshold: f64, kind: IouKind) -> PrCurve {
    let keep = |c: usize| class.is_none_or(|k| k == c);
    let mut ranked: Vec<(usize, &Detection)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| fr.detections.iter().map(move |d| (f, d)))
        .filter(|(_, d)| keep(d.class_id()))
        .collect();
    ranked.sort_by(|(fa, a), (fb, b)| {
        b.score
            .total_cmp(&a.score)
            .then(fa.cmp(fb))
            .then(a.pixel.cmp(&b.pixel))
    });
    let ground_truths = frames
        .iter()
        .map(|f| f.ground_truths.iter().filter(|g| keep(g.class_id)).count())
        .sum();
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.ground_truths.len()]).collect();
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked.len());
    for (n, (f, d)) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in frames[*f].ground_truths.iter().enumerate() {
            if taken[*f][j] || g.class_id != d.class_id() {
                continue;
            }
            let iou = kind.iou(&d.b, g);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[*f][j] = true;
            tp += 1;
        }
        if ground_truths > 0 {
            points.push((tp as f64 / ground_truths as f64, tp as f64 / (n + 1) as f64));
        }
    }
    PrCurve { points, ground_truths }
}

/// Average precision of one scene over all classes; `None` without ground
/// truths.
pub fn average_precision(dets: &[Detection], gts: &[Box3D], iou_threshold: f64, kind: IouKind) -> Option<f64> {
    let frame = Frame {
        detections: dets,
        ground_truths: gts,
    };
    pr_curve(&[frame], None, iou_threshold, kind).average_precision()
}

/// Inference and AP settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub iou_kind: IouKind,
    /// IoU threshold for classes not listed in `iou_per_class`.
    pub iou_default: f64,
    pub iou_per_class: BTreeMap<String, f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            iou_kind: IouKind::ThreeD,
            iou_default: 0.5,
            iou_per_class: BTreeMap::from([("vehicle".to_string(), 0.7)]),
        }
    }
}

impl EvalConfig {
    /// The same settings with one IoU threshold for every class.
    pub fn uniform(iou: f64) -> Self {
        Self {
            iou_default: iou,
            iou_per_class: BTreeMap::new(),
            ..Self::default()
        }
    }

    pub fn iou_for(&self, class: &str) -> f64 {
        self.iou_per_class.get(class).copied().unwrap_or(self.iou_default)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!("score_threshold must lie in [0, 1], got {}", self.score_threshold)));
        }
        let ious = std::iter::once(("default", self.iou_default)).chain(self.iou_per_class.iter().map(|(k, v)| (k.as_str(), *v)));
        for (name, v) in ious {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("iou threshold for {name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Recall levels at which the report samples interpolated precision.
pub const PR_LEVELS: usize = 21;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub ap: Option<f64>,
    pub ap_0_30m: Option<f64>,
    pub ap_30m_plus: Option<f64>,
    pub iou_threshold: f64,
    pub ground_truths: usize,
    pub detections: usize,
    /// `[recall, interpolated precision]` at evenly spaced recall levels.
    pub pr_samples: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<String, ClassReport>,
    /// Mean of the defined per-class APs.
    pub map: Option<f64>,
    pub scene_count: usize,
    pub threshold_config: EvalConfig,
}

impl EvalReport {
    pub fn class_ap(&self, name: &str) -> Option<f64> {
        self.per_class.get(name).and_then(|c| c.ap)
    }
}

fn planar_range(b: &Box3D) -> f64 {
    b.x.hypot(b.y)
}

fn as_frames<'a>(dets: &'a [Vec<Detection>], gts: &'a [Vec<Box3D>]) -> Vec<Frame<'a>> {
    dets.iter()
        .zip(gts)
        .map(|(d, g)| Frame {
            detections: d,
            ground_truths: g,
        })
        .collect()
}

/// Builds the report from detections already filtered per scene.
pub fn report(frames: &[Frame], class_names: &[String], cfg: &EvalConfig) -> EvalReport {
    let levels: Vec<f64> = (0..PR_LEVELS).map(|i| i as f64 / (PR_LEVELS - 1) as f64).collect();
    let bucket = |near: bool| -> (Vec<Vec<Detection>>, Vec<Vec<Box3D>>) {
        let inside = |b: &Box3D| (planar_range(b) < NEAR_RANGE) == near;
        (
            frames.iter().map(|f| f.detections.iter().filter(|d| inside(&d.b)).copied().collect()).collect(),
            frames.iter().map(|f| f.ground_truths.iter().filter(|g| inside(g)).copied().collect()).collect(),
        )
    };
    let (near, far) = (bucket(true), bucket(false));
    let (near_frames, far_frames) = (as_frames(&near.0, &near.1), as_frames(&far.0, &far.1));
    let mut per_class = BTreeMap::new();
    for (c, name) in class_names.iter().enumerate() {
        let iou = cfg.iou_for(name);
        let curve = pr_curve(frames, Some(c), iou, cfg.iou_kind);
        per_class.insert(
            name.clone(),
            ClassReport {
                ap: curve.average_precision(),
                ap_0_30m: pr_curve(&near_frames, Some(c), iou, cfg.iou_kind).average_precision(),
                ap_30m_plus: pr_curve(&far_frames, Some(c), iou, cfg.iou_kind).average_precision(),
                iou_threshold: iou,
                ground_truths: curve.ground_truths,
                detections: frames
                    .iter()
                    .map(|f| f.detections.iter().filter(|d| d.class_id() == c).count())
                    .sum(),
                pr_samples: curve.samples(&levels).into_iter().map(|(r, p)| [r, p]).collect(),
            },
        );
    }
    let defined: Vec<f64> = per_class.values().filter_map(|c| c.ap).collect();
    EvalReport {
        map: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        per_class,
        scene_count: frames.len(),
        threshold_config: cfg.clone(),
    }
}

/// Detections for every scene, inferred on up to `threads` workers.
pub fn detect_all(store: &ParamStore, model: &ModelConfig, scenes: &[Scene], threshold: f64, threads: usize) -> Result<Vec<Vec<Detection>>> {
    check_compatible(store, model)?;
    par_map(scenes, threads, |_, scene| {
        let map = infer(store, model, scene)?;
        filter_predictions(&map, threshold)
    })
    .into_iter()
    .collect()
}

/// Runs inference over `scenes` and scores the detections.
pub fn evaluate(
    store: &ParamStore,
    model: &ModelConfig,
    scenes: &[Scene],
    class_names: &[String],
    cfg: &EvalConfig,
    threads: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    if class_names.len() != model.decoder.classes {
        return Err(Error::Config(format!(
            "{} class names for a {}-class model",
            class_names.len(),
            model.decoder.classes
        )));
    }
    let dets = detect_all(store, model, scenes, cfg.score_threshold, threads)?;
    let frames: Vec<Frame> = dets
        .iter()
        .zip(scenes)
        .map(|(d, s)| Frame {
            detections: d,
            ground_truths: &s.boxes,
        })
        .collect();
    Ok(report(&frames, class_names, cfg))
}
