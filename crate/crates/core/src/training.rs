//! Set-to-set loss and the optimization loop.
//!
//! Each scene is matched on detached forward values; the focal
//! classification term and the decoded-box regression term are then
//! differentiated for that fixed assignment.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, rasterize, GridConfig, PillarFeatures};
use crate::decoder::{self, decode_graph, slot, DecoderConfig, DecoderTrace, DenseSequenceMap};
use crate::geometry::{normalize_angle, Box3D};
use crate::matching::{match_dense, MatchResult, SimilarityMetric, DEFAULT_PRUNE_RADIUS};
use crate::numerics::{
    adam_step, cosine_lr, grad_check, AdamConfig, CustomOp, Fault, GatherTable, GradCheckReport, Graph, Objective,
    ParamStore, Tensor, Var, GRAD_CHECK_EPS,
};
use crate::parallel::par_map;
use crate::scenegen::{generate_scene, Scene, SceneGenConfig};
use crate::words::WordKind;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_reg: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 2.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0) || !(self.focal_gamma >= 0.0) || !(self.focal_alpha > 0.0) {
            return Err(Error::Config("loss weights must be non-negative and focal alpha positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub similarity: SimilarityMetric,
    /// Candidate radius around each ground truth, in cells.
    pub prune_radius: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            similarity: SimilarityMetric::default(),
            prune_radius: DEFAULT_PRUNE_RADIUS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps over which the cosine schedule decays; 0 means the run length.
    pub lr_horizon: u64,
    pub seed: u64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Random mirror `y → -y` of training scenes.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            lr: 1e-3,
            lr_horizon: 0,
            seed: 0,
            checkpoint_every: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, scenes: usize) -> u64 {
        scenes.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, scenes: usize) -> u64 {
        self.steps_per_epoch(scenes) * self.epochs as u64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: GridConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.decoder.classes == 0 {
            return Err(Error::Config("at least one foreground class is required".into()));
        }
        Ok(())
    }
}

/// Fresh parameters for `model`, seeded.
pub fn init_model(model: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    backbone::init_params(&mut store, model.grid.channels, &mut rng);
    decoder::init_params(&mut store, &model.decoder, model.grid.channels, &mut rng);
    store
}

/// Checks that `store` holds exactly the tensors `model` expects.
pub fn check_compatible(store: &ParamStore, model: &ModelConfig) -> Result<()> {
    let reference = init_model(model, 0);
    for (name, p) in reference.iter() {
        match store.get(name) {
            None => return Err(Error::Compatibility(format!("missing parameter `{name}`"))),
            Some(q) if q.value.shape() != p.value.shape() => {
                return Err(Error::Compatibility(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    q.value.shape(),
                    p.value.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = store.names().find(|n| !reference.contains(n)) {
        return Err(Error::Compatibility(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

/// Records backbone and decoder on `g`.
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    model: &ModelConfig,
    pf: &PillarFeatures,
    frozen: Option<&[Rc<GatherTable>]>,
) -> Result<DecoderTrace> {
    let f = backbone::encode(g, store, pf)?;
    decode_graph(g, store, f, &model.decoder, &model.grid, frozen)
}

/// Dense inference for one scene.
pub fn infer(store: &ParamStore, model: &ModelConfig, scene: &Scene) -> Result<DenseSequenceMap> {
    let pf = rasterize(scene, &model.grid)?;
    let mut g = Graph::new();
    let trace = forward(&mut g, store, model, &pf, None)?;
    DenseSequenceMap::from_trace(&g, &trace, &model.grid)
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

/// Per-pixel classification targets: the assigned class for matched pixels
/// and background (`classes`) elsewhere.
pub fn class_targets(pixels: usize, classes: usize, gts: &[Box3D], m: &MatchResult) -> Vec<usize> {
    let mut t = vec![classes; pixels];
    for (gt, &p) in gts.iter().zip(&m.assignment) {
        t[p] = gt.class_id;
    }
    t
}

struct Precomputed {
    grads: Vec<Tensor>,
}

impl CustomOp for Precomputed {
    fn name(&self) -> &'static str {
        "precomputed"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, upstream: &Tensor) -> Vec<Tensor> {
        let u = upstream.item();
        self.grads.iter().map(|g| g.map(|v| v * u)).collect()
    }
}

/// Softmax focal loss over every pixel, divided by `max(1, matched)`.
/// `logits: [HW, n + 1]`. Returns the scalar node.
pub fn classification_loss(g: &mut Graph, logits: Var, targets: &[usize], matched: usize, cfg: &LossConfig) -> Result<Var> {
    let lv = g.value(logits);
    let d = lv.last_dim();
    if lv.rank() != 2 || lv.rows() != targets.len() || targets.iter().any(|&t| t >= d) {
        return Err(Error::shape("classification targets", lv.shape(), &[targets.len(), d]));
    }
    let norm = matched.max(1) as f64;
    let (gamma, alpha) = (cfg.focal_gamma, cfg.focal_alpha);
    let mut total = 0.0;
    let mut grad = vec![0.0; lv.len()];
    for (r, &t) in targets.iter().enumerate() {
        let z = lv.row(r);
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let log_pt = z[t] - m - sum.ln();
        let pt = log_pt.exp();
        let q = 1.0 - pt;
        let mod_pow = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        total += -alpha * mod_pow * log_pt;
        // dL/dz_k = alpha [q^γ - γ q^(γ-1) pt ln pt] (p_k - δ_kt)
        let slope = if gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * pt * log_pt
        };
        let coef = alpha * (mod_pow - slope) / norm;
        for k in 0..d {
            let pk = (z[k] - m).exp() / sum;
            grad[r * d + k] = coef * (pk - if k == t { 1.0 } else { 0.0 });
        }
    }
    let op = Rc::new(Precomputed {
        grads: vec![Tensor::new(lv.shape(), grad)?],
    });
    Ok(g.custom(&[logits], Tensor::scalar(total / norm), op))
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Mean over matched pairs of smooth-L1 on the decoded
/// `(x, y, z, l, w, h)` plus smooth-L1 on the wrapped heading error.
/// Zero when nothing is matched.
pub fn regression_loss(
    g: &mut Graph,
    words: &[Var; 4],
    grid: &GridConfig,
    gts: &[Box3D],
    m: &MatchResult,
) -> Result<Var> {
    let (loc_v, ori_v, size_v) = (
        words[slot(WordKind::Location)],
        words[slot(WordKind::Orientation)],
        words[slot(WordKind::Size)],
    );
    let (loc, ori, size) = (g.value(loc_v), g.value(ori_v), g.value(size_v));
    let mut grads = [
        Tensor::zeros(loc.shape()),
        Tensor::zeros(ori.shape()),
        Tensor::zeros(size.shape()),
    ];
    let n = gts.len();
    let mut total = 0.0;
    for (gt, &p) in gts.iter().zip(&m.assignment) {
        let (rx, ry) = grid.cell_center(p / grid.w, p % grid.w);
        let (l, o, s) = (loc.row(p), ori.row(p), size.row(p));
        let inv = 1.0 / n as f64;
        let terms = [
            (rx + l[0] * grid.cell - gt.x, 0usize, 0usize, grid.cell),
            (ry + l[1] * grid.cell - gt.y, 0, 1, grid.cell),
            (l[2] - gt.z, 0, 2, 1.0),
            (s[0].exp() - gt.l, 2, 0, s[0].exp()),
            (s[1].exp() - gt.w, 2, 1, s[1].exp()),
            (s[2].exp() - gt.h, 2, 2, s[2].exp()),
        ];
        for (diff, which, col, dd) in terms {
            let (v, dv) = smooth_l1(diff);
            total += v * inv;
            grads[which].data_mut()[p * 3 + col] += dv * dd * inv;
        }
        let (sn, cs) = (o[0], o[1]);
        let r2 = sn * sn + cs * cs;
        let (v, dv) = smooth_l1(normalize_angle(sn.atan2(cs) - gt.theta));
        total += v * inv;
        if r2 > 0.0 {
            grads[1].data_mut()[p * 2] += dv * cs / r2 * inv;
            grads[1].data_mut()[p * 2 + 1] += -dv * sn / r2 * inv;
        }
    }
    let op = Rc::new(Precomputed { grads: grads.to_vec() });
    Ok(g.custom(&[loc_v, ori_v, size_v], Tensor::scalar(total), op))
}

/// Loss for one scene with its handles and the assignment used.
pub struct SceneLoss {
    pub total: Var,
    pub cls: f64,
    pub reg: f64,
    pub matching: MatchResult,
    pub trace: DecoderTrace,
}

/// Everything needed to evaluate the loss of one scene.
pub struct LossSetup<'a> {
    pub model: &'a ModelConfig,
    pub loss: &'a LossConfig,
    pub matcher: &'a MatchConfig,
}

/// Builds the loss for a scene on `g`.
///
/// `frozen` fixes sample tables and assignment (used for finite
/// differences); otherwise both come from the current forward pass.
pub fn scene_loss(
    g: &mut Graph,
    store: &ParamStore,
    setup: &LossSetup,
    pf: &PillarFeatures,
    gts: &[Box3D],
    frozen: Option<(&[Rc<GatherTable>], &MatchResult)>,
) -> Result<SceneLoss> {
    let grid = &setup.model.grid;
    let trace = forward(g, store, setup.model, pf, frozen.map(|f| f.0))?;
    let matching = match frozen {
        Some((_, m)) => m.clone(),
        None => {
            let map = DenseSequenceMap::from_trace(g, &trace, grid)?;
            match_dense(&map, gts, &setup.matcher.similarity, setup.matcher.prune_radius)?
        }
    };
    if !matching.is_injective() || matching.assignment.len() != gts.len() {
        return Err(Error::Invariant("assignment maps two ground truths to one pixel".into()));
    }
    let targets = class_targets(grid.pixels(), setup.model.decoder.classes, gts, &matching);
    let cls = classification_loss(g, trace.words[slot(WordKind::Category)], &targets, gts.len(), setup.loss)?;
    let reg = regression_loss(g, &trace.words, grid, gts, &matching)?;
    let weighted = g.scale(reg, setup.loss.lambda_reg);
    let total = g.add(cls, weighted)?;
    Ok(SceneLoss {
        cls: g.value(cls).item(),
        reg: g.value(reg).item(),
        total,
        matching,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Optimization loop
// ---------------------------------------------------------------------------

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss_total: f64,
    pub matched: usize,
}

/// Mirrors a scene across the x axis (`y → -y`).
pub fn mirror_scene(scene: &Scene) -> Scene {
    Scene {
        points: scene.points.iter().map(|p| [p[0], -p[1], p[2], p[3]]).collect(),
        boxes: scene
            .boxes
            .iter()
            .map(|b| Box3D {
                y: -b.y,
                theta: normalize_angle(-b.theta),
                ..*b
            })
            .collect(),
    }
}

struct Prepared {
    pf: PillarFeatures,
    boxes: Vec<Box3D>,
}

fn prepare(scene: &Scene, grid: &GridConfig) -> Result<Prepared> {
    Ok(Prepared {
        pf: rasterize(scene, grid)?,
        boxes: scene.boxes.clone(),
    })
}

/// Scene order for `epoch`, reproducible from the seed alone.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn mirrored(seed: u64, step: u64, slot: usize) -> bool {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d69_7272_6f72);
    rng.set_stream(step.wrapping_mul(1 << 16).wrapping_add(slot as u64));
    rng.random_bool(0.5)
}

/// Full training setup.
#[derive(Clone, Copy, Debug)]
pub struct FitConfig<'a> {
    pub model: &'a ModelConfig,
    pub loss: &'a LossConfig,
    pub matcher: &'a MatchConfig,
    pub train: &'a TrainConfig,
    /// Workers for the scenes of one batch; results do not depend on it.
    pub threads: usize,
}

struct SceneGrads {
    cls: f64,
    reg: f64,
    total: f64,
    matched: usize,
    grads: std::collections::BTreeMap<String, Tensor>,
}

/// Trains `store` on `scenes`, resuming from `store.step()`.
///
/// `on_step` receives every step's metrics together with the updated
/// parameters; returning an error stops training.
pub fn fit(
    cfg: &FitConfig,
    scenes: &[Scene],
    store: &mut ParamStore,
    on_step: &mut dyn FnMut(&StepMetrics, &ParamStore) -> Result<()>,
) -> Result<()> {
    cfg.model.validate()?;
    cfg.loss.validate()?;
    cfg.matcher.similarity.validate()?;
    cfg.train.validate()?;
    check_compatible(store, cfg.model)?;
    let t = cfg.train;
    let total_steps = t.total_steps(scenes.len());
    if total_steps == 0 {
        return Ok(());
    }
    let horizon = if t.lr_horizon == 0 { total_steps } else { t.lr_horizon };
    let grid = &cfg.model.grid;
    let plain: Vec<Prepared> = scenes.iter().map(|s| prepare(s, grid)).collect::<Result<_>>()?;
    let flipped: Vec<Prepared> = if t.augment {
        scenes.iter().map(|s| prepare(&mirror_scene(s), grid)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let setup = LossSetup {
        model: cfg.model,
        loss: cfg.loss,
        matcher: cfg.matcher,
    };
    let per_epoch = t.steps_per_epoch(scenes.len());
    let adam = AdamConfig::default();
    let mut order_cache: Option<(u64, Vec<usize>)> = None;
    while store.step() < total_steps {
        let step = store.step();
        let epoch = step / per_epoch;
        if order_cache.as_ref().map(|c| c.0) != Some(epoch) {
            order_cache = Some((epoch, epoch_order(t.seed, epoch, scenes.len())));
        }
        let order = &order_cache.as_ref().expect("set above").1;
        let start = ((step % per_epoch) as usize) * t.batch_size;
        let batch = &order[start..(start + t.batch_size).min(order.len())];
        let lr = cosine_lr(t.lr, step, horizon);
        let mut metrics = StepMetrics {
            step: step + 1,
            lr,
            loss_cls: 0.0,
            loss_reg: 0.0,
            loss_total: 0.0,
            matched: 0,
        };
        let per_scene = par_map(batch, cfg.threads, |k, &idx| -> Result<SceneGrads> {
            let item = if t.augment && mirrored(t.seed, step, k) {
                &flipped[idx]
            } else {
                &plain[idx]
            };
            let mut g = Graph::new();
            let sl = scene_loss(&mut g, store, &setup, &item.pf, &item.boxes, None)?;
            let value = g.value(sl.total).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step: step + 1 });
            }
            let grads = g.backward(sl.total)?;
            Ok(SceneGrads {
                cls: sl.cls,
                reg: sl.reg,
                total: value,
                matched: sl.matching.assignment.len(),
                grads: g.param_grads(&grads),
            })
        });
        // accumulate in batch order so the sum does not depend on scheduling
        for r in per_scene {
            let r = r?;
            for (name, grad) in &r.grads {
                store.accumulate_grad(name, grad)?;
            }
            metrics.loss_cls += r.cls;
            metrics.loss_reg += r.reg;
            metrics.loss_total += r.total;
            metrics.matched += r.matched;
        }
        let inv = 1.0 / batch.len() as f64;
        store.scale_grads(inv);
        if store.iter().any(|(_, p)| p.grad.as_ref().is_some_and(|g| !g.all_finite())) {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        metrics.loss_cls *= inv;
        metrics.loss_reg *= inv;
        metrics.loss_total *= inv;
        adam_step(store, lr, &adam)?;
        on_step(&metrics, store)?;
    }
    Ok(())
}


// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// The 8×8 grid, 16-channel model used for gradient verification.
pub fn toy_model(decoder: DecoderConfig) -> ModelConfig {
    ModelConfig {
        grid: GridConfig {
            extent: crate::scenegen::Extent {
                x_min: 0.0,
                x_max: 6.4,
                y_min: -3.2,
                y_max: 3.2,
                z_min: -0.5,
                z_max: 3.5,
            },
            h: 8,
            w: 8,
            cell: 0.8,
            channels: 16,
        },
        decoder,
    }
}

/// Scenes sized for [`toy_model`].
pub fn toy_scene_config() -> SceneGenConfig {
    let toy = toy_model(DecoderConfig::default());
    let mut cfg = SceneGenConfig {
        extent: toy.grid.extent,
        objects_per_scene: [1, 2],
        points_per_object: [30, 60],
        clutter_points: 40,
        seed: 12,
        ..SceneGenConfig::default()
    };
    cfg.classes[0].size_mean = [2.4, 1.2, 1.4];
    cfg
}

/// The point at which the toy gradient check runs: the usual init with
/// relu biases lifted off zero and a neutral category bias, so that no
/// gradient entry falls below what central differences can resolve.
pub fn toy_check_params(model: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = init_model(model, seed);
    let c = model.grid.channels;
    for name in backbone::PARAM_NAMES.iter().filter(|n| n.ends_with(".bias")) {
        *store.value_mut(name).expect("backbone bias") = Tensor::filled(&[c], 0.1);
    }
    for step in 1..=3 {
        *store.value_mut(&decoder::agg_names(step)[1]).expect("aggregation bias") = Tensor::filled(&[c], 0.1);
    }
    let bias = &decoder::head_names(WordKind::Category)[1];
    *store.value_mut(bias).expect("category bias") = Tensor::zeros(&[model.decoder.classes + 1]);
    store
}

/// Seed of the default toy gradient check.
pub const TOY_CHECK_SEED: u64 = 2;

/// Gradient check of the full scene loss on the toy model, with parameters
/// from [`toy_check_params`] and scene `seed` of [`toy_scene_config`].
pub fn toy_grad_check(decoder: DecoderConfig, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let model = toy_model(decoder);
    let (loss, matcher) = (LossConfig::default(), MatchConfig::default());
    let store = toy_check_params(&model, seed);
    let scene = generate_scene(&toy_scene_config(), seed)?;
    let setup = LossSetup {
        model: &model,
        loss: &loss,
        matcher: &matcher,
    };
    let objective = FrozenSceneLoss::new(&store, setup, &scene)?.with_fault(fault);
    grad_check(&store, &objective, GRAD_CHECK_EPS)
}

/// Scene loss as a function of the parameters, with sample tables and the
/// assignment frozen at the values of an unperturbed forward pass.
pub struct FrozenSceneLoss<'a> {
    setup: LossSetup<'a>,
    pf: PillarFeatures,
    gts: Vec<Box3D>,
    tables: Vec<Rc<GatherTable>>,
    matching: MatchResult,
    fault: Option<Fault>,
}

impl<'a> FrozenSceneLoss<'a> {
    pub fn new(store: &ParamStore, setup: LossSetup<'a>, scene: &Scene) -> Result<Self> {
        let pf = rasterize(scene, &setup.model.grid)?;
        let mut g = Graph::new();
        let sl = scene_loss(&mut g, store, &setup, &pf, &scene.boxes, None)?;
        Ok(Self {
            tables: sl.trace.tables.clone(),
            matching: sl.matching,
            setup,
            pf,
            gts: scene.boxes.clone(),
            fault: None,
        })
    }

    /// Corrupts one backward rule; the gradient check must then fail.
    #[doc(hidden)]
    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn matching(&self) -> &MatchResult {
        &self.matching
    }
}

impl Objective for FrozenSceneLoss<'_> {
    fn value(&self, store: &ParamStore) -> Result<f64> {
        let mut g = Graph::new();
        let sl = scene_loss(&mut g, store, &self.setup, &self.pf, &self.gts, Some((&self.tables, &self.matching)))?;
        Ok(g.value(sl.total).item())
    }

    fn value_and_grad(&self, store: &ParamStore) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
        let mut g = Graph::with_fault(self.fault);
        let sl = scene_loss(&mut g, store, &self.setup, &self.pf, &self.gts, Some((&self.tables, &self.matching)))?;
        let grads = g.backward(sl.total)?;
        Ok((g.value(sl.total).item(), g.param_grads(&grads)))
    }
}

#[cfg(test)]
mod tests;
