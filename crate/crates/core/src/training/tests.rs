use std::f64::consts::PI;

use super::*;
use crate::scenegen::{generate_scene, SceneGenConfig};

fn logits(rows: &[&[f64]]) -> Tensor {
    let d = rows[0].len();
    Tensor::new(&[rows.len(), d], rows.concat()).unwrap()
}

fn cls_value(l: Tensor, targets: &[usize], matched: usize, cfg: &LossConfig) -> f64 {
    let mut g = Graph::new();
    let v = g.input(l);
    let out = classification_loss(&mut g, v, targets, matched, cfg).unwrap();
    g.value(out).item()
}

#[test]
fn confident_correct_pixel_costs_nothing() {
    let l = logits(&[&[100.0, -100.0, -100.0]]);
    assert_eq!(cls_value(l, &[0], 1, &LossConfig::default()), 0.0);
}

#[test]
fn focal_without_focusing_is_cross_entropy() {
    let cfg = LossConfig {
        focal_gamma: 0.0,
        focal_alpha: 1.0,
        ..LossConfig::default()
    };
    let rows: [&[f64]; 2] = [&[0.3, -1.2, 0.5], &[2.0, 0.1, -0.4]];
    let targets = [1, 0];
    let mut ce = 0.0;
    for (r, &t) in rows.iter().zip(&targets) {
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        ce -= (r[t].exp() / z).ln();
    }
    let got = cls_value(logits(&rows), &targets, 1, &cfg);
    assert!((got - ce).abs() < 1e-14);
}

#[test]
fn uniform_two_by_two_hand_value() {
    // n = 1: uniform logits give p = 1/2 for every pixel and target
    let l = Tensor::zeros(&[4, 2]);
    let got = cls_value(l, &[0, 1, 1, 1], 1, &LossConfig::default());
    let want = 0.25 * 0.25 * 2f64.ln() * 4.0;
    assert!((got - want).abs() < 1e-15);
    assert!((got - 0.1733).abs() < 5e-5);
}

fn grid() -> GridConfig {
    toy_model(DecoderConfig::default()).grid
}

/// Raw word maps that decode to `b` at pixel `p`.
fn words_for(g: &mut Graph, gr: &GridConfig, p: usize, b: &Box3D) -> [Var; 4] {
    let n = gr.pixels();
    let (rx, ry) = gr.cell_center(p / gr.w, p % gr.w);
    let mut loc = Tensor::zeros(&[n, 3]);
    loc.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&[(b.x - rx) / gr.cell, (b.y - ry) / gr.cell, b.z]);
    let mut ori = Tensor::zeros(&[n, 2]);
    ori.data_mut()[p * 2..p * 2 + 2].copy_from_slice(&[b.theta.sin(), b.theta.cos()]);
    let mut size = Tensor::zeros(&[n, 3]);
    size.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&[b.l.ln(), b.w.ln(), b.h.ln()]);
    let cat = Tensor::zeros(&[n, 3]);
    [g.input(loc), g.input(ori), g.input(size), g.input(cat)]
}

fn reg_value(pred: &Box3D, gt: &Box3D) -> f64 {
    let gr = grid();
    let mut g = Graph::new();
    let p = 9;
    let words = words_for(&mut g, &gr, p, pred);
    let m = MatchResult {
        assignment: vec![p],
        pair_scores: vec![1.0],
        total: 1.0,
    };
    let out = regression_loss(&mut g, &words, &gr, &[*gt], &m).unwrap();
    g.value(out).item()
}

fn gt_box() -> Box3D {
    Box3D::new([1.3, -0.9, 0.8], [4.0, 1.8, 1.6], 0.4, 0).unwrap()
}

#[test]
fn regression_spot_values() {
    let gt = gt_box();
    assert!(reg_value(&gt, &gt).abs() < 1e-15);
    let shifted = Box3D { x: gt.x + 0.5, ..gt };
    assert!((reg_value(&shifted, &gt) - 0.125).abs() < 1e-12);
    let wrapped = Box3D {
        theta: gt.theta + 2.0 * PI - 0.1,
        ..gt
    };
    assert!((reg_value(&wrapped, &gt) - 0.005).abs() < 1e-12);
}

#[test]
fn regression_without_matches_is_zero() {
    let gr = grid();
    let mut g = Graph::new();
    let words = words_for(&mut g, &gr, 0, &gt_box());
    let m = MatchResult {
        assignment: vec![],
        pair_scores: vec![],
        total: 0.0,
    };
    let out = regression_loss(&mut g, &words, &gr, &[], &m).unwrap();
    assert_eq!(g.value(out).item(), 0.0);
}

fn toy_scene_cfg() -> SceneGenConfig {
    toy_scene_config()
}

fn setup_parts() -> (ModelConfig, LossConfig, MatchConfig) {
    (toy_model(DecoderConfig::default()), LossConfig::default(), MatchConfig::default())
}

#[test]
fn total_loss_composition() {
    let (model, loss, matcher) = setup_parts();
    let store = init_model(&model, 3);
    let scene = generate_scene(&toy_scene_cfg(), 0).unwrap();
    let pf = rasterize(&scene, &model.grid).unwrap();
    let run = |loss: &LossConfig| {
        let setup = LossSetup {
            model: &model,
            loss,
            matcher: &matcher,
        };
        let mut g = Graph::new();
        let sl = scene_loss(&mut g, &store, &setup, &pf, &scene.boxes, None).unwrap();
        (g.value(sl.total).item(), sl.cls, sl.reg)
    };
    let (total, cls, reg) = run(&loss);
    assert!(total >= 0.0 && reg > 0.0);
    assert!((total - (cls + 2.0 * reg)).abs() < 1e-12);
    let (t0, c0, _) = run(&LossConfig {
        lambda_reg: 0.0,
        ..loss
    });
    assert_eq!(t0, c0);
}

#[test]
fn no_ground_truth_means_no_regression() {
    let (model, loss, matcher) = setup_parts();
    let store = init_model(&model, 3);
    let scene = Scene {
        points: vec![[1.0, 0.0, 0.1, 0.2]],
        boxes: vec![],
    };
    let pf = rasterize(&scene, &model.grid).unwrap();
    let setup = LossSetup {
        model: &model,
        loss: &loss,
        matcher: &matcher,
    };
    let mut g = Graph::new();
    let sl = scene_loss(&mut g, &store, &setup, &pf, &[], None).unwrap();
    assert_eq!(sl.reg, 0.0);
    assert!(sl.cls > 0.0);
}

#[test]
fn loss_ignores_ground_truth_order() {
    let (model, loss, matcher) = setup_parts();
    let store = init_model(&model, 4);
    let cfg = SceneGenConfig {
        objects_per_scene: [2, 2],
        ..toy_scene_cfg()
    };
    let scene = generate_scene(&cfg, 1).unwrap();
    let pf = rasterize(&scene, &model.grid).unwrap();
    let setup = LossSetup {
        model: &model,
        loss: &loss,
        matcher: &matcher,
    };
    let value = |gts: &[Box3D]| {
        let mut g = Graph::new();
        let sl = scene_loss(&mut g, &store, &setup, &pf, gts, None).unwrap();
        g.value(sl.total).item()
    };
    let mut rev = scene.boxes.clone();
    rev.reverse();
    assert!((value(&scene.boxes) - value(&rev)).abs() < 1e-12);
}

#[test]
fn gradients_do_not_depend_on_scores_behind_a_fixed_assignment() {
    let (model, loss, matcher) = setup_parts();
    let store = init_model(&model, 5);
    let scene = generate_scene(&toy_scene_cfg(), 2).unwrap();
    let pf = rasterize(&scene, &model.grid).unwrap();
    let grads_with = |alpha: f64| {
        let m = MatchConfig {
            similarity: SimilarityMetric { alpha, ..matcher.similarity },
            ..matcher
        };
        let setup = LossSetup {
            model: &model,
            loss: &loss,
            matcher: &m,
        };
        let mut g = Graph::new();
        let sl = scene_loss(&mut g, &store, &setup, &pf, &scene.boxes, None).unwrap();
        let grads = g.backward(sl.total).unwrap();
        (sl.matching.assignment.clone(), g.param_grads(&grads))
    };
    let (a1, g1) = grads_with(0.25);
    let (a2, g2) = grads_with(0.26);
    assert_eq!(a1, a2, "perturbation changed the assignment");
    assert_eq!(g1, g2);
}

#[test]
fn end_to_end_gradient_check_on_toy_model() {
    let report = toy_grad_check(DecoderConfig::default(), TOY_CHECK_SEED, None).unwrap();
    assert!(report.max_error < 1e-4, "{:?}", report);
    for prefix in ["backbone.", "decoder.head.", "decoder.agg"] {
        assert!(report.group_max(prefix).is_some());
    }
}

#[test]
fn toy_check_point_has_a_nonempty_assignment() {
    let model = toy_model(DecoderConfig::default());
    let (loss, matcher) = (LossConfig::default(), MatchConfig::default());
    let store = toy_check_params(&model, TOY_CHECK_SEED);
    let scene = generate_scene(&toy_scene_config(), TOY_CHECK_SEED).unwrap();
    let setup = LossSetup {
        model: &model,
        loss: &loss,
        matcher: &matcher,
    };
    let obj = FrozenSceneLoss::new(&store, setup, &scene).unwrap();
    assert!(!obj.matching().assignment.is_empty());
}

#[test]
fn injected_fault_is_caught() {
    let report = toy_grad_check(DecoderConfig::default(), TOY_CHECK_SEED, Some(Fault::LinearWeightGrad)).unwrap();
    assert!(report.max_error > 1e-2);
}

fn fit_log(train: &TrainConfig, scenes: &[Scene], model: &ModelConfig) -> (ParamStore, Vec<StepMetrics>) {
    fit_log_threads(train, scenes, model, 1)
}

fn fit_log_threads(train: &TrainConfig, scenes: &[Scene], model: &ModelConfig, threads: usize) -> (ParamStore, Vec<StepMetrics>) {
    let (loss, matcher) = (LossConfig::default(), MatchConfig::default());
    let cfg = FitConfig {
        model,
        loss: &loss,
        matcher: &matcher,
        train,
        threads,
    };
    let mut store = init_model(model, train.seed);
    let mut log = Vec::new();
    fit(&cfg, scenes, &mut store, &mut |m, _| {
        log.push(m.clone());
        Ok(())
    })
    .unwrap();
    (store, log)
}

#[test]
fn zero_epochs_is_a_no_op() {
    let model = toy_model(DecoderConfig::default());
    let scenes: Vec<Scene> = (0..3).map(|i| generate_scene(&toy_scene_cfg(), i).unwrap()).collect();
    let train = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (store, log) = fit_log(&train, &scenes, &model);
    assert!(log.is_empty());
    assert_eq!(store, init_model(&model, 0));
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let model = toy_model(DecoderConfig::default());
    let scenes: Vec<Scene> = (0..4).map(|i| generate_scene(&toy_scene_cfg(), i).unwrap()).collect();
    let train = TrainConfig {
        epochs: 30,
        batch_size: 2,
        lr: 3e-3,
        augment: true,
        ..TrainConfig::default()
    };
    let (a, log_a) = fit_log(&train, &scenes, &model);
    let (b, log_b) = fit_log_threads(&train, &scenes, &model, 3);
    assert_eq!(log_a.len(), 60);
    assert_eq!(a, b);
    let bits = |l: &[StepMetrics]| l.iter().map(|m| m.loss_total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&log_a), bits(&log_b));
    let head: f64 = log_a[..4].iter().map(|m| m.loss_total).sum();
    let tail: f64 = log_a[56..].iter().map(|m| m.loss_total).sum();
    assert!(tail < 0.5 * head, "{head} -> {tail}");
    assert!(log_a.iter().all(|m| m.matched > 0));
}

#[test]
fn resume_continues_the_schedule() {
    let model = toy_model(DecoderConfig::default());
    let scenes: Vec<Scene> = (0..2).map(|i| generate_scene(&toy_scene_cfg(), i).unwrap()).collect();
    let train = TrainConfig {
        epochs: 4,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let (full, _) = fit_log(&train, &scenes, &model);
    let (loss, matcher) = (LossConfig::default(), MatchConfig::default());
    let half = TrainConfig {
        epochs: 2,
        lr_horizon: 8,
        ..train
    };
    let mut store = init_model(&model, 0);
    let cfg = |t| FitConfig {
        model: &model,
        loss: &loss,
        matcher: &matcher,
        train: t,
        threads: 1,
    };
    fit(&cfg(&half), &scenes, &mut store, &mut |_, _| Ok(())).unwrap();
    assert_eq!(store.step(), 4);
    let mut steps = Vec::new();
    fit(&cfg(&train), &scenes, &mut store, &mut |m, _| {
        steps.push(m.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(steps, vec![5, 6, 7, 8]);
    assert_eq!(store, full);
}

#[test]
fn mirror_is_an_involution() {
    let scene = generate_scene(&toy_scene_cfg(), 0).unwrap();
    let back = mirror_scene(&mirror_scene(&scene));
    assert_eq!(back.points, scene.points);
    for (a, b) in back.boxes.iter().zip(&scene.boxes) {
        assert!((normalize_angle(a.theta - b.theta)).abs() < 1e-12);
        assert_eq!((a.x, a.y), (b.x, b.y));
    }
}

#[test]
fn incompatible_parameters_are_reported() {
    let model = toy_model(DecoderConfig::default());
    let mut store = init_model(&model, 0);
    assert!(check_compatible(&store, &model).is_ok());
    store.insert("extra", Tensor::zeros(&[1]));
    assert!(matches!(check_compatible(&store, &model), Err(Error::Compatibility(_))));
    let wide = ModelConfig {
        grid: GridConfig {
            channels: 24,
            ..model.grid
        },
        ..model
    };
    assert!(matches!(check_compatible(&init_model(&model, 0), &wide), Err(Error::Compatibility(_))));
}

