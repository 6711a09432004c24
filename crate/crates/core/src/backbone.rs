//! Pillar rasterization and the learnable BEV encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::scenegen::{Extent, Scene};
use crate::{Error, Result};

/// Statistics stored per pillar.
pub const PILLAR_FEATURES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub extent: Extent,
    /// Cells along x (rows).
    pub h: usize,
    /// Cells along y (columns).
    pub w: usize,
    /// Cell edge in meters.
    pub cell: f64,
    pub channels: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            extent: Extent::default(),
            h: 64,
            w: 64,
            cell: 0.8,
            channels: 16,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.extent;
        let fits = |n: usize, span: f64| ((n as f64) * self.cell - span).abs() <= 1e-9 * span.abs().max(1.0);
        if !(self.cell > 0.0) || self.h == 0 || self.w == 0 {
            return Err(Error::Config("grid needs positive cell size and cell counts".into()));
        }
        if !fits(self.h, e.x_max - e.x_min) || !fits(self.w, e.y_max - e.y_min) {
            return Err(Error::Config(format!(
                "grid {}x{} at {} m does not tile the extent",
                self.h, self.w, self.cell
            )));
        }
        if self.channels < PILLAR_FEATURES {
            return Err(Error::Config(format!("channel count must be at least {PILLAR_FEATURES}")));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// World coordinates of the center of cell `(i, k)`.
    pub fn cell_center(&self, i: usize, k: usize) -> (f64, f64) {
        (
            self.extent.x_min + (i as f64 + 0.5) * self.cell,
            self.extent.y_min + (k as f64 + 0.5) * self.cell,
        )
    }

    /// World `(x, y)` to continuous cell units (integers at cell centers).
    pub fn to_cell_units(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.extent.x_min) / self.cell - 0.5,
            (y - self.extent.y_min) / self.cell - 0.5,
        )
    }

    /// Cell containing world `(x, y)`, if any.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let u = ((x - self.extent.x_min) / self.cell).floor();
        let v = ((y - self.extent.y_min) / self.cell).floor();
        if u >= 0.0 && v >= 0.0 && (u as usize) < self.h && (v as usize) < self.w {
            Some((u as usize, v as usize))
        } else {
            None
        }
    }
}

/// `[H, W, 8]` per-pillar statistics: log1p(count), mean dx, mean dy,
/// mean z, max z, min z, mean intensity, occupancy.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarFeatures {
    pub features: Tensor,
    /// Points that fell outside the extent.
    pub dropped: usize,
}

/// Bins points into pillars and computes their statistics.
///
/// Points are reduced in a canonical order (by cell, then by value) so the
/// result does not depend on the input order.
pub fn rasterize(scene: &Scene, grid: &GridConfig) -> Result<PillarFeatures> {
    grid.validate()?;
    let e = &grid.extent;
    let mut binned: Vec<(usize, [f64; 4])> = Vec::with_capacity(scene.points.len());
    let mut dropped = 0;
    for p in &scene.points {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("scene point".into()));
        }
        match grid.cell_of(p[0], p[1]) {
            Some((i, k)) if p[2] >= e.z_min && p[2] <= e.z_max => binned.push((i * grid.w + k, *p)),
            _ => dropped += 1,
        }
    }
    binned.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            a.1.iter()
                .zip(&b.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });

    let mut out = vec![0.0; grid.pixels() * PILLAR_FEATURES];
    let mut start = 0;
    while start < binned.len() {
        let cell = binned[start].0;
        let end = start + binned[start..].iter().take_while(|b| b.0 == cell).count();
        let (i, k) = (cell / grid.w, cell % grid.w);
        let (cx, cy) = grid.cell_center(i, k);
        let n = (end - start) as f64;
        let (mut sx, mut sy, mut sz, mut si) = (0.0, 0.0, 0.0, 0.0);
        let (mut zmax, mut zmin) = (f64::NEG_INFINITY, f64::INFINITY);
        for (_, p) in &binned[start..end] {
            sx += p[0] - cx;
            sy += p[1] - cy;
            sz += p[2];
            si += p[3];
            zmax = zmax.max(p[2]);
            zmin = zmin.min(p[2]);
        }
        let f = &mut out[cell * PILLAR_FEATURES..][..PILLAR_FEATURES];
        f.copy_from_slice(&[n.ln_1p(), sx / n, sy / n, sz / n, zmax, zmin, si / n, 1.0]);
        start = end;
    }
    Ok(PillarFeatures {
        features: Tensor::new(&[grid.h, grid.w, PILLAR_FEATURES], out)?,
        dropped,
    })
}

pub const PARAM_NAMES: [&str; 6] = [
    "backbone.lift.weight",
    "backbone.lift.bias",
    "backbone.conv1.kernel",
    "backbone.conv1.bias",
    "backbone.conv2.kernel",
    "backbone.conv2.bias",
];

/// He-normal weights and zero biases for a `channels`-wide encoder.
pub fn init_params(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) {
    let c = channels;
    let conv_std = (2.0 / (9 * c) as f64).sqrt();
    store.insert(
        PARAM_NAMES[0],
        Tensor::randn(&[c, PILLAR_FEATURES], (2.0 / PILLAR_FEATURES as f64).sqrt(), rng),
    );
    store.insert(PARAM_NAMES[1], Tensor::zeros(&[c]));
    store.insert(PARAM_NAMES[2], Tensor::randn(&[c, 3, 3, c], conv_std, rng));
    store.insert(PARAM_NAMES[3], Tensor::zeros(&[c]));
    store.insert(PARAM_NAMES[4], Tensor::randn(&[c, 3, 3, c], conv_std, rng));
    store.insert(PARAM_NAMES[5], Tensor::zeros(&[c]));
}

/// Records the encoder on `g`: lift `P → C` with relu, then two
/// conv3x3 + relu blocks. Returns `F` shaped `[H, W, C]`.
pub fn encode(g: &mut Graph, store: &ParamStore, pf: &PillarFeatures) -> Result<Var> {
    let shape = pf.features.shape();
    if shape.len() != 3 || shape[2] != PILLAR_FEATURES {
        return Err(Error::shape("pillar features", shape, &[0, 0, PILLAR_FEATURES]));
    }
    let p: Vec<Var> = PARAM_NAMES
        .iter()
        .map(|n| g.param(store, n))
        .collect::<Result<_>>()?;
    let x = g.input(pf.features.clone());
    let x = g.linear(x, p[0], p[1])?;
    let x = g.relu(x);
    let x = g.conv3x3(x, p[2], p[3])?;
    let x = g.relu(x);
    let x = g.conv3x3(x, p[4], p[5])?;
    Ok(g.relu(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Objective, GRAD_CHECK_EPS};
    use crate::scenegen::{generate_scene, SceneGenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn small_grid() -> GridConfig {
        GridConfig {
            extent: Extent {
                x_min: 0.0,
                x_max: 8.0,
                y_min: -4.0,
                y_max: 4.0,
                z_min: -0.5,
                z_max: 3.5,
            },
            h: 8,
            w: 8,
            cell: 1.0,
            channels: 8,
        }
    }

    #[test]
    fn grid_validation() {
        assert!(GridConfig::default().validate().is_ok());
        let mut g = GridConfig::default();
        g.h = 63;
        assert!(g.validate().is_err());
        let mut g = GridConfig::default();
        g.channels = 4;
        assert!(g.validate().is_err());
    }

    #[test]
    fn empty_scene_is_all_zero() {
        let scene = Scene {
            points: vec![],
            boxes: vec![],
        };
        let pf = rasterize(&scene, &small_grid()).unwrap();
        assert!(pf.features.data().iter().all(|&v| v == 0.0));
        assert_eq!(pf.dropped, 0);
    }

    #[test]
    fn single_point_at_cell_center() {
        let grid = small_grid();
        let (x, y) = grid.cell_center(3, 5);
        let scene = Scene {
            points: vec![[x, y, 1.25, 0.5]],
            boxes: vec![],
        };
        let pf = rasterize(&scene, &grid).unwrap();
        let f = &pf.features.data()[(3 * 8 + 5) * PILLAR_FEATURES..][..PILLAR_FEATURES];
        assert_eq!(f, &[2f64.ln(), 0.0, 0.0, 1.25, 1.25, 1.25, 0.5, 1.0]);
        let occupied = pf.features.data().chunks(PILLAR_FEATURES).filter(|c| c[7] == 1.0).count();
        assert_eq!(occupied, 1);
    }

    #[test]
    fn out_of_extent_points_are_counted() {
        let scene = Scene {
            points: vec![[-1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 9.0, 0.0], [1.0, 4.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
            boxes: vec![],
        };
        let pf = rasterize(&scene, &small_grid()).unwrap();
        assert_eq!(pf.dropped, 3);
    }

    #[test]
    fn matches_naive_per_point_binning() {
        let cfg = SceneGenConfig {
            seed: 9,
            ..SceneGenConfig::default()
        };
        let grid = GridConfig::default();
        let scene = generate_scene(&cfg, 0).unwrap();
        let pf = rasterize(&scene, &grid).unwrap();
        for i in 0..grid.h {
            for k in 0..grid.w {
                let (x0, y0) = (i as f64 * 0.8, -25.6 + k as f64 * 0.8);
                let members: Vec<&[f64; 4]> = scene
                    .points
                    .iter()
                    .filter(|p| {
                        let u = ((p[0] - 0.0) / 0.8).floor() as i64;
                        let v = ((p[1] + 25.6) / 0.8).floor() as i64;
                        u == i as i64 && v == k as i64
                    })
                    .collect();
                let f = &pf.features.data()[(i * grid.w + k) * PILLAR_FEATURES..][..PILLAR_FEATURES];
                if members.is_empty() {
                    assert!(f.iter().all(|&v| v == 0.0));
                    continue;
                }
                let n = members.len() as f64;
                let mean = |d: usize, off: f64| members.iter().map(|p| p[d] - off).sum::<f64>() / n;
                let expect = [
                    (1.0 + n).ln(),
                    mean(0, x0 + 0.4),
                    mean(1, y0 + 0.4),
                    mean(2, 0.0),
                    members.iter().map(|p| p[2]).fold(f64::MIN, f64::max),
                    members.iter().map(|p| p[2]).fold(f64::MAX, f64::min),
                    mean(3, 0.0),
                    1.0,
                ];
                for (a, b) in f.iter().zip(expect) {
                    assert!((a - b).abs() < 1e-9, "cell ({i},{k}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn permutation_invariant_bit_exact() {
        let cfg = SceneGenConfig {
            seed: 3,
            ..SceneGenConfig::default()
        };
        let grid = GridConfig::default();
        let scene = generate_scene(&cfg, 1).unwrap();
        let base = rasterize(&scene, &grid).unwrap();
        let mut shuffled = scene.clone();
        use rand::seq::SliceRandom;
        shuffled.points.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        shuffled.points.reverse();
        let other = rasterize(&shuffled, &grid).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&base.features), bits(&other.features));
    }

    fn encoded(store: &ParamStore, pf: &PillarFeatures) -> Tensor {
        let mut g = Graph::new();
        let f = encode(&mut g, store, pf).unwrap();
        g.value(f).clone()
    }

    #[test]
    fn zero_features_and_biases_give_zero_map() {
        let mut store = ParamStore::new();
        init_params(&mut store, 8, &mut ChaCha8Rng::seed_from_u64(0));
        let pf = PillarFeatures {
            features: Tensor::zeros(&[5, 7, PILLAR_FEATURES]),
            dropped: 0,
        };
        let f = encoded(&store, &pf);
        assert_eq!(f.shape(), &[5, 7, 8]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_feature_shape() {
        let mut store = ParamStore::new();
        init_params(&mut store, 8, &mut ChaCha8Rng::seed_from_u64(0));
        let pf = PillarFeatures {
            features: Tensor::zeros(&[5, 7, 3]),
            dropped: 0,
        };
        assert!(matches!(encode(&mut Graph::new(), &store, &pf), Err(Error::Shape { .. })));
    }

    #[test]
    fn translation_equivariance_in_interior() {
        let grid = GridConfig::default();
        let mut store = ParamStore::new();
        init_params(&mut store, grid.channels, &mut ChaCha8Rng::seed_from_u64(5));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // points kept away from cell borders so binning survives the shift
        let points: Vec<[f64; 4]> = (0..400)
            .map(|_| {
                let i = rng.random_range(10..40) as f64;
                let k = rng.random_range(10..40) as f64;
                [
                    (i + 0.5 + rng.random_range(-0.4..0.4)) * 0.8,
                    -25.6 + (k + 0.5 + rng.random_range(-0.4..0.4)) * 0.8,
                    rng.random_range(0.0..2.0),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();
        let scene = Scene {
            points: points.clone(),
            boxes: vec![],
        };
        let (si, sk) = (3usize, 2usize);
        let shifted = Scene {
            points: points
                .iter()
                .map(|p| [p[0] + si as f64 * 0.8, p[1] + sk as f64 * 0.8, p[2], p[3]])
                .collect(),
            boxes: vec![],
        };
        let a = encoded(&store, &rasterize(&scene, &grid).unwrap());
        let b = encoded(&store, &rasterize(&shifted, &grid).unwrap());
        let c = grid.channels;
        for i in 3..grid.h - 3 - si {
            for k in 3..grid.w - 3 - sk {
                let ra = &a.data()[(i * grid.w + k) * c..][..c];
                let rb = &b.data()[((i + si) * grid.w + k + sk) * c..][..c];
                for (x, y) in ra.iter().zip(rb) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    struct SumF {
        pf: PillarFeatures,
    }

    impl Objective for SumF {
        fn value(&self, store: &ParamStore) -> Result<f64> {
            Ok(encoded(store, &self.pf).data().iter().map(|v| v * v).sum())
        }

        fn value_and_grad(&self, store: &ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)> {
            let mut g = Graph::new();
            let f = encode(&mut g, store, &self.pf)?;
            let sq = g.mul(f, f)?;
            let loss = g.sum(sq);
            let grads = g.backward(loss)?;
            Ok((g.value(loss).item(), g.param_grads(&grads)))
        }
    }

    #[test]
    fn encoder_gradients_pass_grad_check() {
        let grid = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points = (0..60)
            .map(|_| {
                [
                    rng.random_range(0.0..8.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(0.0..2.0),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();
        let pf = rasterize(&Scene { points, boxes: vec![] }, &grid).unwrap();
        let mut store = ParamStore::new();
        init_params(&mut store, 8, &mut rng);
        for name in [PARAM_NAMES[1], PARAM_NAMES[3], PARAM_NAMES[5]] {
            *store.value_mut(name).unwrap() = Tensor::filled(&[8], 0.05);
        }
        let report = grad_check(&store, &SumF { pf }, GRAD_CHECK_EPS).unwrap();
        assert!(report.max_error < 1e-4, "{report:?}");
    }
}
