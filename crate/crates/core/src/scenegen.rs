//! Deterministic synthetic LiDAR scenes with ground-truth boxes.
//!
//! The sensor sits at the origin of the ground plane (`z = 0`). Objects
//! rest on the ground and are seen as noisy returns from the vertical faces
//! that face the sensor plus their roofs; the remaining returns are ground
//! clutter. Each scene depends only on `(seed, scene_index)`.
//!
//! Return intensity encodes which end of an object is the front: roof
//! returns brighten linearly towards the front, front faces are bright and
//! rear faces dark. Without this cue a box and its 180°-rotated twin would
//! produce statistically identical point clouds.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{footprint_intersection, Box3D};
use crate::{Error, Result};

/// Axis-aligned detection volume in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Extent {
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.contains_xy(p[0], p[1]) && p[2] >= self.z_min && p[2] <= self.z_max
    }
}

impl Default for Extent {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 51.2,
            y_min: -25.6,
            y_max: 25.6,
            z_min: -0.5,
            z_max: 3.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Mean `(l, w, h)` in meters.
    pub size_mean: [f64; 3],
    /// Per-dimension standard deviation in meters.
    pub size_std: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    pub extent: Extent,
    pub classes: Vec<ClassSpec>,
    /// Inclusive `[min, max]` object count per scene.
    pub objects_per_scene: [usize; 2],
    /// Inclusive `[min, max]` surface returns per object.
    pub points_per_object: [usize; 2],
    pub clutter_points: usize,
    /// Standard deviation of the Gaussian surface noise, meters.
    pub position_jitter: f64,
    pub seed: u64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            extent: Extent::default(),
            classes: vec![
                ClassSpec {
                    name: "vehicle".into(),
                    size_mean: [4.5, 2.0, 1.6],
                    size_std: [0.25, 0.1, 0.1],
                },
                ClassSpec {
                    name: "pedestrian".into(),
                    size_mean: [0.8, 0.8, 1.7],
                    size_std: [0.05, 0.05, 0.1],
                },
            ],
            objects_per_scene: [1, 3],
            points_per_object: [60, 200],
            clutter_points: 500,
            position_jitter: 0.02,
            seed: 0,
        }
    }
}

/// Height band above the ground where clutter returns land.
pub const CLUTTER_HEIGHT: f64 = 0.15;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.extent;
        if !(e.x_max > e.x_min && e.y_max > e.y_min && e.z_max > e.z_min) {
            return Err(Error::Config("scene extent must be positive along every axis".into()));
        }
        if e.z_min > 0.0 || e.z_max < CLUTTER_HEIGHT {
            return Err(Error::Config("scene extent must contain the ground plane z = 0".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("at least one object class is required".into()));
        }
        for c in &self.classes {
            if c.size_mean.iter().any(|&m| !(m > 0.0)) || c.size_std.iter().any(|&s| !(s >= 0.0)) {
                return Err(Error::Config(format!("class `{}` has invalid size statistics", c.name)));
            }
            if c.size_mean[2] > e.z_max {
                return Err(Error::Config(format!("class `{}` is taller than the extent", c.name)));
            }
        }
        if self.objects_per_scene[0] > self.objects_per_scene[1]
            || self.points_per_object[0] > self.points_per_object[1]
        {
            return Err(Error::Config("count ranges must satisfy min <= max".into()));
        }
        if !(self.position_jitter >= 0.0) {
            return Err(Error::Config("position_jitter must be non-negative".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// A point cloud (`x, y, z, intensity` rows) with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub points: Vec<[f64; 4]>,
    pub boxes: Vec<Box3D>,
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_size(spec: &ClassSpec, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut out = [0.0; 3];
    for d in 0..3 {
        let n: f64 = StandardNormal.sample(rng);
        out[d] = (spec.size_mean[d] + spec.size_std[d] * n).max(0.25 * spec.size_mean[d]);
    }
    out
}

fn place_box(cfg: &SceneGenConfig, placed: &[Box3D], rng: &mut ChaCha8Rng) -> Result<Box3D> {
    let e = &cfg.extent;
    let class_id = rng.random_range(0..cfg.classes.len());
    let size = sample_size(&cfg.classes[class_id], rng);
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let x = rng.random_range(e.x_min..e.x_max);
        let y = rng.random_range(e.y_min..e.y_max);
        let theta = rng.random_range(-PI..PI);
        let b = Box3D::new([x, y, 0.5 * size[2]], size, theta, class_id)?;
        let inside = b.footprint().iter().all(|p| e.contains_xy(p[0], p[1]));
        if inside && placed.iter().all(|o| footprint_intersection(o, &b) == 0.0) {
            return Ok(b);
        }
    }
    Err(Error::Generation(format!(
        "could not place a `{}` after {MAX_PLACEMENT_ATTEMPTS} attempts",
        cfg.classes[class_id].name
    )))
}

#[derive(Clone, Copy)]
enum Face {
    Front,
    Rear,
    Left,
    Right,
    Top,
}

fn visible_faces(b: &Box3D) -> Vec<(Face, f64)> {
    let (s, c) = b.theta.sin_cos();
    // direction from the object towards the sensor at the origin
    let (tx, ty) = (-b.x, -b.y);
    let mut faces = Vec::with_capacity(3);
    for (face, nx, ny, area) in [
        (Face::Front, c, s, b.w * b.h),
        (Face::Rear, -c, -s, b.w * b.h),
        (Face::Left, -s, c, b.l * b.h),
        (Face::Right, s, -c, b.l * b.h),
    ] {
        if nx * tx + ny * ty > 0.0 {
            faces.push((face, area));
        }
    }
    faces.push((Face::Top, b.l * b.w));
    faces
}

fn surface_point(b: &Box3D, face: Face, sigma: f64, rng: &mut ChaCha8Rng) -> [f64; 4] {
    let (hl, hw) = (0.5 * b.l, 0.5 * b.w);
    let (a, lat, z, intensity) = match face {
        Face::Front => (hl, rng.random_range(-hw..hw), rng.random_range(0.0..b.h), 0.85),
        Face::Rear => (-hl, rng.random_range(-hw..hw), rng.random_range(0.0..b.h), 0.15),
        Face::Left => (rng.random_range(-hl..hl), hw, rng.random_range(0.0..b.h), 0.5),
        Face::Right => (rng.random_range(-hl..hl), -hw, rng.random_range(0.0..b.h), 0.5),
        Face::Top => {
            let a = rng.random_range(-hl..hl);
            (a, rng.random_range(-hw..hw), b.h, 0.2 + 0.6 * (a / b.l + 0.5))
        }
    };
    let (s, c) = b.theta.sin_cos();
    let mut noise = [0.0; 3];
    for n in &mut noise {
        let g: f64 = StandardNormal.sample(rng);
        *n = sigma * g;
    }
    let jitter: f64 = rng.random_range(-0.05..0.05);
    [
        b.x + a * c - lat * s + noise[0],
        b.y + a * s + lat * c + noise[1],
        b.bottom() + z + noise[2],
        (intensity + jitter).clamp(0.0, 1.0),
    ]
}

fn clamp_into(e: &Extent, p: &mut [f64; 4]) {
    let below = |v: f64| v - v.abs().max(1.0) * 1e-12;
    p[0] = p[0].clamp(e.x_min, below(e.x_max));
    p[1] = p[1].clamp(e.y_min, below(e.y_max));
    p[2] = p[2].clamp(e.z_min, e.z_max);
}

/// Generates scene `index`, also returning the number of surface returns
/// emitted for each box (clutter follows the object points).
pub fn generate_scene_with_counts(cfg: &SceneGenConfig, index: u64) -> Result<(Scene, Vec<usize>)> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index);
    let count = rng.random_range(cfg.objects_per_scene[0]..=cfg.objects_per_scene[1]);
    let mut boxes = Vec::with_capacity(count);
    for _ in 0..count {
        let b = place_box(cfg, &boxes, &mut rng)?;
        boxes.push(b);
    }
    let mut points = Vec::new();
    let mut counts = Vec::with_capacity(boxes.len());
    for b in &boxes {
        let n = rng.random_range(cfg.points_per_object[0]..=cfg.points_per_object[1]);
        let faces = visible_faces(b);
        let total: f64 = faces.iter().map(|f| f.1).sum();
        for _ in 0..n {
            let mut pick = rng.random_range(0.0..total);
            let mut face = faces[faces.len() - 1].0;
            for &(f, area) in &faces {
                if pick < area {
                    face = f;
                    break;
                }
                pick -= area;
            }
            let mut p = surface_point(b, face, cfg.position_jitter, &mut rng);
            clamp_into(&cfg.extent, &mut p);
            points.push(p);
        }
        counts.push(n);
    }
    let e = &cfg.extent;
    for _ in 0..cfg.clutter_points {
        let mut p = [
            rng.random_range(e.x_min..e.x_max),
            rng.random_range(e.y_min..e.y_max),
            rng.random_range(0.0..CLUTTER_HEIGHT),
            rng.random_range(0.0..0.3),
        ];
        clamp_into(e, &mut p);
        points.push(p);
    }
    Ok((Scene { points, boxes }, counts))
}

pub fn generate_scene(cfg: &SceneGenConfig, index: u64) -> Result<Scene> {
    generate_scene_with_counts(cfg, index).map(|(s, _)| s)
}

// ---------------------------------------------------------------------------
// On-disk format
//
// scene file, little-endian:
//   magic "P2SC" | version u32 | point_count u64 | d u32 (= 4)
//   | point_count × d f64 | box_count u64
//   | box_count × (x, y, z, l, w, h, theta: f64; class: u32)
// index.json: { version, config, scene_count, files, checksums }
// ---------------------------------------------------------------------------

pub const SCENE_MAGIC: &[u8; 4] = b"P2SC";
pub const SCENE_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";
const POINT_DIM: u32 = 4;

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let mut buf = Vec::with_capacity(32 + scene.points.len() * 32 + scene.boxes.len() * 60);
    buf.extend_from_slice(SCENE_MAGIC);
    buf.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(scene.points.len() as u64).to_le_bytes());
    buf.extend_from_slice(&POINT_DIM.to_le_bytes());
    for p in &scene.points {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(scene.boxes.len() as u64).to_le_bytes());
    for b in &scene.boxes {
        for v in [b.x, b.y, b.z, b.l, b.w, b.h, b.theta] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(b.class_id as u32).to_le_bytes());
    }
    buf
}

pub fn decode_scene(bytes: &[u8], path: &Path) -> Result<Scene> {
    let truncated = || Error::Truncated(path.to_path_buf());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(truncated)?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != SCENE_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != SCENE_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: SCENE_VERSION,
        });
    }
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if d != POINT_DIM || n.saturating_mul(32) > bytes.len() {
        return Err(truncated());
    }
    let f = |s: &[u8]| f64::from_le_bytes(s.try_into().unwrap());
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let raw = take(32)?;
        points.push([f(&raw[0..8]), f(&raw[8..16]), f(&raw[16..24]), f(&raw[24..32])]);
    }
    let m = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if m.saturating_mul(60) > bytes.len() {
        return Err(truncated());
    }
    let mut boxes = Vec::with_capacity(m);
    for _ in 0..m {
        let raw = take(60)?;
        let v: Vec<f64> = (0..7).map(|i| f(&raw[i * 8..i * 8 + 8])).collect();
        let class_id = u32::from_le_bytes(raw[56..60].try_into().unwrap()) as usize;
        let b = Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], class_id)
            .map_err(|_| truncated())?;
        boxes.push(b);
    }
    if pos != bytes.len() {
        return Err(truncated());
    }
    Ok(Scene { points, boxes })
}

pub fn write_scene_file(path: &Path, scene: &Scene) -> Result<String> {
    let bytes = encode_scene(scene);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_scene_file(path: &Path) -> Result<Scene> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scene(&bytes, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub version: u32,
    pub config: SceneGenConfig,
    pub scene_count: usize,
    pub files: Vec<String>,
    pub checksums: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SceneGenConfig,
    pub scenes: Vec<Scene>,
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:05}.p2sc")
}

/// Generates `count` scenes into `dir` together with `index.json`.
pub fn write_dataset(dir: &Path, cfg: &SceneGenConfig, count: usize) -> Result<DatasetIndex> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(count);
    let mut checksums = BTreeMap::new();
    for i in 0..count {
        let scene = generate_scene(cfg, i as u64)?;
        let name = scene_file_name(i);
        let sum = write_scene_file(&dir.join(&name), &scene)?;
        checksums.insert(name.clone(), sum);
        files.push(name);
    }
    let index = DatasetIndex {
        version: SCENE_VERSION,
        config: cfg.clone(),
        scene_count: count,
        files,
        checksums,
    };
    let path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if index.version != SCENE_VERSION {
        return Err(Error::Version {
            path,
            found: index.version,
            expected: SCENE_VERSION,
        });
    }
    if index.files.len() != index.scene_count {
        return Err(Error::Json {
            path,
            message: format!("{} files listed for {} scenes", index.files.len(), index.scene_count),
        });
    }
    Ok(index)
}

/// Reads every scene listed in `dir/index.json`, verifying structure and
/// checksums.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let index = read_index(dir)?;
    let mut scenes = Vec::with_capacity(index.scene_count);
    for name in &index.files {
        let path: PathBuf = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let scene = decode_scene(&bytes, &path)?;
        match index.checksums.get(name) {
            Some(sum) if *sum == sha256_hex(&bytes) => {}
            _ => return Err(Error::Checksum(path)),
        }
        scenes.push(scene);
    }
    Ok(Dataset {
        config: index.config,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::bev_iou;

    fn cfg() -> SceneGenConfig {
        SceneGenConfig {
            seed: 42,
            ..SceneGenConfig::default()
        }
    }

    #[test]
    fn zero_objects_gives_only_clutter() {
        let c = SceneGenConfig {
            objects_per_scene: [0, 0],
            ..cfg()
        };
        let s = generate_scene(&c, 3).unwrap();
        assert!(s.boxes.is_empty());
        assert_eq!(s.points.len(), c.clutter_points);
    }

    #[test]
    fn same_seed_and_index_is_bitwise_identical() {
        let a = encode_scene(&generate_scene(&cfg(), 5).unwrap());
        let b = encode_scene(&generate_scene(&cfg(), 5).unwrap());
        assert_eq!(a, b);
        let other = encode_scene(&generate_scene(&cfg(), 6).unwrap());
        assert_ne!(a, other);
    }

    #[test]
    fn point_count_matches_object_and_clutter_counts() {
        let c = cfg();
        for i in 0..10 {
            let (s, counts) = generate_scene_with_counts(&c, i).unwrap();
            assert_eq!(counts.len(), s.boxes.len());
            // independent count: returns near each box vs. clutter band elsewhere
            let mut near = vec![0usize; s.boxes.len()];
            let mut clutter = 0usize;
            for (pi, p) in s.points.iter().enumerate() {
                let owner = counts
                    .iter()
                    .scan(0usize, |acc, &n| {
                        *acc += n;
                        Some(*acc)
                    })
                    .position(|end| pi < end);
                match owner {
                    Some(o) => near[o] += 1,
                    None => {
                        assert!(p[2] < CLUTTER_HEIGHT);
                        clutter += 1;
                    }
                }
            }
            assert_eq!(near, counts);
            assert_eq!(s.points.len(), counts.iter().sum::<usize>() + c.clutter_points);
            assert_eq!(clutter, c.clutter_points);
        }
    }

    #[test]
    fn boxes_never_overlap_and_stay_inside() {
        let c = cfg();
        for i in 0..50 {
            let s = generate_scene(&c, i).unwrap();
            for (k, a) in s.boxes.iter().enumerate() {
                for p in a.footprint() {
                    assert!(c.extent.contains_xy(p[0], p[1]));
                }
                for b in &s.boxes[k + 1..] {
                    assert_eq!(bev_iou(a, b), 0.0);
                }
            }
            assert!(s.points.iter().all(|p| c.extent.contains([p[0], p[1], p[2]])));
            assert!(s.points.iter().all(|p| (0.0..=1.0).contains(&p[3])));
        }
    }

    #[test]
    fn surface_points_hug_their_boxes() {
        let c = cfg();
        let margin = 3.0 * c.position_jitter;
        for i in 0..20 {
            let (s, counts) = generate_scene_with_counts(&c, i).unwrap();
            let mut start = 0;
            for (b, &n) in s.boxes.iter().zip(&counts) {
                let (sn, cs) = b.theta.sin_cos();
                let inside = s.points[start..start + n]
                    .iter()
                    .filter(|p| {
                        let (dx, dy) = (p[0] - b.x, p[1] - b.y);
                        let a = dx * cs + dy * sn;
                        let lat = -dx * sn + dy * cs;
                        a.abs() <= 0.5 * b.l + margin
                            && lat.abs() <= 0.5 * b.w + margin
                            && p[2] >= b.bottom() - margin
                            && p[2] <= b.top() + margin
                    })
                    .count();
                assert!(inside as f64 >= 0.95 * n as f64, "{inside}/{n}");
                start += n;
            }
        }
    }

    #[test]
    fn impossible_config_fails_to_generate() {
        let c = SceneGenConfig {
            extent: Extent {
                x_min: 0.0,
                x_max: 3.0,
                y_min: 0.0,
                y_max: 3.0,
                z_min: -0.5,
                z_max: 3.5,
            },
            objects_per_scene: [1, 1],
            classes: vec![ClassSpec {
                name: "bus".into(),
                size_mean: [12.0, 3.0, 3.0],
                size_std: [0.0; 3],
            }],
            ..cfg()
        };
        assert!(matches!(generate_scene(&c, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let c = SceneGenConfig {
            clutter_points: 50,
            ..cfg()
        };
        let index = write_dataset(dir.path(), &c, 4).unwrap();
        let on_disk = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".p2sc"))
            .count();
        assert_eq!(index.scene_count, on_disk);

        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.config, c);
        for (i, s) in ds.scenes.iter().enumerate() {
            let fresh = generate_scene(&c, i as u64).unwrap();
            assert_eq!(s, &fresh);
            for (a, b) in s.points.iter().zip(&fresh.points) {
                for k in 0..4 {
                    assert_eq!(a[k].to_bits(), b[k].to_bits());
                }
            }
        }

        let target = dir.path().join(scene_file_name(2));
        let mut bytes = fs::read(&target).unwrap();
        let original = bytes.clone();
        bytes[40] ^= 0x01;
        fs::write(&target, &bytes).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Checksum(p)) => assert_eq!(p, target),
            other => panic!("expected checksum error, got {other:?}"),
        }

        fs::write(&target, &original[..original.len() - 10]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Truncated(p)) if p == target));

        let mut bytes = original.clone();
        bytes[4] = 7;
        fs::write(&target, &bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn empty_dataset_has_valid_index() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &cfg(), 0).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert!(ds.scenes.is_empty());
    }
}
