//! Dense per-pixel sequence decoding.
//!
//! Every BEV pixel is the region word of one candidate object. The decoder
//! starts from the feature map as hidden state and, for each of the four
//! remaining words in the configured order, reads the word off the hidden
//! state with a linear head, places sample points implied by the words so
//! far, and refreshes the hidden state from the bilinear samples.
//!
//! Sample patterns depend on the step position:
//!
//! | after step | points | pattern                                           |
//! |------------|--------|---------------------------------------------------|
//! | 1          | 1      | decoded center                                    |
//! | 2          | 4      | center ± half region extent along / across heading |
//! | 3          | 4      | decoded footprint corners                         |
//!
//! Words a pattern needs but that are not decoded yet fall back to the
//! region center, `θ = 0`, and `l = w = cell`.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::GridConfig;
use crate::numerics::{bilinear_taps, GatherTable, Graph, ParamStore, Tensor, Var};
use crate::words::{
    CategoryWord, LocationWord, ObjectSequence, OrientationWord, RegionWord, SizeWord, WordKind, WordOrder,
};
use crate::{Error, Result};

/// Sample points gathered after steps 1, 2 and 3.
pub const SAMPLE_COUNTS: [usize; 3] = [1, 4, 4];

/// Bound on log-sizes when placing sample points.
const LOG_SIZE_LIMIT: f64 = 6.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Center, heading probes, then footprint corners.
    #[default]
    Progressive,
    /// Every sample at the pixel's own center.
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub order: WordOrder,
    pub classes: usize,
    pub sampler: SamplerKind,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            order: WordOrder::default(),
            classes: 2,
            sampler: SamplerKind::Progressive,
        }
    }
}

/// Index of `kind` in per-kind arrays (the order of [`WordKind::ALL`]).
pub fn slot(kind: WordKind) -> usize {
    kind as usize
}

pub fn head_names(kind: WordKind) -> [String; 2] {
    [
        format!("decoder.head.{}.weight", kind.name()),
        format!("decoder.head.{}.bias", kind.name()),
    ]
}

/// Parameter names of the aggregation after step `step` (1-based).
pub fn agg_names(step: usize) -> [String; 2] {
    [format!("decoder.agg{step}.weight"), format!("decoder.agg{step}.bias")]
}

/// Background logit that puts each foreground class near 1% at start.
pub fn background_prior_logit(classes: usize) -> f64 {
    (100.0 - classes as f64).max(1.0).ln()
}

pub fn init_params(store: &mut ParamStore, cfg: &DecoderConfig, channels: usize, rng: &mut impl Rng) {
    let c = channels;
    let head_std = 0.1 / (c as f64).sqrt();
    for kind in WordKind::ALL {
        let width = kind.width(cfg.classes);
        let [w, b] = head_names(kind);
        store.insert(w, Tensor::randn(&[width, c], head_std, rng));
        let mut bias = Tensor::zeros(&[width]);
        if kind == WordKind::Category {
            bias.data_mut()[cfg.classes] = background_prior_logit(cfg.classes);
        }
        store.insert(b, bias);
    }
    for (j, &n) in SAMPLE_COUNTS.iter().enumerate() {
        let [w, b] = agg_names(j + 1);
        store.insert(w, Tensor::randn(&[c, n * c], (2.0 / (n * c) as f64).sqrt(), rng));
        store.insert(b, Tensor::zeros(&[c]));
    }
}

/// Applies the head for `kind` at every row of `hidden: [HW, C]`.
/// Returns raw values; the category word is returned as logits.
pub fn predict_word(g: &mut Graph, store: &ParamStore, hidden: Var, kind: WordKind) -> Result<Var> {
    let [wn, bn] = head_names(kind);
    let w = g.param(store, &wn)?;
    let b = g.param(store, &bn)?;
    g.linear(hidden, w, b)
}

/// Per-kind word values decoded so far, each `[HW, width]`.
pub type PartialWords<'a> = [Option<&'a Tensor>; 4];

fn pixel_frame(words: &PartialWords, grid: &GridConfig, p: usize) -> ((f64, f64), f64, (f64, f64)) {
    let (rx, ry) = grid.cell_center(p / grid.w, p % grid.w);
    let center = match words[slot(WordKind::Location)] {
        Some(t) => {
            let r = t.row(p);
            (rx + r[0] * grid.cell, ry + r[1] * grid.cell)
        }
        None => (rx, ry),
    };
    let theta = match words[slot(WordKind::Orientation)] {
        Some(t) => {
            let r = t.row(p);
            r[0].atan2(r[1])
        }
        None => 0.0,
    };
    let dims = match words[slot(WordKind::Size)] {
        Some(t) => {
            let r = t.row(p);
            let d = |u: f64| u.clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp();
            (d(r[0]), d(r[1]))
        }
        None => (grid.cell, grid.cell),
    };
    (center, theta, dims)
}

/// World-frame sample points after step `step` (1-based) for every pixel,
/// `SAMPLE_COUNTS[step - 1]` consecutive points per pixel.
pub fn sample_points(words: &PartialWords, step: usize, grid: &GridConfig, sampler: SamplerKind) -> Result<Vec<(f64, f64)>> {
    if !(1..=3).contains(&step) {
        return Err(Error::Config(format!("no sampler after step {step}")));
    }
    let n = SAMPLE_COUNTS[step - 1];
    let mut out = Vec::with_capacity(grid.pixels() * n);
    for p in 0..grid.pixels() {
        if sampler == SamplerKind::Static {
            let c = grid.cell_center(p / grid.w, p % grid.w);
            out.extend(std::iter::repeat_n(c, n));
            continue;
        }
        let ((cx, cy), theta, (l, w)) = pixel_frame(words, grid, p);
        let (s, c) = theta.sin_cos();
        match step {
            1 => out.push((cx, cy)),
            2 => {
                let (a, b) = (0.5 * grid.cell, 0.5 * grid.cell);
                out.extend([
                    (cx + a * c, cy + a * s),
                    (cx - a * c, cy - a * s),
                    (cx - b * s, cy + b * c),
                    (cx + b * s, cy - b * c),
                ]);
            }
            _ => {
                let (hl, hw) = (0.5 * l, 0.5 * w);
                for (a, b) in [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)] {
                    out.push((cx + a * c - b * s, cy + a * s + b * c));
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear gather table for world-frame points, `slots` per pixel.
pub fn gather_table(points: &[(f64, f64)], slots: usize, grid: &GridConfig) -> Result<GatherTable> {
    let taps = points
        .iter()
        .map(|&(x, y)| bilinear_taps(grid.to_cell_units(x, y), grid.h, grid.w))
        .collect::<Result<Vec<_>>>()?;
    GatherTable::new(grid.pixels(), slots, taps)
}

/// `H_{j+1} = relu(A_j [samples of H_j])` for `hidden: [HW, C]`.
pub fn update_hidden(g: &mut Graph, store: &ParamStore, hidden: Var, table: Rc<GatherTable>, step: usize) -> Result<Var> {
    let [wn, bn] = agg_names(step);
    let w = g.param(store, &wn)?;
    let b = g.param(store, &bn)?;
    let gathered = g.gather(hidden, table)?;
    let x = g.linear(gathered, w, b)?;
    Ok(g.relu(x))
}

/// Graph handles produced by one decoder pass.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    /// Raw word values per kind (index with [`slot`]); category holds logits.
    pub words: [Var; 4],
    /// Category probabilities.
    pub category: Var,
    /// Hidden states `H_1 ..= H_4`, each `[HW, C]`.
    pub hidden: Vec<Var>,
    /// Gather tables used after steps 1..=3.
    pub tables: Vec<Rc<GatherTable>>,
}

/// Records the full decoder on `g` from `f: [H, W, C]`.
///
/// With `frozen` set, the given gather tables replace freshly computed
/// sample points; finite-difference checks use this to hold the sample
/// locations fixed.
pub fn decode_graph(
    g: &mut Graph,
    store: &ParamStore,
    f: Var,
    cfg: &DecoderConfig,
    grid: &GridConfig,
    frozen: Option<&[Rc<GatherTable>]>,
) -> Result<DecoderTrace> {
    let shape = g.value(f).shape().to_vec();
    if shape != [grid.h, grid.w, grid.channels] {
        return Err(Error::shape("decoder input", &shape, &[grid.h, grid.w, grid.channels]));
    }
    if let Some(t) = frozen {
        if t.len() != 3 {
            return Err(Error::shape("frozen sample tables", &[t.len()], &[3]));
        }
    }
    let mut hidden = g.reshape(f, &[grid.pixels(), grid.channels])?;
    let mut states = vec![hidden];
    let mut words: [Option<Var>; 4] = [None; 4];
    let mut tables = Vec::with_capacity(3);
    for (j, kind) in cfg.order.kinds().into_iter().enumerate() {
        words[slot(kind)] = Some(predict_word(g, store, hidden, kind)?);
        if j == 3 {
            break;
        }
        let table = match frozen {
            Some(t) => t[j].clone(),
            None => {
                let values: PartialWords = words.map(|w| w.map(|v| g.value(v)));
                let points = sample_points(&values, j + 1, grid, cfg.sampler)?;
                Rc::new(gather_table(&points, SAMPLE_COUNTS[j], grid)?)
            }
        };
        hidden = update_hidden(g, store, hidden, table.clone(), j + 1)?;
        states.push(hidden);
        tables.push(table);
    }
    let words = words.map(|w| w.expect("every kind decoded"));
    let category = g.softmax(words[slot(WordKind::Category)]);
    Ok(DecoderTrace {
        words,
        category,
        hidden: states,
        tables,
    })
}

/// One object sequence per pixel, row-major over `(i, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSequenceMap {
    pub h: usize,
    pub w: usize,
    pub sequences: Vec<ObjectSequence>,
}

impl DenseSequenceMap {
    /// Assembles sequences from word values (`category` as probabilities).
    pub fn from_words(grid: &GridConfig, location: &Tensor, orientation: &Tensor, size: &Tensor, category: &Tensor) -> Result<Self> {
        let n = grid.pixels();
        for (name, t, width) in [
            ("location map", location, 3),
            ("orientation map", orientation, 2),
            ("size map", size, 3),
        ] {
            if t.shape() != [n, width] {
                return Err(Error::shape(name, t.shape(), &[n, width]));
            }
        }
        if category.rank() != 2 || category.rows() != n || category.last_dim() < 2 {
            return Err(Error::shape("category map", category.shape(), &[n, 0]));
        }
        let mut sequences = Vec::with_capacity(n);
        for p in 0..n {
            let (rx, ry) = grid.cell_center(p / grid.w, p % grid.w);
            let (l, o, s) = (location.row(p), orientation.row(p), size.row(p));
            sequences.push(ObjectSequence {
                region: RegionWord::new(rx, ry, grid.cell, grid.cell)?,
                location: LocationWord {
                    l_x: l[0],
                    l_y: l[1],
                    z: l[2],
                },
                orientation: OrientationWord { s: o[0], c: o[1] },
                size: SizeWord {
                    u_l: s[0],
                    u_w: s[1],
                    u_h: s[2],
                },
                category: CategoryWord {
                    p: category.row(p).to_vec(),
                },
            });
        }
        Ok(Self {
            h: grid.h,
            w: grid.w,
            sequences,
        })
    }

    pub fn from_trace(g: &Graph, trace: &DecoderTrace, grid: &GridConfig) -> Result<Self> {
        let w = |k: WordKind| g.value(trace.words[slot(k)]);
        Self::from_words(
            grid,
            w(WordKind::Location),
            w(WordKind::Orientation),
            w(WordKind::Size),
            g.value(trace.category),
        )
    }

    pub fn get(&self, i: usize, k: usize) -> &ObjectSequence {
        &self.sequences[i * self.w + k]
    }
}

/// Decodes a feature map `f: [H, W, C]` into a dense sequence map.
pub fn decode_scene(f: &Tensor, store: &ParamStore, cfg: &DecoderConfig, grid: &GridConfig) -> Result<DenseSequenceMap> {
    let mut g = Graph::new();
    let fv = g.input(f.clone());
    let trace = decode_graph(&mut g, store, fv, cfg, grid, None)?;
    DenseSequenceMap::from_trace(&g, &trace, grid)
}
