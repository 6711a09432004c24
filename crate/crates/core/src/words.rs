//! The parameter-free translation between a box and its five words.
//!
//! A box is written relative to a BEV region (normally one grid cell):
//!
//! | word        | components                                  |
//! |-------------|---------------------------------------------|
//! | region      | `r_x, r_y` (center, m) and extent `r_l, r_w` |
//! | location    | `(x - r_x)/r_l`, `(y - r_y)/r_w`, `z`       |
//! | orientation | `sin θ`, `cos θ`                            |
//! | size        | `ln l`, `ln w`, `ln h`                      |
//! | category    | probabilities over `n` classes + background |
//!
//! The background probability occupies the last category slot.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::Box3D;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionWord {
    pub r_x: f64,
    pub r_y: f64,
    pub r_l: f64,
    pub r_w: f64,
}

impl RegionWord {
    pub fn new(r_x: f64, r_y: f64, r_l: f64, r_w: f64) -> Result<Self> {
        if !(r_l > 0.0 && r_w > 0.0) {
            return Err(Error::Config(format!(
                "region extent must be positive, got ({r_l}, {r_w})"
            )));
        }
        Ok(Self { r_x, r_y, r_l, r_w })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationWord {
    pub l_x: f64,
    pub l_y: f64,
    pub z: f64,
}

/// `(sin θ, cos θ)`. Predicted words need not lie on the unit circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationWord {
    pub s: f64,
    pub c: f64,
}

impl OrientationWord {
    pub fn angle(&self) -> f64 {
        self.s.atan2(self.c)
    }
}

/// Log-sizes `(ln l, ln w, ln h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeWord {
    pub u_l: f64,
    pub u_w: f64,
    pub u_h: f64,
}

impl SizeWord {
    pub fn dims(&self) -> [f64; 3] {
        [self.u_l.exp(), self.u_w.exp(), self.u_h.exp()]
    }
}

/// Class probabilities; `p.len() == n + 1` with background last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryWord {
    pub p: Vec<f64>,
}

impl CategoryWord {
    pub fn one_hot(class_id: usize, classes: usize) -> Result<Self> {
        if class_id >= classes {
            return Err(Error::Config(format!(
                "class id {class_id} out of range for {classes} classes"
            )));
        }
        let mut p = vec![0.0; classes + 1];
        p[class_id] = 1.0;
        Ok(Self { p })
    }

    pub fn background(classes: usize) -> Self {
        let mut p = vec![0.0; classes + 1];
        p[classes] = 1.0;
        Self { p }
    }

    /// Number of foreground classes.
    pub fn classes(&self) -> usize {
        self.p.len().saturating_sub(1)
    }

    /// Most likely foreground class and its probability. Ties resolve to
    /// the lowest class id.
    pub fn best_foreground(&self) -> (usize, f64) {
        let fg = &self.p[..self.classes()];
        fg.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
    }

    pub fn dot(&self, other: &CategoryWord) -> f64 {
        self.p.iter().zip(&other.p).map(|(a, b)| a * b).sum()
    }
}

/// One object written as five words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSequence {
    pub region: RegionWord,
    pub location: LocationWord,
    pub orientation: OrientationWord,
    pub size: SizeWord,
    pub category: CategoryWord,
}

/// Writes `b` relative to region `r` with `classes` foreground classes.
pub fn encode(b: &Box3D, r: &RegionWord, classes: usize) -> Result<ObjectSequence> {
    let (s, c) = b.theta.sin_cos();
    Ok(ObjectSequence {
        region: *r,
        location: LocationWord {
            l_x: (b.x - r.r_x) / r.r_l,
            l_y: (b.y - r.r_y) / r.r_w,
            z: b.z,
        },
        orientation: OrientationWord { s, c },
        size: SizeWord {
            u_l: b.l.ln(),
            u_w: b.w.ln(),
            u_h: b.h.ln(),
        },
        category: CategoryWord::one_hot(b.class_id, classes)?,
    })
}

/// A decoded box with its foreground confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub b: Box3D,
    pub score: f64,
}

impl ObjectSequence {
    pub fn is_finite(&self) -> bool {
        let r = &self.region;
        let l = &self.location;
        let o = &self.orientation;
        let s = &self.size;
        [r.r_x, r.r_y, r.r_l, r.r_w, l.l_x, l.l_y, l.z, o.s, o.c, s.u_l, s.u_w, s.u_h]
            .iter()
            .chain(&self.category.p)
            .all(|v| v.is_finite())
    }

    /// Decoded box center in meters.
    pub fn center(&self) -> [f64; 3] {
        [
            self.region.r_x + self.location.l_x * self.region.r_l,
            self.region.r_y + self.location.l_y * self.region.r_w,
            self.location.z,
        ]
    }
}

/// Reads a box back out of its words.
///
/// Total on finite words: the heading comes from `atan2`, so the
/// orientation word need not be normalized, and sizes come from `exp`, so
/// negative size words are fine.
pub fn decode(s: &ObjectSequence) -> Result<ScoredBox> {
    if !s.is_finite() {
        return Err(Error::NonFinite("object sequence".into()));
    }
    if s.category.classes() == 0 {
        return Err(Error::Config("category word has no foreground slot".into()));
    }
    let dims = s.size.dims();
    if dims.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return Err(Error::NonFinite("decoded size".into()));
    }
    let (class_id, score) = s.category.best_foreground();
    let b = Box3D::new(s.center(), dims, s.orientation.angle(), class_id)?;
    Ok(ScoredBox { b, score })
}

/// The four predicted word kinds (the region word is always first).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WordKind {
    Location,
    Orientation,
    Size,
    Category,
}

impl WordKind {
    pub const ALL: [WordKind; 4] = [
        WordKind::Location,
        WordKind::Orientation,
        WordKind::Size,
        WordKind::Category,
    ];

    pub fn symbol(self) -> char {
        match self {
            WordKind::Location => 'L',
            WordKind::Orientation => 'O',
            WordKind::Size => 'S',
            WordKind::Category => 'C',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WordKind::Location => "location",
            WordKind::Orientation => "orientation",
            WordKind::Size => "size",
            WordKind::Category => "category",
        }
    }

    /// Raw width of the word for `classes` foreground classes.
    pub fn width(self, classes: usize) -> usize {
        match self {
            WordKind::Location | WordKind::Size => 3,
            WordKind::Orientation => 2,
            WordKind::Category => classes + 1,
        }
    }
}

/// The order in which the four non-region words are decoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WordOrder([WordKind; 4]);

impl WordOrder {
    pub fn new(kinds: [WordKind; 4]) -> Result<Self> {
        for k in WordKind::ALL {
            if !kinds.contains(&k) {
                return Err(Error::Config(format!(
                    "word order must be a permutation of L,O,S,C; missing {}",
                    k.symbol()
                )));
            }
        }
        Ok(Self(kinds))
    }

    pub fn kinds(&self) -> [WordKind; 4] {
        self.0
    }

    /// Zero-based decoding step of `kind`.
    pub fn position(&self, kind: WordKind) -> usize {
        self.0.iter().position(|&k| k == kind).expect("valid permutation")
    }

    /// The eight orders compared in the word-order ablation.
    pub fn ablation_set() -> Vec<WordOrder> {
        [
            "R,O,S,L,C",
            "R,O,L,S,C",
            "R,L,O,S,C",
            "R,L,S,O,C",
            "R,C,L,O,S",
            "R,C,S,O,L",
            "R,C,O,L,S",
            "R,C,O,S,L",
        ]
        .iter()
        .map(|s| s.parse().expect("static order"))
        .collect()
    }
}

impl Default for WordOrder {
    fn default() -> Self {
        Self([
            WordKind::Location,
            WordKind::Orientation,
            WordKind::Size,
            WordKind::Category,
        ])
    }
}

impl FromStr for WordOrder {
    type Err = Error;

    /// Parses `"R,L,O,S,C"`; the leading `R` is optional.
    fn from_str(s: &str) -> Result<Self> {
        let mut symbols: Vec<&str> = s.split(',').map(str::trim).collect();
        if symbols.first() == Some(&"R") {
            symbols.remove(0);
        }
        if symbols.len() != 4 {
            return Err(Error::Config(format!("word order `{s}` must list L,O,S,C once each")));
        }
        let mut kinds = [WordKind::Location; 4];
        for (slot, sym) in kinds.iter_mut().zip(&symbols) {
            *slot = match *sym {
                "L" => WordKind::Location,
                "O" => WordKind::Orientation,
                "S" => WordKind::Size,
                "C" => WordKind::Category,
                other => {
                    return Err(Error::Config(format!("unknown word symbol `{other}` in `{s}`")))
                }
            };
        }
        WordOrder::new(kinds)
    }
}

impl fmt::Display for WordOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R")?;
        for k in self.0 {
            write!(f, ",{}", k.symbol())?;
        }
        Ok(())
    }
}

impl Serialize for WordOrder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for WordOrder {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
