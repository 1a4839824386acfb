//! Domain types shared across the engine: images, boxes, categories and
//! dataset splits, plus split validation.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CategoryId = u32;
pub type FamilyId = u32;

/// Category role in the open-world partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Known,
    NovS,
    NovD,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Known => "Known",
            Role::NovS => "NovS",
            Role::NovD => "NovD",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub family: FamilyId,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTaxonomy {
    categories: Vec<Category>,
}

impl CategoryTaxonomy {
    pub fn new(categories: Vec<Category>) -> Self {
        Self { categories }
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn get(&self, id: CategoryId) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    /// Category ids with the given role, in taxonomy order.
    pub fn with_role(&self, role: Role) -> Vec<CategoryId> {
        self.categories
            .iter()
            .filter(|c| c.role == role)
            .map(|c| c.id)
            .collect()
    }

    pub fn known(&self) -> Vec<CategoryId> {
        self.with_role(Role::Known)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

pub fn role_of(taxonomy: &CategoryTaxonomy, cat: CategoryId) -> Result<Role> {
    taxonomy
        .get(cat)
        .map(|c| c.role)
        .ok_or(Error::UnknownCategory(cat))
}

/// Toy raster with row-major `[channel][row][col]` intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ToyImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::ShapeMismatch("image extents must be positive".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::ShapeMismatch("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    /// Translated copy; pixels shifted in from outside repeat the nearest edge.
    pub fn shifted(&self, dx: i32, dy: i32) -> ToyImage {
        let (w, h) = (self.width as i32, self.height as i32);
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let sy = (y - dy).clamp(0, h - 1) as usize;
                    let sx = (x - dx).clamp(0, w - 1) as usize;
                    data.push(self.at(c, sy, sx));
                }
            }
        }
        ToyImage {
            data,
            ..self.clone()
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Half-open pixel box `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::ShapeMismatch(format!("degenerate box {b:?}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x_max as usize <= width && self.y_max as usize <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitRole {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: ToyImage,
    gt_label: CategoryId,
    pub gt_boxes: Vec<BoundingBox>,
    pub split_role: SplitRole,
}

impl Sample {
    pub fn new(
        id: usize,
        image: ToyImage,
        gt_label: CategoryId,
        gt_boxes: Vec<BoundingBox>,
        split_role: SplitRole,
    ) -> Self {
        Self {
            id,
            image,
            gt_label,
            gt_boxes,
            split_role,
        }
    }

    /// Label visible to training code; refuses everything but labeled samples.
    pub fn training_label(&self) -> Result<CategoryId> {
        match self.split_role {
            SplitRole::Labeled => Ok(self.gt_label),
            _ => Err(Error::LabelHidden(self.id)),
        }
    }

    /// Label visible to evaluation code (val, test and labeled samples).
    pub fn eval_label(&self) -> Result<CategoryId> {
        match self.split_role {
            SplitRole::Unlabeled => Err(Error::LabelHidden(self.id)),
            _ => Ok(self.gt_label),
        }
    }

    pub(crate) fn ground_truth(&self) -> CategoryId {
        self.gt_label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub taxonomy: CategoryTaxonomy,
}

impl DatasetSplit {
    /// Training samples in cache order: labeled first, then unlabeled.
    pub fn training(&self) -> impl Iterator<Item = &Sample> {
        self.labeled.iter().chain(self.unlabeled.iter())
    }

    pub fn n_training(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    /// Copy of the split with every unlabeled sample of `excluded` removed.
    pub fn without_unlabeled_classes(&self, excluded: &[CategoryId]) -> DatasetSplit {
        let excluded: HashSet<_> = excluded.iter().copied().collect();
        let mut out = self.clone();
        out.unlabeled
            .retain(|s| !excluded.contains(&s.ground_truth()));
        out
    }
}

/// A broken taxonomy or split rule, naming the offending id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateCategory(CategoryId),
    NovSNeedsKnownFamily(CategoryId),
    NovDSharesKnownFamily(CategoryId),
    UnknownLabel(usize),
    LabeledMustBeKnown(usize),
    WrongSplitRole(usize),
    MissingBox(usize),
    InvalidBox(usize),
    BoxOutOfBounds(usize),
}

pub fn validate_taxonomy(taxonomy: &CategoryTaxonomy) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for c in taxonomy.categories() {
        if !seen.insert(c.id) {
            out.push(Violation::DuplicateCategory(c.id));
        }
    }
    let known_families: BTreeSet<FamilyId> = taxonomy
        .categories()
        .iter()
        .filter(|c| c.role == Role::Known)
        .map(|c| c.family)
        .collect();
    for c in taxonomy.categories() {
        match c.role {
            Role::NovS if !known_families.contains(&c.family) => {
                out.push(Violation::NovSNeedsKnownFamily(c.id))
            }
            Role::NovD if known_families.contains(&c.family) => {
                out.push(Violation::NovDSharesKnownFamily(c.id))
            }
            _ => {}
        }
    }
    out
}

pub fn validate_split(split: &DatasetSplit) -> Vec<Violation> {
    let mut out = validate_taxonomy(&split.taxonomy);
    let roles: HashMap<CategoryId, Role> = split
        .taxonomy
        .categories()
        .iter()
        .map(|c| (c.id, c.role))
        .collect();
    let lists = [
        (&split.labeled, SplitRole::Labeled),
        (&split.unlabeled, SplitRole::Unlabeled),
        (&split.val, SplitRole::Val),
        (&split.test, SplitRole::Test),
    ];
    for (samples, expected) in lists {
        for s in samples.iter() {
            if s.split_role != expected {
                out.push(Violation::WrongSplitRole(s.id));
            }
            match roles.get(&s.ground_truth()) {
                None => out.push(Violation::UnknownLabel(s.id)),
                Some(role) if expected == SplitRole::Labeled && *role != Role::Known => {
                    out.push(Violation::LabeledMustBeKnown(s.id))
                }
                _ => {}
            }
            if s.gt_boxes.is_empty() {
                out.push(Violation::MissingBox(s.id));
            }
            for b in &s.gt_boxes {
                if !b.is_valid() {
                    out.push(Violation::InvalidBox(s.id));
                } else if !b.fits(s.image.width(), s.image.height()) {
                    out.push(Violation::BoxOutOfBounds(s.id));
                }
            }
        }
    }
    out
}
