//! Deterministic open-world toy dataset generator.
//!
//! Each category is a family prototype (shape + intensity band) plus a
//! class-specific variant (scale and intensity shift). Known and Nov-S
//! categories draw from the known shapes; Nov-D categories use shapes that no
//! known family uses. Every image holds exactly one planted foreground object
//! at a uniformly random position, optional low-contrast distractor, and
//! Gaussian pixel noise.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    BoundingBox, Category, CategoryId, CategoryTaxonomy, DatasetSplit, FamilyId, Role, Sample,
    SplitRole, ToyImage,
};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Domain, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Blob,
    Bar,
    Ring,
    Cross,
    Checker,
}

const KNOWN_SHAPES: [Shape; 3] = [Shape::Blob, Shape::Bar, Shape::Ring];
const DISTANT_SHAPES: [Shape; 2] = [Shape::Cross, Shape::Checker];
const BANDS: [f32; 3] = [0.50, 0.72, 0.94];
const BACKGROUND: f32 = 0.05;
const DISTRACTOR_CONTRAST: f32 = 0.3;
/// (scale multiplier, intensity shift) per class variant within a family.
const VARIANTS: [(f32, f32); 5] = [
    (1.00, 0.00),
    (0.70, 0.05),
    (1.30, -0.05),
    (0.55, 0.08),
    (1.15, -0.08),
];

impl Shape {
    fn base_scale(self) -> f32 {
        match self {
            Shape::Blob => 0.45,
            Shape::Bar => 0.60,
            Shape::Ring => 0.55,
            Shape::Cross => 0.50,
            Shape::Checker => 0.45,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyPrototype {
    pub family_id: FamilyId,
    pub base_shape: Shape,
    pub base_scale: f32,
    pub base_intensity: f32,
}

/// Concrete rendering recipe of one category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub category: Category,
    pub shape: Shape,
    pub scale: f32,
    pub intensity: f32,
    pub horizontal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_known: usize,
    pub n_nov_s: usize,
    pub n_nov_d: usize,
    /// Training budget per class (labeled + unlabeled).
    pub samples_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_side: usize,
    pub noise_std: f32,
    pub distractor_prob: f32,
    pub labeled_fraction_of_known: f32,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_known: 12,
            n_nov_s: 6,
            n_nov_d: 6,
            samples_per_class: 40,
            val_per_class: 5,
            test_per_class: 20,
            image_side: 16,
            noise_std: 0.05,
            distractor_prob: 0.2,
            labeled_fraction_of_known: 0.5,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.n_known == 0 || self.samples_per_class == 0 {
            return fail("n_known and samples_per_class must be >= 1");
        }
        if self.n_nov_s > self.n_known {
            return fail("n_nov_s must not exceed n_known");
        }
        if self.image_side < 4 {
            return fail("image_side must be >= 4");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.distractor_prob)
            || !(0.0..=1.0).contains(&self.labeled_fraction_of_known)
        {
            return fail("probabilities must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn labeled_per_known(&self) -> usize {
        (self.labeled_fraction_of_known * self.samples_per_class as f32).round() as usize
    }
}

/// Families and class recipes implied by a config.
#[derive(Debug, Clone, PartialEq)]
pub struct Blueprint {
    pub families: Vec<FamilyPrototype>,
    pub classes: Vec<ClassSpec>,
}

impl Blueprint {
    pub fn taxonomy(&self) -> CategoryTaxonomy {
        CategoryTaxonomy::new(self.classes.iter().map(|c| c.category).collect())
    }
}

pub fn blueprint(config: &GenConfig) -> Result<Blueprint> {
    config.validate()?;
    let mut families = Vec::new();
    let push_families = |shapes: &[Shape], count: usize, families: &mut Vec<FamilyPrototype>| {
        let start = families.len();
        for i in 0..count {
            let shape = shapes[i % shapes.len()];
            let band = (i / shapes.len()) % BANDS.len();
            families.push(FamilyPrototype {
                family_id: families.len() as FamilyId,
                base_shape: shape,
                base_scale: shape.base_scale(),
                base_intensity: BANDS[band],
            });
        }
        start..families.len()
    };
    let n_known_fam = config.n_known.min(KNOWN_SHAPES.len() * BANDS.len());
    let known_fams = push_families(&KNOWN_SHAPES, n_known_fam, &mut families);
    let n_distant_fam = config.n_nov_d.min(DISTANT_SHAPES.len() * BANDS.len());
    let distant_fams = push_families(&DISTANT_SHAPES, n_distant_fam, &mut families);

    let mut variants_used = vec![0usize; families.len()];
    let mut classes = Vec::new();
    let mut add = |family: usize, role: Role, classes: &mut Vec<ClassSpec>| {
        let proto = families[family];
        let v = variants_used[family];
        variants_used[family] += 1;
        let (mult, shift) = VARIANTS[v % VARIANTS.len()];
        let extra = (v / VARIANTS.len()) as f32 * 0.03;
        classes.push(ClassSpec {
            category: Category {
                id: classes.len() as CategoryId,
                family: proto.family_id,
                role,
            },
            shape: proto.base_shape,
            scale: (proto.base_scale * mult).min(1.0),
            intensity: (proto.base_intensity + shift + extra).clamp(0.2, 1.0),
            horizontal: v % 2 == 0,
        });
    };
    for i in 0..config.n_known {
        add(known_fams.start + i % known_fams.len(), Role::Known, &mut classes);
    }
    for i in 0..config.n_nov_s {
        add(known_fams.start + i % known_fams.len(), Role::NovS, &mut classes);
    }
    for i in 0..config.n_nov_d {
        add(distant_fams.start + i % distant_fams.len(), Role::NovD, &mut classes);
    }
    Ok(Blueprint { families, classes })
}

/// Binary object mask in a local `width x height` frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMask {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

pub fn shape_mask(shape: Shape, scale: f32, horizontal: bool, side: usize) -> ShapeMask {
    let e = ((scale * side as f32).round() as usize).clamp(3, side);
    let disk = |x: usize, y: usize, r: f32| {
        let c = e as f32 / 2.0;
        let dx = x as f32 + 0.5 - c;
        let dy = y as f32 + 0.5 - c;
        dx * dx + dy * dy <= r * r
    };
    let (width, height, cells) = match shape {
        Shape::Blob => {
            let r = e as f32 / 2.0;
            (e, e, grid(e, e, |x, y| disk(x, y, r)))
        }
        Shape::Ring => {
            let r = e as f32 / 2.0;
            let t = (e as f32 / 4.0).max(1.0);
            (e, e, grid(e, e, |x, y| disk(x, y, r) && !disk(x, y, r - t)))
        }
        Shape::Bar => {
            let t = ((e as f32 * 0.3).round() as usize).max(2).min(e);
            if horizontal {
                (e, t, vec![true; e * t])
            } else {
                (t, e, vec![true; e * t])
            }
        }
        Shape::Cross => {
            let t = (e / 3).max(1);
            let lo = (e - t) / 2;
            let hi = lo + t;
            let arm = |v: usize| v >= lo && v < hi;
            (e, e, grid(e, e, |x, y| arm(x) || arm(y)))
        }
        Shape::Checker => {
            let c = (e / 4).max(1);
            (e, e, grid(e, e, |x, y| (x / c + y / c) % 2 == 0))
        }
    };
    ShapeMask {
        width,
        height,
        cells,
    }
}

fn grid(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> Vec<bool> {
    (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect()
}

/// Result of rendering one object into an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: ToyImage,
    pub gt_box: BoundingBox,
    /// Foreground support in image coordinates, row-major.
    pub mask: Vec<bool>,
}

/// Shared rendering settings.
#[derive(Debug, Clone)]
pub struct RenderContext<'a> {
    pub side: usize,
    pub noise_std: f32,
    pub distractor_prob: f32,
    pub families: &'a [FamilyPrototype],
}

fn place(mask: &ShapeMask, side: usize, rng: &mut Rng) -> (usize, usize) {
    let ox = rng.random_range(0..=side - mask.width);
    let oy = rng.random_range(0..=side - mask.height);
    (ox, oy)
}

pub fn render_sample(spec: &ClassSpec, ctx: &RenderContext<'_>, rng: &mut Rng) -> Rendered {
    let side = ctx.side;
    let mut pixels = vec![BACKGROUND; side * side];
    let mut fg = vec![false; side * side];

    let mask = shape_mask(spec.shape, spec.scale, spec.horizontal, side);
    let (ox, oy) = place(&mask, side, rng);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.cells[y * mask.width + x] {
                let i = (oy + y) * side + ox + x;
                fg[i] = true;
                pixels[i] = spec.intensity;
            }
        }
    }

    let others: Vec<&FamilyPrototype> = ctx
        .families
        .iter()
        .filter(|f| f.family_id != spec.category.family)
        .collect();
    if !others.is_empty() && rng.random::<f32>() < ctx.distractor_prob {
        let fam = others[rng.random_range(0..others.len())];
        let dmask = shape_mask(fam.base_shape, fam.base_scale, rng.random(), side);
        let (dx, dy) = place(&dmask, side, rng);
        let value = BACKGROUND + DISTRACTOR_CONTRAST * (fam.base_intensity - BACKGROUND);
        for y in 0..dmask.height {
            for x in 0..dmask.width {
                if dmask.cells[y * dmask.width + x] {
                    let i = (dy + y) * side + dx + x;
                    pixels[i] = pixels[i].max(value);
                }
            }
        }
    }

    if ctx.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, ctx.noise_std).expect("noise_std validated");
        for p in pixels.iter_mut() {
            *p += normal.sample(rng);
        }
    }
    for p in pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }

    let gt_box = tight_box(&fg, side, side).expect("object mask is never empty");
    let image = ToyImage::new(side, side, 1, pixels).expect("pixels clamped to [0, 1]");
    Rendered {
        image,
        gt_box,
        mask: fg,
    }
}

/// Tight half-open bound of `true` cells of a row-major grid.
pub fn tight_box(mask: &[bool], width: usize, height: usize) -> Option<BoundingBox> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                b = Some(match b {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    b.map(|(x0, y0, x1, y1)| BoundingBox {
        x_min: x0 as u32,
        y_min: y0 as u32,
        x_max: x1 as u32 + 1,
        y_max: y1 as u32 + 1,
    })
}

struct Job {
    id: usize,
    class: usize,
    role: SplitRole,
}

pub fn generate_dataset(config: &GenConfig) -> Result<DatasetSplit> {
    let bp = blueprint(config)?;
    let labeled_per_known = config.labeled_per_known();
    let mut jobs = Vec::new();
    for (ci, spec) in bp.classes.iter().enumerate() {
        let n_labeled = if spec.category.role == Role::Known {
            labeled_per_known
        } else {
            0
        };
        let roles = std::iter::repeat_n(SplitRole::Labeled, n_labeled)
            .chain(std::iter::repeat_n(
                SplitRole::Unlabeled,
                config.samples_per_class - n_labeled,
            ))
            .chain(std::iter::repeat_n(SplitRole::Val, config.val_per_class))
            .chain(std::iter::repeat_n(SplitRole::Test, config.test_per_class));
        for role in roles {
            jobs.push(Job {
                id: jobs.len(),
                class: ci,
                role,
            });
        }
    }

    let ctx = RenderContext {
        side: config.image_side,
        noise_std: config.noise_std,
        distractor_prob: config.distractor_prob,
        families: &bp.families,
    };
    let samples = par::map(&jobs, |job| {
        let spec = &bp.classes[job.class];
        let mut rng = rng::keyed(config.seed, Domain::Render, job.id as u64);
        let r = render_sample(spec, &ctx, &mut rng);
        Sample::new(job.id, r.image, spec.category.id, vec![r.gt_box], job.role)
    });

    let mut split = DatasetSplit {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        taxonomy: bp.taxonomy(),
    };
    for s in samples {
        match s.split_role {
            SplitRole::Labeled => split.labeled.push(s),
            SplitRole::Unlabeled => split.unlabeled.push(s),
            SplitRole::Val => split.val.push(s),
            SplitRole::Test => split.test.push(s),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_split;

    #[test]
    fn default_config_counts() {
        let cfg = GenConfig::default();
        let split = generate_dataset(&cfg).unwrap();
        // 12 known x 20 labeled; 12 known x 20 + 12 novel x 40 unlabeled
        assert_eq!(split.labeled.len(), 12 * 20);
        assert_eq!(split.unlabeled.len(), 12 * 20 + 12 * 40);
        assert_eq!(split.test.len(), 24 * 20);
        assert_eq!(split.val.len(), 24 * 5);
        let total: usize = [&split.labeled, &split.unlabeled, &split.val, &split.test]
            .iter()
            .map(|v| v.len())
            .sum();
        assert_eq!(total, 24 * (40 + 5 + 20));
        assert_eq!(validate_split(&split), vec![]);
    }

    #[test]
    fn degenerate_minimum() {
        let cfg = GenConfig {
            n_known: 1,
            n_nov_s: 0,
            n_nov_d: 0,
            samples_per_class: 1,
            val_per_class: 0,
            test_per_class: 0,
            labeled_fraction_of_known: 1.0,
            ..GenConfig::default()
        };
        let split = generate_dataset(&cfg).unwrap();
        assert_eq!(split.labeled.len(), 1);
        assert_eq!(split.unlabeled.len(), 0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = GenConfig {
            n_nov_s: 13,
            ..GenConfig::default()
        };
        assert!(matches!(generate_dataset(&bad), Err(Error::ConfigInvalid(_))));
        let bad = GenConfig {
            n_known: 0,
            ..GenConfig::default()
        };
        assert!(generate_dataset(&bad).is_err());
    }

    #[test]
    fn blob_box_area() {
        let families = [];
        let ctx = RenderContext {
            side: 16,
            noise_std: 0.0,
            distractor_prob: 0.0,
            families: &families,
        };
        let spec = ClassSpec {
            category: Category {
                id: 0,
                family: 0,
                role: Role::Known,
            },
            shape: Shape::Blob,
            scale: 0.5,
            intensity: 0.8,
            horizontal: true,
        };
        let r = render_sample(&spec, &ctx, &mut rng::keyed(3, Domain::Render, 0));
        let lit = r.mask.iter().filter(|&&m| m).count();
        let area = r.gt_box.area() as f32;
        assert!(lit > 0 && (lit as f32) <= area);
        assert!((0.15 * 256.0..=0.35 * 256.0).contains(&area), "area {area}");
        // every lit pixel is exactly the object intensity
        for (i, &m) in r.mask.iter().enumerate() {
            let v = r.image.data()[i];
            assert_eq!(v, if m { 0.8 } else { BACKGROUND });
        }
    }

    #[test]
    fn full_width_bar() {
        let m = shape_mask(Shape::Bar, 1.0, true, 16);
        assert_eq!(m.width, 16);
        let families = [];
        let ctx = RenderContext {
            side: 16,
            noise_std: 0.1,
            distractor_prob: 0.0,
            families: &families,
        };
        let spec = ClassSpec {
            category: Category {
                id: 0,
                family: 0,
                role: Role::Known,
            },
            shape: Shape::Bar,
            scale: 1.0,
            intensity: 0.9,
            horizontal: true,
        };
        let a = render_sample(&spec, &ctx, &mut rng::keyed(1, Domain::Render, 9));
        let b = render_sample(&spec, &ctx, &mut rng::keyed(1, Domain::Render, 9));
        assert_eq!(a.gt_box.width(), 16);
        assert_eq!(a, b);
    }

    #[test]
    fn taxonomy_families() {
        let bp = blueprint(&GenConfig::default()).unwrap();
        let mut pairs: Vec<(Shape, u32)> = bp
            .families
            .iter()
            .map(|f| (f.base_shape, (f.base_intensity * 100.0) as u32))
            .collect();
        pairs.sort_by_key(|p| format!("{p:?}"));
        pairs.dedup();
        assert_eq!(pairs.len(), bp.families.len());
        assert_eq!(bp.classes.len(), 24);
    }
}
