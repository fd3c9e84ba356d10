//! Procedural dense-prediction tasks: random flat shapes over a noisy
//! background, labelled per pixel by the topmost shape.
//!
//! Source and target domains differ in shape families, palettes and in what
//! the class of a shape means (its colour or its outline), which gives a
//! pretrained backbone a real gap to adapt across.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
    Diamond,
    Ring,
}

/// What the segmentation class of a shape encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRule {
    /// Class `i + 1` is the `i`-th palette colour; outlines are random.
    ByColor,
    /// Class `i + 1` is the `i`-th shape kind; colours are random.
    ByShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskKind {
    ShapesSegmentation { classes: usize, rule: ClassRule },
    ShapesDepth { depth_max: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub image_size: (usize, usize),
    pub shape_kinds: Vec<ShapeKind>,
    /// Inclusive range of shapes per image.
    pub shape_count: (usize, usize),
    /// Inclusive range of the shape half-extent in pixels.
    pub shape_size: (f32, f32),
    pub palette: Vec<[f32; 3]>,
    pub background: [f32; 3],
    /// Amplitude of uniform per-pixel noise.
    pub noise: f32,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
}

const PALETTE_WARM: [[f32; 3]; 4] = [[0.9, 0.2, 0.2], [0.9, 0.6, 0.1], [0.8, 0.8, 0.2], [0.7, 0.3, 0.6]];
const PALETTE_COOL: [[f32; 3]; 4] = [[0.2, 0.4, 0.9], [0.2, 0.8, 0.7], [0.4, 0.9, 0.3], [0.5, 0.5, 0.9]];
const PALETTE_NEUTRAL: [[f32; 3]; 4] =
    [[0.85, 0.85, 0.85], [0.6, 0.55, 0.5], [0.35, 0.4, 0.45], [0.75, 0.65, 0.8]];

impl TaskSpec {
    /// Pretraining domain: rectangles, circles and triangles in warm and
    /// neutral colours, class by outline.
    pub fn source_segmentation(seed: u64) -> Self {
        let mut palette = PALETTE_WARM.to_vec();
        palette.extend(PALETTE_NEUTRAL);
        Self {
            name: "source-seg".into(),
            kind: TaskKind::ShapesSegmentation { classes: 4, rule: ClassRule::ByShape },
            image_size: (32, 32),
            shape_kinds: vec![ShapeKind::Rectangle, ShapeKind::Circle, ShapeKind::Triangle],
            shape_count: (1, 4),
            shape_size: (3.0, 10.0),
            palette,
            background: [0.3, 0.3, 0.3],
            noise: 0.08,
            seed,
            train_size: 2_000,
            val_size: 200,
        }
    }

    /// Adaptation domain: diamonds and rings in cool colours, class by colour.
    /// Neither the outlines nor the colours occur in the source domain.
    pub fn target_segmentation(seed: u64) -> Self {
        Self {
            name: "target-seg".into(),
            kind: TaskKind::ShapesSegmentation { classes: 5, rule: ClassRule::ByColor },
            shape_kinds: vec![ShapeKind::Diamond, ShapeKind::Ring],
            shape_size: (4.0, 10.0),
            palette: PALETTE_COOL.to_vec(),
            background: [0.3, 0.3, 0.35],
            noise: 0.1,
            ..Self::source_segmentation(seed)
        }
    }

    /// Second adaptation domain, used to test mask transfer: the target
    /// outlines with the colour-to-class order reversed, larger shapes and a
    /// different background.
    pub fn transfer_segmentation(seed: u64) -> Self {
        let mut palette = PALETTE_COOL.to_vec();
        palette.reverse();
        Self {
            name: "transfer-seg".into(),
            palette,
            background: [0.15, 0.2, 0.15],
            noise: 0.08,
            shape_size: (5.0, 11.0),
            ..Self::target_segmentation(seed)
        }
    }

    pub fn target_depth(seed: u64) -> Self {
        Self {
            name: "target-depth".into(),
            kind: TaskKind::ShapesDepth { depth_max: 10.0 },
            ..Self::target_segmentation(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "source-seg" => Ok(Self::source_segmentation(seed)),
            "target-seg" => Ok(Self::target_segmentation(seed)),
            "transfer-seg" => Ok(Self::transfer_segmentation(seed)),
            "target-depth" => Ok(Self::target_depth(seed)),
            other => Err(Error::InvalidConfig(format!(
                "unknown task `{other}` (expected source-seg, target-seg, transfer-seg or target-depth)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return bad("image size must be positive".into());
        }
        if self.shape_count.0 > self.shape_count.1 {
            return bad(format!("shape count range {:?} is empty", self.shape_count));
        }
        if !(self.shape_size.0 > 0.0 && self.shape_size.0 <= self.shape_size.1) {
            return bad(format!("shape size range {:?} is invalid", self.shape_size));
        }
        if self.shape_count.1 > 0 && (self.shape_kinds.is_empty() || self.palette.is_empty()) {
            return bad("shapes need at least one kind and one colour".into());
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        match self.kind {
            TaskKind::ShapesSegmentation { classes, rule } => {
                let needed = match rule {
                    ClassRule::ByColor => self.palette.len(),
                    ClassRule::ByShape => self.shape_kinds.len(),
                };
                if self.shape_count.1 > 0 && needed + 1 != classes {
                    return bad(format!("{rule:?} with {needed} foreground kinds needs {} classes", needed + 1));
                }
                if classes < 1 {
                    return bad("segmentation needs at least one class".into());
                }
            }
            TaskKind::ShapesDepth { depth_max } => {
                if !(depth_max > 0.0) {
                    return bad("depth_max must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.kind {
            TaskKind::ShapesSegmentation { classes, .. } => Some(classes),
            TaskKind::ShapesDepth { .. } => None,
        }
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.train_size
    }

    pub fn val_indices(&self) -> std::ops::Range<usize> {
        self.train_size..self.train_size + self.val_size
    }
}

/// One rendered shape, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub cx: f32,
    pub cy: f32,
    /// Half-extent: half side, radius, or half height.
    pub size: f32,
    /// Secondary half-extent (rectangle half height).
    pub size2: f32,
    pub color: [f32; 3],
    pub class: usize,
    pub depth: f32,
}

impl PlacedShape {
    /// Whether the point `(x, y)` lies inside the shape.
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let s = self.size;
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= s && dy.abs() <= self.size2,
            ShapeKind::Circle => dx * dx + dy * dy <= s * s,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= s,
            ShapeKind::Ring => {
                let r2 = dx * dx + dy * dy;
                r2 <= s * s && r2 >= 0.25 * s * s
            }
            // Upright isosceles triangle: apex at (0, -s), base from (-s, s) to (s, s).
            ShapeKind::Triangle => dy <= s && dy >= -s && dx.abs() <= (dy + s) * 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Classes(Vec<usize>),
    Depth(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: Label,
    pub shapes: Vec<PlacedShape>,
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Renders sample `index` of `spec`; a pure function of `(spec, index)`.
pub fn generate(spec: &TaskSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = sample_rng(spec.seed, index);
    let (h, w) = spec.image_size;
    let count = rng.gen_range(spec.shape_count.0..=spec.shape_count.1);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let kind_idx = rng.gen_range(0..spec.shape_kinds.len());
        let color_idx = rng.gen_range(0..spec.palette.len());
        let size = rng.gen_range(spec.shape_size.0..=spec.shape_size.1);
        let size2 = rng.gen_range(spec.shape_size.0..=spec.shape_size.1);
        let cx = rng.gen_range(0.0..w as f32);
        let cy = rng.gen_range(0.0..h as f32);
        let jitter = rng.gen_range(-0.05f32..0.05);
        let depth_frac = rng.gen_range(0.1f32..0.9);
        let (class, depth) = match spec.kind {
            TaskKind::ShapesSegmentation { rule: ClassRule::ByColor, .. } => (color_idx + 1, 0.0),
            TaskKind::ShapesSegmentation { rule: ClassRule::ByShape, .. } => (kind_idx + 1, 0.0),
            TaskKind::ShapesDepth { depth_max } => (0, depth_frac * depth_max),
        };
        let mut color = spec.palette[color_idx];
        // Nearer shapes render brighter, giving depth a visible cue.
        let shade = match spec.kind {
            TaskKind::ShapesDepth { .. } => 1.0 - 0.6 * depth_frac,
            _ => 1.0,
        };
        for c in color.iter_mut() {
            *c = ((*c + jitter) * shade).clamp(0.0, 1.0);
        }
        let kind = spec.shape_kinds[kind_idx];
        let size2 = if kind == ShapeKind::Rectangle { size2 } else { size };
        shapes.push(PlacedShape { kind, cx, cy, size, size2, color, class, depth });
    }
    if let TaskKind::ShapesDepth { .. } = spec.kind {
        // Far to near, so the topmost shape is also the nearest.
        shapes.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    }

    let mut image = Vec::with_capacity(h * w * 3);
    let mut classes = vec![0usize; h * w];
    let depth_max = match spec.kind {
        TaskKind::ShapesDepth { depth_max } => depth_max,
        _ => 0.0,
    };
    let mut depths = vec![depth_max; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut color = spec.background;
            if let Some(top) = shapes.iter().rev().find(|s| s.contains(px, py)) {
                color = top.color;
                classes[y * w + x] = top.class;
                depths[y * w + x] = top.depth;
            }
            for c in color {
                let n = if spec.noise > 0.0 { rng.gen_range(-spec.noise..=spec.noise) } else { 0.0 };
                image.push((c + n).clamp(0.0, 1.0));
            }
        }
    }
    let label = match spec.kind {
        TaskKind::ShapesSegmentation { .. } => Label::Classes(classes),
        TaskKind::ShapesDepth { .. } => Label::Depth(depths),
    };
    Ok(Sample { image: Tensor::new(vec![h, w, 3], image)?, label, shapes })
}

/// Materialized samples for a contiguous index range.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn generate(spec: &TaskSpec, indices: std::ops::Range<usize>) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for i in indices {
            let s = generate(spec, i)?;
            images.push(s.image);
            labels.push(s.label);
        }
        Ok(Self { spec: spec.clone(), images, labels })
    }

    pub fn train(spec: &TaskSpec) -> Result<Self> {
        Self::generate(spec, spec.train_indices())
    }

    pub fn val(spec: &TaskSpec) -> Result<Self> {
        Self::generate(spec, spec.val_indices())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the selected samples into `[B, H, W, 3]` plus flat labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Label) {
        let (h, w) = self.spec.image_size;
        let mut data = Vec::with_capacity(indices.len() * h * w * 3);
        let mut classes = Vec::new();
        let mut depths = Vec::new();
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
            match &self.labels[i] {
                Label::Classes(c) => classes.extend_from_slice(c),
                Label::Depth(d) => depths.extend_from_slice(d),
            }
        }
        let images = Tensor::new(vec![indices.len(), h, w, 3], data).expect("uniform sample shapes");
        let label = if depths.is_empty() { Label::Classes(classes) } else { Label::Depth(depths) };
        (images, label)
    }

    /// Writes images and labels as raw little-endian `f32` arrays plus a JSON manifest.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (h, w) = self.spec.image_size;
        let mut img_bytes = Vec::with_capacity(self.len() * h * w * 12);
        let mut lab_bytes = Vec::with_capacity(self.len() * h * w * 4);
        for (img, lab) in self.images.iter().zip(&self.labels) {
            for v in img.data() {
                img_bytes.extend_from_slice(&v.to_le_bytes());
            }
            let vals: Vec<f32> = match lab {
                Label::Classes(c) => c.iter().map(|&v| v as f32).collect(),
                Label::Depth(d) => d.clone(),
            };
            for v in vals {
                lab_bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join("images.f32"), img_bytes)?;
        fs::write(dir.join("labels.f32"), lab_bytes)?;
        let manifest = DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            spec: self.spec.clone(),
            count: self.len(),
            dtype: "f32le".into(),
            arrays: vec![
                ArrayRecord { name: "images".into(), file: "images.f32".into(), shape: vec![self.len(), h, w, 3] },
                ArrayRecord { name: "labels".into(), file: "labels.f32".into(), shape: vec![self.len(), h, w] },
            ],
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::FormatVersion { found: manifest.format_version, expected: DATASET_FORMAT_VERSION });
        }
        let read = |name: &str| -> Result<Vec<f32>> {
            let bytes = fs::read(dir.join(name))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Corrupt(format!("{name}: length not a multiple of 4")));
            }
            Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        };
        let (h, w) = manifest.spec.image_size;
        let n = manifest.count;
        let imgs = read("images.f32")?;
        let labs = read("labels.f32")?;
        if imgs.len() != n * h * w * 3 || labs.len() != n * h * w {
            return Err(Error::Corrupt("dataset arrays do not match manifest".into()));
        }
        let seg = manifest.spec.num_classes().is_some();
        let images = imgs.chunks(h * w * 3).map(|c| Tensor::new(vec![h, w, 3], c.to_vec())).collect::<Result<_>>()?;
        let labels = labs
            .chunks(h * w)
            .map(|c| if seg { Label::Classes(c.iter().map(|&v| v as usize).collect()) } else { Label::Depth(c.to_vec()) })
            .collect();
        Ok(Self { spec: manifest.spec, images, labels })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    spec: TaskSpec,
    count: usize,
    dtype: String,
    arrays: Vec<ArrayRecord>,
}

/// Per-class pixel confusion counts, accumulated across images.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    classes: usize,
    /// `counts[gt * classes + pred]`
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch {
                op: "miou",
                detail: format!("pred has {} pixels, gt has {}", pred.len(), gt.len()),
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            for c in [p, g] {
                if c >= self.classes {
                    return Err(Error::ClassOutOfRange { class: c, num_classes: self.classes });
                }
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both prediction and truth.
    pub fn ious(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let gt_total: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
                let pred_total: u64 = (0..k).map(|g| self.counts[g * k + c]).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.ious().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Mean IoU over classes present in prediction or ground truth.
pub fn miou(pred: &[usize], gt: &[usize], classes: usize) -> Result<f64> {
    let mut c = Confusion::new(classes);
    c.add(pred, gt)?;
    Ok(c.miou())
}

pub fn rmse(pred: &[f32], gt: &[f32]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "rmse operands differ in length");
    if pred.is_empty() {
        return 0.0;
    }
    let sq: f64 = pred.iter().zip(gt).map(|(&p, &g)| (p as f64 - g as f64).powi(2)).sum();
    (sq / pred.len() as f64).sqrt()
}
