//! Ingestion of the GTOT, RGBT234, and LasHeR directory layouts, attribute
//! sidecars, and a deterministic synthetic RGB-T sequence generator.
//!
//! All three public layouts share the shape "one directory per sequence,
//! one frame folder per modality, plain-text box annotations". Loaders are
//! lazy: a `Sequence` holds frame paths and decodes pixels on demand, so
//! listing or filtering a large dataset never touches image data.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::RawImage;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// The three supported directory layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Gtot,
    Rgbt234,
    Lasher,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Gtot => "gtot",
            DatasetKind::Rgbt234 => "rgbt234",
            DatasetKind::Lasher => "lasher",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "gtot" => Ok(DatasetKind::Gtot),
            "rgbt234" => Ok(DatasetKind::Rgbt234),
            "lasher" => Ok(DatasetKind::Lasher),
            _ => Err(Error::UnknownName {
                what: "dataset kind",
                value: name.to_string(),
            }),
        }
    }
}

/// The twelve per-sequence challenge attributes used for evaluation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EvalAttributeId {
    /// Background clutter.
    Bc,
    /// Camera moving.
    Cm,
    /// Deformation.
    Def,
    /// Fast motion.
    Fm,
    /// Heavy occlusion.
    Ho,
    /// Low illumination.
    Li,
    /// Low resolution.
    Lr,
    /// Motion blur.
    Mb,
    /// No occlusion.
    No,
    /// Partial occlusion.
    Po,
    /// Scale variation.
    Sv,
    /// Thermal crossover.
    Tc,
}

impl EvalAttributeId {
    pub const ALL: [EvalAttributeId; 12] = [
        EvalAttributeId::Bc,
        EvalAttributeId::Cm,
        EvalAttributeId::Def,
        EvalAttributeId::Fm,
        EvalAttributeId::Ho,
        EvalAttributeId::Li,
        EvalAttributeId::Lr,
        EvalAttributeId::Mb,
        EvalAttributeId::No,
        EvalAttributeId::Po,
        EvalAttributeId::Sv,
        EvalAttributeId::Tc,
    ];

    pub fn code(self) -> &'static str {
        match self {
            EvalAttributeId::Bc => "BC",
            EvalAttributeId::Cm => "CM",
            EvalAttributeId::Def => "DEF",
            EvalAttributeId::Fm => "FM",
            EvalAttributeId::Ho => "HO",
            EvalAttributeId::Li => "LI",
            EvalAttributeId::Lr => "LR",
            EvalAttributeId::Mb => "MB",
            EvalAttributeId::No => "NO",
            EvalAttributeId::Po => "PO",
            EvalAttributeId::Sv => "SV",
            EvalAttributeId::Tc => "TC",
        }
    }

    pub fn from_code(code: &str) -> Result<Self> {
        let up = code.trim().to_ascii_uppercase();
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.code() == up)
            .ok_or_else(|| Error::UnknownName {
                what: "evaluation attribute",
                value: code.to_string(),
            })
    }
}

/// One spatially aligned visible/thermal frame pair. Both images are
/// `[y, x, channel]` with three channels; thermal data is reduced to luma
/// and replicated across channels on load so downstream code sees one shape.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub rgb: RawImage,
    pub tir: RawImage,
    pub index: usize,
}

#[derive(Debug, Clone)]
enum FrameSource {
    Disk { rgb: PathBuf, tir: PathBuf },
    Memory { rgb: RawImage, tir: RawImage },
}

/// A named sequence: lazily decoded frame pairs, per-frame ground truth,
/// and the sequence's challenge-attribute flags.
///
/// `None` ground-truth entries are frames annotated all-zero (target absent);
/// metrics and samplers skip them. When a layout annotates both modalities
/// the visible boxes are authoritative for tracking and evaluation.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    frames: Vec<FrameSource>,
    pub(crate) gt_visible: Vec<Option<BoundingBox>>,
    gt_infrared: Option<Vec<Option<BoundingBox>>>,
    pub attributes: BTreeSet<EvalAttributeId>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Authoritative (visible-modality) ground truth, one entry per frame.
    pub fn ground_truth(&self) -> &[Option<BoundingBox>] {
        &self.gt_visible
    }

    pub fn ground_truth_infrared(&self) -> Option<&[Option<BoundingBox>]> {
        self.gt_infrared.as_deref()
    }

    pub fn has_attribute(&self, attr: EvalAttributeId) -> bool {
        self.attributes.contains(&attr)
    }

    /// Decode frame `index`. Disk-backed frames are read on every call;
    /// nothing is cached. Verifies the two modalities agree on size.
    pub fn frame(&self, index: usize) -> Result<FramePair> {
        let source = self.frames.get(index).ok_or(Error::DimensionMismatch {
            context: "frame index",
            expected: self.frames.len(),
            got: index,
        })?;
        let (rgb, tir) = match source {
            FrameSource::Disk { rgb, tir } => (load_rgb(rgb)?, load_tir(tir)?),
            FrameSource::Memory { rgb, tir } => (rgb.clone(), tir.clone()),
        };
        let (rh, rw, _) = rgb.dim();
        let (th, tw, _) = tir.dim();
        if (rh, rw) != (th, tw) {
            return Err(Error::FrameSizeMismatch {
                index,
                rgb_w: rw as u32,
                rgb_h: rh as u32,
                tir_w: tw as u32,
                tir_h: th as u32,
            });
        }
        Ok(FramePair { rgb, tir, index })
    }
}

fn load_rgb(path: &Path) -> Result<RawImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::<u8>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[y as usize, x as usize, c]] = px.0[c];
        }
    }
    Ok(data)
}

fn load_tir(path: &Path) -> Result<RawImage> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut data = Array3::<u8>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[y as usize, x as usize, c]] = px.0[0];
        }
    }
    Ok(data)
}

/// How a four-value annotation line encodes a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BoxFormat {
    /// `x, y, w, h` with a top-left anchor (RGBT234, LasHeR).
    TopLeftSize,
    /// `x1, y1, x2, y2` opposite corners (GTOT).
    Corners,
}

/// Split an annotation line on any mix of commas, tabs, and spaces.
fn split_values(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .collect()
}

fn parse_box_line(line: &str, format: BoxFormat) -> Option<Option<BoundingBox>> {
    let tokens = split_values(line);
    let values: Vec<f64> = tokens
        .iter()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    if values.iter().any(|v| !v.is_finite()) {
        return None;
    }
    // All-zero annotations mark the target as absent for that frame.
    if values.iter().all(|&v| v == 0.0) && matches!(values.len(), 4 | 8) {
        return Some(None);
    }
    let (x, y, w, h) = match (values.len(), format) {
        (4, BoxFormat::TopLeftSize) => (values[0], values[1], values[2], values[3]),
        (4, BoxFormat::Corners) => {
            let x = values[0].min(values[2]);
            let y = values[1].min(values[3]);
            (x, y, (values[2] - values[0]).abs(), (values[3] - values[1]).abs())
        }
        // Eight values are a polygon; take the axis-aligned enclosing box.
        (8, _) => {
            let xs: Vec<f64> = values.iter().copied().step_by(2).collect();
            let ys: Vec<f64> = values.iter().copied().skip(1).step_by(2).collect();
            let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (min(&xs), min(&ys), max(&xs) - min(&xs), max(&ys) - min(&ys))
        }
        _ => return None,
    };
    BoundingBox::new(x, y, w, h).ok().map(Some)
}

/// Parse one annotation file. Blank lines are skipped; anything else that
/// does not yield a box is an error naming the file and 1-based line number.
fn parse_annotation_file(path: &Path, format: BoxFormat) -> Result<Vec<Option<BoundingBox>>> {
    if !path.is_file() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_box_line(line, format) {
            Some(b) => boxes.push(b),
            None => {
                return Err(Error::AnnotationParse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    content: line.to_string(),
                })
            }
        }
    }
    Ok(boxes)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Sorted image files directly inside `dir`. Hidden files are ignored.
fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if name.starts_with('.') || !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Attribute sidecar: `attributes.txt` in the sequence directory, holding
/// whitespace- or comma-separated attribute codes. Absent file means no flags.
fn load_attribute_sidecar(dir: &Path) -> Result<BTreeSet<EvalAttributeId>> {
    let path = dir.join("attributes.txt");
    let mut flags = BTreeSet::new();
    if !path.is_file() {
        return Ok(flags);
    }
    let text = fs::read_to_string(&path)?;
    for token in split_values(&text) {
        flags.insert(EvalAttributeId::from_code(token)?);
    }
    Ok(flags)
}

struct LayoutPaths {
    rgb_dir: &'static str,
    tir_dir: &'static str,
    /// Visible-modality annotation candidates, tried in order.
    gt_visible: &'static [&'static str],
    /// Infrared-modality annotation, when the layout provides one.
    gt_infrared: Option<&'static str>,
    format: BoxFormat,
}

fn layout(kind: DatasetKind) -> LayoutPaths {
    match kind {
        DatasetKind::Gtot => LayoutPaths {
            rgb_dir: "v",
            tir_dir: "i",
            gt_visible: &["groundTruth_v.txt"],
            gt_infrared: Some("groundTruth_i.txt"),
            format: BoxFormat::Corners,
        },
        DatasetKind::Rgbt234 => LayoutPaths {
            rgb_dir: "visible",
            tir_dir: "infrared",
            gt_visible: &["visible.txt"],
            gt_infrared: Some("infrared.txt"),
            format: BoxFormat::TopLeftSize,
        },
        DatasetKind::Lasher => LayoutPaths {
            rgb_dir: "visible",
            tir_dir: "infrared",
            gt_visible: &["groundtruth.txt", "groundtruth_rect.txt"],
            gt_infrared: None,
            format: BoxFormat::TopLeftSize,
        },
    }
}

/// Load one sequence from `root/name` laid out per `kind`. Frames are paired
/// by sorted filename; pixel data stays on disk until [`Sequence::frame`].
pub fn load_sequence(root: &Path, kind: DatasetKind, name: &str) -> Result<Sequence> {
    let dir = root.join(name);
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir));
    }
    let lay = layout(kind);
    let rgb_files = list_frame_files(&dir.join(lay.rgb_dir))?;
    let tir_files = list_frame_files(&dir.join(lay.tir_dir))?;
    if rgb_files.len() != tir_files.len() {
        return Err(Error::FrameCountMismatch {
            rgb: rgb_files.len(),
            tir: tir_files.len(),
        });
    }

    let gt_path = lay
        .gt_visible
        .iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::MissingPath(dir.join(lay.gt_visible[0])))?;
    let gt_visible = parse_annotation_file(&gt_path, lay.format)?;
    if gt_visible.len() != rgb_files.len() {
        return Err(Error::GroundTruthLengthMismatch {
            gt: gt_visible.len(),
            frames: rgb_files.len(),
        });
    }
    let gt_infrared = match lay.gt_infrared {
        Some(file) => {
            let boxes = parse_annotation_file(&dir.join(file), lay.format)?;
            if boxes.len() != rgb_files.len() {
                return Err(Error::GroundTruthLengthMismatch {
                    gt: boxes.len(),
                    frames: rgb_files.len(),
                });
            }
            Some(boxes)
        }
        None => None,
    };

    let frames = rgb_files
        .into_iter()
        .zip(tir_files)
        .map(|(rgb, tir)| FrameSource::Disk { rgb, tir })
        .collect();
    Ok(Sequence {
        name: name.to_string(),
        frames,
        gt_visible,
        gt_infrared,
        attributes: load_attribute_sidecar(&dir)?,
    })
}

/// Sorted names of the sequences under `root` for the given layout: child
/// directories that carry the layout's visible-modality annotation file.
/// Hidden directories are ignored.
pub fn list_sequences(root: &Path, kind: DatasetKind) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::MissingPath(root.to_path_buf()));
    }
    let lay = layout(kind);
    let mut names = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n.to_string(),
            None => continue,
        };
        if name.starts_with('.') || !path.is_dir() {
            continue;
        }
        if lay.gt_visible.iter().any(|f| path.join(f).is_file()) {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Stable-order subset of `sequences` whose flags contain `attr`.
pub fn filter_by_attribute<'a>(
    sequences: &'a [Sequence],
    attr: EvalAttributeId,
) -> Vec<&'a Sequence> {
    sequences.iter().filter(|s| s.has_attribute(attr)).collect()
}

/// Parameters for the synthetic RGB-T generator: a textured square moving
/// linearly over a structured background, rendered hot in the thermal
/// channel. Attribute flags script extra behaviors:
///
/// * `Ho`/`Po` draw a background-colored occluder over the target (fully or
///   the left half) for three frames mid-sequence,
/// * `Li` ramps the visible channel darker over the sequence,
/// * `Sv` grows the box by `scale_rate` per frame,
/// * `Tc` drops the thermal target to background temperature mid-sequence.
///
/// Positions and sizes are rounded to whole pixels before drawing and the
/// rounded box is recorded as ground truth, so the annotation is exact.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub name: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub start: BoundingBox,
    /// Pixels per frame (dx, dy).
    pub velocity: (f64, f64),
    /// Per-frame multiplicative size change; active only with the `Sv` flag.
    pub scale_rate: f64,
    pub attributes: BTreeSet<EvalAttributeId>,
}

impl SynthSpec {
    pub fn new(name: &str) -> Self {
        SynthSpec {
            name: name.to_string(),
            frames: 20,
            width: 160,
            height: 120,
            start: BoundingBox::new(24.0, 44.0, 32.0, 32.0).unwrap(),
            velocity: (4.0, 1.0),
            scale_rate: 1.02,
            attributes: BTreeSet::new(),
        }
    }
}

/// Frame span (inclusive) of scripted mid-sequence events.
fn event_window(frames: usize) -> (usize, usize) {
    let mid = frames / 2;
    (mid, (mid + 2).min(frames.saturating_sub(1)))
}

struct SynthTextures {
    /// 8x8 RGB tile stretched over the target box.
    target: [[[u8; 3]; 8]; 8],
    rgb_background: RawImage,
    tir_background: RawImage,
}

fn synth_textures(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> SynthTextures {
    let mut target = [[[0u8; 3]; 8]; 8];
    for row in target.iter_mut() {
        for texel in row.iter_mut() {
            // High-contrast texels so the patch has gradients to learn from.
            let base: u8 = if rng.random::<f64>() < 0.5 { 40 } else { 215 };
            for (c, v) in texel.iter_mut().enumerate() {
                let jitter = rng.random_range(-20i16..=20) + (c as i16) * 8;
                *v = (base as i16 + jitter).clamp(0, 255) as u8;
            }
        }
    }
    let (h, w) = (spec.height, spec.width);
    let mut rgb_background = Array3::<u8>::zeros((h, w, 3));
    let mut tir_background = Array3::<u8>::zeros((h, w, 3));
    // Structured background: smooth gradients plus seeded 8x8 block noise.
    let block = 8;
    let mut block_noise = vec![0i16; h.div_ceil(block) * w.div_ceil(block)];
    for v in block_noise.iter_mut() {
        *v = rng.random_range(-14i16..=14);
    }
    let blocks_per_row = w.div_ceil(block);
    for y in 0..h {
        for x in 0..w {
            let noise = block_noise[(y / block) * blocks_per_row + x / block];
            let gx = (x as f64 / w as f64 * 70.0) as i16;
            let gy = (y as f64 / h as f64 * 50.0) as i16;
            for c in 0..3 {
                let base = 90 + 15 * c as i16;
                rgb_background[[y, x, c]] = (base + gx - gy + noise).clamp(0, 255) as u8;
            }
            let tir = (36 + gy / 2 + noise / 2).clamp(0, 255) as u8;
            for c in 0..3 {
                tir_background[[y, x, c]] = tir;
            }
        }
    }
    SynthTextures {
        target,
        rgb_background,
        tir_background,
    }
}

/// Thermal intensity of the target body.
const TIR_TARGET_HOT: u8 = 230;

/// Generate a synthetic sequence. The same `(spec, seed)` pair always
/// produces bit-identical pixel stacks and ground truth.
pub fn synth_sequence(spec: &SynthSpec, seed: u64) -> Sequence {
    assert!(spec.frames > 0, "need at least one frame");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = synth_textures(spec, &mut rng);
    let (w, h) = (spec.width, spec.height);
    let (occ_lo, occ_hi) = event_window(spec.frames);
    let occlusion = spec.attributes.contains(&EvalAttributeId::Ho)
        || spec.attributes.contains(&EvalAttributeId::Po);
    let partial = spec.attributes.contains(&EvalAttributeId::Po)
        && !spec.attributes.contains(&EvalAttributeId::Ho);
    let crossover = spec.attributes.contains(&EvalAttributeId::Tc);
    let dimming = spec.attributes.contains(&EvalAttributeId::Li);
    let scaling = spec.attributes.contains(&EvalAttributeId::Sv);

    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let scale = if scaling {
            spec.scale_rate.powi(t as i32)
        } else {
            1.0
        };
        let bw = (spec.start.w * scale).round().max(2.0);
        let bh = (spec.start.h * scale).round().max(2.0);
        // Clamp so the box stays fully inside; ground truth records the clamp.
        let bx = (spec.start.x + spec.velocity.0 * t as f64)
            .round()
            .clamp(0.0, (w as f64 - bw).max(0.0));
        let by = (spec.start.y + spec.velocity.1 * t as f64)
            .round()
            .clamp(0.0, (h as f64 - bh).max(0.0));
        let bbox = BoundingBox::new(bx, by, bw, bh).unwrap();

        let mut rgb = tex.rgb_background.clone();
        let mut tir = tex.tir_background.clone();
        let (x0, y0) = (bx as usize, by as usize);
        let (tw, th) = (bw as usize, bh as usize);
        let tir_body = if crossover && t >= occ_lo && t <= occ_hi {
            tex.tir_background[[y0.min(h - 1), x0.min(w - 1), 0]]
        } else {
            TIR_TARGET_HOT
        };
        for dy in 0..th {
            for dx in 0..tw {
                let (y, x) = (y0 + dy, x0 + dx);
                if y >= h || x >= w {
                    continue;
                }
                let texel = tex.target[dy * 8 / th][dx * 8 / tw];
                for c in 0..3 {
                    rgb[[y, x, c]] = texel[c];
                    tir[[y, x, c]] = tir_body;
                }
            }
        }
        if occlusion && t >= occ_lo && t <= occ_hi {
            // Occluder repaints background over the target (left half for Po).
            let cover_w = if partial { tw / 2 } else { tw };
            for dy in 0..th {
                for dx in 0..cover_w {
                    let (y, x) = (y0 + dy, x0 + dx);
                    if y >= h || x >= w {
                        continue;
                    }
                    for c in 0..3 {
                        rgb[[y, x, c]] = tex.rgb_background[[y, x, c]];
                        tir[[y, x, c]] = tex.tir_background[[y, x, c]];
                    }
                }
            }
        }
        if dimming && spec.frames > 1 {
            let factor = 1.0 - 0.55 * t as f64 / (spec.frames - 1) as f64;
            rgb.mapv_inplace(|v| (v as f64 * factor).round() as u8);
        }
        frames.push(FrameSource::Memory {
            rgb,
            tir: tir.clone(),
        });
        gt.push(Some(bbox));
    }
    Sequence {
        name: spec.name.clone(),
        frames,
        gt_visible: gt.clone(),
        gt_infrared: Some(gt),
        attributes: spec.attributes.clone(),
    }
}

fn format_coord(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn write_annotation_file(path: &Path, boxes: &[Option<BoundingBox>]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for b in boxes {
        match b {
            Some(b) => writeln!(
                out,
                "{},{},{},{}",
                format_coord(b.x),
                format_coord(b.y),
                format_coord(b.w),
                format_coord(b.h)
            )?,
            None => writeln!(out, "0,0,0,0")?,
        }
    }
    Ok(())
}

fn save_png(path: &Path, img: &RawImage, gray: bool) -> Result<()> {
    let (h, w, _) = img.dim();
    if gray {
        let mut buf = image::GrayImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            px.0[0] = img[[y as usize, x as usize, 0]];
        }
        buf.save(path)?;
    } else {
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                px.0[c] = img[[y as usize, x as usize, c]];
            }
        }
        buf.save(path)?;
    }
    Ok(())
}

/// Materialize a sequence under `root` in the RGBT234 layout (`visible/` and
/// `infrared/` PNG frames, `visible.txt`/`infrared.txt`, attribute sidecar),
/// so generated data is readable by the ordinary loader. Thermal frames are
/// written grayscale; loading replicates them back to three channels.
/// Returns the sequence directory.
pub fn write_rgbt234_layout(seq: &Sequence, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&seq.name);
    let rgb_dir = dir.join("visible");
    let tir_dir = dir.join("infrared");
    fs::create_dir_all(&rgb_dir)?;
    fs::create_dir_all(&tir_dir)?;
    for i in 0..seq.len() {
        let pair = seq.frame(i)?;
        save_png(&rgb_dir.join(format!("{:05}.png", i + 1)), &pair.rgb, false)?;
        save_png(&tir_dir.join(format!("{:05}.png", i + 1)), &pair.tir, true)?;
    }
    write_annotation_file(&dir.join("visible.txt"), &seq.gt_visible)?;
    let infrared = seq.gt_infrared.as_ref().unwrap_or(&seq.gt_visible);
    write_annotation_file(&dir.join("infrared.txt"), infrared)?;
    if !seq.attributes.is_empty() {
        let mut out = fs::File::create(dir.join("attributes.txt"))?;
        for a in &seq.attributes {
            writeln!(out, "{}", a.code())?;
        }
    }
    Ok(dir)
}
