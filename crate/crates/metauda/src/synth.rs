//! Deterministic generator of unpaired two-domain synthetic detection data.
//! Source scenes are rendered directly; target scenes are independent draws
//! pushed through an appearance shift (inversion, blur, gamma, noise) that
//! leaves geometry — and hence boxes — untouched.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::TensorData;
use crate::data::{BBox, DetectionSample, Domain, GtBox, SealedLabels, SplitQuartet};
use crate::{Error, Result};

/// Appearance transform from the source look to the target look.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub invert: bool,
    pub blur_sigma: f64,
    pub gamma: f64,
    /// Amplitude of uniform additive pixel noise.
    pub noise: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec { invert: false, blur_sigma: 0.8, gamma: 0.55, noise: 0.05 }
    }
}

impl ShiftSpec {
    /// Identity transform; target then differs from source only by sampling.
    pub fn neutral() -> ShiftSpec {
        ShiftSpec { invert: false, blur_sigma: 0.0, gamma: 1.0, noise: 0.0 }
    }
}

/// Scene layout and appearance knobs. Classes are shapes: 0 disk, 1 square,
/// 2 bar, each in its own intensity band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    pub bg_level: f64,
    /// Amplitude of the uniform background texture.
    pub bg_texture: f64,
    /// Placement rejects candidates overlapping an existing box beyond this.
    pub max_overlap: f64,
    pub min_box: usize,
    pub max_box: usize,
    pub shift: ShiftSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 32,
            min_objects: 1,
            max_objects: 3,
            num_classes: 3,
            bg_level: 0.3,
            bg_texture: 0.05,
            max_overlap: 0.2,
            min_box: 4,
            max_box: 12,
            shift: ShiftSpec::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::config("image_size must be >= 8 and divisible by 4"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("object count range must satisfy 1 <= min <= max"));
        }
        if !(1..=3).contains(&self.num_classes) {
            return Err(Error::config("num_classes must be in 1..=3"));
        }
        if self.min_box < 4 {
            return Err(Error::config("boxes must be at least 4px per side"));
        }
        if self.max_box < 2 * self.min_box || self.max_box >= self.image_size {
            return Err(Error::config("max_box must be in [2*min_box, image_size)"));
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return Err(Error::config("max_overlap must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-split sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub source_train: usize,
    pub target_train: usize,
    pub source_val: usize,
    pub target_val: usize,
    pub source_test: usize,
    pub target_test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            source_train: 40,
            target_train: 40,
            source_val: 40,
            target_val: 40,
            source_test: 20,
            target_test: 20,
        }
    }
}

/// The four training streams plus held-out labeled test sets and the sealed
/// target-stream ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub quartet: SplitQuartet,
    pub source_test: Vec<DetectionSample>,
    pub target_test: Vec<DetectionSample>,
    pub sealed: SealedLabels,
}

impl SynthDataset {
    pub fn validate(&self) -> Result<()> {
        self.quartet.validate()?;
        for s in self.source_test.iter().chain(&self.target_test) {
            if s.labels.is_none() {
                return Err(Error::schema(format!("test sample {} must be labeled", s.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SplitKind {
    SourceTrain,
    TargetTrain,
    SourceVal,
    TargetVal,
    SourceTest,
    TargetTest,
}

const ALL_SPLITS: [SplitKind; 6] = [
    SplitKind::SourceTrain,
    SplitKind::TargetTrain,
    SplitKind::SourceVal,
    SplitKind::TargetVal,
    SplitKind::SourceTest,
    SplitKind::TargetTest,
];

impl SplitKind {
    fn tag(self) -> &'static str {
        match self {
            SplitKind::SourceTrain => "source-train",
            SplitKind::TargetTrain => "target-train",
            SplitKind::SourceVal => "source-val",
            SplitKind::TargetVal => "target-val",
            SplitKind::SourceTest => "source-test",
            SplitKind::TargetTest => "target-test",
        }
    }

    fn from_tag(tag: &str) -> Result<SplitKind> {
        ALL_SPLITS
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or_else(|| Error::schema(format!("unknown split `{tag}`")))
    }

    fn domain(self) -> Domain {
        match self {
            SplitKind::SourceTrain | SplitKind::SourceVal | SplitKind::SourceTest => Domain::Source,
            _ => Domain::Target,
        }
    }

    /// Whether samples of this split carry labels in the open (source splits
    /// and the eval-only target test set).
    fn labeled(self) -> bool {
        !matches!(self, SplitKind::TargetTrain | SplitKind::TargetVal)
    }

    fn stream_base(self) -> u64 {
        let idx = ALL_SPLITS.iter().position(|k| *k == self).unwrap() as u64;
        idx << 32
    }
}

struct Scene {
    /// Clean (pre-shift) pixels, row-major, in [0, 1].
    pixels: Vec<f64>,
    gts: Vec<GtBox>,
    /// One footprint per object (amodal: overdraw by a later overlapping
    /// object does not remove pixels from an earlier footprint). Consumed by
    /// the box-tightness test.
    #[cfg_attr(not(test), allow(dead_code))]
    masks: Vec<Vec<bool>>,
}

fn class_band(class_id: usize) -> (f64, f64) {
    match class_id {
        0 => (0.75, 0.90),
        1 => (0.60, 0.75),
        _ => (0.85, 1.00),
    }
}

/// Sample object geometry: (w, h). Shape follows the class id.
fn sample_extent(spec: &SceneSpec, class_id: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    match class_id {
        0 | 1 => {
            let s = rng.gen_range(spec.min_box..=spec.max_box);
            (s, s)
        }
        _ => {
            let long = rng.gen_range(2 * spec.min_box..=spec.max_box);
            if rng.gen_bool(0.5) {
                (long, spec.min_box)
            } else {
                (spec.min_box, long)
            }
        }
    }
}

const PLACEMENT_RETRIES: usize = 100;

/// Render one scene at the source appearance, with a foreground mask for
/// tightness checks.
fn render_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let n = spec.image_size;
    let mut pixels: Vec<f64> = (0..n * n)
        .map(|_| spec.bg_level + rng.gen_range(-spec.bg_texture..=spec.bg_texture))
        .collect();
    let mut masks: Vec<Vec<bool>> = Vec::new();
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut gts: Vec<GtBox> = Vec::with_capacity(count);

    for obj in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let class_id = rng.gen_range(0..spec.num_classes);
            let (w, h) = sample_extent(spec, class_id, rng);
            let x0 = rng.gen_range(0..=n - w);
            let y0 = rng.gen_range(0..=n - h);
            let bbox =
                BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
            if gts.iter().any(|g| g.bbox.iou(&bbox) > spec.max_overlap) {
                continue;
            }
            let (lo, hi) = class_band(class_id);
            let level = rng.gen_range(lo..=hi);
            let (cx, cy) = bbox.center();
            let r = 0.5 * w as f64;
            let mut mask = vec![false; n * n];
            for py in y0..y0 + h {
                for px in x0..x0 + w {
                    let inside = if class_id == 0 {
                        let dx = px as f64 + 0.5 - cx;
                        let dy = py as f64 + 0.5 - cy;
                        dx * dx + dy * dy <= r * r
                    } else {
                        true
                    };
                    if inside {
                        pixels[py * n + px] = level;
                        mask[py * n + px] = true;
                    }
                }
            }
            masks.push(mask);
            gts.push(GtBox { class_id, bbox });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::generation(format!(
                "could not place object {obj} within {PLACEMENT_RETRIES} attempts \
                 (overlap limit {})",
                spec.max_overlap
            )));
        }
    }
    Ok(Scene { pixels, gts, masks })
}

fn gaussian_blur(pixels: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return pixels.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let clamp = |v: i64| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * pixels[y * n + clamp(x as i64 + i as i64 - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clamp(y as i64 + i as i64 - radius) * n + x])
                .sum();
        }
    }
    out
}

/// Apply the appearance shift: invert, blur, gamma, additive noise, clamp.
fn apply_shift(pixels: &[f64], n: usize, shift: &ShiftSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out: Vec<f64> = if shift.invert {
        pixels.iter().map(|v| 1.0 - v).collect()
    } else {
        pixels.to_vec()
    };
    out = gaussian_blur(&out, n, shift.blur_sigma);
    for v in &mut out {
        *v = v.max(0.0).powf(shift.gamma);
        if shift.noise > 0.0 {
            *v += rng.gen_range(-shift.noise..=shift.noise);
        }
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Quantize to the 8-bit grid the PNG export uses, so in-memory data and the
/// exported files agree exactly.
fn quantize(pixels: &[f64]) -> Vec<f64> {
    pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0).collect()
}

fn sample_rng(seed: u64, kind: SplitKind, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind.stream_base() + idx as u64);
    rng
}

fn make_sample(
    spec: &SceneSpec,
    seed: u64,
    kind: SplitKind,
    idx: usize,
) -> Result<(DetectionSample, Vec<GtBox>)> {
    let mut rng = sample_rng(seed, kind, idx);
    let scene = render_scene(spec, &mut rng)?;
    let n = spec.image_size;
    let pixels = match kind.domain() {
        Domain::Source => quantize(&scene.pixels),
        Domain::Target => quantize(&apply_shift(&scene.pixels, n, &spec.shift, &mut rng)),
    };
    let sample = DetectionSample {
        id: format!("{}-{idx:04}", kind.tag()),
        image: TensorData::new(vec![1, n, n], pixels),
        labels: if kind.labeled() { Some(scene.gts.clone()) } else { None },
        domain: kind.domain(),
    };
    Ok((sample, scene.gts))
}

/// Generate all six splits deterministically from (spec, seed). Target-stream
/// labels go into sealed storage only.
pub fn generate_quartet(spec: &SceneSpec, counts: &SplitCounts, seed: u64) -> Result<SynthDataset> {
    spec.validate()?;
    let per_split = [
        counts.source_train,
        counts.target_train,
        counts.source_val,
        counts.target_val,
        counts.source_test,
        counts.target_test,
    ];
    if per_split.contains(&0) {
        return Err(Error::config("all split counts must be positive"));
    }
    let mut splits: Vec<Vec<DetectionSample>> = Vec::with_capacity(6);
    let mut sealed = BTreeMap::new();
    for (kind, &count) in ALL_SPLITS.into_iter().zip(&per_split) {
        let mut samples = Vec::with_capacity(count);
        for idx in 0..count {
            let (sample, gts) = make_sample(spec, seed, kind, idx)?;
            if !kind.labeled() {
                sealed.insert(sample.id.clone(), gts);
            }
            samples.push(sample);
        }
        splits.push(samples);
    }
    let mut it = splits.into_iter();
    let ds = SynthDataset {
        quartet: SplitQuartet {
            source_train: it.next().unwrap(),
            target_train: it.next().unwrap(),
            source_val: it.next().unwrap(),
            target_val: it.next().unwrap(),
        },
        source_test: it.next().unwrap(),
        target_test: it.next().unwrap(),
        sealed: SealedLabels::new(sealed),
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// On-disk layout: images/<id>.png (8-bit grayscale), manifest.json,
// sealed_labels.json, schema.md. See SCHEMA_DOC.

pub const SCHEMA_DOC: &str = "\
# Dataset layout (version 1)

- `images/<id>.png` — 8-bit grayscale, one per sample.
- `manifest.json`:
  - `version`: integer, currently 1.
  - `image_size`: square image side in pixels.
  - `num_classes`: number of foreground classes.
  - `samples`: array, one entry per sample, in split order:
    - `id`: unique string.
    - `split`: one of source-train, target-train, source-val, target-val,
      source-test, target-test.
    - `domain`: `source` or `target` (must agree with the split).
    - `file`: image path relative to the dataset root.
    - `boxes`: array of `{class_id, bbox: [x_min, y_min, x_max, y_max]}` for
      labeled samples, or `null`. Target-train and target-val samples MUST be
      `null`; anything else is rejected as label leakage.
- `sealed_labels.json` — map of target-stream sample id to its box array;
  read only by evaluation and the labeled-target baseline.
";

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestBox {
    class_id: usize,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    id: String,
    split: String,
    domain: Domain,
    file: String,
    boxes: Option<Vec<ManifestBox>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    image_size: usize,
    num_classes: usize,
    samples: Vec<ManifestSample>,
}

fn to_manifest_boxes(gts: &[GtBox]) -> Vec<ManifestBox> {
    gts.iter()
        .map(|g| ManifestBox {
            class_id: g.class_id,
            bbox: [g.bbox.x_min, g.bbox.y_min, g.bbox.x_max, g.bbox.y_max],
        })
        .collect()
}

fn from_manifest_boxes(boxes: &[ManifestBox]) -> Vec<GtBox> {
    boxes
        .iter()
        .map(|b| GtBox {
            class_id: b.class_id,
            bbox: BBox::new(b.bbox[0], b.bbox[1], b.bbox[2], b.bbox[3]),
        })
        .collect()
}

fn write_png(path: &Path, image: &TensorData) -> Result<()> {
    let (h, w) = (image.shape[1], image.shape[2]);
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| Error::schema(format!("writing {}: {e}", path.display())))
}

fn read_png(path: &Path) -> Result<TensorData> {
    let img = image::open(path)
        .map_err(|e| Error::schema(format!("reading {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(TensorData::new(vec![1, h, w], data))
}

pub fn export_dataset(ds: &SynthDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir.join("images"))?;
    let mut samples = Vec::new();
    let splits: [(&str, &[DetectionSample]); 6] = [
        ("source-train", &ds.quartet.source_train),
        ("target-train", &ds.quartet.target_train),
        ("source-val", &ds.quartet.source_val),
        ("target-val", &ds.quartet.target_val),
        ("source-test", &ds.source_test),
        ("target-test", &ds.target_test),
    ];
    let mut image_size = 0;
    let mut num_classes = 0;
    for (tag, list) in splits {
        for s in list {
            let file = format!("images/{}.png", s.id);
            write_png(&dir.join(&file), &s.image)?;
            image_size = s.image.shape[1];
            num_classes = num_classes.max(
                s.labels
                    .iter()
                    .flatten()
                    .map(|g| g.class_id + 1)
                    .max()
                    .unwrap_or(0),
            );
            samples.push(ManifestSample {
                id: s.id.clone(),
                split: tag.to_string(),
                domain: s.domain,
                file,
                boxes: s.labels.as_deref().map(to_manifest_boxes),
            });
        }
    }
    let manifest =
        Manifest { version: MANIFEST_VERSION, image_size, num_classes, samples };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let sealed: BTreeMap<&String, Vec<ManifestBox>> = ds
        .sealed
        .contents()
        .iter()
        .map(|(id, gts)| (id, to_manifest_boxes(gts)))
        .collect();
    fs::write(dir.join("sealed_labels.json"), serde_json::to_string_pretty(&sealed)?)?;
    fs::write(dir.join("schema.md"), SCHEMA_DOC)?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<SynthDataset> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::schema(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let mut splits: BTreeMap<&'static str, Vec<DetectionSample>> = BTreeMap::new();
    for m in &manifest.samples {
        let kind = SplitKind::from_tag(&m.split)?;
        if m.domain != kind.domain() {
            return Err(Error::schema(format!(
                "sample {}: domain does not match split {}",
                m.id, m.split
            )));
        }
        if !kind.labeled() && m.boxes.is_some() {
            return Err(Error::leakage(format!(
                "sample {} in {} carries labels in the manifest",
                m.id, m.split
            )));
        }
        if kind.labeled() && m.boxes.is_none() {
            return Err(Error::schema(format!("sample {} in {} lacks labels", m.id, m.split)));
        }
        let image = read_png(&dir.join(&m.file))?;
        if image.shape[1] != manifest.image_size || image.shape[2] != manifest.image_size {
            return Err(Error::schema(format!("sample {}: image size mismatch", m.id)));
        }
        splits.entry(kind.tag()).or_default().push(DetectionSample {
            id: m.id.clone(),
            image,
            labels: m.boxes.as_deref().map(from_manifest_boxes),
            domain: m.domain,
        });
    }
    let sealed_path = dir.join("sealed_labels.json");
    let sealed = if sealed_path.exists() {
        let raw: BTreeMap<String, Vec<ManifestBox>> =
            serde_json::from_str(&fs::read_to_string(sealed_path)?)?;
        raw.into_iter().map(|(id, b)| (id, from_manifest_boxes(&b))).collect()
    } else {
        BTreeMap::new()
    };
    let mut take = |tag: &str| splits.remove(tag).unwrap_or_default();
    let ds = SynthDataset {
        quartet: SplitQuartet {
            source_train: take("source-train"),
            target_train: take("target-train"),
            source_val: take("source-val"),
            target_val: take("target-val"),
        },
        source_test: take("source-test"),
        target_test: take("target-test"),
        sealed: SealedLabels::new(sealed),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::default();
        let counts = SplitCounts {
            source_train: 4,
            target_train: 4,
            source_val: 2,
            target_val: 2,
            source_test: 2,
            target_test: 2,
        };
        let a = generate_quartet(&spec, &counts, 42).unwrap();
        let b = generate_quartet(&spec, &counts, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_quartet(&spec, &counts, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn target_streams_are_unlabeled_and_sealed() {
        let spec = SceneSpec::default();
        let ds = generate_quartet(&spec, &SplitCounts::default(), 7).unwrap();
        for s in ds.quartet.target_train.iter().chain(&ds.quartet.target_val) {
            assert!(s.labels.is_none());
            assert!(!ds.sealed.unseal(&s.id).unwrap().is_empty());
        }
        let n = (ds.quartet.target_train.len() + ds.quartet.target_val.len()) as u64;
        assert_eq!(ds.sealed.read_count(), n);
        assert!(ds.sealed.unseal("source-train-0000").is_err());
    }

    /// Every rendered box is tight: the object's foreground pixels span
    /// exactly the stored box extents.
    #[test]
    fn rendered_boxes_are_tight() {
        let spec = SceneSpec::default();
        for seed in 0..30u64 {
            let mut rng = sample_rng(seed, SplitKind::SourceTrain, 0);
            let scene = render_scene(&spec, &mut rng).unwrap();
            let n = spec.image_size;
            for (obj, gt) in scene.gts.iter().enumerate() {
                let mut x0 = n as i64;
                let mut y0 = n as i64;
                let mut x1 = -1i64;
                let mut y1 = -1i64;
                for y in 0..n {
                    for x in 0..n {
                        if scene.masks[obj][y * n + x] {
                            x0 = x0.min(x as i64);
                            y0 = y0.min(y as i64);
                            x1 = x1.max(x as i64);
                            y1 = y1.max(y as i64);
                        }
                    }
                }
                assert_eq!(x0 as f64, gt.bbox.x_min, "seed {seed} obj {obj}");
                assert_eq!(y0 as f64, gt.bbox.y_min, "seed {seed} obj {obj}");
                assert_eq!((x1 + 1) as f64, gt.bbox.x_max, "seed {seed} obj {obj}");
                assert_eq!((y1 + 1) as f64, gt.bbox.y_max, "seed {seed} obj {obj}");
            }
        }
    }

    #[test]
    fn overlap_constraint_holds() {
        let spec = SceneSpec::default();
        let ds = generate_quartet(&spec, &SplitCounts::default(), 3).unwrap();
        for s in ds.quartet.source_train.iter().chain(&ds.source_test) {
            let gts = s.labels.as_ref().unwrap();
            for i in 0..gts.len() {
                for j in i + 1..gts.len() {
                    assert!(gts[i].bbox.iou(&gts[j].bbox) <= spec.max_overlap);
                }
            }
        }
    }

    #[test]
    fn unsatisfiable_placement_fails_cleanly() {
        let spec = SceneSpec {
            min_objects: 3,
            max_objects: 3,
            min_box: 14,
            max_box: 28,
            max_overlap: 0.0,
            ..SceneSpec::default()
        };
        let counts = SplitCounts {
            source_train: 20,
            target_train: 1,
            source_val: 1,
            target_val: 1,
            source_test: 1,
            target_test: 1,
        };
        match generate_quartet(&spec, &counts, 0) {
            Err(Error::Generation(_)) => {}
            other => panic!("expected generation failure, got {:?}", other.map(|_| ())),
        }
    }

    /// With the identity shift, source and target marginal pixel statistics
    /// agree within sampling error.
    #[test]
    fn neutral_shift_matches_source_statistics() {
        let spec = SceneSpec { shift: ShiftSpec::neutral(), ..SceneSpec::default() };
        let counts = SplitCounts {
            source_train: 60,
            target_train: 60,
            source_val: 1,
            target_val: 1,
            source_test: 1,
            target_test: 1,
        };
        let ds = generate_quartet(&spec, &counts, 9).unwrap();
        let stats = |list: &[DetectionSample]| {
            let vals: Vec<f64> = list.iter().flat_map(|s| s.image.data.iter().copied()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            (mean, var.sqrt())
        };
        let (ms, ss) = stats(&ds.quartet.source_train);
        let (mt, st) = stats(&ds.quartet.target_train);
        assert!((ms - mt).abs() < 0.02, "means {ms} vs {mt}");
        assert!((ss - st).abs() < 0.02, "stds {ss} vs {st}");
    }

    /// The default shift moves the marginals substantially (the domain gap
    /// the benchmark is built around).
    #[test]
    fn default_shift_changes_statistics() {
        let ds = generate_quartet(&SceneSpec::default(), &SplitCounts::default(), 9).unwrap();
        let mean = |list: &[DetectionSample]| {
            let vals: Vec<f64> = list.iter().flat_map(|s| s.image.data.iter().copied()).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let ms = mean(&ds.quartet.source_train);
        let mt = mean(&ds.quartet.target_train);
        assert!((ms - mt).abs() > 0.1, "shifted means too close: {ms} vs {mt}");
    }

    #[test]
    fn export_import_round_trips() {
        let counts = SplitCounts {
            source_train: 3,
            target_train: 3,
            source_val: 2,
            target_val: 2,
            source_test: 2,
            target_test: 2,
        };
        let ds = generate_quartet(&SceneSpec::default(), &counts, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&ds, dir.path()).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
        assert!(dir.path().join("schema.md").exists());
    }

    #[test]
    fn label_leakage_in_manifest_is_rejected() {
        let counts = SplitCounts {
            source_train: 2,
            target_train: 2,
            source_val: 1,
            target_val: 1,
            source_test: 1,
            target_test: 1,
        };
        let ds = generate_quartet(&SceneSpec::default(), &counts, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let mut manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let victim = manifest
            .samples
            .iter_mut()
            .find(|s| s.split == "target-train")
            .unwrap();
        victim.boxes = Some(vec![ManifestBox { class_id: 0, bbox: [0.0, 0.0, 4.0, 4.0] }]);
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        match import_dataset(dir.path()) {
            Err(Error::LabelLeakage(_)) => {}
            other => panic!("expected leakage rejection, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn unknown_manifest_fields_are_rejected() {
        let counts = SplitCounts {
            source_train: 1,
            target_train: 1,
            source_val: 1,
            target_val: 1,
            source_test: 1,
            target_test: 1,
        };
        let ds = generate_quartet(&SceneSpec::default(), &counts, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["surprise"] = serde_json::json!(true);
        fs::write(&path, v.to_string()).unwrap();
        assert!(import_dataset(dir.path()).is_err());
    }

    /// Hand-built two-sample dataset imports with boxes exactly as written.
    #[test]
    fn hand_written_manifest_imports_exactly() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        let img = TensorData::new(vec![1, 8, 8], vec![0.5; 64]);
        write_png(&dir.path().join("images/a.png"), &img).unwrap();
        write_png(&dir.path().join("images/b.png"), &img).unwrap();
        let manifest = serde_json::json!({
            "version": 1,
            "image_size": 8,
            "num_classes": 3,
            "samples": [
                {"id": "a", "split": "source-train", "domain": "source",
                 "file": "images/a.png",
                 "boxes": [{"class_id": 2, "bbox": [1.0, 2.0, 5.0, 7.0]}]},
                {"id": "b", "split": "target-train", "domain": "target",
                 "file": "images/b.png", "boxes": null}
            ]
        });
        fs::write(dir.path().join("manifest.json"), manifest.to_string()).unwrap();
        let ds = import_dataset(dir.path()).unwrap();
        assert_eq!(ds.quartet.source_train.len(), 1);
        let gt = &ds.quartet.source_train[0].labels.as_ref().unwrap()[0];
        assert_eq!(gt.class_id, 2);
        assert_eq!(gt.bbox, BBox::new(1.0, 2.0, 5.0, 7.0));
        assert!(ds.quartet.target_train[0].labels.is_none());
    }
}
