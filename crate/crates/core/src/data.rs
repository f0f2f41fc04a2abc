//! Dataset loading, geometric augmentation, batching and the synthetic
//! polyp generator.
//!
//! On-disk layout:
//!
//! ```text
//! root/images/<stem>.png   8-bit RGB
//! root/masks/<stem>.png    8-bit grayscale, >= 128 is polyp
//! root/split.txt           optional, lines of `name<TAB>patient<TAB>train|val|test`
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{invalid, shape_err, Error, Result};
use crate::model::SIZE_MULTIPLE;
use crate::rng::Rng;
use crate::tensor::{IntTensor, Tensor};

pub const MANIFEST_FILE: &str = "split.txt";

/// One image with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]`, 0 background, 1 polyp.
    pub mask: IntTensor,
    pub patient_id: String,
    pub name: String,
}

impl Sample {
    pub fn new(image: Tensor, mask: IntTensor, patient_id: impl Into<String>, name: impl Into<String>) -> Result<Self> {
        let (c, h, w) = match *image.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(shape_err!("image must be [3, H, W], got {:?}", image.shape())),
        };
        if c != 3 {
            return Err(shape_err!("image must have 3 channels, got {c}"));
        }
        if mask.shape() != [h, w] {
            return Err(shape_err!("mask {:?} does not match image {h}x{w}", mask.shape()));
        }
        if mask.data().iter().any(|&v| v > 1) {
            return Err(invalid!("mask must be binary"));
        }
        if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(invalid!("image values must lie in [0, 1]"));
        }
        Ok(Sample {
            image,
            mask,
            patient_id: patient_id.into(),
            name: name.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split '{other}' (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub patient_id: String,
    pub split: Split,
}

/// Assignment of sample names to train/val/test.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitManifest {
    entries: Vec<ManifestEntry>,
}

impl SplitManifest {
    /// Builds a manifest, rejecting duplicate names and patients that span
    /// more than one split.
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut names = BTreeSet::new();
        let mut patient_split: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &entries {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Manifest(format!("sample '{}' listed twice", e.name)));
            }
            match patient_split.get(e.patient_id.as_str()) {
                Some(&s) if s != e.split => {
                    return Err(Error::Manifest(format!(
                        "patient '{}' appears in both {s} and {}",
                        e.patient_id, e.split
                    )))
                }
                _ => {
                    patient_split.insert(&e.patient_id, e.split);
                }
            }
        }
        Ok(SplitManifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Names in `split`, in manifest order.
    pub fn names(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.name.as_str())
            .collect()
    }

    /// Always true for a constructed manifest; kept as an explicit check.
    pub fn is_patient_disjoint(&self) -> bool {
        Self::new(self.entries.clone()).is_ok()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Manifest(format!(
                    "line {}: expected name<TAB>patient<TAB>split, got '{line}'",
                    lineno + 1
                )));
            }
            entries.push(ManifestEntry {
                name: fields[0].to_string(),
                patient_id: fields[1].to_string(),
                split: fields[2].parse()?,
            });
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.name, e.patient_id, e.split))
            .collect()
    }

    /// Assigns whole patients, in order of first appearance, to train, then
    /// val, then test; the last `test` and preceding `val` samples' worth of
    /// patients are held out.
    pub fn by_patient(samples: &[Sample], val: usize, test: usize) -> Result<Self> {
        let mut patients: Vec<(&str, usize)> = Vec::new();
        for s in samples {
            match patients.iter_mut().find(|(p, _)| *p == s.patient_id) {
                Some((_, n)) => *n += 1,
                None => patients.push((&s.patient_id, 1)),
            }
        }
        let mut split_of = BTreeMap::new();
        let (mut need_test, mut need_val) = (test, val);
        for &(p, n) in patients.iter().rev() {
            let split = if need_test > 0 {
                need_test = need_test.saturating_sub(n);
                Split::Test
            } else if need_val > 0 {
                need_val = need_val.saturating_sub(n);
                Split::Val
            } else {
                Split::Train
            };
            split_of.insert(p, split);
        }
        if !samples.is_empty() && !split_of.values().any(|&s| s == Split::Train) {
            return Err(invalid!(
                "holding out {val} validation and {test} test samples by whole patient leaves none for training"
            ));
        }
        Self::new(
            samples
                .iter()
                .map(|s| ManifestEntry {
                    name: s.name.clone(),
                    patient_id: s.patient_id.clone(),
                    split: split_of[s.patient_id.as_str()],
                })
                .collect(),
        )
    }
}

/// Samples plus their split assignment.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: SplitManifest,
}

impl Dataset {
    /// Samples assigned to `split`, in manifest order.
    pub fn split(&self, split: Split) -> Result<Vec<Sample>> {
        let by_name: BTreeMap<&str, &Sample> = self.samples.iter().map(|s| (s.name.as_str(), s)).collect();
        self.manifest
            .names(split)
            .into_iter()
            .map(|n| {
                by_name
                    .get(n)
                    .map(|s| (*s).clone())
                    .ok_or_else(|| Error::Manifest(format!("manifest names unknown sample '{n}'")))
            })
            .collect()
    }
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads an 8-bit image as `[3, H, W]` scaled to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Reads a grayscale mask; values >= 128 become class 1.
pub fn read_mask(path: &Path) -> Result<IntTensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    IntTensor::new(&[h, w], img.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as 8-bit RGB.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(shape_err!("image must be [3, H, W], got {:?}", image.shape())),
    };
    if c != 3 {
        return Err(shape_err!("image must have 3 channels, got {c}"));
    }
    let d = image.data();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| to_u8(d[(ch * h + y as usize) * w + x as usize]);
        Rgb([at(0), at(1), at(2)])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes raw 8-bit gray values `[H, W]`.
pub fn write_gray(path: &Path, height: usize, width: usize, pixels: Vec<u8>) -> Result<()> {
    if pixels.len() != height * width {
        return Err(shape_err!("{} pixels for a {height}x{width} image", pixels.len()));
    }
    let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| shape_err!("bad gray image buffer"))?;
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes a label map as 0/255.
pub fn write_mask(path: &Path, mask: &IntTensor) -> Result<()> {
    let (h, w) = match *mask.shape() {
        [h, w] => (h, w),
        _ => return Err(shape_err!("mask must be [H, W], got {:?}", mask.shape())),
    };
    write_gray(path, h, w, mask.data().iter().map(|&v| if v > 0 { 255 } else { 0 }).collect())
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Loads `root/images`, `root/masks` and the optional split manifest.
/// Without a manifest every sample is its own patient in the train split.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let images = root.join("images");
    let masks = root.join("masks");
    if !images.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", images.display())));
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Some(SplitManifest::parse(&text)?)
    } else {
        None
    };
    let patients: BTreeMap<&str, &str> = manifest
        .iter()
        .flat_map(|m| m.entries())
        .map(|e| (e.name.as_str(), e.patient_id.as_str()))
        .collect();
    let mut samples = Vec::new();
    for stem in png_stems(&images)? {
        let mask_path = masks.join(format!("{stem}.png"));
        if !mask_path.exists() {
            return Err(Error::Dataset(format!("image '{stem}' has no mask at {}", mask_path.display())));
        }
        let image = read_image(&images.join(format!("{stem}.png")))?;
        let mask = read_mask(&mask_path)?;
        let patient = patients.get(stem.as_str()).map_or(stem.clone(), |p| p.to_string());
        let sample = Sample::new(image, mask, patient, stem.clone())
            .map_err(|e| Error::Dataset(format!("sample '{stem}': {e}")))?;
        samples.push(sample);
    }
    let manifest = match manifest {
        Some(m) => {
            let known: BTreeSet<&str> = samples.iter().map(|s| s.name.as_str()).collect();
            if let Some(e) = m.entries().iter().find(|e| !known.contains(e.name.as_str())) {
                return Err(Error::Manifest(format!("manifest names unknown sample '{}'", e.name)));
            }
            m
        }
        None => SplitManifest::new(
            samples
                .iter()
                .map(|s| ManifestEntry {
                    name: s.name.clone(),
                    patient_id: s.patient_id.clone(),
                    split: Split::Train,
                })
                .collect(),
        )?,
    };
    Ok(Dataset { samples, manifest })
}

/// Writes samples and manifest in the layout [`load_dataset`] reads.
pub fn save_dataset(root: &Path, samples: &[Sample], manifest: &SplitManifest) -> Result<()> {
    for dir in [root.join("images"), root.join("masks")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        write_image(&root.join("images").join(format!("{}.png", s.name)), &s.image)?;
        write_mask(&root.join("masks").join(format!("{}.png", s.name)), &s.mask)?;
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropAnchor {
    Center,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl CropAnchor {
    pub const ALL: [CropAnchor; 5] = [
        CropAnchor::Center,
        CropAnchor::TopLeft,
        CropAnchor::TopRight,
        CropAnchor::BottomLeft,
        CropAnchor::BottomRight,
    ];

    /// Top-left corner `(y, x)` of a `ch x cw` crop in an `h x w` image.
    fn offset(self, h: usize, w: usize, ch: usize, cw: usize) -> (usize, usize) {
        match self {
            CropAnchor::Center => ((h - ch) / 2, (w - cw) / 2),
            CropAnchor::TopLeft => (0, 0),
            CropAnchor::TopRight => (0, w - cw),
            CropAnchor::BottomLeft => (h - ch, 0),
            CropAnchor::BottomRight => (h - ch, w - cw),
        }
    }
}

/// Ranges for the random geometric transform. Angles are in degrees,
/// positive is counter-clockwise; zoom > 1 magnifies; shear is the
/// horizontal shear factor.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Square crop side; `None` keeps the full image.
    pub crop: Option<usize>,
    pub rotation_deg: (f64, f64),
    pub zoom: (f64, f64),
    pub shear: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            crop: None,
            rotation_deg: (-90.0, 90.0),
            zoom: (0.8, 1.2),
            shear: (0.0, 0.4),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("rotation", self.rotation_deg), ("zoom", self.zoom), ("shear", self.shear)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(invalid!("{name} range [{lo}, {hi}] is not a valid interval"));
            }
        }
        if self.zoom.0 <= 0.0 {
            return Err(invalid!("zoom must be positive"));
        }
        if self.crop == Some(0) {
            return Err(invalid!("crop size must be positive"));
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub anchor: CropAnchor,
    /// Crop size `(h, w)`.
    pub crop: (usize, usize),
    pub rotation_deg: f64,
    pub zoom: f64,
    pub shear: f64,
}

impl AugmentParams {
    pub fn identity(h: usize, w: usize) -> Self {
        AugmentParams {
            anchor: CropAnchor::Center,
            crop: (h, w),
            rotation_deg: 0.0,
            zoom: 1.0,
            shear: 0.0,
        }
    }

    /// Draws parameters for an `h x w` sample.
    pub fn draw(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let crop = match cfg.crop {
            Some(c) if c > h || c > w => {
                return Err(invalid!("crop {c} is larger than the {h}x{w} image"));
            }
            Some(c) => (c, c),
            None => (h, w),
        };
        let anchor = CropAnchor::ALL[rng.below(5)];
        let mut pick = |(lo, hi): (f64, f64)| rng.uniform_range(lo, hi);
        Ok(AugmentParams {
            anchor,
            crop,
            rotation_deg: pick(cfg.rotation_deg),
            zoom: pick(cfg.zoom),
            shear: pick(cfg.shear),
        })
    }

    /// Inverse map from output `(x, y)` to source `(x, y)` in the full image.
    fn inverse(&self, h: usize, w: usize) -> impl Fn(f64, f64) -> (f64, f64) {
        let (ch, cw) = self.crop;
        let (oy, ox) = self.anchor.offset(h, w, ch, cw);
        let (cy, cx) = ((ch as f64 - 1.0) / 2.0, (cw as f64 - 1.0) / 2.0);
        let theta = self.rotation_deg.to_radians();
        let (sin, cos) = (libm::sin(theta), libm::cos(theta));
        let (zoom, shear) = (self.zoom, self.shear);
        move |x, y| {
            // Forward transform is shear · zoom · rotation about the crop centre.
            let (mut u, mut v) = (x - cx, y - cy);
            u -= shear * v;
            u /= zoom;
            v /= zoom;
            let (su, sv) = (cos * u - sin * v, sin * u + cos * v);
            (snap(su + cx) + ox as f64, snap(sv + cy) + oy as f64)
        }
    }
}

/// Rounds coordinates within float noise of an integer, so exact grid
/// transforms (quarter turns, identity) sample pixels exactly.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Applies `p` to a `[C, H, W]` image with bilinear sampling.
pub fn warp_image(image: &Tensor, p: &AugmentParams) -> Result<Tensor> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(shape_err!("image must be [C, H, W], got {:?}", image.shape())),
    };
    let (ch, cw) = p.crop;
    let inv = p.inverse(h, w);
    let src = image.data();
    let mut out = vec![0.0f32; c * ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            let (sx, sy) = inv(x as f64, y as f64);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for (tx, ty, wgt) in taps {
                if wgt == 0.0 || tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                    continue;
                }
                let (tx, ty) = (tx as usize, ty as usize);
                for k in 0..c {
                    out[(k * ch + y) * cw + x] += (wgt * src[(k * h + ty) * w + tx] as f64) as f32;
                }
            }
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(&[c, ch, cw], out)
}

/// Applies `p` to an `[H, W]` mask with nearest-neighbour sampling.
pub fn warp_mask(mask: &IntTensor, p: &AugmentParams) -> Result<IntTensor> {
    let (h, w) = match *mask.shape() {
        [h, w] => (h, w),
        _ => return Err(shape_err!("mask must be [H, W], got {:?}", mask.shape())),
    };
    let (ch, cw) = p.crop;
    let inv = p.inverse(h, w);
    let mut out = vec![0u8; ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            let (sx, sy) = inv(x as f64, y as f64);
            let (nx, ny) = ((sx + 0.5).floor(), (sy + 0.5).floor());
            if nx >= 0.0 && ny >= 0.0 && nx < w as f64 && ny < h as f64 {
                out[y * cw + x] = mask.data()[ny as usize * w + nx as usize];
            }
        }
    }
    IntTensor::new(&[ch, cw], out)
}

/// Crop, rotation, zoom and shear drawn from `cfg`, applied identically to
/// image and mask. A disabled config only applies the crop.
pub fn augment(s: &Sample, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Sample> {
    let (h, w) = (s.height(), s.width());
    let mut p = AugmentParams::draw(cfg, h, w, rng)?;
    if !cfg.enabled {
        p = AugmentParams {
            anchor: p.anchor,
            crop: p.crop,
            ..AugmentParams::identity(h, w)
        };
    }
    apply_augment(s, &p)
}

pub fn apply_augment(s: &Sample, p: &AugmentParams) -> Result<Sample> {
    Ok(Sample {
        image: warp_image(&s.image, p)?,
        mask: warp_mask(&s.mask, p)?,
        patient_id: s.patient_id.clone(),
        name: s.name.clone(),
    })
}

/// Stacked images `[N, 3, H, W]` and masks `[N, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub masks: IntTensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stack(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid!("cannot stack an empty batch"));
        }
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let masks: Vec<&IntTensor> = samples.iter().map(|s| &s.mask).collect();
        Ok(Batch {
            images: Tensor::stack(&images)?,
            masks: IntTensor::stack(&masks)?,
        })
    }
}

/// Sample order for one pass over `n` samples, split into batches.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: bool, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(invalid!("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

pub fn make_batches(samples: &[Sample], batch_size: usize, shuffle: bool, rng: &mut Rng) -> Result<Vec<Batch>> {
    batch_indices(samples.len(), batch_size, shuffle, rng)?
        .into_iter()
        .map(|idx| Batch::stack(&idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>()))
        .collect()
}

/// Samples per synthetic patient.
pub const SYNTH_IMAGES_PER_PATIENT: usize = 5;

/// Synthetic polyp images.
///
/// Background: a colon-like base colour modulated by bilinearly upsampled
/// 5x5 noise (amplitude 0.12) plus pixel noise (±0.03). Each image holds 0,
/// 1 or 2 elliptical blobs with radii `[6, 16]·H/64` px, uniform orientation,
/// brightness offset `[0.2, 0.4]`, dome shading and a fine stripe texture.
/// The mask is the exact ellipse support at pixel centres. Consecutive
/// groups of five images share a patient id.
pub fn generate_synthetic(n: usize, size: (usize, usize), rng: &mut Rng) -> Result<Vec<Sample>> {
    let (h, w) = size;
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(invalid!("synthetic size {h}x{w} must be positive multiples of {SIZE_MULTIPLE}"));
    }
    (0..n)
        .map(|i| {
            let mut r = rng.fork(i as u64);
            let (image, mask, _) = synth_one(h, w, &mut r);
            Sample::new(
                image,
                mask,
                format!("p{:04}", i / SYNTH_IMAGES_PER_PATIENT),
                format!("synth_{i:05}"),
            )
        })
        .collect()
}

struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    contrast: f64,
    stripe: f64,
}

impl Blob {
    /// Normalised squared radius of pixel centre `(x, y)`.
    fn rho2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

fn synth_one(h: usize, w: usize, rng: &mut Rng) -> (Tensor, IntTensor, Vec<Blob>) {
    const GRID: usize = 5;
    let base = [rng.uniform_range(0.55, 0.7), rng.uniform_range(0.3, 0.42), rng.uniform_range(0.25, 0.35)];
    let coarse: Vec<f64> = (0..GRID * GRID).map(|_| rng.uniform_range(-0.12, 0.12)).collect();
    let scale = h.min(w) as f64 / 64.0;
    let blobs: Vec<Blob> = (0..rng.below(3))
        .map(|_| {
            let a = rng.uniform_range(6.0, 16.0) * scale;
            let b = rng.uniform_range(6.0, 16.0) * scale;
            let m = a.max(b) * 0.5;
            let theta = rng.uniform_range(0.0, std::f64::consts::PI);
            Blob {
                cx: rng.uniform_range(m, w as f64 - m),
                cy: rng.uniform_range(m, h as f64 - m),
                a,
                b,
                cos: libm::cos(theta),
                sin: libm::sin(theta),
                contrast: rng.uniform_range(0.2, 0.4),
                stripe: rng.uniform_range(0.6, 1.2),
            }
        })
        .collect();
    let mut image = vec![0.0f32; 3 * h * w];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = x as f64 / (w - 1) as f64 * (GRID - 1) as f64;
            let gy = y as f64 / (h - 1) as f64 * (GRID - 1) as f64;
            let (x0, y0) = ((gx as usize).min(GRID - 2), (gy as usize).min(GRID - 2));
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let at = |i: usize, j: usize| coarse[j * GRID + i];
            let low = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + at(x0 + 1, y0) * fx * (1.0 - fy)
                + at(x0, y0 + 1) * (1.0 - fx) * fy
                + at(x0 + 1, y0 + 1) * fx * fy;
            let mut px = base.map(|c| c + low + rng.uniform_range(-0.03, 0.03));
            let (xc, yc) = (x as f64 + 0.5, y as f64 + 0.5);
            for blob in &blobs {
                let r2 = blob.rho2(xc, yc);
                if r2 <= 1.0 {
                    mask[y * w + x] = 1;
                    let dome = 0.75 + 0.25 * (1.0 - r2);
                    let texture = 0.04 * libm::sin((xc + yc) * blob.stripe);
                    let lift = blob.contrast * dome + texture;
                    px = [px[0] + lift, px[1] + 0.6 * lift, px[2] + 0.3 * lift];
                }
            }
            for (c, v) in px.iter().enumerate() {
                image[(c * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    (
        Tensor::new(&[3, h, w], image).expect("synthetic image shape"),
        IntTensor::new(&[h, w], mask).expect("synthetic mask shape"),
        blobs,
    )
}
