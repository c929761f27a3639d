//! Two-domain segmentation data: a deterministic synthetic generator, the
//! on-disk manifest, folder ingestion, and in-memory loading.
//!
//! On-disk layout under a dataset root:
//!
//! ```text
//! manifest.json
//! source/images/NNNNN.png        source/labels/NNNNN.png
//! target/images/NNNNN.png        (target training labels are never written)
//! source/val/images/NNNNN.png    source/val/labels/NNNNN.png
//! target/val/images/NNNNN.png    target/val/labels/NNNNN.png
//! ```
//!
//! Images are 8-bit RGB PNGs; labels are 8-bit palette-indexed PNGs whose
//! index is the class id (255 = ignore).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::seg_model::{Domain, Image, LabelMap, IGNORE};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 5] = ["background", "circle", "square", "triangle", "stripe"];

/// Display colors for classes, indexed by class id.
pub const CLASS_PALETTE: [[u8; 3]; 5] = [[0, 0, 0], [220, 20, 60], [0, 142, 70], [70, 70, 230], [250, 210, 30]];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureMode {
    #[default]
    None,
    /// Diagonal sinusoidal bands.
    Stripes,
    /// Checkerboard modulation.
    Checker,
}

/// Appearance change applied to target images only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainShift {
    /// Hue rotation in degrees.
    pub hue_delta: f64,
    /// Added to every channel before clamping.
    pub brightness_delta: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f64,
    pub texture_mode: TextureMode,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            hue_delta: 50.0,
            brightness_delta: -0.1,
            noise_sigma: 0.04,
            texture_mode: TextureMode::Stripes,
        }
    }
}

impl DomainShift {
    pub fn none() -> Self {
        Self {
            hue_delta: 0.0,
            brightness_delta: 0.0,
            noise_sigma: 0.0,
            texture_mode: TextureMode::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of classes, 2..=5, taken in the order of [`CLASS_NAMES`].
    pub classes: usize,
    /// `[height, width]`, both multiples of 32.
    pub image_size: [usize; 2],
    pub n_source: usize,
    pub n_target: usize,
    /// Labelled validation images per domain.
    pub n_val: usize,
    pub shift: DomainShift,
    /// Expected pixel share of each foreground class (index 0 is ignored;
    /// background takes the remainder).
    pub class_frequency: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            image_size: [64, 64],
            n_source: 200,
            n_target: 200,
            n_val: 50,
            shift: DomainShift::default(),
            class_frequency: vec![0.0, 0.12, 0.12, 0.08, 0.01],
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=CLASS_NAMES.len()).contains(&self.classes) {
            return Err(Error::Config(format!("synthetic classes must be in 2..=5, got {}", self.classes)));
        }
        let [h, w] = self.image_size;
        if h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("image size {h}x{w} must be >= 32 and divisible by 32")));
        }
        if self.class_frequency.len() != self.classes {
            return Err(Error::Config("class_frequency needs one entry per class".into()));
        }
        let fg: f64 = self.class_frequency[1..].iter().sum();
        if self.class_frequency.iter().any(|f| !f.is_finite() || *f < 0.0) || fg >= 0.9 {
            return Err(Error::Config("class_frequency entries must be >= 0 with foreground total < 0.9".into()));
        }
        if self.n_source == 0 || self.n_target == 0 || self.n_val == 0 {
            return Err(Error::Config("n_source, n_target and n_val must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub split: Split,
    pub domain: Domain,
    /// Relative to the dataset root.
    pub image: PathBuf,
    pub label: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub ignore_label: u8,
    /// `[height, width]` of every item.
    pub image_size: [usize; 2],
    pub palette: Vec<[u8; 3]>,
    pub items: Vec<ManifestItem>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(&path, e))
    }

    pub fn count(&self, split: Split, domain: Domain) -> usize {
        self.items.iter().filter(|i| i.split == split && i.domain == domain).count()
    }
}

/// Label palette padded to 256 entries; the ignore index renders white.
pub fn label_palette(classes: usize) -> Vec<[u8; 3]> {
    let mut p = vec![[0u8; 3]; 256];
    for (i, c) in CLASS_PALETTE.iter().take(classes).enumerate() {
        p[i] = *c;
    }
    for (i, entry) in p.iter_mut().enumerate().skip(classes) {
        *entry = generic_color(i);
    }
    p[IGNORE as usize] = [255, 255, 255];
    p
}

fn generic_color(i: usize) -> [u8; 3] {
    let h = (i as f64 * 137.507_764) % 360.0;
    let (r, g, b) = hsv_to_rgb(h, 0.7, 0.9);
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// A rendered sample before it is written to disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedSample {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB.
    pub rgb: Vec<u8>,
    pub labels: Vec<u8>,
}

/// Per-image seed so that any image can be produced independently.
fn derive_seed(seed: u64, domain: Domain, split: Split, index: usize) -> u64 {
    let d = match domain {
        Domain::Source => 1u64,
        Domain::Target => 2,
    };
    let s = match split {
        Split::Train => 1u64,
        Split::Val => 2,
    };
    let mut z = seed ^ (d << 56) ^ (s << 48) ^ index as u64;
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Two appearance modes per class, RGB in `[0, 1]`.
const MODES: [[[f64; 3]; 2]; 5] = [
    [[0.30, 0.30, 0.32], [0.22, 0.26, 0.20]],
    [[0.85, 0.20, 0.15], [0.90, 0.55, 0.20]],
    [[0.20, 0.70, 0.25], [0.15, 0.55, 0.55]],
    [[0.20, 0.30, 0.85], [0.55, 0.25, 0.80]],
    [[0.95, 0.90, 0.30], [0.90, 0.90, 0.90]],
];

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    Square { y0: f64, x0: f64, side: f64 },
    Triangle { apex_y: f64, cx: f64, size: f64, up: bool },
    Stripe { y0: f64, x0: f64, len: f64, vertical: bool },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Square { y0, x0, side } => y >= y0 && y < y0 + side && x >= x0 && x < x0 + side,
            Shape::Triangle { apex_y, cx, size, up } => {
                let depth = if up { y - apex_y } else { apex_y - y };
                depth >= 0.0 && depth <= size && (x - cx).abs() <= depth / 2.0
            }
            Shape::Stripe { y0, x0, len, vertical } => {
                let (along, across) = if vertical { (y - y0, x - x0) } else { (x - x0, y - y0) };
                (0.0..len).contains(&along) && (0.0..2.0).contains(&across)
            }
        }
    }

    fn sample(class: usize, h: f64, w: f64, rng: &mut impl Rng) -> Shape {
        match class {
            1 => {
                let r = rng.random_range(5.0..10.0);
                Shape::Circle {
                    cy: rng.random_range(r..h - r),
                    cx: rng.random_range(r..w - r),
                    r,
                }
            }
            2 => {
                let side = rng.random_range(10.0..16.0);
                Shape::Square {
                    y0: rng.random_range(0.0..h - side),
                    x0: rng.random_range(0.0..w - side),
                    side,
                }
            }
            3 => {
                let size = rng.random_range(12.0..20.0);
                let up = rng.random_bool(0.5);
                let base = rng.random_range(0.0..h - size);
                Shape::Triangle {
                    apex_y: if up { base } else { base + size },
                    cx: rng.random_range(size / 2.0..w - size / 2.0),
                    size,
                    up,
                }
            }
            _ => {
                let len = rng.random_range(12.0..20.0);
                let vertical = rng.random_bool(0.5);
                let (lh, lw) = if vertical { (len, 2.0) } else { (2.0, len) };
                Shape::Stripe {
                    y0: rng.random_range(0.0..h - lh),
                    x0: rng.random_range(0.0..w - lw),
                    len,
                    vertical,
                }
            }
        }
    }

    fn mean_area(class: usize) -> f64 {
        match class {
            // E[pi r^2] for r ~ U(5, 10)
            1 => std::f64::consts::PI * 175.0 / 3.0,
            // E[s^2] for s ~ U(10, 16)
            2 => 508.0 / 3.0,
            // E[s^2 / 2] for s ~ U(12, 20)
            3 => 784.0 / 6.0,
            _ => 32.0,
        }
    }
}

/// Renders one image and its label map. Geometry and labels do not depend
/// on the domain; only appearance does.
pub fn render_sample(spec: &SyntheticSpec, domain: Domain, split: Split, index: usize) -> RenderedSample {
    let [h, w] = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, domain, split, index));
    let (hf, wf) = (h as f64, w as f64);

    let mut shapes = Vec::new();
    for class in 1..spec.classes {
        let expected = spec.class_frequency[class] * hf * wf / Shape::mean_area(class);
        let count = expected.floor() as usize + usize::from(rng.random_bool(expected.fract()));
        for _ in 0..count {
            shapes.push((class, Shape::sample(class, hf, wf, &mut rng), rng.random_range(0..2usize)));
        }
    }
    // paint order is random so no class is systematically on top
    for i in (1..shapes.len()).rev() {
        let j = rng.random_range(0..=i);
        shapes.swap(i, j);
    }

    let bg_mode = rng.random_range(0..2usize);
    let jitter = Normal::new(0.0, 0.04).expect("valid std");
    let colors: Vec<[f64; 3]> = shapes
        .iter()
        .map(|&(class, _, mode)| {
            let base = MODES[class][mode];
            [0, 1, 2].map(|c| (base[c] + jitter.sample(&mut rng)).clamp(0.0, 1.0))
        })
        .collect();
    let pixel_noise = Normal::new(0.0, 0.02).expect("valid std");
    let shift_noise = Normal::new(0.0, spec.shift.noise_sigma.max(1e-12)).expect("valid std");
    let bg = MODES[0][bg_mode];

    let mut rgb = vec![0u8; h * w * 3];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut color = bg;
            let mut label = 0u8;
            for (s, &(class, shape, _)) in shapes.iter().enumerate() {
                if shape.contains(py, px) {
                    color = colors[s];
                    label = class as u8;
                }
            }
            let mut c = color.map(|v| v + pixel_noise.sample(&mut rng));
            if domain == Domain::Target {
                c = apply_shift(c, &spec.shift, y, x);
                if spec.shift.noise_sigma > 0.0 {
                    c = c.map(|v| v + shift_noise.sample(&mut rng));
                }
            }
            for (ch, v) in c.iter().enumerate() {
                rgb[(y * w + x) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            labels[y * w + x] = label;
        }
    }
    RenderedSample {
        height: h,
        width: w,
        rgb,
        labels,
    }
}

fn apply_shift(c: [f64; 3], shift: &DomainShift, y: usize, x: usize) -> [f64; 3] {
    let mut c = c.map(|v| v.clamp(0.0, 1.0));
    if shift.hue_delta != 0.0 {
        let (hh, s, v) = rgb_to_hsv(c[0], c[1], c[2]);
        let (r, g, b) = hsv_to_rgb((hh + shift.hue_delta).rem_euclid(360.0), s, v);
        c = [r, g, b];
    }
    let texture = match shift.texture_mode {
        TextureMode::None => 1.0,
        TextureMode::Stripes => 1.0 + 0.15 * ((x + y) as f64 * std::f64::consts::PI / 4.0).sin(),
        TextureMode::Checker => {
            if (x / 4 + y / 4) % 2 == 0 {
                1.12
            } else {
                0.88
            }
        }
    };
    c.map(|v| v * texture + shift.brightness_delta)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn item_paths(domain: Domain, split: Split, index: usize) -> (PathBuf, PathBuf) {
    let d = match domain {
        Domain::Source => "source",
        Domain::Target => "target",
    };
    let base = match split {
        Split::Train => PathBuf::from(d),
        Split::Val => PathBuf::from(d).join("val"),
    };
    let file = format!("{index:05}.png");
    (base.join("images").join(&file), base.join("labels").join(file))
}

/// Writes the synthetic dataset under `root` and returns its manifest.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let palette = label_palette(spec.classes);
    let mut items = Vec::new();
    let plan = [
        (Split::Train, Domain::Source, spec.n_source),
        (Split::Train, Domain::Target, spec.n_target),
        (Split::Val, Domain::Source, spec.n_val),
        (Split::Val, Domain::Target, spec.n_val),
    ];
    for (split, domain, count) in plan {
        for index in 0..count {
            let sample = render_sample(spec, domain, split, index);
            let (image_rel, label_rel) = item_paths(domain, split, index);
            imageio::write_rgb(&root.join(&image_rel), sample.width, sample.height, &sample.rgb)?;
            let keep_label = !(split == Split::Train && domain == Domain::Target);
            if keep_label {
                imageio::write_indexed(&root.join(&label_rel), sample.width, sample.height, &sample.labels, &palette)?;
            }
            items.push(ManifestItem {
                split,
                domain,
                image: image_rel,
                label: keep_label.then_some(label_rel),
            });
        }
    }
    let manifest = DatasetManifest {
        version: 1,
        classes: spec.classes,
        class_names: CLASS_NAMES[..spec.classes].iter().map(|s| s.to_string()).collect(),
        ignore_label: IGNORE,
        image_size: spec.image_size,
        palette: CLASS_PALETTE[..spec.classes].to_vec(),
        items,
    };
    manifest.save(root)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FolderLayout {
    pub classes: usize,
    /// Optional `[height, width]` applied to every image (bilinear) and
    /// label map (nearest).
    pub resize: Option<[usize; 2]>,
    pub class_names: Vec<String>,
}

impl Default for FolderLayout {
    fn default() -> Self {
        Self {
            classes: 5,
            resize: None,
            class_names: Vec::new(),
        }
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Builds a manifest from an existing folder tree with the layout described
/// in the module docs. With `layout.resize` set, resized copies are written
/// next to the originals under `resized/` and referenced instead.
pub fn ingest_folder(root: &Path, layout: &FolderLayout) -> Result<DatasetManifest> {
    if layout.classes < 1 || layout.classes > IGNORE as usize {
        return Err(Error::Config(format!("classes must be in 1..255, got {}", layout.classes)));
    }
    if !root.is_dir() {
        return Err(Error::data(root, "dataset root does not exist"));
    }
    let mut items = Vec::new();
    let mut size: Option<[usize; 2]> = None;
    for split in [Split::Train, Split::Val] {
        for domain in [Domain::Source, Domain::Target] {
            let (img_dir, lbl_dir) = {
                let (i, l) = item_paths(domain, split, 0);
                (i.parent().unwrap().to_path_buf(), l.parent().unwrap().to_path_buf())
            };
            let labels_required = !(split == Split::Train && domain == Domain::Target);
            for image_path in list_pngs(&root.join(&img_dir))? {
                let name = image_path.file_name().expect("listed file").to_owned();
                let image_rel = img_dir.join(&name);
                let label_rel = lbl_dir.join(&name);
                let has_label = root.join(&label_rel).is_file();
                if labels_required && !has_label {
                    return Err(Error::data(root.join(&label_rel), "missing label map for image"));
                }
                let img = imageio::read_rgb(&root.join(&image_rel))?;
                let mut dims = [img.height, img.width];
                let mut entry = ManifestItem {
                    split,
                    domain,
                    image: image_rel.clone(),
                    label: None,
                };
                if has_label {
                    let lbl = imageio::read_indices(&root.join(&label_rel))?;
                    if (lbl.height, lbl.width) != (img.height, img.width) {
                        return Err(Error::data(
                            root.join(&label_rel),
                            format!("label is {}x{}, image is {}x{}", lbl.height, lbl.width, img.height, img.width),
                        ));
                    }
                    if let Some(&bad) = lbl.data.iter().find(|&&v| v != IGNORE && v as usize >= layout.classes) {
                        return Err(Error::data(
                            root.join(&label_rel),
                            format!("label value {bad} >= {} classes", layout.classes),
                        ));
                    }
                    entry.label = Some(label_rel.clone());
                    if let Some([rh, rw]) = layout.resize {
                        let resized = resize_nearest(&lbl.data, lbl.height, lbl.width, rh, rw);
                        let rel = PathBuf::from("resized").join(&label_rel);
                        imageio::write_indexed(&root.join(&rel), rw, rh, &resized, &label_palette(layout.classes))?;
                        entry.label = Some(rel);
                    }
                }
                if let Some([rh, rw]) = layout.resize {
                    let resized = resize_rgb_bilinear(&img.data, img.height, img.width, rh, rw);
                    let rel = PathBuf::from("resized").join(&image_rel);
                    imageio::write_rgb(&root.join(&rel), rw, rh, &resized)?;
                    entry.image = rel;
                    dims = [rh, rw];
                }
                match size {
                    None => size = Some(dims),
                    Some(s) if s != dims => {
                        return Err(Error::data(root.join(&image_rel), format!("size {dims:?} differs from {s:?}")));
                    }
                    _ => {}
                }
                items.push(entry);
            }
        }
    }
    let class_names = if layout.class_names.len() == layout.classes {
        layout.class_names.clone()
    } else if layout.classes <= CLASS_NAMES.len() {
        CLASS_NAMES[..layout.classes].iter().map(|s| s.to_string()).collect()
    } else {
        (0..layout.classes).map(|i| format!("class{i}")).collect()
    };
    Ok(DatasetManifest {
        version: 1,
        classes: layout.classes,
        class_names,
        ignore_label: IGNORE,
        image_size: size.unwrap_or([0, 0]),
        palette: label_palette(layout.classes)[..layout.classes].to_vec(),
        items,
    })
}

fn resize_nearest(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = ((y as f64 + 0.5) * h as f64 / oh as f64) as usize;
        for x in 0..ow {
            let sx = ((x as f64 + 0.5) * w as f64 / ow as f64) as usize;
            out.push(src[sy.min(h - 1) * w + sx.min(w - 1)]);
        }
    }
    out
}

fn resize_rgb_bilinear(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let coord = |o: usize, input: usize, output: usize| {
        let s = ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(input - 1);
        (i0, (i0 + 1).min(input - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow * 3);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            for c in 0..3 {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * 3 + c] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub label: Option<LabelMap>,
}

/// In-memory dataset split by domain and phase.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: usize,
    pub class_names: Vec<String>,
    pub source_train: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub source_val: Vec<Sample>,
    pub target_val: Vec<Sample>,
}

fn rgb_to_tensor(rgb: &[u8], h: usize, w: usize) -> Tensor {
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        rgb[p * 3 + c] as f64 / 255.0
    })
}

impl Dataset {
    /// Loads every manifest item from disk.
    pub fn load(root: &Path, manifest: &DatasetManifest) -> Result<Self> {
        let mut ds = Dataset {
            classes: manifest.classes,
            class_names: manifest.class_names.clone(),
            source_train: Vec::new(),
            target_train: Vec::new(),
            source_val: Vec::new(),
            target_val: Vec::new(),
        };
        for item in &manifest.items {
            let path = root.join(&item.image);
            let img = imageio::read_rgb(&path)?;
            let image = Image::new(rgb_to_tensor(&img.data, img.height, img.width), item.domain)
                .map_err(|e| Error::data(&path, e))?;
            let label = match &item.label {
                Some(rel) => {
                    let lpath = root.join(rel);
                    let l = imageio::read_indices(&lpath)?;
                    let map = LabelMap::new(l.height, l.width, l.data)?;
                    map.validate(manifest.classes).map_err(|e| Error::data(&lpath, e))?;
                    if (map.height(), map.width()) != (image.height(), image.width()) {
                        return Err(Error::data(&lpath, "label size differs from image size"));
                    }
                    Some(map)
                }
                None => None,
            };
            if item.split == Split::Val && label.is_none() {
                return Err(Error::data(&path, "validation item without label"));
            }
            ds.bucket(item.split, item.domain).push(Sample { image, label });
        }
        if ds.source_train.iter().any(|s| s.label.is_none()) {
            return Err(Error::data(root, "source training items must carry labels"));
        }
        Ok(ds)
    }

    /// Renders the synthetic dataset directly into memory. Pixel values are
    /// quantized exactly as the PNG files would be.
    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut ds = Dataset {
            classes: spec.classes,
            class_names: CLASS_NAMES[..spec.classes].iter().map(|s| s.to_string()).collect(),
            source_train: Vec::new(),
            target_train: Vec::new(),
            source_val: Vec::new(),
            target_val: Vec::new(),
        };
        let plan = [
            (Split::Train, Domain::Source, spec.n_source),
            (Split::Train, Domain::Target, spec.n_target),
            (Split::Val, Domain::Source, spec.n_val),
            (Split::Val, Domain::Target, spec.n_val),
        ];
        for (split, domain, count) in plan {
            for index in 0..count {
                let s = render_sample(spec, domain, split, index);
                let image = Image::new(rgb_to_tensor(&s.rgb, s.height, s.width), domain)?;
                let keep = !(split == Split::Train && domain == Domain::Target);
                let label = if keep { Some(LabelMap::new(s.height, s.width, s.labels)?) } else { None };
                ds.bucket(split, domain).push(Sample { image, label });
            }
        }
        Ok(ds)
    }

    fn bucket(&mut self, split: Split, domain: Domain) -> &mut Vec<Sample> {
        match (split, domain) {
            (Split::Train, Domain::Source) => &mut self.source_train,
            (Split::Train, Domain::Target) => &mut self.target_train,
            (Split::Val, Domain::Source) => &mut self.source_val,
            (Split::Val, Domain::Target) => &mut self.target_val,
        }
    }

    pub fn val(&self, domain: Domain) -> &[Sample] {
        match domain {
            Domain::Source => &self.source_val,
            Domain::Target => &self.target_val,
        }
    }
}

/// Fraction of labelled pixels per class across `samples` (ignore excluded).
pub fn class_shares(samples: &[Sample], classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; classes];
    for s in samples {
        if let Some(l) = &s.label {
            for &v in l.labels() {
                if (v as usize) < classes {
                    counts[v as usize] += 1;
                }
            }
        }
    }
    let total = counts.iter().sum::<u64>().max(1) as f64;
    counts.iter().map(|&c| c as f64 / total).collect()
}
