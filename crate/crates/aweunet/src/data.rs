//! Dataset plumbing: Otsu-based lung field extraction, ROI cropping,
//! deterministic splits, augmentation, and the synthetic phantom generator.
//!
//! Dataset layout on disk: `root/images/*.png`, `root/masks/*.png` (same
//! stem, masks 0/255, 8-bit grayscale) and `root/manifest.csv` with header
//! `image,mask,x,y,w,h,split` (one row per bounding box).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::BoundingBox;
use crate::error::{Error, Result};
use crate::kernels;

/// 2-D grayscale image with intensities in [0, 255].
pub type GrayImage = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub boxes: Vec<BoundingBox>,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

#[derive(Debug, Clone)]
pub struct AugmentationSpec {
    pub rotation_degrees: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            rotation_degrees: 15.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            elastic_alpha: 34.0,
            elastic_sigma: 4.0,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    /// Disables every transform; used for overfitting runs.
    pub fn identity() -> Self {
        AugmentationSpec {
            rotation_degrees: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            elastic_alpha: 0.0,
            elastic_sigma: 4.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub count: usize,
    pub nodule_count_range: (usize, usize),
    pub nodule_radius_range: (f64, f64),
    pub nodule_contrast_range: (f64, f64),
    pub background_texture_scale: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 128,
            count: 20,
            nodule_count_range: (1, 2),
            nodule_radius_range: (6.0, 12.0),
            nodule_contrast_range: (60.0, 110.0),
            background_texture_scale: 4.0,
            seed: 0,
        }
    }
}

// ---- Otsu and lung extraction ----

/// Otsu threshold of a 256-bin histogram: the level T maximizing
/// between-class variance of {i < T} vs {i ≥ T}, ties broken toward the
/// lower level.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::Degenerate("otsu: empty histogram".into()));
    }
    if histogram.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Degenerate(
            "otsu: all mass in one bin (zero between-class variance)".into(),
        ));
    }
    let sum_all: f64 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut best_t = 1u8;
    let mut best_var = f64::NEG_INFINITY;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 1..=255usize {
        w0 += histogram[t - 1] as f64;
        sum0 += (t - 1) as f64 * histogram[t - 1] as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

pub fn intensity_histogram(img: &GrayImage) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in img.iter() {
        let b = v.round().clamp(0.0, 255.0) as usize;
        h[b] += 1;
    }
    h
}

/// Binary dilation with a square structuring element, repeated `iters` times.
pub fn dilate(mask: &Array2<bool>, size: usize, iters: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let r = size / 2;
    let mut cur = mask.clone();
    for _ in 0..iters {
        let mut next = Array2::from_elem((h, w), false);
        for y in 0..h {
            for x in 0..w {
                if !cur[[y, x]] {
                    continue;
                }
                let y0 = y.saturating_sub(r);
                let x0 = x.saturating_sub(r);
                let y1 = (y + r + 1).min(h);
                let x1 = (x + r + 1).min(w);
                next.slice_mut(s![y0..y1, x0..x1]).fill(true);
            }
        }
        cur = next;
    }
    cur
}

/// Lung field extraction: Otsu binarization, 5×5 dilation ×3, masked
/// multiply. Returns the masked image and a flag set when the histogram was
/// degenerate and the image passed through unchanged.
pub fn extract_lung_region(slice: &GrayImage) -> (GrayImage, bool) {
    let hist = intensity_histogram(slice);
    let t = match otsu_threshold(&hist) {
        Ok(t) => t,
        Err(_) => {
            log::warn!("extract_lung_region: degenerate histogram, passing through");
            return (slice.clone(), true);
        }
    };
    let mask = slice.mapv(|v| v >= t as f64);
    let mask = dilate(&mask, 5, 3);
    let mut out = slice.clone();
    out.zip_mut_with(&mask.mapv(|m| f64::from(m)), |v, &m| *v *= m);
    (out, false)
}

// ---- ROI cropping ----

/// Expands `bbox` by `pad_fraction` per side, clips to the image, and
/// bilinearly resizes the crop to `out_size`², scaling intensities to [0,1].
pub fn crop_resize_roi(
    image: &GrayImage,
    bbox: &BoundingBox,
    pad_fraction: f64,
    out_size: usize,
) -> Result<Array3<f64>> {
    let (h, w) = image.dim();
    let px = bbox.w * pad_fraction;
    let py = bbox.h * pad_fraction;
    let x0 = (bbox.x - px).max(0.0).floor() as usize;
    let y0 = (bbox.y - py).max(0.0).floor() as usize;
    let x1 = ((bbox.x + bbox.w + px).ceil() as usize).min(w);
    let y1 = ((bbox.y + bbox.h + py).ceil() as usize).min(h);
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::contract(format!(
            "crop_resize_roi: box {:?} does not intersect {}x{} image",
            bbox, w, h
        )));
    }
    let crop = image.slice(s![y0..y1, x0..x1]).to_owned();
    let (ch, cw) = crop.dim();
    let crop3 = crop.into_shape((1, ch, cw)).unwrap();
    let mut out = kernels::resize_bilinear(crop3.view(), out_size, out_size);
    out.mapv_inplace(|v| (v / 255.0).clamp(0.0, 1.0));
    Ok(out)
}

/// Nearest-neighbor resize for masks.
pub fn resize_nearest(mask: &Array2<u8>, oh: usize, ow: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5).round())
            .clamp(0.0, h as f64 - 1.0) as usize;
        let sx = (((x as f64 + 0.5) * w as f64 / ow as f64 - 0.5).round())
            .clamp(0.0, w as f64 - 1.0) as usize;
        mask[[sy, sx]]
    })
}

/// Crops the mask with the same padded box used for the image ROI.
pub fn crop_resize_mask(
    mask: &Array2<u8>,
    bbox: &BoundingBox,
    pad_fraction: f64,
    out_size: usize,
) -> Result<Array2<u8>> {
    let (h, w) = mask.dim();
    let px = bbox.w * pad_fraction;
    let py = bbox.h * pad_fraction;
    let x0 = (bbox.x - px).max(0.0).floor() as usize;
    let y0 = (bbox.y - py).max(0.0).floor() as usize;
    let x1 = ((bbox.x + bbox.w + px).ceil() as usize).min(w);
    let y1 = ((bbox.y + bbox.h + py).ceil() as usize).min(h);
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::contract("crop_resize_mask: empty intersection"));
    }
    let crop = mask.slice(s![y0..y1, x0..x1]).to_owned();
    Ok(resize_nearest(&crop, out_size, out_size))
}

// ---- splitting ----

/// Deterministic 70/10/20 split after a seeded shuffle.
pub fn split_dataset(mut entries: Vec<ManifestEntry>, seed: u64) -> Result<DatasetManifest> {
    let n = entries.len();
    if n < 10 {
        return Err(Error::Data(format!(
            "split_dataset needs at least 10 entries, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        entries.swap(i, j);
    }
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    for (i, e) in entries.iter_mut().enumerate() {
        e.split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(DatasetManifest { entries, seed })
}

// ---- augmentation ----

fn flip_h<T: Copy>(a: &Array2<T>) -> Array2<T> {
    let mut out = a.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().to_owned()
}

fn flip_v<T: Copy>(a: &Array2<T>) -> Array2<T> {
    let mut out = a.clone();
    out.invert_axis(ndarray::Axis(0));
    out.as_standard_layout().to_owned()
}

fn sample_bilinear(img: &GrayImage, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    if y < -1.0 || x < -1.0 || y > h as f64 || x > w as f64 {
        return 0.0;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let get = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            img[[yy as usize, xx as usize]]
        }
    };
    get(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + get(y0, x0 + 1.0) * (1.0 - fy) * fx
        + get(y0 + 1.0, x0) * fy * (1.0 - fx)
        + get(y0 + 1.0, x0 + 1.0) * fy * fx
}

fn sample_nearest(mask: &Array2<u8>, y: f64, x: f64) -> u8 {
    let (h, w) = mask.dim();
    let yy = y.round();
    let xx = x.round();
    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
        0
    } else {
        mask[[yy as usize, xx as usize]]
    }
}

/// Rotates image (bilinear) and mask (nearest) by `degrees` around the
/// image center, zero-filled outside.
pub fn rotate_pair(
    image: &GrayImage,
    mask: &Array2<u8>,
    degrees: f64,
) -> (GrayImage, Array2<u8>) {
    let (h, w) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let mut oi = GrayImage::zeros((h, w));
    let mut om = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            // inverse rotation: output (y, x) samples input coordinates
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            oi[[y, x]] = sample_bilinear(image, sy, sx);
            om[[y, x]] = sample_nearest(mask, sy, sx);
        }
    }
    (oi, om)
}

/// Separable Gaussian blur with a 3σ-truncated kernel.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    assert!(sigma > 0.0);
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * r + 1) as usize);
    let mut sum = 0.0;
    for i in -r..=r {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    let (h, w) = img.dim();
    let mut tmp = GrayImage::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &k) in kernel.iter().enumerate() {
                let sx = (x as isize + ki as isize - r).clamp(0, w as isize - 1) as usize;
                acc += k * img[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = GrayImage::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &k) in kernel.iter().enumerate() {
                let sy = (y as isize + ki as isize - r).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Elastic deformation: unit noise fields smoothed by a Gaussian of width
/// `sigma` and scaled by `alpha` displace both arrays identically.
pub fn elastic_transform(
    image: &GrayImage,
    mask: &Array2<u8>,
    alpha: f64,
    sigma: f64,
    seed: u64,
) -> (GrayImage, Array2<u8>) {
    if alpha == 0.0 {
        return (image.clone(), mask.clone());
    }
    let (h, w) = image.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dx = GrayImage::zeros((h, w));
    let mut dy = GrayImage::zeros((h, w));
    for v in dx.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for v in dy.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let dx = gaussian_blur(&dx, sigma) * alpha;
    let dy = gaussian_blur(&dy, sigma) * alpha;
    let mut oi = GrayImage::zeros((h, w));
    let mut om = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let sy = y as f64 + dy[[y, x]];
            let sx = x as f64 + dx[[y, x]];
            oi[[y, x]] = sample_bilinear(image, sy, sx);
            om[[y, x]] = sample_nearest(mask, sy, sx);
        }
    }
    (oi, om)
}

/// Applies the spec's transform chain (flips, rotation, elastic) with the
/// same spatial transform on image and mask. Fully determined by
/// `(spec.seed, draw_seed)`.
pub fn augment(
    image: &GrayImage,
    mask: &Array2<u8>,
    spec: &AugmentationSpec,
    draw_seed: u64,
) -> (GrayImage, Array2<u8>) {
    assert_eq!(image.dim(), mask.dim(), "augment: image/mask misaligned");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ draw_seed.wrapping_mul(0x9E3779B97F4A7C15));
    let mut img = image.clone();
    let mut msk = mask.clone();
    if spec.hflip_prob > 0.0 && rng.gen::<f64>() < spec.hflip_prob {
        img = flip_h(&img);
        msk = flip_h(&msk);
    }
    if spec.vflip_prob > 0.0 && rng.gen::<f64>() < spec.vflip_prob {
        img = flip_v(&img);
        msk = flip_v(&msk);
    }
    if spec.rotation_degrees > 0.0 {
        let deg = rng.gen_range(-spec.rotation_degrees..spec.rotation_degrees);
        let (i2, m2) = rotate_pair(&img, &msk, deg);
        img = i2;
        msk = m2;
    }
    if spec.elastic_alpha > 0.0 {
        let eseed = rng.gen::<u64>();
        let (i2, m2) = elastic_transform(&img, &msk, spec.elastic_alpha, spec.elastic_sigma, eseed);
        img = i2;
        msk = m2;
    }
    (img, msk)
}

// ---- phantom generation ----

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64, margin: f64) -> bool {
        let dy = (y - self.cy) / (self.ry - margin).max(1.0);
        let dx = (x - self.cx) / (self.rx - margin).max(1.0);
        dy * dy + dx * dx <= 1.0
    }
}

struct RenderedPhantom {
    image: GrayImage,
    mask: Array2<u8>,
    boxes: Vec<BoundingBox>,
}

const BG_BASE: f64 = 12.0;
const BG_NOISE_AMPL: f64 = 4.0;
const LUNG_BASE: f64 = 120.0;

fn render_phantom(spec: &PhantomSpec, seed: u64) -> Result<RenderedPhantom> {
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // smooth noise background
    let mut noise = GrayImage::zeros((n, n));
    for v in noise.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let noise = gaussian_blur(&noise, spec.background_texture_scale.max(0.5));
    let peak = noise.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-9);
    let mut image = noise.mapv(|v| BG_BASE + BG_NOISE_AMPL * v / peak);

    // two bright elliptical lung fields on a dark background
    let lungs = [
        Ellipse {
            cy: n as f64 * 0.5,
            cx: n as f64 * 0.28,
            ry: n as f64 * 0.36,
            rx: n as f64 * 0.20,
        },
        Ellipse {
            cy: n as f64 * 0.5,
            cx: n as f64 * 0.72,
            ry: n as f64 * 0.36,
            rx: n as f64 * 0.20,
        },
    ];
    for y in 0..n {
        for x in 0..n {
            for lung in &lungs {
                if lung.contains(y as f64, x as f64, 0.0) {
                    image[[y, x]] = LUNG_BASE + rng.gen_range(-1.5..1.5);
                }
            }
        }
    }

    // bright Gaussian nodules; the ground-truth mask is the half-maximum
    // level set, which is exactly the disc of the drawn radius
    let max_radius = spec.nodule_radius_range.1;
    let min_lung_extent = lungs
        .iter()
        .map(|l| l.rx.min(l.ry))
        .fold(f64::INFINITY, f64::min);
    if max_radius + 3.0 >= min_lung_extent {
        return Err(Error::Data(format!(
            "phantom geometry unsatisfiable: nodule radius {} for lung semi-axis {}",
            max_radius, min_lung_extent
        )));
    }
    let count = rng.gen_range(spec.nodule_count_range.0..=spec.nodule_count_range.1);
    let mut mask = Array2::<u8>::zeros((n, n));
    let mut boxes = Vec::new();
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..count {
        let radius = rng.gen_range(spec.nodule_radius_range.0..=spec.nodule_radius_range.1);
        let contrast =
            rng.gen_range(spec.nodule_contrast_range.0..=spec.nodule_contrast_range.1);
        let mut attempt = 0;
        let (cy, cx) = loop {
            attempt += 1;
            if attempt > 200 {
                return Err(Error::Data(
                    "phantom: could not place nodule inside a lung field".into(),
                ));
            }
            let lung = &lungs[rng.gen_range(0..lungs.len())];
            let cy = rng.gen_range(lung.cy - lung.ry..lung.cy + lung.ry);
            let cx = rng.gen_range(lung.cx - lung.rx..lung.cx + lung.rx);
            if !lung.contains(cy, cx, radius + 2.0) {
                continue;
            }
            if placed
                .iter()
                .any(|&(py, px, pr)| ((cy - py).powi(2) + (cx - px).powi(2)).sqrt() < pr + radius + 3.0)
            {
                continue;
            }
            break (cy, cx);
        };
        placed.push((cy, cx, radius));
        // half-max at r = radius: sigma = radius / sqrt(2 ln 2)
        let sigma2 = radius * radius / (2.0 * std::f64::consts::LN_2);
        let reach = (radius * 2.5).ceil() as isize;
        let (mut x0, mut y0, mut x1, mut y1) = (n as isize, n as isize, -1isize, -1isize);
        for y in (cy as isize - reach).max(0)..((cy as isize + reach + 1).min(n as isize)) {
            for x in (cx as isize - reach).max(0)..((cx as isize + reach + 1).min(n as isize)) {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let profile = contrast * (-d2 / (2.0 * sigma2)).exp();
                image[[y as usize, x as usize]] += profile;
                if profile >= contrast / 2.0 {
                    mask[[y as usize, x as usize]] = 1;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        if x1 >= x0 {
            boxes.push(BoundingBox {
                x: x0 as f64,
                y: y0 as f64,
                w: (x1 - x0 + 1) as f64,
                h: (y1 - y0 + 1) as f64,
            });
        }
    }
    image.mapv_inplace(|v| v.clamp(0.0, 255.0));
    Ok(RenderedPhantom { image, mask, boxes })
}

/// Generates `spec.count` phantom image/mask pairs under `out_dir`
/// (`images/`, `masks/`). Entry i uses seed `spec.seed + i`, so parallel
/// and serial generation agree. Returns unsplit manifest entries.
pub fn generate_phantoms(spec: &PhantomSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    if spec.nodule_radius_range.0 < 2.0 {
        return Err(Error::Data("phantom nodule radius must be >= 2 px".into()));
    }
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    let rendered = crate::par::map_indexed(spec.count, |i| {
        render_phantom(spec, spec.seed.wrapping_add(i as u64))
    });
    let mut entries = Vec::with_capacity(spec.count);
    for (i, r) in rendered.into_iter().enumerate() {
        let r = r?;
        let stem = format!("phantom_{i:04}");
        let image_path = images_dir.join(format!("{stem}.png"));
        let mask_path = masks_dir.join(format!("{stem}.png"));
        save_gray_png(&image_path, &r.image)?;
        save_gray_png(&mask_path, &r.mask.mapv(|m| f64::from(m) * 255.0))?;
        entries.push(ManifestEntry {
            image_path,
            mask_path,
            boxes: r.boxes,
            split: Split::Train,
        });
    }
    Ok(entries)
}

/// Drops entries whose largest nodule equivalent diameter (√(w·h) of its
/// box) is below `min_diameter_px`.
pub fn filter_by_diameter(manifest: DatasetManifest, min_diameter_px: f64) -> DatasetManifest {
    let entries = manifest
        .entries
        .into_iter()
        .filter(|e| {
            e.boxes
                .iter()
                .map(|b| (b.w * b.h).sqrt())
                .fold(f64::NEG_INFINITY, f64::max)
                >= min_diameter_px
        })
        .collect();
    DatasetManifest {
        entries,
        seed: manifest.seed,
    }
}

// ---- PNG and manifest I/O ----

pub fn save_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    let (h, w) = img.dim();
    let buf: Vec<u8> = img
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size matches dims")
        .save(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

pub fn load_gray_png(path: &Path) -> Result<GrayImage> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32)[0])
    }))
}

/// Loads a 0/255 mask PNG as a 0/1 array.
pub fn load_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = load_gray_png(path)?;
    Ok(img.mapv(|v| u8::from(v >= 128.0)))
}

pub fn write_manifest(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    let path = root.join("manifest.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Csv {
        path: path.clone(),
        source: e,
    })?;
    w.write_record(["image", "mask", "x", "y", "w", "h", "split"])
        .map_err(|e| Error::Csv {
            path: path.clone(),
            source: e,
        })?;
    for e in &manifest.entries {
        let rel = |p: &Path| -> String {
            p.strip_prefix(root)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        for b in &e.boxes {
            w.write_record([
                rel(&e.image_path),
                rel(&e.mask_path),
                format!("{}", b.x),
                format!("{}", b.y),
                format!("{}", b.w),
                format!("{}", b.h),
                e.split.as_str().to_string(),
            ])
            .map_err(|err| Error::Csv {
                path: path.clone(),
                source: err,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.csv");
    let mut rd = csv::Reader::from_path(&path).map_err(|e| Error::Csv {
        path: path.clone(),
        source: e,
    })?;
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Csv {
            path: path.clone(),
            source: e,
        })?;
        if rec.len() != 7 {
            return Err(Error::Data(format!(
                "manifest row with {} fields, expected 7",
                rec.len()
            )));
        }
        let image_path = root.join(&rec[0]);
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Data(format!("bad number '{s}' in manifest")))
        };
        let bbox = BoundingBox {
            x: parse(&rec[2])?,
            y: parse(&rec[3])?,
            w: parse(&rec[4])?,
            h: parse(&rec[5])?,
        };
        let split = Split::parse(&rec[6])?;
        match entries.last_mut() {
            Some(last) if last.image_path == image_path => last.boxes.push(bbox),
            _ => entries.push(ManifestEntry {
                image_path,
                mask_path: root.join(&rec[1]),
                boxes: vec![bbox],
                split,
            }),
        }
    }
    Ok(DatasetManifest { entries, seed: 0 })
}
