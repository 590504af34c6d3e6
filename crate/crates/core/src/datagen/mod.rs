//! Procedural two-domain segmentation data.
//!
//! Each image is painted class by class onto a background: horizontal strips,
//! blocks, blobs and small objects, with the painted coverage of every class
//! chosen so the expected pixel shares match a long-tailed target. Colors come
//! from a per-class palette with per-object jitter, a per-class texture and
//! pixel noise. A target domain applies a covariate shift (hue rotation,
//! brightness offset, extra noise) to the pixels only; labels come from the
//! same layout process.

mod io;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

pub use io::{read_dataset, write_dataset, DATASET_INDEX, RECORD_MAGIC};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::IGNORE_LABEL;

/// Pixel-level covariate shift separating the target domain from the source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shift {
    /// Hue rotation as a fraction of a full turn.
    pub hue: f64,
    pub brightness: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

impl Shift {
    pub const NONE: Shift = Shift {
        hue: 0.0,
        brightness: 0.0,
        noise: 0.0,
    };

    pub const DEFAULT_TARGET: Shift = Shift {
        hue: 0.15,
        brightness: 0.1,
        noise: 0.05,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Expected share of pixels per class; sums to 1.
    pub class_freq: Vec<f64>,
    /// Mean RGB color per class, components in [0, 1].
    pub palette_mean: Vec<[f64; 3]>,
    /// Per-pixel color noise standard deviation.
    pub palette_noise: f64,
    /// Half-width of the uniform per-image, per-class color offset.
    pub object_jitter: f64,
    /// Half-width of the uniform per-image brightness offset.
    pub illumination_jitter: f64,
    pub shift: Shift,
    pub seed: u64,
}

pub const DEFAULT_CLASS_FREQ: [f64; 5] = [0.55, 0.25, 0.12, 0.06, 0.02];

pub const DEFAULT_PALETTE: [[f64; 3]; 5] = [
    [0.50, 0.50, 0.50],
    [0.22, 0.30, 0.22],
    [0.78, 0.72, 0.66],
    [0.35, 0.38, 0.55],
    [0.95, 0.92, 0.75],
];

impl DomainSpec {
    /// The default 64x64, five-class source domain.
    pub fn source(n_images: usize, seed: u64) -> Self {
        Self {
            n_images,
            height: 64,
            width: 64,
            classes: DEFAULT_CLASS_FREQ.len(),
            class_freq: DEFAULT_CLASS_FREQ.to_vec(),
            palette_mean: DEFAULT_PALETTE.to_vec(),
            palette_noise: 0.04,
            object_jitter: 0.05,
            illumination_jitter: 0.1,
            shift: Shift::NONE,
            seed,
        }
    }

    /// The same layout process with the default target shift.
    pub fn target(n_images: usize, seed: u64) -> Self {
        Self {
            shift: Shift::DEFAULT_TARGET,
            ..Self::source(n_images, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidArgument(format!(
                "images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.classes < 2 || self.classes >= IGNORE_LABEL as usize {
            return Err(Error::InvalidArgument(format!(
                "class count {} out of range",
                self.classes
            )));
        }
        if self.class_freq.len() != self.classes || self.palette_mean.len() != self.classes {
            return Err(Error::InvalidArgument(
                "class_freq and palette_mean need one entry per class".into(),
            ));
        }
        let total: f64 = self.class_freq.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.class_freq.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "class frequencies must be positive and sum to 1, got sum {total}"
            )));
        }
        if [
            self.palette_noise,
            self.object_jitter,
            self.illumination_jitter,
            self.shift.noise,
        ]
        .iter()
        .any(|&v| !(v >= 0.0))
        {
            return Err(Error::InvalidArgument("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    /// Fraction of the image each class should paint so that, after later
    /// classes paint over it, its expected share matches `class_freq`.
    fn coverage(&self) -> Vec<f64> {
        let mut cover = vec![0.0; self.classes];
        let mut survive = 1.0;
        for c in (1..self.classes).rev() {
            cover[c] = (self.class_freq[c] / survive).min(0.95);
            survive *= 1.0 - cover[c];
        }
        cover
    }
}

/// One image with its label map. Pixels are stored channel-planar
/// (`3 x H x W`), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<u8>,
}

impl LabeledImage {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn flipped(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = self.clone();
        for y in 0..h {
            for x in 0..w {
                let (src, dst) = (y * w + x, y * w + (w - 1 - x));
                out.labels[dst] = self.labels[src];
                for c in 0..3 {
                    out.pixels[c * h * w + dst] = self.pixels[c * h * w + src];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Per-class share of non-ignored pixels.
    pub fn class_shares(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.spec.classes];
        for img in &self.images {
            for &l in &img.labels {
                if l != IGNORE_LABEL {
                    counts[l as usize] += 1;
                }
            }
        }
        let total: usize = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }
}

/// Stacks images into an `N x 3 x H x W` tensor plus the concatenated labels.
pub fn batch_tensor(images: &[&LabeledImage]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = images.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut pixels = Vec::with_capacity(images.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Shape("images in a batch must share a size".into()));
        }
        pixels.extend_from_slice(&img.pixels);
        labels.extend_from_slice(&img.labels);
    }
    Ok((Tensor::new(vec![images.len(), 3, h, w], pixels)?, labels))
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Strip,
    Block,
    Blob,
    Speck,
}

fn shape_kind(class: usize) -> ShapeKind {
    match class % 4 {
        1 => ShapeKind::Strip,
        2 => ShapeKind::Block,
        3 => ShapeKind::Blob,
        _ => ShapeKind::Speck,
    }
}

/// Paints one shape of roughly `area` pixels; returns the newly covered count.
fn paint_shape(mask: &mut [bool], h: usize, w: usize, kind: ShapeKind, area: f64, rng: &mut StreamRng) -> usize {
    let area = area.max(4.0);
    let mut covered = 0;
    let mut set = |y: usize, x: usize, mask: &mut [bool]| {
        let i = y * w + x;
        if !mask[i] {
            mask[i] = true;
            covered += 1;
        }
    };
    match kind {
        ShapeKind::Strip => {
            let rows = ((area / w as f64).round() as usize).clamp(1, h);
            let y0 = rng.random_range(0..=h - rows);
            for y in y0..y0 + rows {
                for x in 0..w {
                    set(y, x, mask);
                }
            }
        }
        ShapeKind::Block | ShapeKind::Speck => {
            let aspect: f64 = rng.random_range(0.5..2.0);
            let bw = ((area * aspect).sqrt().round() as usize).clamp(2, w);
            let bh = ((area / bw as f64).round() as usize).clamp(2, h);
            let y0 = rng.random_range(0..=h - bh);
            let x0 = rng.random_range(0..=w - bw);
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    set(y, x, mask);
                }
            }
        }
        ShapeKind::Blob => {
            let aspect: f64 = rng.random_range(0.6..1.6);
            let ry = (area / std::f64::consts::PI / aspect).sqrt().max(1.5);
            let rx = (ry * aspect).max(1.5);
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        set(y, x, mask);
                    }
                }
            }
        }
    }
    covered
}

fn layout(spec: &DomainSpec, rng: &mut StreamRng) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let hw = (h * w) as f64;
    let mut labels = vec![0u8; h * w];
    let cover = spec.coverage();
    for class in 1..spec.classes {
        let kind = shape_kind(class);
        let jitter: f64 = rng.random_range(0.6..1.4);
        let goal = (cover[class] * hw * jitter).max(4.0);
        let typical = match kind {
            ShapeKind::Strip => goal / rng.random_range(1.0..3.0f64).floor(),
            ShapeKind::Block => goal / rng.random_range(1.0..4.0f64).floor(),
            ShapeKind::Blob => goal / rng.random_range(1.0..3.0f64).floor(),
            ShapeKind::Speck => goal / rng.random_range(1.0..3.0f64).floor(),
        };
        let mut mask = vec![false; h * w];
        let mut covered = 0.0;
        let mut tries = 0;
        while covered < goal && tries < 64 {
            let remaining = goal - covered;
            let size = typical.min(remaining).max(remaining.min(4.0));
            covered += paint_shape(&mut mask, h, w, kind, size, rng) as f64;
            tries += 1;
        }
        for (l, m) in labels.iter_mut().zip(&mask) {
            if *m {
                *l = class as u8;
            }
        }
    }
    labels
}

fn texture(class: usize, y: usize, x: usize) -> f64 {
    match class % 5 {
        0 => 0.0,
        1 => {
            if (y / 2).is_multiple_of(2) {
                0.06
            } else {
                -0.06
            }
        }
        2 => {
            if ((y / 3) + (x / 3)).is_multiple_of(2) {
                0.07
            } else {
                -0.07
            }
        }
        3 => {
            if (x / 2).is_multiple_of(2) {
                0.05
            } else {
                -0.05
            }
        }
        _ => {
            if (x + y).is_multiple_of(3) {
                0.08
            } else {
                -0.04
            }
        }
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Renders one image. The RNG call sequence does not depend on the shift, so
/// a zero shift reproduces the unshifted image exactly.
fn render(spec: &DomainSpec, index: usize) -> LabeledImage {
    let mut r = rng::stream(spec.seed, rng::DATAGEN, index as u64);
    let (h, w) = (spec.height, spec.width);
    let labels = layout(spec, &mut r);

    let jitter: Vec<[f64; 3]> = (0..spec.classes)
        .map(|_| {
            let mut j = [0.0; 3];
            for v in &mut j {
                *v = r.random_range(-1.0..1.0) * spec.object_jitter;
            }
            j
        })
        .collect();
    let illum: f64 = r.random_range(-1.0..1.0) * spec.illumination_jitter;
    let pixel_noise = Normal::new(0.0, 1.0).expect("unit normal");

    let mut pixels = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let class = labels[i] as usize;
            let tex = texture(class, y, x);
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                let noise = pixel_noise.sample(&mut r) * spec.palette_noise;
                rgb[c] = spec.palette_mean[class][c] + jitter[class][c] + tex + illum + noise;
            }
            let shift_noise: [f64; 3] = std::array::from_fn(|_| pixel_noise.sample(&mut r));
            let mut out = rgb.map(|v| v.clamp(0.0, 1.0));
            if spec.shift.hue != 0.0 {
                let mut hsv = rgb_to_hsv(out);
                hsv[0] += spec.shift.hue;
                out = hsv_to_rgb(hsv);
            }
            for c in 0..3 {
                let v = out[c] + spec.shift.brightness + shift_noise[c] * spec.shift.noise;
                pixels[c * h * w + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    LabeledImage {
        height: h,
        width: w,
        pixels,
        labels,
    }
}

/// Generates a full domain. Each image draws from its own stream keyed by
/// `(seed, index)`, so the result does not depend on thread scheduling.
pub fn generate_domain(spec: &DomainSpec) -> Result<Dataset> {
    spec.validate()?;
    let images = (0..spec.n_images).into_par_iter().map(|i| render(spec, i)).collect();
    Ok(Dataset {
        spec: spec.clone(),
        images,
    })
}

/// Horizontal flip with probability 0.5, applied to pixels and labels together.
pub fn augment<R: Rng>(img: &LabeledImage, rng: &mut R) -> LabeledImage {
    if rng.random_bool(0.5) {
        img.flipped()
    } else {
        img.clone()
    }
}

/// Seeded disjoint split into `(train, val)` with `round(fraction * n)`
/// validation images. Both sides keep the original image order.
pub fn split_validation(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = data.len();
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} of {n} images leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, rng::SPLIT, 0);
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        order.swap(i, j);
    }
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let pick = |want: bool| {
        let images: Vec<LabeledImage> = data
            .images
            .iter()
            .zip(&is_val)
            .filter(|(_, &v)| v == want)
            .map(|(img, _)| img.clone())
            .collect();
        Dataset {
            spec: DomainSpec {
                n_images: images.len(),
                ..data.spec.clone()
            },
            images,
        }
    };
    Ok((pick(false), pick(true)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> DomainSpec {
        DomainSpec {
            height: 24,
            width: 24,
            ..DomainSpec::source(n, seed)
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_domain(&small(6, 3)).unwrap();
        let b = generate_domain(&small(6, 3)).unwrap();
        assert_eq!(a, b);
        let c = generate_domain(&small(6, 4)).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn zero_shift_target_matches_source() {
        let src = generate_domain(&small(4, 9)).unwrap();
        let tgt = generate_domain(&DomainSpec {
            shift: Shift::NONE,
            ..small(4, 9)
        })
        .unwrap();
        assert_eq!(src.images, tgt.images);
    }

    #[test]
    fn shift_changes_pixels_not_labels() {
        let src = generate_domain(&small(4, 9)).unwrap();
        let tgt = generate_domain(&DomainSpec {
            shift: Shift::DEFAULT_TARGET,
            ..small(4, 9)
        })
        .unwrap();
        for (a, b) in src.images.iter().zip(&tgt.images) {
            assert_eq!(a.labels, b.labels);
            assert_ne!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn every_label_map_has_two_classes_and_valid_pixels() {
        let d = generate_domain(&small(30, 5)).unwrap();
        for img in &d.images {
            let mut seen = [false; 5];
            for &l in &img.labels {
                seen[l as usize] = true;
            }
            assert!(seen.iter().filter(|&&s| s).count() >= 2);
            assert!(img.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn class_shares_follow_the_long_tail() {
        let d = generate_domain(&DomainSpec::source(200, 0)).unwrap();
        let shares = d.class_shares();
        for (got, want) in shares.iter().zip(DEFAULT_CLASS_FREQ) {
            assert!((got - want).abs() <= 0.3 * want, "{shares:?}");
        }
        assert!((0.014..=0.026).contains(&shares[4]), "{shares:?}");
    }

    #[test]
    fn small_images_rejected() {
        let spec = DomainSpec {
            height: 15,
            ..DomainSpec::source(1, 0)
        };
        assert!(matches!(generate_domain(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [
            [0.2, 0.5, 0.9],
            [0.9, 0.1, 0.3],
            [0.5, 0.5, 0.5],
            [0.0, 0.0, 0.0],
            [1.0, 0.8, 0.0],
        ] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-12, "{rgb:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn flip_twice_is_identity_and_labels_follow() {
        let d = generate_domain(&small(1, 2)).unwrap();
        let img = &d.images[0];
        let f = img.flipped();
        assert_eq!(&f.flipped(), img);
        let w = img.width;
        for y in 0..img.height {
            for x in 0..w {
                assert_eq!(f.labels[y * w + x], img.labels[y * w + w - 1 - x]);
                assert_eq!(f.pixels[y * w + x], img.pixels[y * w + w - 1 - x]);
            }
        }
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let d = generate_domain(&DomainSpec {
            height: 16,
            width: 16,
            ..DomainSpec::source(100, 1)
        })
        .unwrap();
        let (train, val) = split_validation(&d, 0.1, 7).unwrap();
        assert_eq!((train.len(), val.len()), (90, 10));
        let (train2, val2) = split_validation(&d, 0.1, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
        let mut all: Vec<&LabeledImage> = train.images.iter().chain(&val.images).collect();
        assert_eq!(all.len(), d.len());
        for img in &d.images {
            let pos = all.iter().position(|x| *x == img).expect("image kept");
            all.remove(pos);
        }
        assert!(split_validation(&d, 0.001, 7).is_err());
        assert!(split_validation(&d, 0.999, 7).is_err());
        assert!(split_validation(&d, 1.0, 7).is_err());
    }
}
