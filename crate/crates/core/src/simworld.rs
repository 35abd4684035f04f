//! Synthetic referring-segmentation world.
//!
//! Each sample is a grayscale image with 2-4 separated blobs and a one-word
//! instruction that singles out exactly one of them. Priors are simulated
//! from the ground truth with controllable failure modes, and the two
//! augmentation families used by weak-to-strong training live here too.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::probmaps::{BinaryMask, ProbMap};

pub const VOCAB: [&str; 8] = ["left", "right", "top", "bottom", "big", "small", "bright", "dark"];

pub const LEFT: u32 = 0;
pub const RIGHT: u32 = 1;

pub fn token_id(word: &str) -> Option<u32> {
    VOCAB.iter().position(|w| *w == word).map(|i| i as u32)
}

/// SplitMix64 finalizer; derives independent per-sample seeds from a
/// base seed, a stream tag and an index.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub image_size: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub min_radius: usize,
    pub max_radius: usize,
    /// Minimum empty pixels between blob bounding boxes.
    pub gap: usize,
    pub max_attempts: usize,
    pub pixel_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            min_blobs: 2,
            max_blobs: 4,
            min_radius: 2,
            max_radius: 5,
            gap: 2,
            max_attempts: 200,
            pixel_noise: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Ellipse,
    Rectangle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub rx: usize,
    pub ry: usize,
    pub intensity: f64,
    pub mask: BinaryMask,
}

impl Blob {
    pub fn area(&self) -> usize {
        self.mask.count()
    }

    /// Pixel centroid `(x, y)`.
    pub fn centroid(&self) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..self.mask.height() {
            for x in 0..self.mask.width() {
                if self.mask.get(y, x) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        (sx / n, sy / n)
    }

    fn bbox(&self) -> (isize, isize, isize, isize) {
        let (cx, cy) = (self.cx as isize, self.cy as isize);
        (cx - self.rx as isize, cy - self.ry as isize, cx + self.rx as isize, cy + self.ry as isize)
    }

    fn flip_horizontal(&self) -> Self {
        let w = self.mask.width() as f64;
        Self {
            cx: w - 1.0 - self.cx,
            mask: self.mask.flip_horizontal(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub sample_id: u64,
    pub seed: u64,
    pub size: usize,
    /// Row-major intensities in [0, 1].
    pub image: Vec<f64>,
    pub instruction: Vec<u32>,
    pub gt_mask: BinaryMask,
    pub blobs: Vec<Blob>,
    pub target: usize,
    pub labeled: bool,
}

impl SynthSample {
    pub fn instruction_words(&self) -> Vec<&'static str> {
        self.instruction.iter().map(|&t| VOCAB[t as usize]).collect()
    }
}

/// Index of the single blob satisfying `word`, if the attribute separates
/// one blob from all others by a clear margin.
pub fn referent(blobs: &[Blob], word: u32) -> Option<usize> {
    const POS_GAP: f64 = 2.0;
    const AREA_RATIO: f64 = 0.75;
    const INTENSITY_GAP: f64 = 0.15;
    if blobs.len() < 2 {
        return None;
    }
    let pick = |key: &dyn Fn(&Blob) -> f64, want_max: bool, ok: &dyn Fn(f64, f64) -> bool| {
        let mut idx: Vec<usize> = (0..blobs.len()).collect();
        idx.sort_by(|&a, &b| key(&blobs[a]).total_cmp(&key(&blobs[b])));
        if want_max {
            idx.reverse();
        }
        let (best, second) = (key(&blobs[idx[0]]), key(&blobs[idx[1]]));
        ok(best, second).then_some(idx[0])
    };
    let cx = |b: &Blob| b.centroid().0;
    let cy = |b: &Blob| b.centroid().1;
    let area = |b: &Blob| b.area() as f64;
    let inten = |b: &Blob| b.intensity;
    match VOCAB.get(word as usize).copied()? {
        "left" => pick(&cx, false, &|a, b| b - a >= POS_GAP),
        "right" => pick(&cx, true, &|a, b| a - b >= POS_GAP),
        "top" => pick(&cy, false, &|a, b| b - a >= POS_GAP),
        "bottom" => pick(&cy, true, &|a, b| a - b >= POS_GAP),
        "big" => pick(&area, true, &|a, b| b <= AREA_RATIO * a),
        "small" => pick(&area, false, &|a, b| a <= AREA_RATIO * b),
        "bright" => pick(&inten, true, &|a, b| a - b >= INTENSITY_GAP),
        "dark" => pick(&inten, false, &|a, b| b - a >= INTENSITY_GAP),
        _ => None,
    }
}

fn render_blob(size: usize, shape: Shape, cx: f64, cy: f64, rx: usize, ry: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(size, size);
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 - cx) / (rx as f64 + 0.5);
            let dy = (y as f64 - cy) / (ry as f64 + 0.5);
            let inside = match shape {
                Shape::Ellipse => dx * dx + dy * dy <= 1.0,
                Shape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            };
            if inside {
                m.set(y, x, true);
            }
        }
    }
    m
}

/// Geometry and intensity of one blob before rendering.
struct BlobDraw {
    shape: Shape,
    rx: usize,
    ry: usize,
    cx: usize,
    cy: usize,
    intensity: f64,
}

/// Draws a blob for the given instruction word. The target takes an
/// extreme value of the named attribute and distractors stay clear of it,
/// so the referent is decidable from the attribute alone.
fn draw_blob(rng: &mut ChaCha8Rng, cfg: &WorldConfig, word: &str, target: bool) -> Option<BlobDraw> {
    let s = cfg.image_size;
    let (r_lo, r_hi) = match (word, target) {
        ("big", true) => (cfg.max_radius, cfg.max_radius + 1),
        ("big", false) => (cfg.min_radius, cfg.min_radius + 1),
        ("small", true) => (cfg.min_radius, cfg.min_radius),
        ("small", false) => (cfg.min_radius + 2, cfg.max_radius),
        _ => (cfg.min_radius, cfg.min_radius + 2),
    };
    if r_lo > r_hi {
        return None;
    }
    let rx = rng.random_range(r_lo..=r_hi);
    let ry = if matches!(word, "big" | "small") { rx } else { rng.random_range(r_lo..=r_hi) };
    if 2 * rx + 3 > s || 2 * ry + 3 > s {
        return None;
    }
    let third = s / 3;
    let span = |r: usize, lo: usize, hi: usize| -> Option<(usize, usize)> {
        let lo = lo.max(r + 1);
        let hi = hi.min(s - r - 2);
        (lo <= hi).then_some((lo, hi))
    };
    let full_x = span(rx, 0, s)?;
    let full_y = span(ry, 0, s)?;
    let (xr, yr) = match (word, target) {
        ("left", true) => (span(rx, 0, third)?, full_y),
        ("left", false) => (span(rx, s - third - 1, s)?, full_y),
        ("right", true) => (span(rx, s - third - 1, s)?, full_y),
        ("right", false) => (span(rx, 0, third)?, full_y),
        ("top", true) => (full_x, span(ry, 0, third)?),
        ("top", false) => (full_x, span(ry, s - third - 1, s)?),
        ("bottom", true) => (full_x, span(ry, s - third - 1, s)?),
        ("bottom", false) => (full_x, span(ry, 0, third)?),
        _ => (full_x, full_y),
    };
    let intensity = match (word, target) {
        ("bright", true) => rng.random_range(0.85..=1.0),
        ("bright", false) => rng.random_range(0.35..=0.6),
        ("dark", true) => rng.random_range(0.3..=0.45),
        ("dark", false) => rng.random_range(0.65..=1.0),
        _ => rng.random_range(0.35..=1.0),
    };
    Some(BlobDraw {
        shape: if rng.random_bool(0.5) { Shape::Ellipse } else { Shape::Rectangle },
        rx,
        ry,
        cx: rng.random_range(xr.0..=xr.1),
        cy: rng.random_range(yr.0..=yr.1),
        intensity,
    })
}

/// Deterministic sample generation from a seed.
pub fn gen_sample(seed: u64, cfg: &WorldConfig) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    for _ in 0..cfg.max_attempts {
        let word = rng.random_range(0..VOCAB.len() as u32);
        let n = rng.random_range(cfg.min_blobs.max(2)..=cfg.max_blobs.max(2));
        let target = rng.random_range(0..n);
        let mut blobs: Vec<Blob> = Vec::with_capacity(n);
        for i in 0..n {
            let mut placed = false;
            for _ in 0..50 {
                let Some(d) = draw_blob(&mut rng, cfg, VOCAB[word as usize], i == target) else {
                    continue;
                };
                let cand = Blob {
                    shape: d.shape,
                    cx: d.cx as f64,
                    cy: d.cy as f64,
                    rx: d.rx,
                    ry: d.ry,
                    intensity: d.intensity,
                    mask: render_blob(s, d.shape, d.cx as f64, d.cy as f64, d.rx, d.ry),
                };
                let g = cfg.gap as isize;
                let (ax0, ay0, ax1, ay1) = cand.bbox();
                let clear = blobs.iter().all(|b| {
                    let (bx0, by0, bx1, by1) = b.bbox();
                    ax1 + g < bx0 || bx1 + g < ax0 || ay1 + g < by0 || by1 + g < ay0
                });
                if clear {
                    blobs.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                break;
            }
        }
        if blobs.len() != n || referent(&blobs, word) != Some(target) {
            continue;
        }
        let background = rng.random_range(0.0..0.15);
        let noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).expect("valid std");
        let mut image = vec![background; s * s];
        for b in &blobs {
            for (px, m) in image.iter_mut().zip(b.mask.values()) {
                if *m {
                    *px = b.intensity;
                }
            }
        }
        for px in image.iter_mut() {
            *px = (*px + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        let gt_mask = blobs[target].mask.clone();
        return Ok(SynthSample {
            sample_id: 0,
            seed,
            size: s,
            image,
            instruction: vec![word],
            gt_mask,
            blobs,
            target,
            labeled: false,
        });
    }
    Err(Error::Generation {
        seed,
        attempts: cfg.max_attempts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseMode {
    Faithful,
    BoundaryJitter,
    DistractorSwap,
    Hallucinate,
    UnderConfident,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 5] = [
        NoiseMode::Faithful,
        NoiseMode::BoundaryJitter,
        NoiseMode::DistractorSwap,
        NoiseMode::Hallucinate,
        NoiseMode::UnderConfident,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseMode::Faithful => "faithful",
            NoiseMode::BoundaryJitter => "boundary_jitter",
            NoiseMode::DistractorSwap => "distractor_swap",
            NoiseMode::Hallucinate => "hallucinate",
            NoiseMode::UnderConfident => "under_confident",
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        NoiseMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise mode '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorNoiseConfig {
    pub mode: NoiseMode,
    pub reliability: f64,
    pub blur_radius: usize,
    pub swap_prob: f64,
}

impl Default for PriorNoiseConfig {
    fn default() -> Self {
        Self {
            mode: NoiseMode::Faithful,
            reliability: 1.0,
            blur_radius: 1,
            swap_prob: 1.0,
        }
    }
}

/// Confidence level used by the modes that produce confidently wrong priors.
const CONFIDENT_HI: f64 = 0.98;

/// Soft map from a mask: values ramp from 0.5 at the boundary to `hi`
/// inside and `1 - hi` outside over `ramp` pixels (Chebyshev distance).
/// Thresholding the result at 0.5 returns the mask exactly.
pub fn ramp_map(mask: &BinaryMask, hi: f64, ramp: usize) -> ProbMap {
    let (h, w) = (mask.height(), mask.width());
    let ramp = ramp.max(1);
    let amp = (hi - 0.5).clamp(0.0, 0.5);
    let mut v = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let inside = mask.get(y, x);
            // Distance to the nearest pixel of the other class, capped at `ramp`.
            let mut d = ramp;
            'search: for r in 1..ramp {
                let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
                let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        if mask.get(yy, xx) != inside {
                            d = r;
                            break 'search;
                        }
                    }
                }
            }
            let t = d as f64 / ramp as f64;
            v[y * w + x] = if inside { 0.5 + amp * t } else { 0.5 - amp * t };
        }
    }
    ProbMap::new(h, w, v).expect("ramp values in [0, 1]")
}

fn dilate(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                let hit = (y.saturating_sub(1)..=(y + 1).min(h - 1))
                    .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| mask.get(yy, xx)));
                out.set(y, x, hit);
            }
        }
    }
    out
}

fn erode(mask: &BinaryMask) -> BinaryMask {
    let inv = BinaryMask::new(mask.height(), mask.width(), mask.values().iter().map(|v| !v).collect()).expect("same dims");
    let d = dilate(&inv);
    BinaryMask::new(mask.height(), mask.width(), d.values().iter().map(|v| !v).collect()).expect("same dims")
}

fn shift(mask: &BinaryMask, dx: isize, dy: isize) -> BinaryMask {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let mut out = BinaryMask::empty(mask.height(), mask.width());
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (x - dx, y - dy);
            if sx >= 0 && sx < w && sy >= 0 && sy < h && mask.get(sy as usize, sx as usize) {
                out.set(y as usize, x as usize, true);
            }
        }
    }
    out
}

/// Simulated external prior for a sample.
pub fn gen_prior(s: &SynthSample, noise: &PriorNoiseConfig, seed: u64) -> ProbMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = noise.reliability.clamp(0.0, 1.0);
    let ramp = noise.blur_radius + 1;
    let faithful_hi = 0.5 + 0.4 * r;
    match noise.mode {
        NoiseMode::Faithful => ramp_map(&s.gt_mask, faithful_hi, ramp),
        NoiseMode::BoundaryJitter => {
            let m = if rng.random_bool(0.5) { dilate(&s.gt_mask) } else { erode(&s.gt_mask) };
            let m = if m.count() == 0 { s.gt_mask.clone() } else { m };
            let dx = rng.random_range(-1i64..=1) as isize;
            let dy = rng.random_range(-1i64..=1) as isize;
            ramp_map(&shift(&m, dx, dy), faithful_hi, ramp)
        }
        NoiseMode::DistractorSwap => {
            if s.blobs.len() > 1 && rng.random_bool(noise.swap_prob.clamp(0.0, 1.0)) {
                let others: Vec<usize> = (0..s.blobs.len()).filter(|&i| i != s.target).collect();
                let wrong = *others.choose(&mut rng).expect("at least one other blob");
                ramp_map(&s.blobs[wrong].mask, CONFIDENT_HI, ramp)
            } else {
                ramp_map(&s.gt_mask, faithful_hi, ramp)
            }
        }
        NoiseMode::Hallucinate => {
            let mut m = s.gt_mask.clone();
            let occupied = s.blobs.iter().fold(BinaryMask::empty(s.size, s.size), |mut acc, b| {
                for y in 0..s.size {
                    for x in 0..s.size {
                        if b.mask.get(y, x) {
                            acc.set(y, x, true);
                        }
                    }
                }
                acc
            });
            let guard = dilate(&dilate(&occupied));
            for _ in 0..50 {
                let rr = rng.random_range(2..=4usize);
                if 2 * rr + 3 > s.size {
                    break;
                }
                let cx = rng.random_range(rr + 1..s.size - rr - 1) as f64;
                let cy = rng.random_range(rr + 1..s.size - rr - 1) as f64;
                let ghost = render_blob(s.size, Shape::Ellipse, cx, cy, rr, rr);
                let free = ghost.values().iter().zip(guard.values()).all(|(g, o)| !(*g && *o));
                if free {
                    for y in 0..s.size {
                        for x in 0..s.size {
                            if ghost.get(y, x) {
                                m.set(y, x, true);
                            }
                        }
                    }
                    break;
                }
            }
            ramp_map(&m, CONFIDENT_HI, ramp)
        }
        NoiseMode::UnderConfident => {
            // Right shape, squashed toward 0.5.
            ramp_map(&s.gt_mask, 0.5 + 0.1 * r, ramp)
        }
    }
}

/// Record of the weak transform, sufficient to map maps back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeakTransform {
    pub flipped: bool,
}

impl WeakTransform {
    /// Maps a map from the original frame into the weak frame.
    pub fn to_weak(&self, p: &ProbMap) -> ProbMap {
        if self.flipped {
            p.flip_horizontal()
        } else {
            p.clone()
        }
    }

    /// Maps a map from the weak frame back to the original frame.
    pub fn to_original(&self, p: &ProbMap) -> ProbMap {
        self.to_weak(p)
    }
}

pub fn swap_directions(tokens: &[u32]) -> Vec<u32> {
    tokens
        .iter()
        .map(|&t| match t {
            LEFT => RIGHT,
            RIGHT => LEFT,
            other => other,
        })
        .collect()
}

/// Applies a horizontal flip (image, mask, blobs and directional words).
pub fn flip_sample(s: &SynthSample) -> SynthSample {
    let n = s.size;
    let mut image = Vec::with_capacity(s.image.len());
    for y in 0..n {
        image.extend(s.image[y * n..(y + 1) * n].iter().rev());
    }
    SynthSample {
        image,
        instruction: swap_directions(&s.instruction),
        gt_mask: s.gt_mask.flip_horizontal(),
        blobs: s.blobs.iter().map(Blob::flip_horizontal).collect(),
        ..s.clone()
    }
}

/// Weak view: horizontal flip with probability 0.5.
pub fn weak_augment(s: &SynthSample, seed: u64) -> (SynthSample, WeakTransform) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flipped = rng.random_bool(0.5);
    apply_weak(s, WeakTransform { flipped })
}

pub fn apply_weak(s: &SynthSample, t: WeakTransform) -> (SynthSample, WeakTransform) {
    if t.flipped {
        (flip_sample(s), t)
    } else {
        (s.clone(), t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StrongOp {
    Identity,
    /// Multiply intensities by `alpha`.
    Brightness(f64),
    /// Blend toward the mean intensity by `alpha`.
    Contrast(f64),
    GaussianBlur(f64),
    Posterize(u32),
}

impl StrongOp {
    pub fn apply(&self, image: &[f64], size: usize) -> Vec<f64> {
        match *self {
            StrongOp::Identity => image.to_vec(),
            StrongOp::Brightness(a) => image.iter().map(|v| (v * a).clamp(0.0, 1.0)).collect(),
            StrongOp::Contrast(a) => {
                let mean = image.iter().sum::<f64>() / image.len() as f64;
                image.iter().map(|v| (mean + a * (v - mean)).clamp(0.0, 1.0)).collect()
            }
            StrongOp::GaussianBlur(sigma) => gaussian_blur(image, size, sigma),
            StrongOp::Posterize(bits) => {
                let drop = 8 - bits.clamp(1, 8);
                image
                    .iter()
                    .map(|v| {
                        let q = ((v * 255.0).round() as u32) >> drop << drop;
                        q as f64 / 255.0
                    })
                    .collect()
            }
        }
    }

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        match rng.random_range(0..5) {
            0 => StrongOp::Identity,
            1 => StrongOp::Brightness(rng.random_range(0.1..=0.95)),
            2 => StrongOp::Contrast(rng.random_range(0.1..=0.95)),
            3 => StrongOp::GaussianBlur(rng.random_range(0.1..=2.0)),
            _ => StrongOp::Posterize(rng.random_range(4..=8)),
        }
    }
}

fn gaussian_blur(image: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / z).collect();
    let n = size as isize;
    let clampi = |i: isize| i.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; image.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = (-r..=r)
                .map(|k| kernel[(k + r) as usize] * image[y * size + clampi(x as isize + k)])
                .sum();
        }
    }
    let mut out = vec![0.0; image.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = (-r..=r)
                .map(|k| kernel[(k + r) as usize] * tmp[clampi(y as isize + k) * size + x])
                .sum();
        }
    }
    out
}

/// Draws one or two photometric ops.
pub fn sample_strong_ops(seed: u64) -> Vec<StrongOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=2);
    (0..n).map(|_| StrongOp::sample(&mut rng)).collect()
}

/// Strong view: photometric only, so geometry and ground truth are untouched.
pub fn strong_augment(s: &SynthSample, seed: u64) -> SynthSample {
    let ops = sample_strong_ops(seed);
    let mut image = s.image.clone();
    for op in &ops {
        image = op.apply(&image, s.size);
    }
    SynthSample { image, ..s.clone() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }
}

/// Relative frequencies and reliability range of the prior failure modes.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMix {
    /// Weights in `NoiseMode::ALL` order.
    pub weights: [f64; 5],
    pub reliability_min: f64,
    pub reliability_max: f64,
    pub blur_radius: usize,
    pub swap_prob: f64,
}

impl Default for NoiseMix {
    fn default() -> Self {
        Self {
            weights: [0.45, 0.15, 0.15, 0.10, 0.15],
            reliability_min: 0.6,
            reliability_max: 1.0,
            blur_radius: 1,
            swap_prob: 1.0,
        }
    }
}

impl NoiseMix {
    pub fn only(mode: NoiseMode) -> Self {
        let mut weights = [0.0; 5];
        weights[NoiseMode::ALL.iter().position(|m| *m == mode).expect("listed")] = 1.0;
        Self {
            weights,
            reliability_min: 1.0,
            reliability_max: 1.0,
            ..Self::default()
        }
    }

    fn draw_mode(&self, rng: &mut ChaCha8Rng) -> NoiseMode {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.random_range(0.0..total.max(f64::MIN_POSITIVE));
        for (m, w) in NoiseMode::ALL.iter().zip(self.weights) {
            if u < w {
                return *m;
            }
            u -= w;
        }
        NoiseMode::Faithful
    }

    /// Full noise config of an unlabeled sample, a pure function of its seed.
    pub fn config_for(&self, sample_seed: u64, mode: NoiseMode) -> PriorNoiseConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, 1, 0));
        let (lo, hi) = (self.reliability_min, self.reliability_max.max(self.reliability_min));
        let reliability = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        PriorNoiseConfig {
            mode,
            reliability,
            blur_radius: self.blur_radius,
            swap_prob: self.swap_prob,
        }
    }
}

pub fn prior_seed(sample_seed: u64) -> u64 {
    derive_seed(sample_seed, 2, 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub sample_id: u64,
    pub split: Split,
    pub seed: u64,
    pub noise_mode: Option<NoiseMode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledItem {
    pub sample: SynthSample,
    pub noise: PriorNoiseConfig,
    pub prior: ProbMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub labeled: Vec<SynthSample>,
    pub unlabeled: Vec<UnlabeledItem>,
    pub test: Vec<SynthSample>,
    pub manifest: Vec<ManifestRecord>,
}

const MANIFEST_HEADER: &str = "sample_id\tsplit\tseed\tnoise_mode";

impl Corpus {
    /// Plain-text manifest: a `#` comment line, a header, then one
    /// tab-separated record per sample (`noise_mode` is `none` outside the
    /// unlabeled split).
    pub fn manifest_text(&self) -> String {
        let mut out = String::from("# l2l corpus manifest v1\n");
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.manifest {
            let mode = r.noise_mode.map_or("none", |m| m.as_str());
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.sample_id, r.split.as_str(), r.seed, mode));
        }
        out
    }

    pub fn manifest_hash(&self) -> String {
        let d = Sha256::digest(self.manifest_text().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    let mut seen_header = false;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            if line != MANIFEST_HEADER {
                return Err(Error::Config(format!("manifest line {}: expected header", ln + 1)));
            }
            seen_header = true;
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Config(format!("manifest line {}: expected 4 fields", ln + 1)));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|e| Error::Config(format!("manifest line {}: {e}", ln + 1)));
        out.push(ManifestRecord {
            sample_id: num(f[0])?,
            split: f[1].parse()?,
            seed: num(f[2])?,
            noise_mode: if f[3] == "none" { None } else { Some(f[3].parse()?) },
        });
    }
    Ok(out)
}

/// Regenerates a corpus from manifest records.
pub fn corpus_from_manifest(records: Vec<ManifestRecord>, world: &WorldConfig, mix: &NoiseMix) -> Result<Corpus> {
    let mut corpus = Corpus {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
        manifest: Vec::new(),
    };
    for r in &records {
        let mut s = gen_sample(r.seed, world)?;
        s.sample_id = r.sample_id;
        match r.split {
            Split::Labeled => {
                s.labeled = true;
                corpus.labeled.push(s);
            }
            Split::Test => corpus.test.push(s),
            Split::Unlabeled => {
                let mode = r
                    .noise_mode
                    .ok_or_else(|| Error::Config(format!("unlabeled sample {} lacks a noise mode", r.sample_id)))?;
                let noise = mix.config_for(r.seed, mode);
                let prior = gen_prior(&s, &noise, prior_seed(r.seed));
                corpus.unlabeled.push(UnlabeledItem { sample: s, noise, prior });
            }
        }
    }
    corpus.manifest = records;
    Ok(corpus)
}

/// Builds disjoint labeled / unlabeled / test splits from one seed.
pub fn make_corpus(n_labeled: usize, n_unlabeled: usize, n_test: usize, seed: u64, world: &WorldConfig, mix: &NoiseMix) -> Result<Corpus> {
    let mut mode_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 99, 0));
    let mut records = Vec::with_capacity(n_labeled + n_unlabeled + n_test);
    let mut id = 0u64;
    for (split, n, stream) in [(Split::Labeled, n_labeled, 10), (Split::Unlabeled, n_unlabeled, 11), (Split::Test, n_test, 12)] {
        for i in 0..n {
            let noise_mode = (split == Split::Unlabeled).then(|| mix.draw_mode(&mut mode_rng));
            records.push(ManifestRecord {
                sample_id: id,
                split,
                seed: derive_seed(seed, stream, i as u64),
                noise_mode,
            });
            id += 1;
        }
    }
    corpus_from_manifest(records, world, mix)
}
