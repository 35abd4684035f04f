//! Probability maps, binary masks and thresholded pixel partitions.

use crate::error::{Error, Result};

/// Per-pixel foreground probabilities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height * width != values.len() {
            return Err(Error::shape(
                "ProbMap::new",
                format!("{height}x{width} needs {} values, got {}", height * width, values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain {
                op: "ProbMap::new",
                detail: format!("probability {v} outside [0, 1]"),
            });
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value), "probability {value} outside [0, 1]");
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn same_dims<T: Grid>(&self, other: &T) -> bool {
        self.height == other.dims().0 && self.width == other.dims().1
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: flip_rows(&self.values, self.height, self.width),
        }
    }

    /// `1 - p` everywhere.
    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|p| 1.0 - p).collect(),
        }
    }

    /// Foreground where `p >= threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&p| p >= threshold).collect(),
        }
    }
}

/// Anything laid out on an H x W pixel grid.
pub trait Grid {
    fn dims(&self) -> (usize, usize);
}

impl Grid for ProbMap {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

impl Grid for BinaryMask {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

impl Grid for PixelPartition {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

pub(crate) fn check_dims<A: Grid, B: Grid>(op: &'static str, a: &A, b: &B) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub(crate) fn flip_rows<T: Clone>(values: &[T], height: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(values.len());
    for y in 0..height {
        out.extend(values[y * width..(y + 1) * width].iter().rev().cloned());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if height * width != values.len() {
            return Err(Error::shape(
                "BinaryMask::new",
                format!("{height}x{width} needs {} values, got {}", height * width, values.len()),
            ));
        }
        Ok(Self { height, width, values })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.values[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: flip_rows(&self.values, self.height, self.width),
        }
    }

    /// Values as 0.0 / 1.0.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_prob_map(&self) -> ProbMap {
        ProbMap {
            height: self.height,
            width: self.width,
            values: self.to_f64(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Fg,
    Bg,
    Ignore,
}

/// FG / BG / IGNORE assignment produced by a threshold pair and an ignore band.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelPartition {
    height: usize,
    width: usize,
    labels: Vec<Label>,
    pub tau_fg: f64,
    pub tau_bg: f64,
    pub band_radius: usize,
}

impl PixelPartition {
    /// Builds a partition from explicit labels (thresholds recorded as given).
    pub fn from_labels(height: usize, width: usize, labels: Vec<Label>, tau_fg: f64, tau_bg: f64, band_radius: usize) -> Result<Self> {
        if height * width != labels.len() {
            return Err(Error::shape("PixelPartition::from_labels", "label count mismatch"));
        }
        Ok(Self {
            height,
            width,
            labels,
            tau_fg,
            tau_bg,
            band_radius,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    pub fn selected_count(&self) -> usize {
        self.labels.len() - self.count(Label::Ignore)
    }

    /// FG indicator, i.e. the binary pseudo-label map.
    pub fn pseudo_mask(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self.labels.iter().map(|l| *l == Label::Fg).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            labels: flip_rows(&self.labels, self.height, self.width),
            ..self.clone()
        }
    }
}

/// Two-threshold rule followed by a Chebyshev ignore band around FG/BG
/// contacts.
pub fn partition_pixels(p: &ProbMap, tau_fg: f64, tau_bg: f64, band_radius: usize) -> Result<PixelPartition> {
    if !(0.0..=1.0).contains(&tau_bg) || !(0.0..=1.0).contains(&tau_fg) || tau_bg > tau_fg {
        return Err(Error::Contract(format!(
            "thresholds must satisfy 0 <= tau_bg <= tau_fg <= 1, got tau_fg={tau_fg}, tau_bg={tau_bg}"
        )));
    }
    let (h, w) = (p.height, p.width);
    let raw: Vec<Label> = p
        .values
        .iter()
        .map(|&v| {
            if v >= tau_fg {
                Label::Fg
            } else if v <= tau_bg {
                Label::Bg
            } else {
                Label::Ignore
            }
        })
        .collect();
    let labels = if band_radius == 0 {
        raw
    } else {
        // Summed-area tables of FG and BG indicators give O(1) window queries.
        let stride = w + 1;
        let mut fg = vec![0u32; (h + 1) * stride];
        let mut bg = vec![0u32; (h + 1) * stride];
        for y in 0..h {
            for x in 0..w {
                let l = raw[y * w + x];
                let i = (y + 1) * stride + x + 1;
                fg[i] = fg[i - 1] + fg[i - stride] - fg[i - stride - 1] + u32::from(l == Label::Fg);
                bg[i] = bg[i - 1] + bg[i - stride] - bg[i - stride - 1] + u32::from(l == Label::Bg);
            }
        }
        let window = |t: &[u32], y0: usize, x0: usize, y1: usize, x1: usize| {
            t[y1 * stride + x1] + t[y0 * stride + x0] - t[y0 * stride + x1] - t[y1 * stride + x0]
        };
        let r = band_radius;
        let mut out = raw.clone();
        for y in 0..h {
            for x in 0..w {
                let (y0, x0) = (y.saturating_sub(r), x.saturating_sub(r));
                let (y1, x1) = ((y + r + 1).min(h), (x + r + 1).min(w));
                if window(&fg, y0, x0, y1, x1) > 0 && window(&bg, y0, x0, y1, x1) > 0 {
                    out[y * w + x] = Label::Ignore;
                }
            }
        }
        out
    };
    Ok(PixelPartition {
        height: h,
        width: w,
        labels,
        tau_fg,
        tau_bg,
        band_radius,
    })
}

/// Fractions of FG, BG and IGNORE pixels.
pub fn class_ratios(part: &PixelPartition) -> (f64, f64, f64) {
    let n = part.labels.len();
    if n == 0 {
        return (0.0, 0.0, 1.0);
    }
    let n = n as f64;
    let pos = part.count(Label::Fg) as f64 / n;
    let neg = part.count(Label::Bg) as f64 / n;
    (pos, neg, 1.0 - pos - neg)
}

/// Population mean and standard deviation.
pub fn mean_std(p: &ProbMap) -> (f64, f64) {
    let n = p.values.len() as f64;
    let mu = p.values.iter().sum::<f64>() / n;
    let var = p.values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Mean of the margin certainty `(2p - 1)^2`.
pub fn confidence_score(p: &ProbMap) -> f64 {
    let n = p.values.len() as f64;
    p.values.iter().map(|v| (2.0 * v - 1.0).powi(2)).sum::<f64>() / n
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_dims("iou", pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (a, b) in pred.values.iter().zip(&gt.values) {
        inter += usize::from(*a && *b);
        union += usize::from(*a || *b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
