//! Proxy segmentation labels from saliency and per-class attention.
//!
//! Per pixel `i`, background scores `1 - D(i)` and each image class `c`
//! scores the weighted harmonic mean of its attention `A_c(i)` and the
//! saliency `D(i)`; the label is the arg-max over background and the image
//! classes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::imageio::{self, PixelKind};
use crate::masks::{normalize_map, AttentionMap};
use crate::tensor::{serialize, Tensor};

/// Class-agnostic saliency in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        contract!(
            values.len() == height * width,
            "saliency map of {}x{} needs {} values, got {}",
            height,
            width,
            height * width,
            values.len()
        );
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(format!(
                "saliency value {} at index {i} is outside [0, 1]",
                values[i]
            )));
        }
        Ok(SaliencyMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.values.iter().map(|&v| imageio::to_u8(v)).collect()
    }
}

/// Per-pixel class ids: `0` is background, `c >= 1` a semantic class.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProxyLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ProxyLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        contract!(
            labels.len() == height * width,
            "label map of {}x{} needs {} values, got {}",
            height,
            width,
            height * width,
            labels.len()
        );
        Ok(ProxyLabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = imageio::read_png(path)?;
        if !matches!(img.kind, PixelKind::Indexed | PixelKind::Gray) {
            return Err(Error::format(
                path,
                format!("label map must be indexed or grayscale, got {:?}", img.kind),
            ));
        }
        Self::new(img.height, img.width, img.pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        imageio::write_indexed(path, self.width, self.height, &self.labels)
    }
}

/// Weighted harmonic mean `(w + 1) / (w / a + 1 / d)`; `0` when `a` or `d` is `0`.
pub fn harmonic_mean(a: f64, d: f64, w: f64) -> Result<f64> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::Config(format!(
            "harmonic mean weight must be > 0, got {w}"
        )));
    }
    contract!(
        (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&d),
        "harmonic mean inputs must lie in [0, 1], got a = {}, d = {}",
        a,
        d
    );
    if a == 0.0 || d == 0.0 {
        return Ok(0.0);
    }
    Ok((w + 1.0) / (w / a + 1.0 / d))
}

/// Proxy labels plus, optionally, the score rows (background first, then
/// the image classes in ascending order).
#[derive(Clone, Debug)]
pub struct ProxyOutput {
    pub labels: ProxyLabelMap,
    pub scores: Option<Tensor<f32>>,
}

/// Proxy ground truth for one image.
///
/// `attention` maps each class id in `y` to its normalized attention.
/// Ties between background and a class go to the class; ties between
/// classes go to the smallest id.
pub fn generate_proxy_gt(
    saliency: &SaliencyMap,
    attention: &BTreeMap<u8, AttentionMap>,
    y: &[u8],
    w: f64,
) -> Result<ProxyLabelMap> {
    proxy_gt_impl(saliency, attention, y, w, false).map(|o| o.labels)
}

pub fn generate_proxy_gt_with_scores(
    saliency: &SaliencyMap,
    attention: &BTreeMap<u8, AttentionMap>,
    y: &[u8],
    w: f64,
) -> Result<ProxyOutput> {
    proxy_gt_impl(saliency, attention, y, w, true)
}

fn proxy_gt_impl(
    saliency: &SaliencyMap,
    attention: &BTreeMap<u8, AttentionMap>,
    y: &[u8],
    w: f64,
    keep_scores: bool,
) -> Result<ProxyOutput> {
    contract!(
        !y.is_empty(),
        "proxy ground truth needs a non-empty label set"
    );
    let mut classes = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    contract!(classes[0] != 0, "class id 0 is reserved for background");
    let mut maps = Vec::with_capacity(classes.len());
    for &c in &classes {
        let a = attention
            .get(&c)
            .ok_or_else(|| Error::Contract(format!("no attention map for class {c}")))?;
        contract!(
            a.shape() == (saliency.height, saliency.width),
            "attention for class {} is {:?}, saliency is {}x{}",
            c,
            a.shape(),
            saliency.height,
            saliency.width
        );
        if let Some(v) = a.values().iter().find(|&&v| v > 1.0) {
            return Err(Error::Contract(format!(
                "attention for class {c} is not normalized (value {v})"
            )));
        }
        maps.push(a.values());
    }

    let n = saliency.values.len();
    let rows = classes.len() + 1;
    let mut scores = keep_scores.then(|| vec![0.0f32; rows * n]);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let d = saliency.values[i] as f64;
        let mut best = 0u8;
        let mut best_q = 1.0 - d;
        if let Some(s) = &mut scores {
            s[i] = best_q as f32;
        }
        for (row, (&c, a)) in classes.iter().zip(&maps).enumerate() {
            let q = harmonic_mean(a[i] as f64, d, w)?;
            if let Some(s) = &mut scores {
                s[(row + 1) * n + i] = q as f32;
            }
            if q > best_q || (best == 0 && q == best_q) {
                best = c;
                best_q = q;
            }
        }
        labels.push(best);
    }
    Ok(ProxyOutput {
        labels: ProxyLabelMap::new(saliency.height, saliency.width, labels)?,
        scores: scores
            .map(|s| Tensor::new(vec![rows, saliency.height, saliency.width], s))
            .transpose()?,
    })
}

/// Loads a saliency map from an 8-bit grayscale PNG (`v / 255`) or a tensor
/// file (`[H, W]` or `[1, H, W]`, divided by its maximum).
pub fn load_saliency(path: &Path) -> Result<SaliencyMap> {
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let img = imageio::read_png(path)?;
        if img.kind != PixelKind::Gray {
            return Err(Error::format(
                path,
                format!(
                    "saliency must be single-channel grayscale, got {} channels",
                    img.kind.channels()
                ),
            ));
        }
        let values = img.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        SaliencyMap::new(img.height, img.width, values)
    } else {
        let t = serialize::load_tensor(path)?;
        let map = AttentionMap::from_tensor(&t).map_err(|e| Error::format(path, e.to_string()))?;
        let n = normalize_map(&map);
        SaliencyMap::new(n.height(), n.width(), n.values().to_vec())
    }
}
