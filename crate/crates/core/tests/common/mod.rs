//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use seenet::masks::AttentionMap;
use seenet::proxy_gt::SaliencyMap;

/// `max(x, 0) * m`, spelled out.
pub fn crelu_ref(x: f32, m: i8) -> f32 {
    let r = if x > 0.0 { x } else { 0.0 };
    r * f32::from(m)
}

/// Zone code per pixel: 0 attention, -1 background, +1 potential.
pub fn zones_ref(values: &[f64], high: f64, low: f64) -> Vec<i8> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    values
        .iter()
        .map(|&v| {
            if max <= 0.0 || v < low * max {
                -1
            } else if v >= high * max {
                0
            } else {
                1
            }
        })
        .collect()
}

/// `(w + 1) / (w / a + 1 / d)`, zero when either input is zero.
pub fn harm_ref(a: f64, d: f64, w: f64) -> f64 {
    if a == 0.0 || d == 0.0 {
        0.0
    } else {
        (w + 1.0) / (w / a + 1.0 / d)
    }
}

/// Brute-force proxy labels: collect every score, take the maximum, and
/// prefer the smallest class id among the maximizers over background.
pub fn proxy_ref(d: &[f32], attention: &BTreeMap<u8, Vec<f32>>, w: f64) -> Vec<u8> {
    (0..d.len())
        .map(|i| {
            let di = d[i] as f64;
            let mut scores: Vec<(u8, f64)> = vec![(0, 1.0 - di)];
            for (&c, a) in attention {
                scores.push((c, harm_ref(a[i] as f64, di, w)));
            }
            let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            scores
                .iter()
                .filter(|s| s.1 == best)
                .map(|s| s.0)
                .filter(|&c| c != 0)
                .min()
                .unwrap_or(0)
        })
        .collect()
}

/// Per-class IoU by direct set counting; `None` for classes absent from both
/// maps. The mean is brought over a common denominator and divided once,
/// which is exact while both integers stay below 2^53 (small maps only).
pub fn miou_ref(gt: &[u8], pred: &[u8], labels: usize) -> (Vec<Option<f64>>, Option<f64>) {
    let counts: Vec<(u64, u64)> = (0..labels as u8)
        .map(|c| {
            let mut inter = 0u64;
            let mut union = 0u64;
            for i in 0..gt.len() {
                let (g, p) = (gt[i] == c, pred[i] == c);
                if g && p {
                    inter += 1;
                }
                if g || p {
                    union += 1;
                }
            }
            (inter, union)
        })
        .collect();
    let per = counts
        .iter()
        .map(|&(i, u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<(u64, u64)> = counts.into_iter().filter(|c| c.1 > 0).collect();
    if present.is_empty() {
        return (per, None);
    }
    let den: u64 = present.iter().map(|c| c.1).product();
    let num: u64 = present.iter().map(|&(i, u)| i * (den / u)).sum();
    let den = den * present.len() as u64;
    assert!(
        num < 1 << 53 && den < 1 << 53,
        "oracle only exact for small maps"
    );
    (per, Some(num as f64 / den as f64))
}

/// Random non-negative map; a fraction of pixels is exactly zero and some
/// values repeat so ties occur.
pub fn random_map(h: usize, w: usize, rng: &mut ChaCha8Rng) -> AttentionMap<f64> {
    let scale = 10f64.powf(rng.random_range(-3.0..3.0));
    let values = (0..h * w)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => scale,
            _ => rng.random_range(0.0..1.0) * scale,
        })
        .collect();
    AttentionMap::new(h, w, values).unwrap()
}

pub fn random_unit_map(h: usize, w: usize, rng: &mut ChaCha8Rng) -> AttentionMap<f32> {
    let values = (0..h * w)
        .map(|_| match rng.random_range(0..8) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0f32),
        })
        .collect();
    AttentionMap::new(h, w, values).unwrap()
}

pub fn random_saliency(h: usize, w: usize, rng: &mut ChaCha8Rng) -> SaliencyMap {
    let values = (0..h * w)
        .map(|_| match rng.random_range(0..8) {
            0 => 0.0,
            1 => 1.0,
            2 => 0.5,
            _ => rng.random_range(0.0..1.0f32),
        })
        .collect();
    SaliencyMap::new(h, w, values).unwrap()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}
