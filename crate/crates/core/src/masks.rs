//! Attention maps, the ternary zone mask and per-branch C-ReLU masks.
//!
//! Zone codes in a [`TernaryMask`]: `0` attention zone (already detected,
//! erased), `+1` potential zone, `-1` background zone.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::{MaskMap, Real, Tensor};

pub const ATTENTION: i8 = 0;
pub const POTENTIAL: i8 = 1;
pub const BACKGROUND: i8 = -1;

/// Non-negative single-channel `[H, W]` map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T = f32> {
    height: usize,
    width: usize,
    values: Vec<T>,
    normalized: bool,
}

impl<T: Real> AttentionMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        contract!(
            values.len() == height * width,
            "attention map of {}x{} needs {} values, got {}",
            height,
            width,
            height * width,
            values.len()
        );
        if let Some(i) = values.iter().position(|v| !(*v >= T::zero())) {
            return Err(Error::Contract(format!(
                "attention value {:?} at index {i} is negative or NaN",
                values[i]
            )));
        }
        Ok(AttentionMap {
            height,
            width,
            values,
            normalized: false,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        AttentionMap {
            height,
            width,
            values: vec![T::zero(); height * width],
            normalized: false,
        }
    }

    /// Wraps a `[H, W]` or `[1, H, W]` tensor.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => {
                return Err(Error::Contract(format!(
                    "attention tensor must be [H, W] or [1, H, W], got {s:?}"
                )))
            }
        };
        Self::new(h, w, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.height, self.width], self.values.clone()).expect("shape matches")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::zero(), T::max)
    }

    pub fn scaled(&self, c: T) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.values.iter().map(|&v| v * c).collect(),
        )
    }

    /// Mirror image along the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks_exact(self.width.max(1)) {
            values.extend(row.iter().rev());
        }
        AttentionMap {
            values,
            ..self.clone()
        }
    }

    pub fn cast<U: Real>(&self) -> AttentionMap<U> {
        AttentionMap {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
            normalized: self.normalized,
        }
    }
}

/// Divides by the maximum so values span `[0, 1]`; an all-zero map stays zero.
pub fn normalize_map<T: Real>(m: &AttentionMap<T>) -> AttentionMap<T> {
    let max = m.max();
    let values = if max > T::zero() {
        m.values.iter().map(|&v| v / max).collect()
    } else {
        m.values.clone()
    };
    AttentionMap {
        values,
        normalized: true,
        ..m.clone()
    }
}

/// Relative thresholds `k_h`, `k_l` (fractions of the attention maximum).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub high: f64,
    pub low: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            high: 0.7,
            low: 0.05,
        }
    }
}

impl Thresholds {
    pub fn new(high: f64, low: f64) -> Result<Self> {
        let t = Thresholds { high, low };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.low && self.low < self.high && self.high <= 1.0) {
            return Err(Error::Config(format!(
                "thresholds need 0 <= k_l < k_h <= 1, got k_h = {}, k_l = {}",
                self.high, self.low
            )));
        }
        Ok(())
    }

    /// Factor for the background threshold of the third branch.
    pub fn background_factor(&self) -> f64 {
        (self.high + self.low) / 2.0
    }
}

/// Attention / potential / background partition of the feature plane.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TernaryMask(MaskMap);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ZoneCounts {
    pub attention: usize,
    pub potential: usize,
    pub background: usize,
}

impl TernaryMask {
    pub fn as_mask(&self) -> &MaskMap {
        &self.0
    }

    pub fn into_mask(self) -> MaskMap {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn values(&self) -> &[i8] {
        self.0.values()
    }

    pub fn zone_counts(&self) -> ZoneCounts {
        let mut z = ZoneCounts::default();
        for &v in self.0.values() {
            match v {
                ATTENTION => z.attention += 1,
                POTENTIAL => z.potential += 1,
                _ => z.background += 1,
            }
        }
        z
    }
}

/// Thresholds the attention map into the three zones.
///
/// `0` where `M >= k_h * max`, `-1` where `M < k_l * max`, `+1` otherwise.
/// An all-zero map is entirely background.
pub fn ternary_mask<T: Real>(m: &AttentionMap<T>, t: Thresholds) -> Result<TernaryMask> {
    t.validate()?;
    let max = m.max();
    let values = if max > T::zero() {
        let high = T::lit(t.high) * max;
        let low = T::lit(t.low) * max;
        m.values
            .iter()
            .map(|&v| {
                if v >= high {
                    ATTENTION
                } else if v < low {
                    BACKGROUND
                } else {
                    POTENTIAL
                }
            })
            .collect()
    } else {
        vec![BACKGROUND; m.values.len()]
    };
    Ok(TernaryMask(MaskMap::new(m.height, m.width, values)?))
}

/// Mask for the second branch: the ternary mask itself (erase, keep, reverse).
pub fn mask_for_sb(t_a: &TernaryMask) -> MaskMap {
    t_a.0.clone()
}

/// Binary mask for the third branch: `1` where `M < ((k_h + k_l) / 2) * max`, else `0`.
pub fn mask_for_sc<T: Real>(m: &AttentionMap<T>, t: Thresholds) -> Result<MaskMap> {
    t.validate()?;
    let max = m.max();
    let values = if max > T::zero() {
        let cut = T::lit(t.background_factor()) * max;
        m.values.iter().map(|&v| i8::from(v < cut)).collect()
    } else {
        vec![1; m.values.len()]
    };
    MaskMap::new(m.height, m.width, values)
}

fn pointwise_max<T: Real>(
    a: &AttentionMap<T>,
    b: &AttentionMap<T>,
    what: &str,
) -> Result<AttentionMap<T>> {
    contract!(
        a.shape() == b.shape(),
        "{}: shapes {:?} and {:?} differ",
        what,
        a.shape(),
        b.shape()
    );
    Ok(AttentionMap {
        height: a.height,
        width: a.width,
        values: a
            .values
            .iter()
            .zip(&b.values)
            .map(|(&x, &y)| x.max(y))
            .collect(),
        normalized: a.normalized && b.normalized,
    })
}

/// Elementwise maximum of two normalized branch maps.
pub fn fuse_attention<T: Real>(
    a_hat: &AttentionMap<T>,
    b_hat: &AttentionMap<T>,
) -> Result<AttentionMap<T>> {
    pointwise_max(a_hat, b_hat, "fuse_attention")
}

/// Elementwise maximum of the fused map and the (re-flipped) fused map of the
/// mirrored input.
pub fn flip_fuse<T: Real>(
    fused: &AttentionMap<T>,
    fused_flipped: &AttentionMap<T>,
) -> Result<AttentionMap<T>> {
    pointwise_max(fused, fused_flipped, "flip_fuse")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f32]) -> AttentionMap {
        AttentionMap::new(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_map(&row(&[0.5, 1.0, 2.0]));
        assert_eq!(n.values(), &[0.25, 0.5, 1.0]);
        assert!(n.is_normalized());
        let z = normalize_map(&row(&[0.0, 0.0]));
        assert_eq!(z.values(), &[0.0, 0.0]);
        assert!(z.is_normalized());
        assert_eq!(normalize_map(&n).values(), n.values());
    }

    #[test]
    fn negative_values_rejected() {
        assert!(AttentionMap::new(1, 2, vec![0.5f32, -0.1]).is_err());
        assert!(AttentionMap::new(1, 2, vec![0.5f32, f32::NAN]).is_err());
    }

    #[test]
    fn ternary_examples() {
        let m = row(&[0.9, 0.5, 0.02]);
        let t = ternary_mask(&m, Thresholds::default()).unwrap();
        assert_eq!(t.values(), &[0, 1, -1]);
        let t = ternary_mask(&row(&[0.0; 3]), Thresholds::default()).unwrap();
        assert_eq!(t.values(), &[-1, -1, -1]);
        // 0.7 * 1.0 is exactly the high threshold.
        let t = ternary_mask(&row(&[1.0, 0.7, 0.05, 0.0499]), Thresholds::default()).unwrap();
        assert_eq!(t.values(), &[0, 0, 1, -1]);
    }

    #[test]
    fn threshold_config_errors() {
        assert!(Thresholds::new(0.05, 0.7).is_err());
        assert!(Thresholds::new(0.5, 0.5).is_err());
        assert!(Thresholds::new(1.5, 0.1).is_err());
        let bad = Thresholds {
            high: 0.1,
            low: 0.2,
        };
        assert!(matches!(
            ternary_mask(&row(&[1.0]), bad),
            Err(Error::Config(_))
        ));
        assert!(mask_for_sc(&row(&[1.0]), bad).is_err());
    }

    #[test]
    fn sb_mask_is_passthrough() {
        for vals in [vec![0, 1, -1], vec![1; 3], vec![-1; 3]] {
            let t = TernaryMask(MaskMap::new(1, 3, vals.clone()).unwrap());
            assert_eq!(mask_for_sb(&t).values(), vals.as_slice());
        }
    }

    #[test]
    fn sc_mask_examples() {
        let m = row(&[0.9, 0.5, 0.02]);
        assert_eq!(
            mask_for_sc(&m, Thresholds::default()).unwrap().values(),
            &[0, 0, 1]
        );
        assert_eq!(
            mask_for_sc(&row(&[0.0; 4]), Thresholds::default())
                .unwrap()
                .values(),
            &[1; 4]
        );
        assert_eq!(
            mask_for_sc(&row(&[0.3; 4]), Thresholds::default())
                .unwrap()
                .values(),
            &[0; 4]
        );
    }

    #[test]
    fn fusion_examples() {
        let a = row(&[0.2, 0.8]);
        let b = row(&[0.5, 0.1]);
        assert_eq!(fuse_attention(&a, &b).unwrap().values(), &[0.5, 0.8]);
        assert_eq!(fuse_attention(&a, &a).unwrap().values(), a.values());
        assert_eq!(
            fuse_attention(&a, &row(&[0.0, 0.0])).unwrap().values(),
            a.values()
        );
        assert_eq!(
            flip_fuse(&row(&[0.3]), &row(&[0.6])).unwrap().values(),
            &[0.6]
        );
        assert_eq!(
            flip_fuse(&a, &row(&[0.0, 0.0])).unwrap().values(),
            a.values()
        );
        assert!(fuse_attention(&a, &row(&[0.1])).is_err());
        assert!(flip_fuse(&a, &row(&[0.1, 0.2, 0.3])).is_err());
    }

    #[test]
    fn flip_reverses_rows() {
        let m = AttentionMap::new(2, 3, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(
            m.flip_horizontal().values(),
            &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]
        );
        assert_eq!(m.flip_horizontal().flip_horizontal(), m);
    }
}
