//! Test-time attention: resize, both branches, horizontal-flip fusion, resize back.

use crate::error::{contract, Result};
use crate::masks::{flip_fuse, fuse_attention, normalize_map, AttentionMap};
use crate::seenet::{LabelVector, MaskPolicy, SeeNetModel};
use crate::tensor::Tensor;

pub const DEFAULT_INPUT_SIDE: usize = 224;

/// Bilinear resize of `channels` planes with pixel centers at `i + 0.5`
/// (edges clamped).
pub fn resize_bilinear(
    src: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), channels * h * w);
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

pub fn resize_image(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = image.dims3()?;
    Tensor::new(
        vec![c, out_h, out_w],
        resize_bilinear(image.data(), c, h, w, out_h, out_w),
    )
}

pub fn flip_image(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, w) = image.dims3()?;
    let mut data = Vec::with_capacity(image.numel());
    for row in image.data().chunks_exact(w.max(1)) {
        data.extend(row.iter().rev());
    }
    Tensor::new(image.shape().to_vec(), data)
}

/// Every intermediate of [`infer_attention`], for inspection and tests.
#[derive(Clone, Debug)]
pub struct AttentionBreakdown {
    /// Raw branch maps on the resized input.
    pub m_a: AttentionMap,
    pub m_b: AttentionMap,
    /// Raw branch maps on the mirrored input, in mirrored orientation.
    pub m_a_flipped: AttentionMap,
    pub m_b_flipped: AttentionMap,
    /// Flip-fused map at feature resolution.
    pub fused: AttentionMap,
    /// Final map at the original image resolution.
    pub output: AttentionMap,
}

/// Fused, flip-averaged attention for `classes` (model channel indices)
/// at the image's original resolution.
pub fn infer_attention(
    model: &SeeNetModel,
    policy: &MaskPolicy,
    image: &Tensor<f32>,
    classes: &[usize],
    input_side: usize,
) -> Result<AttentionMap> {
    infer_attention_detailed(model, policy, image, classes, input_side).map(|b| b.output)
}

pub fn infer_attention_detailed(
    model: &SeeNetModel,
    policy: &MaskPolicy,
    image: &Tensor<f32>,
    classes: &[usize],
    input_side: usize,
) -> Result<AttentionBreakdown> {
    let (_, h, w) = image.dims3()?;
    contract!(
        h > 0 && w > 0,
        "cannot infer attention on a zero-area image ({}x{})",
        h,
        w
    );
    contract!(input_side > 0, "input side must be positive");
    contract!(!classes.is_empty(), "attention needs at least one class");
    let labels = LabelVector::from_classes(classes, model.num_classes())?;

    let resized = resize_image(image, input_side, input_side)?;
    let (m_a, m_b) = model.attention_maps(&resized, &labels, policy)?;
    let (m_a_flipped, m_b_flipped) =
        model.attention_maps(&flip_image(&resized)?, &labels, policy)?;

    let direct = fuse_attention(&normalize_map(&m_a), &normalize_map(&m_b))?;
    let mirrored = fuse_attention(&normalize_map(&m_a_flipped), &normalize_map(&m_b_flipped))?;
    let fused = flip_fuse(&direct, &mirrored.flip_horizontal())?;

    let values = resize_bilinear(fused.values(), 1, fused.height(), fused.width(), h, w);
    // Interpolation of values in [0, 1] stays in [0, 1] up to rounding.
    let values = values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let output = AttentionMap::new(h, w, values)?;
    Ok(AttentionBreakdown {
        m_a,
        m_b,
        m_a_flipped,
        m_b_flipped,
        fused,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let src: Vec<f32> = (0..12).map(|i| i as f32).collect();
        assert_eq!(resize_bilinear(&src, 1, 3, 4, 3, 4), src);
        let flat = vec![0.25f32; 2 * 5 * 5];
        for v in resize_bilinear(&flat, 2, 5, 5, 9, 3) {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn resize_half_pixel_centers() {
        // 2 -> 4 along one axis: output centers map to -0.25, 0.25, 0.75, 1.25.
        let out = resize_bilinear(&[0.0, 1.0], 1, 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
        // 4 -> 2 averages neighbours.
        let out = resize_bilinear(&[0.0, 1.0, 2.0, 3.0], 1, 1, 4, 1, 2);
        assert_eq!(out, vec![0.5, 2.5]);
    }

    #[test]
    fn flip_is_involution() {
        let t = Tensor::from_fn(&[3, 2, 5], |i| i as f32);
        let f = flip_image(&t).unwrap();
        assert_eq!(f.data()[0], 4.0);
        assert_eq!(flip_image(&f).unwrap(), t);
    }
}
