//! 8-bit PNG reading and writing (RGB, grayscale and palette-indexed).

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelKind {
    Gray,
    GrayAlpha,
    Rgb,
    Rgba,
    Indexed,
}

impl PixelKind {
    pub fn channels(self) -> usize {
        match self {
            PixelKind::Gray | PixelKind::Indexed => 1,
            PixelKind::GrayAlpha => 2,
            PixelKind::Rgb => 3,
            PixelKind::Rgba => 4,
        }
    }
}

/// Decoded image; `pixels` is row-major, interleaved by channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub kind: PixelKind,
    pub pixels: Vec<u8>,
}

/// Reads an 8-bit PNG. Palette images return raw indices.
pub fn read_png(path: &Path) -> Result<RawImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("unsupported bit depth {:?}", info.bit_depth),
        ));
    }
    let kind = match info.color_type {
        png::ColorType::Grayscale => PixelKind::Gray,
        png::ColorType::GrayscaleAlpha => PixelKind::GrayAlpha,
        png::ColorType::Rgb => PixelKind::Rgb,
        png::ColorType::Rgba => PixelKind::Rgba,
        png::ColorType::Indexed => PixelKind::Indexed,
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let row = width * kind.channels();
    let mut pixels = Vec::with_capacity(row * height);
    for r in 0..height {
        pixels.extend_from_slice(&buf[r * info.line_size..r * info.line_size + row]);
    }
    Ok(RawImage {
        width,
        height,
        kind,
        pixels,
    })
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    pixels: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        encoder.set_palette(p);
    }
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::format(path, format!("png: {other}")),
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(pixels).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

pub fn write_rgb(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height * 3);
    write_png(path, width, height, png::ColorType::Rgb, None, pixels)
}

pub fn write_gray(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    write_png(path, width, height, png::ColorType::Grayscale, None, pixels)
}

/// Writes a label map as a palette PNG whose index equals the class id.
pub fn write_indexed(path: &Path, width: usize, height: usize, indices: &[u8]) -> Result<()> {
    assert_eq!(indices.len(), width * height);
    write_png(
        path,
        width,
        height,
        png::ColorType::Indexed,
        Some(label_palette()),
        indices,
    )
}

/// The usual segmentation colormap: bits of the index spread over RGB.
pub fn label_palette() -> Vec<u8> {
    let mut out = Vec::with_capacity(256 * 3);
    for i in 0..256u32 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        out.extend_from_slice(&[r, g, b]);
    }
    out
}

/// `[3, H, W]` tensor in `[0, 1]` from an RGB(A) image.
pub fn rgb_to_tensor(img: &RawImage) -> Result<Tensor<f32>> {
    let stride = match img.kind {
        PixelKind::Rgb => 3,
        PixelKind::Rgba => 4,
        other => {
            return Err(Error::Contract(format!(
                "expected an RGB image, got {other:?}"
            )))
        }
    };
    let plane = img.width * img.height;
    Tensor::new(
        vec![3, img.height, img.width],
        (0..3 * plane)
            .map(|i| img.pixels[(i % plane) * stride + i / plane] as f32 / 255.0)
            .collect(),
    )
}

/// Quantizes a `[3, H, W]` tensor in `[0, 1]` to interleaved RGB bytes.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Contract(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    Ok((0..3 * plane)
        .map(|i| to_u8(t.data()[(i % 3) * plane + i / 3]))
        .collect())
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = read_png(path)?;
    rgb_to_tensor(&img).map_err(|e| Error::format(path, e.to_string()))
}
