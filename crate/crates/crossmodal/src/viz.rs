//! Export of normalized images and feature images as 8-bit PNGs.
//!
//! Everything in the pipeline is an `(H, W, C)` tensor of values in
//! `[-1, 1]`; this module maps those onto lossless PNGs for human
//! inspection, including a side-by-side montage (sources | feature-image
//! visualization | sample | ground truth) for qualitative review.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Map a value in `[-1, 1]` onto `0..=255`, clamping out-of-range inputs.
fn to_u8(v: f64) -> u8 {
    (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Convert a normalized `(H, W, 1)` or `(H, W, 3)` image to 8-bit RGB.
pub fn image_to_rgb8(img: &Tensor) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    if img.shape().len() != 3 || !matches!(img.shape()[2], 1 | 3) {
        return Err(Error::InvalidArgument(format!(
            "expected an (H, W, 1|3) image, got {:?}",
            img.shape()
        )));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = if c == 3 {
                [
                    to_u8(img.data()[img.idx3(y, x, 0)]),
                    to_u8(img.data()[img.idx3(y, x, 1)]),
                    to_u8(img.data()[img.idx3(y, x, 2)]),
                ]
            } else {
                let v = to_u8(img.data()[img.idx3(y, x, 0)]);
                [v, v, v]
            };
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(out)
}

/// Write a normalized image as a PNG file.
pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    image_to_rgb8(img)?
        .save(path)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

/// Visualize a C-channel feature image as RGB: take the first three channels
/// (replicating the last one if C < 3) and min-max normalize them jointly to
/// `[-1, 1]`. A constant feature image maps to mid-gray.
pub fn feature_to_rgb(feature: &Tensor) -> Result<Tensor> {
    if feature.shape().len() != 3 || feature.shape()[2] == 0 {
        return Err(Error::InvalidArgument(format!(
            "expected an (H, W, C>=1) feature image, got {:?}",
            feature.shape()
        )));
    }
    let (h, w, c) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for ch in 0..c.min(3) {
        for y in 0..h {
            for x in 0..w {
                let v = feature.data()[feature.idx3(y, x, ch)];
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let scale = if hi > lo { 2.0 / (hi - lo) } else { 0.0 };
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = feature.data()[feature.idx3(y, x, ch.min(c - 1))];
                out.push(if scale == 0.0 { 0.0 } else { (v - lo) * scale - 1.0 });
            }
        }
    }
    Tensor::from_vec(&[h, w, 3], out)
}

/// Nearest-neighbor resize of an `(H, W, C)` image.
pub fn nearest_resize(img: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    if img.shape().len() != 3 || new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArgument(
            "resize needs an (H, W, C) image and nonzero target".into(),
        ));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(new_h * new_w * c);
    for y in 0..new_h {
        let sy = (y * h) / new_h;
        for x in 0..new_w {
            let sx = (x * w) / new_w;
            for ch in 0..c {
                out.push(img.data()[img.idx3(sy, sx, ch)]);
            }
        }
    }
    Tensor::from_vec(&[new_h, new_w, c], out)
}

/// Width of the white gutter between montage panels, pixels.
const MONTAGE_GUTTER: usize = 2;

/// Stitch panels side by side into one `(H, W, 3)` image, separated by thin
/// white gutters. Panels are converted to RGB (single-channel replicated,
/// feature images via [`feature_to_rgb`]) and nearest-resized to the tallest
/// panel's height.
pub fn montage(panels: &[&Tensor]) -> Result<Tensor> {
    if panels.is_empty() {
        return Err(Error::InvalidArgument("montage needs at least one panel".into()));
    }
    let mut rgb = Vec::with_capacity(panels.len());
    for p in panels {
        if p.shape().len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "montage panels must be (H, W, C), got {:?}",
                p.shape()
            )));
        }
        match p.shape()[2] {
            3 => rgb.push((*p).clone()),
            1 => {
                let (h, w) = (p.shape()[0], p.shape()[1]);
                let mut data = Vec::with_capacity(h * w * 3);
                for v in p.data() {
                    data.extend_from_slice(&[*v, *v, *v]);
                }
                rgb.push(Tensor::from_vec(&[h, w, 3], data)?);
            }
            _ => rgb.push(feature_to_rgb(p)?),
        }
    }
    let height = rgb.iter().map(|p| p.shape()[0]).max().unwrap();
    let resized: Vec<Tensor> = rgb
        .iter()
        .map(|p| {
            let (h, w) = (p.shape()[0], p.shape()[1]);
            nearest_resize(p, height, (w * height).div_ceil(h))
        })
        .collect::<Result<_>>()?;

    let width: usize = resized.iter().map(|p| p.shape()[1]).sum::<usize>()
        + MONTAGE_GUTTER * (resized.len() - 1);
    let mut out = vec![1.0; height * width * 3];
    let mut x0 = 0;
    for p in &resized {
        let w = p.shape()[1];
        for y in 0..height {
            for x in 0..w {
                for ch in 0..3 {
                    out[(y * width + x0 + x) * 3 + ch] = p.data()[p.idx3(y, x, ch)];
                }
            }
        }
        x0 += w + MONTAGE_GUTTER;
    }
    Tensor::from_vec(&[height, width, 3], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_mapping_hits_the_endpoints() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.0), 128);
        assert_eq!(to_u8(-3.0), 0, "out-of-range values clamp");
        assert_eq!(to_u8(3.0), 255);
    }

    #[test]
    fn png_round_trips_through_the_8_bit_encoding() {
        let img = Tensor::from_vec(
            &[1, 2, 3],
            vec![-1.0, 0.0, 1.0, 0.5, -0.5, 0.25],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_png(&img, &path).unwrap();

        let back = image::open(&path).unwrap().into_rgb8();
        assert_eq!(back.dimensions(), (2, 1));
        assert_eq!(back.get_pixel(0, 0).0, [0, 128, 255]);
    }

    #[test]
    fn single_channel_images_render_gray() {
        let img = Tensor::from_vec(&[1, 1, 1], vec![0.0]).unwrap();
        let rgb = image_to_rgb8(&img).unwrap();
        assert_eq!(rgb.get_pixel(0, 0).0, [128, 128, 128]);
        let bad = Tensor::zeros(&[1, 1, 2]);
        assert!(image_to_rgb8(&bad).is_err());
    }

    #[test]
    fn feature_visualization_normalizes_the_first_three_channels() {
        // 4 channels; the 4th must not affect normalization.
        let f = Tensor::from_vec(
            &[1, 2, 4],
            vec![0.0, 1.0, 2.0, 99.0, 4.0, 3.0, 2.0, -99.0],
        )
        .unwrap();
        let rgb = feature_to_rgb(&f).unwrap();
        assert_eq!(rgb.shape(), &[1, 2, 3]);
        // min 0, max 4 over the first three channels: v -> v/2 - 1.
        assert_eq!(rgb.data(), &[-1.0, -0.5, 0.0, 1.0, 0.5, 0.0]);

        let flat = Tensor::zeros(&[2, 2, 5]);
        let gray = feature_to_rgb(&flat).unwrap();
        assert!(gray.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn resize_preserves_corner_samples() {
        let img = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = nearest_resize(&img, 4, 4).unwrap();
        assert_eq!(up.data()[up.idx3(0, 0, 0)], 1.0);
        assert_eq!(up.data()[up.idx3(0, 3, 0)], 2.0);
        assert_eq!(up.data()[up.idx3(3, 0, 0)], 3.0);
        assert_eq!(up.data()[up.idx3(3, 3, 0)], 4.0);
    }

    #[test]
    fn montage_concatenates_with_gutters() {
        let a = Tensor::from_vec(&[2, 2, 3], vec![0.1; 12]).unwrap();
        let b = Tensor::from_vec(&[2, 1, 1], vec![-0.4, -0.4]).unwrap();
        let m = montage(&[&a, &b]).unwrap();
        assert_eq!(m.shape(), &[2, 2 + MONTAGE_GUTTER + 1, 3]);
        assert_eq!(m.data()[m.idx3(0, 0, 0)], 0.1);
        assert_eq!(m.data()[m.idx3(0, 2, 0)], 1.0, "gutter is white");
        assert_eq!(m.data()[m.idx3(1, 4, 2)], -0.4);

        // Mixed heights: the short panel is upscaled to match.
        let tall = Tensor::from_vec(&[4, 1, 1], vec![0.0; 4]).unwrap();
        let m2 = montage(&[&tall, &b]).unwrap();
        assert_eq!(m2.shape()[0], 4);
    }
}
