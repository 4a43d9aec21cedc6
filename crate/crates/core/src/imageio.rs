//! 8-bit PNG reading and writing for images (RGB) and masks (single channel).

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::flowmodel::AttentionMap;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// Quantises an `H x W x 3` image in `[0, 1]` to 8 bits per channel.
pub fn quantize_rgb(image: &Array3<f32>) -> Array3<f32> {
    image.mapv(|v| to_u8(v) as f32 / 255.0)
}

pub fn save_rgb(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (xu, yu) = (x as usize, y as usize);
        *px = Rgb([
            to_u8(image[[yu, xu, 0]]),
            to_u8(image[[yu, xu, 1]]),
            to_u8(image[[yu, xu, 2]]),
        ]);
    }
    ensure_parent(path)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[y as usize, x as usize, ch]] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Writes a binary mask as `{0, 255}`.
pub fn save_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] {
            255
        } else {
            0
        }])
    });
    ensure_parent(path)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_gray(path: &Path, values: &Array2<f32>) -> Result<()> {
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(values[[y as usize, x as usize]])])
    });
    ensure_parent(path)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0]
    }))
}

/// Writes a patch-grid map as grayscale, each cell blown up to `cell x cell` pixels.
pub fn save_attention_map(path: &Path, map: &AttentionMap, cell: usize) -> Result<()> {
    let cell = cell.max(1);
    let side = map.grid * cell;
    let values = Array2::from_shape_fn((side, side), |(y, x)| {
        map.values.get(y / cell, x / cell) as f32
    });
    save_gray(path, &values)
}
