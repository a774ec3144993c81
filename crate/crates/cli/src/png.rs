use std::path::Path;

use image::{Rgb, RgbImage};
use tinybridge::{Error, Result};

fn io_err(e: image::ImageError) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// `[-1, 1]` to `0..=255`, rounding half to even.
pub fn to_byte(v: f32) -> u8 {
    let scaled = ((v.clamp(-1.0, 1.0) as f64) + 1.0) * 127.5;
    scaled.round_ties_even() as u8
}

pub fn from_byte(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

/// Channel-major `3 x R x R` buffer to an RGB image.
pub fn to_image(pixels: &[f32], res: usize) -> RgbImage {
    let plane = res * res;
    RgbImage::from_fn(res as u32, res as u32, |x, y| {
        let i = y as usize * res + x as usize;
        Rgb([0, 1, 2].map(|c| to_byte(pixels[c * plane + i])))
    })
}

pub fn write(path: &Path, pixels: &[f32], res: usize) -> Result<()> {
    to_image(pixels, res).save(path).map_err(io_err)
}

/// Reads a square RGB image back into a channel-major buffer.
pub fn read(path: &Path) -> Result<(Vec<f32>, usize)> {
    let img = image::open(path).map_err(io_err)?.to_rgb8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(Error::Config(format!("{} is {w}x{h}, expected a square image", path.display())));
    }
    let res = w as usize;
    let plane = res * res;
    let mut out = vec![0f32; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * res + x as usize;
        for c in 0..3 {
            out[c * plane + i] = from_byte(p.0[c]);
        }
    }
    Ok((out, res))
}

/// Images side by side on a mid-gray strip with a 2-pixel gutter.
pub fn write_grid(path: &Path, images: &[Vec<f32>], res: usize) -> Result<()> {
    const GAP: u32 = 2;
    let n = images.len() as u32;
    let side = res as u32;
    let mut grid = RgbImage::from_pixel(n * side + (n + 1) * GAP, side + 2 * GAP, Rgb([128; 3]));
    for (k, img) in images.iter().enumerate() {
        let tile = to_image(img, res);
        let x0 = GAP + k as u32 * (side + GAP);
        for (x, y, p) in tile.enumerate_pixels() {
            grid.put_pixel(x0 + x, GAP + y, *p);
        }
    }
    grid.save(path).map_err(io_err)
}
