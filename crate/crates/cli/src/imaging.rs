//! PNG input/output and crop-window resampling.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use rgbt_prompt::evalkit::BoundingBox;
use rgbt_prompt::foundation::Image;
use rgbt_prompt::{Error, Result};

/// Loads an image as RGB with values in `[0, 1]`. Grayscale inputs are
/// replicated over the three channels.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

/// Writes an 8-bit RGB PNG, clamping values to `[0, 1]`.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let (h, w, _) = img.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Square window in frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl CropWindow {
    /// Window of side `factor · sqrt(w·h)` centred on `b`.
    pub fn around(b: &BoundingBox, factor: f64) -> Self {
        let side = (factor * (b.w * b.h).sqrt()).max(1.0);
        let (cx, cy) = b.center();
        Self { x0: cx - side / 2.0, y0: cy - side / 2.0, side }
    }

    /// Maps a box from an `(h, w)` crop back to frame pixels.
    pub fn to_frame(&self, b: &BoundingBox, (h, w): (usize, usize)) -> BoundingBox {
        let (sx, sy) = (self.side / w as f64, self.side / h as f64);
        BoundingBox::new(self.x0 + b.x * sx, self.y0 + b.y * sy, b.w * sx, b.h * sy)
    }

    /// Maps a frame box into an `(h, w)` crop.
    pub fn to_crop(&self, b: &BoundingBox, (h, w): (usize, usize)) -> BoundingBox {
        let (sx, sy) = (w as f64 / self.side, h as f64 / self.side);
        BoundingBox::new((b.x - self.x0) * sx, (b.y - self.y0) * sy, b.w * sx, b.h * sy)
    }
}

/// Bilinear resampling of `win` to `(h, w)` pixels. Samples outside the
/// frame read zero.
pub fn crop_resize(img: &Image, win: &CropWindow, (h, w): (usize, usize)) -> Image {
    let (ih, iw, c) = img.dim();
    let at = |y: isize, x: isize, ch: usize| -> f64 {
        if y < 0 || x < 0 || y >= ih as isize || x >= iw as isize {
            0.0
        } else {
            img[[y as usize, x as usize, ch]]
        }
    };
    let (sx, sy) = (win.side / w as f64, win.side / h as f64);
    Image::from_shape_fn((h, w, c), |(oy, ox, ch)| {
        let fy = win.y0 + (oy as f64 + 0.5) * sy - 0.5;
        let fx = win.x0 + (ox as f64 + 0.5) * sx - 0.5;
        let (y0, x0) = (fy.floor(), fx.floor());
        let (ty, tx) = (fy - y0, fx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = at(y0, x0, ch) * (1.0 - tx) + at(y0, x0 + 1, ch) * tx;
        let bottom = at(y0 + 1, x0, ch) * (1.0 - tx) + at(y0 + 1, x0 + 1, ch) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_window_reproduces_the_image() {
        let img = Image::from_shape_fn((8, 8, 3), |(y, x, c)| (y * 8 + x + c) as f64 / 100.0);
        let win = CropWindow { x0: 0.0, y0: 0.0, side: 8.0 };
        let out = crop_resize(&img, &win, (8, 8));
        assert!(out.iter().zip(&img).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn outside_reads_zero() {
        let img = Image::ones((4, 4, 3));
        let win = CropWindow { x0: 100.0, y0: 100.0, side: 4.0 };
        assert!(crop_resize(&img, &win, (4, 4)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn box_mapping_round_trips() {
        let b = BoundingBox::new(40.0, 30.0, 10.0, 20.0);
        let win = CropWindow::around(&b, 4.0);
        let inner = win.to_crop(&b, (64, 64));
        let (cx, cy) = inner.center();
        assert!((cx - 32.0).abs() < 1e-12 && (cy - 32.0).abs() < 1e-12);
        let back = win.to_frame(&inner, (64, 64));
        for (a, e) in [(back.x, b.x), (back.y, b.y), (back.w, b.w), (back.h, b.h)] {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_shape_fn((3, 5, 3), |(y, x, c)| ((y * 5 + x) * 3 + c) as f64 / 255.0);
        save_image(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.dim(), (3, 5, 3));
        assert!(back.iter().zip(&img).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
