use anyhow::Context;
use image::{ImageFormat, ImageReader, RgbImage};
use rsca_core::io::atomic_write;
use rsca_core::Grid;
use std::io::Cursor;
use std::path::Path;

pub fn load_rgb(path: &Path) -> anyhow::Result<RgbImage> {
    let img = ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?;
    Ok(img.to_rgb8())
}

/// Loads an image into a `(1,3,h,w)` grid in [0,1] plus its extents.
pub fn load_image_grid(path: &Path) -> anyhow::Result<(Grid<f64>, usize, usize)> {
    let img = load_rgb(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut grid = Grid::zeros(1, 3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            *grid.at_mut(0, c, y as usize, x as usize) = px.0[c] as f64 / 255.0;
        }
    }
    Ok((grid, w, h))
}

/// Bilinear resample of a `(1,c,h,w)` grid to new extents.
pub fn resize_grid(input: &Grid<f64>, new_h: usize, new_w: usize) -> Grid<f64> {
    let (c, h, w) = (input.c(), input.h(), input.w());
    let mut out = Grid::zeros(1, c, new_h, new_w);
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    for ch in 0..c {
        for y in 0..new_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for x in 0..new_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v = input.at(0, ch, y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + input.at(0, ch, y0, x1) * (1.0 - wy) * wx
                    + input.at(0, ch, y1, x0) * wy * (1.0 - wx)
                    + input.at(0, ch, y1, x1) * wy * wx;
                *out.at_mut(0, ch, y, x) = v;
            }
        }
    }
    out
}

const STROKE: [u8; 3] = [255, 32, 32];

fn put(img: &mut RgbImage, x: i64, y: i64) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(STROKE));
    }
}

fn bresenham(img: &mut RgbImage, a: (i64, i64), b: (i64, i64)) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x, y);
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Strokes a closed polygon; out-of-frame parts are clipped pixelwise.
pub fn stroke_polygon(img: &mut RgbImage, points: &[[f64; 2]]) {
    let n = points.len();
    if n == 0 {
        return;
    }
    if (img.width() * img.height()) == 0 {
        return;
    }
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        let frame = (img.width().max(img.height()) as i64) * 4;
        // keep coordinates bounded so degenerate inputs cannot spin Bresenham
        let clampc = |v: f64| (v.round() as i64).clamp(-frame, frame);
        bresenham(img, (clampc(a[0]), clampc(a[1])), (clampc(b[0]), clampc(b[1])));
    }
}

pub fn save_png(path: &Path, img: &RgbImage) -> anyhow::Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    atomic_write(path, &bytes)?;
    Ok(())
}
