//! Binary PPM (P6) overlays: combined map as a heat layer, pseudo-mask
//! tint, predicted box in red and ground-truth box in green.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grounding::GroundingResult;
use crate::types::BBox;

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Canvas { width, height, rgb: vec![0; width * height * 3] }
    }

    fn put(&mut self, x: usize, y: usize, color: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.rgb[i..i + 3].copy_from_slice(&color);
        }
    }

    /// Outline of a half-open box, `thickness` pixels wide, drawn inside it.
    pub fn outline(&mut self, b: &BBox, color: [u8; 3], thickness: u32) {
        for t in 0..thickness {
            let (x0, y0) = (b.x_min + t, b.y_min + t);
            let (x1, y1) = (b.x_max.saturating_sub(1 + t), b.y_max.saturating_sub(1 + t));
            if x0 > x1 || y0 > y1 {
                break;
            }
            for x in x0..=x1 {
                self.put(x as usize, y0 as usize, color);
                self.put(x as usize, y1 as usize, color);
            }
            for y in y0..=y1 {
                self.put(x0 as usize, y as usize, color);
                self.put(x1 as usize, y as usize, color);
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

pub fn render(result: &GroundingResult, gt: Option<&BBox>) -> Canvas {
    let mask = &result.pseudo_mask_pixels;
    let (w, h) = (mask.width(), mask.height());
    let map = &result.combined_map;
    let p = map.grid_size();
    let peak = map.values().iter().copied().fold(0f32, f32::max).max(f32::MIN_POSITIVE);
    let mut canvas = Canvas::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = map.get(y * p / h, x * p / w) / peak;
            let heat = (v.clamp(0.0, 1.0) * 200.0) as u8;
            let color = if mask.get(y, x) { [heat.saturating_add(40), heat, 40] } else { [heat / 2, heat / 2, heat] };
            canvas.put(x, y, color);
        }
    }
    if let Some(b) = gt {
        canvas.outline(b, [0, 220, 0], 2);
    }
    canvas.outline(&result.bbox_pixels, [255, 0, 0], 2);
    canvas
}
