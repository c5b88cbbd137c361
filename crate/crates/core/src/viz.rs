//! Inspection renders: PPM images with projected box wireframes and
//! ASCII PLY scenes with points and box edges.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kitti::calib::CameraRig;
use crate::kitti::label::Box3D;
use crate::tensor::Tensor;

pub const COLOR_GT: [u8; 3] = [220, 40, 40];
pub const COLOR_DET: [u8; 3] = [40, 220, 40];

/// RGB raster with clipped drawing primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Canvas {
        Canvas {
            width,
            height,
            pixels: vec![[0, 0, 0]; width * height],
        }
    }

    /// Spreads a `[1, H, W]` grayscale tensor (values treated as 0..255)
    /// across all three channels.
    pub fn from_grayscale(img: &Tensor) -> Result<Canvas> {
        let dims = img.dims();
        if dims.len() != 3 || dims[0] != 1 {
            return Err(Error::shape(format!(
                "canvas base must be [1, H, W], got {dims:?}"
            )));
        }
        let (height, width) = (dims[1], dims[2]);
        let pixels = img
            .data()
            .iter()
            .map(|&v| {
                let g = v.clamp(0.0, 255.0).round() as u8;
                [g, g, g]
            })
            .collect();
        Ok(Canvas {
            width,
            height,
            pixels,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: i64, y: i64) -> Option<[u8; 3]> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return None;
        }
        Some(self.pixels[y as usize * self.width + x as usize])
    }

    /// Writes a pixel; coordinates outside the raster are dropped.
    pub fn set(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        self.pixels[y as usize * self.width + x as usize] = rgb;
    }

    /// Bresenham line between rounded endpoints, clipped per pixel.
    pub fn draw_line(&mut self, a: [f64; 2], b: [f64; 2], rgb: [u8; 3]) {
        let (mut x0, mut y0) = (a[0].round() as i64, a[1].round() as i64);
        let (x1, y1) = (b[0].round() as i64, b[1].round() as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, rgb);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// The 12 wireframe edges over the corner layout of [`Box3D::corners_3d`]
/// (bottom ring, then top ring, then pillars).
pub const BOX_EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Projects a box through the left camera and draws its wireframe. Edges
/// with either endpoint behind the camera are skipped; every visible
/// corner pixel is marked explicitly.
pub fn draw_box_wireframe(canvas: &mut Canvas, rig: &CameraRig, b: &Box3D, rgb: [u8; 3]) {
    let corners = b.corners_3d();
    let projected: Vec<([f64; 2], f64)> = corners.iter().map(|c| rig.project_left(*c)).collect();
    for [i, j] in BOX_EDGES {
        let (pi, di) = projected[i];
        let (pj, dj) = projected[j];
        if di > 0.0 && dj > 0.0 {
            canvas.draw_line(pi, pj, rgb);
        }
    }
    for ([u, v], depth) in &projected {
        if *depth > 0.0 {
            canvas.set(u.round() as i64, v.round() as i64, rgb);
        }
    }
}

/// ASCII PLY scene: cloud points as gray vertices, each box contributing
/// eight colored corner vertices and twelve edges. Valid (zero-count
/// elements) when everything is empty.
pub fn ply_scene(points: &[[f64; 4]], boxes: &[(Box3D, [u8; 3])]) -> String {
    let vertex_count = points.len() + 8 * boxes.len();
    let edge_count = 12 * boxes.len();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {vertex_count}\n"));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str(&format!("element edge {edge_count}\n"));
    out.push_str("property int vertex1\nproperty int vertex2\nend_header\n");
    for p in points {
        // Reflectance modulates the gray level for quick visual parsing.
        let g = 120 + (p[3].clamp(0.0, 1.0) * 120.0) as u8;
        out.push_str(&format!("{} {} {} {g} {g} {g}\n", p[0], p[1], p[2]));
    }
    for (b, rgb) in boxes {
        for c in b.corners_3d() {
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                c[0], c[1], c[2], rgb[0], rgb[1], rgb[2]
            ));
        }
    }
    for (bi, _) in boxes.iter().enumerate() {
        let base = points.len() + 8 * bi;
        for [i, j] in BOX_EDGES {
            out.push_str(&format!("{} {}\n", base + i, base + j));
        }
    }
    out
}
