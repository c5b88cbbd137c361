//! Deterministic synthetic frames for tests and fixtures.
//!
//! A frame is a tiny ray-rendered world: a fronto-parallel wall, a ground
//! plane, and two car-sized boxes. Surfaces carry a world-anchored hash
//! texture, so the left and right renders are a geometrically consistent
//! stereo pair, and the LiDAR cloud samples the same surfaces on regular
//! grids. Everything derives from one seed through [`SplitMix64`], so a
//! frame is bit-reproducible.

use std::path::Path;

use crate::error::{Error, Result};
use crate::kitti::calib::{serialize_calib, CameraRig};
use crate::kitti::image::write_pgm;
use crate::kitti::label::{serialize_labels, Box3D, Label};
use crate::kitti::velodyne::{write_velodyne, LidarPoint};
use crate::tensor::{SplitMix64, Tensor};

pub const IMAGE_H: usize = 96;
pub const IMAGE_W: usize = 96;
const FOCAL: f64 = 128.0;
const BASELINE: f64 = 2.0;
const WALL_Z: f64 = 32.0;
const GROUND_Y: f64 = 1.6;

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub rig: CameraRig,
    pub left: Tensor,
    pub right: Tensor,
    pub points: Vec<LidarPoint>,
    pub labels: Vec<Label>,
}

struct Aabb {
    min: [f64; 3],
    max: [f64; 3],
}

impl Aabb {
    fn from_box(b: &Box3D) -> Aabb {
        let bev = b.corners_bev();
        let (top, bottom) = b.y_span();
        let mut min = [f64::MAX, top, f64::MAX];
        let mut max = [f64::MIN, bottom, f64::MIN];
        for c in bev {
            min[0] = min[0].min(c[0]);
            max[0] = max[0].max(c[0]);
            min[2] = min[2].min(c[1]);
            max[2] = max[2].max(c[1]);
        }
        Aabb { min, max }
    }

    /// Slab-test ray intersection; returns the entry distance if positive.
    fn hit(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let (mut t0, mut t1) = (1e-9f64, f64::MAX);
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let ta = (self.min[a] - origin[a]) / dir[a];
            let tb = (self.max[a] - origin[a]) / dir[a];
            let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

/// World-anchored texture: hash of the surface id and the hit point
/// quantized to 0.25 m cells, mapped to 0..=255.
fn texture(seed: u64, surface: u64, p: [f64; 3]) -> u8 {
    let q = |v: f64| (v * 4.0).floor() as i64 as u64;
    let key = seed
        ^ surface.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ q(p[0]).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ q(p[1]).wrapping_mul(0x94D0_49BB_1331_11EB)
        ^ q(p[2]).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    (SplitMix64::new(key).next_u64() >> 56) as u8
}

fn render(origin_x: f64, seed: u64, boxes: &[Aabb], rig: &CameraRig) -> Tensor {
    let (cx, cy) = rig.principal_point();
    let mut img = Tensor::zeros(vec![1, IMAGE_H, IMAGE_W]).expect("image dims");
    for v in 0..IMAGE_H {
        for u in 0..IMAGE_W {
            let dir = [
                (u as f64 + 0.5 - cx) / FOCAL,
                (v as f64 + 0.5 - cy) / FOCAL,
                1.0,
            ];
            let origin = [origin_x, 0.0, 0.0];
            // Wall is always hit; ground only below the horizon.
            let mut best = (WALL_Z, 0u64);
            if dir[1] > 1e-9 {
                let t = (GROUND_Y - origin[1]) / dir[1];
                if t < best.0 {
                    best = (t, 1);
                }
            }
            for (i, b) in boxes.iter().enumerate() {
                if let Some(t) = b.hit(origin, dir) {
                    if t < best.0 {
                        best = (t, 2 + i as u64);
                    }
                }
            }
            let p = [
                origin[0] + dir[0] * best.0,
                origin[1] + dir[1] * best.0,
                origin[2] + dir[2] * best.0,
            ];
            let val = texture(seed, best.1, p) as f32;
            img.set(&[0, v, u], val).expect("finite texel");
        }
    }
    img
}

fn sample_aabb_surface(b: &Aabb, step: f64, out: &mut Vec<[f64; 3]>) {
    let mut walk = |fixed: usize, val: f64, a: usize, b2: usize, lo_a: f64, hi_a: f64, lo_b: f64, hi_b: f64| {
        let mut x = lo_a;
        while x <= hi_a + 1e-9 {
            let mut y = lo_b;
            while y <= hi_b + 1e-9 {
                let mut p = [0.0; 3];
                p[fixed] = val;
                p[a] = x;
                p[b2] = y;
                out.push(p);
                y += step;
            }
            x += step;
        }
    };
    // Top face plus the four sides; the bottom face is never visible.
    walk(1, b.min[1], 0, 2, b.min[0], b.max[0], b.min[2], b.max[2]);
    walk(2, b.min[2], 0, 1, b.min[0], b.max[0], b.min[1], b.max[1]);
    walk(2, b.max[2], 0, 1, b.min[0], b.max[0], b.min[1], b.max[1]);
    walk(0, b.min[0], 1, 2, b.min[1], b.max[1], b.min[2], b.max[2]);
    walk(0, b.max[0], 1, 2, b.min[1], b.max[1], b.min[2], b.max[2]);
}

/// Axis-aligned image-plane bounding box of a 3D box's projected corners,
/// clamped to the image.
pub fn project_bbox(rig: &CameraRig, b: &Box3D, image_w: usize, image_h: usize) -> [f64; 4] {
    let mut lo = [f64::MAX, f64::MAX];
    let mut hi = [f64::MIN, f64::MIN];
    for c in b.corners_3d() {
        let ([u, v], w) = rig.project_left(c);
        if w <= 0.0 {
            continue;
        }
        lo[0] = lo[0].min(u);
        lo[1] = lo[1].min(v);
        hi[0] = hi[0].max(u);
        hi[1] = hi[1].max(v);
    }
    [
        lo[0].max(0.0),
        lo[1].max(0.0),
        hi[0].min(image_w as f64),
        hi[1].min(image_h as f64),
    ]
}

/// Builds the standard two-car synthetic frame for a seed.
pub fn synthetic_scene(seed: u64) -> SyntheticScene {
    let rig = CameraRig::synthetic(FOCAL, IMAGE_W as f64 / 2.0, IMAGE_H as f64 / 2.0, BASELINE);
    // Placement is tuned so the projected boxes span the difficulty
    // buckets: the near car's bbox is over 40 px tall (easy), the far
    // one lands between 25 and 40 px (moderate and hard only).
    let car1 = Box3D::new(-1.2, GROUND_Y, 4.5, 1.5, 1.6, 3.9, 0.0).expect("car1");
    let car2 = Box3D::new(2.0, GROUND_Y, 8.0, 1.8, 1.7, 4.2, std::f64::consts::FRAC_PI_2)
        .expect("car2");
    let aabbs = [Aabb::from_box(&car1), Aabb::from_box(&car2)];

    let left = render(0.0, seed, &aabbs, &rig);
    let right = render(BASELINE, seed, &aabbs, &rig);

    // LiDAR: regular grids over ground, wall, and box surfaces, in camera
    // frame, then rotated out to the velodyne frame.
    let mut cam_pts: Vec<[f64; 3]> = Vec::new();
    let mut x = -28.0;
    while x <= 28.0 + 1e-9 {
        let mut z = 2.2;
        while z < WALL_Z - 0.1 {
            cam_pts.push([x, GROUND_Y, z]);
            z += 0.6;
        }
        x += 0.8;
    }
    let mut x = -30.0;
    while x <= 30.0 + 1e-9 {
        let mut y = -1.0;
        while y <= 3.0 + 1e-9 {
            cam_pts.push([x, y, WALL_Z]);
            y += 0.4;
        }
        x += 0.8;
    }
    for b in &aabbs {
        sample_aabb_surface(b, 0.2, &mut cam_pts);
    }

    let mut rng = SplitMix64::new(seed ^ 0x4C49_4441_5250_5453);
    let points: Vec<LidarPoint> = cam_pts
        .iter()
        .map(|&p| {
            let velo = rig.cam_to_velo(p);
            LidarPoint {
                x: velo[0] as f32,
                y: velo[1] as f32,
                z: velo[2] as f32,
                reflectance: rng.next_f32(),
            }
        })
        .collect();

    let labels = vec![
        Label::from_box("Car", car1, project_bbox(&rig, &car1, IMAGE_W, IMAGE_H), None),
        Label::from_box("Car", car2, project_bbox(&rig, &car2, IMAGE_W, IMAGE_H), None),
        Label::new(
            "DontCare",
            -1.0,
            -1,
            -10.0,
            [0.0, 0.0, 18.0, 9.0],
            [-1.0, -1.0, -1.0],
            [-1000.0, -1000.0, -1000.0],
            -10.0,
            None,
        )
        .expect("dontcare"),
    ];

    SyntheticScene {
        rig,
        left,
        right,
        points,
        labels,
    }
}

/// Writes a scene as a KITTI-style dataset tree:
/// `calib/<id>.txt`, `label_2/<id>.txt`, `velodyne/<id>.bin`,
/// `image_2/<id>.pgm`, `image_3/<id>.pgm`.
pub fn write_kitti_frame(root: &Path, id: &str, scene: &SyntheticScene) -> Result<()> {
    let sub = |name: &str| -> Result<std::path::PathBuf> {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    };
    let write = |path: std::path::PathBuf, bytes: &[u8]| -> Result<()> {
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    write(
        sub("calib")?.join(format!("{id}.txt")),
        serialize_calib(&scene.rig).as_bytes(),
    )?;
    write(
        sub("label_2")?.join(format!("{id}.txt")),
        serialize_labels(&scene.labels).as_bytes(),
    )?;
    write(
        sub("velodyne")?.join(format!("{id}.bin")),
        &write_velodyne(&scene.points),
    )?;
    write(
        sub("image_2")?.join(format!("{id}.pgm")),
        &write_pgm(&scene.left)?,
    )?;
    write(
        sub("image_3")?.join(format!("{id}.pgm")),
        &write_pgm(&scene.right)?,
    )?;
    Ok(())
}
