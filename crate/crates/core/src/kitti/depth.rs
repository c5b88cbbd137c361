//! LiDAR-to-image depth projection.

use crate::error::Result;
use crate::kitti::calib::CameraRig;
use crate::kitti::velodyne::LidarPoint;
use crate::tensor::Tensor;

/// Projects a point cloud into a sparse `[1, H, W]` depth map. Each pixel
/// keeps the minimum depth of the points landing in it; pixels nothing
/// projects to stay 0. Points behind the camera or outside the image are
/// dropped.
pub fn lidar_to_depth(
    points: &[LidarPoint],
    rig: &CameraRig,
    image_h: usize,
    image_w: usize,
) -> Result<Tensor> {
    let mut depth = Tensor::zeros(vec![1, image_h, image_w])?;
    for p in points {
        let cam = rig.velo_to_cam([p.x as f64, p.y as f64, p.z as f64]);
        let ([u, v], w) = rig.project_left(cam);
        if w <= 0.0 {
            continue;
        }
        let (px, py) = (u.floor(), v.floor());
        if px < 0.0 || py < 0.0 || px >= image_w as f64 || py >= image_h as f64 {
            continue;
        }
        let idx = [0, py as usize, px as usize];
        let prev = depth.get(&idx);
        if prev == 0.0 || (w as f32) < prev {
            depth.set(&idx, w as f32)?;
        }
    }
    Ok(depth)
}
