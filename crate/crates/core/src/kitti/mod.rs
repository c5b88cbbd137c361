//! KITTI-format I/O: calibration, labels, velodyne clouds, grayscale
//! images, depth projection, and synthetic frame generation.

pub mod calib;
pub mod depth;
pub mod image;
pub mod label;
pub mod synthetic;
pub mod velodyne;

pub use calib::{parse_calib, serialize_calib, CameraRig};
pub use depth::lidar_to_depth;
pub use image::{load_image, read_pfm, read_pgm, write_pfm, write_pgm};
pub use label::{parse_labels, serialize_labels, wrap_angle, Box3D, Label};
pub use synthetic::{project_bbox, synthetic_scene, write_kitti_frame, SyntheticScene};
pub use velodyne::{load_velodyne, read_velodyne, write_velodyne, LidarPoint};

use crate::tensor::Tensor;

/// One sample: stereo inputs, LiDAR points, ground-truth labels, and the
/// rig that ties them together. Images are optional because label-only
/// workloads (evaluation) never load them.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: String,
    pub rig: CameraRig,
    pub left: Option<Tensor>,
    pub right: Option<Tensor>,
    pub points: Vec<LidarPoint>,
    pub labels: Vec<Label>,
}

impl Frame {
    /// Camera-frame points as (x, y, z, reflectance) rows.
    pub fn cam_points(&self) -> Vec<[f64; 4]> {
        self.points
            .iter()
            .map(|p| {
                let c = self.rig.velo_to_cam([p.x as f64, p.y as f64, p.z as f64]);
                [c[0], c[1], c[2], p.reflectance as f64]
            })
            .collect()
    }

    /// Ground-truth boxes of the given class (skips DontCare rows).
    pub fn gt_boxes(&self, class: &str) -> Vec<Box3D> {
        self.labels
            .iter()
            .filter(|l| l.class == class)
            .filter_map(|l| l.box3d().copied())
            .collect()
    }
}
