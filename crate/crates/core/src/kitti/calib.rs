//! Rectified stereo calibration: projection matrices, the velodyne-to-camera
//! transform, and the derived focal/baseline pair.

use crate::error::{Error, Result};

pub type Mat34 = [[f64; 4]; 3];
pub type Mat33 = [[f64; 3]; 3];

/// Rectified stereo rig. `p_left`/`p_right` project rectified-camera points
/// to pixels; `r0_rect` and `tr_velo_to_cam` chain velodyne points into the
/// rectified camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub p_left: Mat34,
    pub p_right: Mat34,
    pub r0_rect: Mat33,
    pub tr_velo_to_cam: Mat34,
}

impl CameraRig {
    pub fn new(
        p_left: Mat34,
        p_right: Mat34,
        r0_rect: Mat33,
        tr_velo_to_cam: Mat34,
    ) -> Result<Self> {
        let rig = CameraRig {
            p_left,
            p_right,
            r0_rect,
            tr_velo_to_cam,
        };
        for row in p_left.iter().chain(p_right.iter()).chain(tr_velo_to_cam.iter()) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("calibration matrix entry".into()));
            }
        }
        if !(rig.focal() > 0.0) {
            return Err(Error::Config(format!(
                "focal length {} must be positive",
                rig.focal()
            )));
        }
        if !(rig.baseline() > 0.0) {
            return Err(Error::Config(format!(
                "baseline {} must be positive",
                rig.baseline()
            )));
        }
        // Orthonormality: R * R^T == I within 1e-4.
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r0_rect[i][k] * r0_rect[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-4 {
                    return Err(Error::Config(format!(
                        "rectification matrix is not orthonormal (row {i}.row {j} = {dot})"
                    )));
                }
            }
        }
        Ok(rig)
    }

    /// Axis-aligned synthetic rig: principal point (cx, cy), velodyne frame
    /// equal to the camera frame (identity transform).
    pub fn identity(focal: f64, cx: f64, cy: f64, baseline: f64) -> CameraRig {
        let p_left = [
            [focal, 0.0, cx, 0.0],
            [0.0, focal, cy, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        let mut p_right = p_left;
        p_right[0][3] = -focal * baseline;
        let r0_rect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let tr = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        CameraRig::new(p_left, p_right, r0_rect, tr).expect("valid synthetic rig")
    }

    /// Synthetic rig with the KITTI velodyne axis convention (x forward,
    /// y left, z up) so the velodyne-to-camera path is a real permutation.
    pub fn synthetic(focal: f64, cx: f64, cy: f64, baseline: f64) -> CameraRig {
        let mut rig = CameraRig::identity(focal, cx, cy, baseline);
        rig.tr_velo_to_cam = [
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
        ];
        rig
    }

    pub fn focal(&self) -> f64 {
        self.p_left[0][0]
    }

    pub fn baseline(&self) -> f64 {
        (self.p_left[0][3] - self.p_right[0][3]) / self.focal()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.p_left[0][2], self.p_left[1][2])
    }

    /// Projects a rectified-camera point through the left camera, returning
    /// pixel coordinates and the homogeneous depth w (valid only if w > 0).
    pub fn project_left(&self, p: [f64; 3]) -> ([f64; 2], f64) {
        project(&self.p_left, p)
    }

    pub fn project_right(&self, p: [f64; 3]) -> ([f64; 2], f64) {
        project(&self.p_right, p)
    }

    /// Maps a velodyne-frame point into the rectified camera frame.
    pub fn velo_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let t = &self.tr_velo_to_cam;
        let cam = [
            t[0][0] * p[0] + t[0][1] * p[1] + t[0][2] * p[2] + t[0][3],
            t[1][0] * p[0] + t[1][1] * p[1] + t[1][2] * p[2] + t[1][3],
            t[2][0] * p[0] + t[2][1] * p[1] + t[2][2] * p[2] + t[2][3],
        ];
        let r = &self.r0_rect;
        [
            r[0][0] * cam[0] + r[0][1] * cam[1] + r[0][2] * cam[2],
            r[1][0] * cam[0] + r[1][1] * cam[1] + r[1][2] * cam[2],
            r[2][0] * cam[0] + r[2][1] * cam[1] + r[2][2] * cam[2],
        ]
    }

    /// Inverse of [`velo_to_cam`](Self::velo_to_cam); usable for generating
    /// synthetic velodyne data from camera-frame geometry.
    pub fn cam_to_velo(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.r0_rect;
        // R0 is orthonormal: inverse is the transpose.
        let cam = [
            r[0][0] * p[0] + r[1][0] * p[1] + r[2][0] * p[2],
            r[0][1] * p[0] + r[1][1] * p[1] + r[2][1] * p[2],
            r[0][2] * p[0] + r[1][2] * p[1] + r[2][2] * p[2],
        ];
        let t = &self.tr_velo_to_cam;
        let d = [cam[0] - t[0][3], cam[1] - t[1][3], cam[2] - t[2][3]];
        // Tr rotation part is a rotation for every rig we accept; transpose
        // inverts it.
        [
            t[0][0] * d[0] + t[1][0] * d[1] + t[2][0] * d[2],
            t[0][1] * d[0] + t[1][1] * d[1] + t[2][1] * d[2],
            t[0][2] * d[0] + t[1][2] * d[1] + t[2][2] * d[2],
        ]
    }
}

fn project(m: &Mat34, p: [f64; 3]) -> ([f64; 2], f64) {
    let hx = m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3];
    let hy = m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3];
    let hw = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3];
    ([hx / hw, hy / hw], hw)
}

/// Parses KITTI object calibration text. Requires keys P2, P3, R0_rect and
/// Tr_velo_to_cam; other keys are ignored.
pub fn parse_calib(text: &str) -> Result<CameraRig> {
    let mut p2: Option<Vec<f64>> = None;
    let mut p3: Option<Vec<f64>> = None;
    let mut r0: Option<Vec<f64>> = None;
    let mut tr: Option<Vec<f64>> = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim();
        let want = match key {
            "P2" => Some((&mut p2, 12usize)),
            "P3" => Some((&mut p3, 12)),
            "R0_rect" => Some((&mut r0, 9)),
            "Tr_velo_to_cam" => Some((&mut tr, 12)),
            _ => None,
        };
        let Some((slot, count)) = want else { continue };
        let vals: std::result::Result<Vec<f64>, _> =
            rest.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| Error::Parse {
            path: "calib".into(),
            line: ln + 1,
            msg: format!("{key}: {e}"),
        })?;
        if vals.len() != count {
            return Err(Error::Parse {
                path: "calib".into(),
                line: ln + 1,
                msg: format!("{key}: expected {count} floats, got {}", vals.len()),
            });
        }
        *slot = Some(vals);
    }
    let take34 = |v: Option<Vec<f64>>, key: &str| -> Result<Mat34> {
        let v = v.ok_or_else(|| Error::Parse {
            path: "calib".into(),
            line: 0,
            msg: format!("missing key {key}"),
        })?;
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..4 {
                m[i][j] = v[i * 4 + j];
            }
        }
        Ok(m)
    };
    let p2 = take34(p2, "P2")?;
    let p3 = take34(p3, "P3")?;
    let tr = take34(tr, "Tr_velo_to_cam")?;
    let r0v = r0.ok_or_else(|| Error::Parse {
        path: "calib".into(),
        line: 0,
        msg: "missing key R0_rect".into(),
    })?;
    let mut r0m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r0m[i][j] = r0v[i * 3 + j];
        }
    }
    CameraRig::new(p2, p3, r0m, tr)
}

/// Renders a rig back into calibration text (used by fixture writers).
pub fn serialize_calib(rig: &CameraRig) -> String {
    let row34 = |m: &Mat34| {
        m.iter()
            .flat_map(|r| r.iter())
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let r0 = rig
        .r0_rect
        .iter()
        .flat_map(|r| r.iter())
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(" ");
    format!(
        "P2: {}\nP3: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
        row34(&rig.p_left),
        row34(&rig.p_right),
        r0,
        row34(&rig.tr_velo_to_cam)
    )
}
