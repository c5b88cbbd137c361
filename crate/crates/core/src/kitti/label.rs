//! KITTI object labels and the 7-DoF box they describe.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// 7-DoF object box in the rectified camera frame (x right, y down,
/// z forward). `y` is the bottom face, matching the KITTI location field;
/// the box spans `[y - h, y]` vertically. `yaw` rotates about the camera
/// y axis; at yaw 0 the length `l` runs along +x, the width `w` along +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, h: f64, w: f64, l: f64, yaw: f64) -> Result<Box3D> {
        for v in [x, y, z, h, w, l, yaw] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("box field {v}")));
            }
        }
        if h <= 0.0 || w <= 0.0 || l <= 0.0 {
            return Err(Error::Shape(format!(
                "box dimensions must be positive, got h={h} w={w} l={l}"
            )));
        }
        Ok(Box3D {
            x,
            y,
            z,
            h,
            w,
            l,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    /// Vertical span as (top, bottom) in y-down coordinates.
    pub fn y_span(&self) -> (f64, f64) {
        (self.y - self.h, self.y)
    }

    /// Footprint corners in the (x, z) plane, counter-clockwise when the
    /// plane is drawn with x right and z up.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.x + u * c + v * s, self.z - u * s + v * c])
    }

    /// Eight corners: the four bottom corners (y = bottom) then the four
    /// top corners in the same footprint order.
    pub fn corners_3d(&self) -> [[f64; 3]; 8] {
        let bev = self.corners_bev();
        let (top, bottom) = self.y_span();
        let mut out = [[0.0; 3]; 8];
        for i in 0..4 {
            out[i] = [bev[i][0], bottom, bev[i][1]];
            out[i + 4] = [bev[i][0], top, bev[i][1]];
        }
        out
    }

    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Box3D {
        Box3D {
            x: self.x + dx,
            y: self.y + dy,
            z: self.z + dz,
            ..*self
        }
    }
}

/// One KITTI label line. Numeric fields are stored as parsed so that
/// DontCare placeholder values (-1 dimensions, -1000 locations) survive a
/// serialize round trip; `box3d` is populated for every non-DontCare entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    pub class: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// 2D bbox as (left, top, right, bottom) pixels.
    pub bbox: [f64; 4],
    pub dims_hwl: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
    box3d: Option<Box3D>,
}

impl Label {
    pub fn new(
        class: impl Into<String>,
        truncation: f64,
        occlusion: i32,
        alpha: f64,
        bbox: [f64; 4],
        dims_hwl: [f64; 3],
        location: [f64; 3],
        rotation_y: f64,
        score: Option<f64>,
    ) -> Result<Label> {
        let class = class.into();
        let box3d = if class == "DontCare" {
            None
        } else {
            Some(Box3D::new(
                location[0],
                location[1],
                location[2],
                dims_hwl[0],
                dims_hwl[1],
                dims_hwl[2],
                rotation_y,
            )?)
        };
        Ok(Label {
            class,
            truncation,
            occlusion,
            alpha,
            bbox,
            dims_hwl,
            location,
            rotation_y,
            score,
            box3d,
        })
    }

    /// Convenience constructor for synthetic data: derives the metadata
    /// fields from the box itself.
    pub fn from_box(class: impl Into<String>, b: Box3D, bbox: [f64; 4], score: Option<f64>) -> Label {
        Label::new(
            class,
            0.0,
            0,
            0.0,
            bbox,
            [b.h, b.w, b.l],
            [b.x, b.y, b.z],
            b.yaw,
            score,
        )
        .expect("valid box")
    }

    pub fn is_dontcare(&self) -> bool {
        self.class == "DontCare"
    }

    pub fn box3d(&self) -> Option<&Box3D> {
        self.box3d.as_ref()
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }
}

/// Parses KITTI label text: 15 whitespace-separated fields per line, plus
/// an optional 16th score field on detection files.
pub fn parse_labels(text: &str) -> Result<Vec<Label>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 && fields.len() != 16 {
            return Err(Error::Parse {
                path: "labels".into(),
                line: ln + 1,
                msg: format!("expected 15 or 16 fields, got {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|e| Error::Parse {
                path: "labels".into(),
                line: ln + 1,
                msg: format!("field {}: {e}", i + 1),
            })
        };
        let occlusion = num(2)?.round() as i32;
        let label = Label::new(
            fields[0],
            num(1)?,
            occlusion,
            num(3)?,
            [num(4)?, num(5)?, num(6)?, num(7)?],
            [num(8)?, num(9)?, num(10)?],
            [num(11)?, num(12)?, num(13)?],
            num(14)?,
            if fields.len() == 16 {
                Some(num(15)?)
            } else {
                None
            },
        )
        .map_err(|e| Error::Parse {
            path: "labels".into(),
            line: ln + 1,
            msg: e.to_string(),
        })?;
        out.push(label);
    }
    Ok(out)
}

/// Renders labels back to KITTI text. Floats use the shortest exact
/// representation, so parse -> serialize -> parse is lossless.
pub fn serialize_labels(labels: &[Label]) -> String {
    let mut out = String::new();
    for l in labels {
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            l.class,
            l.truncation,
            l.occlusion,
            l.alpha,
            l.bbox[0],
            l.bbox[1],
            l.bbox[2],
            l.bbox[3],
            l.dims_hwl[0],
            l.dims_hwl[1],
            l.dims_hwl[2],
            l.location[0],
            l.location[1],
            l.location[2],
            l.rotation_y
        ));
        if let Some(s) = l.score {
            out.push_str(&format!(" {s}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str =
        "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n";

    #[test]
    fn parses_fields_in_devkit_order() {
        let labels = parse_labels(SAMPLE).unwrap();
        assert_eq!(labels.len(), 1);
        let l = &labels[0];
        assert_eq!(l.class, "Car");
        let b = l.box3d().unwrap();
        assert_eq!((b.x, b.y, b.z), (-0.65, 1.71, 46.70));
        assert_eq!((b.h, b.w, b.l), (1.65, 1.67, 3.64));
        assert_eq!(b.yaw, -1.59);
        assert_eq!(l.bbox, [587.01, 173.33, 614.12, 200.12]);
        assert_eq!(l.score, None);
    }

    #[test]
    fn empty_text_gives_empty_list() {
        assert!(parse_labels("").unwrap().is_empty());
        assert!(parse_labels("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn serialize_round_trip() {
        let text = "Car 0.5 1 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.7 -1.59\n\
                    DontCare -1 -1 -10 100 150 120 180 -1 -1 -1 -1000 -1000 -1000 -10\n\
                    Car 0 0 0.25 10 20 30 40 1.5 1.6 3.9 2 1.5 8 0.25 0.875\n";
        let parsed = parse_labels(text).unwrap();
        assert_eq!(parsed.len(), 3);
        assert!(parsed[1].is_dontcare());
        assert!(parsed[1].box3d().is_none());
        assert_eq!(parsed[2].score, Some(0.875));
        let rendered = serialize_labels(&parsed);
        let reparsed = parse_labels(&rendered).unwrap();
        assert_eq!(reparsed, parsed);
        assert_eq!(serialize_labels(&reparsed), rendered);
    }

    #[test]
    fn wrong_field_count_reports_line() {
        let text = "Car 0.00 0 -1.58 587.01\n";
        let err = parse_labels(text).unwrap_err().to_string();
        assert!(err.contains("labels:1"), "{err}");
    }

    #[test]
    fn bad_dimensions_rejected_for_real_classes() {
        let text = "Car 0 0 0 0 0 10 10 -1 -1 -1 0 0 10 0\n";
        assert!(parse_labels(text).is_err());
    }

    #[test]
    fn yaw_normalized_into_half_open_interval() {
        let b = Box3D::new(0.0, 0.0, 10.0, 1.0, 1.0, 1.0, 3.5 * PI).unwrap();
        assert!((b.yaw - (-0.5 * PI)).abs() < 1e-12);
        let b = Box3D::new(0.0, 0.0, 10.0, 1.0, 1.0, 1.0, -PI).unwrap();
        assert_eq!(b.yaw, PI);
        assert!(Box3D::new(0.0, 0.0, 10.0, 0.0, 1.0, 1.0, 0.0).is_err());
        assert!(Box3D::new(0.0, 0.0, f64::NAN, 1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn bev_corners_axis_aligned() {
        let b = Box3D::new(10.0, 0.0, 20.0, 1.0, 2.0, 4.0, 0.0).unwrap();
        let c = b.corners_bev();
        assert_eq!(c[0], [12.0, 21.0]);
        assert_eq!(c[1], [8.0, 21.0]);
        assert_eq!(c[2], [8.0, 19.0]);
        assert_eq!(c[3], [12.0, 19.0]);
    }

    #[test]
    fn quarter_turn_swaps_extents() {
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 2.0, 4.0, PI / 2.0).unwrap();
        let c = b.corners_bev();
        // After a quarter turn the length runs along -z.
        let xs: Vec<f64> = c.iter().map(|p| p[0]).collect();
        let zs: Vec<f64> = c.iter().map(|p| p[1]).collect();
        let span = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max)
            - v.iter().cloned().fold(f64::MAX, f64::min);
        assert!((span(&xs) - 2.0).abs() < 1e-12);
        assert!((span(&zs) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn corners_3d_vertical_span() {
        let b = Box3D::new(0.0, 1.5, 10.0, 2.0, 1.0, 1.0, 0.0).unwrap();
        let c = b.corners_3d();
        for i in 0..4 {
            assert_eq!(c[i][1], 1.5);
            assert_eq!(c[i + 4][1], -0.5);
        }
    }
}
