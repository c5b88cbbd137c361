//! Command-line entry points: config parsing, KITTI-layout frame loading,
//! and the pipeline / distill / eval / viz / selftest subcommands.
//!
//! # Config format
//!
//! Plain `key = value` lines; `#` starts a comment, blank lines are
//! skipped, and relative paths resolve against the config file's
//! directory. `data_root` and `output_dir` are required, everything else
//! has a default:
//!
//! | key                            | default           |
//! |--------------------------------|-------------------|
//! | `seed`                         | `0`               |
//! | `channels`                     | `8`               |
//! | `disparities`                  | `24`              |
//! | `max_disparity_px`             | `192`             |
//! | `strides`                      | `4,8,16`          |
//! | `c_prime`, `c_teacher`         | `16`, `16`        |
//! | `kernel_size`                  | `3` (odd)         |
//! | `score_thresh`, `nms_iou`      | `0.3`, `0.5`      |
//! | `max_candidates`               | `512`             |
//! | `max_detections`               | `50`              |
//! | `class`, `eval_iou`            | `Car`, `0.7`      |
//! | `recall_points`                | `40` (or `11`)    |
//! | `distill_norm`                 | `cells`/`elements`|
//! | `g_mode`                       | `seeded`/`identity`|
//! | `x_range`, `y_range`, `z_range`| `-30,30` `-1,3` `2,59.6` |
//! | `stereo_voxel`, `lidar_voxel`  | `0.4,0.8,0.4` `0.05,0.1,0.05` |
//! | `student_features`, `teacher_features` | unset (dirs of `.esgt` overrides) |
//!
//! The `ESGN_SEED` environment variable, when set, overrides `seed` after
//! the file is parsed.
//!
//! # Seed family
//!
//! Every seeded kernel group derives from the run seed at a fixed offset,
//! so any stage can be reproduced in isolation: backbone at `+0`, stereo
//! volume chain at `+10`, BEV fusion at `+20`, teacher scale kernels at
//! `+30`, teacher fusion at `+40`, the distillation projector g at `+50`,
//! and the three detection heads at `+60..+62`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bev::{
    flatten_bev, frustum_sample, fuse_bev, map_semantic, seeded_fuse_kernels, GeometryFeatures,
    VoxelGrid,
};
use crate::detect::{decode_detections, AnchorGrid, BoxResidual, HeadOutputs};
use crate::distill::{
    build_fg_mask, build_sparse_mask, distill_loss, seeded_g_kernels, seeded_scale_kernels,
    teacher_features, voxelize, DistillG, DistillLoss, DistillNorm, VOXEL_CHANNELS,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ApResult, RecallPoints};
use crate::kitti::{
    load_image, load_velodyne, parse_calib, parse_labels, project_bbox, serialize_labels, Frame,
    Label,
};
use crate::ops::{concat_channels, conv2d};
use crate::stereo::{
    backbone_stub, build_stereo_volumes, cost_volumes, seeded_volume_kernels, PairedPyramid,
    PyramidConfig,
};
use crate::tensor::{ConvKernel, Tensor};
use crate::viz::{draw_box_wireframe, ply_scene, Canvas, COLOR_DET, COLOR_GT};

/// Seed offsets for the kernel families; see the module docs.
pub const SEED_VOLUME: u64 = 10;
pub const SEED_FUSE: u64 = 20;
pub const SEED_TEACHER_SCALE: u64 = 30;
pub const SEED_TEACHER_FUSE: u64 = 40;
pub const SEED_G: u64 = 50;
pub const SEED_HEAD_CLS: u64 = 60;
pub const SEED_HEAD_RES: u64 = 61;
pub const SEED_HEAD_DIR: u64 = 62;

/// Tensor names accepted by `--dump`.
pub const DUMP_NAMES: [&str; 22] = [
    "left1", "left2", "left3", "right1", "right2", "right3", "cv1", "cv2", "cv3", "sv1", "sv2",
    "sv3", "gv1", "gv2", "gv3", "bev1", "bev2", "bev3", "gf1", "gf2", "gf3", "sem",
];

/// Everything a run needs, resolved and validated.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub pyramid: PyramidConfig,
    pub stereo_grid: VoxelGrid,
    pub lidar_grid: VoxelGrid,
    pub c_prime: usize,
    pub c_teacher: usize,
    pub kernel_size: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_candidates: usize,
    pub max_detections: usize,
    pub class: String,
    pub eval_iou: f64,
    pub recall: RecallPoints,
    pub distill_norm: DistillNorm,
    pub g_identity: bool,
    /// Directory of `<frame>_gf{1..3}.esgt` files that replace the stereo
    /// front end in `distill` (fixture injection).
    pub student_features: Option<PathBuf>,
    /// Directory of `<frame>_lgf{1..3}.esgt` files that replace the LiDAR
    /// teacher in `distill`.
    pub teacher_features: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults with explicit directories; grids and pyramid match the
    /// full-size KITTI setup.
    pub fn with_dirs(data_root: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> RunConfig {
        RunConfig {
            data_root: data_root.into(),
            output_dir: output_dir.into(),
            seed: 0,
            pyramid: PyramidConfig::default(),
            stereo_grid: VoxelGrid::kitti_stereo(),
            lidar_grid: VoxelGrid::kitti_lidar(),
            c_prime: 16,
            c_teacher: 16,
            kernel_size: 3,
            score_thresh: 0.3,
            nms_iou: 0.5,
            max_candidates: 512,
            max_detections: 50,
            class: "Car".to_string(),
            eval_iou: 0.7,
            recall: RecallPoints::R40,
            distill_norm: DistillNorm::Cells,
            g_identity: false,
            student_features: None,
            teacher_features: None,
        }
    }

    /// Reads and parses a config file, then applies the `ESGN_SEED`
    /// environment override.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = RunConfig::parse(&text, base)?;
        cfg.apply_seed_override(std::env::var("ESGN_SEED").ok().as_deref())?;
        Ok(cfg)
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<RunConfig> {
        let mut data_root: Option<PathBuf> = None;
        let mut output_dir: Option<PathBuf> = None;
        let mut cfg = RunConfig::with_dirs("", "");
        let mut x_range = (-30.0, 30.0);
        let mut y_range = (-1.0, 3.0);
        let mut z_range = (2.0, 59.6);
        let mut stereo_voxel = (0.4, 0.8, 0.4);
        let mut lidar_voxel = (0.05, 0.1, 0.05);

        let resolve = |v: &str| -> PathBuf {
            let p = Path::new(v);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };

        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Config(format!("{key} must be {what}, got {value:?}"));
            match key {
                "data_root" => data_root = Some(resolve(value)),
                "output_dir" => output_dir = Some(resolve(value)),
                "seed" => cfg.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
                "channels" => {
                    cfg.pyramid.channels = value.parse().map_err(|_| bad("a positive integer"))?
                }
                "disparities" => {
                    cfg.pyramid.disparity_count =
                        value.parse().map_err(|_| bad("a positive integer"))?
                }
                "max_disparity_px" => {
                    cfg.pyramid.max_disparity_px =
                        value.parse().map_err(|_| bad("a positive integer"))?
                }
                "strides" => {
                    let s = parse_triple(value).map_err(|_| bad("three integers"))?;
                    let to_usize = |v: f64| -> Result<usize> {
                        if v.fract() == 0.0 && v >= 1.0 {
                            Ok(v as usize)
                        } else {
                            Err(bad("three positive integers"))
                        }
                    };
                    cfg.pyramid.strides = [to_usize(s.0)?, to_usize(s.1)?, to_usize(s.2)?];
                }
                "c_prime" => cfg.c_prime = value.parse().map_err(|_| bad("a positive integer"))?,
                "c_teacher" => {
                    cfg.c_teacher = value.parse().map_err(|_| bad("a positive integer"))?
                }
                "kernel_size" => {
                    cfg.kernel_size = value.parse().map_err(|_| bad("a positive integer"))?
                }
                "score_thresh" => {
                    cfg.score_thresh = value.parse().map_err(|_| bad("a number"))?
                }
                "nms_iou" => cfg.nms_iou = value.parse().map_err(|_| bad("a number"))?,
                "max_candidates" => {
                    cfg.max_candidates = value.parse().map_err(|_| bad("a positive integer"))?
                }
                "max_detections" => {
                    cfg.max_detections = value.parse().map_err(|_| bad("a positive integer"))?
                }
                "class" => cfg.class = value.to_string(),
                "eval_iou" => cfg.eval_iou = value.parse().map_err(|_| bad("a number"))?,
                "recall_points" => {
                    cfg.recall = match value {
                        "11" => RecallPoints::R11,
                        "40" => RecallPoints::R40,
                        _ => return Err(bad("11 or 40")),
                    }
                }
                "distill_norm" => {
                    cfg.distill_norm = match value {
                        "cells" => DistillNorm::Cells,
                        "elements" => DistillNorm::Elements,
                        _ => return Err(bad("cells or elements")),
                    }
                }
                "g_mode" => {
                    cfg.g_identity = match value {
                        "identity" => true,
                        "seeded" => false,
                        _ => return Err(bad("identity or seeded")),
                    }
                }
                "x_range" => x_range = parse_pair(value).map_err(|_| bad("two numbers"))?,
                "y_range" => y_range = parse_pair(value).map_err(|_| bad("two numbers"))?,
                "z_range" => z_range = parse_pair(value).map_err(|_| bad("two numbers"))?,
                "stereo_voxel" => {
                    stereo_voxel = parse_triple(value).map_err(|_| bad("three numbers"))?
                }
                "lidar_voxel" => {
                    lidar_voxel = parse_triple(value).map_err(|_| bad("three numbers"))?
                }
                "student_features" => cfg.student_features = Some(resolve(value)),
                "teacher_features" => cfg.teacher_features = Some(resolve(value)),
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }

        cfg.data_root = data_root.ok_or_else(|| Error::Config("data_root is required".into()))?;
        cfg.output_dir =
            output_dir.ok_or_else(|| Error::Config("output_dir is required".into()))?;
        cfg.stereo_grid = VoxelGrid::new(x_range, y_range, z_range, stereo_voxel)?;
        cfg.lidar_grid = VoxelGrid::new(x_range, y_range, z_range, lidar_voxel)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the seed when the override value is present.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("ESGN_SEED must be an unsigned integer, got {v:?}"))
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        if self.c_prime == 0 || self.c_teacher == 0 {
            return Err(Error::Config("c_prime and c_teacher must be >= 1".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(0.0..1.0).contains(&self.score_thresh) {
            return Err(Error::Config(format!(
                "score_thresh must be in [0, 1), got {}",
                self.score_thresh
            )));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(format!(
                "nms_iou must be in [0, 1], got {}",
                self.nms_iou
            )));
        }
        if !(0.0..=1.0).contains(&self.eval_iou) || self.eval_iou == 0.0 {
            return Err(Error::Config(format!(
                "eval_iou must be in (0, 1], got {}",
                self.eval_iou
            )));
        }
        if self.max_candidates == 0 || self.max_detections == 0 {
            return Err(Error::Config(
                "max_candidates and max_detections must be >= 1".into(),
            ));
        }
        if self.class.is_empty() {
            return Err(Error::Config("class must not be empty".into()));
        }
        Ok(())
    }
}

fn parse_pair(v: &str) -> std::result::Result<(f64, f64), ()> {
    let mut it = v.split(',').map(str::trim);
    let a = it.next().ok_or(())?.parse().map_err(|_| ())?;
    let b = it.next().ok_or(())?.parse().map_err(|_| ())?;
    if it.next().is_some() {
        return Err(());
    }
    Ok((a, b))
}

fn parse_triple(v: &str) -> std::result::Result<(f64, f64, f64), ()> {
    let mut it = v.split(',').map(str::trim);
    let a = it.next().ok_or(())?.parse().map_err(|_| ())?;
    let b = it.next().ok_or(())?.parse().map_err(|_| ())?;
    let c = it.next().ok_or(())?.parse().map_err(|_| ())?;
    if it.next().is_some() {
        return Err(());
    }
    Ok((a, b, c))
}

/// All seeded kernels of the student pipeline, derived once per run.
#[derive(Debug, Clone)]
pub struct PipelineNets {
    pub volume: [ConvKernel; 3],
    pub fuse: [ConvKernel; 3],
    pub head_cls: ConvKernel,
    pub head_res: ConvKernel,
    pub head_dir: ConvKernel,
}

impl PipelineNets {
    pub fn new(cfg: &RunConfig) -> PipelineNets {
        let (_, ny, _) = cfg.stereo_grid.dims();
        let bev_channels = cfg.pyramid.channels * ny;
        let head_in = cfg.c_prime + cfg.pyramid.channels;
        PipelineNets {
            volume: seeded_volume_kernels(cfg.seed + SEED_VOLUME, &cfg.pyramid, cfg.kernel_size),
            fuse: seeded_fuse_kernels(
                cfg.seed + SEED_FUSE,
                bev_channels,
                cfg.c_prime,
                cfg.kernel_size,
            ),
            head_cls: ConvKernel::seeded(cfg.seed + SEED_HEAD_CLS, 2, head_in, 1, 1),
            head_res: ConvKernel::seeded(cfg.seed + SEED_HEAD_RES, 14, head_in, 1, 1),
            head_dir: ConvKernel::seeded(cfg.seed + SEED_HEAD_DIR, 4, head_in, 1, 1),
        }
    }
}

/// Loads one KITTI-layout frame. Images come from `image_2`/`image_3`
/// with extension probing (`.pgm`, `.pfm`, `.esgt`) and are skipped when
/// `with_images` is false. Every failure names the frame and stage.
pub fn load_frame(root: &Path, id: &str, with_images: bool) -> Result<Frame> {
    let calib_path = root.join("calib").join(format!("{id}.txt"));
    let calib_text = fs::read_to_string(&calib_path)
        .map_err(|e| Error::io(&calib_path, e).in_frame(id, "calib"))?;
    let rig = parse_calib(&calib_text).map_err(|e| e.in_frame(id, "calib"))?;

    let label_path = root.join("label_2").join(format!("{id}.txt"));
    let label_text = fs::read_to_string(&label_path)
        .map_err(|e| Error::io(&label_path, e).in_frame(id, "labels"))?;
    let labels = parse_labels(&label_text).map_err(|e| e.in_frame(id, "labels"))?;

    let velo_path = root.join("velodyne").join(format!("{id}.bin"));
    let points = load_velodyne(&velo_path).map_err(|e| e.in_frame(id, "velodyne"))?;

    let (left, right) = if with_images {
        let left = load_image_any(&root.join("image_2"), id).map_err(|e| e.in_frame(id, "image_2"))?;
        let right =
            load_image_any(&root.join("image_3"), id).map_err(|e| e.in_frame(id, "image_3"))?;
        (Some(left), Some(right))
    } else {
        (None, None)
    };

    Ok(Frame {
        id: id.to_string(),
        rig,
        left,
        right,
        points,
        labels,
    })
}

fn load_image_any(dir: &Path, id: &str) -> Result<Tensor> {
    for ext in ["pgm", "pfm", "esgt"] {
        let path = dir.join(format!("{id}.{ext}"));
        if path.exists() {
            return load_image(&path);
        }
    }
    Err(Error::io(
        dir.join(format!("{id}.pgm")),
        std::io::Error::from(std::io::ErrorKind::NotFound),
    ))
}

/// Frame ids are the sorted stems of `label_2/*.txt`.
pub fn discover_frames(data_root: &Path) -> Result<Vec<String>> {
    let dir = data_root.join("label_2");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Config(format!("no label files in {}", dir.display())));
    }
    Ok(ids)
}

fn select_frames(cfg: &RunConfig, requested: Option<&[String]>) -> Result<Vec<String>> {
    let all = discover_frames(&cfg.data_root)?;
    match requested {
        None => Ok(all),
        Some(ids) => {
            for id in ids {
                if !all.contains(id) {
                    return Err(Error::Config(format!(
                        "frame {id} not found under {}",
                        cfg.data_root.display()
                    )));
                }
            }
            Ok(ids.to_vec())
        }
    }
}

/// Runs `work` over the frames on a dedicated rayon pool (0 threads means
/// the rayon default) and returns per-frame results in input order.
fn run_frames<T, F>(ids: &[String], threads: usize, work: F) -> Result<Vec<(String, Result<T>)>>
where
    T: Send,
    F: Fn(&str) -> Result<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        ids.par_iter()
            .map(|id| (id.clone(), work(id)))
            .collect()
    }))
}

/// Every intermediate the student pipeline produces up to the fused
/// geometry features.
pub struct StudentTaps {
    pub pyramid: PairedPyramid,
    pub cost: [Tensor; 3],
    pub volumes: [Tensor; 3],
    pub grids: [Tensor; 3],
    pub bev: [Tensor; 3],
    pub features: GeometryFeatures,
}

/// Stereo front end: backbone, correlation, volume chain, frustum
/// resampling, BEV flattening, and cascade fusion.
pub fn student_taps(cfg: &RunConfig, nets: &PipelineNets, frame: &Frame) -> Result<StudentTaps> {
    let left = frame
        .left
        .as_ref()
        .ok_or_else(|| Error::Config(format!("frame {} has no left image", frame.id)))?;
    let right = frame
        .right
        .as_ref()
        .ok_or_else(|| Error::Config(format!("frame {} has no right image", frame.id)))?;
    let pyramid = backbone_stub(left, right, &cfg.pyramid, cfg.seed)?;
    let cost = cost_volumes(&pyramid, cfg.pyramid.disparity_count)?;
    let volumes = build_stereo_volumes(&cost, cfg.pyramid.channels, &nets.volume)?;
    let mut grids = Vec::with_capacity(3);
    let mut bev = Vec::with_capacity(3);
    for (i, sv) in volumes.iter().enumerate() {
        let gv = frustum_sample(sv, &frame.rig, &cfg.stereo_grid, cfg.pyramid.strides[i])?;
        bev.push(flatten_bev(&gv)?);
        grids.push(gv);
    }
    let grids: [Tensor; 3] = grids.try_into().expect("three scales");
    let bev: [Tensor; 3] = bev.try_into().expect("three scales");
    let features = fuse_bev(&bev, &nets.fuse)?;
    Ok(StudentTaps {
        pyramid,
        cost,
        volumes,
        grids,
        bev,
        features,
    })
}

/// One frame's pipeline products: labelled detections plus any requested
/// intermediate tensors.
pub struct FrameOutput {
    pub detections: Vec<Label>,
    pub dumps: Vec<(String, Tensor)>,
}

/// Flattens `[2, X, Z]` / `[14, X, Z]` / `[4, X, Z]` head maps into the
/// anchor-indexed vectors the decoder expects: anchor `(ix*nz + iz)*2 + a`
/// reads class logit channel `a`, residual channels `a*7 .. a*7+7`, and
/// direction channels `2a, 2a+1`.
pub fn flatten_heads(
    cls: &Tensor,
    res: &Tensor,
    dir: &Tensor,
    anchors: &AnchorGrid,
) -> Result<HeadOutputs> {
    let (nx, nz) = anchors.bev_dims();
    let want = |t: &Tensor, c: usize, what: &str| -> Result<()> {
        if t.dims() != [c, nx, nz] {
            return Err(Error::shape(format!(
                "{what} map must be [{c}, {nx}, {nz}], got {:?}",
                t.dims()
            )));
        }
        Ok(())
    };
    want(cls, 2, "class")?;
    want(res, 14, "residual")?;
    want(dir, 4, "direction")?;
    let n = anchors.len();
    let mut cls_logits = vec![0.0f64; n];
    let mut residuals = vec![BoxResidual::ZERO; n];
    let mut dir_logits = vec![[0.0f64; 2]; n];
    for ix in 0..nx {
        for iz in 0..nz {
            for a in 0..2 {
                let idx = anchors.index(ix, iz, a);
                cls_logits[idx] = cls.get(&[a, ix, iz]) as f64;
                let mut arr = [0.0f64; 7];
                for (k, slot) in arr.iter_mut().enumerate() {
                    *slot = res.get(&[a * 7 + k, ix, iz]) as f64;
                }
                residuals[idx] = BoxResidual::from_array(arr);
                dir_logits[idx] = [
                    dir.get(&[2 * a, ix, iz]) as f64,
                    dir.get(&[2 * a + 1, ix, iz]) as f64,
                ];
            }
        }
    }
    HeadOutputs::new(cls_logits, residuals, dir_logits)
}

/// Caps decoding work on dense anchor grids: every logit outside the top
/// `cap` (by logit, ties to the lower index) drops to negative infinity,
/// which sigmoids to a score of exactly zero. Decode order and survivors
/// among the kept candidates are unchanged because sigmoid is monotone.
pub fn keep_top_candidates(logits: &mut [f64], cap: usize) {
    if cap == 0 || logits.len() <= cap {
        return;
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    for &i in &order[cap..] {
        logits[i] = f64::NEG_INFINITY;
    }
}

/// Full per-frame inference: front end, semantic concat, 1x1 heads,
/// candidate cap, decode, NMS, and projection back to labelled boxes.
pub fn pipeline_frame(
    cfg: &RunConfig,
    nets: &PipelineNets,
    frame: &Frame,
    dumps: &[String],
) -> Result<FrameOutput> {
    let taps = student_taps(cfg, nets, frame)?;
    let sem = map_semantic(
        &taps.pyramid.left[2],
        &frame.rig,
        &cfg.stereo_grid,
        cfg.pyramid.strides[2],
    )?;
    let head_in = concat_channels(&taps.features.scales[2], &sem)?;
    let cls_map = conv2d(&head_in, &nets.head_cls)?;
    let res_map = conv2d(&head_in, &nets.head_res)?;
    let dir_map = conv2d(&head_in, &nets.head_dir)?;

    let anchors = AnchorGrid::car(&cfg.stereo_grid);
    let mut outputs = flatten_heads(&cls_map, &res_map, &dir_map, &anchors)?;
    keep_top_candidates(&mut outputs.cls_logits, cfg.max_candidates);
    let mut dets = decode_detections(&outputs, &anchors, cfg.score_thresh, cfg.nms_iou)?;
    dets.truncate(cfg.max_detections);

    let left = frame.left.as_ref().expect("checked in student_taps");
    let (image_h, image_w) = (left.dims()[1], left.dims()[2]);
    let detections = dets
        .iter()
        .map(|d| {
            let bbox = project_bbox(&frame.rig, &d.box3d, image_w, image_h);
            Label::from_box(cfg.class.clone(), d.box3d, bbox, Some(d.score))
        })
        .collect();

    let mut out_dumps = Vec::with_capacity(dumps.len());
    for name in dumps {
        let t = match name.as_str() {
            "left1" => &taps.pyramid.left[0],
            "left2" => &taps.pyramid.left[1],
            "left3" => &taps.pyramid.left[2],
            "right1" => &taps.pyramid.right[0],
            "right2" => &taps.pyramid.right[1],
            "right3" => &taps.pyramid.right[2],
            "cv1" => &taps.cost[0],
            "cv2" => &taps.cost[1],
            "cv3" => &taps.cost[2],
            "sv1" => &taps.volumes[0],
            "sv2" => &taps.volumes[1],
            "sv3" => &taps.volumes[2],
            "gv1" => &taps.grids[0],
            "gv2" => &taps.grids[1],
            "gv3" => &taps.grids[2],
            "bev1" => &taps.bev[0],
            "bev2" => &taps.bev[1],
            "bev3" => &taps.bev[2],
            "gf1" => &taps.features.scales[0],
            "gf2" => &taps.features.scales[1],
            "gf3" => &taps.features.scales[2],
            "sem" => &sem,
            _ => return Err(Error::Config(format!("unknown dump name {name:?}"))),
        };
        out_dumps.push((name.clone(), t.clone()));
    }
    Ok(FrameOutput {
        detections,
        dumps: out_dumps,
    })
}

/// `pipeline` subcommand: runs inference over the selected frames and
/// writes `<output_dir>/<frame>.txt` detections (KITTI label rows with
/// scores) plus `<frame>_<name>.esgt` for every `--dump` tensor. Frames
/// execute in parallel; a single ordered sink does all writing, so output
/// bytes are identical for any thread count. Returns 0 iff every frame
/// succeeded.
pub fn cmd_pipeline(
    config: &Path,
    frames: Option<&[String]>,
    dumps: &[String],
    threads: usize,
) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    for name in dumps {
        if !DUMP_NAMES.contains(&name.as_str()) {
            return Err(Error::Config(format!(
                "unknown dump name {name:?}; valid names: {}",
                DUMP_NAMES.join(", ")
            )));
        }
    }
    let ids = select_frames(&cfg, frames)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let nets = PipelineNets::new(&cfg);

    let results = run_frames(&ids, threads, |id| {
        let frame = load_frame(&cfg.data_root, id, true)?;
        pipeline_frame(&cfg, &nets, &frame, dumps).map_err(|e| e.in_frame(id, "pipeline"))
    })?;

    let mut failed = 0usize;
    for (id, res) in results {
        match res {
            Ok(out) => {
                let det_path = cfg.output_dir.join(format!("{id}.txt"));
                fs::write(&det_path, serialize_labels(&out.detections))
                    .map_err(|e| Error::io(&det_path, e))?;
                for (name, tensor) in &out.dumps {
                    tensor.save(&cfg.output_dir.join(format!("{id}_{name}.esgt")))?;
                }
                println!("frame={id} detections={}", out.detections.len());
            }
            Err(e) => {
                eprintln!("error: {e}");
                failed += 1;
            }
        }
    }
    println!("frames={} failed={failed}", ids.len());
    Ok(if failed == 0 { 0 } else { 1 })
}

/// One frame's distillation outcome.
struct FrameDistill {
    loss: DistillLoss,
}

fn load_features(dir: &Path, id: &str, tag: &str) -> Result<GeometryFeatures> {
    let mut scales = Vec::with_capacity(3);
    for i in 1..=3 {
        scales.push(Tensor::load(&dir.join(format!("{id}_{tag}{i}.esgt")))?);
    }
    GeometryFeatures::new(scales.try_into().expect("three scales"))
}

/// `distill` subcommand: compares student geometry features against the
/// LiDAR teacher under the joint foreground/sparse mask and prints the
/// masked squared-difference loss. Either side can be replaced by `.esgt`
/// fixtures via `student_features` / `teacher_features`. Per-scale
/// aggregates are means over frames; the total is the sum of the three
/// scale means.
pub fn cmd_distill(config: &Path, frames: Option<&[String]>, threads: usize) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let ids = select_frames(&cfg, frames)?;
    let nets = PipelineNets::new(&cfg);
    let (_, lidar_ny, _) = cfg.lidar_grid.dims();
    let teacher_scale = seeded_scale_kernels(
        cfg.seed + SEED_TEACHER_SCALE,
        VOXEL_CHANNELS * lidar_ny,
        cfg.c_teacher,
        cfg.kernel_size,
    );
    let teacher_fuse = seeded_fuse_kernels(
        cfg.seed + SEED_TEACHER_FUSE,
        cfg.c_teacher,
        cfg.c_prime,
        cfg.kernel_size,
    );
    let g = if cfg.g_identity {
        DistillG::Identity
    } else {
        DistillG::PerScale(seeded_g_kernels(
            cfg.seed + SEED_G,
            cfg.c_prime,
            cfg.c_prime,
        ))
    };

    let results = run_frames(&ids, threads, |id| {
        let with_images = cfg.student_features.is_none();
        let frame = load_frame(&cfg.data_root, id, with_images)?;
        let work = || -> Result<FrameDistill> {
            let student = match &cfg.student_features {
                Some(dir) => load_features(dir, id, "gf")?,
                None => student_taps(&cfg, &nets, &frame)?.features,
            };
            let cam_points = frame.cam_points();
            let teacher = match &cfg.teacher_features {
                Some(dir) => load_features(dir, id, "lgf")?,
                None => {
                    let volume = voxelize(&cam_points, &cfg.lidar_grid);
                    teacher_features(&volume, &cfg.stereo_grid, &teacher_scale, &teacher_fuse)?
                }
            };
            let fg = build_fg_mask(&frame.gt_boxes(&cfg.class), &cfg.stereo_grid);
            let sp = build_sparse_mask(&cam_points, &cfg.stereo_grid);
            let loss = distill_loss(&student, &teacher, &g, &fg, &sp, cfg.distill_norm)?;
            Ok(FrameDistill { loss })
        };
        work().map_err(|e| e.in_frame(id, "distill"))
    })?;

    let mut failed = 0usize;
    let mut sums = [0.0f64; 3];
    let mut done = 0usize;
    for (id, res) in results {
        match res {
            Ok(fd) => {
                println!(
                    "frame={id} total={:.9} active={}",
                    fd.loss.total, fd.loss.active_cells
                );
                for (i, v) in fd.loss.per_scale.iter().enumerate() {
                    sums[i] += v;
                }
                done += 1;
            }
            Err(e) => {
                eprintln!("error: {e}");
                failed += 1;
            }
        }
    }
    if done > 0 {
        let means: Vec<f64> = sums.iter().map(|s| s / done as f64).collect();
        for (i, m) in means.iter().enumerate() {
            println!("scale={} loss={:.9}", i + 1, m);
        }
        println!("total={:.9}", means.iter().sum::<f64>());
    }
    println!("frames={} failed={failed}", ids.len());
    Ok(if failed == 0 { 0 } else { 1 })
}

fn txt_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(stem.to_string());
            }
        }
    }
    Ok(stems)
}

/// Renders the six AP rows as an aligned table.
pub fn render_eval_table(rows: &[ApResult]) -> String {
    let mut out = String::from("metric  bucket    iou   ap\n");
    for row in rows {
        let ap = match row.ap {
            Some(v) => format!("{v:.4}"),
            None => "absent".to_string(),
        };
        out.push_str(&format!(
            "{:<7} {:<9} {:<5.2} {ap}\n",
            row.kind.metric_name(),
            row.bucket,
            row.iou_threshold
        ));
    }
    out
}

/// `eval` subcommand: matches detection files against ground-truth files
/// by stem, evaluates the KITTI protocol, and prints a table plus one
/// machine-readable line per row. Stems present on only one side are
/// warnings and make the exit status 1.
pub fn cmd_eval(
    gt_dir: &Path,
    det_dir: &Path,
    class: &str,
    iou: f64,
    recall: RecallPoints,
) -> Result<i32> {
    let gt_stems = txt_stems(gt_dir)?;
    let det_stems = txt_stems(det_dir)?;
    let mut mismatched = 0usize;
    for stem in gt_stems.difference(&det_stems) {
        eprintln!("warning: frame {stem} has ground truth but no detections file");
        mismatched += 1;
    }
    for stem in det_stems.difference(&gt_stems) {
        eprintln!("warning: frame {stem} has detections but no ground truth file");
        mismatched += 1;
    }
    let shared: Vec<&String> = gt_stems.intersection(&det_stems).collect();
    if shared.is_empty() {
        return Err(Error::Config(format!(
            "no shared frame stems between {} and {}",
            gt_dir.display(),
            det_dir.display()
        )));
    }

    let mut gt_frames = Vec::with_capacity(shared.len());
    let mut det_frames = Vec::with_capacity(shared.len());
    for stem in &shared {
        let read = |dir: &Path| -> Result<Vec<Label>> {
            let path = dir.join(format!("{stem}.txt"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            parse_labels(&text)
        };
        gt_frames.push(read(gt_dir).map_err(|e| e.in_frame(stem, "labels"))?);
        det_frames.push(read(det_dir).map_err(|e| e.in_frame(stem, "labels"))?);
    }

    let rows = evaluate(&gt_frames, &det_frames, class, iou, recall)?;
    print!("{}", render_eval_table(&rows));
    for row in &rows {
        let ap = match row.ap {
            Some(v) => format!("{v:.6}"),
            None => "absent".to_string(),
        };
        println!(
            "class={class} metric={} bucket={} iou={:.2} ap={ap}",
            row.kind.metric_name(),
            row.bucket,
            row.iou_threshold
        );
    }
    Ok(if mismatched == 0 { 0 } else { 1 })
}

/// `viz` subcommand: writes `<output_dir>/<frame>.ppm` (left image with
/// ground truth in red and, when a detections file exists in the output
/// directory, detections in green) and `<frame>.ply` (points plus box
/// wireframes).
pub fn cmd_viz(config: &Path, frame_id: &str) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let frame = load_frame(&cfg.data_root, frame_id, true)?;
    let left = frame.left.as_ref().expect("loaded with images");
    let mut canvas = Canvas::from_grayscale(left)?;

    let gt_boxes = frame.gt_boxes(&cfg.class);
    for b in &gt_boxes {
        draw_box_wireframe(&mut canvas, &frame.rig, b, COLOR_GT);
    }
    let det_path = cfg.output_dir.join(format!("{frame_id}.txt"));
    let mut det_boxes = Vec::new();
    if det_path.exists() {
        let text = fs::read_to_string(&det_path).map_err(|e| Error::io(&det_path, e))?;
        for label in parse_labels(&text).map_err(|e| e.in_frame(frame_id, "detections"))? {
            if let Some(b) = label.box3d() {
                det_boxes.push(*b);
            }
        }
        for b in &det_boxes {
            draw_box_wireframe(&mut canvas, &frame.rig, b, COLOR_DET);
        }
    }

    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let ppm_path = cfg.output_dir.join(format!("{frame_id}.ppm"));
    canvas.write_ppm(&ppm_path)?;

    let mut boxes: Vec<_> = gt_boxes.iter().map(|b| (*b, COLOR_GT)).collect();
    boxes.extend(det_boxes.iter().map(|b| (*b, COLOR_DET)));
    let ply = ply_scene(&frame.cam_points(), &boxes);
    let ply_path = cfg.output_dir.join(format!("{frame_id}.ply"));
    fs::write(&ply_path, ply).map_err(|e| Error::io(&ply_path, e))?;

    println!("wrote {}", ppm_path.display());
    println!("wrote {}", ply_path.display());
    Ok(0)
}

/// `gen` subcommand: writes a KITTI-layout synthetic dataset (calib,
/// labels, LiDAR, stereo pair) so every other subcommand has data to run
/// on. Frame `i` renders scene seed `seed + i`.
pub fn cmd_gen(out: &Path, count: usize, seed: u64) -> Result<i32> {
    use crate::kitti::{synthetic_scene, write_kitti_frame};
    if count == 0 {
        return Err(Error::Config("frame count must be >= 1".into()));
    }
    for i in 0..count {
        let id = format!("{i:06}");
        let scene = synthetic_scene(seed + i as u64);
        write_kitti_frame(out, &id, &scene)?;
        println!("frame={id} labels={}", scene.labels.len());
    }
    println!("wrote {count} frames under {}", out.display());
    Ok(0)
}

/// `selftest` subcommand: end-to-end smoke checks that need no data on
/// disk. Prints one line per check and returns 0 iff all pass.
pub fn cmd_selftest() -> Result<i32> {
    let checks: [(&str, fn() -> Result<()>); 6] = [
        ("correlation matches the direct formula", selftest_correlation),
        ("box codec round trip", selftest_codec),
        ("rotated IoU sanity", selftest_iou),
        ("identical features distill to zero", selftest_distill_zero),
        ("pipeline is deterministic", selftest_determinism),
        ("tensor dump round trip", selftest_esgt),
    ];
    let mut failed = 0usize;
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("ok {name}"),
            Err(e) => {
                println!("FAILED {name}: {e}");
                failed += 1;
            }
        }
    }
    if failed == 0 {
        println!("selftest: {} checks passed", checks.len());
        Ok(0)
    } else {
        println!("selftest: {failed} of {} checks failed", checks.len());
        Ok(1)
    }
}

fn selftest_correlation() -> Result<()> {
    use crate::stereo::correlate;
    let left = Tensor::random(11, vec![3, 2, 9])?;
    let right = Tensor::random(12, vec![3, 2, 9])?;
    let d_count = 4usize;
    let cv = correlate(&left, &right, d_count)?;
    for d in 0..d_count {
        for h in 0..2 {
            for w in 0..9 {
                let want = if w < d || w + d >= 9 {
                    0.0f32
                } else {
                    let mut sum = 0.0f32;
                    for c in 0..3 {
                        sum += left.get(&[c, h, w - d]) * right.get(&[c, h, w + d]);
                    }
                    sum / 3.0
                };
                if cv.get(&[d, h, w]) != want {
                    return Err(Error::Config(format!(
                        "cost volume mismatch at ({d}, {h}, {w})"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn selftest_codec() -> Result<()> {
    use crate::detect::{decode, encode};
    use crate::kitti::Box3D;
    use crate::tensor::SplitMix64;
    let mut rng = SplitMix64::new(33);
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.next_f32() as f64;
    for _ in 0..100 {
        let anchor = Box3D::new(u(-20.0, 20.0), u(0.5, 2.5), u(3.0, 50.0), 1.56, 1.6, 3.9, 0.0)
            .expect("anchor");
        let gt = Box3D::new(
            anchor.x + u(-2.0, 2.0),
            anchor.y + u(-0.5, 0.5),
            anchor.z + u(-2.0, 2.0),
            u(1.2, 2.0),
            u(1.2, 2.2),
            u(3.0, 5.0),
            u(-3.0, 3.0),
        )
        .expect("gt");
        let back = decode(&encode(&gt, &anchor)?, &anchor)?;
        let err = (back.x - gt.x)
            .abs()
            .max((back.y - gt.y).abs())
            .max((back.z - gt.z).abs())
            .max((back.h - gt.h).abs())
            .max((back.w - gt.w).abs())
            .max((back.l - gt.l).abs())
            .max((back.yaw - gt.yaw).abs());
        if err > 1e-9 {
            return Err(Error::Config(format!("codec round trip error {err}")));
        }
    }
    Ok(())
}

fn selftest_iou() -> Result<()> {
    use crate::iou::rotated_iou_bev;
    use crate::kitti::Box3D;
    let a = Box3D::new(0.0, 1.0, 10.0, 1.5, 2.0, 4.0, 0.0).expect("box");
    if (rotated_iou_bev(&a, &a) - 1.0).abs() > 1e-12 {
        return Err(Error::Config("self IoU is not 1".into()));
    }
    let far = a.translated(50.0, 0.0, 0.0);
    if rotated_iou_bev(&a, &far) != 0.0 {
        return Err(Error::Config("disjoint IoU is not 0".into()));
    }
    // Axis-aligned overlap has a closed form from the BEV corner extents.
    let b = a.translated(2.0, 0.0, 0.7);
    let rect = |bx: &Box3D| {
        let c = bx.corners_bev();
        let xs: Vec<f64> = c.iter().map(|p| p[0]).collect();
        let zs: Vec<f64> = c.iter().map(|p| p[1]).collect();
        (
            xs.iter().cloned().fold(f64::MAX, f64::min),
            xs.iter().cloned().fold(f64::MIN, f64::max),
            zs.iter().cloned().fold(f64::MAX, f64::min),
            zs.iter().cloned().fold(f64::MIN, f64::max),
        )
    };
    let (ax0, ax1, az0, az1) = rect(&a);
    let (bx0, bx1, bz0, bz1) = rect(&b);
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iz = (az1.min(bz1) - az0.max(bz0)).max(0.0);
    let inter = ix * iz;
    let area = |x0: f64, x1: f64, z0: f64, z1: f64| (x1 - x0) * (z1 - z0);
    let want = inter / (area(ax0, ax1, az0, az1) + area(bx0, bx1, bz0, bz1) - inter);
    let got = rotated_iou_bev(&a, &b);
    if (got - want).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "axis-aligned IoU {got} differs from closed form {want}"
        )));
    }
    Ok(())
}

fn selftest_distill_zero() -> Result<()> {
    use crate::distill::BevMask;
    let grid = VoxelGrid::new((-2.0, 2.0), (-1.0, 1.0), (2.0, 6.0), (1.0, 1.0, 1.0))?;
    let (nx, _, nz) = grid.dims();
    let scales = [
        Tensor::random(1, vec![4, nx, nz])?,
        Tensor::random(2, vec![4, nx, nz])?,
        Tensor::random(3, vec![4, nx, nz])?,
    ];
    let student = GeometryFeatures::new(scales)?;
    let teacher = student.clone();
    let mut fg = BevMask::empty(&grid);
    for ix in 0..nx {
        for iz in 0..nz {
            fg.set(ix, iz, true);
        }
    }
    let sp = fg.clone();
    let loss = distill_loss(
        &student,
        &teacher,
        &DistillG::Identity,
        &fg,
        &sp,
        DistillNorm::Cells,
    )?;
    if loss.total != 0.0 {
        return Err(Error::Config(format!(
            "identical features lost {}",
            loss.total
        )));
    }
    Ok(())
}

fn selftest_determinism() -> Result<()> {
    use crate::kitti::synthetic_scene;
    let scene = synthetic_scene(7);
    let mut cfg = RunConfig::with_dirs("", "");
    cfg.pyramid.channels = 4;
    cfg.pyramid.disparity_count = 8;
    cfg.c_prime = 8;
    cfg.stereo_grid = VoxelGrid::new((-6.0, 6.0), (-1.0, 3.0), (2.0, 14.0), (0.4, 0.8, 0.4))?;
    cfg.score_thresh = 0.05;
    let frame = Frame {
        id: "selftest".to_string(),
        rig: scene.rig,
        left: Some(scene.left),
        right: Some(scene.right),
        points: scene.points,
        labels: scene.labels,
    };
    let nets = PipelineNets::new(&cfg);
    let a = pipeline_frame(&cfg, &nets, &frame, &["gf3".to_string()])?;
    let b = pipeline_frame(&cfg, &nets, &frame, &["gf3".to_string()])?;
    if a.dumps[0].1.data() != b.dumps[0].1.data() {
        return Err(Error::Config("fused features differ between runs".into()));
    }
    if serialize_labels(&a.detections) != serialize_labels(&b.detections) {
        return Err(Error::Config("detections differ between runs".into()));
    }
    Ok(())
}

fn selftest_esgt() -> Result<()> {
    let t = Tensor::random(5, vec![2, 3, 4])?;
    let mut buf = Vec::new();
    t.write_to(&mut buf)
        .map_err(|e| Error::io("<memory>", e))?;
    let back = Tensor::read_from(&mut buf.as_slice())?;
    if back.dims() != t.dims() || back.data() != t.data() {
        return Err(Error::Config("tensor dump round trip differs".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_config_text() -> &'static str {
        "\
# run setup
data_root = data/kitti   # relative to this file
output_dir = /tmp/esgn-out

seed = 9
channels = 4
disparities = 8
max_disparity_px = 64
strides = 4, 8, 16
c_prime = 8
c_teacher = 6
kernel_size = 3
score_thresh = 0.25
nms_iou = 0.4
max_candidates = 128
max_detections = 10
class = Car
eval_iou = 0.5
recall_points = 11
distill_norm = elements
g_mode = identity
x_range = -6, 6
y_range = -1, 3
z_range = 2, 14
stereo_voxel = 0.4, 0.8, 0.4
lidar_voxel = 0.05, 0.1, 0.05
"
    }

    #[test]
    fn parse_reads_every_key() {
        let cfg = RunConfig::parse(full_config_text(), Path::new("/cfg/dir")).unwrap();
        assert_eq!(cfg.data_root, Path::new("/cfg/dir/data/kitti"));
        assert_eq!(cfg.output_dir, Path::new("/tmp/esgn-out"));
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.pyramid.channels, 4);
        assert_eq!(cfg.pyramid.disparity_count, 8);
        assert_eq!(cfg.pyramid.max_disparity_px, 64);
        assert_eq!(cfg.pyramid.strides, [4, 8, 16]);
        assert_eq!(cfg.c_prime, 8);
        assert_eq!(cfg.c_teacher, 6);
        assert_eq!(cfg.score_thresh, 0.25);
        assert_eq!(cfg.nms_iou, 0.4);
        assert_eq!(cfg.max_candidates, 128);
        assert_eq!(cfg.max_detections, 10);
        assert_eq!(cfg.eval_iou, 0.5);
        assert_eq!(cfg.recall, RecallPoints::R11);
        assert_eq!(cfg.distill_norm, DistillNorm::Elements);
        assert!(cfg.g_identity);
        assert_eq!(cfg.stereo_grid.dims(), (30, 5, 30));
        assert_eq!(cfg.lidar_grid.dims(), (240, 40, 240));
    }

    #[test]
    fn parse_rejects_bad_input() {
        let base = Path::new(".");
        let with = |extra: &str| format!("data_root = d\noutput_dir = o\n{extra}\n");
        assert!(RunConfig::parse(&with("mystery = 3"), base).is_err());
        assert!(RunConfig::parse(&with("seed = -1"), base).is_err());
        assert!(RunConfig::parse(&with("kernel_size = 2"), base).is_err());
        assert!(RunConfig::parse(&with("recall_points = 25"), base).is_err());
        assert!(RunConfig::parse(&with("score_thresh = 1.5"), base).is_err());
        assert!(RunConfig::parse(&with("x_range = 1"), base).is_err());
        assert!(RunConfig::parse(&with("stereo_voxel = 0.4,0.8"), base).is_err());
        assert!(RunConfig::parse(&with("just a line"), base).is_err());
        // Missing required keys.
        assert!(RunConfig::parse("output_dir = o\n", base).is_err());
        assert!(RunConfig::parse("data_root = d\n", base).is_err());
    }

    #[test]
    fn seed_override_applies_when_present() {
        let mut cfg = RunConfig::with_dirs("d", "o");
        cfg.seed = 5;
        cfg.apply_seed_override(None).unwrap();
        assert_eq!(cfg.seed, 5);
        cfg.apply_seed_override(Some("123")).unwrap();
        assert_eq!(cfg.seed, 123);
        assert!(cfg.apply_seed_override(Some("nope")).is_err());
    }

    #[test]
    fn head_flattening_matches_anchor_layout() {
        let grid = VoxelGrid::new((-3.0, 3.0), (-1.0, 3.0), (2.0, 8.0), (2.0, 4.0, 2.0)).unwrap();
        let anchors = AnchorGrid::car(&grid);
        let (nx, nz) = anchors.bev_dims();
        let fill = |c: usize| -> Tensor {
            let mut t = Tensor::zeros(vec![c, nx, nz]).unwrap();
            for ch in 0..c {
                for ix in 0..nx {
                    for iz in 0..nz {
                        t.set(&[ch, ix, iz], (ch * 10000 + ix * 100 + iz) as f32)
                            .unwrap();
                    }
                }
            }
            t
        };
        let (cls, res, dir) = (fill(2), fill(14), fill(4));
        let out = flatten_heads(&cls, &res, &dir, &anchors).unwrap();
        assert_eq!(out.len(), anchors.len());
        for ix in 0..nx {
            for iz in 0..nz {
                for a in 0..2 {
                    let idx = anchors.index(ix, iz, a);
                    let cell = (ix * 100 + iz) as f64;
                    assert_eq!(out.cls_logits[idx], a as f64 * 10000.0 + cell);
                    let arr = out.residuals[idx].as_array();
                    for (k, v) in arr.iter().enumerate() {
                        assert_eq!(*v, ((a * 7 + k) * 10000) as f64 + cell);
                    }
                    assert_eq!(out.dir_logits[idx][0], ((2 * a) * 10000) as f64 + cell);
                    assert_eq!(out.dir_logits[idx][1], ((2 * a + 1) * 10000) as f64 + cell);
                }
            }
        }
    }

    #[test]
    fn candidate_cap_masks_all_but_top() {
        let mut logits = vec![0.5, 2.0, -1.0, 2.0, 1.0];
        keep_top_candidates(&mut logits, 2);
        // Ties keep the lower index: both 2.0s rank above the rest, so
        // indices 1 and 3 survive.
        assert_eq!(logits[1], 2.0);
        assert_eq!(logits[3], 2.0);
        for i in [0, 2, 4] {
            assert_eq!(logits[i], f64::NEG_INFINITY);
        }

        let mut short = vec![1.0, 2.0];
        keep_top_candidates(&mut short, 5);
        assert_eq!(short, vec![1.0, 2.0]);
    }

    #[test]
    fn selftest_checks_pass() {
        assert_eq!(cmd_selftest().unwrap(), 0);
    }

    #[test]
    fn eval_table_renders_absent_rows() {
        use crate::eval::ApKind;
        let rows = vec![
            ApResult {
                kind: ApKind::Ap3D,
                bucket: "easy",
                iou_threshold: 0.7,
                ap: Some(98.76543),
            },
            ApResult {
                kind: ApKind::ApBev,
                bucket: "hard",
                iou_threshold: 0.7,
                ap: None,
            },
        ];
        let table = render_eval_table(&rows);
        assert!(table.contains("AP3D    easy      0.70  98.7654"));
        assert!(table.contains("APBEV   hard      0.70  absent"));
    }

    #[test]
    fn frame_discovery_sorts_and_requires_labels() {
        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("label_2");
        fs::create_dir_all(&labels).unwrap();
        for id in ["000002", "000000", "000001"] {
            fs::write(labels.join(format!("{id}.txt")), "").unwrap();
        }
        fs::write(labels.join("notes.md"), "").unwrap();
        let ids = discover_frames(dir.path()).unwrap();
        assert_eq!(ids, vec!["000000", "000001", "000002"]);

        let empty = tempfile::tempdir().unwrap();
        fs::create_dir_all(empty.path().join("label_2")).unwrap();
        assert!(discover_frames(empty.path()).is_err());
    }
}
