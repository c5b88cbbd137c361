//! Metric voxel grid, camera-frustum resampling, and bird's-eye-view
//! feature fusion.
//!
//! A stereo volume indexes camera frustum space as (disparity, row,
//! column). Frustum sampling walks a regular voxel grid in the camera
//! frame, projects each voxel center through the left camera, converts its
//! depth to a disparity index via `focal * baseline / (2 * z * stride)`
//! (the correlation pairs columns 2d apart, so metric disparity is twice
//! the index), and trilinearly interpolates the volume there. Sample points
//! outside `[0, D) x [0, H) x [0, W)` produce exactly zero; points inside
//! use zero padding for any interpolation corner past the upper edge.
//! Interpolation is nested lerps, innermost over columns, then rows, then
//! disparity, which keeps node-aligned samples exact.

use crate::error::{Error, Result};
use crate::kitti::calib::CameraRig;
use crate::ops::{concat_channels, conv2d};
use crate::tensor::{ConvKernel, Tensor};

/// Axis-aligned detection region with per-axis voxel sizes. Extents must
/// divide into whole voxels within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub voxel: (f64, f64, f64),
    nx: usize,
    ny: usize,
    nz: usize,
}

impl VoxelGrid {
    pub fn new(
        x_range: (f64, f64),
        y_range: (f64, f64),
        z_range: (f64, f64),
        voxel: (f64, f64, f64),
    ) -> Result<VoxelGrid> {
        let count = |range: (f64, f64), step: f64, axis: &str| -> Result<usize> {
            if !(range.0.is_finite() && range.1.is_finite() && step.is_finite()) {
                return Err(Error::Config(format!("{axis} range must be finite")));
            }
            if step <= 0.0 {
                return Err(Error::Config(format!("{axis} voxel size must be positive")));
            }
            if range.1 <= range.0 {
                return Err(Error::Config(format!(
                    "{axis} range [{}, {}] is empty",
                    range.0, range.1
                )));
            }
            let n = (range.1 - range.0) / step;
            let rounded = n.round();
            if (n - rounded).abs() > 1e-9 || rounded < 1.0 {
                return Err(Error::Config(format!(
                    "{axis} extent {} is not a whole number of {step} voxels",
                    range.1 - range.0
                )));
            }
            Ok(rounded as usize)
        };
        let nx = count(x_range, voxel.0, "x")?;
        let ny = count(y_range, voxel.1, "y")?;
        let nz = count(z_range, voxel.2, "z")?;
        Ok(VoxelGrid {
            x_range,
            y_range,
            z_range,
            voxel,
            nx,
            ny,
            nz,
        })
    }

    /// Stereo detection grid: x and z in [-30, 30] x [2, 59.6] meters,
    /// y in [-1, 3], voxels (0.4, 0.8, 0.4) -> dims (150, 5, 144).
    pub fn kitti_stereo() -> VoxelGrid {
        VoxelGrid::new((-30.0, 30.0), (-1.0, 3.0), (2.0, 59.6), (0.4, 0.8, 0.4))
            .expect("stereo grid constants")
    }

    /// LiDAR teacher grid: same ranges, voxels (0.05, 0.1, 0.05)
    /// -> dims (1200, 40, 1152).
    pub fn kitti_lidar() -> VoxelGrid {
        VoxelGrid::new((-30.0, 30.0), (-1.0, 3.0), (2.0, 59.6), (0.05, 0.1, 0.05))
            .expect("lidar grid constants")
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    /// Geometric center of cell (ix, iy, iz).
    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            self.x_range.0 + (ix as f64 + 0.5) * self.voxel.0,
            self.y_range.0 + (iy as f64 + 0.5) * self.voxel.1,
            self.z_range.0 + (iz as f64 + 0.5) * self.voxel.2,
        ]
    }

    /// Cell containing a point; points at or past the upper bound of any
    /// axis are outside.
    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize, usize)> {
        let bin = |v: f64, range: (f64, f64), step: f64, n: usize| -> Option<usize> {
            if v < range.0 || v >= range.1 {
                return None;
            }
            let i = ((v - range.0) / step).floor() as usize;
            Some(i.min(n - 1))
        };
        Some((
            bin(x, self.x_range, self.voxel.0, self.nx)?,
            bin(y, self.y_range, self.voxel.1, self.ny)?,
            bin(z, self.z_range, self.voxel.2, self.nz)?,
        ))
    }

    /// BEV cell center in the (x, z) plane.
    pub fn bev_center(&self, ix: usize, iz: usize) -> (f64, f64) {
        (
            self.x_range.0 + (ix as f64 + 0.5) * self.voxel.0,
            self.z_range.0 + (iz as f64 + 0.5) * self.voxel.2,
        )
    }

    pub fn y_mid(&self) -> f64 {
        (self.y_range.0 + self.y_range.1) / 2.0
    }
}

/// Fused BEV features, one `[C', X, Z]` tensor per scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryFeatures {
    pub scales: [Tensor; 3],
}

impl GeometryFeatures {
    pub fn new(scales: [Tensor; 3]) -> Result<GeometryFeatures> {
        let dims = scales[0].dims().to_vec();
        if dims.len() != 3 {
            return Err(Error::shape(format!(
                "geometry features must be [C', X, Z], got {dims:?}"
            )));
        }
        for s in &scales[1..] {
            if s.dims() != dims {
                return Err(Error::shape(format!(
                    "geometry feature scales differ: {:?} vs {:?}",
                    dims,
                    s.dims()
                )));
            }
        }
        Ok(GeometryFeatures { scales })
    }

    pub fn channels(&self) -> usize {
        self.scales[0].dims()[0]
    }
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

struct Trilinear {
    i0: [isize; 3],
    frac: [f32; 3],
}

impl Trilinear {
    /// Prepares interpolation state for a sample point in (d, v, u) order,
    /// or None when the point itself is outside the half-open volume.
    fn at(coords: [f64; 3], dims: [usize; 3]) -> Option<Trilinear> {
        for a in 0..3 {
            if !(coords[a] >= 0.0 && coords[a] < dims[a] as f64) {
                return None;
            }
        }
        let mut i0 = [0isize; 3];
        let mut frac = [0f32; 3];
        for a in 0..3 {
            let f = coords[a].floor();
            i0[a] = f as isize;
            frac[a] = (coords[a] - f) as f32;
        }
        Some(Trilinear { i0, frac })
    }

    /// Interpolates one channel plane, reading out-of-range corners as 0.
    fn sample(&self, plane: &[f32], dims: [usize; 3]) -> f32 {
        let fetch = |d: isize, v: isize, u: isize| -> f32 {
            if d < 0
                || v < 0
                || u < 0
                || d >= dims[0] as isize
                || v >= dims[1] as isize
                || u >= dims[2] as isize
            {
                return 0.0;
            }
            plane[(d as usize * dims[1] + v as usize) * dims[2] + u as usize]
        };
        let [d0, v0, u0] = self.i0;
        let [fd, fv, fu] = self.frac;
        let c00 = lerp(fetch(d0, v0, u0), fetch(d0, v0, u0 + 1), fu);
        let c01 = lerp(fetch(d0, v0 + 1, u0), fetch(d0, v0 + 1, u0 + 1), fu);
        let c10 = lerp(fetch(d0 + 1, v0, u0), fetch(d0 + 1, v0, u0 + 1), fu);
        let c11 = lerp(fetch(d0 + 1, v0 + 1, u0), fetch(d0 + 1, v0 + 1, u0 + 1), fu);
        lerp(lerp(c00, c01, fv), lerp(c10, c11, fv), fd)
    }
}

/// Resamples a stereo volume `[C, D, H_i, W_i]` onto the voxel grid,
/// producing `[C, Y, X, Z]`.
pub fn frustum_sample(
    f_sv: &Tensor,
    rig: &CameraRig,
    grid: &VoxelGrid,
    stride: usize,
) -> Result<Tensor> {
    if f_sv.rank() != 4 {
        return Err(Error::shape(format!(
            "stereo volume must be [C, D, H, W], got {:?}",
            f_sv.dims()
        )));
    }
    if grid.z_range.0 <= 0.0 {
        return Err(Error::Config(format!(
            "z range starts at {}; projection needs z > 0",
            grid.z_range.0
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let (c, d, h, w) = (
        f_sv.dims()[0],
        f_sv.dims()[1],
        f_sv.dims()[2],
        f_sv.dims()[3],
    );
    let (nx, ny, nz) = grid.dims();
    let fb = rig.focal() * rig.baseline();
    let plane = h * w * d;
    let mut out = vec![0.0f32; c * ny * nx * nz];
    for iy in 0..ny {
        for ix in 0..nx {
            for iz in 0..nz {
                let p = grid.center(ix, iy, iz);
                let ([u, v], depth) = rig.project_left(p);
                if depth <= 0.0 {
                    continue;
                }
                let coords = [
                    fb / (2.0 * depth * stride as f64),
                    v / stride as f64,
                    u / stride as f64,
                ];
                let Some(tri) = Trilinear::at(coords, [d, h, w]) else {
                    continue;
                };
                for ch in 0..c {
                    let val = tri.sample(&f_sv.data()[ch * plane..(ch + 1) * plane], [d, h, w]);
                    out[((ch * ny + iy) * nx + ix) * nz + iz] = val;
                }
            }
        }
    }
    Tensor::new(vec![c, ny, nx, nz], out)
}

/// Relabels `[C, Y, X, Z]` as `[C*Y, X, Z]`; channel `c*Y + y` is plane
/// (c, y). Row-major layout makes this a pure relabel.
pub fn flatten_bev(f_gv: &Tensor) -> Result<Tensor> {
    let dims = f_gv.dims();
    if dims.len() != 4 {
        return Err(Error::shape(format!(
            "flatten_bev input must be [C, Y, X, Z], got {dims:?}"
        )));
    }
    f_gv.reshaped(vec![dims[0] * dims[1], dims[2], dims[3]])
}

/// Inverse of [`flatten_bev`].
pub fn unflatten_bev(f_bev: &Tensor, c: usize, y: usize) -> Result<Tensor> {
    let dims = f_bev.dims();
    if dims.len() != 3 || dims[0] != c * y {
        return Err(Error::shape(format!(
            "cannot unflatten {dims:?} into [{c}, {y}, X, Z]"
        )));
    }
    f_bev.reshaped(vec![c, y, dims[1], dims[2]])
}

/// Seeded kernels for BEV fusion: scale 1 maps the flattened channels to
/// C', scales 2 and 3 map C' plus the flattened channels to C'. Seeds are
/// `seed + 1 .. seed + 3`.
pub fn seeded_fuse_kernels(
    seed: u64,
    bev_channels: usize,
    c_prime: usize,
    kernel_size: usize,
) -> [ConvKernel; 3] {
    [
        ConvKernel::seeded(seed + 1, c_prime, bev_channels, kernel_size, kernel_size),
        ConvKernel::seeded(
            seed + 2,
            c_prime,
            c_prime + bev_channels,
            kernel_size,
            kernel_size,
        ),
        ConvKernel::seeded(
            seed + 3,
            c_prime,
            c_prime + bev_channels,
            kernel_size,
            kernel_size,
        ),
    ]
}

/// Cascade fusion over the three BEV maps: the first output convolves the
/// first map, each later output convolves the previous output concatenated
/// with its own map.
pub fn fuse_bev(f_bev: &[Tensor; 3], kernels: &[ConvKernel; 3]) -> Result<GeometryFeatures> {
    let dims = f_bev[0].dims();
    for b in &f_bev[1..] {
        if b.dims() != dims {
            return Err(Error::shape(format!(
                "BEV maps must share dims, got {:?} vs {:?}",
                dims,
                b.dims()
            )));
        }
    }
    let gf1 = conv2d(&f_bev[0], &kernels[0])?;
    let gf2 = conv2d(&concat_channels(&gf1, &f_bev[1])?, &kernels[1])?;
    let gf3 = conv2d(&concat_channels(&gf2, &f_bev[2])?, &kernels[2])?;
    GeometryFeatures::new([gf1, gf2, gf3])
}

/// Samples image-plane semantic features at each BEV column center,
/// producing `[C, X, Z]`. The column center sits at the y midpoint of the
/// grid; bilinear sampling follows the frustum rules (outside the image
/// plane is exactly zero).
pub fn map_semantic(
    f_l3: &Tensor,
    rig: &CameraRig,
    grid: &VoxelGrid,
    stride: usize,
) -> Result<Tensor> {
    if f_l3.rank() != 3 {
        return Err(Error::shape(format!(
            "semantic features must be [C, H, W], got {:?}",
            f_l3.dims()
        )));
    }
    if grid.z_range.0 <= 0.0 {
        return Err(Error::Config(format!(
            "z range starts at {}; projection needs z > 0",
            grid.z_range.0
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let (c, h, w) = (f_l3.dims()[0], f_l3.dims()[1], f_l3.dims()[2]);
    let (nx, _, nz) = grid.dims();
    let y_mid = grid.y_mid();
    let plane = h * w;
    let mut out = vec![0.0f32; c * nx * nz];
    for ix in 0..nx {
        for iz in 0..nz {
            let (x, z) = grid.bev_center(ix, iz);
            let ([u, v], depth) = rig.project_left([x, y_mid, z]);
            if depth <= 0.0 {
                continue;
            }
            // Bilinear is trilinear with a degenerate leading axis.
            let coords = [0.0, v / stride as f64, u / stride as f64];
            let Some(tri) = Trilinear::at(coords, [1, h, w]) else {
                continue;
            };
            for ch in 0..c {
                let val = tri.sample(&f_l3.data()[ch * plane..(ch + 1) * plane], [1, h, w]);
                out[(ch * nx + ix) * nz + iz] = val;
            }
        }
    }
    Tensor::new(vec![c, nx, nz], out)
}
