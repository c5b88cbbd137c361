//! LiDAR teacher path and feature distillation.
//!
//! The teacher voxelizes the point cloud on a fine grid, flattens the
//! per-voxel statistics into a BEV stack, average-pools that stack down to
//! the stereo BEV resolution, and runs the same cascade fusion as the
//! student to produce comparable geometry features. The distillation loss
//! is the squared student/teacher difference restricted to cells that are
//! both inside a ground-truth footprint and actually observed by LiDAR,
//! normalized by the active cell count.
//!
//! The fine grid is dense in name only: occupied voxels live in a sorted
//! map keyed (y, x, z) so flattening can materialize one (channel, y) slab
//! at a time instead of the full volume.

use std::collections::BTreeMap;

use crate::bev::{fuse_bev, GeometryFeatures, VoxelGrid};
use crate::error::{Error, Result};
use crate::kitti::label::Box3D;
use crate::ops::{avg_pool2, conv2d};
use crate::tensor::{ConvKernel, Tensor};

/// Per-voxel feature channels: point count then mean x, y, z, reflectance.
pub const VOXEL_CHANNELS: usize = 5;

/// Running statistics for one occupied voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelStats {
    pub count: usize,
    sums: [f64; 4],
}

impl VoxelStats {
    pub fn mean(&self) -> [f32; 4] {
        let n = self.count as f64;
        [
            (self.sums[0] / n) as f32,
            (self.sums[1] / n) as f32,
            (self.sums[2] / n) as f32,
            (self.sums[3] / n) as f32,
        ]
    }

    fn channel(&self, c: usize) -> f32 {
        if c == 0 {
            self.count as f32
        } else {
            self.mean()[c - 1]
        }
    }
}

/// Sparse voxelized point cloud over a grid.
#[derive(Debug, Clone)]
pub struct VoxelVolume {
    pub grid: VoxelGrid,
    /// Occupied voxels keyed (iy, ix, iz) for slab-ordered iteration.
    pub cells: BTreeMap<(usize, usize, usize), VoxelStats>,
    /// Points outside the grid ranges (including upper boundaries).
    pub dropped: usize,
    pub total_points: usize,
}

impl VoxelVolume {
    pub fn occupied(&self) -> usize {
        self.cells.len()
    }

    pub fn counted_points(&self) -> usize {
        self.cells.values().map(|s| s.count).sum()
    }
}

/// Bins camera-frame points (x, y, z, reflectance) into grid voxels.
/// Points at or past any upper range bound are dropped.
pub fn voxelize(points: &[[f64; 4]], grid: &VoxelGrid) -> VoxelVolume {
    let mut cells: BTreeMap<(usize, usize, usize), VoxelStats> = BTreeMap::new();
    let mut dropped = 0usize;
    for p in points {
        match grid.cell_of(p[0], p[1], p[2]) {
            Some((ix, iy, iz)) => {
                let stats = cells.entry((iy, ix, iz)).or_insert(VoxelStats {
                    count: 0,
                    sums: [0.0; 4],
                });
                stats.count += 1;
                for k in 0..4 {
                    stats.sums[k] += p[k];
                }
            }
            None => dropped += 1,
        }
    }
    VoxelVolume {
        grid: grid.clone(),
        cells,
        dropped,
        total_points: points.len(),
    }
}

/// Seeded 3x3-style kernels for the three per-scale teacher convolutions;
/// seeds are `seed + 1 .. seed + 3`.
pub fn seeded_scale_kernels(
    seed: u64,
    in_channels: usize,
    out_channels: usize,
    kernel_size: usize,
) -> [ConvKernel; 3] {
    [
        ConvKernel::seeded(seed + 1, out_channels, in_channels, kernel_size, kernel_size),
        ConvKernel::seeded(seed + 2, out_channels, in_channels, kernel_size, kernel_size),
        ConvKernel::seeded(seed + 3, out_channels, in_channels, kernel_size, kernel_size),
    ]
}

/// Produces teacher geometry features on the stereo BEV grid.
///
/// The voxel statistics flatten to a `[VOXEL_CHANNELS * Y_l, X_l, Z_l]`
/// stack which is average-pooled (repeated 2x) down to the stereo BEV
/// dims; the LiDAR grid must be a power-of-two multiple of the stereo grid
/// in both BEV axes. Each scale convolves the pooled stack with its own
/// kernel, and the three maps fuse through the same cascade as the
/// student.
pub fn teacher_features(
    volume: &VoxelVolume,
    stereo: &VoxelGrid,
    scale_kernels: &[ConvKernel; 3],
    fuse_kernels: &[ConvKernel; 3],
) -> Result<GeometryFeatures> {
    let (xl, yl, zl) = volume.grid.dims();
    let (xs, _, zs) = stereo.dims();
    if xl % xs != 0 || zl % zs != 0 || xl / xs != zl / zs {
        return Err(Error::Config(format!(
            "LiDAR BEV ({xl}, {zl}) does not pool onto stereo BEV ({xs}, {zs})"
        )));
    }
    let factor = xl / xs;
    if !factor.is_power_of_two() {
        return Err(Error::Config(format!(
            "pooling factor {factor} must be a power of two"
        )));
    }
    let halvings = factor.trailing_zeros();

    let mut pooled = Tensor::zeros(vec![VOXEL_CHANNELS * yl, xs, zs])?;
    let mut plane = vec![0.0f32; xl * zl];
    for iy in 0..yl {
        let slab: Vec<(&(usize, usize, usize), &VoxelStats)> = volume
            .cells
            .range((iy, 0, 0)..(iy + 1, 0, 0))
            .collect();
        for c in 0..VOXEL_CHANNELS {
            plane.iter_mut().for_each(|v| *v = 0.0);
            for (&(_, ix, iz), stats) in &slab {
                plane[ix * zl + iz] = stats.channel(c);
            }
            let mut t = Tensor::new(vec![1, xl, zl], plane.clone())?;
            for _ in 0..halvings {
                t = avg_pool2(&t)?;
            }
            let base = ((c * yl + iy) * xs) * zs;
            pooled.data_mut()[base..base + xs * zs].copy_from_slice(t.data());
        }
    }

    let maps = [
        conv2d(&pooled, &scale_kernels[0])?,
        conv2d(&pooled, &scale_kernels[1])?,
        conv2d(&pooled, &scale_kernels[2])?,
    ];
    fuse_bev(&maps, fuse_kernels)
}

/// Binary mask over the BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMask {
    nx: usize,
    nz: usize,
    cells: Vec<bool>,
}

impl BevMask {
    pub fn empty(grid: &VoxelGrid) -> BevMask {
        let (nx, _, nz) = grid.dims();
        BevMask {
            nx,
            nz,
            cells: vec![false; nx * nz],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.nz)
    }

    pub fn get(&self, ix: usize, iz: usize) -> bool {
        self.cells[ix * self.nz + iz]
    }

    pub fn set(&mut self, ix: usize, iz: usize, on: bool) {
        self.cells[ix * self.nz + iz] = on;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Cell-wise conjunction.
    pub fn and(&self, other: &BevMask) -> Result<BevMask> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "mask dims differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(BevMask {
            nx: self.nx,
            nz: self.nz,
            cells: self
                .cells
                .iter()
                .zip(&other.cells)
                .map(|(a, b)| a & b)
                .collect(),
        })
    }

    /// Exports as a `[X, Z]` tensor of exact zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .cells
            .iter()
            .map(|&c| if c { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.nx, self.nz], data).expect("mask dims are valid")
    }
}

/// Marks cells whose BEV center lies inside at least one ground-truth
/// footprint (rotated rectangle, boundary inclusive).
pub fn build_fg_mask(boxes: &[Box3D], grid: &VoxelGrid) -> BevMask {
    let mut mask = BevMask::empty(grid);
    let (nx, _, nz) = grid.dims();
    for b in boxes {
        let (s, c) = b.yaw.sin_cos();
        for ix in 0..nx {
            for iz in 0..nz {
                if mask.get(ix, iz) {
                    continue;
                }
                let (x, z) = grid.bev_center(ix, iz);
                let (dx, dz) = (x - b.x, z - b.z);
                let u = dx * c - dz * s;
                let v = dx * s + dz * c;
                if u.abs() <= b.l / 2.0 && v.abs() <= b.w / 2.0 {
                    mask.set(ix, iz, true);
                }
            }
        }
    }
    mask
}

/// Marks cells whose (x, z) footprint holds at least one point with y
/// inside the grid's vertical range.
pub fn build_sparse_mask(points: &[[f64; 4]], grid: &VoxelGrid) -> BevMask {
    let mut mask = BevMask::empty(grid);
    for p in points {
        if let Some((ix, _, iz)) = grid.cell_of(p[0], p[1], p[2]) {
            mask.set(ix, iz, true);
        }
    }
    mask
}

/// The projection applied to student features before comparison.
pub enum DistillG {
    /// Pass-through; requires matching channel counts.
    Identity,
    /// One seeded 1x1 convolution per scale.
    PerScale([ConvKernel; 3]),
}

impl DistillG {
    pub fn apply(&self, scale: usize, features: &Tensor) -> Result<Tensor> {
        match self {
            DistillG::Identity => Ok(features.clone()),
            DistillG::PerScale(ks) => conv2d(features, &ks[scale]),
        }
    }
}

/// Seeded 1x1 kernels mapping student channels onto teacher channels,
/// seeds `seed + 1 .. seed + 3`.
pub fn seeded_g_kernels(seed: u64, student_c: usize, teacher_c: usize) -> [ConvKernel; 3] {
    [
        ConvKernel::seeded(seed + 1, teacher_c, student_c, 1, 1),
        ConvKernel::seeded(seed + 2, teacher_c, student_c, 1, 1),
        ConvKernel::seeded(seed + 3, teacher_c, student_c, 1, 1),
    ]
}

/// What the normalizer N counts. The joint mask is scale-independent, so
/// a per-scale N equals the shared one; the open choice is whether N
/// counts active cells or active cells times channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistillNorm {
    #[default]
    Cells,
    Elements,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillLoss {
    pub per_scale: [f64; 3],
    pub total: f64,
    /// Cells where both masks are set (before the >= 1 clamp).
    pub active_cells: usize,
}

/// Masked squared student/teacher difference, Eq-style:
/// sum over scales of (1/N) * sum of [fg * sp * (g(student) - teacher)]^2.
/// Accumulation runs in f64 over ascending (channel, x, z) per scale.
pub fn distill_loss(
    student: &GeometryFeatures,
    teacher: &GeometryFeatures,
    g: &DistillG,
    fg: &BevMask,
    sp: &BevMask,
    norm: DistillNorm,
) -> Result<DistillLoss> {
    let joint = fg.and(sp)?;
    let active = joint.count();
    let (nx, nz) = joint.dims();
    let mut per_scale = [0.0f64; 3];
    for i in 0..3 {
        let gs = g.apply(i, &student.scales[i])?;
        let t = &teacher.scales[i];
        if gs.dims() != t.dims() {
            return Err(Error::shape(format!(
                "scale {}: projected student {:?} vs teacher {:?}",
                i + 1,
                gs.dims(),
                t.dims()
            )));
        }
        if gs.dims()[1] != nx || gs.dims()[2] != nz {
            return Err(Error::shape(format!(
                "scale {}: features {:?} vs mask ({nx}, {nz})",
                i + 1,
                gs.dims()
            )));
        }
        let c = gs.dims()[0];
        let n = match norm {
            DistillNorm::Cells => active,
            DistillNorm::Elements => active * c,
        }
        .max(1) as f64;
        let mut acc = 0.0f64;
        for ch in 0..c {
            for ix in 0..nx {
                for iz in 0..nz {
                    if joint.get(ix, iz) {
                        let d = gs.get(&[ch, ix, iz]) as f64 - t.get(&[ch, ix, iz]) as f64;
                        acc += d * d;
                    }
                }
            }
        }
        per_scale[i] = acc / n;
    }
    Ok(DistillLoss {
        per_scale,
        total: per_scale.iter().sum(),
        active_cells: active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::seeded_fuse_kernels;
    use crate::tensor::SplitMix64;

    #[test]
    fn single_point_occupies_one_voxel() {
        let grid = VoxelGrid::kitti_lidar();
        let vol = voxelize(&[[0.0, 1.0, 30.8, 0.5]], &grid);
        assert_eq!(vol.occupied(), 1);
        assert_eq!(vol.dropped, 0);
        let (_, stats) = vol.cells.iter().next().unwrap();
        assert_eq!(stats.count, 1);
        assert_eq!(stats.mean(), [0.0, 1.0, 30.8, 0.5]);
    }

    #[test]
    fn upper_boundary_points_drop() {
        let grid = VoxelGrid::kitti_lidar();
        let vol = voxelize(
            &[
                [30.0, 1.0, 30.0, 0.0],
                [0.0, 3.0, 30.0, 0.0],
                [0.0, 1.0, 59.6, 0.0],
                [-30.0, -1.0, 2.0, 0.0],
            ],
            &grid,
        );
        assert_eq!(vol.dropped, 3);
        assert_eq!(vol.occupied(), 1, "only the lower-corner point lands");
    }

    #[test]
    fn binning_matches_brute_force() {
        let grid = VoxelGrid::kitti_lidar();
        let mut rng = SplitMix64::new(0xB1A5);
        let points: Vec<[f64; 4]> = (0..10_000)
            .map(|_| {
                [
                    (rng.next_f32() as f64) * 64.0 - 32.0,
                    (rng.next_f32() as f64) * 5.0 - 2.0,
                    (rng.next_f32() as f64) * 62.0,
                    rng.next_f32() as f64,
                ]
            })
            .collect();
        let vol = voxelize(&points, &grid);
        assert_eq!(vol.counted_points() + vol.dropped, points.len());

        // Brute force with its own floor arithmetic.
        let mut want: BTreeMap<(usize, usize, usize), (usize, [f64; 4])> = BTreeMap::new();
        for p in &points {
            let (x, y, z) = (p[0], p[1], p[2]);
            if !(-30.0..30.0).contains(&x)
                || !(-1.0..3.0).contains(&y)
                || !(2.0..59.6).contains(&z)
            {
                continue;
            }
            let key = (
                ((y + 1.0) / 0.1).floor() as usize,
                ((x + 30.0) / 0.05).floor() as usize,
                ((z - 2.0) / 0.05).floor() as usize,
            );
            let e = want.entry(key).or_insert((0, [0.0; 4]));
            e.0 += 1;
            for k in 0..4 {
                e.1[k] += p[k];
            }
        }
        assert_eq!(vol.cells.len(), want.len());
        for (key, (count, sums)) in &want {
            let stats = vol.cells.get(key).unwrap_or_else(|| {
                panic!("voxel {key:?} missing");
            });
            assert_eq!(stats.count, *count);
            let mean = stats.mean();
            for k in 0..4 {
                let want_mean = sums[k] / *count as f64;
                // Means are stored in f32, so compare relative to scale.
                let tol = 1e-6 * want_mean.abs().max(1.0);
                assert!((mean[k] as f64 - want_mean).abs() <= tol);
            }
        }
    }

    /// Coarse stereo/fine LiDAR grid pair with pooling factor 4.
    fn tiny_pair() -> (VoxelGrid, VoxelGrid) {
        let stereo =
            VoxelGrid::new((0.0, 4.0), (-1.0, 1.0), (1.0, 7.0), (1.0, 1.0, 1.0)).unwrap();
        let lidar =
            VoxelGrid::new((0.0, 4.0), (-1.0, 1.0), (1.0, 7.0), (0.25, 0.5, 0.25)).unwrap();
        (stereo, lidar)
    }

    #[test]
    fn empty_cloud_gives_zero_teacher_features() {
        let (stereo, lidar) = tiny_pair();
        let vol = voxelize(&[], &lidar);
        let (_, yl, _) = lidar.dims();
        let scale = seeded_scale_kernels(40, VOXEL_CHANNELS * yl, 3, 3);
        let fuse = seeded_fuse_kernels(50, 3, 2, 3);
        let gf = teacher_features(&vol, &stereo, &scale, &fuse).unwrap();
        let (xs, _, zs) = stereo.dims();
        for s in &gf.scales {
            assert_eq!(s.dims(), &[2, xs, zs]);
            assert!(s.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn teacher_dims_under_standard_grids() {
        let stereo = VoxelGrid::kitti_stereo();
        let lidar = VoxelGrid::kitti_lidar();
        let (_, yl, _) = lidar.dims();
        // A handful of points so the volume is non-trivial but sparse.
        let points: Vec<[f64; 4]> = (0..200)
            .map(|i| {
                let t = i as f64 / 200.0;
                [t * 40.0 - 20.0, t * 3.0 - 1.0, 2.5 + t * 50.0, t]
            })
            .collect();
        let vol = voxelize(&points, &lidar);
        let scale = seeded_scale_kernels(40, VOXEL_CHANNELS * yl, 3, 3);
        let fuse = seeded_fuse_kernels(50, 3, 2, 3);
        let gf = teacher_features(&vol, &stereo, &scale, &fuse).unwrap();
        for s in &gf.scales {
            assert_eq!(s.dims(), &[2, 150, 144]);
        }
        assert!(gf.scales[0].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn teacher_rejects_incompatible_grids() {
        let stereo =
            VoxelGrid::new((0.0, 4.0), (-1.0, 1.0), (1.0, 7.0), (1.0, 1.0, 1.0)).unwrap();
        // Factor 3 in x: not a power of two.
        let lidar = VoxelGrid::new(
            (0.0, 4.0),
            (-1.0, 1.0),
            (1.0, 7.0),
            (1.0 / 3.0, 0.5, 0.25),
        )
        .unwrap();
        let vol = voxelize(&[], &lidar);
        let (_, yl, _) = lidar.dims();
        let scale = seeded_scale_kernels(40, VOXEL_CHANNELS * yl, 3, 3);
        let fuse = seeded_fuse_kernels(50, 3, 2, 3);
        assert!(matches!(
            teacher_features(&vol, &stereo, &scale, &fuse),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn teacher_pooling_averages_counts() {
        // One point per fine cell in one 4x4 pooling block of the bottom
        // slab: the pooled count channel must average to exactly 1 there.
        let (stereo, lidar) = tiny_pair();
        let mut points = Vec::new();
        for i in 0..4 {
            for k in 0..4 {
                points.push([
                    0.125 + 0.25 * i as f64,
                    -0.75,
                    1.125 + 0.25 * k as f64,
                    0.5,
                ]);
            }
        }
        let vol = voxelize(&points, &lidar);
        assert_eq!(vol.occupied(), 16);
        // Identity-style check through the pooled stack: use a 1x1 "scale"
        // kernel that selects the count channel of the bottom slab.
        let (_, yl, _) = lidar.dims();
        let mut sel = vec![0.0f32; VOXEL_CHANNELS * yl];
        sel[0] = 1.0; // channel (c=0, iy=0): flattened index 0 * yl + 0
        let k = ConvKernel::new(
            Tensor::new(vec![1, VOXEL_CHANNELS * yl, 1, 1], sel).unwrap(),
            vec![0.0],
        )
        .unwrap();
        let kernels = [k.clone(), k.clone(), k];
        let id1 = ConvKernel::identity(1);
        let mut fuse_w = vec![0.0f32; 2];
        fuse_w[0] = 1.0;
        let pass = ConvKernel::new(Tensor::new(vec![1, 2, 1, 1], fuse_w).unwrap(), vec![0.0])
            .unwrap();
        let fuse = [id1, pass.clone(), pass];
        let gf = teacher_features(&vol, &stereo, &kernels, &fuse).unwrap();
        // The 16 occupied fine cells (count 1) sit over stereo cell (0, 0).
        assert_eq!(gf.scales[0].get(&[0, 0, 0]), 1.0);
        assert_eq!(gf.scales[0].get(&[0, 1, 1]), 0.0);
    }

    #[test]
    fn fg_mask_hundred_cells() {
        let grid = VoxelGrid::kitti_stereo();
        // 4m x 4m footprint centered on the grid node (0, 30): ten cell
        // centers per axis fall strictly inside.
        let b = Box3D::new(0.0, 1.0, 30.0, 1.5, 4.0, 4.0, 0.0).unwrap();
        let mask = build_fg_mask(&[b.clone()], &grid);
        assert_eq!(mask.count(), 100);

        // Oracle: direct point-in-rectangle loop.
        let (nx, _, nz) = grid.dims();
        for ix in 0..nx {
            for iz in 0..nz {
                let (x, z) = grid.bev_center(ix, iz);
                let want = (x - b.x).abs() <= 2.0 && (z - b.z).abs() <= 2.0;
                assert_eq!(mask.get(ix, iz), want, "cell ({ix}, {iz})");
            }
        }
    }

    #[test]
    fn fg_mask_degenerate_inputs() {
        let grid = VoxelGrid::kitti_stereo();
        assert_eq!(build_fg_mask(&[], &grid).count(), 0);
        let far = Box3D::new(500.0, 1.0, 500.0, 1.5, 4.0, 4.0, 0.3).unwrap();
        assert_eq!(build_fg_mask(&[far], &grid).count(), 0);
    }

    #[test]
    fn fg_mask_yaw_symmetries() {
        let grid = VoxelGrid::kitti_stereo();
        let b = Box3D::new(2.0, 1.0, 20.0, 1.5, 1.6, 3.9, 0.7).unwrap();
        let b_wrapped =
            Box3D::new(2.0, 1.0, 20.0, 1.5, 1.6, 3.9, 0.7 + 2.0 * std::f64::consts::PI)
                .unwrap();
        assert_eq!(
            build_fg_mask(&[b.clone()], &grid),
            build_fg_mask(&[b_wrapped], &grid)
        );

        // Quarter turn swaps the footprint extents (box centered on a grid
        // node keeps the comparison grid-exact).
        let a = Box3D::new(0.0, 1.0, 30.0, 1.5, 2.0, 4.0, 0.0).unwrap();
        let a_quarter =
            Box3D::new(0.0, 1.0, 30.0, 1.5, 4.0, 2.0, std::f64::consts::FRAC_PI_2).unwrap();
        assert_eq!(
            build_fg_mask(&[a], &grid),
            build_fg_mask(&[a_quarter], &grid)
        );
    }

    #[test]
    fn sparse_mask_rules() {
        let grid = VoxelGrid::kitti_stereo();
        let mask = build_sparse_mask(&[[0.1, 0.0, 30.1, 0.9]], &grid);
        assert_eq!(mask.count(), 1);
        let (ix, _, iz) = grid.cell_of(0.1, 0.0, 30.1).unwrap();
        assert!(mask.get(ix, iz));

        // Vertical range rule: y = 5 is outside [-1, 3).
        let high = build_sparse_mask(&[[0.1, 5.0, 30.1, 0.9]], &grid);
        assert_eq!(high.count(), 0);
    }

    #[test]
    fn sparse_mask_matches_brute_force() {
        let grid = VoxelGrid::kitti_stereo();
        let mut rng = SplitMix64::new(0x5BA5E);
        let points: Vec<[f64; 4]> = (0..5000)
            .map(|_| {
                [
                    (rng.next_f32() as f64) * 64.0 - 32.0,
                    (rng.next_f32() as f64) * 6.0 - 3.0,
                    (rng.next_f32() as f64) * 62.0,
                    rng.next_f32() as f64,
                ]
            })
            .collect();
        let mask = build_sparse_mask(&points, &grid);
        let (nx, _, nz) = grid.dims();
        let mut want = vec![false; nx * nz];
        for p in &points {
            if p[0] >= -30.0
                && p[0] < 30.0
                && p[1] >= -1.0
                && p[1] < 3.0
                && p[2] >= 2.0
                && p[2] < 59.6
            {
                let ix = ((p[0] + 30.0) / 0.4).floor() as usize;
                let iz = ((p[2] - 2.0) / 0.4).floor() as usize;
                want[ix * nz + iz] = true;
            }
        }
        for ix in 0..nx {
            for iz in 0..nz {
                assert_eq!(mask.get(ix, iz), want[ix * nz + iz]);
            }
        }
    }

    fn full_mask(grid: &VoxelGrid) -> BevMask {
        let mut m = BevMask::empty(grid);
        let (nx, _, nz) = grid.dims();
        for ix in 0..nx {
            for iz in 0..nz {
                m.set(ix, iz, true);
            }
        }
        m
    }

    fn tiny_features(seed: u64, c: usize, nx: usize, nz: usize) -> GeometryFeatures {
        GeometryFeatures::new([
            Tensor::random(seed, vec![c, nx, nz]).unwrap(),
            Tensor::random(seed + 1, vec![c, nx, nz]).unwrap(),
            Tensor::random(seed + 2, vec![c, nx, nz]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn identical_features_zero_loss() {
        let grid = VoxelGrid::new((0.0, 4.0), (-1.0, 1.0), (1.0, 7.0), (1.0, 1.0, 1.0)).unwrap();
        let f = tiny_features(7, 3, 4, 6);
        let mask = full_mask(&grid);
        let loss = distill_loss(
            &f,
            &f,
            &DistillG::Identity,
            &mask,
            &mask,
            DistillNorm::Cells,
        )
        .unwrap();
        assert_eq!(loss.total, 0.0);
        assert_eq!(loss.per_scale, [0.0; 3]);
        assert_eq!(loss.active_cells, 24);
    }

    #[test]
    fn single_cell_difference_contributes_squared() {
        let grid = VoxelGrid::new((0.0, 4.0), (-1.0, 1.0), (1.0, 7.0), (1.0, 1.0, 1.0)).unwrap();
        let student = GeometryFeatures::new([
            Tensor::zeros(vec![1, 4, 6]).unwrap(),
            Tensor::zeros(vec![1, 4, 6]).unwrap(),
            Tensor::zeros(vec![1, 4, 6]).unwrap(),
        ])
        .unwrap();
        let mut t1 = Tensor::zeros(vec![1, 4, 6]).unwrap();
        t1.set(&[0, 2, 3], 2.0).unwrap();
        let teacher = GeometryFeatures::new([
            t1,
            Tensor::zeros(vec![1, 4, 6]).unwrap(),
            Tensor::zeros(vec![1, 4, 6]).unwrap(),
        ])
        .unwrap();
        // Only the differing cell is active: N = 1, loss = (0 - 2)^2 = 4.
        let mut fg = BevMask::empty(&grid);
        fg.set(2, 3, true);
        let sp = full_mask(&grid);
        let loss = distill_loss(
            &student,
            &teacher,
            &DistillG::Identity,
            &fg,
            &sp,
            DistillNorm::Cells,
        )
        .unwrap();
        assert_eq!(loss.active_cells, 1);
        assert_eq!(loss.per_scale, [4.0, 0.0, 0.0]);
        assert_eq!(loss.total, 4.0);
    }

    #[test]
    fn loss_scales_quadratically() {
        let grid = VoxelGrid::new((0.0, 4.0), (-1.0, 1.0), (1.0, 7.0), (1.0, 1.0, 1.0)).unwrap();
        let student = tiny_features(21, 3, 4, 6);
        let teacher = tiny_features(22, 3, 4, 6);
        let mut fg = BevMask::empty(&grid);
        for (ix, iz) in [(0, 0), (1, 3), (3, 5), (2, 2)] {
            fg.set(ix, iz, true);
        }
        let sp = full_mask(&grid);
        let base = distill_loss(
            &student,
            &teacher,
            &DistillG::Identity,
            &fg,
            &sp,
            DistillNorm::Cells,
        )
        .unwrap();
        // Scale every difference by alpha = 3 by moving the student three
        // times as far from the teacher.
        let alpha = 3.0f32;
        let scaled_scales = std::array::from_fn(|i| {
            let s = &student.scales[i];
            let t = &teacher.scales[i];
            let data: Vec<f32> = s
                .data()
                .iter()
                .zip(t.data())
                .map(|(sv, tv)| tv + alpha * (sv - tv))
                .collect();
            Tensor::new(s.dims().to_vec(), data).unwrap()
        });
        let scaled = GeometryFeatures::new(scaled_scales).unwrap();
        let boosted = distill_loss(
            &scaled,
            &teacher,
            &DistillG::Identity,
            &fg,
            &sp,
            DistillNorm::Cells,
        )
        .unwrap();
        let ratio = boosted.total / base.total;
        assert!((ratio - 9.0).abs() < 1e-6, "ratio {ratio}");
    }

    #[test]
    fn masked_out_cells_do_not_matter() {
        let grid = VoxelGrid::new((0.0, 4.0), (-1.0, 1.0), (1.0, 7.0), (1.0, 1.0, 1.0)).unwrap();
        let student = tiny_features(31, 2, 4, 6);
        let teacher = tiny_features(32, 2, 4, 6);
        let mut fg = BevMask::empty(&grid);
        fg.set(1, 1, true);
        fg.set(2, 4, true);
        let sp = full_mask(&grid);
        let base = distill_loss(
            &student,
            &teacher,
            &DistillG::Identity,
            &fg,
            &sp,
            DistillNorm::Cells,
        )
        .unwrap();
        // Vandalize every inactive cell of the student.
        let vandal_scales = std::array::from_fn(|i| {
            let s = &student.scales[i];
            let mut data = s.data().to_vec();
            let (c, nx, nz) = (s.dims()[0], s.dims()[1], s.dims()[2]);
            for ch in 0..c {
                for ix in 0..nx {
                    for iz in 0..nz {
                        if !(fg.get(ix, iz)) {
                            data[(ch * nx + ix) * nz + iz] = 99.0;
                        }
                    }
                }
            }
            Tensor::new(s.dims().to_vec(), data).unwrap()
        });
        let vandalized = GeometryFeatures::new(vandal_scales).unwrap();
        let after = distill_loss(
            &vandalized,
            &teacher,
            &DistillG::Identity,
            &fg,
            &sp,
            DistillNorm::Cells,
        )
        .unwrap();
        assert_eq!(base.total, after.total);
        assert_eq!(base.per_scale, after.per_scale);
    }

    #[test]
    fn element_norm_divides_by_channels() {
        let grid = VoxelGrid::new((0.0, 4.0), (-1.0, 1.0), (1.0, 7.0), (1.0, 1.0, 1.0)).unwrap();
        let student = tiny_features(41, 4, 4, 6);
        let teacher = tiny_features(42, 4, 4, 6);
        let mask = full_mask(&grid);
        let cells = distill_loss(
            &student,
            &teacher,
            &DistillG::Identity,
            &mask,
            &mask,
            DistillNorm::Cells,
        )
        .unwrap();
        let elems = distill_loss(
            &student,
            &teacher,
            &DistillG::Identity,
            &mask,
            &mask,
            DistillNorm::Elements,
        )
        .unwrap();
        for i in 0..3 {
            assert!((elems.per_scale[i] * 4.0 - cells.per_scale[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn g_kernels_project_channels() {
        let grid = VoxelGrid::new((0.0, 4.0), (-1.0, 1.0), (1.0, 7.0), (1.0, 1.0, 1.0)).unwrap();
        let student = tiny_features(51, 5, 4, 6);
        let teacher = tiny_features(52, 3, 4, 6);
        let mask = full_mask(&grid);
        let g = DistillG::PerScale(seeded_g_kernels(60, 5, 3));
        let loss = distill_loss(&student, &teacher, &g, &mask, &mask, DistillNorm::Cells)
            .unwrap();
        assert!(loss.total > 0.0);
        // Identity would be a channel mismatch.
        assert!(distill_loss(
            &student,
            &teacher,
            &DistillG::Identity,
            &mask,
            &mask,
            DistillNorm::Cells
        )
        .is_err());
    }
}
