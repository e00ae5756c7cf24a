//! Parallel-beam forward projector, its exact adjoint, and the
//! filtered-back-projection baseline.
//!
//! Rays use Joseph's method: march along the dominant axis and linearly
//! interpolate between the two neighboring voxel centers at each plane
//! crossing. The backprojector scatters through the identical sample
//! enumeration, so the pair is an exact matrix transpose, which the
//! majorization solver relies on.
//!
//! The rotation axis is aligned with the detector row direction:
//! detector row `r` sees volume slice `z = r`, so each slice is an
//! independent 2D problem. The detector coordinate of a point `(x, y)`
//! at view angle `phi` is `s = x cos(phi) + y sin(phi)`.

use ndarray::{Array2, Array3, Axis};
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::model::{HyperSinogram, HyperVolume, SinogramKind, ViewGeometry};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum ProjectorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// FBP apodization choices; Ram-Lak is the plain ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbpFilter {
    RamLak,
    Hamming,
}

/// Implicit tomographic system matrix `A` of size `M x N`
/// (`M = views * rows * cols`, `N = nx * ny * nz`); never materialized.
#[derive(Debug, Clone)]
pub struct SystemModel {
    geometry: ViewGeometry,
    angles_rad: Vec<f64>,
    supersample: usize,
}

impl SystemModel {
    pub fn new(geometry: ViewGeometry) -> Result<Self, ProjectorError> {
        geometry
            .validate()
            .map_err(|e| ProjectorError::InvalidArgument(e.to_string()))?;
        if geometry.detector_rows != geometry.nz {
            return Err(ProjectorError::DimensionMismatch(format!(
                "detector_rows ({}) must equal nz ({}) for the row-aligned rotation axis",
                geometry.detector_rows, geometry.nz
            )));
        }
        let angles_rad = geometry.angles_deg.iter().map(|a| a.to_radians()).collect();
        Ok(Self { geometry, angles_rad, supersample: 1 })
    }

    /// Average `s` sub-rays per detector pixel instead of one centered ray.
    pub fn with_supersample(mut self, s: usize) -> Self {
        self.supersample = s.max(1);
        self
    }

    pub fn geometry(&self) -> &ViewGeometry {
        &self.geometry
    }

    pub fn n_measurements(&self) -> usize {
        let (v, r, c) = self.geometry.sino_dim();
        v * r * c
    }

    pub fn n_voxels(&self) -> usize {
        let (z, y, x) = self.geometry.volume_dim();
        z * y * x
    }

    fn check_volume(&self, vol: &Array3<f64>) -> Result<(), ProjectorError> {
        if vol.dim() != self.geometry.volume_dim() {
            return Err(ProjectorError::DimensionMismatch(format!(
                "volume shape {:?} does not match geometry {:?}",
                vol.dim(),
                self.geometry.volume_dim()
            )));
        }
        Ok(())
    }

    fn check_sino(&self, sino: &Array3<f64>) -> Result<(), ProjectorError> {
        if sino.dim() != self.geometry.sino_dim() {
            return Err(ProjectorError::DimensionMismatch(format!(
                "sinogram shape {:?} does not match geometry {:?}",
                sino.dim(),
                self.geometry.sino_dim()
            )));
        }
        Ok(())
    }
}

/// Enumerate Joseph samples for the ray with detector coordinate `s` at
/// angle `(cos_p, sin_p)`, calling `visit(iy, ix, weight)` for each
/// touched voxel of the slice. `weight` already includes the path-length
/// factor, in micrometers.
#[inline]
fn for_each_ray_sample(
    nx: usize,
    ny: usize,
    voxel_pitch: f64,
    cos_p: f64,
    sin_p: f64,
    s: f64,
    mut visit: impl FnMut(usize, usize, f64),
) {
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    if sin_p.abs() <= cos_p.abs() {
        // March y-planes, interpolate along x.
        let step = voxel_pitch / cos_p.abs();
        for iy in 0..ny {
            let y = (iy as f64 - cy) * voxel_pitch;
            let x = (s - y * sin_p) / cos_p;
            let xi = x / voxel_pitch + cx;
            let i0 = xi.floor();
            let w = xi - i0;
            let i0 = i0 as isize;
            if i0 >= 0 && (i0 as usize) < nx {
                visit(iy, i0 as usize, (1.0 - w) * step);
            }
            let i1 = i0 + 1;
            if i1 >= 0 && (i1 as usize) < nx {
                visit(iy, i1 as usize, w * step);
            }
        }
    } else {
        // March x-planes, interpolate along y.
        let step = voxel_pitch / sin_p.abs();
        for ix in 0..nx {
            let x = (ix as f64 - cx) * voxel_pitch;
            let y = (s - x * cos_p) / sin_p;
            let yi = y / voxel_pitch + cy;
            let j0 = yi.floor();
            let w = yi - j0;
            let j0 = j0 as isize;
            if j0 >= 0 && (j0 as usize) < ny {
                visit(j0 as usize, ix, (1.0 - w) * step);
            }
            let j1 = j0 + 1;
            if j1 >= 0 && (j1 as usize) < ny {
                visit(j1 as usize, ix, w * step);
            }
        }
    }
}

/// Sparse Joseph samples of every ray of one view, shared by all
/// z slices: `(voxel offset within a slice, weight)` runs per detector
/// column. Weights fold in the path length and supersample averaging.
struct ViewTable {
    samples: Vec<(u32, f64)>,
    col_start: Vec<u32>,
}

fn build_view_table(model: &SystemModel, view: usize) -> ViewTable {
    let (_, ny, nx) = model.geometry.volume_dim();
    let cols = model.geometry.detector_cols;
    let v_pitch = model.geometry.voxel_pitch_um;
    let d_pitch = model.geometry.pixel_pitch_um;
    let (cos_p, sin_p) = (model.angles_rad[view].cos(), model.angles_rad[view].sin());
    let ss = model.supersample;
    let inv_ss = 1.0 / ss as f64;
    let center = (cols as f64 - 1.0) / 2.0;
    let mut samples = Vec::with_capacity(cols * 2 * ny.max(nx));
    let mut col_start = Vec::with_capacity(cols + 1);
    col_start.push(0u32);
    for t in 0..cols {
        for m in 0..ss {
            let sub = (m as f64 + 0.5) * inv_ss - 0.5;
            let s = (t as f64 - center + sub) * d_pitch;
            for_each_ray_sample(nx, ny, v_pitch, cos_p, sin_p, s, |iy, ix, w| {
                samples.push(((iy * nx + ix) as u32, w * inv_ss));
            });
        }
        col_start.push(samples.len() as u32);
    }
    ViewTable { samples, col_start }
}

/// Project one view of the volume; output shape `(rows, cols)`.
pub fn project_view(vol: &Array3<f64>, model: &SystemModel, view: usize) -> Array2<f64> {
    let table = build_view_table(model, view);
    if vol.is_standard_layout() {
        project_view_with_table(vol, model, &table)
    } else {
        let owned = vol.as_standard_layout().into_owned();
        project_view_with_table(&owned, model, &table)
    }
}

fn project_view_with_table(vol: &Array3<f64>, model: &SystemModel, table: &ViewTable) -> Array2<f64> {
    let (nz, ny, nx) = model.geometry.volume_dim();
    let cols = model.geometry.detector_cols;
    let slice_len = ny * nx;
    let flat = vol.as_slice().expect("standard layout");
    let mut out = Array2::zeros((nz, cols));
    {
        let out_flat = out.as_slice_mut().expect("standard layout");
        let mut acc = vec![0.0f64; nz];
        for t in 0..cols {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let lo = table.col_start[t] as usize;
            let hi = table.col_start[t + 1] as usize;
            for &(off, w) in &table.samples[lo..hi] {
                let mut idx = off as usize;
                for a in acc.iter_mut() {
                    *a += w * flat[idx];
                    idx += slice_len;
                }
            }
            for (z, &a) in acc.iter().enumerate() {
                out_flat[z * cols + t] = a;
            }
        }
    }
    out
}

/// Adjoint scatter of one z slab, accumulating views in order.
fn splat_slab_with_tables(
    slab: &mut [f64],
    sino: &Array3<f64>,
    model: &SystemModel,
    tables: &[ViewTable],
    z: usize,
) {
    let cols = model.geometry.detector_cols;
    for (view, table) in tables.iter().enumerate() {
        for t in 0..cols {
            let g = sino[[view, z, t]];
            if g == 0.0 {
                continue;
            }
            let lo = table.col_start[t] as usize;
            let hi = table.col_start[t + 1] as usize;
            for &(off, w) in &table.samples[lo..hi] {
                slab[off as usize] += w * g;
            }
        }
    }
}

fn build_all_tables(model: &SystemModel) -> Vec<ViewTable> {
    let views = model.geometry.n_views();
    #[cfg(feature = "parallel")]
    {
        (0..views).into_par_iter().map(|v| build_view_table(model, v)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..views).map(|v| build_view_table(model, v)).collect()
    }
}

/// Line integrals of the volume along every ray; output
/// `(view, row, col)` in units of (1/um * um), i.e. dimensionless.
pub fn forward_project(vol: &Array3<f64>, model: &SystemModel) -> Result<Array3<f64>, ProjectorError> {
    #[cfg(feature = "parallel")]
    {
        forward_project_par(vol, model)
    }
    #[cfg(not(feature = "parallel"))]
    {
        forward_project_seq(vol, model)
    }
}

/// Sequential fallback of [`forward_project`].
pub fn forward_project_seq(
    vol: &Array3<f64>,
    model: &SystemModel,
) -> Result<Array3<f64>, ProjectorError> {
    model.check_volume(vol)?;
    let owned;
    let vol = if vol.is_standard_layout() {
        vol
    } else {
        owned = vol.as_standard_layout().into_owned();
        &owned
    };
    let (v, r, c) = model.geometry.sino_dim();
    let mut out = Array3::zeros((v, r, c));
    for view in 0..v {
        let table = build_view_table(model, view);
        out.index_axis_mut(Axis(0), view)
            .assign(&project_view_with_table(vol, model, &table));
    }
    Ok(out)
}

/// Rayon-parallel [`forward_project`]; views are independent so the
/// result is identical for any worker count.
#[cfg(feature = "parallel")]
pub fn forward_project_par(
    vol: &Array3<f64>,
    model: &SystemModel,
) -> Result<Array3<f64>, ProjectorError> {
    model.check_volume(vol)?;
    let owned;
    let vol = if vol.is_standard_layout() {
        vol
    } else {
        owned = vol.as_standard_layout().into_owned();
        &owned
    };
    let (v, r, c) = model.geometry.sino_dim();
    let views: Vec<Array2<f64>> = (0..v)
        .into_par_iter()
        .map(|view| {
            let table = build_view_table(model, view);
            project_view_with_table(vol, model, &table)
        })
        .collect();
    let mut out = Array3::zeros((v, r, c));
    for (view, img) in views.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), view).assign(&img);
    }
    Ok(out)
}

/// Exact adjoint of [`forward_project`] for the same kernel.
pub fn back_project(sino: &Array3<f64>, model: &SystemModel) -> Result<Array3<f64>, ProjectorError> {
    #[cfg(feature = "parallel")]
    {
        back_project_par(sino, model)
    }
    #[cfg(not(feature = "parallel"))]
    {
        back_project_seq(sino, model)
    }
}

/// Sequential fallback of [`back_project`]. Accumulates views in order
/// within each z slab, so it is bitwise identical to the parallel path.
pub fn back_project_seq(
    sino: &Array3<f64>,
    model: &SystemModel,
) -> Result<Array3<f64>, ProjectorError> {
    model.check_sino(sino)?;
    let tables = build_all_tables(model);
    let (nz, ny, nx) = model.geometry.volume_dim();
    let mut out = Array3::zeros((nz, ny, nx));
    {
        let flat = out.as_slice_mut().expect("standard layout");
        for z in 0..nz {
            splat_slab_with_tables(&mut flat[z * ny * nx..(z + 1) * ny * nx], sino, model, &tables, z);
        }
    }
    Ok(out)
}

/// Rayon-parallel [`back_project`]; workers own disjoint z slabs, so
/// accumulation order is fixed and results are worker-count independent.
#[cfg(feature = "parallel")]
pub fn back_project_par(
    sino: &Array3<f64>,
    model: &SystemModel,
) -> Result<Array3<f64>, ProjectorError> {
    model.check_sino(sino)?;
    let tables = build_all_tables(model);
    let (nz, ny, nx) = model.geometry.volume_dim();
    let slabs: Vec<Vec<f64>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut slab = vec![0.0f64; ny * nx];
            splat_slab_with_tables(&mut slab, sino, model, &tables, z);
            slab
        })
        .collect();
    let mut out = Array3::zeros((nz, ny, nx));
    {
        let flat = out.as_slice_mut().expect("standard layout");
        for (z, slab) in slabs.into_iter().enumerate() {
            flat[z * ny * nx..(z + 1) * ny * nx].copy_from_slice(&slab);
        }
    }
    Ok(out)
}

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p *= 2;
    }
    p
}

/// Ramp-filter one channel of projections in the frequency domain,
/// zero-padded to the next power of two >= `2 * cols`.
///
/// The frequency response is the DFT of the band-limited spatial ramp
/// kernel rather than a raw `|omega|`, which keeps the DC term of the
/// truncated filter correct and avoids interior cupping.
fn filter_projections(sino: &Array3<f64>, model: &SystemModel, filter: FbpFilter) -> Array3<f64> {
    let (v, r, c) = sino.dim();
    let pitch = model.geometry.pixel_pitch_um;
    let n = next_pow2(2 * c);

    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    // Spatial kernel: h[0] = 1/(4 d^2), h[k] = -1/(pi k d)^2 for odd k,
    // zero otherwise; circularly wrapped, then taken to the frequency
    // domain. Includes the convolution step size d.
    let ramp: Vec<f64> = {
        let d = pitch;
        let mut h = vec![Complex::new(0.0, 0.0); n];
        h[0] = Complex::new(1.0 / (4.0 * d * d), 0.0);
        for k in (1..=n / 2).step_by(2) {
            let val = -1.0 / (std::f64::consts::PI * k as f64 * d).powi(2);
            h[k] = Complex::new(val, 0.0);
            h[n - k] = Complex::new(val, 0.0);
        }
        fwd.process(&mut h);
        h.iter()
            .enumerate()
            .map(|(m, hv)| {
                let response = hv.re.max(0.0) * d;
                match filter {
                    FbpFilter::RamLak => response,
                    FbpFilter::Hamming => {
                        let signed =
                            if m <= n / 2 { m as isize } else { m as isize - n as isize };
                        let frac = signed.unsigned_abs() as f64 / (n as f64 / 2.0);
                        response * (0.54 + 0.46 * (std::f64::consts::PI * frac).cos())
                    }
                }
            })
            .collect()
    };

    let filter_row = |row: &mut [f64], buf: &mut Vec<Complex<f64>>| {
        buf.clear();
        buf.extend(row.iter().map(|&x| Complex::new(x, 0.0)));
        buf.resize(n, Complex::new(0.0, 0.0));
        fwd.process(buf);
        for (b, &w) in buf.iter_mut().zip(&ramp) {
            *b *= w;
        }
        inv.process(buf);
        for (dst, src) in row.iter_mut().zip(buf.iter()) {
            *dst = src.re / n as f64;
        }
    };

    let mut out = sino.clone();
    #[cfg(feature = "parallel")]
    {
        let rows: Vec<Vec<f64>> = (0..v * r)
            .into_par_iter()
            .map(|idx| {
                let (view, row) = (idx / r, idx % r);
                let mut data: Vec<f64> = (0..c).map(|t| sino[[view, row, t]]).collect();
                let mut buf = Vec::with_capacity(n);
                filter_row(&mut data, &mut buf);
                data
            })
            .collect();
        for (idx, data) in rows.into_iter().enumerate() {
            let (view, row) = (idx / r, idx % r);
            for (t, val) in data.into_iter().enumerate() {
                out[[view, row, t]] = val;
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut buf = Vec::with_capacity(n);
        for view in 0..v {
            for row in 0..r {
                let mut data: Vec<f64> = (0..c).map(|t| sino[[view, row, t]]).collect();
                filter_row(&mut data, &mut buf);
                for (t, val) in data.into_iter().enumerate() {
                    out[[view, row, t]] = val;
                }
            }
        }
    }
    out
}

/// Pixel-driven backprojection of filtered projections with angular
/// weight `pi / n_views`.
fn backproject_filtered(q: &Array3<f64>, model: &SystemModel) -> Array3<f64> {
    let (nz, ny, nx) = model.geometry.volume_dim();
    let cols = model.geometry.detector_cols;
    let d_pitch = model.geometry.pixel_pitch_um;
    let v_pitch = model.geometry.voxel_pitch_um;
    let n_views = model.geometry.n_views();
    let weight = std::f64::consts::PI / n_views as f64;
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let ct = (cols as f64 - 1.0) / 2.0;

    let slice_for_z = |z: usize| {
        let mut slice = Array2::zeros((ny, nx));
        for (view, angle) in model.angles_rad.iter().enumerate() {
            let (cos_p, sin_p) = (angle.cos(), angle.sin());
            for iy in 0..ny {
                let y = (iy as f64 - cy) * v_pitch;
                for ix in 0..nx {
                    let x = (ix as f64 - cx) * v_pitch;
                    let s = x * cos_p + y * sin_p;
                    let ti = s / d_pitch + ct;
                    let t0 = ti.floor();
                    let w = ti - t0;
                    let t0 = t0 as isize;
                    let mut val = 0.0;
                    if t0 >= 0 && (t0 as usize) < cols {
                        val += (1.0 - w) * q[[view, z, t0 as usize]];
                    }
                    let t1 = t0 + 1;
                    if t1 >= 0 && (t1 as usize) < cols {
                        val += w * q[[view, z, t1 as usize]];
                    }
                    slice[[iy, ix]] += val;
                }
            }
        }
        slice.mapv_into(|v| v * weight)
    };

    let mut out = Array3::zeros((nz, ny, nx));
    #[cfg(feature = "parallel")]
    {
        let slabs: Vec<Array2<f64>> = (0..nz).into_par_iter().map(slice_for_z).collect();
        for (z, slab) in slabs.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), z).assign(&slab);
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        for z in 0..nz {
            out.index_axis_mut(Axis(0), z).assign(&slice_for_z(z));
        }
    }
    out
}

/// Ramp-filtered backprojection of one projection channel.
pub fn fbp_reconstruct(
    sino: &Array3<f64>,
    model: &SystemModel,
    filter: FbpFilter,
) -> Result<Array3<f64>, ProjectorError> {
    model.check_sino(sino)?;
    if model.geometry.n_views() < 2 {
        return Err(ProjectorError::InvalidArgument(
            "FBP needs at least 2 views".into(),
        ));
    }
    let filtered = filter_projections(sino, model, filter);
    Ok(backproject_filtered(&filtered, model))
}

/// FBP over every wavelength channel of a projection sinogram.
/// Passing counts instead of projections is an error.
pub fn fbp_reconstruct_all(
    sino: &HyperSinogram,
    model: &SystemModel,
    filter: FbpFilter,
) -> Result<HyperVolume, ProjectorError> {
    if sino.kind != SinogramKind::Projection {
        return Err(ProjectorError::InvalidArgument(
            "FBP expects projections; convert counts first".into(),
        ));
    }
    let k = sino.n_channels();
    let (nz, ny, nx) = model.geometry.volume_dim();
    let recon_channel = |ki: usize| -> Result<Array3<f64>, ProjectorError> {
        fbp_reconstruct(&sino.channel_f64(ki), model, filter)
    };
    let mut out = ndarray::Array4::zeros((k, nz, ny, nx));
    #[cfg(feature = "parallel")]
    {
        let channels: Result<Vec<Array3<f64>>, ProjectorError> =
            (0..k).into_par_iter().map(recon_channel).collect();
        for (ki, vol) in channels?.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), ki).assign(&vol.mapv(|v| v as f32));
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        for ki in 0..k {
            let vol = recon_channel(ki)?;
            out.index_axis_mut(Axis(0), ki).assign(&vol.mapv(|v| v as f32));
        }
    }
    HyperVolume::new(out).map_err(|e| ProjectorError::InvalidArgument(e.to_string()))
}

/// Rasterize a centered cylinder (axis along z) of the given radius and
/// value, anti-aliased by 4x4 subsampled voxel coverage; handy for
/// tests and the simulator.
pub fn cylinder_volume(
    dims: (usize, usize, usize),
    voxel_pitch: f64,
    radius_um: f64,
    value: f64,
) -> Array3<f64> {
    let (nz, ny, nx) = dims;
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let sub = 4usize;
    let r2 = radius_um * radius_um;
    let mut vol = Array3::zeros(dims);
    for iy in 0..ny {
        for ix in 0..nx {
            let mut covered = 0usize;
            for sy in 0..sub {
                for sx in 0..sub {
                    let x = (ix as f64 - cx + (sx as f64 + 0.5) / sub as f64 - 0.5) * voxel_pitch;
                    let y = (iy as f64 - cy + (sy as f64 + 0.5) / sub as f64 - 0.5) * voxel_pitch;
                    if x * x + y * y <= r2 {
                        covered += 1;
                    }
                }
            }
            if covered > 0 {
                let v = value * covered as f64 / (sub * sub) as f64;
                for z in 0..nz {
                    vol[[z, iy, ix]] = v;
                }
            }
        }
    }
    vol
}

#[allow(unused)]
fn assert_send_sync<T: Send + Sync>() {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ViewGeometry;

    fn model(views: usize, cols: usize, nx: usize, ny: usize, nz: usize) -> SystemModel {
        let geom = ViewGeometry::half_turn(views, nz, cols, 50.0, 50.0, nx, ny, nz).unwrap();
        SystemModel::new(geom).unwrap()
    }

    #[test]
    fn zero_volume_projects_to_zero() {
        let m = model(8, 16, 16, 16, 2);
        let sino = forward_project(&Array3::zeros((2, 16, 16)), &m).unwrap();
        assert!(sino.iter().all(|&v| v == 0.0));
        let vol = back_project(&Array3::zeros((8, 2, 16)), &m).unwrap();
        assert!(vol.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_voxel_axis_aligned_ray_gives_voxel_pitch() {
        // Single voxel at the exact center; the phi = 0 ray through the
        // central detector column crosses one 50 um voxel.
        let m = model(1, 9, 9, 9, 1);
        let mut vol = Array3::zeros((1, 9, 9));
        vol[[0, 4, 4]] = 1.0;
        let sino = forward_project(&vol, &m).unwrap();
        assert!((sino[[0, 0, 4]] - 50.0).abs() < 1e-9, "got {}", sino[[0, 0, 4]]);
        // All other columns see nothing at phi = 0.
        for t in 0..9 {
            if t != 4 {
                assert!(sino[[0, 0, t]].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_cylinder_central_ray_matches_mu_d() {
        let dims = (2, 64, 64);
        let m = model(4, 64, 64, 64, 2);
        let mu = 3.0e-4;
        let radius = 1200.0;
        let vol = cylinder_volume(dims, 50.0, radius, mu);
        let sino = forward_project(&vol, &m).unwrap();
        let expected = mu * 2.0 * radius;
        for view in 0..4 {
            // Central columns: detector has even size, take both middle rays.
            for t in [31usize, 32] {
                let got = sino[[view, 0, t]];
                let rel = (got - expected).abs() / expected;
                assert!(rel < 0.01, "view {view} col {t}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = model(4, 16, 16, 16, 2);
        assert!(forward_project(&Array3::zeros((1, 16, 16)), &m).is_err());
        assert!(back_project(&Array3::zeros((4, 1, 16)), &m).is_err());
        let geom = ViewGeometry::half_turn(4, 3, 16, 50.0, 50.0, 16, 16, 2).unwrap();
        assert!(SystemModel::new(geom).is_err(), "rows != nz must fail");
    }

    #[test]
    fn fbp_rejects_single_view() {
        let m = model(4, 16, 16, 16, 1);
        let geom1 = ViewGeometry {
            angles_deg: vec![0.0],
            ..m.geometry().clone()
        };
        let m1 = SystemModel::new(geom1).unwrap();
        assert!(fbp_reconstruct(&Array3::zeros((1, 1, 16)), &m1, FbpFilter::RamLak).is_err());
    }

    #[test]
    fn fbp_zero_sinogram_gives_zero_volume() {
        let m = model(16, 16, 16, 16, 1);
        let vol = fbp_reconstruct(&Array3::zeros((16, 1, 16)), &m, FbpFilter::RamLak).unwrap();
        assert!(vol.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn rotation_consistency_mirrors_rows() {
        // Centrosymmetric phantom: projecting at phi and phi + 180
        // yields mirror-identical detector rows.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (ny, nx) = (20, 20);
        let mut slice = Array2::zeros((ny, nx));
        for iy in 0..ny {
            for ix in 0..nx {
                let v: f64 = rng.gen();
                slice[[iy, ix]] += v;
                slice[[ny - 1 - iy, nx - 1 - ix]] += v;
            }
        }
        for phi in [13.0f64, 47.0, 90.0, 151.0] {
            let geom = ViewGeometry {
                angles_deg: vec![phi, phi + 180.0],
                detector_rows: 1,
                detector_cols: 24,
                pixel_pitch_um: 50.0,
                voxel_pitch_um: 50.0,
                nx,
                ny,
                nz: 1,
            };
            let m = SystemModel::new(geom).unwrap();
            let mut vol = Array3::zeros((1, ny, nx));
            vol.index_axis_mut(Axis(0), 0).assign(&slice);
            let sino = forward_project(&vol, &m).unwrap();
            for t in 0..24 {
                let a = sino[[0, 0, t]];
                let b = sino[[1, 0, 23 - t]];
                assert!(
                    (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1.0),
                    "phi={phi} t={t}: {a} vs {b}"
                );
            }
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = model(7, 12, 10, 11, 3);
        let vol = Array3::from_shape_fn((3, 11, 10), |_| rng.gen::<f64>());
        let sino = Array3::from_shape_fn((7, 3, 12), |_| rng.gen::<f64>());
        assert_eq!(
            forward_project_seq(&vol, &m).unwrap(),
            forward_project_par(&vol, &m).unwrap()
        );
        assert_eq!(
            back_project_seq(&sino, &m).unwrap(),
            back_project_par(&sino, &m).unwrap()
        );
    }
}
