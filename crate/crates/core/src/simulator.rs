//! Physics-inspired measurement simulator with ground truth.
//!
//! Grain phantoms are powder cylinders with embedded single-crystal
//! spheres. A powder voxel attenuates independently of rotation angle;
//! a crystal voxel additionally loses transmission near the Bragg
//! condition `n lambda = 2 d sin(theta)`, modeled as Gaussian bumps
//! along the sinusoidal locus the condition traces in the
//! (angle, wavelength) plane.
//!
//! Measured counts follow `Poisson(I0 * exp(-[A f]))` with one RNG
//! stream per pixel, so simulation is reproducible for any worker count.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{
    BraggMapStack, HyperSinogram, HyperVolume, LabelVolume, SinogramKind, ViewGeometry,
    WavelengthGrid,
};
use crate::projector::{forward_project, SystemModel};
use crate::rng::{pixel_rng, poisson_inverse_cdf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("wavelength {lambda} outside grid range [{min}, {max}]")]
    WavelengthOutOfRange { lambda: f64, min: f64, max: f64 },
    #[error("theta {0} degrees outside (0, 90)")]
    ThetaOutOfRange(f64),
    #[error("could not place {placed} of {requested} grains after {attempts} attempts")]
    PackingFailed {
        requested: usize,
        placed: usize,
        attempts: usize,
    },
    #[error("projector: {0}")]
    Projector(#[from] crate::projector::ProjectorError),
    #[error("model: {0}")]
    Model(#[from] crate::model::ModelError),
}

/// Bragg condition solved for wavelength: `2 d sin(theta) / n`.
pub fn bragg_wavelength(d_spacing: f64, theta_deg: f64, order: u32) -> Result<f64, SimulatorError> {
    if !(d_spacing > 0.0) {
        return Err(SimulatorError::InvalidArgument(format!(
            "d spacing must be > 0, got {d_spacing}"
        )));
    }
    if order < 1 {
        return Err(SimulatorError::InvalidArgument("order must be >= 1".into()));
    }
    if !(theta_deg > 0.0 && theta_deg < 90.0) {
        return Err(SimulatorError::ThetaOutOfRange(theta_deg));
    }
    Ok(2.0 * d_spacing * theta_deg.to_radians().sin() / order as f64)
}

/// One reflection of a single-crystal domain.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReflectionTrace {
    /// Crystallographic spacing, Angstrom.
    pub d_spacing: f64,
    /// Angular offset of the reflection, degrees.
    pub phase_deg: f64,
    pub order: u32,
    /// Peak extra attenuation on the locus, 1/um.
    pub amplitude: f64,
    pub angular_width_deg: f64,
    /// Wavelength width, Angstrom.
    pub wavelength_width: f64,
}

impl ReflectionTrace {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if !(self.d_spacing > 0.0) || !(self.amplitude > 0.0) {
            return Err(SimulatorError::InvalidArgument(
                "trace d spacing and amplitude must be > 0".into(),
            ));
        }
        if !(self.angular_width_deg > 0.0) || !(self.wavelength_width > 0.0) {
            return Err(SimulatorError::InvalidArgument("trace widths must be > 0".into()));
        }
        if self.order < 1 {
            return Err(SimulatorError::InvalidArgument("trace order must be >= 1".into()));
        }
        Ok(())
    }

    /// Bragg wavelength of this trace at rotation angle `phi`. The
    /// incidence angle is `(phi + phase) mod 180` reflected into
    /// [0, 90], which produces the periodic sinusoidal locus.
    pub fn locus_wavelength(&self, phi_deg: f64) -> f64 {
        let psi = (phi_deg + self.phase_deg).rem_euclid(180.0);
        let theta = psi.min(180.0 - psi);
        2.0 * self.d_spacing * theta.to_radians().sin() / self.order as f64
    }

    /// Extra attenuation at `(lambda, phi)`: the Gaussian
    /// `amplitude * exp(-(dphi/w_phi)^2 - (dlambda/w_lambda)^2)` where
    /// `(dphi, dlambda)` is the offset to the nearest point of the
    /// locus. The nearest point is found by scanning the locus around
    /// `phi`; the scan includes the on-axis sample `dphi = 0`, so a
    /// point exactly on the locus yields the full amplitude.
    pub fn contribution(&self, lambda: f64, phi_deg: f64) -> f64 {
        let w_phi = self.angular_width_deg;
        let w_lam = self.wavelength_width;
        let half_span = 6.0 * w_phi;
        let steps = 96i32;
        let mut best = f64::NEG_INFINITY;
        for i in -steps..=steps {
            let dphi = half_span * f64::from(i) / f64::from(steps);
            let dlam = (lambda - self.locus_wavelength(phi_deg + dphi)) / w_lam;
            let expo = -(dphi / w_phi) * (dphi / w_phi) - dlam * dlam;
            if expo > best {
                best = expo;
            }
        }
        self.amplitude * best.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaterialKind {
    Powder,
    Crystal,
}

/// Attenuation model of one material: a baseline spectrum tabulated on
/// the wavelength grid plus, for crystals, a set of reflection traces.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Material {
    pub kind: MaterialKind,
    /// Baseline `mu(lambda)` in 1/um, one entry per grid wavelength.
    pub baseline: Vec<f64>,
    pub traces: Vec<ReflectionTrace>,
}

impl Material {
    pub fn powder(baseline: Vec<f64>) -> Result<Self, SimulatorError> {
        let m = Self { kind: MaterialKind::Powder, baseline, traces: Vec::new() };
        m.validate()?;
        Ok(m)
    }

    pub fn crystal(baseline: Vec<f64>, traces: Vec<ReflectionTrace>) -> Result<Self, SimulatorError> {
        let m = Self { kind: MaterialKind::Crystal, baseline, traces };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.baseline.is_empty() || self.baseline.iter().any(|&b| !(b > 0.0)) {
            return Err(SimulatorError::InvalidArgument(
                "baseline spectrum must be non-empty and positive".into(),
            ));
        }
        match self.kind {
            MaterialKind::Powder => {
                if !self.traces.is_empty() {
                    return Err(SimulatorError::InvalidArgument(
                        "powder materials cannot carry reflection traces".into(),
                    ));
                }
            }
            MaterialKind::Crystal => {
                if self.traces.is_empty() {
                    return Err(SimulatorError::InvalidArgument(
                        "crystal materials need at least one reflection trace".into(),
                    ));
                }
            }
        }
        for t in &self.traces {
            t.validate()?;
        }
        Ok(())
    }

    /// Baseline attenuation at `lambda`, linearly interpolated between
    /// grid wavelengths.
    pub fn baseline_at(&self, grid: &WavelengthGrid, lambda: f64) -> Result<f64, SimulatorError> {
        if self.baseline.len() != grid.len() {
            return Err(SimulatorError::InvalidArgument(format!(
                "baseline has {} entries for a {}-wavelength grid",
                self.baseline.len(),
                grid.len()
            )));
        }
        if !grid.contains(lambda) {
            return Err(SimulatorError::WavelengthOutOfRange {
                lambda,
                min: grid.min(),
                max: grid.max(),
            });
        }
        let values = grid.values();
        if values.len() == 1 {
            return Ok(self.baseline[0]);
        }
        let idx = match values.binary_search_by(|v| v.partial_cmp(&lambda).unwrap()) {
            Ok(i) => return Ok(self.baseline[i]),
            Err(i) => i.clamp(1, values.len() - 1),
        };
        let (l0, l1) = (values[idx - 1], values[idx]);
        let w = (lambda - l0) / (l1 - l0);
        Ok(self.baseline[idx - 1] * (1.0 - w) + self.baseline[idx] * w)
    }

    /// Total extra attenuation from all traces at `(lambda, phi)`.
    pub fn trace_contribution(&self, lambda: f64, phi_deg: f64) -> f64 {
        self.traces.iter().map(|t| t.contribution(lambda, phi_deg)).sum()
    }
}

/// Linear attenuation of a material at `(lambda, phi)`. Powder is
/// independent of the rotation angle by construction.
pub fn attenuation(
    material: &Material,
    grid: &WavelengthGrid,
    lambda: f64,
    phi_deg: f64,
) -> Result<f64, SimulatorError> {
    let base = material.baseline_at(grid, lambda)?;
    Ok(match material.kind {
        MaterialKind::Powder => base,
        MaterialKind::Crystal => base + material.trace_contribution(lambda, phi_deg),
    })
}

/// Powder baseline echoing the reference spectra: piecewise linear and
/// increasing across the grid within [5.5e-5, 1.5e-4] 1/um.
pub fn default_powder(grid: &WavelengthGrid) -> Material {
    let k = grid.len();
    let baseline = (0..k)
        .map(|i| {
            let t = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
            6.0e-5 + t * 6.0e-5
        })
        .collect();
    Material::powder(baseline).expect("valid default powder")
}

/// Default peak trace attenuation: on the locus the crystal rises from
/// its baseline to the 1.5e-4 1/um range of the reference spectra.
/// Stronger extinction is a per-run choice.
pub const DEFAULT_TRACE_AMPLITUDE: f64 = 9.0e-5;

/// Copper-flavored crystal defaults: flat baseline plus three
/// reflections whose loci sweep the 2.25-4 Angstrom band.
pub fn default_crystal(grid: &WavelengthGrid, amplitude: f64) -> Material {
    let baseline = vec![8.5e-5; grid.len()];
    let traces = [(2.087, 10.0), (1.808, 55.0), (1.278, 120.0)]
        .iter()
        .map(|&(d, phase)| ReflectionTrace {
            d_spacing: d,
            phase_deg: phase,
            order: 1,
            amplitude,
            angular_width_deg: 1.5,
            wavelength_width: 0.02,
        })
        .collect();
    Material::crystal(baseline, traces).expect("valid default crystal")
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GrainSpec {
    /// Center in micrometers relative to the volume center.
    pub center_um: [f64; 3],
    pub radius_um: f64,
}

/// Phantom generation parameters.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub n_grains: usize,
    /// Inclusive grain radius range in micrometers.
    pub grain_radius_um: (f64, f64),
    pub cylinder_radius_um: f64,
    /// Minimum surface-to-surface distance between grains.
    pub min_separation_um: f64,
    pub powder: Material,
    /// Shared grain material; all grains see the same orientation.
    pub grain_material: Material,
    /// Optional per-grain override, length `n_grains`.
    pub grain_materials: Option<Vec<Material>>,
}

/// Label volume plus per-label materials and grain geometry.
#[derive(Debug, Clone)]
pub struct GrainPhantom {
    pub labels: LabelVolume,
    /// 1 where the voxel lies inside the powder cylinder.
    pub inside: Array3<u8>,
    /// `materials[0]` is the powder; `materials[i]` belongs to label `i`.
    pub materials: Vec<Material>,
    pub grains: Vec<GrainSpec>,
    pub voxel_pitch_um: f64,
}

impl GrainPhantom {
    pub fn n_grains(&self) -> usize {
        self.grains.len()
    }
}

/// Deterministically place non-overlapping spherical grains inside a
/// powder cylinder.
pub fn generate_phantom(
    spec: &PhantomSpec,
    geometry: &ViewGeometry,
    seed: u64,
) -> Result<GrainPhantom, SimulatorError> {
    geometry.validate()?;
    spec.powder.validate()?;
    if spec.powder.kind != MaterialKind::Powder {
        return Err(SimulatorError::InvalidArgument("background material must be powder".into()));
    }
    let (r_lo, r_hi) = spec.grain_radius_um;
    if spec.n_grains > 0 && !(r_lo > 0.0 && r_hi >= r_lo) {
        return Err(SimulatorError::InvalidArgument(format!(
            "bad grain radius range [{r_lo}, {r_hi}]"
        )));
    }
    if let Some(mats) = &spec.grain_materials {
        if mats.len() != spec.n_grains {
            return Err(SimulatorError::InvalidArgument(
                "grain_materials must have one entry per grain".into(),
            ));
        }
        for m in mats {
            m.validate()?;
        }
    } else if spec.n_grains > 0 {
        spec.grain_material.validate()?;
        if spec.grain_material.kind != MaterialKind::Crystal {
            return Err(SimulatorError::InvalidArgument("grain material must be crystal".into()));
        }
    }
    let (nz, ny, nx) = geometry.volume_dim();
    let pitch = geometry.voxel_pitch_um;
    let half_z = nz as f64 * pitch / 2.0;
    let max_cyl = (nx.min(ny) as f64) * pitch / 2.0;
    if spec.cylinder_radius_um > max_cyl {
        return Err(SimulatorError::InvalidArgument(format!(
            "cylinder radius {} exceeds volume half-extent {}",
            spec.cylinder_radius_um, max_cyl
        )));
    }
    if spec.n_grains > 0 {
        let wall = pitch;
        if r_hi + wall > spec.cylinder_radius_um || r_hi > half_z {
            return Err(SimulatorError::InvalidArgument(
                "grains do not fit inside the cylinder".into(),
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grains: Vec<GrainSpec> = Vec::with_capacity(spec.n_grains);
    let mut attempts = 0usize;
    let budget = 1000 * spec.n_grains.max(1);
    while grains.len() < spec.n_grains {
        attempts += 1;
        if attempts > budget {
            return Err(SimulatorError::PackingFailed {
                requested: spec.n_grains,
                placed: grains.len(),
                attempts,
            });
        }
        let radius = rng.gen_range(r_lo..=r_hi);
        let r_max = spec.cylinder_radius_um - radius - pitch;
        let cx = rng.gen_range(-r_max..=r_max);
        let cy = rng.gen_range(-r_max..=r_max);
        if cx * cx + cy * cy > r_max * r_max {
            continue;
        }
        let cz = if half_z - radius > 0.0 {
            rng.gen_range(-(half_z - radius)..=(half_z - radius))
        } else {
            0.0
        };
        let ok = grains.iter().all(|g| {
            let dx = g.center_um[0] - cx;
            let dy = g.center_um[1] - cy;
            let dz = g.center_um[2] - cz;
            let dist = (dx * dx + dy * dy + dz * dz).sqrt();
            dist >= g.radius_um + radius + spec.min_separation_um
        });
        if ok {
            grains.push(GrainSpec { center_um: [cx, cy, cz], radius_um: radius });
        }
    }

    let ccx = (nx as f64 - 1.0) / 2.0;
    let ccy = (ny as f64 - 1.0) / 2.0;
    let ccz = (nz as f64 - 1.0) / 2.0;
    let mut labels = Array3::<i32>::zeros((nz, ny, nx));
    let mut inside = Array3::<u8>::zeros((nz, ny, nx));
    for z in 0..nz {
        let pz = (z as f64 - ccz) * pitch;
        for y in 0..ny {
            let py = (y as f64 - ccy) * pitch;
            for x in 0..nx {
                let px = (x as f64 - ccx) * pitch;
                if px * px + py * py <= spec.cylinder_radius_um * spec.cylinder_radius_um {
                    inside[[z, y, x]] = 1;
                }
                for (gi, g) in grains.iter().enumerate() {
                    let dx = px - g.center_um[0];
                    let dy = py - g.center_um[1];
                    let dz = pz - g.center_um[2];
                    if dx * dx + dy * dy + dz * dz <= g.radius_um * g.radius_um {
                        labels[[z, y, x]] = gi as i32 + 1;
                        break;
                    }
                }
            }
        }
    }

    let mut materials = vec![spec.powder.clone()];
    match &spec.grain_materials {
        Some(mats) => materials.extend(mats.iter().cloned()),
        None => materials.extend(std::iter::repeat(spec.grain_material.clone()).take(spec.n_grains)),
    }

    Ok(GrainPhantom {
        labels: LabelVolume::new(labels)?,
        inside,
        materials,
        grains,
        voxel_pitch_um: pitch,
    })
}

/// Ground-truth attenuation volume at `(lambda, phi)`, traces included.
pub fn attenuation_volume(
    phantom: &GrainPhantom,
    grid: &WavelengthGrid,
    lambda: f64,
    phi_deg: f64,
) -> Result<Array3<f64>, SimulatorError> {
    let mus: Vec<f64> = phantom
        .materials
        .iter()
        .map(|m| attenuation(m, grid, lambda, phi_deg))
        .collect::<Result<_, _>>()?;
    Ok(material_fill(phantom, &mus))
}

/// Off-Bragg attenuation volume at `lambda` (baseline only).
pub fn baseline_volume(
    phantom: &GrainPhantom,
    grid: &WavelengthGrid,
    lambda: f64,
) -> Result<Array3<f64>, SimulatorError> {
    let mus: Vec<f64> = phantom
        .materials
        .iter()
        .map(|m| m.baseline_at(grid, lambda))
        .collect::<Result<_, _>>()?;
    Ok(material_fill(phantom, &mus))
}

fn material_fill(phantom: &GrainPhantom, mus: &[f64]) -> Array3<f64> {
    let dims = phantom.labels.labels.dim();
    let mut vol = Array3::zeros(dims);
    for ((v, &label), &ins) in vol
        .iter_mut()
        .zip(phantom.labels.labels.iter())
        .zip(phantom.inside.iter())
    {
        if label > 0 {
            *v = mus[label as usize];
        } else if ins == 1 {
            *v = mus[0];
        }
    }
    vol
}

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    /// Incident flux per pixel, counts.
    pub incident_flux: f64,
    pub seed: u64,
    /// Disable to get exact expected counts instead of Poisson draws.
    pub noise: bool,
    /// A voxel is Bragg-active when its trace contribution exceeds this
    /// fraction of its baseline.
    pub bragg_active_frac: f64,
    /// A pixel enters the truth mask when its path length through
    /// active voxels exceeds this fraction of the voxel pitch.
    pub mask_path_frac: f64,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            incident_flux: 500.0,
            seed: 0,
            noise: true,
            bragg_active_frac: 0.1,
            mask_path_frac: 0.5,
        }
    }
}

/// Measurements plus every piece of ground truth the evaluator needs.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub counts: HyperSinogram,
    /// Truth Bragg mask, same shape as the sinogram.
    pub mask_truth: BraggMapStack,
    /// Off-Bragg attenuation per wavelength, `(k, z, y, x)`.
    pub ground_truth: HyperVolume,
    /// Per-grain truth signature over `(grain, view, wavelength)`.
    pub signature_truth: Array3<u8>,
}

/// Simulate counts for every `(wavelength, view)` pair.
pub fn simulate_measurements(
    phantom: &GrainPhantom,
    model: &SystemModel,
    grid: &WavelengthGrid,
    opts: &SimulateOptions,
) -> Result<SimulationOutput, SimulatorError> {
    #[cfg(feature = "parallel")]
    {
        simulate_measurements_par(phantom, model, grid, opts)
    }
    #[cfg(not(feature = "parallel"))]
    {
        simulate_measurements_seq(phantom, model, grid, opts)
    }
}

/// Path length of every ray through each material region. Index 0 is
/// the powder shell, 1..=P the grains.
fn label_paths(
    phantom: &GrainPhantom,
    model: &SystemModel,
) -> Result<Vec<Array3<f64>>, SimulatorError> {
    let dims = phantom.labels.labels.dim();
    let n_labels = phantom.materials.len();
    let mut paths = Vec::with_capacity(n_labels);
    for l in 0..n_labels {
        let mut indicator = Array3::zeros(dims);
        for ((v, &label), &ins) in indicator
            .iter_mut()
            .zip(phantom.labels.labels.iter())
            .zip(phantom.inside.iter())
        {
            let hit = if l == 0 { label == 0 && ins == 1 } else { label as usize == l };
            if hit {
                *v = 1.0;
            }
        }
        paths.push(forward_project(&indicator, model)?);
    }
    Ok(paths)
}

struct ChannelSim {
    counts: Array3<f32>,
    mask: Array3<u8>,
    /// active[grain][view]
    active: Vec<Vec<bool>>,
}

fn simulate_channel(
    phantom: &GrainPhantom,
    model: &SystemModel,
    grid: &WavelengthGrid,
    opts: &SimulateOptions,
    paths: &[Array3<f64>],
    k: usize,
) -> Result<ChannelSim, SimulatorError> {
    let lambda = grid.values()[k];
    let geometry = model.geometry();
    let (v, r, c) = geometry.sino_dim();
    let n_labels = phantom.materials.len();
    let n_grains = n_labels - 1;
    let mut counts = Array3::zeros((v, r, c));
    let mut mask = Array3::zeros((v, r, c));
    let mut active = vec![vec![false; v]; n_grains];
    let path_min = opts.mask_path_frac * geometry.voxel_pitch_um;

    for (view, &phi) in geometry.angles_deg.iter().enumerate() {
        let mut mus = Vec::with_capacity(n_labels);
        for (l, mat) in phantom.materials.iter().enumerate() {
            mus.push(attenuation(mat, grid, lambda, phi)?);
            if l > 0 {
                let base = mat.baseline_at(grid, lambda)?;
                let is_active =
                    mat.trace_contribution(lambda, phi) > opts.bragg_active_frac * base;
                active[l - 1][view] = is_active;
            }
        }
        for row in 0..r {
            for col in 0..c {
                let mut line = 0.0;
                let mut active_path = 0.0;
                for l in 0..n_labels {
                    let p = paths[l][[view, row, col]];
                    line += mus[l] * p;
                    if l > 0 && active[l - 1][view] {
                        active_path += p;
                    }
                }
                let expected = opts.incident_flux * (-line).exp();
                let value = if opts.noise {
                    sample_poisson(opts.seed, k, view, row, col, expected) as f64
                } else {
                    expected
                };
                counts[[view, row, col]] = value as f32;
                if active_path > path_min {
                    mask[[view, row, col]] = 1;
                }
            }
        }
    }
    Ok(ChannelSim { counts, mask, active })
}

/// Inverse-CDF Poisson draw for the pixel stream; means above 500 use a
/// normal-quantile approximation to avoid pmf underflow.
fn sample_poisson(seed: u64, k: usize, view: usize, row: usize, col: usize, mean: f64) -> u64 {
    let u: f64 = pixel_rng(seed, k, view, row, col).gen();
    if mean <= 500.0 {
        poisson_inverse_cdf(mean, u)
    } else {
        let z = inverse_normal_cdf(u);
        (mean + mean.sqrt() * z + 0.5).max(0.0) as u64
    }
}

/// Acklam's rational approximation to the standard normal quantile.
fn inverse_normal_cdf(u: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let u = u.clamp(1e-300, 1.0 - 1e-16);
    let low = 0.02425;
    if u < low {
        let q = (-2.0 * u.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if u <= 1.0 - low {
        let q = u - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - u).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Sequential fallback of [`simulate_measurements`].
pub fn simulate_measurements_seq(
    phantom: &GrainPhantom,
    model: &SystemModel,
    grid: &WavelengthGrid,
    opts: &SimulateOptions,
) -> Result<SimulationOutput, SimulatorError> {
    let paths = label_paths(phantom, model)?;
    let channels: Result<Vec<_>, _> = (0..grid.len())
        .map(|k| simulate_channel(phantom, model, grid, opts, &paths, k))
        .collect();
    assemble_simulation(phantom, model, grid, opts, channels?)
}

/// Rayon-parallel [`simulate_measurements`]; per-pixel RNG streams make
/// the output independent of scheduling.
#[cfg(feature = "parallel")]
pub fn simulate_measurements_par(
    phantom: &GrainPhantom,
    model: &SystemModel,
    grid: &WavelengthGrid,
    opts: &SimulateOptions,
) -> Result<SimulationOutput, SimulatorError> {
    let paths = label_paths(phantom, model)?;
    let channels: Result<Vec<_>, _> = (0..grid.len())
        .into_par_iter()
        .map(|k| simulate_channel(phantom, model, grid, opts, &paths, k))
        .collect();
    assemble_simulation(phantom, model, grid, opts, channels?)
}

fn assemble_simulation(
    phantom: &GrainPhantom,
    model: &SystemModel,
    grid: &WavelengthGrid,
    opts: &SimulateOptions,
    channels: Vec<ChannelSim>,
) -> Result<SimulationOutput, SimulatorError> {
    if !(opts.incident_flux > 0.0) {
        return Err(SimulatorError::InvalidArgument("incident_flux must be > 0".into()));
    }
    let geometry = model.geometry();
    let kn = grid.len();
    let (v, r, c) = geometry.sino_dim();
    let (nz, ny, nx) = geometry.volume_dim();
    let n_grains = phantom.n_grains();

    let mut counts = Array4::zeros((kn, v, r, c));
    let mut mask = Array4::zeros((kn, v, r, c));
    let mut signature = Array3::zeros((n_grains, v, kn));
    let mut truth = Array4::zeros((kn, nz, ny, nx));
    for (k, ch) in channels.into_iter().enumerate() {
        counts.index_axis_mut(Axis(0), k).assign(&ch.counts);
        mask.index_axis_mut(Axis(0), k).assign(&ch.mask);
        for g in 0..n_grains {
            for view in 0..v {
                signature[[g, view, k]] = u8::from(ch.active[g][view]);
            }
        }
        let base = baseline_volume(phantom, grid, grid.values()[k])?;
        truth
            .index_axis_mut(Axis(0), k)
            .assign(&base.mapv(|x| x as f32));
    }

    Ok(SimulationOutput {
        counts: HyperSinogram::new(counts, SinogramKind::Counts, opts.incident_flux, grid, geometry)?,
        mask_truth: BraggMapStack::new(mask)?,
        ground_truth: HyperVolume::new(truth)?,
        signature_truth: signature,
    })
}

/// Truth-pattern helper for evaluation: per-grain binary matrix over
/// `(view, wavelength)` marking where the grain satisfies the Bragg
/// condition (same activity rule as the simulator mask).
pub fn signature_truth_matrix(out: &SimulationOutput, grain: usize) -> Array2<u8> {
    out.signature_truth.index_axis(Axis(0), grain).to_owned()
}
