//! Pipeline commands behind the `wrt` binary: simulate, reconstruct
//! (FBP and robust MBIR), extract signatures, and evaluate. Each stage
//! reads `.wrt` containers written by the previous one and embeds the
//! effective run configuration in its output manifest, so stages can be
//! re-run independently and reproduce their outputs exactly.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array4, Axis, Ix3, Ix4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use wrt_core::container::{ArrayData, Container};
use wrt_core::metrics::{
    binary_rates, nrmse, BinaryRates, ChannelReport, EvalReport, RuntimeReport, SignatureReport,
};
use wrt_core::model::{
    counts_to_projection, BraggMapStack, HyperSinogram, HyperVolume, LabelVolume, SinogramKind,
    ViewGeometry, WavelengthGrid, COUNT_FLOOR,
};
use wrt_core::projector::{fbp_reconstruct_all, FbpFilter, SystemModel};
use wrt_core::rmbir::{reconstruct_all, RmbirParams, ThresholdMode};
use wrt_core::signature::{
    connected_components_2d, connected_components_3d, kmeans_segment, match_signatures,
    Connectivity3d, MatchParams,
};
use wrt_core::simulator::{
    generate_phantom, simulate_measurements, Material, PhantomSpec, ReflectionTrace,
    SimulateOptions,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Errors mapped onto process exit codes: config 2, data 3, solver 4.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("solver error: {0}")]
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Solver(_) => 4,
        }
    }
}

impl From<wrt_core::ContainerError> for CliError {
    fn from(e: wrt_core::ContainerError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<wrt_core::ModelError> for CliError {
    fn from(e: wrt_core::ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<wrt_core::SimulatorError> for CliError {
    fn from(e: wrt_core::SimulatorError) -> Self {
        use wrt_core::SimulatorError::*;
        match &e {
            InvalidArgument(_) | ThetaOutOfRange(_) | PackingFailed { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<wrt_core::ProjectorError> for CliError {
    fn from(e: wrt_core::ProjectorError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<wrt_core::RmbirError> for CliError {
    fn from(e: wrt_core::RmbirError) -> Self {
        use wrt_core::RmbirError::*;
        match &e {
            InvalidParams(_) => CliError::Config(e.to_string()),
            Diverged { .. } | Channel { .. } => CliError::Solver(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<wrt_core::SignatureError> for CliError {
    fn from(e: wrt_core::SignatureError) -> Self {
        match &e {
            wrt_core::SignatureError::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavelengthConfig {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub n_views: usize,
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub pixel_pitch_um: f64,
    pub voxel_pitch_um: f64,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

/// Baseline spectrum over the wavelength grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BaselineConfig {
    Constant { value: f64 },
    Linear { start: f64, end: f64 },
    Table { values: Vec<f64> },
}

impl BaselineConfig {
    fn sample(&self, grid: &WavelengthGrid) -> Result<Vec<f64>, CliError> {
        let k = grid.len();
        match self {
            BaselineConfig::Constant { value } => Ok(vec![*value; k]),
            BaselineConfig::Linear { start, end } => Ok((0..k)
                .map(|i| {
                    let t = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
                    start + t * (end - start)
                })
                .collect()),
            BaselineConfig::Table { values } => {
                if values.len() != k {
                    return Err(CliError::Config(format!(
                        "phantom baseline table has {} entries for a {k}-wavelength grid",
                        values.len()
                    )));
                }
                Ok(values.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_grains: usize,
    pub grain_radius_um: [f64; 2],
    pub cylinder_radius_um: f64,
    #[serde(default = "default_min_separation")]
    pub min_separation_um: f64,
    pub powder_baseline: BaselineConfig,
    pub crystal_baseline: BaselineConfig,
    pub traces: Vec<ReflectionTrace>,
}

fn default_min_separation() -> f64 {
    100.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub incident_flux: f64,
    #[serde(default = "default_true")]
    pub noise: bool,
    #[serde(default = "default_active_frac")]
    pub bragg_active_frac: f64,
    #[serde(default = "default_path_frac")]
    pub mask_path_frac: f64,
}

fn default_true() -> bool {
    true
}
fn default_active_frac() -> f64 {
    0.1
}
fn default_path_frac() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterConfig {
    Ramlak,
    Hamming,
}

impl From<FilterConfig> for FbpFilter {
    fn from(f: FilterConfig) -> Self {
        match f {
            FilterConfig::Ramlak => FbpFilter::RamLak,
            FilterConfig::Hamming => FbpFilter::Hamming,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbpConfig {
    #[serde(default = "default_filter")]
    pub filter: FilterConfig,
}

fn default_filter() -> FilterConfig {
    FilterConfig::Ramlak
}

impl Default for FbpConfig {
    fn default() -> Self {
        Self { filter: default_filter() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum ThresholdConfig {
    Fixed { value: f64 },
    Quantile { value: f64 },
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig::Quantile { value: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmbirConfig {
    #[serde(default)]
    pub threshold: ThresholdConfig,
    #[serde(default = "default_sigma_f")]
    pub sigma_f: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_max_inner")]
    pub max_inner: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_true")]
    pub nonneg: bool,
}

fn default_sigma_f() -> f64 {
    1.0
}
fn default_p() -> f64 {
    2.0
}
fn default_q() -> f64 {
    1.2
}
fn default_c() -> f64 {
    0.01
}
fn default_max_outer() -> usize {
    20
}
fn default_max_inner() -> usize {
    30
}
fn default_tol() -> f64 {
    1e-4
}

impl Default for RmbirConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl RmbirConfig {
    pub fn to_params(&self) -> RmbirParams {
        RmbirParams {
            threshold: match self.threshold {
                ThresholdConfig::Fixed { value } => ThresholdMode::Fixed(value),
                ThresholdConfig::Quantile { value } => ThresholdMode::Quantile(value),
            },
            sigma_f: self.sigma_f,
            p: self.p,
            q: self.q,
            c: self.c,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            tol: self.tol,
            nonneg: self.nonneg,
            count_floor: COUNT_FLOOR,
            lipschitz_override: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureConfig {
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    /// K-means class treated as crystal; picks the smallest class when
    /// absent.
    #[serde(default)]
    pub crystal_class: Option<usize>,
    #[serde(default = "default_score_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_min_area")]
    pub min_area: usize,
    #[serde(default = "default_min_voxels")]
    pub min_voxels: usize,
    #[serde(default = "default_binarize_frac")]
    pub binarize_frac: f64,
    #[serde(default = "default_connectivity")]
    pub connectivity: u8,
}

fn default_n_classes() -> usize {
    3
}
fn default_score_threshold() -> f64 {
    0.5
}
fn default_min_area() -> usize {
    4
}
fn default_min_voxels() -> usize {
    8
}
fn default_binarize_frac() -> f64 {
    0.5
}
fn default_connectivity() -> u8 {
    26
}

impl Default for SignatureConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl SignatureConfig {
    fn connectivity_3d(&self) -> Result<Connectivity3d, CliError> {
        match self.connectivity {
            6 => Ok(Connectivity3d::Faces),
            18 => Ok(Connectivity3d::FacesEdges),
            26 => Ok(Connectivity3d::FacesEdgesCorners),
            other => Err(CliError::Config(format!(
                "signature.connectivity must be 6, 18 or 26, got {other}"
            ))),
        }
    }
}

/// One JSON document that fully determines a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub wavelengths: WavelengthConfig,
    pub geometry: GeometryConfig,
    pub phantom: PhantomConfig,
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub fbp: FbpConfig,
    #[serde(default)]
    pub rmbir: RmbirConfig,
    #[serde(default)]
    pub signature: SignatureConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.simulate.incident_flux > 0.0) {
            return Err(CliError::Config(format!(
                "simulate.incident_flux must be > 0, got {}",
                self.simulate.incident_flux
            )));
        }
        if self.wavelengths.count == 0 {
            return Err(CliError::Config("wavelengths.count must be >= 1".into()));
        }
        if !(self.wavelengths.min > 0.0) || self.wavelengths.max <= self.wavelengths.min {
            return Err(CliError::Config(
                "wavelengths must satisfy 0 < min < max".into(),
            ));
        }
        self.rmbir
            .to_params()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.signature.connectivity_3d()?;
        if !(self.signature.score_threshold > 0.0 && self.signature.score_threshold < 1.0) {
            return Err(CliError::Config(format!(
                "signature.score_threshold must lie in (0, 1), got {}",
                self.signature.score_threshold
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<WavelengthGrid, CliError> {
        WavelengthGrid::linspace(self.wavelengths.min, self.wavelengths.max, self.wavelengths.count)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn view_geometry(&self) -> Result<ViewGeometry, CliError> {
        let g = &self.geometry;
        ViewGeometry::half_turn(
            g.n_views,
            g.detector_rows,
            g.detector_cols,
            g.pixel_pitch_um,
            g.voxel_pitch_um,
            g.nx,
            g.ny,
            g.nz,
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }

    fn phantom_spec(&self, grid: &WavelengthGrid) -> Result<PhantomSpec, CliError> {
        let powder = Material::powder(self.phantom.powder_baseline.sample(grid)?)
            .map_err(|e| CliError::Config(format!("phantom.powder_baseline: {e}")))?;
        let crystal = Material::crystal(
            self.phantom.crystal_baseline.sample(grid)?,
            self.phantom.traces.clone(),
        )
        .map_err(|e| CliError::Config(format!("phantom.traces: {e}")))?;
        Ok(PhantomSpec {
            n_grains: self.phantom.n_grains,
            grain_radius_um: (self.phantom.grain_radius_um[0], self.phantom.grain_radius_um[1]),
            cylinder_radius_um: self.phantom.cylinder_radius_um,
            min_separation_um: self.phantom.min_separation_um,
            powder,
            grain_material: crystal,
            grain_materials: None,
        })
    }

    fn as_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Apply one `--set a.b.c=value` override onto the raw JSON document.
fn apply_override(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<(), CliError> {
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        match cursor {
            serde_json::Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), parsed);
                    return Ok(());
                }
                cursor = map
                    .entry(part.to_string())
                    .or_insert_with(|| serde_json::Value::Object(Default::default()));
            }
            serde_json::Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| {
                    CliError::Config(format!("override {key}: '{part}' is not an array index"))
                })?;
                let slot = items.get_mut(idx).ok_or_else(|| {
                    CliError::Config(format!("override {key}: index {idx} out of bounds"))
                })?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                cursor = slot;
            }
            _ => {
                return Err(CliError::Config(format!(
                    "override {key}: '{part}' does not address an object or array"
                )))
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Container helpers
// ---------------------------------------------------------------------------

/// Write a container atomically: fill a temp directory next to the
/// destination, then rename it into place.
fn save_atomic(container: &Container, dest: &Path) -> Result<(), CliError> {
    let parent = dest.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
    let tmp = parent.join(format!(
        ".tmp-{}-{}",
        dest.file_name().and_then(|n| n.to_str()).unwrap_or("container"),
        std::process::id()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)
            .map_err(|e| CliError::Data(format!("cannot clear {}: {e}", tmp.display())))?;
    }
    container.save(&tmp)?;
    if dest.exists() {
        fs::remove_dir_all(dest)
            .map_err(|e| CliError::Data(format!("cannot replace {}: {e}", dest.display())))?;
    }
    fs::rename(&tmp, dest)
        .map_err(|e| CliError::Data(format!("cannot move container into {}: {e}", dest.display())))
}

fn write_json_atomic<T: Serialize>(value: &T, dest: &Path) -> Result<(), CliError> {
    let parent = dest.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
    let tmp = dest.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(&tmp, text).map_err(|e| CliError::Data(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, dest).map_err(|e| CliError::Data(format!("{}: {e}", dest.display())))
}

fn f32_array4(container: &Container, name: &str) -> Result<Array4<f32>, CliError> {
    container
        .f32(name)?
        .clone()
        .into_dimensionality::<Ix4>()
        .map_err(|e| CliError::Data(format!("array {name}: {e}")))
}

fn u8_array4(container: &Container, name: &str) -> Result<Array4<u8>, CliError> {
    container
        .u8(name)?
        .clone()
        .into_dimensionality::<Ix4>()
        .map_err(|e| CliError::Data(format!("array {name}: {e}")))
}

fn load_counts(container: &Container) -> Result<(HyperSinogram, WavelengthGrid, ViewGeometry), CliError> {
    let grid = container.manifest.wavelength_grid.clone();
    let geometry = container.manifest.view_geometry.clone();
    let flux = container
        .manifest
        .incident_flux
        .ok_or_else(|| CliError::Data("counts container lacks incident_flux".into()))?;
    let counts = f32_array4(container, "counts")?;
    let sino = HyperSinogram::new(counts, SinogramKind::Counts, flux, &grid, &geometry)?;
    Ok((sino, grid, geometry))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Generate the phantom and measurements; writes `sim.wrt`.
pub fn cmd_simulate(config: &RunConfig, out_dir: &Path) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    let grid = config.grid()?;
    let geometry = config.view_geometry()?;
    let model = SystemModel::new(geometry.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let spec = config.phantom_spec(&grid)?;
    let phantom = generate_phantom(&spec, &geometry, config.seed)?;
    log::info!(
        "simulate: {} grains, {} wavelengths, {} views",
        phantom.n_grains(),
        grid.len(),
        geometry.n_views()
    );
    let opts = SimulateOptions {
        incident_flux: config.simulate.incident_flux,
        seed: config.seed,
        noise: config.simulate.noise,
        bragg_active_frac: config.simulate.bragg_active_frac,
        mask_path_frac: config.simulate.mask_path_frac,
    };
    let sim = simulate_measurements(&phantom, &model, &grid, &opts)?;

    let mut container = Container::new(grid, geometry);
    container.manifest.incident_flux = Some(config.simulate.incident_flux);
    container.manifest.rng_seed = Some(config.seed);
    container.manifest.config = Some(config.as_value());
    container.push(
        "counts",
        &["wavelength", "view", "row", "col"],
        "counts",
        ArrayData::F32(sim.counts.data.into_dyn()),
    )?;
    container.push(
        "ground_truth_volume",
        &["wavelength", "z", "y", "x"],
        "1/um",
        ArrayData::F32(sim.ground_truth.data.into_dyn()),
    )?;
    container.push(
        "labels",
        &["z", "y", "x"],
        "",
        ArrayData::I32(phantom.labels.labels.clone().into_dyn()),
    )?;
    container.push(
        "bragg_mask_truth",
        &["wavelength", "view", "row", "col"],
        "",
        ArrayData::U8(sim.mask_truth.data.into_dyn()),
    )?;
    container.push(
        "signature_truth",
        &["grain", "view", "wavelength"],
        "",
        ArrayData::U8(sim.signature_truth.into_dyn()),
    )?;
    container.manifest.stage_seconds = Some(started.elapsed().as_secs_f64());

    let dest = out_dir.join("sim.wrt");
    save_atomic(&container, &dest)?;
    Ok(dest)
}

/// FBP baseline over every wavelength; writes `fbp.wrt`.
pub fn cmd_fbp(input: &Path, config: &RunConfig, out_dir: &Path) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    let sim = Container::load(input)?;
    let (counts, grid, geometry) = load_counts(&sim)?;
    let model = SystemModel::new(geometry.clone()).map_err(|e| CliError::Data(e.to_string()))?;
    let projections = counts_to_projection(&counts, counts.incident_flux, COUNT_FLOOR)?;
    let volume = fbp_reconstruct_all(&projections, &model, config.fbp.filter.into())?;

    let mut container = Container::new(grid, geometry);
    container.manifest.incident_flux = Some(counts.incident_flux);
    container.manifest.rng_seed = sim.manifest.rng_seed;
    container.manifest.config = Some(config.as_value());
    container.push(
        "volume",
        &["wavelength", "z", "y", "x"],
        "1/um",
        ArrayData::F32(volume.data.into_dyn()),
    )?;
    container.manifest.stage_seconds = Some(started.elapsed().as_secs_f64());
    let dest = out_dir.join("fbp.wrt");
    save_atomic(&container, &dest)?;
    Ok(dest)
}

#[derive(Debug, Serialize)]
struct TraceSidecar<'a> {
    schema_version: u32,
    thresholds: &'a [f64],
    traces: &'a [Vec<f64>],
}

/// Robust reconstruction; writes `rmbir.wrt` plus `rmbir_trace.json`.
pub fn cmd_rmbir(input: &Path, config: &RunConfig, out_dir: &Path) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    let sim = Container::load(input)?;
    let (counts, grid, geometry) = load_counts(&sim)?;
    let model = SystemModel::new(geometry.clone()).map_err(|e| CliError::Data(e.to_string()))?;
    let params = config.rmbir.to_params();
    log::info!("rmbir: {} channels", grid.len());
    let out = reconstruct_all(&counts, &model, &params)?;

    let mut container = Container::new(grid, geometry);
    container.manifest.incident_flux = Some(counts.incident_flux);
    container.manifest.rng_seed = sim.manifest.rng_seed;
    container.manifest.config = Some(config.as_value());
    container.push(
        "volume",
        &["wavelength", "z", "y", "x"],
        "1/um",
        ArrayData::F32(out.volume.data.into_dyn()),
    )?;
    container.push(
        "bragg",
        &["wavelength", "view", "row", "col"],
        "",
        ArrayData::U8(out.bragg.data.into_dyn()),
    )?;
    container.manifest.stage_seconds = Some(started.elapsed().as_secs_f64());
    let dest = out_dir.join("rmbir.wrt");
    save_atomic(&container, &dest)?;
    write_json_atomic(
        &TraceSidecar {
            schema_version: REPORT_SCHEMA_VERSION,
            thresholds: &out.thresholds,
            traces: &out.traces,
        },
        &out_dir.join("rmbir_trace.json"),
    )?;
    Ok(dest)
}

#[derive(Debug, Serialize)]
struct MatchSidecar<'a> {
    schema_version: u32,
    score_threshold: f64,
    records: &'a [wrt_core::MatchRecord],
}

/// Segment the reconstruction, segment the Bragg maps, and match them;
/// writes `signatures.wrt` plus `matches.json`.
pub fn cmd_signatures(
    recon_path: &Path,
    bragg_path: &Path,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    let recon = Container::load(recon_path)?;
    let grid = recon.manifest.wavelength_grid.clone();
    let geometry = recon.manifest.view_geometry.clone();
    let model = SystemModel::new(geometry.clone()).map_err(|e| CliError::Data(e.to_string()))?;
    let volume = HyperVolume::new(f32_array4(&recon, "volume")?)?;
    let bragg_container = if bragg_path == recon_path {
        recon
    } else {
        Container::load(bragg_path)?
    };
    let bragg = BraggMapStack::new(u8_array4(&bragg_container, "bragg")?)?;

    let class_map = kmeans_segment(&volume, config.signature.n_classes, config.seed)?;
    let crystal_class = match config.signature.crystal_class {
        Some(c) => {
            if c >= config.signature.n_classes {
                return Err(CliError::Config(format!(
                    "signature.crystal_class {c} out of range (n_classes {})",
                    config.signature.n_classes
                )));
            }
            c as i32
        }
        None => smallest_class(&class_map, config.signature.n_classes),
    };
    let (domains, domain_sizes) = connected_components_3d(
        &class_map,
        crystal_class,
        config.signature.connectivity_3d()?,
        config.signature.min_voxels,
    );
    log::info!(
        "signatures: crystal class {crystal_class}, {} domains",
        domain_sizes.len()
    );
    let anomalies = connected_components_2d(&bragg, config.signature.min_area);
    let params = MatchParams {
        score_threshold: config.signature.score_threshold,
        binarize_frac: config.signature.binarize_frac,
    };
    let (signatures, records) =
        match_signatures(&domains, grid.len(), &anomalies, &model, &params)?;

    let p = signatures.len();
    let (v, k) = (geometry.n_views(), grid.len());
    let mut sig_arr = ndarray::Array3::<u8>::zeros((p, v, k));
    let mut score_arr = ndarray::Array3::<f32>::zeros((p, v, k));
    for (i, sig) in signatures.iter().enumerate() {
        sig_arr.index_axis_mut(Axis(0), i).assign(&sig.matrix);
        if let Some(scores) = &sig.scores {
            score_arr.index_axis_mut(Axis(0), i).assign(scores);
        }
    }

    let mut container = Container::new(grid, geometry);
    container.manifest.rng_seed = Some(config.seed);
    container.manifest.config = Some(config.as_value());
    container.push(
        "class_map",
        &["z", "y", "x"],
        "",
        ArrayData::I32(class_map.labels.into_dyn()),
    )?;
    container.push(
        "domains",
        &["z", "y", "x"],
        "",
        ArrayData::I32(domains.labels.into_dyn()),
    )?;
    container.push(
        "signature",
        &["domain", "view", "wavelength"],
        "",
        ArrayData::U8(sig_arr.into_dyn()),
    )?;
    container.push(
        "scores",
        &["domain", "view", "wavelength"],
        "",
        ArrayData::F32(score_arr.into_dyn()),
    )?;
    container.manifest.stage_seconds = Some(started.elapsed().as_secs_f64());
    let dest = out_dir.join("signatures.wrt");
    save_atomic(&container, &dest)?;
    write_json_atomic(
        &MatchSidecar {
            schema_version: REPORT_SCHEMA_VERSION,
            score_threshold: config.signature.score_threshold,
            records: &records,
        },
        &out_dir.join("matches.json"),
    )?;
    Ok(dest)
}

fn smallest_class(class_map: &LabelVolume, n_classes: usize) -> i32 {
    let mut counts = vec![0usize; n_classes];
    for &l in class_map.labels.iter() {
        counts[l as usize] += 1;
    }
    counts
        .iter()
        .enumerate()
        .min_by_key(|(_, &c)| c)
        .map(|(i, _)| i as i32)
        .unwrap_or(0)
}

/// Aggregate per-channel and per-domain quality metrics into a JSON
/// report.
pub fn cmd_evaluate(
    sim_path: &Path,
    rmbir_path: &Path,
    fbp_path: Option<&Path>,
    signatures_path: &Path,
    out_file: &Path,
) -> Result<EvalReport, CliError> {
    let sim = Container::load(sim_path)?;
    let rmbir = Container::load(rmbir_path)?;
    let signatures = Container::load(signatures_path)?;
    let fbp = fbp_path.map(Container::load).transpose()?;

    let grid = sim.manifest.wavelength_grid.clone();
    let truth = f32_array4(&sim, "ground_truth_volume")?;
    let mask_truth = u8_array4(&sim, "bragg_mask_truth")?;
    let labels_truth = sim
        .i32("labels")?
        .clone()
        .into_dimensionality::<Ix3>()
        .map_err(|e| CliError::Data(e.to_string()))?;
    let signature_truth = sim
        .u8("signature_truth")?
        .clone()
        .into_dimensionality::<Ix3>()
        .map_err(|e| CliError::Data(e.to_string()))?;

    let volume = f32_array4(&rmbir, "volume")?;
    let bragg = u8_array4(&rmbir, "bragg")?;
    let fbp_volume = fbp.as_ref().map(|c| f32_array4(c, "volume")).transpose()?;

    if volume.dim() != truth.dim() {
        return Err(CliError::Data(format!(
            "reconstruction shape {:?} does not match truth {:?}",
            volume.dim(),
            truth.dim()
        )));
    }
    if bragg.dim() != mask_truth.dim() {
        return Err(CliError::Data(format!(
            "Bragg map shape {:?} does not match truth mask {:?}",
            bragg.dim(),
            mask_truth.dim()
        )));
    }

    let mut channels = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let truth_k = truth.index_axis(Axis(0), k);
        let recon_k = volume.index_axis(Axis(0), k);
        let mask_k = mask_truth.index_axis(Axis(0), k);
        let bragg_k = bragg.index_axis(Axis(0), k);
        let affected =
            mask_k.iter().map(|&m| f64::from(m)).sum::<f64>() / mask_k.len() as f64;
        let rates: BinaryRates = binary_rates(&bragg_k.into_dyn(), &mask_k.into_dyn())
            .map_err(|e| CliError::Data(e.to_string()))?;
        channels.push(ChannelReport {
            wavelength: grid.values()[k],
            affected_fraction: affected,
            nrmse_rmbir: nrmse(&recon_k.into_dyn(), &truth_k.into_dyn()).ok(),
            nrmse_fbp: fbp_volume
                .as_ref()
                .and_then(|fv| nrmse(&fv.index_axis(Axis(0), k).into_dyn(), &truth_k.into_dyn()).ok()),
            bragg_precision: rates.precision,
            bragg_recall: rates.recall,
        });
    }

    let domains = signatures
        .i32("domains")?
        .clone()
        .into_dimensionality::<Ix3>()
        .map_err(|e| CliError::Data(e.to_string()))?;
    let sig_arr = signatures
        .u8("signature")?
        .clone()
        .into_dimensionality::<Ix3>()
        .map_err(|e| CliError::Data(e.to_string()))?;
    let report_signatures = signature_reports(&domains, &labels_truth, &sig_arr, &signature_truth)?;

    let runtime = RuntimeReport {
        simulate_seconds: sim.manifest.stage_seconds,
        fbp_seconds: fbp.as_ref().and_then(|c| c.manifest.stage_seconds),
        rmbir_seconds: rmbir.manifest.stage_seconds,
        signatures_seconds: signatures.manifest.stage_seconds,
    };

    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        channels,
        signatures: report_signatures,
        runtime,
    };
    write_json_atomic(&report, out_file)?;
    Ok(report)
}

/// Match each detected domain to the truth grain with maximal voxel
/// overlap, then score its signature against that grain's truth
/// pattern.
fn signature_reports(
    domains: &ndarray::Array3<i32>,
    labels_truth: &ndarray::Array3<i32>,
    sig: &ndarray::Array3<u8>,
    sig_truth: &ndarray::Array3<u8>,
) -> Result<Vec<SignatureReport>, CliError> {
    if domains.dim() != labels_truth.dim() {
        return Err(CliError::Data(format!(
            "domain volume {:?} does not match truth labels {:?}",
            domains.dim(),
            labels_truth.dim()
        )));
    }
    let p_detected = sig.dim().0;
    let p_truth = sig_truth.dim().0;
    // overlap[d][g]: voxels where detected domain d+1 meets truth grain g+1.
    let mut overlap = vec![vec![0usize; p_truth]; p_detected];
    let mut domain_voxels = vec![0usize; p_detected];
    for (&d, &g) in domains.iter().zip(labels_truth.iter()) {
        if d > 0 {
            domain_voxels[(d - 1) as usize] += 1;
            if g > 0 && ((g - 1) as usize) < p_truth {
                overlap[(d - 1) as usize][(g - 1) as usize] += 1;
            }
        }
    }
    let mut out = Vec::with_capacity(p_detected);
    for d in 0..p_detected {
        let (best_grain, best_overlap) = overlap[d]
            .iter()
            .enumerate()
            .max_by_key(|(_, &o)| o)
            .map(|(g, &o)| (g, o))
            .unwrap_or((0, 0));
        let pred = sig.index_axis(Axis(0), d);
        let truth = sig_truth.index_axis(Axis(0), best_grain);
        let rates = if pred.dim() == truth.dim() {
            binary_rates(&pred.into_dyn(), &truth.into_dyn()).ok()
        } else {
            None
        };
        out.push(SignatureReport {
            domain_id: d + 1,
            matched_grain: best_grain + 1,
            domain_voxels: domain_voxels[d],
            overlap_voxels: best_overlap,
            tpr: rates.as_ref().and_then(|r| r.tpr),
            fpr: rates.as_ref().and_then(|r| r.fpr),
        });
    }
    Ok(out)
}

/// Build grid/geometry-independent derived outputs for tests: the
/// signature matrix of the domain matched to the largest truth grain.
pub fn largest_grain_report(report: &EvalReport, grain_sizes: &[usize]) -> Option<SignatureReport> {
    let largest_grain = grain_sizes
        .iter()
        .enumerate()
        .skip(1)
        .max_by_key(|(_, &s)| s)
        .map(|(g, _)| g)?;
    report
        .signatures
        .iter()
        .filter(|s| s.matched_grain == largest_grain)
        .max_by_key(|s| s.overlap_voxels)
        .cloned()
}
