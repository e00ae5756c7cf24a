//! Domain types and index conventions shared by every other module.
//!
//! Sinograms are indexed `(wavelength, view, row, col)` and volumes
//! `(wavelength, z, y, x)`, slowest to fastest, so that per-wavelength
//! slices are contiguous. Persisted arrays are 32-bit floats; solver
//! internals promote to f64.

use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp applied to measured counts before taking the log (and when
/// estimating weights), so zero-count pixels produce a large but finite
/// projection value instead of infinity.
pub const COUNT_FLOOR: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Ordered neutron wavelengths in Angstrom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WavelengthGrid {
    values: Vec<f64>,
}

impl WavelengthGrid {
    /// Build a grid from explicit wavelengths; they must be strictly
    /// increasing and positive.
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::InvalidArgument(
                "wavelength grid must contain at least one value".into(),
            ));
        }
        if values.iter().any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(ModelError::InvalidArgument(
                "wavelengths must be finite and positive".into(),
            ));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ModelError::InvalidArgument(
                "wavelengths must be strictly increasing".into(),
            ));
        }
        Ok(Self { values })
    }

    /// Uniform grid of `count` wavelengths spanning `[min, max]`.
    pub fn linspace(min: f64, max: f64, count: usize) -> Result<Self, ModelError> {
        if count == 0 {
            return Err(ModelError::InvalidArgument("count must be >= 1".into()));
        }
        if count == 1 {
            return Self::new(vec![min]);
        }
        let step = (max - min) / (count - 1) as f64;
        Self::new((0..count).map(|i| min + step * i as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: K >= 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// True when `lambda` lies within the grid's closed range.
    pub fn contains(&self, lambda: f64) -> bool {
        lambda >= self.min() && lambda <= self.max()
    }
}

impl TryFrom<Vec<f64>> for WavelengthGrid {
    type Error = ModelError;
    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<WavelengthGrid> for Vec<f64> {
    fn from(grid: WavelengthGrid) -> Self {
        grid.values
    }
}

/// Parallel-beam acquisition geometry: a single rotation axis aligned
/// with the detector row direction, so detector row `r` sees volume
/// slice `z = r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewGeometry {
    /// Rotation angles in degrees, in acquisition order.
    pub angles_deg: Vec<f64>,
    pub detector_rows: usize,
    pub detector_cols: usize,
    /// Detector pixel pitch in micrometers.
    pub pixel_pitch_um: f64,
    /// Cubic voxel pitch in micrometers.
    pub voxel_pitch_um: f64,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl ViewGeometry {
    /// `n_views` angles uniformly covering `[0, 180)` degrees.
    pub fn half_turn(
        n_views: usize,
        detector_rows: usize,
        detector_cols: usize,
        pixel_pitch_um: f64,
        voxel_pitch_um: f64,
        nx: usize,
        ny: usize,
        nz: usize,
    ) -> Result<Self, ModelError> {
        let angles_deg = (0..n_views)
            .map(|i| 180.0 * i as f64 / n_views as f64)
            .collect();
        let geom = Self {
            angles_deg,
            detector_rows,
            detector_cols,
            pixel_pitch_um,
            voxel_pitch_um,
            nx,
            ny,
            nz,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn n_views(&self) -> usize {
        self.angles_deg.len()
    }

    /// Sinogram shape `(view, row, col)` for one wavelength channel.
    pub fn sino_dim(&self) -> (usize, usize, usize) {
        (self.n_views(), self.detector_rows, self.detector_cols)
    }

    /// Volume shape `(z, y, x)`.
    pub fn volume_dim(&self) -> (usize, usize, usize) {
        (self.nz, self.ny, self.nx)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.angles_deg.is_empty() {
            return Err(ModelError::InvalidArgument("at least one view required".into()));
        }
        if self
            .angles_deg
            .iter()
            .any(|&a| !a.is_finite() || !(0.0..360.0).contains(&a))
        {
            return Err(ModelError::InvalidArgument(
                "view angles must lie in [0, 360) degrees".into(),
            ));
        }
        if !(self.pixel_pitch_um > 0.0) || !(self.voxel_pitch_um > 0.0) {
            return Err(ModelError::InvalidArgument(
                "pixel_pitch_um and voxel_pitch_um must be > 0".into(),
            ));
        }
        if self.detector_rows == 0 || self.detector_cols == 0 {
            return Err(ModelError::InvalidArgument("detector dims must be > 0".into()));
        }
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(ModelError::InvalidArgument("volume dims must be > 0".into()));
        }
        Ok(())
    }
}

/// Whether sinogram entries are raw detector counts or line-integral
/// projection values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SinogramKind {
    Counts,
    Projection,
}

/// Measured or preprocessed data for every wavelength channel,
/// indexed `(wavelength, view, row, col)`.
#[derive(Debug, Clone)]
pub struct HyperSinogram {
    pub data: Array4<f32>,
    pub kind: SinogramKind,
    /// Incident flux per detector pixel, in counts.
    pub incident_flux: f64,
}

impl HyperSinogram {
    pub fn new(
        data: Array4<f32>,
        kind: SinogramKind,
        incident_flux: f64,
        grid: &WavelengthGrid,
        geometry: &ViewGeometry,
    ) -> Result<Self, ModelError> {
        let (k, v, r, c) = data.dim();
        if k != grid.len() || (v, r, c) != geometry.sino_dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "sinogram shape ({k}, {v}, {r}, {c}) does not match grid K={} and geometry {:?}",
                grid.len(),
                geometry.sino_dim()
            )));
        }
        let sino = Self { data, kind, incident_flux };
        sino.validate()?;
        Ok(sino)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self.kind {
            SinogramKind::Counts => {
                if self.data.iter().any(|&v| !v.is_finite() || v < 0.0) {
                    return Err(ModelError::InvalidArgument(
                        "counts must be finite and non-negative".into(),
                    ));
                }
            }
            SinogramKind::Projection => {
                if self.data.iter().any(|v| !v.is_finite()) {
                    return Err(ModelError::InvalidArgument(
                        "projection values must be finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.data.dim().0
    }

    /// One wavelength channel as f64, shape `(view, row, col)`.
    pub fn channel_f64(&self, k: usize) -> Array3<f64> {
        self.data.index_axis(Axis(0), k).mapv(f64::from)
    }
}

/// Beer's-law inversion of counts into projection values,
/// `g = -ln(max(counts, floor) / incident_flux)` elementwise.
pub fn counts_to_projection(
    sino: &HyperSinogram,
    incident_flux: f64,
    floor: f64,
) -> Result<HyperSinogram, ModelError> {
    if sino.kind != SinogramKind::Counts {
        return Err(ModelError::InvalidArgument(
            "counts_to_projection expects a counts sinogram".into(),
        ));
    }
    if !(incident_flux > 0.0) {
        return Err(ModelError::InvalidArgument(format!(
            "incident_flux must be > 0, got {incident_flux}"
        )));
    }
    let data = sino
        .data
        .mapv(|c| (-(f64::from(c).max(floor) / incident_flux).ln()) as f32);
    Ok(HyperSinogram {
        data,
        kind: SinogramKind::Projection,
        incident_flux,
    })
}

/// Noise-free inverse of [`counts_to_projection`]:
/// `counts = incident_flux * exp(-g)`.
pub fn projection_to_counts(
    sino: &HyperSinogram,
    incident_flux: f64,
) -> Result<HyperSinogram, ModelError> {
    if sino.kind != SinogramKind::Projection {
        return Err(ModelError::InvalidArgument(
            "projection_to_counts expects a projection sinogram".into(),
        ));
    }
    if !(incident_flux > 0.0) {
        return Err(ModelError::InvalidArgument(format!(
            "incident_flux must be > 0, got {incident_flux}"
        )));
    }
    let data = sino
        .data
        .mapv(|g| (incident_flux * (-f64::from(g)).exp()) as f32);
    Ok(HyperSinogram {
        data,
        kind: SinogramKind::Counts,
        incident_flux,
    })
}

/// Per-wavelength stack of reconstructed attenuation volumes,
/// indexed `(wavelength, z, y, x)`, units 1/um.
#[derive(Debug, Clone)]
pub struct HyperVolume {
    pub data: Array4<f32>,
}

impl HyperVolume {
    pub fn new(data: Array4<f32>) -> Result<Self, ModelError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidArgument(
                "volume values must be finite".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn n_channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn channel(&self, k: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), k)
    }

    pub fn channel_f64(&self, k: usize) -> Array3<f64> {
        self.data.index_axis(Axis(0), k).mapv(f64::from)
    }
}

/// Binary per-measurement anomaly masks, same shape as the sinogram.
#[derive(Debug, Clone)]
pub struct BraggMapStack {
    pub data: Array4<u8>,
}

impl BraggMapStack {
    pub fn new(data: Array4<u8>) -> Result<Self, ModelError> {
        if data.iter().any(|&v| v > 1) {
            return Err(ModelError::InvalidArgument(
                "Bragg map values must be 0 or 1".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: (usize, usize, usize, usize)) -> Self {
        Self { data: Array4::zeros(dim) }
    }
}

/// Integer label volume, `(z, y, x)`. Label 0 is background/powder,
/// labels 1..=P are domains.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    pub labels: Array3<i32>,
}

impl LabelVolume {
    pub fn new(labels: Array3<i32>) -> Result<Self, ModelError> {
        if labels.iter().any(|&v| v < 0) {
            return Err(ModelError::InvalidArgument("labels must be >= 0".into()));
        }
        Ok(Self { labels })
    }

    /// Largest label present (P); 0 for an all-background volume.
    pub fn max_label(&self) -> i32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Checks that every label in `0..=max` occurs at least once.
    pub fn labels_contiguous(&self) -> bool {
        let max = self.max_label();
        let mut seen = vec![false; (max + 1) as usize];
        for &l in self.labels.iter() {
            seen[l as usize] = true;
        }
        seen.into_iter().all(|s| s)
    }

    /// Voxel count per label id, indices `0..=max_label`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; (self.max_label() + 1) as usize];
        for &l in self.labels.iter() {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

/// Per-domain binary matrix over `(view, wavelength)` marking detected
/// Bragg events, with optional matched correlation scores.
#[derive(Debug, Clone)]
pub struct CrystalSignature {
    pub domain_id: usize,
    pub matrix: ndarray::Array2<u8>,
    pub scores: Option<ndarray::Array2<f32>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn small_grid() -> WavelengthGrid {
        WavelengthGrid::new(vec![2.25, 3.0, 4.0]).unwrap()
    }

    fn small_geom() -> ViewGeometry {
        ViewGeometry::half_turn(4, 2, 3, 50.0, 50.0, 3, 3, 2).unwrap()
    }

    #[test]
    fn wavelength_grid_rejects_unsorted_and_nonpositive() {
        assert!(WavelengthGrid::new(vec![]).is_err());
        assert!(WavelengthGrid::new(vec![1.0, 1.0]).is_err());
        assert!(WavelengthGrid::new(vec![2.0, 1.0]).is_err());
        assert!(WavelengthGrid::new(vec![-1.0, 1.0]).is_err());
        assert!(WavelengthGrid::new(vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn geometry_validation() {
        let mut g = small_geom();
        assert!(g.validate().is_ok());
        g.angles_deg[0] = 360.0;
        assert!(g.validate().is_err());
        let mut g = small_geom();
        g.pixel_pitch_um = 0.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn counts_to_projection_examples() {
        let grid = WavelengthGrid::new(vec![3.0]).unwrap();
        let geom = ViewGeometry::half_turn(1, 1, 3, 50.0, 50.0, 3, 3, 1).unwrap();
        let data = Array4::from_shape_vec(
            (1, 1, 1, 3),
            vec![500.0, (500.0 / std::f64::consts::E) as f32, 0.0],
        )
        .unwrap();
        let sino = HyperSinogram::new(data, SinogramKind::Counts, 500.0, &grid, &geom).unwrap();
        let proj = counts_to_projection(&sino, 500.0, COUNT_FLOOR).unwrap();
        assert_eq!(proj.kind, SinogramKind::Projection);
        let g = proj.data.as_slice().unwrap();
        assert!(g[0].abs() < 1e-7, "full transmission -> 0, got {}", g[0]);
        assert!((g[1] - 1.0).abs() < 1e-6, "one attenuation length, got {}", g[1]);
        let expected = (1000.0f64).ln() as f32; // -ln(0.5/500)
        assert!((g[2] - expected).abs() < 1e-6, "clamped zero counts, got {}", g[2]);
    }

    #[test]
    fn counts_to_projection_rejects_bad_flux_and_kind() {
        let grid = small_grid();
        let geom = small_geom();
        let sino = HyperSinogram::new(
            Array4::zeros((3, 4, 2, 3)),
            SinogramKind::Counts,
            500.0,
            &grid,
            &geom,
        )
        .unwrap();
        assert!(counts_to_projection(&sino, 0.0, COUNT_FLOOR).is_err());
        assert!(counts_to_projection(&sino, -5.0, COUNT_FLOOR).is_err());
        let proj = counts_to_projection(&sino, 500.0, COUNT_FLOOR).unwrap();
        assert!(counts_to_projection(&proj, 500.0, COUNT_FLOOR).is_err());
    }

    #[test]
    fn sinogram_shape_must_match_grid_and_geometry() {
        let grid = small_grid();
        let geom = small_geom();
        let bad = Array4::<f32>::zeros((2, 4, 2, 3));
        assert!(HyperSinogram::new(bad, SinogramKind::Counts, 500.0, &grid, &geom).is_err());
    }

    #[test]
    fn projection_counts_round_trip_is_identity_above_floor() {
        let grid = small_grid();
        let geom = small_geom();
        let mut data = Array4::zeros((3, 4, 2, 3));
        for (i, v) in data.iter_mut().enumerate() {
            *v = 1.0 + (i as f32) * 13.7; // all counts > floor
        }
        let sino =
            HyperSinogram::new(data.clone(), SinogramKind::Counts, 500.0, &grid, &geom).unwrap();
        let proj = counts_to_projection(&sino, 500.0, COUNT_FLOOR).unwrap();
        let back = projection_to_counts(&proj, 500.0).unwrap();
        for (a, b) in data.iter().zip(back.data.iter()) {
            let rel = ((a - b) / a).abs() as f64;
            assert!(rel < 1e-6, "round trip {a} -> {b}");
        }
    }

    #[test]
    fn label_volume_contiguity() {
        let mut arr = Array3::<i32>::zeros((2, 2, 2));
        arr[[0, 0, 0]] = 1;
        arr[[1, 1, 1]] = 2;
        let lv = LabelVolume::new(arr).unwrap();
        assert!(lv.labels_contiguous());
        assert_eq!(lv.sizes(), vec![6, 1, 1]);

        let mut arr = Array3::<i32>::zeros((2, 2, 2));
        arr[[0, 0, 0]] = 2; // label 1 missing
        let lv = LabelVolume::new(arr).unwrap();
        assert!(!lv.labels_contiguous());
    }
}
