//! On-disk container: a `<name>.wrt/` directory holding `manifest.json`
//! plus one raw little-endian, C-order file per array (no per-file header).
//!
//! The manifest records the schema version, an array table
//! (name / shape / dtype / axis labels / units), the wavelength grid,
//! the acquisition geometry, the incident flux, and the RNG seed, so a
//! container is self-describing and a round trip is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ViewGeometry, WavelengthGrid};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("array {name}: payload holds {actual} bytes but manifest shape {shape:?} needs {expected}")]
    PayloadMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("array not found: {0}")]
    MissingArray(String),
    #[error("array {name} has dtype {dtype}, expected {expected}")]
    DtypeMismatch {
        name: String,
        dtype: &'static str,
        expected: &'static str,
    },
    #[error("duplicate array name: {0}")]
    DuplicateArray(String),
}

impl ContainerError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ContainerError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    I32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
            Dtype::I32 => "i32",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub axes: Vec<String>,
    pub units: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub wavelength_grid: WavelengthGrid,
    pub view_geometry: ViewGeometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incident_flux: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
    /// Exact run configuration that produced this container.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_seconds: Option<f64>,
    pub arrays: Vec<ArrayEntry>,
}

/// One array payload; the variant must agree with the manifest dtype.
#[derive(Debug, Clone)]
pub enum ArrayData {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
    I32(ArrayD<i32>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::U8(_) => Dtype::U8,
            ArrayData::I32(_) => Dtype::I32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F32(a) => a.shape(),
            ArrayData::U8(a) => a.shape(),
            ArrayData::I32(a) => a.shape(),
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F32(a) => {
                let mut out = Vec::with_capacity(a.len() * 4);
                for v in a.as_standard_layout().iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }
            ArrayData::U8(a) => a.as_standard_layout().iter().copied().collect(),
            ArrayData::I32(a) => {
                let mut out = Vec::with_capacity(a.len() * 4);
                for v in a.as_standard_layout().iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }
        }
    }

    fn from_le_bytes(dtype: Dtype, shape: &[usize], bytes: &[u8]) -> Option<Self> {
        match dtype {
            Dtype::F32 => {
                let vals: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                ArrayD::from_shape_vec(shape.to_vec(), vals).ok().map(ArrayData::F32)
            }
            Dtype::U8 => ArrayD::from_shape_vec(shape.to_vec(), bytes.to_vec())
                .ok()
                .map(ArrayData::U8),
            Dtype::I32 => {
                let vals: Vec<i32> = bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                ArrayD::from_shape_vec(shape.to_vec(), vals).ok().map(ArrayData::I32)
            }
        }
    }
}

/// In-memory view of a container: manifest plus named arrays.
#[derive(Debug, Clone)]
pub struct Container {
    pub manifest: Manifest,
    arrays: Vec<(String, ArrayData)>,
}

impl Container {
    pub fn new(grid: WavelengthGrid, geometry: ViewGeometry) -> Self {
        Self {
            manifest: Manifest {
                schema_version: SCHEMA_VERSION,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                wavelength_grid: grid,
                view_geometry: geometry,
                incident_flux: None,
                rng_seed: None,
                config: None,
                stage_seconds: None,
                arrays: Vec::new(),
            },
            arrays: Vec::new(),
        }
    }

    /// Register an array under `name`; axis labels and units go into the
    /// manifest table.
    pub fn push(
        &mut self,
        name: &str,
        axes: &[&str],
        units: &str,
        data: ArrayData,
    ) -> Result<(), ContainerError> {
        if self.arrays.iter().any(|(n, _)| n == name) {
            return Err(ContainerError::DuplicateArray(name.to_string()));
        }
        self.manifest.arrays.push(ArrayEntry {
            name: name.to_string(),
            file: format!("{name}.raw"),
            shape: data.shape().to_vec(),
            dtype: data.dtype(),
            axes: axes.iter().map(|s| s.to_string()).collect(),
            units: units.to_string(),
        });
        self.arrays.push((name.to_string(), data));
        Ok(())
    }

    pub fn array(&self, name: &str) -> Result<&ArrayData, ContainerError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| ContainerError::MissingArray(name.to_string()))
    }

    pub fn f32(&self, name: &str) -> Result<&ArrayD<f32>, ContainerError> {
        match self.array(name)? {
            ArrayData::F32(a) => Ok(a),
            other => Err(ContainerError::DtypeMismatch {
                name: name.to_string(),
                dtype: other.dtype().name(),
                expected: "f32",
            }),
        }
    }

    pub fn u8(&self, name: &str) -> Result<&ArrayD<u8>, ContainerError> {
        match self.array(name)? {
            ArrayData::U8(a) => Ok(a),
            other => Err(ContainerError::DtypeMismatch {
                name: name.to_string(),
                dtype: other.dtype().name(),
                expected: "u8",
            }),
        }
    }

    pub fn i32(&self, name: &str) -> Result<&ArrayD<i32>, ContainerError> {
        match self.array(name)? {
            ArrayData::I32(a) => Ok(a),
            other => Err(ContainerError::DtypeMismatch {
                name: name.to_string(),
                dtype: other.dtype().name(),
                expected: "i32",
            }),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    /// Write `manifest.json` and one raw file per array into `path`
    /// (created if needed).
    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        fs::create_dir_all(path).map_err(|e| ContainerError::io(path, e))?;
        let manifest_path = path.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| ContainerError::Manifest(e.to_string()))?;
        fs::write(&manifest_path, json).map_err(|e| ContainerError::io(&manifest_path, e))?;
        for (entry, (_, data)) in self.manifest.arrays.iter().zip(&self.arrays) {
            let file_path = path.join(&entry.file);
            let mut f = fs::File::create(&file_path).map_err(|e| ContainerError::io(&file_path, e))?;
            f.write_all(&data.to_le_bytes())
                .map_err(|e| ContainerError::io(&file_path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let manifest_path = path.join("manifest.json");
        let text =
            fs::read_to_string(&manifest_path).map_err(|e| ContainerError::io(&manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| ContainerError::Manifest(e.to_string()))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(ContainerError::Manifest(format!(
                "unsupported schema version {}",
                manifest.schema_version
            )));
        }
        manifest
            .view_geometry
            .validate()
            .map_err(|e| ContainerError::Manifest(e.to_string()))?;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for entry in &manifest.arrays {
            if arrays.iter().any(|(n, _): &(String, ArrayData)| n == &entry.name) {
                return Err(ContainerError::DuplicateArray(entry.name.clone()));
            }
            let file_path = path.join(&entry.file);
            let mut bytes = Vec::new();
            fs::File::open(&file_path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| ContainerError::io(&file_path, e))?;
            let n_elems: usize = entry.shape.iter().product();
            let expected = n_elems * entry.dtype.size();
            if bytes.len() != expected {
                return Err(ContainerError::PayloadMismatch {
                    name: entry.name.clone(),
                    shape: entry.shape.clone(),
                    expected,
                    actual: bytes.len(),
                });
            }
            let data = ArrayData::from_le_bytes(entry.dtype, &entry.shape, &bytes).ok_or_else(
                || ContainerError::Manifest(format!("array {}: bad shape {:?}", entry.name, entry.shape)),
            )?;
            arrays.push((entry.name.clone(), data));
        }
        Ok(Self { manifest, arrays })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn grid() -> WavelengthGrid {
        WavelengthGrid::new(vec![2.25, 3.0, 4.0]).unwrap()
    }

    fn geom() -> ViewGeometry {
        ViewGeometry::half_turn(4, 2, 3, 50.0, 50.0, 3, 3, 2).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.wrt");
        let mut c = Container::new(grid(), geom());
        c.manifest.incident_flux = Some(500.0);
        c.manifest.rng_seed = Some(7);
        let f = ArrayD::from_shape_vec(
            vec![2, 3],
            vec![1.5f32, -0.25, 3.75e-5, f32::MIN_POSITIVE, 1e20, 0.0],
        )
        .unwrap();
        let u = ArrayD::from_shape_vec(vec![4], vec![0u8, 1, 1, 0]).unwrap();
        let i = ArrayD::from_shape_vec(vec![2, 2], vec![-3i32, 0, 7, i32::MAX]).unwrap();
        c.push("f", &["row", "col"], "1/um", ArrayData::F32(f.clone())).unwrap();
        c.push("u", &["idx"], "", ArrayData::U8(u.clone())).unwrap();
        c.push("i", &["row", "col"], "", ArrayData::I32(i.clone())).unwrap();
        c.save(&path).unwrap();

        let back = Container::load(&path).unwrap();
        assert_eq!(back.f32("f").unwrap(), &f);
        assert_eq!(back.u8("u").unwrap(), &u);
        assert_eq!(back.i32("i").unwrap(), &i);
        assert_eq!(back.manifest.incident_flux, Some(500.0));
        assert_eq!(back.manifest.rng_seed, Some(7));
        assert_eq!(back.manifest.arrays.len(), 3);
    }

    #[test]
    fn manifest_only_container_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wrt");
        let c = Container::new(grid(), geom());
        c.save(&path).unwrap();
        let back = Container::load(&path).unwrap();
        assert_eq!(back.manifest.arrays.len(), 0);
    }

    #[test]
    fn payload_shape_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wrt");
        let mut c = Container::new(grid(), geom());
        let f = ArrayD::from_shape_vec(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        c.push("f", &["idx"], "", ArrayData::F32(f)).unwrap();
        c.save(&path).unwrap();
        // Declare shape (2, 2) over a 3-element payload.
        let manifest_path = path.join("manifest.json");
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
        v["arrays"][0]["shape"] = serde_json::json!([2, 2]);
        fs::write(&manifest_path, serde_json::to_string(&v).unwrap()).unwrap();
        match Container::load(&path) {
            Err(ContainerError::PayloadMismatch { expected, actual, .. }) => {
                assert_eq!(expected, 16);
                assert_eq!(actual, 12);
            }
            other => panic!("expected payload mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_array_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gone.wrt");
        let mut c = Container::new(grid(), geom());
        let f = ArrayD::from_shape_vec(vec![2], vec![1.0f32, 2.0]).unwrap();
        c.push("f", &["idx"], "", ArrayData::F32(f)).unwrap();
        c.save(&path).unwrap();
        fs::remove_file(path.join("f.raw")).unwrap();
        assert!(matches!(Container::load(&path), Err(ContainerError::Io { .. })));
    }

    #[test]
    fn unsupported_dtype_is_a_manifest_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dtype.wrt");
        let c = Container::new(grid(), geom());
        c.save(&path).unwrap();
        let manifest_path = path.join("manifest.json");
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
        v["arrays"] = serde_json::json!([{
            "name": "x", "file": "x.raw", "shape": [1],
            "dtype": "f64", "axes": ["i"], "units": ""
        }]);
        fs::write(&manifest_path, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(matches!(
            Container::load(&path),
            Err(ContainerError::Manifest(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = Container::new(grid(), geom());
        let f = ArrayD::from_shape_vec(vec![1], vec![1.0f32]).unwrap();
        c.push("f", &["i"], "", ArrayData::F32(f.clone())).unwrap();
        assert!(matches!(
            c.push("f", &["i"], "", ArrayData::F32(f)),
            Err(ContainerError::DuplicateArray(_))
        ));
    }
}
