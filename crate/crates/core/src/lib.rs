//! Wavelength-resolved neutron tomography of samples with
//! single-crystal domains.
//!
//! The crate reconstructs hyperspectral transmission measurements that
//! contain Bragg-scatter outliers, using robust model-based iterative
//! reconstruction with a Talwar data penalty. Besides the attenuation
//! volumes it emits per-measurement Bragg maps, and matches their
//! connected components against segmented domains of the reconstruction
//! to recover a binary crystallographic signature per domain. A
//! physics-inspired simulator provides phantoms and full ground truth
//! for quantitative verification.
//!
//! Modules:
//! - [`model`]: shared domain types and index conventions
//! - [`container`]: the `.wrt` on-disk container format
//! - [`projector`]: parallel-beam Joseph projector, adjoint, and FBP
//! - [`simulator`]: grain phantoms, Bragg traces, Poisson measurements
//! - [`rmbir`]: the robust per-wavelength solver and Bragg maps
//! - [`signature`]: segmentation, components, and correlation matching
//! - [`metrics`]: NRMSE, confusion rates, and report types
//!
//! Data-parallel loops use rayon when the default `parallel` feature is
//! enabled; building with `--no-default-features` selects the
//! sequential fallbacks. Both paths produce identical output.

pub mod container;
pub mod metrics;
pub mod model;
pub mod projector;
pub mod regularizer;
pub mod rmbir;
pub mod rng;
pub mod signature;
pub mod simulator;

pub use container::{ArrayData, Container, ContainerError, Dtype, Manifest};
pub use model::{
    counts_to_projection, projection_to_counts, BraggMapStack, CrystalSignature, HyperSinogram,
    HyperVolume, LabelVolume, ModelError, SinogramKind, ViewGeometry, WavelengthGrid, COUNT_FLOOR,
};
pub use projector::{
    back_project, fbp_reconstruct, fbp_reconstruct_all, forward_project, FbpFilter,
    ProjectorError, SystemModel,
};
pub use regularizer::QggmrfPrior;
pub use rmbir::{
    cost, estimate_weights, reconstruct_all, rmbir_reconstruct, select_threshold, talwar,
    ChannelResult, RmbirError, RmbirOutput, RmbirParams, ThresholdMode, WeightMatrix,
};
pub use signature::{
    connected_components_2d, connected_components_3d, correlation_score, kmeans_segment,
    match_signatures, project_and_binarize, AnomalyComponent, Connectivity3d, MatchParams,
    MatchRecord, SignatureError,
};
pub use simulator::{
    attenuation, bragg_wavelength, generate_phantom, simulate_measurements, GrainPhantom,
    Material, MaterialKind, PhantomSpec, ReflectionTrace, SimulateOptions, SimulationOutput,
    SimulatorError,
};
