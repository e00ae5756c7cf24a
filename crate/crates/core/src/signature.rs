//! Crystal-signature extraction: segment the hyperspectral
//! reconstruction into domains, segment the Bragg maps into connected
//! anomalies, and match the two through the correlation score
//! `S = 1 - (|p & !q| + |!p & q|) / (|p| + |q|)`.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{BraggMapStack, CrystalSignature, HyperVolume, LabelVolume};
use crate::projector::{project_view, SystemModel};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum SignatureError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("volume has only {distinct} distinct spectra, cannot form {requested} classes")]
    IndistinctSpectra { distinct: usize, requested: usize },
    #[error("correlation score undefined: both images are empty")]
    BothEmpty,
}

/// Voxel connectivity for 3D component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Connectivity3d {
    Faces,
    FacesEdges,
    FacesEdgesCorners,
}

impl Connectivity3d {
    fn offsets(self) -> Vec<(isize, isize, isize)> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dz, dy, dx) == (0, 0, 0) {
                        continue;
                    }
                    let order = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity3d::Faces => order == 1,
                        Connectivity3d::FacesEdges => order <= 2,
                        Connectivity3d::FacesEdgesCorners => true,
                    };
                    if keep {
                        out.push((dz, dy, dx));
                    }
                }
            }
        }
        out
    }
}

/// K-means over per-voxel spectra with deterministic seeding and class
/// relabeling by ascending centroid norm.
pub fn kmeans_segment(
    hv: &HyperVolume,
    n_classes: usize,
    seed: u64,
) -> Result<LabelVolume, SignatureError> {
    if n_classes < 2 {
        return Err(SignatureError::InvalidArgument("n_classes must be >= 2".into()));
    }
    let (k, nz, ny, nx) = hv.data.dim();
    let n = nz * ny * nx;
    // Spectra as row-major (voxel, wavelength) in f64.
    let mut spectra = vec![0.0f64; n * k];
    for (ki, channel) in hv.data.axis_iter(Axis(0)).enumerate() {
        for (vi, &val) in channel.iter().enumerate() {
            spectra[vi * k + ki] = f64::from(val);
        }
    }
    let distinct = count_distinct_rows(&spectra, n, k);
    if distinct < n_classes {
        return Err(SignatureError::IndistinctSpectra { distinct, requested: n_classes });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_seed(&spectra, n, k, n_classes, &mut rng);
    let mut assign = vec![0u32; n];
    for _ in 0..100 {
        let changed = assign_voxels(&spectra, n, k, &centroids, &mut assign);
        update_centroids(&spectra, n, k, &assign, &mut centroids);
        if !changed {
            break;
        }
    }

    // Relabel by ascending centroid norm for determinism.
    let mut order: Vec<usize> = (0..n_classes).collect();
    let norms: Vec<f64> = centroids
        .chunks(k)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &b| norms[a].partial_cmp(&norms[b]).unwrap().then(a.cmp(&b)));
    let mut relabel = vec![0i32; n_classes];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new as i32;
    }

    let mut labels = Array3::zeros((nz, ny, nx));
    for (vi, l) in labels.iter_mut().enumerate() {
        *l = relabel[assign[vi] as usize];
    }
    Ok(LabelVolume { labels })
}

fn count_distinct_rows(spectra: &[f64], n: usize, k: usize) -> usize {
    use std::collections::HashSet;
    let mut set = HashSet::new();
    for vi in 0..n {
        let key: Vec<u64> = spectra[vi * k..(vi + 1) * k].iter().map(|v| v.to_bits()).collect();
        set.insert(key);
        if set.len() > 4096 {
            return set.len(); // plenty of distinct spectra; stop counting
        }
    }
    set.len()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_seed(
    spectra: &[f64],
    n: usize,
    k: usize,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(n_classes * k);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&spectra[first * k..(first + 1) * k]);
    let mut d2: Vec<f64> = (0..n)
        .map(|vi| dist2(&spectra[vi * k..(vi + 1) * k], &centroids[0..k]))
        .collect();
    while centroids.len() < n_classes * k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (vi, &d) in d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = vi;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(&spectra[pick * k..(pick + 1) * k]);
        let c = &centroids[start..start + k];
        for vi in 0..n {
            let d = dist2(&spectra[vi * k..(vi + 1) * k], c);
            if d < d2[vi] {
                d2[vi] = d;
            }
        }
    }
    centroids
}

fn assign_voxels(
    spectra: &[f64],
    n: usize,
    k: usize,
    centroids: &[f64],
    assign: &mut [u32],
) -> bool {
    let n_classes = centroids.len() / k;
    let classify = |vi: usize| -> u32 {
        let row = &spectra[vi * k..(vi + 1) * k];
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for c in 0..n_classes {
            let d = dist2(row, &centroids[c * k..(c + 1) * k]);
            if d < best_d {
                best_d = d;
                best = c as u32;
            }
        }
        best
    };
    #[cfg(feature = "parallel")]
    let new_assign: Vec<u32> = (0..n).into_par_iter().map(classify).collect();
    #[cfg(not(feature = "parallel"))]
    let new_assign: Vec<u32> = (0..n).map(classify).collect();
    let changed = new_assign
        .iter()
        .zip(assign.iter())
        .any(|(a, b)| a != b);
    assign.copy_from_slice(&new_assign);
    changed
}

fn update_centroids(spectra: &[f64], n: usize, k: usize, assign: &[u32], centroids: &mut [f64]) {
    let n_classes = centroids.len() / k;
    // Deterministic reduction: fixed-size chunks merged in index order.
    let chunk = 8192usize;
    let partials: Vec<(Vec<f64>, Vec<usize>)> = {
        let fold_chunk = |start: usize| {
            let end = (start + chunk).min(n);
            let mut sums = vec![0.0f64; n_classes * k];
            let mut counts = vec![0usize; n_classes];
            for vi in start..end {
                let c = assign[vi] as usize;
                counts[c] += 1;
                for ki in 0..k {
                    sums[c * k + ki] += spectra[vi * k + ki];
                }
            }
            (sums, counts)
        };
        let starts: Vec<usize> = (0..n).step_by(chunk).collect();
        #[cfg(feature = "parallel")]
        {
            starts.into_par_iter().map(fold_chunk).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            starts.into_iter().map(fold_chunk).collect()
        }
    };
    let mut sums = vec![0.0f64; n_classes * k];
    let mut counts = vec![0usize; n_classes];
    for (s, c) in partials {
        for (dst, src) in sums.iter_mut().zip(&s) {
            *dst += src;
        }
        for (dst, src) in counts.iter_mut().zip(&c) {
            *dst += src;
        }
    }
    for c in 0..n_classes {
        if counts[c] == 0 {
            continue; // keep the previous centroid for empty classes
        }
        for ki in 0..k {
            centroids[c * k + ki] = sums[c * k + ki] / counts[c] as f64;
        }
    }
}

/// Raster-order 3D connected components of one foreground class.
/// Components smaller than `min_voxels` are dropped; survivors are
/// labeled 1..=P in discovery order.
pub fn connected_components_3d(
    class_map: &LabelVolume,
    foreground: i32,
    connectivity: Connectivity3d,
    min_voxels: usize,
) -> (LabelVolume, Vec<usize>) {
    let dims = class_map.labels.dim();
    let (nz, ny, nx) = dims;
    let offsets = connectivity.offsets();
    let mut labels = Array3::<i32>::zeros(dims);
    let mut components: Vec<Vec<(usize, usize, usize)>> = Vec::new();
    let mut stack = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if class_map.labels[[z, y, x]] != foreground || labels[[z, y, x]] != 0 {
                    continue;
                }
                let mut voxels = Vec::new();
                stack.push((z, y, x));
                labels[[z, y, x]] = -1;
                while let Some((cz, cy, cx)) = stack.pop() {
                    voxels.push((cz, cy, cx));
                    for &(dz, dy, dx) in &offsets {
                        let (tz, ty, tx) =
                            (cz as isize + dz, cy as isize + dy, cx as isize + dx);
                        if tz < 0
                            || ty < 0
                            || tx < 0
                            || tz as usize >= nz
                            || ty as usize >= ny
                            || tx as usize >= nx
                        {
                            continue;
                        }
                        let idx = [tz as usize, ty as usize, tx as usize];
                        if class_map.labels[idx] == foreground && labels[idx] == 0 {
                            labels[idx] = -1;
                            stack.push((idx[0], idx[1], idx[2]));
                        }
                    }
                }
                components.push(voxels);
            }
        }
    }
    labels.fill(0);
    let mut sizes = Vec::new();
    let mut next = 1i32;
    for voxels in components {
        if voxels.len() < min_voxels {
            continue;
        }
        for (z, y, x) in &voxels {
            labels[[*z, *y, *x]] = next;
        }
        sizes.push(voxels.len());
        next += 1;
    }
    (LabelVolume { labels }, sizes)
}

/// One connected anomaly in a Bragg map at a specific view/wavelength.
#[derive(Debug, Clone)]
pub struct AnomalyComponent {
    pub wavelength_index: usize,
    pub view_index: usize,
    /// Full-frame binary image `(row, col)` with only this component set.
    pub pixels: Array2<u8>,
    pub area: usize,
}

/// 8-connected components of every `(wavelength, view)` Bragg-map image.
/// Components below `min_area` pixels are dropped.
pub fn connected_components_2d(bragg: &BraggMapStack, min_area: usize) -> Vec<AnomalyComponent> {
    let (kn, v, _, _) = bragg.data.dim();
    let frames: Vec<(usize, usize)> = (0..kn)
        .flat_map(|k| (0..v).map(move |view| (k, view)))
        .collect();
    let label_frame = |&(k, view): &(usize, usize)| -> Vec<AnomalyComponent> {
        let img = bragg.data.index_axis(Axis(0), k);
        let img = img.index_axis(Axis(0), view);
        components_2d_in_frame(&img, min_area)
            .into_iter()
            .map(|(pixels, area)| AnomalyComponent {
                wavelength_index: k,
                view_index: view,
                pixels,
                area,
            })
            .collect()
    };
    #[cfg(feature = "parallel")]
    let nested: Vec<Vec<AnomalyComponent>> = frames.par_iter().map(label_frame).collect();
    #[cfg(not(feature = "parallel"))]
    let nested: Vec<Vec<AnomalyComponent>> = frames.iter().map(label_frame).collect();
    nested.into_iter().flatten().collect()
}

fn components_2d_in_frame(img: &ArrayView2<u8>, min_area: usize) -> Vec<(Array2<u8>, usize)> {
    let (rows, cols) = img.dim();
    let mut seen = Array2::<u8>::zeros((rows, cols));
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if img[[r, c]] == 0 || seen[[r, c]] == 1 {
                continue;
            }
            let mut pixels = Array2::<u8>::zeros((rows, cols));
            let mut area = 0usize;
            stack.push((r, c));
            seen[[r, c]] = 1;
            while let Some((cr, cc)) = stack.pop() {
                pixels[[cr, cc]] = 1;
                area += 1;
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (tr, tc) = (cr as isize + dr, cc as isize + dc);
                        if tr < 0 || tc < 0 || tr as usize >= rows || tc as usize >= cols {
                            continue;
                        }
                        let idx = [tr as usize, tc as usize];
                        if img[idx] == 1 && seen[idx] == 0 {
                            seen[idx] = 1;
                            stack.push((idx[0], idx[1]));
                        }
                    }
                }
            }
            if area >= min_area {
                out.push((pixels, area));
            }
        }
    }
    out
}

/// Forward project a binary domain mask at one view and binarize at
/// `binarize_frac` of a voxel path length.
pub fn project_and_binarize(
    mask: &Array3<u8>,
    model: &SystemModel,
    view: usize,
    binarize_frac: f64,
) -> Array2<u8> {
    let vol = mask.mapv(f64::from);
    let path = project_view(&vol, model, view);
    let threshold = binarize_frac * model.geometry().voxel_pitch_um;
    path.mapv(|p| u8::from(p > threshold))
}

/// Correlation score between two binary images: 1 minus the disagreeing
/// mass over the total mass. Errors if both images are empty.
pub fn correlation_score(p: &ArrayView2<u8>, q: &ArrayView2<u8>) -> Result<f64, SignatureError> {
    if p.dim() != q.dim() {
        return Err(SignatureError::InvalidArgument(format!(
            "image shapes {:?} vs {:?}",
            p.dim(),
            q.dim()
        )));
    }
    let mut p_only = 0u64;
    let mut q_only = 0u64;
    let mut p_mass = 0u64;
    let mut q_mass = 0u64;
    for (&pv, &qv) in p.iter().zip(q.iter()) {
        p_mass += u64::from(pv);
        q_mass += u64::from(qv);
        p_only += u64::from(pv == 1 && qv == 0);
        q_only += u64::from(pv == 0 && qv == 1);
    }
    if p_mass + q_mass == 0 {
        return Err(SignatureError::BothEmpty);
    }
    Ok(1.0 - (p_only + q_only) as f64 / (p_mass + q_mass) as f64)
}

/// Anomaly-to-domain assignment result.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MatchRecord {
    pub anomaly_index: usize,
    pub wavelength_index: usize,
    pub view_index: usize,
    pub area: usize,
    /// Best-scoring domain (1-based label), if any score was defined.
    pub domain_id: Option<usize>,
    pub score: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct MatchParams {
    pub score_threshold: f64,
    pub binarize_frac: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self { score_threshold: 0.5, binarize_frac: 0.5 }
    }
}

/// Match every anomaly against the binarized projections of every
/// domain at the anomaly's view. The best-scoring domain at or above
/// the threshold receives the signature bit; ties break toward the
/// smaller domain id.
pub fn match_signatures(
    domains: &LabelVolume,
    n_wavelengths: usize,
    anomalies: &[AnomalyComponent],
    model: &SystemModel,
    params: &MatchParams,
) -> Result<(Vec<CrystalSignature>, Vec<MatchRecord>), SignatureError> {
    if !(params.score_threshold > 0.0 && params.score_threshold < 1.0) {
        return Err(SignatureError::InvalidArgument(
            "score_threshold must lie in (0, 1)".into(),
        ));
    }
    let p_domains = domains.max_label() as usize;
    let n_views = model.geometry().n_views();

    // Binarized projection of every domain at every view, shared
    // read-only by the matching loop.
    let projections: Vec<Vec<Array2<u8>>> = {
        let project_domain = |d: usize| -> Vec<Array2<u8>> {
            let mask = domains.labels.mapv(|l| u8::from(l == d as i32 + 1));
            (0..n_views)
                .map(|view| project_and_binarize(&mask, model, view, params.binarize_frac))
                .collect()
        };
        #[cfg(feature = "parallel")]
        {
            (0..p_domains).into_par_iter().map(project_domain).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..p_domains).map(project_domain).collect()
        }
    };

    let score_anomaly = |(ai, anomaly): (usize, &AnomalyComponent)| -> MatchRecord {
        let mut best: Option<(usize, f64)> = None;
        for d in 0..p_domains {
            let proj = &projections[d][anomaly.view_index];
            match correlation_score(&proj.view(), &anomaly.pixels.view()) {
                Ok(s) => {
                    let better = match best {
                        None => true,
                        Some((_, bs)) => s > bs,
                    };
                    if better {
                        best = Some((d, s));
                    }
                }
                Err(_) => continue, // both empty: no information
            }
        }
        let (domain_id, score) = match best {
            Some((d, s)) => (Some(d + 1), s),
            None => (None, 0.0),
        };
        MatchRecord {
            anomaly_index: ai,
            wavelength_index: anomaly.wavelength_index,
            view_index: anomaly.view_index,
            area: anomaly.area,
            domain_id,
            score,
            accepted: domain_id.is_some() && score >= params.score_threshold,
        }
    };
    #[cfg(feature = "parallel")]
    let records: Vec<MatchRecord> = anomalies.par_iter().enumerate().map(score_anomaly).collect();
    #[cfg(not(feature = "parallel"))]
    let records: Vec<MatchRecord> = anomalies.iter().enumerate().map(score_anomaly).collect();

    let mut signatures: Vec<CrystalSignature> = (0..p_domains)
        .map(|d| CrystalSignature {
            domain_id: d + 1,
            matrix: Array2::zeros((n_views, n_wavelengths)),
            scores: Some(Array2::zeros((n_views, n_wavelengths))),
        })
        .collect();
    for rec in &records {
        if !rec.accepted {
            continue;
        }
        let d = rec.domain_id.expect("accepted implies a domain") - 1;
        let sig = &mut signatures[d];
        sig.matrix[[rec.view_index, rec.wavelength_index]] = 1;
        if let Some(scores) = &mut sig.scores {
            let cell = &mut scores[[rec.view_index, rec.wavelength_index]];
            *cell = cell.max(rec.score as f32);
        }
    }
    Ok((signatures, records))
}
