//! Projector correctness: adjointness, linearity, dense-matrix
//! equivalence on a small grid, and the FBP cylinder check.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wrt_core::model::ViewGeometry;
use wrt_core::projector::{
    back_project, cylinder_volume, fbp_reconstruct, forward_project, FbpFilter, SystemModel,
};

fn random_model(rng: &mut ChaCha8Rng) -> SystemModel {
    let n_views = rng.gen_range(3..12);
    let angles: Vec<f64> = (0..n_views).map(|_| rng.gen_range(0.0..360.0)).collect();
    let nx = rng.gen_range(6..14);
    let ny = rng.gen_range(6..14);
    let nz = rng.gen_range(1..4);
    let cols = rng.gen_range(6..18);
    let geom = ViewGeometry {
        angles_deg: angles,
        detector_rows: nz,
        detector_cols: cols,
        pixel_pitch_um: 50.0,
        voxel_pitch_um: 50.0,
        nx,
        ny,
        nz,
    };
    SystemModel::new(geom).unwrap()
}

#[test]
fn adjoint_identity_holds_for_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..20 {
        let model = random_model(&mut rng);
        let vol = Array3::from_shape_fn(model.geometry().volume_dim(), |_| rng.gen::<f64>() - 0.5);
        let sino = Array3::from_shape_fn(model.geometry().sino_dim(), |_| rng.gen::<f64>() - 0.5);
        let af = forward_project(&vol, &model).unwrap();
        let atg = back_project(&sino, &model).unwrap();
        let lhs: f64 = af.iter().zip(sino.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = vol.iter().zip(atg.iter()).map(|(a, b)| a * b).sum();
        let scale = lhs.abs().max(rhs.abs()).max(1e-30);
        assert!(
            (lhs - rhs).abs() / scale < 1e-6,
            "trial {trial}: <Af,g> = {lhs} but <f,A'g> = {rhs}"
        );
    }
}

#[test]
fn projector_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let model = random_model(&mut rng);
    let f1 = Array3::from_shape_fn(model.geometry().volume_dim(), |_| rng.gen::<f64>());
    let f2 = Array3::from_shape_fn(model.geometry().volume_dim(), |_| rng.gen::<f64>());
    let alpha = 2.75;
    let combo = forward_project(&(&f1 * alpha + &f2), &model).unwrap();
    let separate = forward_project(&f1, &model).unwrap() * alpha + forward_project(&f2, &model).unwrap();
    for (a, b) in combo.iter().zip(separate.iter()) {
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}

/// Dense system matrix assembled column-by-column from forward
/// projections of unit voxels on an 8x8x1 grid.
fn dense_matrix(model: &SystemModel) -> Array2<f64> {
    let (nz, ny, nx) = model.geometry().volume_dim();
    let n = nz * ny * nx;
    let m = model.n_measurements();
    let mut a = Array2::zeros((m, n));
    for j in 0..n {
        let mut basis = Array3::zeros((nz, ny, nx));
        basis.as_slice_mut().unwrap()[j] = 1.0;
        let sino = forward_project(&basis, model).unwrap();
        for (i, v) in sino.iter().enumerate() {
            a[[i, j]] = *v;
        }
    }
    a
}

#[test]
fn back_projection_matches_dense_row_extraction() {
    let geom = ViewGeometry {
        angles_deg: vec![0.0, 18.5, 45.0, 71.0, 90.0, 120.0, 133.3, 160.0, 200.0, 285.0],
        detector_rows: 1,
        detector_cols: 8,
        pixel_pitch_um: 50.0,
        voxel_pitch_um: 50.0,
        nx: 8,
        ny: 8,
        nz: 1,
    };
    let model = SystemModel::new(geom).unwrap();
    let a = dense_matrix(&model);
    let m = model.n_measurements();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..12 {
        let i = rng.gen_range(0..m);
        let mut one_hot = Array3::zeros(model.geometry().sino_dim());
        one_hot.as_slice_mut().unwrap()[i] = 1.0;
        let bp = back_project(&one_hot, &model).unwrap();
        let row = a.row(i);
        for (j, v) in bp.iter().enumerate() {
            assert!(
                (v - row[j]).abs() < 1e-12,
                "A^T e_{i} voxel {j}: {v} vs dense {}",
                row[j]
            );
        }
    }
    // Forward on random volume equals dense multiply.
    let vol = Array3::from_shape_fn(model.geometry().volume_dim(), |_| rng.gen::<f64>());
    let flat = Array1::from_iter(vol.iter().copied());
    let dense_proj = a.dot(&flat);
    let sino = forward_project(&vol, &model).unwrap();
    for (i, v) in sino.iter().enumerate() {
        assert!((v - dense_proj[i]).abs() < 1e-9 * dense_proj[i].abs().max(1.0));
    }
}

#[test]
fn fbp_recovers_uniform_cylinder_interior() {
    let mu = 3.0e-4;
    let dims = (1usize, 96usize, 96usize);
    let pitch = 50.0;
    let radius = 1700.0;
    let geom = ViewGeometry::half_turn(180, 1, 96, pitch, pitch, 96, 96, 1).unwrap();
    let model = SystemModel::new(geom).unwrap();
    let vol = cylinder_volume(dims, pitch, radius, mu);
    let sino = forward_project(&vol, &model).unwrap();
    let recon = fbp_reconstruct(&sino, &model, FbpFilter::RamLak).unwrap();
    let cx = (dims.2 as f64 - 1.0) / 2.0;
    let cy = (dims.1 as f64 - 1.0) / 2.0;
    let mut worst: f64 = 0.0;
    for iy in 0..dims.1 {
        for ix in 0..dims.2 {
            let x = (ix as f64 - cx) * pitch;
            let y = (iy as f64 - cy) * pitch;
            // Interior: stay a few voxels away from the rim.
            if (x * x + y * y).sqrt() < radius - 4.0 * pitch {
                let rel = (recon[[0, iy, ix]] - mu).abs() / mu;
                worst = worst.max(rel);
            }
        }
    }
    assert!(worst < 0.02, "worst interior relative error {worst}");
}

#[test]
fn fbp_hamming_is_smoother_than_ramlak_on_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let geom = ViewGeometry::half_turn(60, 1, 32, 50.0, 50.0, 32, 32, 1).unwrap();
    let model = SystemModel::new(geom).unwrap();
    let sino = Array3::from_shape_fn(model.geometry().sino_dim(), |_| rng.gen::<f64>() - 0.5);
    let ram = fbp_reconstruct(&sino, &model, FbpFilter::RamLak).unwrap();
    let ham = fbp_reconstruct(&sino, &model, FbpFilter::Hamming).unwrap();
    let e_ram: f64 = ram.iter().map(|v| v * v).sum();
    let e_ham: f64 = ham.iter().map(|v| v * v).sum();
    assert!(e_ham < e_ram, "apodization must damp noise: {e_ham} vs {e_ram}");
}
