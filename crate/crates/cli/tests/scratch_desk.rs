use std::path::Path;
use wrt_cli::{cmd_evaluate, cmd_fbp, cmd_rmbir, cmd_signatures, cmd_simulate, RunConfig};

#[test]
fn desk_trial() {
    let t0 = std::time::Instant::now();
    let config_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let config = RunConfig::load(&config_path, &[]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let sim = cmd_simulate(&config, out).unwrap();
    println!("simulate: {:?}", t0.elapsed());
    let fbp = cmd_fbp(&sim, &config, out).unwrap();
    println!("fbp: {:?}", t0.elapsed());
    let rmbir = cmd_rmbir(&sim, &config, out).unwrap();
    println!("rmbir: {:?}", t0.elapsed());
    let sigs = cmd_signatures(&rmbir, &rmbir, &config, out).unwrap();
    println!("signatures: {:?}", t0.elapsed());
    let report = cmd_evaluate(&sim, &rmbir, Some(&fbp), &sigs, &out.join("report.json")).unwrap();
    println!("total: {:?}", t0.elapsed());

    for ch in &report.channels {
        if ch.affected_fraction >= 0.005 {
            println!(
                "lambda {:.3}: affected {:.3}% nrmse_rmbir {:.4} nrmse_fbp {:.4} ratio {:.3} prec {:?} rec {:?}",
                ch.wavelength,
                100.0 * ch.affected_fraction,
                ch.nrmse_rmbir.unwrap_or(f64::NAN),
                ch.nrmse_fbp.unwrap_or(f64::NAN),
                ch.nrmse_rmbir.unwrap_or(f64::NAN) / ch.nrmse_fbp.unwrap_or(f64::NAN),
                ch.bragg_precision,
                ch.bragg_recall
            );
        }
    }
    let quiet: Vec<f64> = report
        .channels
        .iter()
        .filter(|c| c.affected_fraction < 0.001)
        .filter_map(|c| c.nrmse_rmbir)
        .collect();
    println!(
        "quiet channels: {} mean nrmse {:.4}",
        quiet.len(),
        quiet.iter().sum::<f64>() / quiet.len().max(1) as f64
    );
    for s in &report.signatures {
        println!(
            "domain {} -> grain {} ({} vox, overlap {}): tpr {:?} fpr {:?}",
            s.domain_id, s.matched_grain, s.domain_voxels, s.overlap_voxels, s.tpr, s.fpr
        );
    }
    println!("runtime: {:?}", report.runtime);
}
