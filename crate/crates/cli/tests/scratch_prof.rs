// temporary scenario probe, deleted before the suite is final
use std::path::Path;

use oct_track::geometry::ellipse_from_cylinder;
use oct_track::synth::TruthFile;
use oct_track_cli::config::RunConfig;
use oct_track_cli::ops;

fn param_err(dir: &Path, cfg: &RunConfig, tag: &str) -> f64 {
    std::fs::create_dir_all(dir).unwrap();
    ops::run_synth(cfg, dir, cfg.seed).unwrap();
    let manifest = ops::load_manifest(&dir.join("manifest.json")).unwrap();
    let tcfg = cfg.tracker_config(cfg.seed, false).unwrap();
    let out = ops::run_track(&manifest, &tcfg).unwrap();
    let truth = TruthFile::load(&dir.join("truth.json")).unwrap();
    let mut errs = Vec::new();
    let mut missed = 0;
    for (f, t) in out.frames.iter().zip(&truth.frames) {
        let Some(e) = &f.ellipse else {
            missed += 1;
            println!("  {} MISS tissue={} fail={:?}", f.index, f.diag.tissue_support, f.diag.failure);
            continue;
        };
        let te = ellipse_from_cylinder(&t.axis(), truth.radius_mm, &f.plane).unwrap();
        errs.push((e.ratio() - te.ratio()).abs() + (e.alpha - te.alpha).abs());
    }
    let mean = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
    println!(
        "{tag}: found={} missed={} mean_err={:.5} max_err={:.5}",
        errs.len(),
        missed,
        mean,
        errs.iter().cloned().fold(0.0, f64::max),
    );
    mean
}

#[test]
fn probe_pathology() {
    let base = RunConfig::load(Path::new("/root/crate/configs/pathology.toml")).unwrap();

    let mut clean = base.clone();
    clean.tissue.as_mut().unwrap().bumps.clear();
    clean.detect = Default::default();
    clean.detect.refine_residual_max = Some(50.0);
    clean.track.pathology_exclusion = false;
    let e0 = param_err(Path::new("/tmp/path-clean"), &clean, "clean ");

    let mut naive = base.clone();
    naive.detect = Default::default();
    naive.detect.refine_residual_max = Some(50.0);
    naive.track.pathology_exclusion = false;
    let e1 = param_err(Path::new("/tmp/path-naive"), &naive, "naive ");

    let mut robust = base.clone();
    robust.detect.refine_residual_max = Some(50.0);
    let e2 = param_err(Path::new("/tmp/path-robust"), &robust, "robust");

    println!("ratios: naive/clean = {:.2}, robust/clean = {:.2}", e1 / e0, e2 / e0);
    assert!(e1 > 3.0 * e0, "naive not contaminated enough");
    assert!(e2 <= 1.5 * e0, "robust run did not recover");
}
