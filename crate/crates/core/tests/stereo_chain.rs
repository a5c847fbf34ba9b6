//! The library stages chained in memory on a small rendered pair.

use stereoforge::adjust::{bundle_adjust, detect_tie_points, reprojection_rms, CameraAdjustment, RobustLossParams, TieParams};
use stereoforge::align::{icp_align, transform_cloud, IcpParams};
use stereoforge::densematch::{match_dense, Affine2, Crop, MatchParams};
use stereoforge::geom::{ImagePoint, Vec3};
use stereoforge::ingest::Lattice;
use stereoforge::mosaic::mosaic;
use stereoforge::pairsel::{convergence_from_bh, pair_geometry};
use stereoforge::recon::{cloud_from_disparity, grid_dem, GriddingParams, DEFAULT_MAX_MISS};
use stereoforge::synth::{make_stereo_fixture, perturb_meta, reference_dtm, SceneSpec};
use stereoforge::validate::grid_stats;

const SIZE: usize = 160;
const GSD: f64 = 0.3;

#[test]
fn rendered_pair_reconstructs_truth() {
    let spec = SceneSpec::cratered(3, 25);
    let fx = make_stereo_fixture(&spec, 0.5, GSD, 100_000.0, SIZE).unwrap();
    let g = pair_geometry(&fx.meta1, &fx.meta2).unwrap();
    assert!((g.bh_ratio - 0.5).abs() < 1e-6);
    assert!((g.convergence_deg - convergence_from_bh(0.5)).abs() < 0.5);

    // a small navigation error that bundle adjustment has to absorb
    let bias = CameraAdjustment {
        rotation_delta: Vec3::new(0.001, -0.0005, 0.0).map(f64::to_radians),
        position_delta: Vec3::new(1.0, -2.0, 1.5),
    };
    let meta2 = perturb_meta(&fx.meta2, &bias).unwrap();
    let cams = [fx.meta1.camera().unwrap(), meta2.camera().unwrap()];
    let tp = TieParams { max_points: 120, ground_height: spec.base_elevation, ..TieParams::default() };
    let ties = detect_tie_points(&fx.img1, &fx.img2, [&cams[0], &cams[1]], &tp).unwrap();
    assert!(ties.len() >= 30, "{} ties", ties.len());
    let before = reprojection_rms([&cams[0], &cams[1]], &ties).unwrap();
    let res = bundle_adjust([&cams[0], &cams[1]], &ties, &RobustLossParams::default()).unwrap();
    let adj = [res.adjustments[0].apply(&cams[0]), res.adjustments[1].apply(&cams[1])];
    let after = reprojection_rms([&adj[0], &adj[1]], &res.ties).unwrap();
    assert!(after < before && after < 1.0, "{before} -> {after}");

    let from: Vec<ImagePoint> = res.ties.iter().map(|t| t.obs1).collect();
    let to: Vec<ImagePoint> = res.ties.iter().map(|t| t.obs2).collect();
    let prealign = Affine2::fit(&from, &to).unwrap();
    let crop = Crop { x_min: 20, y_min: 20, width: SIZE - 40, height: SIZE - 40 };
    let params = MatchParams { left_crop: Some(crop), ..MatchParams::default() };
    let disp = match_dense(&fx.img1, &fx.img2, &params, &prealign).unwrap();
    assert!(disp.valid_fraction() > 0.6, "{}", disp.valid_fraction());

    let cloud = cloud_from_disparity(&disp, &adj[0], &adj[1], DEFAULT_MAX_MISS);
    let reference = reference_dtm(&fx.truth, 2.0).unwrap();
    let icp = icp_align(&cloud, &reference, &IcpParams::default()).unwrap();
    assert!(icp.final_rms <= icp.rms_trace[0]);
    let aligned = transform_cloud(&cloud, &icp.transform);

    let lattice = Lattice::covering(-12.0, -12.0, 12.0, 12.0, 1.0).unwrap();
    let dem = grid_dem(&aligned, &GriddingParams::with_cell_size(1.0), lattice).unwrap();
    assert!(dem.valid_fraction() > 0.9, "{}", dem.valid_fraction());
    let stats = grid_stats(&dem, &fx.truth).unwrap();
    assert!(stats.rmse < 2.0 * GSD, "rmse {}", stats.rmse);
    assert!(stats.mean_delta.abs() < 0.2, "bias {}", stats.mean_delta);

    let fused = mosaic(&dem, &reference, 5.0).unwrap();
    assert_eq!(fused.valid_fraction(), 1.0);
}

#[test]
fn prealignment_alone_is_close_to_truth_on_an_unbiased_pair() {
    // with exact cameras, tie observations reproject to sub-pixel accuracy
    let spec = SceneSpec::cratered(4, 10);
    let fx = make_stereo_fixture(&spec, 0.5, GSD, 100_000.0, 96).unwrap();
    let cams = [fx.meta1.camera().unwrap(), fx.meta2.camera().unwrap()];
    let tp = TieParams { max_points: 60, ground_height: spec.base_elevation, ..TieParams::default() };
    let ties = detect_tie_points(&fx.img1, &fx.img2, [&cams[0], &cams[1]], &tp).unwrap();
    assert!(!ties.is_empty());
    for t in &ties {
        let p = cams[1].project(&t.world).unwrap();
        assert!(p.distance(&t.obs2) < 1.0, "{p:?} vs {:?}", t.obs2);
    }
}
