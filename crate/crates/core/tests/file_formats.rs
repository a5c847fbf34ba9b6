//! Every on-disk format written and read back through real files.

use proptest::prelude::*;

use stereoforge::adjust::{read_adjustment, read_ties, write_adjustment, write_ties, AdjustmentRecord, CameraAdjustment, TiePoint};
use stereoforge::align::{read_transform, write_transform};
use stereoforge::densematch::{read_disparity, write_disparity, Affine2, DisparityMap};
use stereoforge::geom::{ImagePoint, RigidTransform, Vec3};
use stereoforge::ingest::{
    parse_meta, read_cloud, read_dem, read_image, write_cloud, write_dem, write_image, write_meta, DemGrid, Lattice,
    PointCloud, RasterImage,
};
use stereoforge::synth::{make_stereo_fixture, read_scene_spec, write_scene_spec, SceneSpec};
use stereoforge::Error;

#[test]
fn fixture_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let spec = SceneSpec::cratered(2, 5);
    let fx = make_stereo_fixture(&spec, 0.6, 0.3, 100_000.0, 48).unwrap();

    write_meta(&fx.meta1, p("a.meta")).unwrap();
    assert_eq!(parse_meta(p("a.meta")).unwrap(), fx.meta1);
    write_dem(&fx.truth, p("t.asc")).unwrap();
    assert_eq!(read_dem(p("t.asc")).unwrap(), fx.truth);
    write_scene_spec(&spec, p("s.spec")).unwrap();
    assert_eq!(read_scene_spec(p("s.spec")).unwrap(), spec);

    // 16-bit PGM stores rounded, clamped DN
    write_image(&fx.img1, p("a.pgm")).unwrap();
    let back = read_image(p("a.pgm")).unwrap();
    assert_eq!((back.n_cols, back.n_rows), (48, 48));
    for (a, b) in fx.img1.values.iter().zip(&back.values) {
        assert_eq!(a.round().clamp(0.0, 65535.0), *b);
    }
}

#[test]
fn pipeline_intermediates_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);

    let ties = vec![
        TiePoint { obs1: ImagePoint::new(1.25, 2.5), obs2: ImagePoint::new(3.0 + 1e-13, 4.0), world: Vec3::new(-1.0 / 3.0, 2.0, -1500.7) },
        TiePoint { obs1: ImagePoint::new(0.0, 0.0), obs2: ImagePoint::new(511.9, 7.0), world: Vec3::new(1e-7, -2e5, 3.0) },
    ];
    write_ties(&ties, p("ties.txt")).unwrap();
    assert_eq!(read_ties(p("ties.txt")).unwrap(), ties);

    let rec = AdjustmentRecord {
        cameras: [
            CameraAdjustment { rotation_delta: Vec3::new(1e-5, -2e-6, 0.0), position_delta: Vec3::new(0.1, 2.0, -3.0) },
            CameraAdjustment::default(),
        ],
        final_cost: 12.5,
        iterations: 7,
        hit_iteration_cap: false,
        n_ties: 2,
        reprojection_rms: 0.0123,
        prealign: Affine2::translation(-3.5, 0.25),
    };
    write_adjustment(&rec, p("cams.adjust")).unwrap();
    assert_eq!(read_adjustment(p("cams.adjust")).unwrap(), rec);

    let t = RigidTransform::from_axis_angle(Vec3::new(0.01, -0.02, 0.3), Vec3::new(10.0, -5.0, 20.0));
    write_transform(&t, p("icp.transform")).unwrap();
    assert_eq!(read_transform(p("icp.transform")).unwrap(), t);

    let mut map = DisparityMap::invalid(4, 3, 10, 20);
    map.dx[1] = 0.5;
    map.dy[1] = -0.25;
    map.valid[1] = true;
    write_disparity(&map, p("d.txt")).unwrap();
    assert_eq!(read_disparity(p("d.txt")).unwrap(), map);
}

#[test]
fn missing_files_report_their_path() {
    let err = read_dem("/nonexistent/dir/x.asc").unwrap_err();
    assert!(matches!(&err, Error::Io { path, .. } if path.ends_with("x.asc")), "{err}");
    assert!(parse_meta("/nonexistent/a.meta").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dem_values_survive_exactly(vals in prop::collection::vec(prop::option::of(-1e4f64..1e4), 12), cs in 0.1f64..10.0) {
        let dir = tempfile::tempdir().unwrap();
        let l = Lattice::new(4, 3, -7.5, 12.25, cs).unwrap();
        let mut dem = DemGrid::empty(l);
        for (i, v) in vals.iter().enumerate() {
            dem.set(i % 4, i / 4, *v);
        }
        write_dem(&dem, dir.path().join("g.asc")).unwrap();
        prop_assert_eq!(read_dem(dir.path().join("g.asc")).unwrap(), dem);
    }

    #[test]
    fn clouds_survive_exactly(pts in prop::collection::vec(prop::array::uniform3(-1e6f64..1e6), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let n = pts.len();
        let cloud = PointCloud::new(pts.into_iter().map(Vec3::from).collect(), Some((0..n).map(|i| i as f64 / 7.0).collect())).unwrap();
        write_cloud(&cloud, dir.path().join("c.xyz")).unwrap();
        prop_assert_eq!(read_cloud(dir.path().join("c.xyz")).unwrap(), cloud);
    }

    #[test]
    fn integral_images_survive_exactly(vals in prop::collection::vec(0u16..=u16::MAX, 6)) {
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::new(3, 2, vals.iter().map(|&v| v as f64).collect()).unwrap();
        write_image(&img, dir.path().join("i.pgm")).unwrap();
        prop_assert_eq!(read_image(dir.path().join("i.pgm")).unwrap(), img);
    }
}
