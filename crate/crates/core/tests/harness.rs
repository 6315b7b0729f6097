use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::Matrix2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rotdrag_core::case::DragCase;
use rotdrag_core::geometry::{corner_error, frame_corners};
use rotdrag_core::harness::estimate::{match_keypoints, ransac_homography};
use rotdrag_core::harness::*;
use rotdrag_core::synth::{arc_drag_config, textured_image};
use rotdrag_core::*;

fn sources() -> Vec<Image> {
    (0..4).map(|i| textured_image(160, 160, 40 + i)).collect()
}

fn curate(category: AffineCategory, count: usize, ranges: &ParamRanges) -> Vec<AffineCase> {
    curate_affine_cases(
        &sources(),
        category,
        count,
        7,
        ranges,
        &CurationOptions::default(),
    )
    .unwrap()
}

fn linear_part(h: &Homography) -> Matrix2<f64> {
    let r = h.rows();
    Matrix2::new(r[0][0], r[0][1], r[1][0], r[1][1])
}

fn project(h: &Homography, p: Point2) -> Point2 {
    let r = h.rows();
    let w = r[2][0] * p.x + r[2][1] * p.y + r[2][2];
    Point2::new(
        (r[0][0] * p.x + r[0][1] * p.y + r[0][2]) / w,
        (r[1][0] * p.x + r[1][1] * p.y + r[1][2]) / w,
    )
}

#[test]
fn curated_transforms_are_pure() {
    for category in AffineCategory::ALL {
        for case in curate(category, 100, &ParamRanges::default()) {
            assert_eq!(case.category, category);
            assert_eq!(case.params.category(), category);
            let r = case.h_gt.rows();
            let a = linear_part(&case.h_gt);
            let affine_row = r[2][0] == 0.0 && r[2][1] == 0.0;
            match category {
                AffineCategory::Rotation => {
                    let sv = a.singular_values();
                    assert!(
                        (sv[0] - 1.0).abs() < 1e-9 && (sv[1] - 1.0).abs() < 1e-9,
                        "{sv:?}"
                    );
                    assert!(affine_row);
                }
                AffineCategory::Translation => {
                    assert_eq!(a, Matrix2::identity());
                    assert!(affine_row);
                    assert!(r[0][2].hypot(r[1][2]) <= 10.0);
                }
                AffineCategory::Scaling => {
                    assert_eq!(a[(0, 1)], 0.0);
                    assert_eq!(a[(1, 0)], 0.0);
                    assert!((a[(0, 0)] - a[(1, 1)]).abs() < 1e-12);
                    assert!(a[(0, 0)] > 0.0 && (a[(0, 0)] - 1.0).abs() > 1e-3);
                    assert!(affine_row);
                }
                AffineCategory::Perspective => {
                    assert!(!affine_row);
                }
            }
            // everything but translation fixes the crop center
            let side = case.reference.width();
            let c = Point2::new((side - 1) as f64 / 2.0, (side - 1) as f64 / 2.0);
            if category != AffineCategory::Translation {
                assert!(project(&case.h_gt, c).distance(c) < 1e-9);
            }
        }
    }
}

#[test]
fn crops_and_their_images_stay_inside_the_source() {
    let srcs = sources();
    for category in AffineCategory::ALL {
        for case in curate(category, 50, &ParamRanges::default()) {
            let src = &srcs[case.source_index];
            let (w, h) = (src.width() as f64, src.height() as f64);
            let side = case.reference.width();
            assert_eq!(case.reference.height(), side);
            assert_eq!(case.warped.width(), side);
            let inv = case.h_gt.matrix().try_inverse().unwrap();
            let inv = Homography::new(inv).unwrap();
            for c in frame_corners(side, side) {
                for m in [&case.h_gt, &inv] {
                    let q = project(m, c).add(case.offset);
                    assert!(
                        q.x >= 0.0 && q.y >= 0.0 && q.x <= w - 1.0 && q.y <= h - 1.0,
                        "{q:?}"
                    );
                }
            }
            let (ox, oy) = (case.offset.x as usize, case.offset.y as usize);
            assert_eq!(
                case.reference.data()[[1, 3, 5]],
                src.data()[[1, oy + 3, ox + 5]]
            );
        }
    }
}

#[test]
fn corner_error_is_the_mean_corner_displacement() {
    let id = Homography::identity();
    let t = Homography::translation(3.0, 4.0);
    assert!((corner_error(&t, &id, 64, 64).unwrap() - 5.0).abs() < 1e-12);
    let s = Homography::from_rows([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    // corners (0,0) (9,0) (9,9) (0,9) move by 0, 9, 9*sqrt2, 9
    let want = (0.0 + 9.0 + 9.0 * 2f64.sqrt() + 9.0) / 4.0;
    assert!((corner_error(&s, &id, 10, 10).unwrap() - want).abs() < 1e-12);
}

#[test]
fn identity_cases_are_all_correct() {
    let mut cases = Vec::new();
    for category in AffineCategory::ALL {
        cases.extend(curate(category, 5, &ParamRanges::identity()));
    }
    let report = evaluate_method(
        &cases,
        &Components::reference(),
        "reference",
        &EvalOptions::default(),
    )
    .unwrap();
    for s in &report.scores {
        assert_eq!(s.correct, s.total, "{s:?}");
    }
}

#[test]
fn reference_features_recover_small_translations() {
    let cases = curate(AffineCategory::Translation, 40, &ParamRanges::default());
    let report = evaluate_method(
        &cases,
        &Components::reference(),
        "reference",
        &EvalOptions::default(),
    )
    .unwrap();
    let acc = report
        .score(AffineCategory::Translation)
        .accuracy()
        .unwrap();
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn scrambled_features_score_near_zero() {
    let mut cases = Vec::new();
    for category in AffineCategory::ALL {
        cases.extend(curate(category, 20, &ParamRanges::default()));
    }
    let parts = Components {
        backend: Arc::new(ScrambledBackend::new(ReferenceBackend::default(), 9)),
        ..Components::reference()
    };
    let report = evaluate_method(&cases, &parts, "scrambled", &EvalOptions::default()).unwrap();
    for s in &report.scores {
        assert!(s.accuracy().unwrap() <= 0.05, "{s:?}");
    }
}

#[test]
fn reports_are_reproducible() {
    let run = || {
        let mut cases = Vec::new();
        for category in AffineCategory::ALL {
            cases.extend(curate(category, 3, &ParamRanges::default()));
        }
        evaluate_method(
            &cases,
            &Components::reference(),
            "reference",
            &EvalOptions::default(),
        )
        .unwrap()
        .to_json()
    };
    assert_eq!(run(), run());
}

#[test]
fn estimate_ignores_keypoint_order() {
    let case = &curate(AffineCategory::Rotation, 1, &ParamRanges::default())[0];
    let feats = |img: &Image| {
        let parts = Components::reference();
        let latent = LatentCode::clean(parts.codec.encode(img).unwrap());
        parts
            .backend
            .extract(&latent, parts.denoiser.as_ref(), "")
            .unwrap()
    };
    let (a, b) = (feats(&case.reference), feats(&case.warped));
    let side = case.reference.width();
    let mut kps = keypoint_grid(side, side, 8, 6.0);
    let h1 = ransac_homography(&match_keypoints(&a, &b, &kps).unwrap(), 3).unwrap();
    kps.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let h2 = ransac_homography(&match_keypoints(&a, &b, &kps).unwrap(), 3).unwrap();
    assert_eq!(h1.rows(), h2.rows());
}

#[test]
fn empty_inputs_are_rejected() {
    let r = curate_affine_cases(
        &sources(),
        AffineCategory::Scaling,
        0,
        1,
        &ParamRanges::default(),
        &CurationOptions::default(),
    );
    assert!(matches!(r, Err(Error::EmptyBenchmark)));
    let make = || Ok(Components::reference());
    let r = run_drag_benchmark(&[], &DragBenchOptions::default(), &make);
    assert!(matches!(r, Err(Error::EmptyBenchmark)));
}

#[test]
fn drag_benchmark_reports_per_case_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let arc = DragCase::write_config(dir.path(), "arc", &arc_drag_config(30.0)).unwrap();
    let mut still = arc_drag_config(30.0);
    still.targets = still.sources.clone();
    let still = DragCase::write_config(dir.path(), "still", &still).unwrap();
    let broken: PathBuf = dir.path().join("broken.json");
    std::fs::write(&broken, "{ \"image\": 3").unwrap();

    let out = dir.path().join("out");
    let opts = DragBenchOptions {
        workers: 2,
        out_dir: Some(out.clone()),
        ..Default::default()
    };
    let make = || Ok(Components::reference());
    let run = run_drag_benchmark(&[arc.clone()], &opts, &make).unwrap();
    assert_eq!(run.summary.convergence_rate, 1.0);
    assert!(run.summary.mean_final_distance.unwrap() < 2.0);
    assert!(out.join("summary.json").exists());
    assert!(out.join("cases/0000_arc/result.png").exists());
    assert!(out.join("cases/0000_arc/trajectory.ndjson").exists());

    let run = run_drag_benchmark(&[still, broken, arc], &opts, &make).unwrap();
    let s = &run.summary;
    assert_eq!((s.cases, s.completed, s.failed, s.converged), (3, 2, 1, 2));
    assert_eq!(s.records[0].steps, 0);
    assert_eq!(s.records[0].final_mean_distance, Some(0.0));
    assert!(s.records[1]
        .failure
        .as_deref()
        .unwrap()
        .contains("broken.json"));
    assert!(run.results[1].is_none());
    assert!((s.convergence_rate - 2.0 / 3.0).abs() < 1e-12);
}
