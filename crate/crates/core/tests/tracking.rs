//! Rotated against fixed templates on synthetic rotations with known truth.

use rotdrag_core::codec::{LatentCodec, PixelCodec};
use rotdrag_core::diffusion::LatentCode;
use rotdrag_core::engine::tracking::nearest_neighbor;
use rotdrag_core::geometry::rotate_point;
use rotdrag_core::synth::{rotation_trial, RotationTrial};
use rotdrag_core::{AngleRad, BinaryMask, Components, DragConfig, Session};

/// Tracks the trial's handle from `start` with the template the engine would
/// use at `angle`; returns the distance to the true position.
fn track(trial: &RotationTrial, angle: AngleRad) -> f64 {
    let (h, w) = (trial.image.height(), trial.image.width());
    let cfg = DragConfig::new(
        trial.image.clone(),
        vec![trial.source],
        vec![trial.truth],
        BinaryMask::full(h, w),
        "",
    );
    let parts = Components::reference();
    let mut session = Session::new(cfg, parts.clone()).unwrap();
    let p = session.config().params.clone();
    let template = session.template_for(0, angle).unwrap();
    let current = parts
        .ddim
        .invert(
            &LatentCode::clean(PixelCodec.encode(&trial.rotated).unwrap()),
            p.t_edit,
            parts.denoiser.as_ref(),
            "",
            p.n_ddim_steps,
        )
        .unwrap();
    let fm = session.features_of(&current).unwrap();
    nearest_neighbor(&fm, &template, trial.start, p.r2)
        .unwrap()
        .distance(trial.truth)
}

#[test]
fn truth_follows_the_rotation() {
    let t = rotation_trial(AngleRad::from_degrees(50.0), 3);
    assert!(rotate_point(t.source, t.pivot, t.angle).distance(t.truth) < 1e-9);
    assert!((t.start.x - t.truth.x).abs() <= 1.0 && (t.start.y - t.truth.y).abs() <= 1.0);
}

#[test]
fn rotated_templates_track_and_fixed_ones_drift() {
    let mut rotated_ok = 0;
    let mut fixed_ok_at_large_angles = Vec::new();
    for k in 1..=8u64 {
        let angle = AngleRad::from_degrees(10.0 * k as f64);
        for seed in 0..10u64 {
            let trial = rotation_trial(angle, seed * 100 + k);
            if track(&trial, angle) <= 1.5 {
                rotated_ok += 1;
            }
            if k >= 4 {
                let e = track(&trial, AngleRad::ZERO);
                if e <= 1.5 {
                    fixed_ok_at_large_angles.push((k * 10, seed, e));
                }
            }
        }
    }
    assert!(rotated_ok >= 76, "{rotated_ok}/80");
    assert!(
        fixed_ok_at_large_angles.is_empty(),
        "{fixed_ok_at_large_angles:?}"
    );
}

#[test]
fn template_matches_itself_without_rotation() {
    let t = rotation_trial(AngleRad::ZERO, 1);
    assert_eq!(t.truth, t.source);
    let mut same = t.clone();
    same.rotated = t.image.clone();
    same.start = t.source;
    assert_eq!(track(&same, AngleRad::ZERO), 0.0);
}
