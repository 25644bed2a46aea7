mod common;

use common::*;
use nalgebra::Vector3;
use rand::Rng;
use splatpose::render::{
    pose_gradient, pose_gradient_fd_step, rasterize, CameraIntrinsics, LossWeights, RenderMode, Side,
};
use splatpose::scene::ply::{read_ply, write_ply};
use splatpose::scene::synth::{random_cloud, synth_scene, Shape, SynthSpec};
use splatpose::{GaussianModel, RigidTransform};

fn max_rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(1.0)
}

fn ply_error(a: &GaussianModel, b: &GaussianModel) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        let pairs = a.positions[i]
            .iter()
            .zip(b.positions[i].iter())
            .chain(a.scales[i].iter().zip(b.scales[i].iter()))
            .chain(a.rotations[i].coords.iter().zip(b.rotations[i].coords.iter()))
            .chain(std::iter::once((&a.opacities[i], &b.opacities[i])))
            .chain(a.sh[i].iter().flatten().zip(b.sh[i].iter().flatten()));
        for (x, y) in pairs {
            worst = worst.max(max_rel(*x, *y));
        }
    }
    worst
}

#[test]
fn ply_roundtrip_over_1000_models() {
    let mut worst = 0.0f64;
    for seed in 0..1000 {
        let model = random_cloud(1 + (seed as usize % 7), 0.2, seed).unwrap();
        let mut buf = Vec::new();
        write_ply(&model, &mut buf).unwrap();
        let back = read_ply(buf.as_slice()).unwrap();
        assert_eq!(back.len(), model.len());
        worst = worst.max(ply_error(&model, &back));
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn project_backproject_roundtrip_over_1000_points() {
    let mut r = rng(3);
    let k = CameraIntrinsics::new(321.5, 318.0, 160.2, 119.7, 320, 240).unwrap();
    for _ in 0..1000 {
        let p = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(0.1..5.0));
        let uv = k.project(&p);
        let back = k.backproject(uv.x, uv.y, p.z);
        assert!((back - p).amax() < 1e-9, "{p} {back}");
    }
}

#[test]
fn pose_gradient_matches_central_differences() {
    let k = CameraIntrinsics::new(200.0, 200.0, 63.5, 63.5, 128, 128).unwrap();
    let w = LossWeights::default();
    for seed in 0..8 {
        let mut r = rng(100 + seed);
        let model = random_cloud(300, 0.05, seed).unwrap();
        let t = RigidTransform::from_parts(splatpose::lie::exp_so3(&random_vec(&mut r, 1.0)), Vector3::new(0.0, 0.0, 0.45));
        let truth = t.perturb_left(&splatpose::Twist::new(random_vec(&mut r, 0.005), random_vec(&mut r, 0.05)));
        let obs = rasterize(&model, &truth, &k, RenderMode::All).unwrap();
        for side in [Side::Left, Side::Right] {
            let an = pose_gradient(&model, &t, &k, &obs, &w, side).unwrap();
            let fd = pose_gradient_fd_step(&model, &t, &k, &obs, &w, side, 1e-6).unwrap();
            let err = (an - fd).amax() / fd.amax();
            assert!(err < 1e-2, "seed {seed} {side:?}: {err}\n{an}\n{fd}");
        }
    }
}

/// Entry distance of a ray from the camera center into the posed box.
fn ray_box(dir: &Vector3<f64>, t: &RigidTransform, half: f64) -> Option<f64> {
    let inv = t.inverse();
    let o = inv.translation;
    let d = inv.rotation * dir;
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        let (t1, t2) = ((-half - o[a]) / d[a], (half - o[a]) / d[a]);
        lo = lo.max(t1.min(t2));
        hi = hi.min(t1.max(t2));
    }
    (hi >= lo && lo > 0.0).then_some(lo)
}

#[test]
fn rendered_depth_matches_box_geometry() {
    let side = 0.1;
    let model = synth_scene(&SynthSpec {
        shape: Shape::Cube { side },
        count: 2000,
        seed: 2,
        textureless: false,
    })
    .unwrap();
    let k = CameraIntrinsics::new(320.0, 320.0, 127.5, 127.5, 256, 256).unwrap();
    let mut r = rng(8);
    for _ in 0..4 {
        let t = RigidTransform::from_parts(splatpose::lie::exp_so3(&random_vec(&mut r, 2.0)), Vector3::new(0.01, -0.01, 0.5));
        let f = rasterize(&model, &t, &k, RenderMode::All).unwrap();
        let (mut checked, mut bad) = (0, 0);
        let mut errs = Vec::new();
        for v in 0..k.height {
            for u in 0..k.width {
                let i = f.index(u, v);
                let dir = k.backproject(u as f64, v as f64, 1.0);
                // depth along the optical axis: the ray direction has z = 1
                let Some(z) = ray_box(&dir, &t, side / 2.0) else { continue };
                if !f.in_mask(i) {
                    continue;
                }
                checked += 1;
                let e = (f.depth[i] - z) / z;
                errs.push(e);
                if e.abs() > 0.01 {
                    bad += 1;
                }
            }
        }
        // centers of flat splats sit on the faces, but compositing by center
        // depth pulls oblique faces forward by up to a splat radius
        assert!(checked > 1000);
        assert!((bad as f64) < 0.2 * checked as f64, "{bad} of {checked} pixels off by more than 1%");
        errs.sort_by(f64::total_cmp);
        assert!(errs[errs.len() / 2].abs() < 0.005, "median {}", errs[errs.len() / 2]);
    }
}

#[test]
fn mask_covers_the_projected_box() {
    let model = synth_scene(&SynthSpec {
        shape: Shape::Cube { side: 0.1 },
        count: 2000,
        seed: 2,
        textureless: true,
    })
    .unwrap();
    let k = CameraIntrinsics::new(160.0, 160.0, 63.5, 63.5, 128, 128).unwrap();
    let t = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 0.5));
    let f = rasterize(&model, &t, &k, RenderMode::All).unwrap();
    // the front face at 0.45 m spans 0.1 / 0.45 * 160 px; footprints
    // reach about a pixel past each edge
    let side = 0.1 / 0.45 * 160.0;
    let n = f.mask_count() as f64;
    assert!(n > side * side && n < (side + 3.0) * (side + 3.0), "{n}");
}
