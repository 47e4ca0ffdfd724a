//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints a PASS/FAIL line; exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use anytime4d_core::evalmetrics::{
    acc_comp_nc, apd, ate_rpe, depth_metrics, epe, ransac_sim3, umeyama_sim3, Correspondences, DepthAlignment,
    MetricReport, RansacConfig, TrackAlignment, DEFAULT_APD_THRESHOLDS,
};
use anytime4d_core::geometry::{project, CameraPose, DepthMap, Sim3, Vec3};
use anytime4d_core::representation::{FactorizedFrame4D, Timestamp};
use anytime4d_core::rng::stream;
use anytime4d_core::scenegen::{cast_ray, generate, GroundTruthBundle, RgbImage, SceneRanges, SceneSpec};
use anytime4d_nn::eval::evaluate_tracking;
use anytime4d_nn::gradcheck::check_params;
use anytime4d_nn::model::{images_tensor, Model, ModelConfig};
use anytime4d_nn::streaming::LatentCache;
use anytime4d_nn::training::{build_supervision_plan, clip_loss, step_seed, train_step, AdamW, TrainConfig};
use anytime4d_nn::Graph;
use nalgebra::{Matrix2, Matrix3, Matrix4, SymmetricEigen, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_pcg::Pcg64;
use serde_json::json;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_rotation(r: &mut Pcg64) -> UnitQuaternion<f64> {
    let axis = Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
    UnitQuaternion::from_scaled_axis(axis.normalize() * r.gen_range(0.0..std::f64::consts::PI))
}

fn random_point(r: &mut Pcg64, s: f64) -> Vec3 {
    Vec3::new(r.gen_range(-s..s), r.gen_range(-s..s), r.gen_range(-s..s))
}

fn sim3_error(a: &Sim3, b: &Sim3) -> f64 {
    let ds = (a.scale - b.scale).abs();
    let dr = a.rotation.angle_to(&b.rotation);
    let dt = (a.translation - b.translation).norm();
    ds.max(dr).max(dt)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut r = stream(101, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.gen_range(10..=1000);
        let truth = Sim3::new(r.gen_range(0.2..5.0), random_rotation(&mut r), random_point(&mut r, 10.0));
        let pred: Vec<Vec3> = (0..n).map(|_| random_point(&mut r, 2.0)).collect();
        let gt = pred.iter().map(|p| truth.apply(p)).collect();
        let est = umeyama_sim3(&Correspondences::new(pred, gt).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        worst = worst.max(sim3_error(&est, &truth));
    }
    check(worst < 1e-9, || format!("umeyama worst parameter error {worst:e}"))?;

    let mut recovered = 0;
    for trial in 0..100 {
        let n = r.gen_range(20..=400);
        let truth = Sim3::new(r.gen_range(0.2..5.0), random_rotation(&mut r), random_point(&mut r, 10.0));
        let pred: Vec<Vec3> = (0..n).map(|_| random_point(&mut r, 2.0)).collect();
        let outliers = (n as f64 * 0.3).round() as usize;
        let gt: Vec<Vec3> = pred
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let q = truth.apply(p);
                if i < outliers {
                    let dir = random_point(&mut r, 1.0).normalize();
                    q + dir * r.gen_range(1.0..20.0)
                } else {
                    q
                }
            })
            .collect();
        let cfg = RansacConfig {
            seed: trial,
            ..RansacConfig::default()
        };
        let c = Correspondences::new(pred, gt).map_err(|e| e.to_string())?;
        if let Ok((est, _)) = ransac_sim3(&c, &cfg) {
            if sim3_error(&est, &truth) < 1e-6 {
                recovered += 1;
            }
        }
    }
    check(recovered >= 99, || format!("ransac recovered {recovered}/100"))?;
    let secs = t0.elapsed().as_secs_f64();
    check(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("umeyama worst {worst:.1e}; ransac {recovered}/100; {secs:.2}s"))
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        patch_size: 8,
        embed_dim: 16,
        encoder_layers: 2,
        heads: 2,
        motion_layers: 2,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::new(cfg.clone(), &mut stream(201, 0)).map_err(|e| e.to_string())?;
    // Perturb away from zero-initialized modulation weights so every
    // parameter group receives gradient.
    let mut r = stream(202, 0);
    for t in model.params.values_mut() {
        t.data.iter_mut().for_each(|x| *x += r.gen_range(-0.1..0.1));
    }
    let ranges = SceneRanges {
        num_frames: (2, 2),
        height: 16,
        ..SceneRanges::default()
    };
    let b = generate(&SceneSpec::random(203, &ranges)).map_err(|e| e.to_string())?.recentered_on(0).normalized().map_err(|e| e.to_string())?.0;
    let train = TrainConfig::default();
    let plan = build_supervision_plan(&b, 204, &train.supervision).map_err(|e| e.to_string())?;
    let groups = check_params(&model.params, 1e-5, |p, g| {
        let m = Model::with_params(cfg.clone(), p.clone()).unwrap();
        let img = g.constant(images_tensor(&b.frames));
        clip_loss(&m, g, img, &b, &plan, &train).unwrap().total
    });
    let worst = groups.iter().max_by(|a, b| a.error.total_cmp(&b.error)).ok_or("no parameters")?;
    check(worst.error < 1e-4, || format!("{} relative error {:e}", worst.name, worst.error))?;
    let secs = t0.elapsed().as_secs_f64();
    check(secs < 300.0, || format!("took {secs:.0}s"))?;
    Ok(format!("{} groups, worst {} at {:.1e}; {secs:.0}s", groups.len(), worst.name, worst.error))
}

fn random_bundles(count: u64, base_seed: u64, ranges: &SceneRanges) -> Result<Vec<(SceneSpec, GroundTruthBundle)>, String> {
    (0..count)
        .map(|k| {
            let spec = SceneSpec::random(base_seed + k, ranges);
            let b = generate(&spec).map_err(|e| e.to_string())?;
            Ok((spec, b))
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for (spec, b) in random_bundles(20, 300, &SceneRanges::default())? {
        let intr = &b.intrinsics;
        let n = b.num_frames();
        for i in 0..n {
            let base = b.base_pointmap(i);
            for tau in 0..n {
                let field = b.displacement(i, tau);
                for px in 0..base.points.len() {
                    if !(base.valid[px] && b.visibility[i][tau][px]) {
                        continue;
                    }
                    let x = base.points[px] + field.deltas[px];
                    let pose = &b.poses[tau];
                    let (u, v, _) = project(&x, intr, pose).ok_or("visible point behind camera")?;
                    let hit = cast_ray(&spec, intr, tau, u, v).ok_or("visible point has no surface")?;
                    let y = pose.translation + hit.depth * (pose.rotation * intr.camera_ray(u, v));
                    worst = worst.max((x - y).norm());
                    checked += 1;
                }
            }
        }
    }
    check(checked > 0, || "no pixels checked".into())?;
    check(worst < 1e-5, || format!("worst deviation {worst:e} over {checked} pixels"))?;
    Ok(format!("{checked} pixels, worst {worst:.1e}"))
}

fn frame_from_gt(b: &GroundTruthBundle, source: usize) -> Result<FactorizedFrame4D, String> {
    let mut f = FactorizedFrame4D::new(b.timestamp(source), b.base_pointmap(source));
    for tau in 0..b.num_frames() {
        f.insert(b.displacement(source, tau).clone()).map_err(|e| e.to_string())?;
    }
    Ok(f)
}

fn criterion_4() -> Outcome {
    let mut frames = 0;
    for (_, raw) in random_bundles(20, 400, &SceneRanges::default())? {
        let norm = raw.recentered_on(0).normalized().map_err(|e| e.to_string())?.0;
        for b in [&raw, &norm] {
            for i in 0..b.num_frames() {
                let f = frame_from_gt(b, i)?;
                let composed = f.compose(b.timestamp(i)).map_err(|e| e.to_string())?;
                let base = b.base_pointmap(i);
                let same = composed.valid == base.valid
                    && composed.points.len() == base.points.len()
                    && composed
                        .points
                        .iter()
                        .zip(&base.points)
                        .all(|(a, c)| a.iter().zip(c.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
                check(same, || format!("frame {i} differs from its base pointmap"))?;
                frames += 1;
            }
        }
    }
    Ok(format!("{frames} source frames bit-exact"))
}

fn mean_norm(b: &GroundTruthBundle) -> f64 {
    let maps = b.base_pointmaps();
    let (sum, n) = maps
        .iter()
        .flat_map(|m| m.valid_points())
        .fold((0.0, 0usize), |(s, n), p| (s + p.norm(), n + 1));
    sum / n as f64
}

fn criterion_5() -> Outcome {
    let ranges = SceneRanges {
        num_frames: (2, 6),
        height: 32,
        ..SceneRanges::default()
    };
    let bundles = random_bundles(100, 500, &ranges)?;
    let mut worst_norm = 0.0f64;
    for (_, b) in &bundles {
        let nb = b.recentered_on(0).normalized().map_err(|e| e.to_string())?.0;
        worst_norm = worst_norm.max((mean_norm(&nb) - 1.0).abs());
    }
    check(worst_norm <= 1e-6, || format!("mean norm off by {worst_norm:e}"))?;

    let cfg = ModelConfig {
        patch_size: 8,
        embed_dim: 16,
        encoder_layers: 2,
        heads: 2,
        motion_layers: 1,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::new(cfg, &mut stream(501, 0)).map_err(|e| e.to_string())?;
    let train = TrainConfig::default();
    let losses = |b: &GroundTruthBundle, plan: &anytime4d_nn::training::SupervisionPlan| -> Result<[f64; 5], String> {
        let mut g = Graph::new();
        let img = g.constant(images_tensor(&b.frames));
        let l = clip_loss(&model, &mut g, img, b, plan, &train).map_err(|e| e.to_string())?.breakdown(&g);
        Ok([l.depth, l.ray, l.camera, l.motion, l.total])
    };
    let mut worst_loss = 0.0f64;
    for (_, b) in bundles.iter().take(5) {
        let reference = b.recentered_on(0).normalized().map_err(|e| e.to_string())?.0;
        let plan = build_supervision_plan(&reference, 502, &train.supervision).map_err(|e| e.to_string())?;
        let want = losses(&reference, &plan)?;
        for s in [0.1, 10.0] {
            let scaled = b.scaled(s).recentered_on(0).normalized().map_err(|e| e.to_string())?.0;
            let got = losses(&scaled, &plan)?;
            for (a, c) in want.iter().zip(&got) {
                worst_loss = worst_loss.max((a - c).abs());
            }
        }
    }
    check(worst_loss <= 1e-6, || format!("loss changed by {worst_loss:e} under scene scaling"))?;
    Ok(format!("mean norm within {worst_norm:.1e}; losses within {worst_loss:.1e}"))
}

// Brute-force references for the metric oracles.

fn bf_nearest(q: &Vec3, pts: &[Vec3]) -> (usize, f64) {
    pts.iter()
        .enumerate()
        .map(|(i, p)| (i, (p - q).norm()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

fn bf_normals(pts: &[Vec3], k: usize) -> Vec<Vec3> {
    pts.iter()
        .map(|p| {
            let mut d: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, q)| ((q - p).norm(), i)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let nb: Vec<Vec3> = d[..k].iter().map(|(_, i)| pts[*i]).collect();
            let mean = nb.iter().sum::<Vec3>() / k as f64;
            let cov: Matrix3<f64> = nb.iter().map(|q| (q - mean) * (q - mean).transpose()).sum();
            let e = SymmetricEigen::new(cov);
            let j = e.eigenvalues.imin();
            e.eigenvectors.column(j).normalize()
        })
        .collect()
}

fn bf_cloud(pred: &[Vec3], gt: &[Vec3], k: usize) -> (f64, f64, f64) {
    let p2g: Vec<(usize, f64)> = pred.iter().map(|p| bf_nearest(p, gt)).collect();
    let g2p: Vec<(usize, f64)> = gt.iter().map(|g| bf_nearest(g, pred)).collect();
    let acc = p2g.iter().map(|x| x.1).sum::<f64>() / pred.len() as f64;
    let comp = g2p.iter().map(|x| x.1).sum::<f64>() / gt.len() as f64;
    let (np, ng) = (bf_normals(pred, k), bf_normals(gt, k));
    let a: f64 = p2g.iter().enumerate().map(|(i, (j, _))| np[i].dot(&ng[*j]).abs()).sum::<f64>() / pred.len() as f64;
    let b: f64 = g2p.iter().enumerate().map(|(j, (i, _))| ng[j].dot(&np[*i]).abs()).sum::<f64>() / gt.len() as f64;
    (acc, comp, (a + b) / 2.0)
}

fn bf_tracks(pred: &[Vec3], gt: &[Vec3], valid: &[bool], th: &[f64]) -> (f64, f64) {
    let errs: Vec<f64> = (0..pred.len()).filter(|&i| valid[i]).map(|i| (pred[i] - gt[i]).norm()).collect();
    let epe = errs.iter().sum::<f64>() / errs.len() as f64;
    let mut apd = 0.0;
    for t in th {
        let mut inside = 0;
        for e in &errs {
            if e < t {
                inside += 1;
            }
        }
        apd += inside as f64 * 100.0 / errs.len() as f64;
    }
    (epe, apd / th.len() as f64)
}

fn homogeneous(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

fn bf_trajectory(pred: &[CameraPose], gt: &[CameraPose]) -> (f64, f64, f64) {
    let n = pred.len() as f64;
    let p: Vec<Vector3<f64>> = pred.iter().map(|x| x.translation).collect();
    let g: Vec<Vector3<f64>> = gt.iter().map(|x| x.translation).collect();
    let mp = p.iter().sum::<Vector3<f64>>() / n;
    let mg = g.iter().sum::<Vector3<f64>>() / n;
    let cov: Matrix3<f64> = p.iter().zip(&g).map(|(a, b)| (b - mg) * (a - mp).transpose()).sum::<Matrix3<f64>>() / n;
    let var = p.iter().map(|a| (a - mp).norm_squared()).sum::<f64>() / n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var;
    let t = mg - scale * r * mp;
    let ate = (p.iter().zip(&g).map(|(a, b)| (scale * r * a + t - b).norm_squared()).sum::<f64>() / n).sqrt();

    let aligned: Vec<Matrix4<f64>> = pred
        .iter()
        .map(|x| homogeneous(&(r * x.rotation.to_rotation_matrix().into_inner()), &(scale * r * x.translation + t)))
        .collect();
    let truth: Vec<Matrix4<f64>> = gt
        .iter()
        .map(|x| homogeneous(&x.rotation.to_rotation_matrix().into_inner(), &x.translation))
        .collect();
    let (mut rt, mut rr) = (0.0, 0.0);
    for k in 0..pred.len() - 1 {
        let rel_g = truth[k].try_inverse().unwrap() * truth[k + 1];
        let rel_p = aligned[k].try_inverse().unwrap() * aligned[k + 1];
        let e = rel_g.try_inverse().unwrap() * rel_p;
        rt += Vector3::new(e[(0, 3)], e[(1, 3)], e[(2, 3)]).norm();
        let axis = Vector3::new(e[(2, 1)] - e[(1, 2)], e[(0, 2)] - e[(2, 0)], e[(1, 0)] - e[(0, 1)]);
        let cos = (e[(0, 0)] + e[(1, 1)] + e[(2, 2)] - 1.0) / 2.0;
        rr += (axis.norm() / 2.0).atan2(cos).to_degrees();
    }
    let m = n - 1.0;
    (ate, rt / m, rr / m)
}

fn bf_depth(pred: &[f64], gt: &[f64], shift: bool) -> (f64, f64) {
    let (a, b) = if shift {
        let mut ata = Matrix2::zeros();
        let mut atb = Vector2::zeros();
        for (p, g) in pred.iter().zip(gt) {
            let row = Vector2::new(*p, 1.0);
            ata += row * row.transpose();
            atb += row * *g;
        }
        let x = ata.try_inverse().unwrap() * atb;
        (x[0], x[1])
    } else {
        let mut ratios: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| g / p).collect();
        ratios.sort_by(f64::total_cmp);
        (ratios[(ratios.len() - 1) / 2], 0.0)
    };
    let n = pred.len() as f64;
    let rel = pred.iter().zip(gt).map(|(p, g)| (a * p + b - g).abs() / g).sum::<f64>() / n;
    let within = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| {
            let x = a * **p + b;
            x > 0.0 && (x / **g).max(**g / x) < 1.25
        })
        .count();
    (rel, 100.0 * within as f64 / n)
}

fn random_pose(r: &mut Pcg64) -> CameraPose {
    CameraPose::new(random_rotation(r), random_point(r, 3.0))
}

fn criterion_6() -> Outcome {
    let mut r = stream(601, 0);
    let e = |x: anytime4d_core::Error| x.to_string();
    let mut worst = 0.0f64;
    let mut upd = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for _ in 0..20 {
        // Clouds.
        let (np, ng) = (r.gen_range(20..200), r.gen_range(20..200));
        let pred: Vec<Vec3> = (0..np).map(|_| random_point(&mut r, 1.0)).collect();
        let gt: Vec<Vec3> = (0..ng).map(|_| random_point(&mut r, 1.0)).collect();
        let c = acc_comp_nc(&pred, &gt, 10).map_err(e)?;
        let (acc, comp, nc) = bf_cloud(&pred, &gt, 10);
        upd(c.acc, acc);
        upd(c.comp, comp);
        upd(c.nc.ok_or("nc missing")?, nc);

        // Tracks.
        let n = r.gen_range(1..500);
        let gt: Vec<Vec3> = (0..n).map(|_| random_point(&mut r, 1.0)).collect();
        let pred: Vec<Vec3> = gt.iter().map(|g| g + random_point(&mut r, 0.5)).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| r.gen_bool(0.8)).collect();
        valid[0] = true;
        let (be, ba) = bf_tracks(&pred, &gt, &valid, &DEFAULT_APD_THRESHOLDS);
        upd(epe(&pred, &gt, &valid).map_err(e)?, be);
        upd(apd(&pred, &gt, &valid, &DEFAULT_APD_THRESHOLDS).map_err(e)?, ba);

        // Trajectories.
        let n = r.gen_range(3..60);
        let gt: Vec<CameraPose> = (0..n).map(|_| random_pose(&mut r)).collect();
        let pred: Vec<CameraPose> = gt
            .iter()
            .map(|p| CameraPose::new(p.rotation * UnitQuaternion::from_scaled_axis(random_point(&mut r, 0.1)), p.translation + random_point(&mut r, 0.2)))
            .collect();
        let pe = ate_rpe(&pred, &gt).map_err(e)?;
        let (ate, rt, rr) = bf_trajectory(&pred, &gt);
        upd(pe.ate, ate);
        upd(pe.rpe_t, rt);
        upd(pe.rpe_r, rr);

        // Depth.
        let (w, h) = (r.gen_range(2..20), r.gen_range(2..20));
        let gd: Vec<f64> = (0..w * h).map(|_| r.gen_range(0.5..10.0)).collect();
        let pd: Vec<f64> = gd.iter().map(|g| g * r.gen_range(0.5..1.5) * 0.3 + 0.1).collect();
        let gm = DepthMap::new(w, h, gd.clone(), vec![true; w * h]).map_err(e)?;
        let pm = DepthMap::new(w, h, pd.clone(), vec![true; w * h]).map_err(e)?;
        for (mode, shift) in [(DepthAlignment::Scale, false), (DepthAlignment::ScaleShift, true)] {
            let d = depth_metrics(std::slice::from_ref(&pm), std::slice::from_ref(&gm), mode).map_err(e)?;
            let (rel, delta) = bf_depth(&pd, &gd, shift);
            upd(d.rel, rel);
            upd(d.delta, delta);
        }
    }
    check(worst < 1e-9, || format!("worst oracle mismatch {worst:e}"))?;

    // Perfect predictions.
    let pts: Vec<Vec3> = (0..300).map(|_| random_point(&mut r, 1.0)).collect();
    let valid = vec![true; pts.len()];
    let poses: Vec<CameraPose> = (0..10).map(|_| random_pose(&mut r)).collect();
    let depth = DepthMap::new(10, 10, (0..100).map(|_| r.gen_range(0.5..5.0)).collect(), vec![true; 100]).map_err(e)?;
    let c = acc_comp_nc(&pts, &pts, 10).map_err(e)?;
    let pe = ate_rpe(&poses, &poses).map_err(e)?;
    let d = depth_metrics(std::slice::from_ref(&depth), std::slice::from_ref(&depth), DepthAlignment::Scale).map_err(e)?;
    let got = [
        ("apd", apd(&pts, &pts, &valid, &DEFAULT_APD_THRESHOLDS).map_err(e)?, 100.0),
        ("epe", epe(&pts, &pts, &valid).map_err(e)?, 0.0),
        ("ate", pe.ate, 0.0),
        ("rel", d.rel, 0.0),
        ("delta", d.delta, 100.0),
        ("acc", c.acc, 0.0),
        ("comp", c.comp, 0.0),
        ("nc", c.nc.unwrap_or(f64::NAN), 1.0),
    ];
    for (name, v, want) in got {
        check(v == want, || format!("perfect {name} = {v:e}, expected {want}"))?;
    }
    Ok(format!("worst mismatch {worst:.1e}; perfect cases exact"))
}

fn criterion_7() -> Outcome {
    let t0 = Instant::now();
    let ranges = SceneRanges {
        num_frames: (6, 6),
        height: 64,
        ..SceneRanges::default()
    };
    let data: Vec<GroundTruthBundle> = (0..8)
        .map(|i| -> Result<_, String> {
            let b = generate(&SceneSpec::random(1000 + i, &ranges)).map_err(|e| e.to_string())?;
            Ok(b.recentered_on(0).normalized().map_err(|e| e.to_string())?.0)
        })
        .collect::<Result<_, _>>()?;
    let mut model = Model::<f32>::new(ModelConfig::default(), &mut stream(0, 6)).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        steps: 5000,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(&model.params);
    let eval = |m: &Model<f32>| -> Result<(f64, f64), String> {
        let (mut epe, mut apd) = (0.0, 0.0);
        for b in &data {
            let r = evaluate_tracking(m, b, &[0, 2, 5], TrackAlignment::Sim3Ransac, &RansacConfig::default(), &DEFAULT_APD_THRESHOLDS)
                .map_err(|e| e.to_string())?;
            epe += r.epe / data.len() as f64;
            apd += r.apd / data.len() as f64;
        }
        Ok((epe, apd))
    };
    let (epe0, apd0) = eval(&model)?;
    let mut last = (epe0, apd0);
    let mut steps = 0;
    for step in 0..cfg.steps {
        let clip = &data[step % data.len()];
        let plan = build_supervision_plan(clip, step_seed(cfg.seed, step), &cfg.supervision).map_err(|e| e.to_string())?;
        train_step(&mut model, &mut opt, clip, None, &plan, &cfg, step).map_err(|e| e.to_string())?;
        steps = step + 1;
        if steps % 250 == 0 && steps >= 1000 {
            last = eval(&model)?;
            eprintln!("  criterion 7: step {steps} EPE {:.4} APD {:.2}", last.0, last.1);
            if last.0 <= 0.1 * epe0 && last.1 >= 80.0 {
                break;
            }
        }
    }
    let (epe, apd) = last;
    let detail = format!(
        "init EPE {epe0:.4} (APD {apd0:.1}) -> EPE {epe:.4}, APD {apd:.1} after {steps} steps; {:.0}s",
        t0.elapsed().as_secs_f64()
    );
    check(epe <= 0.1 * epe0 && apd >= 80.0, || detail.clone())?;
    Ok(detail)
}

fn criterion_8() -> Outcome {
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let cfg = ModelConfig {
            patch_size: 4,
            embed_dim: 16,
            encoder_layers: 4,
            heads: 2,
            motion_layers: 1,
            causal: true,
            ..ModelConfig::default()
        };
        let m = Model::<f64>::new(cfg.clone(), &mut stream(800 + trial, 0)).map_err(|e| e.to_string())?;
        let mut r = stream(800 + trial, 1);
        let first = r.gen_range(1..=4);
        let total = first + 10;
        let frames: Vec<RgbImage> = (0..total)
            .map(|_| RgbImage {
                width: 8,
                height: 8,
                data: (0..8 * 8 * 3).map(|_| r.gen_range(0.0..1.0)).collect(),
            })
            .collect();
        let times: Vec<Timestamp> = (0..total).map(|i| Timestamp::new(i, total)).collect();
        let mut cache = LatentCache::new(&cfg, 8, 8).map_err(|e| e.to_string())?;
        for i in 0..first {
            cache.ingest_frame(&m, &frames[i], times[i]).map_err(|e| e.to_string())?;
        }
        let before: Vec<_> = cache.frames().to_vec();
        for i in first..total {
            cache.ingest_frame(&m, &frames[i], times[i]).map_err(|e| e.to_string())?;
        }
        check(cache.frames()[..first] == before[..], || format!("trial {trial}: cached latents changed"))?;

        let lay = m.layout(total, 8, 8).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let img = g.constant(images_tensor(&frames));
        let z = m.encode(&mut g, img, &lay, &times).map_err(|e| e.to_string())?;
        let batch = g.value(z);
        let s = lay.s() * cfg.embed_dim;
        for (f, c) in cache.frames().iter().enumerate() {
            for (a, b) in batch.data[f * s..(f + 1) * s].iter().zip(&c.tokens.data) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(worst < 1e-6, || format!("sequential vs batch deviation {worst:e}"))?;
    Ok(format!("20 trials; worst deviation {worst:.1e}; prefixes bit-identical"))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_anytime4d"))
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn criterion_9() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let base = json!({
        "data": { "count": 2, "seed": 9, "clip_len": 4,
                  "scene": { "num_frames": [4, 4], "height": 32 } },
        "model": { "patch_size": 8, "embed_dim": 32, "encoder_layers": 2, "heads": 2,
                   "motion_layers": 2, "mlp_ratio": 2 },
        "train": { "steps": 30, "learning_rate": 1e-3 },
        "checkpoint_every": 0
    });
    let base_cfg = root.join("base.json");
    std::fs::write(&base_cfg, base.to_string()).map_err(|e| e.to_string())?;
    let data = root.join("data");
    cli(&["gen", "--config", &p(&base_cfg), "--out", &p(&data)])?;

    let variants = [
        ("baseline", json!({})),
        ("no_cross_attn", json!({ "ablation": "no_cross_attn" })),
        ("no_self_attn", json!({ "ablation": "no_self_attn" })),
        ("no_adaln", json!({ "ablation": "no_adaln" })),
        ("points_world", json!({ "output": "points_world" })),
        ("points_local", json!({ "output": "points_local" })),
    ];
    let mut metric_dirs = Vec::new();
    for (name, switch) in &variants {
        let mut cfg = base.clone();
        for (k, v) in switch.as_object().unwrap() {
            cfg["model"][k] = v.clone();
        }
        let cfg_path = root.join(format!("{name}.json"));
        std::fs::write(&cfg_path, cfg.to_string()).map_err(|e| e.to_string())?;
        let run = root.join(name);
        cli(&["train", "--config", &p(&cfg_path), "--data", &p(&data), "--out", &p(&run)])?;
        let ck = run.join("checkpoints/step_000030");
        for seq in ["seq_0000", "seq_0001"] {
            let pred = run.join(format!("pred_{seq}"));
            cli(&["query", "--checkpoint", &p(&ck), "--data", &p(&data.join(seq)), "--source", "1",
                "--targets", "0,1,2,3", "--out", &p(&pred)])?;
            let m = run.join(format!("metrics_{seq}"));
            cli(&["metrics", "--config", &p(&cfg_path), "--pred", &p(&pred), "--gt", &p(&data.join(seq)),
                "--out", &p(&m), "--name", &format!("{name}/{seq}")])?;
            metric_dirs.push(p(&m));
        }
    }
    let report = root.join("report");
    let mut args = vec!["report".to_string(), "--out".into(), p(&report)];
    args.extend(metric_dirs.iter().cloned());
    cli(&args.iter().map(String::as_str).collect::<Vec<_>>())?;

    let mut columns = None;
    for d in &metric_dirs {
        let text = std::fs::read_to_string(Path::new(d).join("metrics.json")).map_err(|e| e.to_string())?;
        let r: MetricReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let cols = r.populated();
        check(cols.iter().all(|c| r.get(c).unwrap().is_finite()), || format!("{}: non-finite metric", r.name))?;
        match &columns {
            None => columns = Some(cols),
            Some(c) => check(*c == cols, || format!("{}: metric set differs", r.name))?,
        }
    }
    let csv = std::fs::read_to_string(report.join("report.csv")).map_err(|e| e.to_string())?;
    let groups: Vec<&str> = csv.lines().skip(1).filter_map(|l| l.split(',').next()).collect();
    for (name, _) in &variants {
        check(groups.contains(name), || format!("report lacks {name}"))?;
    }
    Ok(format!(
        "{} variants trained, queried and scored with {} metrics each; {:.0}s",
        variants.len(),
        columns.map_or(0, |c| c.len()),
        t0.elapsed().as_secs_f64()
    ))
}

fn main() {
    // Ignore libtest-style arguments passed by `cargo test`.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("alignment recovery", criterion_1),
        ("gradient correctness", criterion_2),
        ("generator oracle", criterion_3),
        ("factorization identity", criterion_4),
        ("scene normalization", criterion_5),
        ("metric oracles", criterion_6),
        ("overfit demonstration", criterion_7),
        ("streaming invariance", criterion_8),
        ("ablation harness", criterion_9),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", k + 1);
        if !filter.is_empty() && !filter.iter().any(|x| id.ends_with(x.as_str()) || name.contains(x.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match outcome {
            Ok(d) => println!("PASS {id} ({name}): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {id} ({name}): {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
