use anytime4d_core::representation::Timestamp;
use anytime4d_core::scenegen::RgbImage;
use anytime4d_nn::model::{
    images_tensor, patch_positional_encoding, GlobalAttention, Layout, Model, ModelConfig, MotionAblation,
    PointOutput,
};
use anytime4d_nn::{Graph, Tensor};
use rand::Rng;

fn small(seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        patch_size: 4,
        embed_dim: 16,
        encoder_layers: 2,
        heads: 2,
        motion_layers: 2,
        ..ModelConfig::default()
    };
    Model::new(cfg, &mut anytime4d_core::rng::stream(seed, 1)).unwrap()
}

fn images(seed: u64, n: usize, h: usize, w: usize) -> Vec<RgbImage> {
    let mut r = anytime4d_core::rng::stream(seed, 2);
    (0..n)
        .map(|_| RgbImage {
            width: w,
            height: h,
            data: (0..h * w * 3).map(|_| r.gen_range(0.0..1.0)).collect(),
        })
        .collect()
}

fn times(n: usize) -> Vec<Timestamp> {
    (0..n).map(|i| Timestamp::new(i, n)).collect()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    for bad in [
        ModelConfig { heads: 3, ..Default::default() },
        ModelConfig { encoder_layers: 5, ..Default::default() },
        ModelConfig { patch_size: 7, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
    let json = r#"{"embed_dim": 32, "ablation": "no_adaln", "output": "points_local"}"#;
    let cfg: ModelConfig = serde_json_like(json);
    assert_eq!(cfg.embed_dim, 32);
    assert_eq!(cfg.ablation, MotionAblation::NoAdaln);
    assert_eq!(cfg.output, PointOutput::PointsLocal);
    assert_eq!(cfg.patch_size, 8);
}

fn serde_json_like(s: &str) -> ModelConfig {
    serde_json::from_str(s).unwrap()
}

#[test]
fn token_counts() {
    let lay = Layout::new(3, 64, 64, 8).unwrap();
    assert_eq!(lay.m(), 64);
    assert_eq!(lay.s(), 66);
    assert!(Layout::new(1, 60, 64, 8).is_err());

    let m = small(0);
    let lay = m.layout(3, 16, 8).unwrap();
    let mut g = Graph::new();
    let img = g.constant(images_tensor(&images(0, 3, 16, 8)));
    let z = m.encode(&mut g, img, &lay, &times(3)).unwrap();
    assert_eq!(g.shape(z), (3 * (8 + 2), 16));
}

#[test]
fn identical_pixels_different_times() {
    let m = small(1);
    let one = images(1, 1, 8, 8).remove(0);
    let frames = vec![one.clone(), one];
    let lay = m.layout(2, 8, 8).unwrap();
    let mut g = Graph::new();
    let img = g.constant(images_tensor(&frames));
    let tok = m.embed(&mut g, img, &lay, &times(2)).unwrap();
    let t = g.value(tok);
    let s = lay.s();
    for r in 0..lay.m() {
        assert_eq!(t.row(r), t.row(s + r));
    }
    assert_eq!(t.row(lay.camera_row(0)), t.row(lay.camera_row(1)));
    assert_ne!(t.row(lay.time_row(0)), t.row(lay.time_row(1)));
}

#[test]
fn zero_image_and_weights_give_positional_encoding() {
    let mut m = small(2);
    let id = m.params.id("embed.w").unwrap();
    m.params.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
    let frames = vec![RgbImage::new(8, 8); 2];
    let lay = m.layout(2, 8, 8).unwrap();
    let mut g = Graph::new();
    let img = g.constant(images_tensor(&frames));
    let tok = m.embed(&mut g, img, &lay, &times(2)).unwrap();
    let pe = patch_positional_encoding(2, 2, 16);
    for f in 0..2 {
        for (k, r) in lay.patch_rows(f).enumerate() {
            assert_eq!(g.value(tok).row(r), &pe[k * 16..(k + 1) * 16]);
        }
    }
}

#[test]
fn frame_isolation_without_global_layers() {
    let m = small(3);
    let mut frames = images(3, 3, 8, 8);
    let lay = m.layout(3, 8, 8).unwrap();
    let run = |frames: &[RgbImage]| {
        let mut g = Graph::new();
        let img = g.constant(images_tensor(frames));
        let tok = m.embed(&mut g, img, &lay, &times(3)).unwrap();
        let z = m.encode_tokens(&mut g, tok, &lay, GlobalAttention::Disabled);
        g.value(z).clone()
    };
    let a = run(&frames);
    frames[1] = images(99, 1, 8, 8).remove(0);
    frames[2] = images(98, 1, 8, 8).remove(0);
    let b = run(&frames);
    let s = lay.s();
    assert_eq!(&a.data[..s * 16], &b.data[..s * 16]);
    assert_ne!(&a.data[s * 16..], &b.data[s * 16..]);
}

#[test]
fn permutation_equivariance_within_frame() {
    let m = small(4);
    let frames = images(4, 2, 8, 16);
    let lay = m.layout(2, 8, 16).unwrap();
    let s = lay.s();
    let mut r = anytime4d_core::rng::stream(4, 3);
    let mut perm: Vec<usize> = (0..2 * s).collect();
    for f in 0..2 {
        let rows = &mut perm[f * s..f * s + lay.m()];
        for i in (1..rows.len()).rev() {
            rows.swap(i, r.gen_range(0..=i));
        }
    }
    let mut g = Graph::new();
    let img = g.constant(images_tensor(&frames));
    let tok = m.embed(&mut g, img, &lay, &times(2)).unwrap();
    let z = m.encode_tokens(&mut g, tok, &lay, GlobalAttention::Full);
    let ptok = g.gather_rows(tok, perm.clone());
    let pz = m.encode_tokens(&mut g, ptok, &lay, GlobalAttention::Full);
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let back = g.gather_rows(pz, inv);
    assert!(max_abs_diff(g.value(z), g.value(back)) < 1e-12);
}

#[test]
fn geometry_outputs() {
    let m = small(5);
    let frames = images(5, 2, 16, 8);
    let out = m.forward_4d(&frames, &times(2), 0, &[0]).unwrap();
    for geo in &out.geometry {
        assert_eq!((geo.depth.width, geo.depth.height), (8, 16));
        assert_eq!((geo.rays.width, geo.rays.height), (4, 8));
        assert_eq!(geo.depth_log_sigma.len(), 128);
        assert!(geo.depth.values.iter().all(|d| *d > 0.0));
        assert!((geo.pose.rotation.quaternion().norm() - 1.0).abs() < 1e-6);
        assert!(geo.vertical_fov > 0.0 && geo.vertical_fov < std::f64::consts::PI);
    }

    // Zero depth weights: raw output 0 so depth is exactly 1.
    let mut m = small(5);
    for name in ["geo.depth.fc2.w", "geo.depth.fc2.b"] {
        let id = m.params.id(name).unwrap();
        m.params.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
    }
    let out = m.forward_4d(&frames, &times(2), 0, &[0]).unwrap();
    assert!(out.geometry.iter().all(|g| g.depth.values.iter().all(|d| *d == 1.0)));
}

#[test]
fn motion_outputs_and_time_conditioning() {
    let m = small(6);
    let frames = images(6, 3, 8, 8);
    let out = m.forward_4d(&frames, &times(3), 1, &[0, 2]).unwrap();
    assert_eq!(out.motion.len(), 2);
    for mp in &out.motion {
        assert_eq!(mp.deltas.deltas.len(), 64);
        assert_eq!(mp.motion_log_sigma.len(), 64);
        assert!(mp.deltas.deltas.iter().all(|d| d.iter().all(|x| x.is_finite())));
    }
    let diff: f64 = out.motion[0]
        .deltas
        .deltas
        .iter()
        .zip(&out.motion[1].deltas.deltas)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    assert!(diff > 0.0);
}

#[test]
fn zero_head_gives_zero_displacement() {
    let mut m = small(7);
    for name in ["mot.head.w", "mot.head.b"] {
        let id = m.params.id(name).unwrap();
        m.params.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
    }
    let out = m.forward_4d(&images(7, 2, 8, 8), &times(2), 0, &[0, 1]).unwrap();
    for mp in &out.motion {
        assert!(mp.deltas.deltas.iter().all(|d| d.norm() == 0.0));
    }
}

#[test]
fn forward_encodes_once() {
    let m = small(8);
    let frames = images(8, 4, 8, 8);
    let before = m.encoder_calls();
    let out = m.forward_4d(&frames, &times(4), 2, &[0, 1, 2, 3]).unwrap();
    assert_eq!(m.encoder_calls() - before, 1);
    assert_eq!(out.frame.displacements.len(), 4);
    assert_eq!(out.geometry.len(), 4);

    let single = m.forward_4d(&frames, &times(4), 2, &[2]).unwrap();
    assert_eq!(single.frame.displacements.len(), 1);
    assert!(single.frame.displacements.contains_key(&2));

    let pair = m.forward_4d(&frames[..2], &times(2), 0, &[0, 1]).unwrap();
    assert_eq!(pair.frame.displacements.len(), 2);
}

#[test]
fn invalid_inputs_rejected() {
    let m = small(9);
    let frames = images(9, 2, 8, 8);
    assert!(m.forward_4d(&frames, &times(2), 2, &[0]).is_err());
    assert!(m.forward_4d(&frames, &times(2), 0, &[5]).is_err());
    assert!(m.forward_4d(&frames[..1], &times(1), 0, &[0]).is_err());
    assert!(m.forward_4d(&images(9, 2, 6, 8), &times(2), 0, &[0]).is_err());
}

#[test]
fn ablations_and_outputs_build() {
    for ablation in [MotionAblation::NoCrossAttn, MotionAblation::NoSelfAttn, MotionAblation::NoAdaln] {
        for output in [PointOutput::Displacement, PointOutput::PointsWorld, PointOutput::PointsLocal] {
            let cfg = ModelConfig {
                patch_size: 4,
                embed_dim: 8,
                encoder_layers: 2,
                heads: 2,
                motion_layers: 1,
                ablation,
                output,
                ..ModelConfig::default()
            };
            let m = Model::<f64>::new(cfg, &mut anytime4d_core::rng::stream(0, 0)).unwrap();
            let out = m.forward_4d(&images(0, 2, 8, 8), &times(2), 0, &[0, 1]).unwrap();
            assert_eq!(out.motion.len(), 2);
        }
    }
}

#[test]
fn params_round_trip_through_with_params() {
    let m = small(10);
    let again = Model::with_params(m.config.clone(), m.params.clone()).unwrap();
    assert_eq!(again.params, m.params);
    let other = Model::<f64>::new(
        ModelConfig {
            embed_dim: 8,
            ..m.config.clone()
        },
        &mut anytime4d_core::rng::stream(0, 0),
    )
    .unwrap();
    assert!(Model::with_params(m.config.clone(), other.params).is_err());
}
