mod common;

use proptest::prelude::*;
use voxclip::augment::{
    apply_plan, augment_pipeline, background_augment, diff_augment, fourier_texture, gaussian_blur, AugConfig,
    AugPlan, BackgroundKind, BackgroundParams, DiffAugParams, PerspParams, PERSPECTIVE_FILL,
};
use voxclip::tensor::{finite_diff_check, FdOptions, Graph, Tensor};

const H: usize = 6;
const W: usize = 7;

/// Premultiplied rgb and a matching alpha for `n` images.
fn inputs(n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let alpha = common::random_tensor(&[n, H, W], 0.05, 0.95, seed);
    let color = common::random_tensor(&[n, H, W, 3], 0.1, 0.9, seed + 1);
    let rgb = Tensor::from_fn([n, H, W, 3], |i| color.data()[i] * alpha.data()[i / 3]);
    (rgb, alpha)
}

/// Scalar DiffAug for one variant, following the documented order: colour
/// jitter on the whole frame, then shift and cutout.
fn diffaug_oracle(rgb: &[f64], alpha: &[f64], p: &DiffAugParams) -> (Vec<f64>, Vec<f64>) {
    let mut x: Vec<f64> = rgb.iter().map(|v| v + p.brightness).collect();
    for px in 0..H * W {
        let m = (x[px * 3] + x[px * 3 + 1] + x[px * 3 + 2]) / 3.0;
        for c in 0..3 {
            x[px * 3 + c] = (x[px * 3 + c] - m) * p.saturation + m;
        }
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v = (*v - m) * p.contrast + m);
    let mut out = vec![0.0; H * W * 3];
    let mut a = vec![0.0; H * W];
    for r in 0..H as i64 {
        for c in 0..W as i64 {
            if let Some((top, left, side)) = p.cutout {
                let side = side as i64;
                if (top..top + side).contains(&r) && (left..left + side).contains(&c) {
                    continue;
                }
            }
            let (sr, sc) = (r - p.translate.0, c - p.translate.1);
            if sr < 0 || sc < 0 || sr >= H as i64 || sc >= W as i64 {
                continue;
            }
            let (o, s) = ((r * W as i64 + c) as usize, (sr * W as i64 + sc) as usize);
            a[o] = alpha[s];
            for ch in 0..3 {
                out[o * 3 + ch] = x[s * 3 + ch].clamp(0.0, 1.0);
            }
        }
    }
    (out, a)
}

#[test]
fn diffaug_matches_scalar_oracle() {
    let (rgb, alpha) = inputs(2, 3);
    let params: Vec<DiffAugParams> = (0..4)
        .map(|i| DiffAugParams::sample(&mut voxclip::rng::stream(5, 1, voxclip::rng::Stream::DiffAug, i), H, W))
        .collect();
    let src = [0, 0, 1, 1];
    let mut g = Graph::new();
    let r = g.constant(rgb.clone());
    let a = g.constant(alpha.clone());
    let (x, xa) = diff_augment(&mut g, r, a, &src, &params).unwrap();
    for (i, p) in params.iter().enumerate() {
        let s = src[i];
        let (want, want_a) = diffaug_oracle(
            &rgb.data()[s * H * W * 3..(s + 1) * H * W * 3],
            &alpha.data()[s * H * W..(s + 1) * H * W],
            p,
        );
        let got = &g.value(x).data()[i * H * W * 3..(i + 1) * H * W * 3];
        let got_a = &g.value(xa).data()[i * H * W..(i + 1) * H * W];
        for k in 0..want.len() {
            assert!((got[k] - want[k]).abs() < 1e-12);
        }
        assert_eq!(got_a, &want_a[..]);
    }
}

#[test]
fn identity_stages_reduce_to_white_composite() {
    let (rgb, alpha) = inputs(1, 8);
    let plan = AugPlan {
        diff: Some(vec![DiffAugParams::identity()]),
        back: vec![BackgroundParams::white()],
        persp: Some(vec![PerspParams::identity()]),
    };
    let mut g = Graph::new();
    let r = g.constant(rgb.clone());
    let a = g.constant(alpha.clone());
    let out = apply_plan(&mut g, r, a, &plan).unwrap();
    for (k, v) in g.value(out).data().iter().enumerate() {
        let want = rgb.data()[k] + 1.0 - alpha.data()[k / 3];
        assert!((v - want).abs() < 1e-12);
    }
}

#[test]
fn background_composite_matches_formula() {
    let (rgb, alpha) = inputs(2, 12);
    let backs = vec![
        BackgroundParams {
            kind: BackgroundKind::Checkerboard {
                square: 2,
                colors: [[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]],
            },
            blur_sigma: 0.0,
        },
        BackgroundParams {
            kind: BackgroundKind::Solid([0.25, 0.5, 0.75]),
            blur_sigma: 0.0,
        },
        BackgroundParams {
            kind: BackgroundKind::Noise { seed: 4 },
            blur_sigma: 1.5,
        },
    ];
    let src = [0, 1, 1];
    let mut g = Graph::new();
    let r = g.constant(rgb.clone());
    let a = g.constant(alpha.clone());
    let out = background_augment(&mut g, r, a, &src, &backs).unwrap();
    for (i, b) in backs.iter().enumerate() {
        let bg = b.generate(H, W);
        for px in 0..H * W {
            let t = 1.0 - alpha.data()[src[i] * H * W + px];
            for c in 0..3 {
                let want = (rgb.data()[(src[i] * H * W + px) * 3 + c] + t * bg[px * 3 + c]).clamp(0.0, 1.0);
                let got = g.value(out).data()[(i * H * W + px) * 3 + c];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
    // checkerboard squares of two pixels
    let bg = backs[0].generate(H, W);
    assert_eq!(&bg[0..3], &[0.1, 0.2, 0.3]);
    assert_eq!(&bg[6..9], &[0.9, 0.8, 0.7]);
}

#[test]
fn uniform_corner_shift_translates_the_image() {
    let img = common::random_tensor(&[1, H, W, 3], 0.0, 1.0, 21);
    let p = PerspParams {
        offsets: Some([[1.0, 0.0]; 4]),
    };
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let out = voxclip::augment::perspective_augment(&mut g, x, &[0], &[p], PERSPECTIVE_FILL).unwrap();
    let out = g.value(out).data();
    for r in 0..H {
        for c in 0..W {
            for ch in 0..3 {
                let want = if c == 0 { PERSPECTIVE_FILL[ch] } else { img.data()[(r * W + c - 1) * 3 + ch] };
                assert!((out[(r * W + c) * 3 + ch] - want).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    let config = AugConfig {
        n_diff: 2,
        n_back: 2,
        n_persp: 1,
        ..AugConfig::default()
    };
    let (rgb, alpha) = inputs(1, 30);
    let plan = AugPlan::sample(&config, 1, H, W, 9, 4);
    let opts = FdOptions::eps(1e-6);
    let r = finite_diff_check(
        |g, v| {
            let a = g.constant(alpha.clone());
            let out = apply_plan(g, v, a, &plan).map_err(|e| match e {
                voxclip::augment::AugmentError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let w = g.constant(common::random_tensor(g.shape(out), -1.0, 1.0, 31));
            let p = g.mul(out, w)?;
            g.sum(p)
        },
        &rgb,
        &opts,
    )
    .unwrap();
    assert!(r.passes(1e-6), "rgb: {r:?}");
    let r = finite_diff_check(
        |g, v| {
            let c = g.constant(rgb.clone());
            let out = apply_plan(g, c, v, &plan).map_err(|e| match e {
                voxclip::augment::AugmentError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let w = g.constant(common::random_tensor(g.shape(out), -1.0, 1.0, 32));
            let p = g.mul(out, w)?;
            g.sum(p)
        },
        &alpha,
        &opts,
    )
    .unwrap();
    assert!(r.passes(1e-6), "alpha: {r:?}");
}

#[test]
fn output_is_input_major() {
    let config = AugConfig {
        n_diff: 2,
        n_back: 3,
        n_persp: 2,
        ..AugConfig::default()
    };
    let per = config.batch_size();
    let (rgb, alpha) = inputs(2, 40);
    let mut g = Graph::new();
    let r = g.param(rgb);
    let a = g.param(alpha);
    let out = augment_pipeline(&mut g, r, a, &config, 1, 2).unwrap();
    assert_eq!(g.shape(out), &[2 * per, H, W, 3]);
    let first = g.narrow(out, 0, 0, per).unwrap();
    let s = g.sum(first).unwrap();
    let grads = g.gradients(s, &[r, a]).unwrap();
    for gr in &grads {
        let half = gr.data().len() / 2;
        assert!(gr.data()[half..].iter().all(|&x| x == 0.0));
        assert!(gr.data()[..half].iter().any(|&x| x != 0.0));
    }
}

#[test]
fn plans_are_reproducible() {
    let c = AugConfig::default();
    let a = AugPlan::sample(&c, 2, 16, 16, 7, 100);
    assert_eq!(a, AugPlan::sample(&c, 2, 16, 16, 7, 100));
    assert_ne!(a, AugPlan::sample(&c, 2, 16, 16, 7, 101));
    assert_ne!(a, AugPlan::sample(&c, 2, 16, 16, 8, 100));
    let d = AugPlan::sample(&AugConfig::disabled(), 1, 16, 16, 7, 100);
    assert!(d.diff.is_none() && d.persp.is_none());
    assert_eq!(d.back, vec![BackgroundParams::white()]);
}

#[test]
fn blur_preserves_constants_and_mass() {
    let flat = [0.3, 0.6, 0.9].repeat(9 * 11);
    let out = gaussian_blur(&flat, 9, 11, 2.5);
    assert!(out.iter().zip(&flat).all(|(a, b)| (a - b).abs() < 1e-12));
    // a centred impulse keeps its mass while the kernel stays inside the frame
    let mut delta = vec![0.0; 21 * 21 * 3];
    delta[(10 * 21 + 10) * 3] = 1.0;
    let out = gaussian_blur(&delta, 21, 21, 1.5);
    let mass: f64 = out.iter().step_by(3).sum();
    assert!((mass - 1.0).abs() < 1e-12);
    assert!(out[(10 * 21 + 10) * 3] < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pipeline_output_in_unit_range(seed in 0u64..1000, it in 0u64..1000) {
        let config = AugConfig { n_diff: 2, n_back: 2, n_persp: 2, ..AugConfig::default() };
        let (rgb, alpha) = inputs(1, seed);
        let mut g = Graph::new();
        let r = g.constant(rgb);
        let a = g.constant(alpha);
        let out = augment_pipeline(&mut g, r, a, &config, seed, it).unwrap();
        prop_assert_eq!(g.shape(out)[0], 8);
        prop_assert!(g.value(out).data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn fourier_texture_is_normalised(seed in 0u64..10_000, h in 2usize..20, w in 2usize..20) {
        let t = fourier_texture(h, w, seed);
        prop_assert_eq!(t.len(), h * w * 3);
        prop_assert!(t.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn sampled_backgrounds_in_range(seed in 0u64..10_000) {
        let b = BackgroundParams::sample(&mut voxclip::rng::stream(seed, 0, voxclip::rng::Stream::BackAug, 0));
        prop_assert!((0.0..10.0).contains(&b.blur_sigma));
        prop_assert!(b.generate(12, 12).iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
