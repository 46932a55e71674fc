mod common;

use proptest::prelude::*;
use voxclip::field::{
    positional_encode, resample_grid, Aabb, Checkpoint, ExplicitField, FieldError, GridSpec, ImplicitField,
    Mlp, ModelKind, VoxelField, MAGIC,
};
use voxclip::tensor::{finite_diff_check, FdOptions, Graph, Tensor};

fn spec(n: [usize; 3]) -> GridSpec {
    GridSpec::with_resolution(Aabb::default(), n, n.iter().product()).unwrap()
}

fn implicit(n: usize, seed: u64) -> ImplicitField<f64> {
    ImplicitField::new(spec([n; 3]), 1e-3, 0.05, seed)
}

#[test]
fn alpha_interpolates_before_activating() {
    let f = common::random_explicit(4, 3);
    let vf = VoxelField::Explicit(f.clone());
    let pts = vec![[0.31, -0.2, 0.77], [-0.9, 0.45, 0.1], [0.05, 0.05, -0.6]];
    let delta = 0.04;
    let mut g = Graph::new();
    let b = vf.bind(&mut g).unwrap();
    let (alpha, color) = b.query(&mut g, &pts, delta).unwrap();
    let bias = f.act_bias.data()[0];
    for (i, p) in pts.iter().enumerate() {
        let u = f.spec.world_to_index(*p);
        let raw = common::trilinear(f.density.data(), f.spec.resolution, 0, u);
        let right = 1.0 - (-common::softplus(raw + bias) * delta).exp();
        assert!((g.value(alpha).data()[i] - right).abs() < 1e-12);
        // the other order: activate every vertex, then interpolate
        let pre: Vec<f64> = f
            .density
            .data()
            .iter()
            .map(|&r| 1.0 - (-common::softplus(r + bias) * delta).exp())
            .collect();
        let wrong = common::trilinear(&pre, f.spec.resolution, 0, u);
        assert!((right - wrong).abs() > 1e-6);
        for c in 0..3 {
            let want = common::sigmoid(common::trilinear(f.color.data(), f.spec.resolution, c, u));
            assert!((g.value(color).data()[i * 3 + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn query_alpha_gradient_matches_finite_differences() {
    let f = common::random_explicit(3, 4);
    let pts = vec![[0.3, 0.2, -0.4], [-0.7, 0.9, 0.1], [1.0, -1.0, 0.5]];
    let r = finite_diff_check(
        |g, v| {
            let mut ff = f.clone();
            ff.density = g.value(v).clone();
            let vf = VoxelField::Explicit(ff);
            let mut b = vf.bind(g).unwrap();
            b.density = v;
            let (a, c) = b.query(g, &pts, 0.07).map_err(|e| match e {
                FieldError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let s1 = g.sum(a)?;
            let s2 = g.mean(c)?;
            g.add(s1, s2)
        },
        &f.density,
        &FdOptions::eps(1e-6),
    )
    .unwrap();
    assert!(r.passes(1e-5), "{r:?}");
}

#[test]
fn implicit_query_equals_interpolated_materialization() {
    let f = implicit(4, 7);
    let (density, color) = f.materialize().unwrap();
    let vf = VoxelField::Implicit(f.clone());
    let pts = vec![[0.1, 0.2, 0.3], [-1.1, 0.8, 0.0]];
    let mut g = Graph::new();
    let b = vf.bind(&mut g).unwrap();
    let (alpha, col) = b.query(&mut g, &pts, 0.05).unwrap();
    let bias = f.act_bias.data()[0];
    for (i, p) in pts.iter().enumerate() {
        let u = f.spec.world_to_index(*p);
        let raw = common::trilinear(density.data(), f.spec.resolution, 0, u);
        let a = 1.0 - (-common::softplus(raw + bias) * 0.05).exp();
        assert!((g.value(alpha).data()[i] - a).abs() < 1e-12);
        for c in 0..3 {
            let want = common::sigmoid(common::trilinear(color.data(), f.spec.resolution, c, u));
            assert!((g.value(col).data()[i * 3 + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn materialized_vertex_equals_direct_mlp() {
    let f = implicit(3, 9);
    let (density, _) = f.materialize().unwrap();
    for (k, v) in f.spec.vertices().enumerate().step_by(5) {
        let pe = positional_encode(f.spec.vertex_normalized(v));
        // hand-rolled forward pass
        let mut h: Vec<f64> = pe.to_vec();
        let n = f.density_mlp.layers.len();
        for (li, l) in f.density_mlp.layers.iter().enumerate() {
            let (ni, no) = (l.weight.shape()[0], l.weight.shape()[1]);
            let mut out = l.bias.data().to_vec();
            for o in 0..no {
                for i in 0..ni {
                    out[o] += h[i] * l.weight.data()[i * no + o];
                }
            }
            if li + 1 < n {
                out.iter_mut().for_each(|x| *x = x.max(0.0));
            }
            h = out;
        }
        assert!((density.data()[k] - h[0]).abs() < 1e-12);
    }
}

#[test]
fn coincident_vertices_agree_across_resolutions() {
    let coarse = implicit(3, 5);
    let mut fine = coarse.clone();
    let mut vf = VoxelField::Implicit(fine.clone());
    vf.progressive_scale(spec([5; 3])).unwrap();
    if let VoxelField::Implicit(f) = vf {
        fine = f;
    }
    let (dc, _) = coarse.materialize().unwrap();
    let (df, _) = fine.materialize().unwrap();
    for x in 0..3 {
        for y in 0..3 {
            for z in 0..3 {
                let c = dc.data()[(x * 3 + y) * 3 + z];
                let f = df.data()[(2 * x * 5 + 2 * y) * 5 + 2 * z];
                assert_eq!(c, f);
            }
        }
    }
}

#[test]
fn zero_weight_mlp_gives_uniform_density() {
    let mut f = implicit(3, 1);
    f.density_mlp = Mlp::zeroed(&[63, 128, 128, 1]);
    let (d, _) = f.materialize().unwrap();
    assert!(d.data().iter().all(|&x| x == 0.0));
}

#[test]
fn linear_grid_resamples_exactly() {
    let old = spec([4, 5, 6]);
    let new = spec([7, 9, 11]);
    let lin = |p: [f64; 3]| 0.3 + 1.7 * p[0] - 0.4 * p[1] + 0.25 * p[2];
    let data: Vec<f64> = old.vertices().map(|v| lin(old.vertex_world(v))).collect();
    let grid = Tensor::new(old.grid_shape(1), data).unwrap();
    let out = resample_grid(&grid, &old, &new).unwrap();
    for (k, v) in new.vertices().enumerate() {
        assert!((out.data()[k] - lin(new.vertex_world(v))).abs() < 1e-6);
    }
}

#[test]
fn explicit_scaling_preserves_rendered_field() {
    let f = common::random_explicit(3, 12);
    let mut vf = VoxelField::Explicit(f.clone());
    let changed = vf.progressive_scale(spec([5; 3])).unwrap();
    assert_eq!(changed, vec!["density".to_string(), "color".to_string()]);
    let VoxelField::Explicit(big) = &vf else { unreachable!() };
    // every old vertex survives unchanged
    for x in 0..3 {
        for y in 0..3 {
            for z in 0..3 {
                let a = f.density.data()[(x * 3 + y) * 3 + z];
                let b = big.density.data()[(2 * x * 5 + 2 * y) * 5 + 2 * z];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn checkpoint_roundtrip_bit_exact_both_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let fields: Vec<VoxelField<f32>> = vec![
        VoxelField::Explicit(common::random_explicit(4, 2)).cast(),
        VoxelField::Implicit(implicit(3, 2)).cast(),
    ];
    for (i, field) in fields.into_iter().enumerate() {
        let mut ck = Checkpoint::new(field, 1234, 99, "a \"quoted\"\nprompt = tricky");
        ck.header.config_digest = "ab".repeat(32);
        ck.header.adam_steps.insert("density".into(), 17);
        ck.extras.insert("adam.m.density".into(), Tensor::from_fn([2, 2], |i| i as f32 - 0.5));
        let path = dir.path().join(format!("c{i}.voxf"));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert_eq!(back.field, ck.field);
        assert_eq!(back.header.prompt, ck.header.prompt);
        assert_eq!(back.header.iteration, 1234);
        assert_eq!(back.extras, ck.extras);
    }
}

#[test]
fn checkpoint_validation() {
    let ck = Checkpoint::new(VoxelField::Explicit(common::random_explicit(3, 0)).cast(), 0, 0, "p");
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], MAGIC);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(FieldError::NotCheckpoint)));

    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(Checkpoint::from_bytes(cut), Err(FieldError::Truncated { .. })));

    // an explicit header over an implicit payload
    let imp = Checkpoint::new(VoxelField::Implicit(implicit(3, 0)).cast(), 0, 0, "p").to_bytes();
    let text_len = u32::from_le_bytes(imp[8..12].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&imp[12..12 + text_len]).unwrap();
    let swapped = header.replace("kind = implicit", "kind = explicit");
    let mut forged = imp[..12].to_vec();
    forged.extend_from_slice(swapped.as_bytes());
    forged.extend_from_slice(&imp[12 + text_len..]);
    let err = Checkpoint::from_bytes(&forged).unwrap_err();
    assert!(matches!(err, FieldError::KindMismatch { kind: ModelKind::Explicit, .. }), "{err}");
}

#[test]
fn initial_explicit_field_is_nearly_empty() {
    let s = GridSpec::for_target(Aabb::default(), 32 * 32 * 32).unwrap();
    let delta = s.default_step();
    let f = ExplicitField::<f64>::new(s, 1e-3, delta);
    let vf = VoxelField::Explicit(f);
    let mut g = Graph::new();
    let b = vf.bind(&mut g).unwrap();
    let (a, c) = b.query(&mut g, &[[0.0, 0.0, 0.0], [0.5, -0.5, 0.9]], delta).unwrap();
    for &x in g.value(a).data() {
        assert!((x - 1e-3).abs() < 1e-12);
    }
    assert!(g.value(c).data().iter().all(|&x| x == 0.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vertex_count_close_to_target(target in 8usize..3_000_000) {
        let s = GridSpec::for_target(Aabb::default(), target).unwrap();
        let n = s.resolution[0];
        prop_assert!(s.resolution.iter().all(|&r| r == n));
        let count = s.vertex_count() as f64;
        let side = (target as f64).cbrt();
        // one step of per-axis rounding moves a cube count by about 3 n^2
        prop_assert!((count - target as f64).abs() <= 1.5 * side * side + 2.0 * side + 2.0);
    }

    #[test]
    fn encoding_rows_follow_the_formula(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
        let e = positional_encode([x, y, z]);
        prop_assert_eq!(&e[..3], &[x, y, z][..]);
        for (a, q) in [x, y, z].iter().enumerate() {
            for k in 0..10 {
                let w = (1u32 << k) as f64 * std::f64::consts::PI * q;
                let base = 3 + 6 * k;
                prop_assert!((e[base + a] - w.sin()).abs() < 1e-12 && (e[base + 3 + a] - w.cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activations_stay_in_range(seed in 0u64..10_000) {
        let f = common::random_explicit(3, seed);
        let vf = VoxelField::Explicit(f);
        let mut g = Graph::new();
        let b = vf.bind(&mut g).unwrap();
        let pts: Vec<[f64; 3]> = (0..20).map(|i| {
            let t = i as f64 * 0.37 + seed as f64;
            [1.3 * t.sin(), 1.3 * (1.7 * t).cos(), 1.3 * (0.3 * t).sin()]
        }).collect();
        let (a, c) = b.query(&mut g, &pts, 0.1).unwrap();
        prop_assert!(g.value(a).data().iter().all(|&x| (0.0..1.0).contains(&x)));
        prop_assert!(g.value(c).data().iter().all(|&x| x > 0.0 && x < 1.0));
    }
}
