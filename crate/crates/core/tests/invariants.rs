use proptest::prelude::*;

use trajgan::geometry::{wrap_angle, Pose};
use trajgan::metrics::{ord, orfp, over_k, Reducer};
use trajgan::models::{Generator, Variant};
use trajgan::raster::{
    rasterize_point, rasterize_point_backward, rasterize_point_windowed, RasterConfig,
};
use trajgan::scene::dataset::{generate_record, DatasetConfig, Record, Split};
use trajgan::scene::region::target_region;
use trajgan::scene::{generate_scene, Template, FUTURE_LEN};
use trajgan::tensor::{Graph, Tensor};
use trajgan::training::losses::wgan_gp_loss;
use trajgan::verify::small_model;

fn grid(sigma: f64) -> RasterConfig {
    RasterConfig {
        height: 40,
        width: 40,
        resolution: 1.0,
        origin_row: 8,
        origin_col: 20,
        sigma,
    }
}

fn template() -> impl Strategy<Value = Template> {
    prop::sample::select(Template::ALL.to_vec())
}

fn weighted(cfg: &RasterConfig, p: [f64; 2], up: &[f64]) -> f64 {
    let g = rasterize_point(p, cfg).unwrap();
    g.values.iter().zip(up).map(|(a, b)| a * b).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interior_points_carry_unit_mass(
        sigma in 1.4f64..3.0,
        x in 0.0f64..1.0,
        y in 0.0f64..1.0,
    ) {
        let cfg = grid(sigma);
        let m = 7.0 * sigma;
        let p = [
            cfg.row_coord(0) + m + x * (cfg.row_coord(cfg.height - 1) - cfg.row_coord(0) - 2.0 * m),
            cfg.col_coord(0) + m + y * (cfg.col_coord(cfg.width - 1) - cfg.col_coord(0) - 2.0 * m),
        ];
        let g = rasterize_point(p, &cfg).unwrap();
        prop_assert!((g.mass(cfg.resolution) - 1.0).abs() < 1e-6);
        let d = rasterize_point_backward(p, &cfg, &vec![1.0; cfg.cells()]).unwrap();
        prop_assert!(d[0].abs() < 1e-6 && d[1].abs() < 1e-6);
    }

    #[test]
    fn backward_matches_central_differences(
        sigma in prop::sample::select(vec![1.4, 2.0, 3.0]),
        px in -12.0f64..36.0,
        py in -24.0f64..24.0,
        seed in any::<u64>(),
    ) {
        let cfg = grid(sigma);
        let mut s = seed;
        let up: Vec<f64> = (0..cfg.cells())
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let p = [px, py];
        let a = rasterize_point_backward(p, &cfg, &up).unwrap();
        let h = 1e-4;
        for axis in 0..2 {
            let (mut lo, mut hi) = (p, p);
            lo[axis] -= h;
            hi[axis] += h;
            let n = (weighted(&cfg, hi, &up) - weighted(&cfg, lo, &up)) / (2.0 * h);
            let rel = (a[axis] - n).abs() / a[axis].abs().max(n.abs()).max(1e-8);
            prop_assert!(rel < 1e-6, "axis {axis}: analytic {} numeric {n}", a[axis]);
        }
    }

    #[test]
    fn windowed_grid_matches_full_grid(
        sigma in 1.0f64..4.0,
        px in -20.0f64..50.0,
        py in -30.0f64..30.0,
    ) {
        let cfg = grid(sigma);
        let full = rasterize_point([px, py], &cfg).unwrap();
        let win = rasterize_point_windowed([px, py], &cfg).unwrap();
        for (a, b) in full.values.iter().zip(&win.values) {
            prop_assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn ground_truth_stays_in_its_region(t in template(), seed in any::<u64>()) {
        let s = generate_scene(t, seed);
        let region = target_region(&s);
        let o = ord(&s.future, &region).expect("target has a lane");
        prop_assert!(o.per_point.iter().all(|d| *d == 0.0), "{:?}", o.per_point);
        let f = orfp(&s.future, &s.future, &region).unwrap().unwrap();
        prop_assert_eq!(f.eligible, FUTURE_LEN);
        prop_assert_eq!(f.off_road, 0);
    }

    #[test]
    fn region_distance_is_zero_exactly_inside(
        t in template(),
        seed in any::<u64>(),
        x in -20.0f64..60.0,
        y in -40.0f64..40.0,
    ) {
        let region = target_region(&generate_scene(t, seed));
        let d = region.distance([x, y]).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d == 0.0, region.contains([x, y]));
        for q in &region.polygons {
            prop_assert!(d <= q.distance([x, y]) + 1e-12);
        }
    }

    #[test]
    fn records_round_trip_through_json(seed in any::<u64>(), index in 0usize..10_000) {
        let cfg = DatasetConfig::uniform(10_000, seed);
        let r = generate_record(&cfg, index);
        let back: Record = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(r.split, Split::of_index(index));
        prop_assert_eq!(generate_record(&cfg, index), r);
    }

    #[test]
    fn templates_follow_the_mix(t in template(), seed in any::<u64>()) {
        let mut cfg = DatasetConfig::uniform(50, seed);
        for (k, w) in cfg.template_mix.iter_mut() {
            *w = if *k == t { 1.0 } else { 0.0 };
        }
        for i in 0..50 {
            prop_assert_eq!(generate_record(&cfg, i).scene.template, t);
        }
    }

    #[test]
    fn generator_output_is_finite(
        states in prop::collection::vec(-50.0f64..50.0, 30),
        seed in any::<u64>(),
    ) {
        let model = small_model(Variant::Sc);
        let gen = Generator::new(&model, seed).unwrap();
        let rc = model.raster;
        let mut g = Graph::new();
        let scene = g.constant(Tensor::from_fn(&[1, 3, rc.height, rc.width], |i| (i % 7) as f64 / 7.0));
        let st = g.constant(Tensor::new(vec![1, 30], states).unwrap());
        let z = g.constant(Tensor::from_fn(&[1, model.generator.noise_dim], |i| i as f64 - 8.0));
        let out = gen.forward(&mut g, scene, st, z).unwrap();
        prop_assert!(g.value(out).data().iter().all(|v| v.is_finite()));
    }
}

proptest! {
    #[test]
    fn pose_round_trip(
        x in -1e3f64..1e3, y in -1e3f64..1e3, h in -10.0f64..10.0,
        px in -1e3f64..1e3, py in -1e3f64..1e3,
    ) {
        let f = Pose::new(x, y, h);
        let back = f.to_parent(f.to_local([px, py]));
        prop_assert!((back[0] - px).abs() < 1e-9 && (back[1] - py).abs() < 1e-9);
        let w = wrap_angle(h);
        prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
        prop_assert!((w.cos() - h.cos()).abs() < 1e-9 && (w.sin() - h.sin()).abs() < 1e-9);
    }

    #[test]
    fn min_over_k_never_exceeds_mean(
        samples in prop::collection::vec(prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 4), 1..8),
        gt in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 4),
    ) {
        let samples: Vec<Vec<[f64; 2]>> = samples
            .into_iter()
            .map(|s| s.into_iter().map(|(a, b)| [a, b]).collect())
            .collect();
        let gt: Vec<[f64; 2]> = gt.into_iter().map(|(a, b)| [a, b]).collect();
        let lo = over_k(&samples, &gt, Reducer::Min).unwrap();
        let mean = over_k(&samples, &gt, Reducer::Mean).unwrap();
        prop_assert!(lo.ade <= mean.ade + 1e-12 && lo.fde <= mean.fde + 1e-12);
        prop_assert!(lo.ade >= 0.0 && lo.fde >= 0.0);
    }

    #[test]
    fn critic_loss_identities(
        scores in prop::collection::vec(-100.0f64..100.0, 1..16),
        lambda in 0.0f64..50.0,
    ) {
        let zeros = vec![0.0; scores.len()];
        let (d, g) = wgan_gp_loss(&scores, &scores, &zeros, lambda);
        prop_assert_eq!(d, 0.0);
        prop_assert_eq!(g, -scores.iter().sum::<f64>() / scores.len() as f64);
        let ones = vec![1.0; scores.len()];
        let (d1, _) = wgan_gp_loss(&scores, &scores, &ones, lambda);
        prop_assert!((d1 - lambda).abs() < 1e-12);
    }
}
