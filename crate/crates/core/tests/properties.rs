use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdlab::analysis::random_probe_scene;
use sdlab::degradation::{Activation, DegradationOperator, OperatorVariant};
use sdlab::mixture::{cfg_combine, diffuse, standard_normal_vec};
use sdlab::renderer::{Canvas, Representation, SplatScene, View};
use sdlab::{ConditionedMixture, NoiseSchedule, ScheduleKind, WeightKind, NULL_CONDITION};

fn schedule_kind() -> impl Strategy<Value = ScheduleKind> {
    prop_oneof![Just(ScheduleKind::Linear), Just(ScheduleKind::ScaledLinear)]
}

proptest! {
    #[test]
    fn schedule_is_a_decreasing_product(
        max_t in 1usize..400,
        lo in 1e-5f64..0.05,
        span in 0.0f64..0.3,
        kind in schedule_kind(),
    ) {
        let s = NoiseSchedule::new(max_t, lo, lo + span, kind).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        let mut prod = 1.0;
        for t in 1..=max_t {
            prod *= 1.0 - s.beta(t);
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!((s.alpha_bar(t) - prod).abs() <= 1e-12 * prod);
        }
    }

    #[test]
    fn dca_regimes(t in 0usize..=1000, cutoff in 0usize..=1000) {
        let s = NoiseSchedule::default();
        let l = s.dca_coefficient(t, cutoff).unwrap();
        if t > cutoff {
            prop_assert_eq!(l, 1.0);
        } else {
            prop_assert!((0.0..1.0).contains(&l));
        }
        let w = s.sds_weight(t.max(1), WeightKind::OneMinusAlphaBar).unwrap();
        prop_assert!(w > 0.0 && w < 1.0);
    }

    #[test]
    fn diffuse_at_zero_is_identity(x in prop::collection::vec(-5.0f64..5.0, 1..6), seed in any::<u64>()) {
        let s = NoiseSchedule::default();
        let eps = standard_normal_vec(&mut ChaCha8Rng::seed_from_u64(seed), x.len());
        prop_assert_eq!(diffuse(&s, &x, 0, &eps).unwrap(), x);
    }

    #[test]
    fn guidance_collapses_at_zero_scale(
        x in prop::collection::vec(-3.0f64..3.0, 2),
        t in 1usize..=1000,
        scale in 0.0f64..20.0,
    ) {
        let s = NoiseSchedule::default();
        let mut conds = BTreeMap::new();
        conds.insert("a".to_string(), vec![0]);
        conds.insert("all".to_string(), vec![0, 1]);
        let m = ConditionedMixture::new(vec![0.3, 0.7], vec![vec![1.0, 0.0], vec![-1.0, 1.0]], 0.3, conds).unwrap();
        let c = m.eps_predict(&x, t, "a", &s).unwrap();
        prop_assert_eq!(m.eps_cfg(&x, t, "a", 0.0, &s).unwrap(), c);
        let all = m.eps_predict(&x, t, "all", &s).unwrap();
        let null = m.eps_predict(&x, t, NULL_CONDITION, &s).unwrap();
        prop_assert_eq!(m.eps_cfg(&x, t, "all", scale, &s).unwrap(), cfg_combine(&all, &null, scale));
        for (a, n) in all.iter().zip(&null) {
            prop_assert!((a - n).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn rendered_values_stay_in_unit_range(
        seed in any::<u64>(),
        channels in prop_oneof![Just(1usize), Just(3usize)],
        splats in 0usize..6,
        tx in -0.3f64..0.3,
        zoom in 0.5f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scene = random_probe_scene(&mut rng, splats, channels).unwrap();
        // push colors well past saturation
        let p: Vec<f64> = scene.params().iter().map(|v| v * 4.0).collect();
        scene.set_params(&p).unwrap();
        let view = View { translation: [tx, -tx], zoom };
        let img = scene.render(&view);
        prop_assert_eq!(img.len(), scene.output_dim());
        prop_assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn scene_checkpoint_round_trips(seed in any::<u64>(), count in 0usize..10) {
        let canvas = Canvas { height: 5, width: 7, channels: 3 };
        let scene = SplatScene::init_random(canvas, count, 0.1, 0.05, 0.4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut buf = Vec::new();
        scene.write_to(&mut buf).unwrap();
        prop_assert_eq!(SplatScene::read_from(buf.as_slice()).unwrap(), scene);
    }

    #[test]
    fn operator_checkpoint_preserves_apply(seed in any::<u64>(), dim in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for variant in OperatorVariant::ALL {
            let mut op = DegradationOperator::for_variant(variant, dim, &[3 * dim], Activation::Tanh, &mut rng).unwrap();
            let p: Vec<f64> = standard_normal_vec(&mut rng, op.param_count());
            op.set_params(&p).unwrap();
            let mut buf = Vec::new();
            op.write_to(&mut buf).unwrap();
            let back = DegradationOperator::read_from(buf.as_slice(), Activation::Tanh).unwrap();
            let v = standard_normal_vec(&mut rng, dim);
            let (a, b) = (op.apply(&v).unwrap(), back.apply(&v).unwrap());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}
