use mixlab_core::render::squash;
use mixlab_core::stats::{kruskal_wallis, mann_whitney_u, paired_t_test};
use mixlab_core::{
    blend_raw, cumulative_fraction, step_sizes, BlendWeights, LatentVector, Renderer,
};
use proptest::prelude::*;

fn latent(dim: usize) -> impl Strategy<Value = LatentVector> {
    prop::collection::vec(-3.0f64..3.0, dim).prop_map(|v| LatentVector::new(v).unwrap())
}

fn sources_and_weights() -> impl Strategy<Value = (Vec<LatentVector>, Vec<f64>)> {
    (3usize..=6).prop_flat_map(|n| {
        (
            prop::collection::vec(latent(16), n),
            prop::collection::vec(0u8..=100, n)
                .prop_filter("some weight", |w| w.iter().any(|&h| h > 0))
                .prop_map(|w| w.into_iter().map(|h| f64::from(h) / 100.0).collect()),
        )
    })
}

proptest! {
    #[test]
    fn blend_of_identical_latents_is_that_latent(z in latent(16), n in 3usize..=6, seed in any::<u64>()) {
        let weights: Vec<f64> = (0..n).map(|i| ((seed >> (i * 7)) % 101) as f64 / 100.0 + if i == 0 { 0.01 } else { 0.0 }).collect();
        let out = blend_raw(&vec![z.clone(); n], &weights).unwrap();
        for (a, b) in out.as_slice().iter().zip(z.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn blend_is_scale_invariant((sources, weights) in sources_and_weights(), lambda in 0.001f64..=1.0) {
        let base = blend_raw(&sources, &weights).unwrap();
        let scaled: Vec<f64> = weights.iter().map(|w| w * lambda).collect();
        let other = blend_raw(&sources, &scaled).unwrap();
        for (a, b) in base.as_slice().iter().zip(other.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn blend_stays_in_the_convex_hull((sources, weights) in sources_and_weights()) {
        let out = blend_raw(&sources, &weights).unwrap();
        for k in 0..out.dim() {
            let column = sources.iter().map(|s| s.as_slice()[k]);
            let lo = column.clone().fold(f64::INFINITY, f64::min);
            let hi = column.fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.as_slice()[k] >= lo - 1e-12 && out.as_slice()[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn step_sizes_are_bounded(history in (3usize..=6).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(0u8..=100, n), 1..40))) {
        let n = history[0].len();
        let weights: Vec<BlendWeights> = history.into_iter().map(|h| BlendWeights::from_hundredths(h).unwrap()).collect();
        let deltas = step_sizes(&weights).unwrap();
        prop_assert_eq!(deltas.len(), weights.len());
        for d in deltas {
            prop_assert!(d >= 0.0 && d <= n as f64);
        }
    }

    #[test]
    fn cumulative_fraction_is_monotone(deltas in prop::collection::vec(0.0f64..6.0, 1..100)) {
        let thresholds: Vec<f64> = (0..=60).map(|i| i as f64 * 0.05).collect();
        let cdf = cumulative_fraction(&deltas, &thresholds).unwrap();
        let mut last = 0.0;
        for (_, f) in cdf {
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!(f >= last);
            last = f;
        }
    }

    #[test]
    fn paired_t_is_translation_invariant(
        pairs in prop::collection::vec((1i32..=6, 1i32..=6), 3..20),
        shift in -50i32..50,
    ) {
        let pre: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let post: Vec<f64> = pairs.iter().map(|p| f64::from(p.1)).collect();
        let a = paired_t_test(&pre, &post);
        let pre_s: Vec<f64> = pre.iter().map(|x| x + f64::from(shift)).collect();
        let post_s: Vec<f64> = post.iter().map(|x| x + f64::from(shift)).collect();
        let b = paired_t_test(&pre_s, &post_s);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a.statistic - b.statistic).abs() <= 1e-12);
                prop_assert!((a.p_value - b.p_value).abs() <= 1e-12);
                prop_assert!((a.effect - b.effect).abs() <= 1e-12);
            }
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn rank_tests_ignore_monotone_transforms(
        a in prop::collection::vec(-5.0f64..5.0, 1..25),
        b in prop::collection::vec(-5.0f64..5.0, 1..25),
        c in prop::collection::vec(-5.0f64..5.0, 1..25),
    ) {
        let f = |v: &Vec<f64>| -> Vec<f64> { v.iter().map(|x| x.exp() + x * x * x).collect() };
        let (fa, fb, fc) = (f(&a), f(&b), f(&c));
        let u = mann_whitney_u(&a, &b).unwrap();
        let fu = mann_whitney_u(&fa, &fb).unwrap();
        prop_assert_eq!(u.statistic, fu.statistic);
        prop_assert_eq!(u.p_value, fu.p_value);
        let h = kruskal_wallis(&[&a, &b, &c]).unwrap();
        let fh = kruskal_wallis(&[&fa, &fb, &fc]).unwrap();
        prop_assert_eq!(h.statistic, fh.statistic);
    }

    #[test]
    fn rank_biserial_and_p_stay_in_range(
        a in prop::collection::vec(0u8..10, 1..30),
        b in prop::collection::vec(0u8..10, 1..30),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.effect));
        prop_assert!((0.0..=1.0).contains(&r.p_value));
    }
}

#[test]
fn renderer_is_lipschitz_in_the_latent() {
    // |d pixel| <= (255/4) * sum|dz| / sqrt(D) before rounding.
    let renderer = Renderer::new(32, 16, 16, 3).unwrap();
    let mut rng = mixlab_core::rng::SeededRng::new(10);
    for _ in 0..50 {
        let z: Vec<f64> = (0..32).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let dz: Vec<f64> = (0..32).map(|_| rng.uniform(-0.02, 0.02)).collect();
        let z2: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
        let l1: f64 = dz.iter().map(|d| d.abs()).sum();
        let (a, b) = (LatentVector::new(z).unwrap(), LatentVector::new(z2).unwrap());
        for y in (0..16).step_by(5) {
            for x in (0..16).step_by(5) {
                let fa = renderer.field_at(&a, x, y).unwrap();
                let fb = renderer.field_at(&b, x, y).unwrap();
                for c in 0..3 {
                    let diff = (squash(fa[c]) - squash(fb[c])).abs();
                    assert!(diff <= 255.0 / 4.0 * l1 / 32f64.sqrt() + 1e-9);
                }
            }
        }
    }
}
