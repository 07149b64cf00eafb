use emil::head::{
    aggregate, aggregate_max, attend, attend_softmax, attention_weight_row, build_heatmaps, classify_patches,
    group_probability, head_forward, init_head, removal_delta, removal_delta_closed_form, Aggregator, HeadConfig,
    Prediction,
};
use emil::tensor::{grad_check, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn direct(y: &[f64], w: &[f64], k_min: f64) -> f64 {
    let mut num = 0.0;
    let mut sw = 0.0;
    for i in 0..y.len() {
        num += y[i] * w[i];
        sw += w[i];
    }
    let den = if sw > k_min { sw } else { k_min };
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn bag() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
    (1usize..=6).prop_flat_map(|k| {
        (
            prop::collection::vec(0.0..=1.0f64, k),
            prop::collection::vec(0.0..=1.0f64, k),
            0.05..5.0f64,
        )
    })
}

proptest! {
    #[test]
    fn aggregate_matches_direct_sum((y, w, k_min) in bag()) {
        prop_assert!((aggregate(&y, &w, k_min).unwrap() - direct(&y, &w, k_min)).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_a_bounded_probability((y, w, k_min) in bag()) {
        let v = aggregate(&y, &w, k_min).unwrap();
        let top = y.iter().copied().fold(0.0, f64::max);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!(v <= top + 1e-12);
    }

    #[test]
    fn aggregate_is_permutation_invariant((y, w, k_min) in bag(), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..y.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let yp: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let wp: Vec<f64> = order.iter().map(|&i| w[i]).collect();
        prop_assert!((aggregate(&y, &w, k_min).unwrap() - aggregate(&yp, &wp, k_min).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn larger_k_min_never_raises_the_prediction((y, w, k_min) in bag(), extra in 0.0..5.0f64) {
        prop_assert!(aggregate(&y, &w, k_min + extra).unwrap() <= aggregate(&y, &w, k_min).unwrap() + 1e-15);
    }

    #[test]
    fn group_of_everything_is_the_image((y, w, k_min) in bag()) {
        let all: Vec<usize> = (0..y.len()).collect();
        prop_assert!((group_probability(&y, &w, &all, k_min).unwrap() - aggregate(&y, &w, k_min).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn group_matches_subset_sum((y, w, k_min) in bag(), mask in any::<u8>()) {
        let idx: Vec<usize> = (0..y.len()).filter(|i| mask >> i & 1 == 1).collect();
        prop_assume!(!idx.is_empty());
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let ws: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
        prop_assert!((group_probability(&y, &w, &idx, k_min).unwrap() - direct(&ys, &ws, k_min)).abs() < 1e-12);
    }

    #[test]
    fn removal_delta_is_exact_re_evaluation((y, w, k_min) in bag(), pick in any::<prop::sample::Index>()) {
        let i = pick.index(y.len());
        let mut yr = y.clone();
        let mut wr = w.clone();
        yr.remove(i);
        wr.remove(i);
        let expect = direct(&yr, &wr, k_min) - direct(&y, &w, k_min);
        prop_assert!((removal_delta(&y, &w, i, k_min).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn closed_form_holds_below_k_min((y, w, k_min) in bag(), pick in any::<prop::sample::Index>()) {
        let total: f64 = w.iter().sum();
        let scale = if total > k_min { k_min / total } else { 1.0 };
        let w: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let i = pick.index(y.len());
        let exact = removal_delta(&y, &w, i, k_min).unwrap();
        let closed = removal_delta_closed_form(&y, &w, i, k_min).unwrap();
        prop_assert!((exact - closed).abs() < 1e-9, "{exact} vs {closed}");
    }

    /// Above `k_min` after removal and with equal ỹ the removal has no effect.
    #[test]
    fn matched_probabilities_survive_removal(k in 2usize..=6, p in 0.0..=1.0f64, k_min in 0.1..1.0f64) {
        let y = vec![p; k];
        let w = vec![1.0; k];
        prop_assert!(removal_delta(&y, &w, 0, k_min).unwrap().abs() < 1e-12);
    }
}

#[test]
fn thousand_random_bags_against_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let k = rng.random_range(1..=6);
        let y: Vec<f64> = (0..k).map(|_| rng.random()).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.random()).collect();
        let k_min = rng.random_range(0.0..4.0);
        assert!((aggregate(&y, &w, k_min).unwrap() - direct(&y, &w, k_min)).abs() < 1e-12);
    }
}

#[test]
fn error_cases() {
    assert!(aggregate(&[0.5], &[0.5, 0.1], 1.0).is_err());
    assert!(aggregate(&[0.5], &[0.5], -1.0).is_err());
    assert!(group_probability(&[0.5, 0.2], &[0.5, 0.1], &[], 1.0).is_err());
    assert!(group_probability(&[0.5, 0.2], &[0.5, 0.1], &[2], 1.0).is_err());
    assert!(group_probability(&[0.5, 0.2], &[0.5, 0.1], &[1, 1], 1.0).is_err());
    assert!(removal_delta(&[0.5], &[0.5], 1, 1.0).is_err());
    assert!(aggregate_max(&[]).is_err());
    assert_eq!(aggregate_max(&[0.2, 0.7, 0.1]).unwrap(), 0.7);
}

#[test]
fn tiny_weight_below_k_min_barely_counts() {
    let v = aggregate(&[1.0], &[1e-6], 1.0).unwrap();
    assert!(v <= 1e-6);
}

#[test]
fn gated_weights_match_scalar_oracle_and_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (k, c, d) = (5, 4, 3);
    let params = init_head::<f64>(c, d, 2).unwrap();
    let p = Tensor::new(&[k, c], (0..k * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let w = attend(&p, &params).unwrap();
    for i in 0..k {
        let row = &p.data()[i * c..(i + 1) * c];
        let expect = attention_weight_row(row, params.a.data(), params.b.data(), params.c.data());
        assert!((w[i] - expect).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&w[i]));
    }
    // Changing one patch leaves the other weights untouched.
    let mut p2 = p.clone();
    for j in 0..c {
        p2.data_mut()[2 * c + j] += 1.0;
    }
    let w2 = attend(&p2, &params).unwrap();
    for i in (0..k).filter(|&i| i != 2) {
        assert_eq!(w[i], w2[i]);
    }
    let y = classify_patches(&p, &params.o).unwrap();
    for i in 0..k {
        let z: f64 = (0..c).map(|j| p.data()[i * c + j] * params.o.data()[j]).sum();
        assert!((y[i] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
    }
}

#[test]
fn softmax_weights_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..10 {
        let params = init_head::<f64>(3, 4, seed).unwrap();
        let k = rng.random_range(1..10);
        let p = Tensor::new(&[k, 3], (0..k * 3).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let w = attend_softmax(&p, &params).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn head_gradients(aggregator: Aggregator, k_min: f64, scale: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k, c, d) = (2, 5, 3, 4);
    let params = init_head::<f64>(c, d, seed).unwrap();
    let patches = Tensor::new(&[n, k, c], (0..n * k * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
    let config = HeadConfig {
        k_min,
        hidden: d,
        aggregator,
        ..HeadConfig::default()
    };
    let inputs = vec![patches, params.o.clone(), params.a.clone(), params.b.clone(), params.c.clone()];
    let report = grad_check(
        |g, v| {
            let vars = emil::head::HeadVars { o: v[1], a: v[2], b: v[3], c: v[4] };
            let out = head_forward(g, &config, &vars, v[0])?;
            let wsum = g.sum(out.w);
            let ysum = g.sum(out.y_hat);
            let mixed = g.scale(wsum, 0.1);
            g.add(ysum, mixed)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn head_gradients_in_both_denominator_regimes() {
    for seed in 0..4 {
        // Tiny k_min: Σw dominates; large k_min: the clamp is active.
        assert!(head_gradients(Aggregator::Gated, 0.1, 1.0, seed) < 1e-6);
        assert!(head_gradients(Aggregator::Gated, 10.0, 1.0, seed) < 1e-6);
        assert!(head_gradients(Aggregator::Softmax, 1.0, 1.0, seed) < 1e-6);
    }
}

#[test]
fn max_aggregator_gradients() {
    assert!(head_gradients(Aggregator::Max, 1.0, 1.0, 3) < 1e-6);
}

fn prediction(y: Vec<f64>, w: Vec<f64>, grid: (usize, usize)) -> Prediction {
    Prediction {
        y_hat: aggregate(&y, &w, 1.0).unwrap(),
        y_tilde: y,
        w,
        grid,
        k_min: 1.0,
    }
}

#[test]
fn tiling_heatmaps_reproduce_the_grid() {
    let y: Vec<f64> = (0..6).map(|i| i as f64 / 6.0).collect();
    let w: Vec<f64> = (0..6).map(|i| 1.0 - i as f64 / 6.0).collect();
    let pred = prediction(y.clone(), w.clone(), (2, 3));
    let (prob, attn) = build_heatmaps(&pred, (1, 1), (1, 1), (2, 3), (16, 24)).unwrap();
    assert_eq!(prob.grid, y);
    assert_eq!(attn.grid, w);
    assert_eq!(prob.render.len(), 16 * 24);
    let (lo, hi) = (0.0, 5.0 / 6.0);
    assert!(prob.render.iter().all(|v| (lo - 1e-12..=hi + 1e-12).contains(v)));
    // At the centre of each cell block the render hits the cell value.
    assert!((prob.render[3 * 24 + 3] - y[0]).abs() < 0.05);
}

#[test]
fn overlapping_heatmaps_average_and_clip() {
    // 2×2 windows with stride 1 on a 3×3 feature map: 4 patches.
    let pred = prediction(vec![0.2, 0.4, 0.6, 0.8], vec![0.7, 0.7, 0.7, 0.7], (2, 2));
    let (prob, attn) = build_heatmaps(&pred, (2, 2), (1, 1), (3, 3), (3, 3)).unwrap();
    assert!((prob.grid[4] - 0.5).abs() < 1e-12);
    assert!((prob.grid[0] - 0.2).abs() < 1e-12);
    assert!((prob.grid[1] - 0.3).abs() < 1e-12);
    assert_eq!(attn.grid[4], 1.0);
    assert!((attn.grid[0] - 0.7).abs() < 1e-12);
    assert!(attn.grid.iter().all(|&v| v <= 1.0));
}

#[test]
fn heatmap_layout_mismatch_is_an_error() {
    let pred = prediction(vec![0.5; 6], vec![0.5; 6], (2, 3));
    assert!(build_heatmaps(&pred, (1, 1), (1, 1), (3, 3), (16, 24)).is_err());
}
