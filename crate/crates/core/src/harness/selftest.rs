//! Quick checks behind `emil selftest` and `emil gradcheck`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::metrics::{roc_auc, top_k_binarize};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::guidance::{batch_loss_graph, compound_loss, patch_labels, ClassWeights};
use crate::head::{aggregate, removal_delta, HeadConfig};
use crate::model::{Emil, ModelConfig};
use crate::rng;
use crate::synth::{decode_dataset, encode_dataset, generate, SynthConfig};
use crate::tensor::{grad_check, GradCheckReport, Tensor};

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(what()))
    }
}

/// Finite differences through encoder, head and image loss of a tiny model.
pub fn model_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let config = ModelConfig {
        encoder: EncoderConfig {
            stage_channels: vec![2, 3],
            stage_strides: vec![2, 2],
            ..EncoderConfig::default()
        },
        head: HeadConfig {
            hidden: 3,
            ..HeadConfig::default()
        },
    };
    let model = Emil::<f64>::init(config, seed)?;
    let mut r = rng::seeded(seed ^ 0xa11ce);
    let image: Vec<f64> = (0..2 * 64).map(|_| StandardNormal.sample(&mut r)).collect();
    let image = Tensor::new(&[2, 1, 8, 8], image)?;
    let inputs: Vec<Tensor<f64>> = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |g, vs| {
            let vars = model.vars_from(vs)?;
            let x = g.constant(image.clone());
            let out = model.forward_graph(g, &vars, x)?;
            let (total, _) = batch_loss_graph(g, out.head.y_hat, out.head.y_tilde, &[1, 0], &[None, None], ClassWeights { pos: 1.5, neg: 0.75 })?;
            Ok(total)
        },
        &inputs,
        1e-5,
    )
}

fn aggregate_oracle() -> Result<()> {
    let mut r = rng::seeded(1);
    for _ in 0..500 {
        let k = r.random_range(1..=6);
        let y: Vec<f64> = (0..k).map(|_| r.random()).collect();
        let w: Vec<f64> = (0..k).map(|_| r.random()).collect();
        let k_min = r.random_range(0.1..4.0);
        let num: f64 = y.iter().zip(&w).map(|(a, b)| a * b).sum();
        let den: f64 = w.iter().sum::<f64>().max(k_min);
        let got = aggregate(&y, &w, k_min)?;
        check((got - num / den).abs() < 1e-12, || format!("aggregate {got} vs {}", num / den))?;
    }
    Ok(())
}

fn removal_regime() -> Result<()> {
    let mut r = rng::seeded(2);
    for _ in 0..500 {
        let k = r.random_range(2..=6);
        let k_min = r.random_range(0.5..3.0);
        let y: Vec<f64> = (0..k).map(|_| r.random()).collect();
        let w: Vec<f64> = (0..k).map(|_| r.random::<f64>() * k_min / k as f64).collect();
        let i = r.random_range(0..k);
        let d = removal_delta(&y, &w, i, k_min)?;
        let closed = -w[i] * y[i] / k_min;
        check((d - closed).abs() < 1e-12, || format!("removal {d} vs {closed}"))?;
    }
    // Two confident patches with K_min = 1: removing one leaves ŷ unchanged.
    let d = removal_delta(&[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0], 0, 1.0)?;
    check(d == 0.0, || format!("two-patch removal changed the prediction by {d}"))
}

fn loss_scaling() -> Result<()> {
    let (alpha, total) = compound_loss(&[("image", 0.5), ("patch", 0.1)])?;
    check((alpha[0] - 1.0).abs() < 1e-12 && (alpha[1] - 5.0).abs() < 1e-12, || format!("alpha {alpha:?}"))?;
    check((total - 1.0).abs() < 1e-12, || format!("total {total}"))
}

fn auc_pairs() -> Result<()> {
    let mut r = rng::seeded(3);
    for _ in 0..50 {
        let n = r.random_range(2..=30);
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..10) as f64) / 10.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]) {
                        Some(std::cmp::Ordering::Greater) => 1.0,
                        Some(std::cmp::Ordering::Equal) => 0.5,
                        _ => 0.0,
                    };
                }
            }
        }
        let got = roc_auc(&scores, &labels);
        check((got - num / den).abs() < 1e-12, || format!("roc auc {got} vs pair count {}", num / den))?;
    }
    Ok(())
}

fn binarization_area() -> Result<()> {
    let mut r = rng::seeded(4);
    for _ in 0..50 {
        let n = r.random_range(1..200);
        let render: Vec<f64> = (0..n).map(|_| (r.random_range(0..5) as f64) / 4.0).collect();
        let k = r.random_range(0..=n);
        let picked = top_k_binarize(&render, k).iter().filter(|&&v| v == 1).count();
        check(picked == k, || format!("selected {picked} of {k} pixels"))?;
    }
    Ok(())
}

fn mil_consistency() -> Result<()> {
    let cfg = SynthConfig::default();
    for s in generate(&cfg, 40, 5)? {
        let y = patch_labels(&s.mask, (8, 12), (1, 1), (1, 1))?;
        check((s.label == 1) == y.contains(&1), || "image label disagrees with patch labels".into())?;
        for g in &s.groups {
            let hit = (g.rect.y0..g.rect.y1).any(|r| (g.rect.x0..g.rect.x1).any(|c| s.mask.get(r, c) == 1));
            check((g.label == 1) == hit, || "group label disagrees with mask".into())?;
        }
    }
    Ok(())
}

fn dataset_round_trip() -> Result<()> {
    let samples = generate(&SynthConfig::default(), 5, 6)?;
    let back = decode_dataset(&encode_dataset(&samples))?;
    check(back == samples, || "dataset changed across encode/decode".into())
}

fn gradients() -> Result<()> {
    let report = model_gradcheck(0)?;
    check(report.passes(1e-4), || format!("max relative error {:.3e}", report.max_rel_error))
}

pub fn run_all() -> Vec<(&'static str, Result<()>)> {
    let checks: [(&'static str, fn() -> Result<()>); 8] = [
        ("aggregate_oracle", aggregate_oracle),
        ("removal_regime", removal_regime),
        ("loss_scaling", loss_scaling),
        ("roc_auc_pair_count", auc_pairs),
        ("binarization_area", binarization_area),
        ("mil_consistency", mil_consistency),
        ("dataset_round_trip", dataset_round_trip),
        ("model_gradcheck", gradients),
    ];
    checks.into_iter().map(|(n, f)| (n, f())).collect()
}
