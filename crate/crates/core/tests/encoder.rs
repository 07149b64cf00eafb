use emil::encoder::{init_encoder, EncoderConfig};
use emil::tensor::{grad_check, Graph, Tensor};
use emil::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> EncoderConfig {
    EncoderConfig {
        stage_channels: vec![2, 3],
        stage_strides: vec![2, 1],
        ..EncoderConfig::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn two_stage_encoder_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..3 {
        let enc = init_encoder::<f64>(&toy(), seed).unwrap();
        let x = random_image(&mut rng, &[1, 1, 6, 6]);
        let mut inputs = vec![x];
        inputs.extend(enc.named_tensors().into_iter().map(|(_, t)| t.clone()));
        let report = grad_check(
            |g, v| {
                let (vars, _) = enc.vars_from(&v[1..])?;
                let u = enc.forward(g, &vars, v[0])?;
                // A non-uniform readout so that every feature matters.
                let n = g.value(u).numel();
                let weights = Tensor::from_f64(&[n], &(0..n).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>())?;
                let w = g.constant(weights);
                let flat = g.reshape(u, &[n])?;
                let prod = g.mul(flat, w)?;
                Ok(g.sum(prod))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn upsampled_encoder_gradients() {
    let cfg = EncoderConfig {
        feature_upsample_factor: 4,
        ..toy()
    };
    let enc = init_encoder::<f64>(&cfg, 4).unwrap();
    let x = random_image(&mut ChaCha8Rng::seed_from_u64(2), &[1, 1, 4, 4]);
    let report = grad_check(
        |g, v| {
            let vars = enc.bind(g, false);
            let u = enc.forward(g, &vars, v[0])?;
            let sq = g.mul(u, u)?;
            Ok(g.sum(sq))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

/// Changing one input pixel may only affect features whose receptive field
/// contains it.
#[test]
fn perturbation_stays_within_receptive_field() {
    let cfg = EncoderConfig::default();
    let enc = init_encoder::<f64>(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_image(&mut rng, &[1, 64, 96]);
    let base = enc.encode(&x).unwrap();
    let (py, px) = (40, 17);
    let mut x2 = x.clone();
    x2.data_mut()[py * 96 + px] += 1.0;
    let moved = enc.encode(&x2).unwrap();
    // Each block maps output o to block inputs 2o − 3 ..= 2o + 3, so three
    // blocks give input pixels 8o − 21 ..= 8o + 21.
    let (c, h, w) = (base.shape()[0], base.shape()[1], base.shape()[2]);
    let mut changed = 0;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let d = (base.at(&[ch, i, j]) - moved.at(&[ch, i, j])).abs();
                let in_field = |p: usize, o: usize| {
                    let (lo, hi) = (8 * o as isize - 21, 8 * o as isize + 21);
                    (lo..=hi).contains(&(p as isize))
                };
                if d > 0.0 {
                    changed += 1;
                    assert!(in_field(py, i) && in_field(px, j), "cell ({i},{j}) changed by {d}");
                }
            }
        }
    }
    assert!(changed > 0);
}

#[test]
fn random_configs_have_predicted_extents() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let stages = rng.random_range(1..=3);
        let strides: Vec<usize> = (0..stages).map(|_| rng.random_range(1..=2)).collect();
        let channels: Vec<usize> = (0..stages).map(|_| rng.random_range(1..=4)).collect();
        let factor = if rng.random_bool(0.3) { 4 } else { 1 };
        let cfg = EncoderConfig {
            stage_channels: channels.clone(),
            stage_strides: strides.clone(),
            blocks_per_stage: rng.random_range(1..=2),
            input_channels: rng.random_range(1..=2),
            feature_upsample_factor: factor,
        };
        let d: usize = strides.iter().product();
        let (h, w) = (d * rng.random_range(1..=4), d * rng.random_range(1..=4));
        let enc = init_encoder::<f32>(&cfg, rng.random()).unwrap();
        let x = Tensor::<f32>::zeros(&[cfg.input_channels, h, w]);
        let u = enc.encode(&x).unwrap();
        assert_eq!(u.shape(), &[*channels.last().unwrap(), h / d * factor, w / d * factor], "{cfg:?}");
        assert_eq!(cfg.output_dims((h, w)).unwrap(), (h / d * factor, w / d * factor));
    }
}

#[test]
fn indivisible_input_is_rejected() {
    let enc = init_encoder::<f32>(&EncoderConfig::default(), 0).unwrap();
    let err = enc.encode(&Tensor::zeros(&[1, 60, 96])).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    assert!(err.to_string().contains("pad"));
}

#[test]
fn batch_forward_matches_single_images() {
    let enc = init_encoder::<f64>(&toy(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_image(&mut rng, &[1, 8, 8]);
    let b = random_image(&mut rng, &[1, 8, 8]);
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    let mut g = Graph::new();
    let vars = enc.bind(&mut g, false);
    let x = g.constant(Tensor::new(&[2, 1, 8, 8], data).unwrap());
    let u = enc.forward(&mut g, &vars, x).unwrap();
    let both = g.value(u).data().to_vec();
    let ua = enc.encode(&a).unwrap();
    let ub = enc.encode(&b).unwrap();
    let half = both.len() / 2;
    assert_eq!(&both[..half], ua.data());
    assert_eq!(&both[half..], ub.data());
}
