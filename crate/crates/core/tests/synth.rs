use emil::synth::{
    decode_dataset, encode_dataset, generate, read_dataset, stratified_folds, stratified_split, write_dataset,
    SynthConfig,
};
use emil::tensor::io::encoded_len;
use emil::Error;
use proptest::prelude::*;

#[test]
fn lesions_are_a_small_fraction_of_positive_images() {
    let cfg = SynthConfig::default();
    let samples = generate(&cfg, 1000, 0).unwrap();
    let pos: Vec<_> = samples.iter().filter(|s| s.label == 1).collect();
    let lesion: usize = pos.iter().map(|s| s.mask.area()).sum();
    let pixels = pos.len() * cfg.height * cfg.width;
    let fraction = lesion as f64 / pixels as f64;
    assert!(fraction < 0.02, "lesion fraction {fraction}");
    assert!(fraction > 0.0);
    // Class balance within ±4 binomial standard deviations of 0.7.
    let sd = (1000.0f64 * 0.7 * 0.3).sqrt();
    assert!((pos.len() as f64 - 700.0).abs() < 4.0 * sd, "{} positives", pos.len());
}

#[test]
fn masks_mark_lesions_inside_groups() {
    for s in generate(&SynthConfig::default(), 200, 1).unwrap() {
        assert_eq!(s.label == 1, s.mask.any());
        for r in 0..s.mask.height {
            for c in 0..s.mask.width {
                if s.mask.get(r, c) == 1 {
                    assert!(s.groups.iter().any(|g| g.rect.contains(r, c)));
                }
            }
        }
        for g in &s.groups {
            let hit = (g.rect.y0..g.rect.y1).any(|r| (g.rect.x0..g.rect.x1).any(|c| s.mask.get(r, c) == 1));
            assert_eq!(g.label == 1, hit);
        }
    }
}

#[test]
fn lesions_stand_out_from_their_surroundings() {
    let cfg = SynthConfig {
        positive_fraction: 1.0,
        pixel_noise: 0.0,
        smooth_noise: 0.0,
        distractors: 0,
        contrast_jitter: 0.0,
        ..SynthConfig::default()
    };
    for s in generate(&cfg, 20, 2).unwrap() {
        let (h, w) = (s.mask.height, s.mask.width);
        let (mut inside, mut ni, mut ring, mut nr) = (0.0, 0, 0.0, 0);
        for r in 0..h {
            for c in 0..w {
                let v = s.image.data()[r * w + c] as f64;
                if s.mask.get(r, c) == 1 {
                    inside += v;
                    ni += 1;
                    continue;
                }
                let near = (r.saturating_sub(2)..(r + 3).min(h)).any(|y| (c.saturating_sub(2)..(c + 3).min(w)).any(|x| s.mask.get(y, x) == 1));
                if near {
                    ring += v;
                    nr += 1;
                }
            }
        }
        let diff = inside / ni as f64 - ring / nr as f64;
        assert!(diff > 0.15, "lesion only {diff} above its surroundings");
    }
}

#[test]
fn file_size_is_exact() {
    let samples = generate(&SynthConfig::default(), 1000, 4).unwrap();
    let bytes = encode_dataset(&samples);
    let per_sample: usize = samples
        .iter()
        .map(|s| 4 + encoded_len(&[1, 64, 96], 4) + encoded_len(&[64, 96], 1) + 4 + s.groups.len() * 20)
        .sum();
    assert_eq!(bytes.len(), 8 + per_sample);
}

#[test]
fn write_read_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.emd1");
    let samples = generate(&SynthConfig::default(), 12, 7).unwrap();
    write_dataset(&samples, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), samples);
}

#[test]
fn damaged_files_fail_with_offsets() {
    let samples = generate(&SynthConfig::default(), 3, 8).unwrap();
    let bytes = encode_dataset(&samples);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 0, .. })));
    for cut in [3, 7, 9, 100, bytes.len() / 2, bytes.len() - 1] {
        match decode_dataset(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64, "cut {cut} reported {offset}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_dataset(&extra).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_partitions_indices(n in 20usize..300, pos_rate in 0.2..0.8f64, seed in any::<u64>()) {
        let labels: Vec<u8> = (0..n).map(|i| u8::from((i as f64 * pos_rate).fract() < pos_rate)).collect();
        let s = stratified_split(&labels, 0.15, 0.15, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(stratified_split(&labels, 0.15, 0.15, seed).unwrap(), s);
    }

    #[test]
    fn folds_partition_indices(n in 10usize..200, k in 2usize..6, seed in any::<u64>()) {
        let labels: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let idx: Vec<usize> = (0..n).collect();
        let folds = stratified_folds(&idx, &labels, k, seed).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, idx);
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn desk_scale_split_sizes() {
    let samples = generate(&SynthConfig::default(), 2800, 0).unwrap();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let s = stratified_split(&labels, 1.0 / 7.0, 1.0 / 7.0, 0).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2000, 400, 400));
}

#[test]
fn invalid_inputs() {
    assert!(generate(&SynthConfig::default(), 0, 0).is_err());
    let cfg = SynthConfig { lesions: (3, 1), ..SynthConfig::default() };
    assert!(matches!(generate(&cfg, 1, 0), Err(Error::Config(_))));
    assert!(stratified_split(&[0, 1], 0.6, 0.5, 0).is_err());
}
