use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ctc::{label_posteriors_bruteforce, Alphabet, FrameDistributionSeq, LabelSeq};

pub(crate) fn random_dist(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> FrameDistributionSeq<f64> {
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|_| {
            let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    FrameDistributionSeq::from_rows(&rows).unwrap()
}

fn one_hot(path: &[usize], classes: usize) -> FrameDistributionSeq<f64> {
    let rows: Vec<Vec<f64>> = path
        .iter()
        .map(|&k| (0..classes).map(|c| if c == k { 1.0 } else { 0.0 }).collect())
        .collect();
    FrameDistributionSeq::from_rows(&rows).unwrap()
}

#[test]
fn greedy_one_hot_and_ties() {
    let ab = Alphabet::from_str_letters("cat").unwrap();
    let path = ab.parse_path("c-at").unwrap();
    let dist = one_hot(&path, ab.num_classes());
    assert_eq!(ab.decode(&greedy_decode(&dist)), "cat");
    assert_eq!(beam_decode(&dist, 1).unwrap(), greedy_decode(&dist));

    let uniform = FrameDistributionSeq::from_rows(&vec![vec![0.25; 4]; 3]).unwrap();
    assert_eq!(greedy_decode(&uniform), LabelSeq(vec![0]));
}

#[test]
fn fuse_score_example() {
    assert!((fuse_score(0.2, 0.5, 0.25) - 0.45).abs() < 1e-15);
}

#[test]
fn exhaustive_beam_is_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let frames = rng.random_range(1..=4);
        let letters = rng.random_range(1..=2);
        let dist = random_dist(&mut rng, frames, letters + 1);
        let post = label_posteriors_bruteforce(&dist).unwrap();
        let outcome = beam_search(&dist, 64).unwrap();
        let (map_seq, map_p) = post
            .iter()
            .fold((LabelSeq::default(), -1.0), |acc, (l, &p)| if p > acc.1 { (l.clone(), p) } else { acc });
        assert_eq!(outcome.best(), &map_seq);
        for h in &outcome.ranked {
            let mass = h.log_mass().exp();
            assert!(mass <= 1.0 + 1e-12);
            assert!((mass - post[&h.labels]).abs() < 1e-9);
        }
        assert!((outcome.ranked[0].log_mass().exp() - map_p).abs() < 1e-9);
    }
}

#[test]
fn beam_prefixes_are_distinct() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dist = random_dist(&mut rng, 12, 6);
    let outcome = beam_search(&dist, 8).unwrap();
    let mut seen: Vec<&LabelSeq> = outcome.ranked.iter().map(|h| &h.labels).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), outcome.ranked.len());
    assert!(beam_search(&dist, 0).is_err());
}

#[test]
fn zero_fusion_matches_plain_beam() {
    let ab = Alphabet::from_str_letters("abcd").unwrap();
    let corpus: Vec<LabelSeq> = ["abc", "bad", "dab", "cab"]
        .iter()
        .map(|w| ab.encode(w).unwrap())
        .collect();
    let lm = lm_train(&corpus, &ab, 2, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let frames = rng.random_range(1..10);
        let dist = random_dist(&mut rng, frames, 5);
        let width = rng.random_range(1..6);
        assert_eq!(
            lm_fused_beam_decode(&dist, width, &lm, 0.0).unwrap(),
            beam_decode(&dist, width).unwrap()
        );
    }
}

#[test]
fn full_fusion_follows_the_lm() {
    let ab = Alphabet::from_str_letters("asl").unwrap();
    let lm = lm_train(&[ab.encode("asl").unwrap()], &ab, 2, 0.1).unwrap();
    let near_uniform = vec![
        vec![0.26, 0.25, 0.25, 0.24],
        vec![0.25, 0.26, 0.24, 0.25],
        vec![0.24, 0.25, 0.26, 0.25],
    ];
    let dist = FrameDistributionSeq::from_rows(&near_uniform).unwrap();
    let out = ab.decode(&lm_fused_beam_decode(&dist, 20, &lm, 1.0).unwrap());
    assert!("asl".starts_with(&out), "decoded {out:?}");
    assert_eq!(out, "asl");
}

#[test]
fn fusion_validates_inputs() {
    let ab = Alphabet::from_str_letters("ab").unwrap();
    let lm = lm_train(&[ab.encode("ab").unwrap()], &ab, 1, 1.0).unwrap();
    let dist = FrameDistributionSeq::from_rows(&[vec![0.5, 0.5]]).unwrap();
    assert!(lm_fused_beam_decode(&dist, 3, &lm, 0.5).is_err());
    let dist = FrameDistributionSeq::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap();
    assert!(lm_fused_beam_decode(&dist, 3, &lm, 1.5).is_err());
}

#[test]
fn greedy_never_emits_blank() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let dist = random_dist(&mut rng, 10, 4);
        assert!(greedy_decode(&dist).0.iter().all(|&l| l < 3));
    }
}
