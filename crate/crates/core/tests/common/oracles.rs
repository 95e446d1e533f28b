//! Selection rules against plain scans written independently of the library.
//! Each check panics on the first disagreement.

use super::*;
use dacca::contrast::{self, ContrastConfig};
use dacca::dfa::{self, DfaOptions};
use dacca::labels::{ClassMap, UNLABELED};
use dacca::selftrain;
use dacca::tensor::Tensor;
use dacca::Domain;
use rand::Rng;

const LANES: usize = 2;
const H: usize = 8;
const W: usize = 8;

fn at(t: &Tensor, ch: usize, p: usize) -> f64 {
    t.values()[ch * H * W + p]
}

fn first_max(vals: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..vals.len() {
        if vals[i] > vals[best] {
            best = i;
        }
    }
    best
}

fn first_min(vals: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..vals.len() {
        if vals[i] < vals[best] {
            best = i;
        }
    }
    best
}

fn pixel_probs(t: &Tensor, p: usize) -> Vec<f64> {
    (0..LANES + 1).map(|c| at(t, c, p)).collect()
}

pub fn anchor_candidates_match_scan(instances: u64) {
    for seed in 0..instances {
        let mut r = rng(seed);
        let labels = random_labels(&mut r, H, W, LANES, 0.2);
        let probs = softmax_pixels(&random_tensor(&mut r, &[LANES + 1, H, W], seed % 2 == 0));
        let mu = r.random_range(0.0..0.6);
        for c in 1..=LANES {
            let mut want = Vec::new();
            for p in 0..H * W {
                if labels.get(p) as usize == c && at(&probs, c - 1, p) >= mu {
                    want.push(p);
                }
            }
            assert_eq!(contrast::anchor_candidates(&labels, &probs, c, mu), want, "seed {seed} class {c}");

            let max = r.random_range(1..12);
            let picked = contrast::select_anchors(&labels, &probs, mu, max, &mut rng(seed))[c - 1].clone();
            assert_eq!(picked.len(), want.len().min(max));
            assert!(picked.windows(2).all(|w| w[0] < w[1]), "sorted without repeats");
            assert!(picked.iter().all(|p| want.contains(p)));
            if want.len() <= max {
                assert_eq!(picked, want);
            }
        }
    }
}

pub fn source_negative_pool_matches_scan(instances: u64) {
    for seed in 0..instances {
        let mut r = rng(1000 + seed);
        // some instances have a single lane class present to reach the fallback
        let mut labels = random_labels(&mut r, H, W, LANES, 0.1);
        if seed % 3 == 0 {
            for p in 0..H * W {
                if labels.get(p) == 2 {
                    labels.set(p, 3);
                }
            }
        }
        for c in 1..=LANES {
            let mut other = Vec::new();
            let mut bg = Vec::new();
            for p in 0..H * W {
                let l = labels.get(p);
                if l != UNLABELED && l as usize <= LANES && l as usize != c {
                    other.push(p);
                }
                if l as usize == LANES + 1 {
                    bg.push(p);
                }
            }
            let want = if other.is_empty() { bg } else { other };
            let pool = contrast::source_negative_pool(&labels, c);
            assert_eq!(pool, want, "seed {seed} class {c}");
            let drawn = contrast::select_negatives_source(&labels, c, 7, &mut r);
            assert!(drawn.iter().all(|p| want.contains(p)));
            assert_eq!(drawn.len(), if want.is_empty() { 0 } else { 7 });
        }
    }
}

pub fn target_negative_pool_matches_scan(instances: u64) {
    for seed in 0..instances {
        let mut r = rng(2000 + seed);
        let probs = softmax_pixels(&random_tensor(&mut r, &[LANES + 1, H, W], seed % 2 == 1));
        for c in 1..=LANES {
            let want: Vec<usize> = (0..H * W).filter(|&p| first_min(&pixel_probs(&probs, p)) + 1 == c).collect();
            assert_eq!(contrast::target_negative_pool(&probs, c), want, "seed {seed} class {c}");
            let drawn = contrast::select_negatives_target(&probs, c, 5, &mut r);
            assert_eq!(drawn.len(), 5);
            if want.is_empty() {
                // fallback: lowest probability for `c`, ties to the lower index
                let mut order: Vec<usize> = (0..H * W).collect();
                order.sort_by(|&a, &b| at(&probs, c - 1, a).partial_cmp(&at(&probs, c - 1, b)).unwrap().then(a.cmp(&b)));
                assert_eq!(drawn, order[..5].to_vec());
            } else {
                assert!(drawn.iter().all(|p| want.contains(p)));
            }
        }
    }
}

pub fn pseudo_labels_and_filter_match_scan(instances: u64) {
    for seed in 0..instances {
        let mut r = rng(3000 + seed);
        let probs = softmax_pixels(&random_tensor(&mut r, &[LANES + 1, H, W], seed % 2 == 0));
        let alpha = [0.3, 0.4, 0.5, 0.6][seed as usize % 4];
        let (labels, conf) = selftrain::pseudo_labels_from_probs(&probs).unwrap();
        let filtered = selftrain::filter_pseudo_labels(&labels, &conf, alpha);
        for p in 0..H * W {
            let probs_p = pixel_probs(&probs, p);
            let k = first_max(&probs_p);
            assert_eq!(labels.get(p) as usize, k + 1, "seed {seed} pixel {p}");
            assert_eq!(conf[p], probs_p[k]);
            let want = if probs_p[k] >= alpha { k as u8 + 1 } else { UNLABELED };
            assert_eq!(filtered.get(p), want);
        }
    }
}

pub fn category_map_matches_scan(instances: u64) {
    for seed in 0..instances {
        let mut r = rng(4000 + seed);
        let logits = random_tensor(&mut r, &[LANES + 1, H, W], seed % 2 == 0);
        let (p_map, conf) = dfa::categories_from_logits(&logits).unwrap();
        let probs = softmax_pixels(&logits);
        for p in 0..H * W {
            let probs_p = pixel_probs(&probs, p);
            let k = first_max(&probs_p);
            assert_eq!(p_map.get(p) as usize, k + 1, "seed {seed} pixel {p}");
            assert!((conf[p] - probs_p[k]).abs() < 1e-15);
        }
    }
}

/// Brute-force `Z` for one bank: lane rows on foreground, nearest row on
/// low-confidence background, zero elsewhere.
fn z_oracle(p_map: &ClassMap, conf: &[f64], rows: &[Vec<f64>], e: &Tensor, opts: DfaOptions) -> Vec<Vec<f64>> {
    let d = rows[0].len();
    (0..H * W)
        .map(|p| {
            let c = p_map.get(p) as usize;
            if c <= LANES {
                rows[c - 1].clone()
            } else if opts.ubp && conf[p] < opts.epsilon {
                let feat: Vec<f64> = (0..d).map(|ch| e.values()[ch * H * W + p]).collect();
                let dist: Vec<f64> = rows
                    .iter()
                    .map(|r| r.iter().zip(&feat).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect();
                rows[first_min(&dist)].clone()
            } else {
                vec![0.0; d]
            }
        })
        .collect()
}

pub fn domain_map_and_ubp_match_scan(instances: u64) {
    let d = 4;
    for seed in 0..instances {
        let mut r = rng(5000 + seed);
        let logits = random_tensor(&mut r, &[LANES + 1, H, W], false);
        let (p_map, conf) = dfa::categories_from_logits(&logits).unwrap();
        let e = random_tensor(&mut r, &[d, H, W], seed % 2 == 0);
        let domain = if seed % 2 == 0 { Domain::Source } else { Domain::Target };
        let bank = random_bank(&mut r, domain, LANES, d);
        let rows: Vec<Vec<f64>> = (1..=LANES).map(|c| bank.get_positive(c).unwrap()).collect();
        let opts = DfaOptions {
            epsilon: [0.5, 0.7, 0.9][seed as usize % 3],
            ubp: seed % 5 != 0,
        };

        let ubp = dfa::find_ubp(&p_map, &conf, opts.epsilon);
        let want_ubp: Vec<usize> = (0..H * W)
            .filter(|&p| p_map.get(p) as usize == LANES + 1 && conf[p] < opts.epsilon)
            .collect();
        assert_eq!(ubp.positions, want_ubp, "seed {seed}");

        let z = dfa::build_domain_map(&p_map, &conf, &bank, &e, opts).unwrap();
        let want = z_oracle(&p_map, &conf, &rows, &e, opts);
        for (p, row) in want.iter().enumerate() {
            assert_eq!(&z.pixel(p), row, "seed {seed} pixel {p}");
        }
        for &p in &want_ubp {
            let feat = e.pixel(p);
            let dist: Vec<f64> = rows
                .iter()
                .map(|r| r.iter().zip(&feat).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            assert_eq!(dfa::ubp_category(&feat, &bank).unwrap(), first_min(&dist) + 1);
        }
    }
}

pub fn sample_sets_are_consistent_with_pools(instances: u64) {
    let cfg = ContrastConfig {
        anchors_per_class: 5,
        negatives_per_anchor: 3,
        mu_c: 0.2,
        ..ContrastConfig::default()
    };
    for seed in 0..instances {
        let mut r = rng(6000 + seed);
        let labels = random_labels(&mut r, H, W, LANES, 0.1);
        let probs = softmax_pixels(&random_tensor(&mut r, &[LANES + 1, H, W], false));
        let v = random_tensor(&mut r, &[4, H, W], false);
        let domain = if seed % 2 == 0 { Domain::Source } else { Domain::Target };
        let sets = contrast::build_sample_sets(domain, &v, &labels, &probs, &cfg, &mut r);
        for cs in &sets.classes {
            let cand = contrast::anchor_candidates(&labels, &probs, cs.class, cfg.mu_c);
            assert!(cs.anchor_positions.iter().all(|p| cand.contains(p)));
            assert_eq!(cs.anchor_positions.len(), cand.len().min(cfg.anchors_per_class));
            assert_eq!(cs.negatives.len(), cs.anchor_positions.len() * cfg.negatives_per_anchor);
            let pool: Vec<Vec<f64>> = match domain {
                Domain::Source => contrast::source_negative_pool(&labels, cs.class),
                Domain::Target => contrast::target_negative_pool(&probs, cs.class),
            }
            .into_iter()
            .map(|p| v.pixel(p))
            .collect();
            if !pool.is_empty() {
                assert!(cs.negatives.iter().all(|n| pool.contains(n)), "seed {seed}");
            }
        }
    }
}
