#![allow(dead_code)]

pub mod oracles;

use dacca::contrast::ContrastConfig;
use dacca::data::{self, DomainStyle, LaneScene, SceneConfig};
use dacca::labels::{ClassMap, UNLABELED};
use dacca::model::{ModelConfig, SegModel};
use dacca::psmm::{aggregate_anchors, similarity_vector, BankPair, MemoryBank};
use dacca::selftrain::{TrainerConfig, TrainerState};
use dacca::tensor::Tensor;
use dacca::Domain;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values; with `coarse` they come from a 4-level grid so ties happen.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], coarse: bool) -> Tensor {
    Tensor::from_fn(shape, |_| {
        if coarse {
            rng.random_range(0..4) as f64 * 0.5
        } else {
            rng.random_range(-2.0..2.0)
        }
    })
}

pub fn softmax_pixels(logits: &Tensor) -> Tensor {
    let (c, hw) = logits.chw_split();
    let v = logits.values();
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        let max = (0..c).map(|k| v[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (v[k * hw + p] - max).exp()).sum();
        for k in 0..c {
            out[k * hw + p] = (v[k * hw + p] - max).exp() / z;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).unwrap()
}

/// Random label map over `1..=C+1`, a share of pixels unlabeled if asked.
pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, lanes: usize, unlabeled: f64) -> ClassMap {
    let classes = (0..h * w)
        .map(|_| {
            if rng.random_bool(unlabeled) {
                UNLABELED
            } else {
                rng.random_range(1..=lanes as u8 + 1)
            }
        })
        .collect();
    ClassMap::new(h, w, lanes, classes).unwrap()
}

pub fn random_bank(rng: &mut ChaCha8Rng, domain: Domain, lanes: usize, dim: usize) -> MemoryBank {
    let mut b = MemoryBank::new(domain, lanes, dim);
    for c in 1..=lanes {
        let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        b.initialize_class(domain, c, &[row]).unwrap();
    }
    b
}

pub fn random_banks(rng: &mut ChaCha8Rng, lanes: usize, dim: usize) -> BankPair {
    BankPair {
        source: random_bank(rng, Domain::Source, lanes, dim),
        target: random_bank(rng, Domain::Target, lanes, dim),
    }
}

pub fn tiny_model(seed: u64) -> SegModel {
    SegModel::new(ModelConfig {
        num_lanes: 2,
        feature_dim: 4,
        image_height: 8,
        image_width: 8,
        encoder_channels: vec![4, 4],
        seed,
        share_dfa_head: true,
    })
    .unwrap()
}

pub fn small_scenes(seed: u64, count: usize, domain: Domain) -> Vec<LaneScene> {
    let cfg = SceneConfig {
        num_lanes: 2,
        height: 16,
        width: 16,
        stroke_width: 2,
    };
    data::generate_dataset(seed, count, &cfg, &DomainStyle::for_domain(domain))
}

pub fn small_model(seed: u64) -> SegModel {
    SegModel::new(ModelConfig {
        num_lanes: 2,
        feature_dim: 4,
        image_height: 16,
        image_width: 16,
        encoder_channels: vec![4, 4],
        seed,
        share_dfa_head: true,
    })
    .unwrap()
}

/// Trainer whose contrastive and DFA paths switch on after two steps.
pub fn quick_trainer(model: SegModel, seed: u64) -> TrainerState {
    let cfg = TrainerConfig {
        total_iters: 40,
        base_lr: 1e-2,
        batch_size: 2,
        warmup_iters: 2,
        contrast: ContrastConfig {
            anchors_per_class: 4,
            negatives_per_anchor: 3,
            mu_c: 0.0,
            ..ContrastConfig::default()
        },
        seed,
        ..TrainerConfig::default()
    };
    TrainerState::new(model, cfg).unwrap()
}

pub struct GradCheck {
    pub max_rel: f64,
    /// Largest absolute gap where both gradients are below 1e-7.
    pub max_abs_tiny: f64,
    pub checked: usize,
    pub ccl_active: bool,
    pub dfa_active: bool,
    pub anchors: usize,
}

/// Random 8x8 batches: two labeled source images and two target images.
pub fn gradcheck_batches(seed: u64) -> (Vec<(Tensor, ClassMap)>, Vec<Tensor>) {
    let mut r = rng(seed);
    let img = |r: &mut ChaCha8Rng| Tensor::from_fn(&[3, 8, 8], |_| r.random_range(0.0..1.0));
    let source = (0..2).map(|_| (img(&mut r), random_labels(&mut r, 8, 8, 2, 0.0))).collect();
    let target = (0..2).map(|_| img(&mut r)).collect();
    (source, target)
}

/// Central differences of the full frozen-plan loss (CE plus both
/// contrastive terms through the fused forward) against the tape gradients.
pub fn gradcheck(seed: u64) -> GradCheck {
    use dacca::selftrain::frozen_loss;
    let (source, target) = gradcheck_batches(seed);
    let src: Vec<(&Tensor, &ClassMap)> = source.iter().map(|(i, l)| (i, l)).collect();
    let tgt: Vec<&Tensor> = target.iter().collect();
    let mut state = quick_trainer(tiny_model(seed), seed);
    while !(state.dfa_active() && state.iter >= state.config.warmup_iters + 1) {
        state.train_step(&src, &tgt).unwrap();
    }
    let plan = state.plan_step(&src, &tgt).unwrap();
    let anchors = plan
        .source
        .iter()
        .chain(&plan.target)
        .filter_map(|p| p.samples.as_ref())
        .map(|s| s.anchor_count())
        .sum();
    let cfg = state.config.clone();
    let (_, grads) = frozen_loss(&state.student, &src, &tgt, &plan, &state.banks, &cfg).unwrap();
    // near cbrt(machine eps): truncation and round-off balance here
    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    let mut max_abs_tiny: f64 = 0.0;
    let mut checked = 0;
    let mut model = state.student.clone();
    let n_params = model.params().len();
    for pi in 0..n_params {
        let len = model.params()[pi].numel();
        for k in 0..len {
            let orig = model.params()[pi].values()[k];
            model.params_mut()[pi].values_mut()[k] = orig + h;
            let (up, _) = frozen_loss(&model, &src, &tgt, &plan, &state.banks, &cfg).unwrap();
            model.params_mut()[pi].values_mut()[k] = orig - h;
            let (down, _) = frozen_loss(&model, &src, &tgt, &plan, &state.banks, &cfg).unwrap();
            model.params_mut()[pi].values_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[pi][k];
            let scale = analytic.abs().max(numeric.abs());
            // both vanish: a ratio of round-off, so compare absolutely
            if scale > 1e-7 {
                max_rel = max_rel.max((analytic - numeric).abs() / scale);
            } else {
                max_abs_tiny = max_abs_tiny.max((analytic - numeric).abs());
            }
            checked += 1;
        }
    }
    GradCheck {
        max_rel,
        max_abs_tiny,
        checked,
        ccl_active: plan.ccl_active,
        dfa_active: plan.dfa_active,
        anchors,
    }
}

/// Every row of every lane holds exactly the `w` columns nearest the lane
/// point, the points lie on one quadratic, and lanes keep their spacing.
pub fn check_geometry(scene: &LaneScene, w: usize) {
    let (h, width) = (scene.height(), scene.width());
    let lanes = scene.label.num_lanes();
    for c in 1..=lanes {
        let pts = &scene.lanes[c - 1];
        assert!(pts.len() >= 3, "lane {c} has {} points", pts.len());
        for y in 0..h {
            let got: Vec<usize> = (0..width).filter(|&x| scene.label.at(y, x) as usize == c).collect();
            let want: Vec<usize> = match pts.iter().find(|p| p.1 == y as f64) {
                Some(&(x, _)) => {
                    let start = (x - (w as f64 - 1.0) / 2.0).round() as i64;
                    (start..start + w as i64)
                        .filter(|&j| j >= 0 && j < width as i64)
                        .map(|j| j as usize)
                        .collect()
                }
                None => Vec::new(),
            };
            assert_eq!(got, want, "class {c} row {y}");
        }
        // second differences of a quadratic sampled on consecutive rows are
        // constant; snapping to 1/1024 moves each x by at most 1/2048, so a
        // single second difference by 4/2048 and two of them apart by 8/2048
        // (rows where the lane is outside the frame are skipped)
        let d2: Vec<f64> = pts
            .windows(3)
            .filter(|t| t[0].1 == t[2].1 + 2.0)
            .map(|t| t[0].0 - 2.0 * t[1].0 + t[2].0)
            .collect();
        for d in &d2 {
            assert!((d - d2[0]).abs() <= 8.0 / 2048.0 + 1e-12);
        }
        assert!(pts.windows(2).all(|p| p[0].1 > p[1].1), "bottom to top, one per row");
    }
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

/// Random bank updates checked against the oracle weights, the per-coordinate
/// hull of the anchors and the contraction identity.
pub fn bank_update_checks(seed: u64, updates: usize) {
    let mut r = rng(seed);
    let dim = 6;
    let mut bank = MemoryBank::new(Domain::Target, 3, dim);
    for c in 1..=3 {
        let row: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        bank.initialize_class(Domain::Target, c, &[row]).unwrap();
    }
    let mut moved = 0;
    for step in 0..updates {
        let class = r.random_range(1..=3);
        let n = r.random_range(1..8);
        let anchors: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        let t = r.random_range(0.009..0.9);
        let old = bank.get_positive(class).unwrap();

        let sims: Vec<f64> = anchors.iter().map(|a| cos(a, &old)).collect();
        let lib_sims = similarity_vector(&anchors, &old).unwrap();
        for (a, b) in sims.iter().zip(&lib_sims) {
            assert!((a - b).abs() < 1e-12);
        }
        let weights: Vec<f64> = sims.iter().map(|s| 1.0 - s.min(1.0)).collect();
        let total: f64 = weights.iter().sum();
        let agg = aggregate_anchors(&anchors, &lib_sims).unwrap().expect("random anchors differ from the row");
        // convex combination with the oracle weights
        let want: Vec<f64> = (0..dim)
            .map(|k| anchors.iter().zip(&weights).map(|(a, w)| w / total * a[k]).sum())
            .collect();
        for (a, b) in agg.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "step {step}");
        }
        for k in 0..dim {
            let lo = anchors.iter().map(|a| a[k]).fold(f64::INFINITY, f64::min);
            let hi = anchors.iter().map(|a| a[k]).fold(f64::NEG_INFINITY, f64::max);
            assert!(agg[k] >= lo - 1e-12 && agg[k] <= hi + 1e-12);
        }

        assert!(bank.update_class_with_factor(Domain::Target, class, &anchors, t).unwrap());
        moved += 1;
        let new = bank.get_positive(class).unwrap();
        let d_new: Vec<f64> = new.iter().zip(&agg).map(|(a, b)| a - b).collect();
        let d_old: Vec<f64> = old.iter().zip(&agg).map(|(a, b)| a - b).collect();
        assert!((norm(&d_new) - t * norm(&d_old)).abs() < 1e-12, "step {step}");
    }
    assert_eq!(moved, updates);
}
