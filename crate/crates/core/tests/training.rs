mod common;

use common::*;
use dacca::checkpoint::Checkpoint;
use dacca::labels::{ClassMap, UNLABELED};
use dacca::selftrain::{self, frozen_loss, image_terms, TrainerConfig, TrainerState};
use dacca::tensor::{Tape, Tensor};
use dacca::Domain;

fn batches(seed: u64) -> (Vec<(Tensor, ClassMap)>, Vec<Tensor>) {
    let s = small_scenes(seed, 2, Domain::Source);
    let t = small_scenes(seed + 100, 2, Domain::Target);
    (
        s.into_iter().map(|x| (x.image, x.label)).collect(),
        t.into_iter().map(|x| x.image).collect(),
    )
}

fn refs(source: &[(Tensor, ClassMap)]) -> Vec<(&Tensor, &ClassMap)> {
    source.iter().map(|(i, l)| (i, l)).collect()
}

/// Summed `-log softmax` at labeled pixels, by hand.
fn ce_oracle(logits: &Tensor, labels: &ClassMap) -> f64 {
    let (c, hw) = logits.chw_split();
    let v = logits.values();
    let mut total = 0.0;
    for p in 0..hw {
        let l = labels.get(p);
        if l == UNLABELED {
            continue;
        }
        let max = (0..c).map(|k| v[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..c).map(|k| (v[k * hw + p] - max).exp()).sum::<f64>().ln();
        total += lse - v[(l as usize - 1) * hw + p];
    }
    total
}

/// Plain mean-teacher loss built from scratch: teacher argmax, filter,
/// per-image CE, batch means.
fn plain_self_training_loss(state: &TrainerState, source: &[(Tensor, ClassMap)], target: &[Tensor]) -> f64 {
    let opts = state.config.dfa;
    let stride = state.student.config.stride();
    let mut ls = 0.0;
    for (img, lab) in source {
        let logits = state.student.forward(img, None, false, opts).unwrap().logits;
        ls += ce_oracle(&logits, &lab.downsample(stride));
    }
    let mut lt = 0.0;
    for img in target {
        let t_logits = state.teacher.forward(img, None, false, opts).unwrap().logits;
        let probs = softmax_pixels(&t_logits);
        let (c, hw) = probs.chw_split();
        let h = probs.shape()[1];
        let w = probs.shape()[2];
        let mut classes = Vec::with_capacity(hw);
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if probs.values()[k * hw + p] > probs.values()[best * hw + p] {
                    best = k;
                }
            }
            let conf = probs.values()[best * hw + p];
            classes.push(if conf >= state.config.alpha_c { best as u8 + 1 } else { UNLABELED });
        }
        let labels = ClassMap::new(h, w, c - 1, classes).unwrap();
        let s_logits = state.student.forward(img, None, false, opts).unwrap().logits;
        lt += ce_oracle(&s_logits, &labels);
    }
    ls / source.len() as f64 + lt / target.len() as f64
}

#[test]
fn lambda_zero_without_dfa_is_plain_self_training() {
    let (source, target) = batches(3);
    let tgt: Vec<&Tensor> = target.iter().collect();
    let cfg = TrainerConfig {
        lambda_c: 0.0,
        use_dfa: false,
        total_iters: 20,
        base_lr: 1e-2,
        batch_size: 2,
        ..TrainerConfig::default()
    };
    let mut state = TrainerState::new(small_model(3), cfg).unwrap();
    for step in 0..6 {
        let want = plain_self_training_loss(&state, &source, &target);
        let got = state.train_step(&refs(&source), &tgt).unwrap();
        assert!((got.total - want).abs() < 1e-10, "step {step}: {} vs {want}", got.total);
        assert!(!got.ccl_active && !got.dfa_active);
    }
}

#[test]
fn total_loss_is_the_sum_of_its_terms() {
    let (source, target) = batches(5);
    let tgt: Vec<&Tensor> = target.iter().collect();
    let src = refs(&source);
    let mut state = quick_trainer(small_model(5), 5);
    for _ in 0..3 {
        state.train_step(&src, &tgt).unwrap();
    }
    let plan = state.plan_step(&src, &tgt).unwrap();
    assert!(plan.ccl_active && plan.dfa_active);
    let cfg = state.config.clone();

    let mut after = state.clone();
    let report = after.train_step(&src, &tgt).unwrap();
    assert!(report.ccl_active && report.dfa_active);
    assert!(report.sccl > 0.0 && report.tccl > 0.0);

    // the step read the banks after their update, with the pre-step weights
    let (value, _) = frozen_loss(&state.student, &src, &tgt, &plan, &after.banks, &cfg).unwrap();
    assert!((value - report.total).abs() < 1e-10);

    let mut want = 0.0;
    let (mut ce_s, mut sccl) = (0.0, 0.0);
    for ((img, _), p) in source.iter().zip(&plan.source) {
        let (ce, ccl) = image_terms(&state.student, img, p, &after.banks, &cfg).unwrap();
        ce_s += ce;
        sccl += ccl;
        want += (ce + cfg.lambda_c * ccl) / source.len() as f64;
    }
    let (mut ce_t, mut tccl) = (0.0, 0.0);
    for (img, p) in target.iter().zip(&plan.target) {
        let (ce, ccl) = image_terms(&state.student, img, p, &after.banks, &cfg).unwrap();
        ce_t += ce;
        tccl += ccl;
        want += (ce + cfg.lambda_c * ccl) / target.len() as f64;
    }
    assert!((value - want).abs() < 1e-10);
    assert!((report.l_s - ce_s / 2.0).abs() < 1e-10);
    assert!((report.l_t - ce_t / 2.0).abs() < 1e-10);
    assert!((report.sccl - sccl / 2.0).abs() < 1e-10);
    assert!((report.tccl - tccl / 2.0).abs() < 1e-10);
}

#[test]
fn filtered_pixels_carry_no_ce_gradient() {
    let mut r = rng(9);
    for _ in 0..20 {
        let logits = random_tensor(&mut r, &[3, 4, 4], false);
        let labels = random_labels(&mut r, 4, 4, 2, 0.5);
        let mut tape = Tape::new();
        let v = tape.leaf(&logits.clone().with_requires_grad(true));
        let loss = tape.cross_entropy(v, labels.one_hot()).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(v).unwrap();
        for p in 0..16 {
            for c in 0..3 {
                let gv = g[c * 16 + p];
                if labels.get(p) == UNLABELED {
                    assert_eq!(gv, 0.0);
                } else {
                    let probs = softmax_pixels(&logits);
                    let onehot = if labels.get(p) as usize == c + 1 { 1.0 } else { 0.0 };
                    assert!((gv - (probs.values()[c * 16 + p] - onehot)).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn one_optimizer_step_lowers_the_batch_loss() {
    let mut down = 0;
    for seed in 0..100 {
        let (source, _) = batches(seed);
        let src = refs(&source);
        let cfg = TrainerConfig {
            total_iters: 10,
            base_lr: 1e-3,
            ..TrainerConfig::default()
        };
        let mut state = TrainerState::new(small_model(seed), cfg).unwrap();
        let before = state.pretrain_step(&src).unwrap().total;
        let after = state.pretrain_step(&src).unwrap().total;
        if after < before {
            down += 1;
        }
    }
    assert!(down >= 95, "loss went down in {down}/100 seeds");
}

#[test]
fn twenty_steps_are_reproducible() {
    let run = || {
        let mut state = quick_trainer(small_model(11), 11);
        let mut reports = Vec::new();
        for m in 0..20u64 {
            let (source, target) = batches(m % 4);
            let tgt: Vec<&Tensor> = target.iter().collect();
            reports.push(state.train_step(&refs(&source), &tgt).unwrap());
        }
        (reports, Checkpoint::from_state(&state, true).to_bytes())
    };
    let (r1, c1) = run();
    let (r2, c2) = run();
    assert_eq!(r1, r2);
    assert_eq!(c1, c2);
    assert!(r1.iter().any(|r| r.ccl_active) && r1.iter().any(|r| r.dfa_active));
}

#[test]
fn optimizer_never_writes_the_teacher() {
    let (source, target) = batches(13);
    let tgt: Vec<&Tensor> = target.iter().collect();
    let mut state = quick_trainer(small_model(13), 13);
    for _ in 0..5 {
        let before = state.teacher.clone();
        state.train_step(&refs(&source), &tgt).unwrap();
        let mut want = before;
        selftrain::ema_update(&mut want, &state.student, state.config.beta).unwrap();
        assert_eq!(state.teacher, want);
    }
}

#[test]
fn pretraining_leaves_teacher_and_banks_alone() {
    let (source, _) = batches(17);
    let mut state = quick_trainer(small_model(17), 17);
    let teacher = state.teacher.clone();
    for _ in 0..3 {
        state.pretrain_step(&refs(&source)).unwrap();
    }
    assert_eq!(state.teacher, teacher);
    assert!(!state.banks.source.is_initialized(1));
}

#[test]
fn small_gradcheck() {
    let g = gradcheck(1);
    assert!(g.ccl_active && g.dfa_active && g.anchors > 0);
    assert!(g.max_rel < 1e-4, "max relative error {}", g.max_rel);
    assert!(g.max_abs_tiny < 1e-9, "tiny-gradient gap {}", g.max_abs_tiny);
}
