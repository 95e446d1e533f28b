//! Central differences of the full adaptation loss (cross-entropy on both
//! domains plus the contrastive terms, through the fused forward) against
//! the tape gradients, on a tiny model.

use dacca::contrast::ContrastConfig;
use dacca::labels::ClassMap;
use dacca::model::{ModelConfig, SegModel};
use dacca::selftrain::{frozen_loss, TrainerConfig, TrainerState};
use dacca::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dacca::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = SegModel::new(ModelConfig {
        num_lanes: 2,
        feature_dim: 4,
        image_height: 8,
        image_width: 8,
        encoder_channels: vec![4, 4],
        seed: 1,
        share_dfa_head: true,
    })?;
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
        ..TrainerConfig::default()
    };
    let image = |r: &mut ChaCha8Rng| Tensor::from_fn(&[3, 8, 8], |_| r.random_range(0.0..1.0));
    let source: Vec<(Tensor, ClassMap)> = (0..2)
        .map(|_| {
            let img = image(&mut rng);
            let classes = (0..64).map(|_| rng.random_range(1..=3u8)).collect();
            (img, ClassMap::new(8, 8, 2, classes).unwrap())
        })
        .collect();
    let target: Vec<Tensor> = (0..2).map(|_| image(&mut rng)).collect();
    let src: Vec<(&Tensor, &ClassMap)> = source.iter().map(|(i, l)| (i, l)).collect();
    let tgt: Vec<&Tensor> = target.iter().collect();

    let mut state = TrainerState::new(model, cfg)?;
    while !(state.dfa_active() && state.iter > state.config.warmup_iters) {
        state.train_step(&src, &tgt)?;
    }
    let plan = state.plan_step(&src, &tgt)?;
    let (loss, grads) = frozen_loss(&state.student, &src, &tgt, &plan, &state.banks, &state.config)?;
    println!("loss {loss:.6} with contrast {} and DFA {}", plan.ccl_active, plan.dfa_active);

    let h = 1e-5;
    let mut model = state.student.clone();
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for pi in 0..grads.len() {
        for k in 0..grads[pi].len() {
            let orig = model.params()[pi].values()[k];
            model.params_mut()[pi].values_mut()[k] = orig + h;
            let up = frozen_loss(&model, &src, &tgt, &plan, &state.banks, &state.config)?.0;
            model.params_mut()[pi].values_mut()[k] = orig - h;
            let down = frozen_loss(&model, &src, &tgt, &plan, &state.banks, &state.config)?.0;
            model.params_mut()[pi].values_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = numeric.abs().max(grads[pi][k].abs());
            if scale > 1e-7 {
                worst = worst.max((numeric - grads[pi][k]).abs() / scale);
            }
            n += 1;
        }
    }
    println!("{n} parameters checked, max relative error {worst:.2e}");
    Ok(())
}
