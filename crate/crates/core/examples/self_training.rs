//! Source-only pretraining followed by adaptation with the mean teacher,
//! cross-domain contrast and domain-level aggregation, on a reduced config.
//!
//! cargo run --release --example self_training

use dacca::checkpoint::Checkpoint;
use dacca::cli;
use dacca::config::RunConfig;

fn main() -> dacca::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.source_count = 64;
    cfg.target_count = 64;
    cfg.eval_count = 32;
    cfg.pretrain_iters = 200;
    cfg.adapt_iters = 120;
    cfg.warmup_iters = 30;
    let (source, target, eval) = cli::synthetic_splits(&cfg);
    let mcfg = cfg.metrics_config();

    let mut state = cli::pretrain_state(&cfg)?;
    let mut log = |s: &dacca::selftrain::TrainerState, r: &dacca::selftrain::StepReport| {
        if s.iter % 40 == 0 {
            println!(
                "iter {:3} lr {:.2e} L_S {:8.3} L_T {:7.3} SCCL {:.3} TCCL {:.3}",
                r.iter, r.lr, r.l_s, r.l_t, r.sccl, r.tccl
            );
        }
        Ok(())
    };
    println!("pretraining on {} source scenes", source.len());
    cli::run_pretrain(&cfg, &mut state, &source, Some(&mut log))?;
    let so = Checkpoint::from_model(state.student.clone());
    println!("source-only target F1 {:.3}", cli::dataset_f1(&so, &eval, &mcfg)?);

    println!("adapting with {} unlabeled target scenes", target.len());
    let mut adapt = cli::adapt_state(&cfg, state.student)?;
    cli::run_adapt(&cfg, &mut adapt, &source, &target, Some(&mut log))?;
    let full = Checkpoint::from_state(&adapt, true);
    println!("adapted target F1 {:.3} (contrast and DFA on: {})", cli::dataset_f1(&full, &eval, &mcfg)?, adapt.dfa_active());
    Ok(())
}
