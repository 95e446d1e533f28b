//! Domain-level feature aggregation on one image: category map, unreliable
//! background pixels, the two domain maps and the fused features.

use dacca::config::RunConfig;
use dacca::data;
use dacca::dfa::{self, DfaOptions};
use dacca::model::SegModel;
use dacca::psmm::BankPair;
use dacca::Domain;

fn main() -> dacca::Result<()> {
    let cfg = RunConfig::default();
    let model = SegModel::new(cfg.model_config())?;
    let scene = &data::generate_dataset(1, 1, &cfg.scene_config(), &cfg.style(Domain::Target))[0];
    let out = model.forward(&scene.image, None, false, DfaOptions::default())?;

    let (p, conf) = dfa::predict_categories(&out.e, model.category_head())?;
    let opts = DfaOptions::default();
    let ubp = dfa::find_ubp(&p, &conf, opts.epsilon);
    let lanes = (0..p.len()).filter(|&i| p.is_lane(i)).count();
    println!("{} feature pixels: {lanes} predicted lane, {} unreliable background", p.len(), ubp.positions.len());

    // fill both banks with the mean feature of a few pixels per class
    let mut banks = BankPair::new(cfg.num_lanes, cfg.feature_dim, cfg.bank_t0, cfg.bank_power);
    for domain in [Domain::Source, Domain::Target] {
        for c in 1..=cfg.num_lanes {
            let anchors: Vec<Vec<f64>> = (0..4).map(|k| out.e.pixel(k * 17 + c)).collect();
            banks.get_mut(domain).initialize_class(domain, c, &anchors)?;
        }
    }
    let maps = dfa::domain_maps(&out.e, model.category_head(), &banks, opts)?;
    let nonzero = |t: &dacca::tensor::Tensor| (0..p.len()).filter(|&i| t.pixel(i).iter().any(|v| *v != 0.0)).count();
    println!("non-zero pixels: Z_s {} Z_t {}", nonzero(&maps.source), nonzero(&maps.target));

    let fused = dfa::dfa_fuse(&out.e, &maps, &model.dfa)?;
    let diff = fused
        .values()
        .iter()
        .zip(out.e.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    // a fresh model starts with the fusion acting as the identity on E
    println!("max |F_aug - E| at initialization: {diff:e}");

    let no_ubp = dfa::domain_maps(&out.e, model.category_head(), &banks, DfaOptions { ubp: false, ..opts })?;
    println!("without UBP refinement Z_t has {} non-zero pixels", nonzero(&no_ubp.target));
    Ok(())
}
