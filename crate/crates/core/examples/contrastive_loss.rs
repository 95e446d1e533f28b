//! InfoNCE on hand-made cases, then the per-image cross-domain contrastive
//! loss on a random representation map.

use dacca::contrast::{self, info_nce, ContrastConfig};
use dacca::labels::ClassMap;
use dacca::psmm::MemoryBank;
use dacca::tensor::Tensor;
use dacca::Domain;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dacca::Result<()> {
    let tau = 0.07;
    let anchor = vec![vec![1.0, 0.0]];
    let tie = info_nce(&anchor, &[0.0, 1.0], &[vec![vec![0.0, -1.0]]], tau)?;
    let aligned = info_nce(&anchor, &[5.0, 0.0], &[vec![vec![0.0, 1.0]]], tau)?;
    let wrong = info_nce(&anchor, &[0.0, 1.0], &[vec![vec![1.0, 0.0]]], tau)?;
    println!("positive as close as the negative: {tie:.6} (ln 2 = {:.6})", 2f64.ln());
    println!("aligned positive, orthogonal negative: {aligned:.3e}");
    println!("negative aligned instead: {wrong:.3}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w, d) = (8, 8, 4);
    // left half lane 1, right half lane 2, bottom rows background
    let classes = (0..h * w)
        .map(|p| if p / w >= 6 { 3 } else if p % w < 4 { 1 } else { 2 })
        .collect();
    let labels = ClassMap::new(h, w, 2, classes)?;
    let v = Tensor::from_fn(&[d, h, w], |_| rng.random_range(-1.0..1.0));
    let probs = Tensor::from_fn(&[3, h, w], |_| 1.0 / 3.0);
    let cfg = ContrastConfig {
        anchors_per_class: 6,
        negatives_per_anchor: 4,
        mu_c: 0.2,
        ..ContrastConfig::default()
    };
    let sets = contrast::build_sample_sets(Domain::Source, &v, &labels, &probs, &cfg, &mut rng);
    println!("{} anchors, {} negatives each", sets.anchor_count(), sets.negatives_per_anchor);

    let bank = |domain| -> dacca::Result<MemoryBank> {
        let mut b = MemoryBank::new(domain, 2, d);
        for c in 1..=2 {
            b.initialize_class(domain, c, &sets.anchor_features(&v, c))?;
        }
        Ok(b)
    };
    let (own, other) = (bank(Domain::Source)?, bank(Domain::Target)?);
    let l = contrast::ccl(&v, &sets, &own, &other, tau)?;
    println!("intra {:.4} inter {:.4} total {:.4}", l.intra, l.inter, l.total);
    Ok(())
}
