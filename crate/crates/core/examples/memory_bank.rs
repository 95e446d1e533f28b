//! A domain memory bank: initialization from anchors, then EMA updates that
//! pull each row toward a similarity-weighted aggregate under a decaying
//! schedule.

use dacca::psmm::{aggregate_anchors, schedule_t, similarity_vector, MemoryBank};
use dacca::Domain;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn main() -> dacca::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (dim, total) = (4, 10);
    let mut bank = MemoryBank::new(Domain::Target, 2, dim);

    // anchors of class 1 scatter around a fixed centre
    let centre = [1.0, -0.5, 0.25, 2.0];
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| centre.iter().map(|c| c + rng.random_range(-0.3..0.3)).collect())
            .collect()
    };

    bank.initialize_class(Domain::Target, 1, &draw(16))?;
    println!("initialized row: {:.3?}", bank.get_positive(1)?);
    println!("class 2 warm: {}", bank.is_initialized(2));

    for m in 1..=total {
        let anchors = draw(8);
        let old = bank.get_positive(1)?;
        let sims = similarity_vector(&anchors, &old)?;
        let agg = aggregate_anchors(&anchors, &sims)?.unwrap_or(old.clone());
        bank.update_class(Domain::Target, 1, &anchors, m, total)?;
        let new = bank.get_positive(1)?;
        println!(
            "m={m:2} t={:.4} |old-agg|={:.4} |new-agg|={:.4} |new-centre|={:.4}",
            schedule_t(m - 1, total, 0.9, 0.9),
            dist(&old, &agg),
            dist(&new, &agg),
            dist(&new, &centre)
        );
    }

    // a source-domain update is refused by a target bank
    let wrong = bank.update_class(Domain::Source, 1, &draw(2), 1, total);
    println!("source anchors into the target bank: {:?}", wrong.err());
    Ok(())
}
