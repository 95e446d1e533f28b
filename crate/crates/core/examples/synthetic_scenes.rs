//! Generates a few source and target scenes, writes them as a dataset
//! directory and prints what the two domains look like.
//!
//! cargo run --release --example synthetic_scenes -- [OUT_DIR]

use dacca::config::RunConfig;
use dacca::data::{self, Manifest};
use dacca::Domain;

fn mean_over(values: &[f64], hw: usize, mask: impl Fn(usize) -> bool) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for p in 0..hw {
        if mask(p) {
            sum += (0..3).map(|ch| values[ch * hw + p]).sum::<f64>() / 3.0;
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

fn main() -> dacca::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dacca_scenes"));
    let cfg = RunConfig::default();
    let sc = cfg.scene_config();

    for domain in [Domain::Source, Domain::Target] {
        let scenes = data::generate_dataset(7, 8, &sc, &cfg.style(domain));
        let s = &scenes[0];
        let hw = s.height() * s.width();
        let lane = mean_over(s.image.values(), hw, |p| s.label.is_lane(p));
        let road = mean_over(s.image.values(), hw, |p| !s.label.is_lane(p));
        println!("{domain}: {}x{} image, lane pixels {:.3}, road {:.3}", s.width(), s.height(), lane, road);
        for (c, pts) in s.lanes.iter().enumerate() {
            let (x0, x1) = (pts.first().unwrap().0, pts.last().unwrap().0);
            println!("  lane {}: {} points, x {:.2} at the bottom to {:.2} at the top", c + 1, pts.len(), x0, x1);
        }

        let dir = out.join(domain.as_str());
        let hidden = domain == Domain::Target;
        let manifest = Manifest {
            count: scenes.len(),
            num_lanes: cfg.num_lanes,
            height: cfg.image_height,
            width: cfg.image_width,
            domain,
            labels_hidden: hidden,
            seed: 7,
            config_hash: dacca::cli::config_hash(&cfg),
        };
        std::fs::create_dir_all(&dir)?;
        data::write_dataset(&dir, &manifest, &scenes)?;
        let back = data::read_dataset(&dir)?;
        println!("  wrote {} scenes to {} (labels hidden: {hidden})", back.scenes.len(), dir.display());
    }
    Ok(())
}
