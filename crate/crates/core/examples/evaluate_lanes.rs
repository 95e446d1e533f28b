//! Point accuracy, lane FP/FN and F1 on generated scenes: the ground truth
//! against itself, then against shifted and partial predictions.

use dacca::config::RunConfig;
use dacca::data::{self, LanePoints};
use dacca::metrics::{self, extract_lanes};
use dacca::Domain;

fn main() -> dacca::Result<()> {
    let cfg = RunConfig::default();
    let mcfg = cfg.metrics_config();
    let scenes = data::generate_dataset(11, 32, &cfg.scene_config(), &cfg.style(Domain::Target));
    println!("point tolerance at {} px width: {:.2} px (x 1/cos of the lane angle)", cfg.image_width, mcfg.base);

    let run = |name: &str, edit: &dyn Fn(Vec<LanePoints>) -> Vec<LanePoints>| -> dacca::Result<()> {
        let evals = scenes
            .iter()
            .map(|s| {
                let pred = edit(extract_lanes(&s.label, 1));
                metrics::evaluate_image(&pred, &s.lanes, s.height(), s.width(), &mcfg)
            })
            .collect::<dacca::Result<Vec<_>>>()?;
        let sum = metrics::summarize(&evals);
        println!(
            "{name:<24} accuracy {:.3} FP {:.3} FN {:.3} P {:.3} R {:.3} F1 {:.3}",
            sum.accuracy, sum.fp_rate, sum.fn_rate, sum.f1.precision, sum.f1.recall, sum.f1.f1
        );
        Ok(())
    };

    let shift = |dx: f64| move |lanes: Vec<LanePoints>| -> Vec<LanePoints> {
        lanes.into_iter().map(|l| l.into_iter().map(|(x, y)| (x + dx, y)).collect()).collect()
    };
    run("ground truth mask", &|l| l)?;
    run("shifted by 1 px", &shift(1.0))?;
    run("shifted by 3 px", &shift(3.0))?;
    run("second lane missing", &|mut l| {
        l[1].clear();
        l
    })?;
    run("top half only", &|l| l.into_iter().map(|lane| lane[lane.len() / 2..].to_vec()).collect())?;
    Ok(())
}
