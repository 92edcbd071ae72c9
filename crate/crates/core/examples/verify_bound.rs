//! Trains exact and approximate-backward twins of a small model in lockstep
//! and compares their divergence with the theoretical bound.

use mobiletl::layers::ActBackwardMode;
use mobiletl::model::bundled_spec;
use mobiletl::policy::TrainPolicy;
use mobiletl::theory::{proposition_check, twin_divergence, TwinOptions};
use mobiletl::trainer::{synthetic, SyntheticSpec};

fn main() -> mobiletl::Result<()> {
    let spec = bundled_spec("toy_2block")?;
    let data = synthetic(&SyntheticSpec::new(64, 2, 9).with_shape([3, 8, 8]))?;
    let exact = TrainPolicy::mobiletl(2).with_act_backward(ActBackwardMode::Exact);
    let approx = TrainPolicy::mobiletl(2).with_act_backward(ActBackwardMode::ApproxSigned);
    let r = twin_divergence(&spec, (&exact, &approx), &data, TwinOptions::new(50, 9))?;
    for t in [0, 9, 24, 49] {
        println!("step {:>2}: weight distance {:.3e}", t + 1, r.per_step_distance[t]);
    }
    println!(
        "output distance {:.3e} <= bound {:.3e}: {}  (G {:.3}, M {:.3}, N {}, L {})",
        r.final_output_distance, r.bound, r.pass, r.measured_g, r.estimated_m, r.n, r.l
    );
    let p = proposition_check(4, 4, 4, 0.5, 9, 1000)?;
    println!(
        "gated products over {} trials: max ratio {:.3} exact, {:.3} approx",
        p.trials, p.exact_max_ratio, p.approx_max_ratio
    );
    Ok(())
}
