//! Builds the denoiser, runs it on a clip and checks the consistency-function
//! boundary identity.

use segcd::conditioning::FaceFeatureConfig;
use segcd::data::{generate_clip_with, ClipParams, ToyAutoencoder};
use segcd::distill::prepare_example;
use segcd::model::{consistency_function, init_model, raw_forward, DenoiserConfig};
use segcd::schedule::{build_schedule, GuidanceScale, ScheduleKind};

fn main() -> segcd::Result<()> {
    let cfg = DenoiserConfig::default();
    let params = init_model(&cfg, 0)?;
    println!("{} parameters in {} arrays", params.num_parameters(), params.names().len());

    let ae = ToyAutoencoder::default();
    let clip = generate_clip_with(1, &ClipParams::default())?;
    let ex = prepare_example(&clip, &ae, &cfg, 0.2, Some(&FaceFeatureConfig::default()))?;
    let sched = build_schedule(ScheduleKind::LinearBeta, 1000)?;
    let cond = ex.cond.with_guidance(GuidanceScale::new(2.0)?);

    let (pred, features) = raw_forward(&params, &ex.latent, 300, &cond, &sched)?;
    println!("latent {:?} -> prediction {:?}, features {:?}", ex.latent.shape(), pred.shape(), features.shape());

    let mut at_boundary = cond.clone();
    at_boundary.boundary = 500;
    let same = consistency_function(&params, &ex.latent, 500, 500, &at_boundary, &sched)?;
    println!("f(x, s_o, s_o) == x bitwise: {}", same == ex.latent);
    let mapped = consistency_function(&params, &ex.latent, 900, 500, &at_boundary, &sched)?;
    println!("f(x, 900, 500) mean {:.4}", mapped.data().iter().sum::<f64>() / mapped.len() as f64);
    Ok(())
}
