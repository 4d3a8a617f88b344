//! Motion masks at several thresholds, projected to latent resolution and
//! exported as PNG frames.

use segcd::conditioning::{compute_motion_mask, export_mask_frames, motion_weighted_distance, project_mask_to_latent};
use segcd::data::{encode_latent, generate_clip_with, ClipParams, ToyAutoencoder};

fn main() -> segcd::Result<()> {
    let clip = generate_clip_with(3, &ClipParams::default())?;
    let ae = ToyAutoencoder::default();
    for delta in [0.05, 0.1, 0.2, 0.4] {
        let m = compute_motion_mask(&clip, delta)?;
        let total = m.mask.frames * m.mask.height * m.mask.width;
        println!("delta {delta:.2}: {:5} of {total} pixels moving", m.mask.count());
    }
    let mask = project_mask_to_latent(&compute_motion_mask(&clip, 0.2)?, ae.factor)?;
    let out = std::path::Path::new("target/example_out/mask");
    export_mask_frames(&mask, out, "mask")?;
    println!("latent mask frames in {}", out.display());

    let z = encode_latent(&clip, &ae)?;
    let shifted = z.map(|v| v + 0.1);
    for lambda1 in [0.0, 0.5, 1.0] {
        println!("lambda1 {lambda1}: distance {:.5}", motion_weighted_distance(&shifted, &z, &mask, lambda1)?);
    }
    Ok(())
}
