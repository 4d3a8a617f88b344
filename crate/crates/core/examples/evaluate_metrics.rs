//! Evaluation metrics on progressively degraded copies of the eval clips.

use segcd::data::{generate_dataset, ClipParams, ToyAutoencoder};
use segcd::metrics::{evaluate_clips, format_table, EvalSettings};

fn main() -> segcd::Result<()> {
    let truth = generate_dataset(1_000_000, 12, &ClipParams::default())?;
    let ae = ToyAutoencoder::default();
    let mut rows = Vec::new();
    for (label, blend) in [("identical", 0.0), ("10% gray", 0.1), ("30% gray", 0.3), ("60% gray", 0.6)] {
        let pred = truth
            .iter()
            .map(|c| c.with_pixels(c.pixels.map(|v| (1.0 - blend) * v + blend * 0.5)))
            .collect::<segcd::Result<Vec<_>>>()?;
        rows.push((label.to_string(), evaluate_clips(&pred, &truth, &ae, &EvalSettings::default(), "")?));
    }
    print!("{}", format_table(&rows));
    Ok(())
}
