//! Generates a few toy talking-head clips, round-trips one through disk and
//! writes a contact sheet.
//!
//! cargo run --release --example synthetic_clips -- out/clips

use segcd::data::{generate_dataset, load_clip, save_clip, ClipParams};
use segcd::experiment::contact_sheet;

fn main() -> segcd::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example_out/clips".into());
    let out = std::path::Path::new(&out);
    let clips = generate_dataset(0, 6, &ClipParams::default())?;
    for c in &clips {
        let (x, y) = c.body_track[0];
        println!("seed {:>3}  face box {:?}  body starts at ({x:.1}, {y:.1})", c.seed, c.face_box);
    }
    save_clip(&clips[0], &out.join("clip_0000"))?;
    let back = load_clip(&out.join("clip_0000"))?;
    println!("disk round trip exact: {}", back == clips[0]);
    let rows: Vec<_> = clips.iter().map(|c| &c.pixels).collect();
    let path = out.join("clips.png");
    contact_sheet(&rows)?.save(&path)?;
    println!("contact sheet {}", path.display());
    Ok(())
}
