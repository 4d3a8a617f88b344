//! Prints the default run configuration, then applies a few overrides.
//!
//! cargo run --example config_overrides -- distill.segments=4 lambda1=0

use segcd::config::RunConfig;

fn main() -> segcd::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::default().with_overrides(&overrides)?;
    cfg.validate()?;
    println!("{}", cfg.to_json_pretty());
    eprintln!("teacher digest {}", cfg.teacher_digest());
    eprintln!("distill digest {}", cfg.distill_digest());
    Ok(())
}
