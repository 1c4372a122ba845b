//! Saves a freshly initialised policy, prints its header and reloads it.

use fbsde_walk::net::{CheckpointHeader, NetConfig, NetParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| std::env::temp_dir().join("roundtrip.fbsd").display().to_string());
    let params = NetParams::init(42, NetConfig::default())?;
    params.save(path.as_ref())?;
    println!("{}", CheckpointHeader::read(path.as_ref())?);
    let back = NetParams::load(path.as_ref())?;
    println!("bit-identical after reload: {}", back.to_bytes() == params.to_bytes());
    let wrong = NetConfig {
        hidden: 8,
        ..NetConfig::default()
    };
    if let Err(e) = NetParams::load_expecting(path.as_ref(), wrong) {
        println!("loading into a hidden-8 network: {e}");
    }
    Ok(())
}
