//! Writes the reference identity-behaving weight archive used by the test suites.
//!
//! cargo run -p stainkit --example reference_weights -- crates/core/tests/data/reference_weights.saas

use std::path::PathBuf;

use stainkit::nn::{identity_generator, save_weights, NetworkArch, NormKind, Parts};

fn main() -> stainkit::Result<()> {
    let path: PathBuf = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| "reference_weights.saas".into());
    let arch = NetworkArch {
        depth: 2,
        base_channels: 36,
        attention_min_res: 32,
        attention_pool: 2,
        norm: NormKind::Batch,
    };
    let w = identity_generator(arch, Parts::GENERATOR, 2024)?;
    save_weights(&w, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
