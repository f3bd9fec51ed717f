//! Generates a small synthetic click dataset and writes it to disk.
//!
//!     cargo run --release --example generate_data -- /tmp/synth

use std::path::PathBuf;

use deepctr::data::synth::{generate, SynthSpec};

fn main() -> deepctr::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("deepctr-synth"));
    let spec = SynthSpec {
        n_images: 40,
        n_impressions: 4000,
        ..SynthSpec::default()
    };
    let data = generate(&spec, 7)?;
    data.write(&out)?;

    let clicks = data.impressions.iter().filter(|i| i.label == 1).count();
    let mean_truth = data.truth.iter().sum::<f64>() / data.truth.len() as f64;
    println!(
        "{} impressions over {} images in {}",
        data.impressions.len(),
        data.images.len(),
        out.display()
    );
    println!(
        "click rate {:.3} (mean true probability {:.3})",
        clicks as f64 / data.impressions.len() as f64,
        mean_truth
    );
    let p = &data.patches[0];
    println!(
        "{}: category {} patch {}x{} at ({}, {}) brightness {:.2}",
        p.image_id, p.category, p.size, p.size, p.top, p.left, p.brightness
    );
    Ok(())
}
