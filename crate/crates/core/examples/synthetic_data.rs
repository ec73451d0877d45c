//! Generate a synthetic sketch/photo dataset, write it in directory format
//! and load it back.
//!
//! ```text
//! cargo run --release --example synthetic_data -- /tmp/sketchkd-data
//! ```

use std::path::PathBuf;

use sketchkd::data::{generate_synthetic, load_directory, structural_augment, write_directory, write_png, SyntheticSpec};
use sketchkd::trainer::rng_stream;

fn main() -> sketchkd::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sketchkd-data"));

    let spec = SyntheticSpec::new(24, 4, 2, 7);
    let mut ds = generate_synthetic(&spec)?;
    // the last 8 instances keep only their photo
    for inst in ds.instances.iter_mut().skip(16) {
        inst.sketches.clear();
    }
    write_directory(&ds, &out)?;

    let (back, report) = load_directory(&out, spec.image_size)?;
    println!("wrote and reloaded {}", out.display());
    print!("{report}");
    assert_eq!(back.len(), ds.len());

    // one structural augmentation for a look
    let mut rng = rng_stream(0, "example.augment");
    let aug = structural_augment(&ds.instances[0].photo, &mut rng);
    let path = out.join("augmented_i0000.png");
    write_png(&aug, &path)?;
    println!("augmented photo at {}", path.display());
    Ok(())
}
