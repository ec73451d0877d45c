//! Pre-train the photo-only teacher on the desk split and inspect the
//! neighbour sets the student distils from.
//!
//! ```text
//! cargo run --release --example teacher -- [epochs]
//! ```

use sketchkd::config::desk_profile;
use sketchkd::trainer::{pretrain_teacher, Split};

fn main() -> sketchkd::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let hp = desk_profile();
    let split = Split::desk(hp.seed)?;
    let pool = split.photo_pool();
    println!("teacher pool: {} photos ({} unlabelled)", pool.len(), split.unlabelled.len());

    let teacher = pretrain_teacher(&pool, &hp, epochs)?;
    println!(
        "{} steps, probe loss {:.4} -> {:.4}",
        teacher.step, teacher.probe_initial, teacher.probe_final
    );

    for id in teacher.bank.ids().iter().take(4) {
        let ns = &teacher.neighbours[id];
        let pairs: Vec<String> = ns
            .neighbour_ids
            .iter()
            .zip(&ns.teacher_dists)
            .map(|(n, d)| format!("{n} ({d:.3})"))
            .collect();
        println!("{id}: {}", pairs.join(", "));
    }

    let dir = std::env::temp_dir().join("sketchkd-teacher");
    std::fs::create_dir_all(&dir).map_err(|e| sketchkd::Error::Io { path: dir.clone(), source: e })?;
    teacher.checkpoint(&hp).save(&dir.join("teacher.ckpt"))?;
    teacher.bank.save(&dir.join("bank.bin"))?;
    println!("saved to {}", dir.display());
    Ok(())
}
