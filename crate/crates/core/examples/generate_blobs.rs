//! Generates a semantic-blob dataset, checks that semantic similarity tracks
//! feature-space proximity, and round-trips it through the on-disk format.
//!
//!     cargo run --example generate_blobs -- [OUT_DIR]

use margin_fsl::datasets::{
    generate_blobs_with_means, load_csv, min_mean_separation, save_csv, BlobSpec, ClassId,
    DataFiles, Split,
};
use margin_fsl::semantics::cosine_sim;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = BlobSpec::default();
    let blobs = generate_blobs_with_means(&spec, 7)?;
    let ds = &blobs.dataset;

    for split in [Split::Base, Split::Val, Split::Novel] {
        println!(
            "{:>5}: {} classes",
            split.as_str(),
            ds.classes_in(split).len()
        );
    }
    let all: Vec<ClassId> = (0..ds.n_classes()).map(ClassId).collect();
    println!(
        "min mean separation {:.2} ({:.1} x feature noise)",
        min_mean_separation(&blobs.means, &all),
        min_mean_separation(&blobs.means, &all) / spec.feature_noise
    );

    // The most and least similar class pairs by semantic cosine.
    let mut pairs = Vec::new();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            let s = cosine_sim(
                blobs.store.vector(all[i]).unwrap(),
                blobs.store.vector(all[j]).unwrap(),
            )?;
            let d: f64 = blobs.means[i]
                .iter()
                .zip(&blobs.means[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            pairs.push((s, d, i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    println!("\n  cos(e_i,e_j)  |mu_i - mu_j|");
    for (s, d, i, j) in pairs.iter().take(3).chain(pairs.iter().rev().take(3)) {
        println!(
            "  {s:>11.3}  {d:>12.3}   {} / {}",
            ds.class_name(ClassId(*i)),
            ds.class_name(ClassId(*j))
        );
    }

    let dir = match std::env::args().nth(1) {
        Some(d) => std::path::PathBuf::from(d),
        None => std::env::temp_dir().join("margin-fsl-blobs"),
    };
    std::fs::create_dir_all(&dir)?;
    let files = DataFiles::in_dir(&dir);
    save_csv(ds, &blobs.store, &files)?;
    let (back, store) = load_csv(&files)?;
    assert_eq!(&back, ds);
    assert_eq!(store, blobs.store);
    println!(
        "\nwrote and reloaded {} samples in {}",
        back.samples().len(),
        dir.display()
    );
    Ok(())
}
