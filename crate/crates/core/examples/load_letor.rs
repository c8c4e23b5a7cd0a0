//! Reads a LETOR/SVMlight file (plain or gzipped), prints its partition
//! sizes and label histogram, and optionally writes it back normalized.
//! Without arguments a small synthetic file is written and read back.
//!
//! cargo run --release --example load_letor -- [path] [normalized_out]

use cltr::data::{generate_synthetic, load_letor, save_letor, MAX_LABEL};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = match args.next() {
        Some(p) => std::path::PathBuf::from(p),
        None => {
            let p = std::env::temp_dir().join("cltr_example.letor");
            let ds = generate_synthetic(20, 8, 4, 0)?;
            let all: Vec<_> = ds.all_queries().cloned().collect();
            save_letor(&p, &all)?;
            p
        }
    };
    let ds = load_letor(&path)?;
    println!(
        "{}: {} train / {} validation / {} test queries, {} features, up to {} items per query",
        path.display(),
        ds.train.len(),
        ds.validation.len(),
        ds.test.len(),
        ds.feature_dim,
        ds.max_items_per_query()
    );
    let mut hist = vec![0usize; MAX_LABEL as usize + 1];
    for q in ds.all_queries() {
        for l in q.labels() {
            hist[l as usize] += 1;
        }
    }
    println!("label histogram: {hist:?}");
    if let Some(out) = args.next() {
        let norm = ds.min_max_normalized();
        let all: Vec<_> = norm.all_queries().cloned().collect();
        save_letor(&out, &all)?;
        println!("normalized copy written to {out}");
    }
    Ok(())
}
