//! View files on disk: CSV and the little-endian binary format, plus
//! splitting images into left/right halves and joining them back.
//!
//!     cargo run --release --example data_formats

use dscca::data::{
    join_halves, load_views, make_splits, read_binary, read_csv, split_halves, synth_correlated, write_binary,
    write_csv, DataFormat, Nonlinearity, SplitSpec,
};
use dscca::Matrix;

fn main() -> dscca::Result<()> {
    let dir = std::env::temp_dir().join("dscca_data_formats");
    std::fs::create_dir_all(&dir)?;

    let ds = synth_correlated(500, 2, (5, 3), &[0.8, 0.4], Nonlinearity::None, 1)?;
    write_csv(&dir.join("view1.csv"), &ds.view1)?;
    write_csv(&dir.join("view2.csv"), &ds.view2)?;
    write_binary(&dir.join("view1.bin"), &ds.view1)?;
    assert_eq!(read_csv(&dir.join("view1.csv"))?, ds.view1);
    assert_eq!(read_binary(&dir.join("view1.bin"))?, ds.view1);

    let loaded = load_views(&dir.join("view1.csv"), &dir.join("view2.csv"), DataFormat::Csv)?;
    let loaded = make_splits(loaded, SplitSpec::Fractions(0.8, 0.1, 0.1), 0)?;
    println!(
        "{} pairs: {} train / {} val / {} test",
        loaded.len(),
        loaded.splits.train.len(),
        loaded.splits.val.len(),
        loaded.splits.test.len()
    );

    // two 4x6 "images", one per column
    let images = Matrix::from_fn(24, 2, |i, j| (i + 100 * j) as f64);
    let halves = split_halves(&images, 4, 6)?;
    println!("halves: {} + {} pixels", halves.view1.rows(), halves.view2.rows());
    assert_eq!(join_halves(&halves.view1, &halves.view2, 4, 6)?, images);
    println!("wrote {}", dir.display());
    Ok(())
}
