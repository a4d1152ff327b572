//! Dataset generation, storage, and splitting.

mod csv_io;
mod split;
mod synth;

pub use csv_io::{load, read_csv, save, write_csv, HEADER};
pub use split::{split, SplitSpec, SplitUnit};
pub use synth::{generate, GenConfig};
