//! Hyperspectral scenes: the HSC container, per-band normalization, patch
//! extraction, stratified splitting and synthetic scene generation.

mod cube;
mod patch;
mod split;
mod synth;

pub use cube::{load_cube, read_cube, save_cube, write_cube, HsiCube};
pub use patch::{extract_patches, normalize_per_band, patches_to_batch, reflect_index, PatchDataset};
pub use split::{stratified_split, Split, SplitConfig};
pub use synth::{synthesize_dataset, Layout, SynthClass, SynthSpec};
