//! Volume ingestion, slice extraction, augmentation and synthetic phantoms.

pub mod augment;
pub mod io;
pub mod slices;
pub mod synth;
pub mod volume;

pub use augment::{augment, AugmentParams, Transform};
pub use io::{load_dataset, read_manifest, read_volume, write_manifest, write_volume, ManifestEntry};
pub use slices::{extract_all, extract_slices, SliceExtraction, SliceSample};
pub use synth::{generate as synth_generate, SynthConfig};
pub use volume::{CystClass, Volume, NUM_CLASSES};
