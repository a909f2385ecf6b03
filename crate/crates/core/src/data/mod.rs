//! Ingestion, preprocessing and synthetic phantoms.

pub mod io;
pub mod manifest;
pub mod phantom;
mod preprocess;
mod volume;

pub use io::{load_image, load_volume, save_image, save_volume, VolumeFormat, VolumeLayout};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use phantom::{make_phantom, make_phantom_volume, Phantom, PhantomSpec, PhantomVolume, Speckle};
pub use preprocess::{
    average_repeats, crop_padding, normalize, normalize_stack, normalize_with_range, pad_to_square,
    Padding, PAD_VALUE,
};
pub use volume::Volume;
