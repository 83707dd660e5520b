//! Volume persistence, dataset manifests, phantoms and slice export.

mod manifest;
mod pgm;
mod phantom;
mod volume_file;

pub use manifest::{read_manifest, write_manifest, DatasetManifest, ManifestEntry, ResolvedEntry, Split};
pub use pgm::{export_slice_pgm, slice_pgm};
pub use phantom::{generate_phantom, PhantomSpec};
pub use volume_file::{
    check_volume, read_header, read_image, read_mask, read_volume, volume_paths, write_mask, write_volume, Dtype,
    VolumeHeader, VolumeKind, MAGIC,
};
