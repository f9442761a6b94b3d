//! File formats.

mod dataset;
mod image;
mod model;
mod segments;
mod vcc;

pub use dataset::{load_dataset, load_images, save_dataset, save_images, LabelEntry, LabeledImage, PartRecord, LABELS_FILE};
pub use image::{decode_image, encode_png, encode_ppm, ImageFile};
pub use model::{load_architecture, load_model, model_from_parts, save_model, weight_blob, ModelManifest, ParamSpan, MANIFEST_FILE, MANIFEST_FORMAT, WEIGHTS_FILE};
pub use segments::{load_segments, save_segments, Lineage, LineageEntry, RleMask, LINEAGE_FILE};
pub use vcc::{export_dot, read_vcc_json, vcc_from_json, vcc_to_json, write_vcc_json};
