//! Scenes on disk, the synthetic scene generator and checkpoints.

mod checkpoint;
mod dataset;
mod scene;
mod synth;

pub use checkpoint::{
    decode_checkpoint, decode_checkpoint_as, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION,
};
pub use dataset::{dataset_scenes, load_dataset, scene_name, synth_dataset, write_dataset, Manifest, ManifestEntry, MANIFEST_FILE};
pub use scene::{
    format_ply, gt_boxes_from_instances, load_scene, parse_labels, parse_ply, read_boxes, save_scene, write_boxes, PlyCloud,
    SceneBundle, BOXES_FILE, LABELS_FILE, MIN_BOX_SIZE, POINTS_FILE,
};
pub use scene::write as write_text;
pub use synth::{default_classes, place_objects, scene_seed, synth_scene, synth_scene_with_cuboids, ClassPrior, Cuboid, SynthSpec};
