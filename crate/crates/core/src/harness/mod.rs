//! Synthetic scenes, run configuration, sequence manifests and the drivers
//! behind the command-line tool.

mod config;
mod manifest;
mod run;
mod scene;

pub use config::{CameraLayout, GridConfig, RunConfig, SceneConfig, SEED_ENV};
pub use manifest::{
    feature_map_from_store, feature_map_to_store, load_sequence, save_sequence, GaussianSetFile, LoadedSequence,
    ManifestCamera, ManifestFrame, SequenceManifest, FEATURE_TENSOR, MANIFEST_FILE,
};
pub use run::{
    bench_table, execute_run, with_workers, write_run, BenchRow, FrameEntry, RunIndex, RunOutcome, INDEX_FILE,
};
pub use scene::{
    build_sequence, camera_ring, class_embedding, ego_pose_at, generate_scene, oracle_fidelity, random_objects,
    FidelityReport, GeneratedSequence, SceneObject, SyntheticScene,
};
