//! Class activation maps, PGM export and ablation sweeps.

pub mod cam;
pub mod pgm;
pub mod sweep;

pub use cam::{cam_from_features, compute_cam, cosine_similarity, CamMap, CamSource};
pub use pgm::{export_cam_pgm, read_pgm, write_pgm};
pub use sweep::{run_sweep, SweepGrid, SweepRow};
