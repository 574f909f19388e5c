pub mod io;
pub mod manifest;
pub mod preprocess;
pub mod sliding;
pub mod synth;
pub mod types;

pub use io::{load_labels, load_probs, load_volume, save_labels, save_probs, save_volume};
pub use manifest::{kfold_split, CaseEntry, DatasetManifest};
pub use preprocess::{crop_to_roi, hu_window, normalize, random_crop, Patch};
pub use sliding::{sliding_window_plan, stitch, SlidingPlan};
pub use synth::{synth_case, SynthSpec};
pub use types::{EmbeddingMap, LabelMap, ProbMap, Shape3, Volume, VoxelMask, PROB_SUM_TOL};
