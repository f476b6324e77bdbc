//! Inversion, window-sequential editing, and job orchestration.

mod edit;
mod inversion;
mod job;
mod store;

pub use edit::{
    edit_video, frame_order, EditFailure, EditOptions, EditOutput, EditRun, InversionSource, MaskSource, Provenance,
    ResidencyTracker, ScheduleInfo, SmoothingSummary, Timings, WindowSummary,
};
pub use inversion::{check_manifest, invert_all, InversionPass};
pub use job::{
    comparison_grid, error_report, evaluate_files, mask_overlay, run_job, write_error, write_json, JobAdapters,
    JobArtifacts, JobSpec, GRID_FRAMES,
};
pub use store::{DiskStore, InversionManifest, InversionRecord, InversionStore, MemoryStore, MANIFEST_FORMAT};
