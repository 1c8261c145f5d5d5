//! Measurement tools: profiling, base-kernel pruning, kernel correlation and spectra.

pub mod correlation;
pub mod profile;
pub mod prune;
pub mod spectra;

pub use correlation::{kernel_correlation, pearson, KernelCorrelation};
pub use profile::{profile, ProfileReport, ProfileRow};
pub use prune::{l1_prune, PruneLayer, PruneReport};
pub use spectra::export_spectra;
