//! Surrogate model zoo: datasets, architectures, training, persistence.

mod arch;
mod dataset;
mod idx;
mod store;
mod train;

pub use arch::{bank_specs, hidden_classifier_spec, ArchKind, ArchitectureSpec};
pub use dataset::{glyph_mask, synth_dataset, Dataset, DatasetError, Sample, CATEGORIES};
pub use idx::{load_idx, write_idx, IdxError};
pub use store::{load_bank, load_model, save_bank, save_model, StoreError};
pub use train::{
    argmax, build_bank, train, train_with, ModelBank, SurrogateModel, TrainConfig, TrainReport,
    TrainError,
};
