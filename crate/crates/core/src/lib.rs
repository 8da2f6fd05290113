//! Multimodal (DWI + ADC) ischemic stroke lesion segmentation.
//!
//! The crate covers the whole slice-wise pipeline:
//!
//! * [`volume_io`]: NIfTI case discovery/loading and seeded split manifests;
//! * [`preprocess`]: min-max normalization, DWI bounding-box crop, three-slice
//!   stacking, 128x128 resize and the `.smp` sample container;
//! * [`phantom`]: synthetic DWI/ADC/mask volumes with ellipsoidal lesions;
//! * [`nets`]: single- and dual-encoder TransUNet variants;
//! * [`train`]: BCE-with-logits, paired augmentation, freeze/finetune loop;
//! * [`eval`]: Dice, per-case volume reassembly and reports.

pub mod error;
pub mod eval;
pub mod nets;
pub mod phantom;
pub mod preprocess;
pub mod train;
pub mod volume_io;

pub use error::{Error, Result};
