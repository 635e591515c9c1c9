//! Search a cell-based neural-architecture space for architectures whose
//! backdoor vulnerability is exploitable by an input-aware trigger generator.
//!
//! Candidates are scored without any training: the score is the condition
//! number of the empirical neural-tangent-kernel of the trigger generator
//! composed with a freshly initialized target model. Lower scores predict
//! higher attack success once a generator is actually trained. The crate
//! also carries the full verification pipeline: clean training, generator
//! training against a frozen model, joint backdoor training, fine-tuning,
//! re-training from scratch, poisoned fine-tuning, and ACC/ASR evaluation.
//!
//! Modules, bottom up:
//!
//! * [`archspace`] — the 4-node / 5-operator cell space, its canonical
//!   string encoding, sampling, mutation, and enumeration.
//! * [`autodiff`] — a small tape-based reverse-mode engine over `f64`
//!   ndarray tensors (convolutions, batch norm, pooling, the lot).
//! * [`nn`] — parameter storage and the layer primitives shared by the
//!   target models and the trigger generator.
//! * [`netbuilder`] — differentiable target models built from a cell spec,
//!   plus a small residual baseline.
//! * [`triggergen`] — the mask + pattern generator pair and trigger
//!   application.
//! * [`ntkscore`] — empirical NTK assembly and the condition-number score.
//! * [`evosearch`] — aging-evolution search driven by any score function.
//! * [`trainer`] — all training protocols and optimizers.
//! * [`evalkit`] — ACC/ASR metrics and the analysis studies.
//! * [`data`] — the synthetic dataset and the CIFAR-10 binary loader.
//! * [`checkpoint`] — the named-tensor archive format.

pub mod archspace;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod evosearch;
pub mod netbuilder;
pub mod nn;
pub mod ntkscore;
pub mod rng;
pub mod trainer;
pub mod triggergen;

pub use archspace::{ArchSpec, Operator};
pub use data::LabeledDataset;
pub use error::{Error, Result};
pub use evalkit::{EvalReport, StudyTable};
pub use evosearch::{SearchConfig, SearchState};
pub use netbuilder::{InitSpec, NetworkInstance, SkeletonConfig};
pub use ntkscore::{ScoreConfig, ScoreReport};
pub use trainer::TrainConfig;
pub use triggergen::{GeneratorConfig, GeneratorInstance, TriggerBatch};
