//! Exemplar-free online class-incremental learning over frozen embeddings.
//!
//! A learner sees each training embedding exactly once, task after task.
//! While streaming it keeps a running mean per class ([`mean_tracker`]) and
//! trains a linear head whose rows for earlier tasks are frozen
//! ([`linear_head`]). At test time the head picks one candidate class per
//! task and the nearest class mean among those candidates is the prediction
//! ([`classifiers`]). No training sample is ever stored.
//!
//! [`harness`] runs the whole protocol, plus fine-tuning, experience replay,
//! nearest-mean-of-exemplars and a joint-training reference
//! ([`baselines`]), and reports per-step, average and last-step accuracy.
//!
//! ```
//! use ncm_stream::embedding_store::SyntheticSpec;
//! use ncm_stream::harness::{run_on_dataset, Method, RunConfig};
//!
//! let spec = SyntheticSpec { num_classes: 10, per_class_train: 20, per_class_test: 10, ..SyntheticSpec::standard() };
//! let dataset = spec.generate().unwrap().into_dataset();
//! let config = RunConfig { step_size: 2, ..RunConfig::new(Method::CandidateNcm) };
//! let outcome = run_on_dataset(&dataset, &config).unwrap();
//! assert_eq!(outcome.metrics.per_step.len(), 5);
//! assert!(outcome.metrics.last > 0.9);
//! ```

pub mod baselines;
pub mod classifiers;
pub mod cli;
pub mod embedding_store;
pub mod harness;
pub mod linear_head;
pub mod mean_tracker;

/// The guide under `book/src`, compiled as doctests so its snippets stay
/// in sync with the crate.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/online-means.md")]
    pub struct OnlineMeans;
    #[doc = include_str!("../../../book/src/linear-head.md")]
    pub struct LinearHead;
    #[doc = include_str!("../../../book/src/candidate-ncm.md")]
    pub struct CandidateNcm;
    #[doc = include_str!("../../../book/src/baselines.md")]
    pub struct Baselines;
    #[doc = include_str!("../../../book/src/protocol.md")]
    pub struct Protocol;
    #[doc = include_str!("../../../book/src/file-formats.md")]
    pub struct FileFormats;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
