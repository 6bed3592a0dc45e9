//! Risk-prediction pipeline over OMOP-style event logs.
//!
//! The crate is organized bottom-up:
//!
//! * [`ehr`] loads participants and dated coded events and answers windowed queries.
//! * [`synth`] generates cohorts with planted, stratum-specific risk concepts.
//! * [`cohort`] phenotypes targets, fits propensity scores and matches controls 1:1.
//! * [`featurize`] builds the days-since-last-occurrence matrix with a sentinel for "never".
//! * [`select`] runs the prevalence screen, the gain screen and the heterogeneity tests.
//! * [`boosting`] is a second-order gradient-boosted tree learner with learned
//!   default directions for sentinel cells.
//! * [`tune`] is a factored Tree-structured Parzen Estimator.
//! * [`evaluate`] holds metrics, stratified folds and the global-vs-stratum benchmark.
//! * [`pipeline`] wires the stages together with on-disk, hash-stamped artifacts.

pub mod boosting;
pub mod cohort;
pub mod ehr;
pub mod error;
pub mod evaluate;
pub mod featurize;
pub mod pipeline;
pub mod rng;
pub mod select;
pub mod synth;
pub mod tune;

pub use boosting::{Dataset, GbdtModel, GbdtParams};

pub use ehr::{ClinicalEvent, Domain, EventStore, Participant, PersonId, Sex};
pub use error::{Error, Result};
pub use cohort::{CohortLabel, Label, PhenotypeConfig, PropensityModel, VisitFrequencyCategory};
pub use evaluate::{GroupReport, Metrics, Stratum};
pub use featurize::{RecencyFeatureMatrix, SENTINEL};
pub use select::{QuotaConfig, SelectedFeatureSet};
pub use tune::{SearchSpace, TpeConfig, Trial};
