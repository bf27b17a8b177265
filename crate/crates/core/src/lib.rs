//! Speech recognition threshold (SRT) estimation from incomplete clinical
//! word-recognition data.
//!
//! Three estimation procedures are provided, chosen per patient by how many
//! measured points fall into the slope area of the psychometric function:
//!
//! * empirical slope: two or more slope-area points, linear fit;
//! * SII slope: one slope-area point, slope derived from the individual
//!   speech intelligibility index curve;
//! * normal-hearing slope: only the maximum-score point, closed-form inversion
//!   of the normal-hearing logistic (an upper bound on the SRT).
//!
//! Every estimate carries a first-order propagated error and the Plomp
//! audibility/distortion decomposition. A protocol simulator generates cohorts
//! with known ground truth for validation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis_stats;
pub mod clinical_data;
pub mod error;
pub mod estimators;
pub mod pipeline;
pub mod protocol_sim;
pub mod psychometrics;
pub mod sii_model;
pub mod uncertainty;

pub use error::{Error, Result};
