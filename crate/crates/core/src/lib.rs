//! Trajectory-similarity demonstration selection for in-context next-POI
//! prediction.
//!
//! The crate covers the whole pipeline: check-in ingestion and segmentation,
//! similarity kernels, demonstration ranking, prompt rendering, the LLM
//! gateway and the evaluation/reporting layer.

pub mod dataset;
pub mod evaluation;
pub mod llm_gateway;
pub mod prompting;
pub mod selection;
pub mod similarity;
pub mod synthetic;
