//! Open-world localization engine: contrastive co-learning of a small
//! spatial encoder over labeled and unlabeled toy images, centroid-driven
//! activation maps, and the open-world evaluation protocol.

pub mod banks;
pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod data;
pub mod dataset;
pub mod encoder;
pub mod experiments;
pub mod error;
pub mod evalkit;
pub mod gcam;
pub mod losses;
pub mod par;
pub mod params;
pub mod rng;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
