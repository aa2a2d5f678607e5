//! Cross-silo federated-learning simulator with a subject-level source
//! inference audit toolkit: a small f64 neural-network engine, subject-
//! structured datasets, FedAvg simulation, embedding-classifier attacks and
//! loss baselines, differential-privacy defenses with an RDP accountant,
//! and source-list metrics.

pub mod attack;
pub mod data;
pub mod defense;
pub mod engine;
pub mod error;
pub mod fl;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod rng;
pub mod svm;
pub mod tensor;

pub use error::{Error, Result};
