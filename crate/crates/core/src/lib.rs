//! Signature verifier → circuit → Ising model → near-critical phase-gadget
//! Ising model, with exact small-instance oracles, samplers, partition-function
//! estimators and a memorize/hallucinate/forge evaluation harness.

pub mod circuit;
pub mod error;
pub mod gadget;
pub mod harness;
pub mod io;
pub mod ising;
mod jsonfmt;
pub mod logspace;
pub mod samplers;
pub mod scalar;
pub mod spectral;
pub mod spin;
pub mod waters;

pub use circuit::{CircuitBuilder, NandCircuit};
pub use error::{Error, Result};
pub use gadget::{GadgetInstance, GadgetPlan, PlanOptions};
pub use harness::{EvalReport, Pipeline, PipelineParams};
pub use io::SampleSet;
pub use ising::{brute_force_table, pushforward, tv_distance, DistributionTable, IsingModel};
pub use samplers::{CompactSample, EstimateResult, RngStream};
pub use scalar::BetaConstants;
pub use spin::SpinConfiguration;
pub use waters::{PublicKey, SecretKey, Signature};
