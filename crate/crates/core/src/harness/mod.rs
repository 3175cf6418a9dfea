pub mod config;
pub mod experiment;
pub mod generate;

pub use config::{ExperimentConfig, PolicyGenerator};
pub use experiment::{run_experiment, write_reports, ExperimentOutput};
pub use generate::{generate_instance, random_policies, Instance, InstanceSpec};
