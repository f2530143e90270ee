pub mod cli;
pub mod engine;
pub mod error;
pub mod harness;
pub mod history;
pub mod interventions;
pub mod learners;
pub mod panel;
pub mod sim;
