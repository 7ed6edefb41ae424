pub mod alerts;
pub mod availability;
pub mod config;
pub mod gateway;
pub mod ingestion;
pub mod learning;
pub mod model;
pub mod notifier;
pub mod store;
pub mod time;
pub mod triage;
