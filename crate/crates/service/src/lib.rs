//! HTTP service around the notigate gateway: persistence, routing,
//! configuration, background ticking and event watchers.

pub mod api;
pub mod app;
pub mod config;
pub mod watchers;

pub use app::App;
pub use config::ServiceConfig;
