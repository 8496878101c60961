//! Remote patient monitoring and tele-consultation: vital classification,
//! durable storage, the access-controlled gateway, alert notification,
//! consultation sessions, sensor simulation and evaluation tooling.

pub mod client;
pub mod clock;
pub mod config;
pub mod consult;
pub mod error;
pub mod gateway;
pub mod http;
pub mod notifier;
pub mod rbac;
pub mod reliability;
pub mod sim;
pub mod store;
pub mod survey;
pub mod vital;
