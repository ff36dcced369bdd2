pub mod broker;
pub mod demo_wildfire;
pub mod edi;
pub mod ids;
pub mod journal;
pub mod service;
pub mod simenv;
pub mod statestore;
pub mod time;
pub mod wfcore;
pub mod workers;
