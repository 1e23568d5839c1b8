pub mod api;
pub mod client;
pub mod config;
pub mod controller;
pub mod net;
pub mod coordinator;
pub mod planner;
pub mod sim;
pub mod storage;
pub mod transport;
pub mod types;
pub mod wire;
