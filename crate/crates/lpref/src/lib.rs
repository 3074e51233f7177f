//! Referee service: HTTP API, queue dispatcher, configuration and offline
//! commands built on `lpref-core`.

pub mod api;
pub mod commands;
pub mod config;
pub mod dispatch;
