//! Text line protocol for the virtual CPT instrument: grammar, async server,
//! blocking client and a replay backend for recorded traces.

pub mod client;
pub mod command;
pub mod endpoint;
pub mod replay;
pub mod server;

pub use client::{Client, ClientOptions};
pub use command::{Command, Reply};
pub use endpoint::Endpoint;
pub use replay::ReplayInstrument;
pub use server::{serve, Backend, ServerHandle};
