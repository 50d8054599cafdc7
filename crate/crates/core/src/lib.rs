pub mod client;
pub mod codec;
pub mod experiment;
pub mod explain;
pub mod message;
pub mod protocol;
pub mod scenarios;
pub mod sim;
pub mod state;
pub mod trace;
pub mod trusted;
pub mod types;
