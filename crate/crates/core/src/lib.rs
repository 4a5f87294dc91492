pub mod client;
pub mod crypto;
pub mod harness;
pub mod net;
pub mod obliv;
pub mod ping;
pub mod pong;
pub mod protocol;
pub mod router;
pub mod sim;
