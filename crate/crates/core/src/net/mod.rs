//! TCP transport: servers for each plane and remote handles that implement
//! the same traits as the in-process components.
//!
//! Every connection is a strict request/reply stream of frames (see
//! [`crate::wire`]). Servers run one thread per connection.

mod errors;
mod remote;
mod server;

pub use errors::{from_control, from_coord, from_store, to_control, to_coord, to_store};
pub use remote::{Connection, RemoteController, RemoteCoordinator, RemoteSink, RemoteStorage};
pub use server::{
    bind, controller_handler, coordinator_handler, serve, storage_handler, Handler, ServerHandle,
};
