//! File formats, configuration and the command-line front end for the
//! retention-memory transformer in `retention-core`.

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod session;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use session::{load_session, model_fingerprint, save_session, SessionStore, StoreError};
