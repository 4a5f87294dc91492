//! Message storage: oblivious hash tables, the hierarchical store built on
//! them, and the request-level service.

mod oht;
mod service;
mod store;

pub use oht::{Oht, OhtError, OhtGeometry, MAX_REBUILDS};
pub use service::{backend_read, backend_write, PongEntry, PongItem, PongService, StoredMsg};
pub use store::{
    BinKind, MergeJob, MergeMode, MergeResult, PongState, StoreConfig, StoreMetrics, WriteEntry,
};
