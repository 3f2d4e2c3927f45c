pub mod clock;
pub mod error;
pub mod ids;
pub mod record;
pub mod ring;
pub mod store;
pub mod grid;
pub mod storage;
pub mod log;
pub mod registry;
pub mod protocol;
pub mod engine;
pub mod lock;
pub mod fault;
pub mod invoker;
pub mod dataflow;
pub mod ingress;
pub mod cluster;
pub mod scenario;
