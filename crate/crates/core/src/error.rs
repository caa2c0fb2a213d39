use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("negative delay {0} ns")]
    NegativeDelay(i64),
    #[error("flash address out of range: {0}")]
    AddressOutOfRange(String),
    #[error("program to non-erased page: {0}")]
    WriteInPlace(String),
    #[error("empty utilization window")]
    EmptyWindow,
    #[error("window [{start}, {end}) extends past now ({now})")]
    WindowInFuture { start: u64, end: u64, now: u64 },
    #[error("lpn {lpn} out of range (logical capacity {capacity} pages)")]
    LpnOutOfRange { lpn: u64, capacity: u64 },
    #[error("device full: no erasable victim block")]
    DeviceFull,
    #[error("unregistered fabric address {0:#x}")]
    FabricFault(u64),
    #[error("fabric address {0:#x} is not 8-byte aligned")]
    Misaligned(u64),
    #[error("fabric regions overlap at {0:#x}")]
    RegionOverlap(u64),
    #[error("device {0} has failed")]
    DeviceFailed(u8),
    #[error("unlock of lock not held by {0}")]
    NotHeld(u8),
    #[error("redo log append to closed session")]
    SessionClosed,
    #[error("nonpositive capacity {0} TB")]
    NonPositiveCapacity(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("trace parse error at line {line}: {msg}")]
    TraceParse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
