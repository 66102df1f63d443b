use thiserror::Error;

use crate::addrspace::PageSize;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("mapping conflict at vpn {vpn:#x} ({size}): {reason}")]
    Mapping {
        vpn: u64,
        size: PageSize,
        reason: &'static str,
    },

    #[error("page fault at address {addr:#x}")]
    PageFault { addr: u64 },

    #[error("trace parse error at record {index}: {reason}")]
    Parse { index: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
