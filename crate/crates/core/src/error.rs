use thiserror::Error;

use crate::ids::ItemId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown {kind} id {id}")]
    Lookup { kind: &'static str, id: u32 },

    #[error("training error: {0}")]
    Training(String),

    #[error("feature error: expected dimension {expected}, got {got}")]
    Feature { expected: usize, got: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("admission error: item {0} is already in the ledger book")]
    Admission(ItemId),

    #[error("ledger overflow: item {item} stage {stage} budget {budget} already spent")]
    LedgerOverflow { item: ItemId, stage: u8, budget: u64 },

    #[error("invalid event: {0}")]
    Event(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("slot {slot}: {source}")]
    AtSlot { slot: u32, source: Box<Error> },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Wraps a module error with the slot it happened in.
    pub fn at_slot(self, slot: u32) -> Self {
        match self {
            e @ Error::AtSlot { .. } => e,
            e => Error::AtSlot { slot, source: Box::new(e) },
        }
    }

    /// True for errors caused by invalid user-supplied configuration.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::AtSlot { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
