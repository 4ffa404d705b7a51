//! Coordinator and party state machines.
//!
//! Both roles are deterministic event reducers: each `step` consumes one event
//! and returns the messages to send. They know nothing about transport; the
//! [`crate::session`] drivers move messages between them.
//!
//! A session runs Init → Ready (one per site) → Start → Stats (one per
//! rostered site) → Model. Any error aborts the session and broadcasts Abort.

mod coordinator;
mod message;
mod party;

pub use coordinator::{Coordinator, CoordinatorConfig, CoordinatorEvent, CoordinatorPhase};
pub use message::{
    site_node, MessageKind, ProtocolMessage, RecordsPayload, SitePayload, StatsPayload,
    UploadMode, COORDINATOR_NODE, PROTOCOL_VERSION,
};
pub use party::{perturb_fragment, Party, PartyConfig, PartyEvent, PartyPhase};

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::envelope::EnvelopeError;
use crate::model::ModelError;
use crate::perturb::PerturbError;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProtocolError {
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("envelope error from {site}: {source}")]
    Envelope {
        site: String,
        #[source]
        source: EnvelopeError,
    },
    #[error("timeout: {0}")]
    Timeout(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("session aborted by peer: {0}")]
    PeerAbort(String),
}

impl From<ModelError> for ProtocolError {
    fn from(e: ModelError) -> Self {
        ProtocolError::Model(e.to_string())
    }
}

impl From<DatasetError> for ProtocolError {
    fn from(e: DatasetError) -> Self {
        ProtocolError::Fit(e.to_string())
    }
}

impl From<PerturbError> for ProtocolError {
    fn from(e: PerturbError) -> Self {
        ProtocolError::Fit(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Destination {
    Coordinator,
    Site(u32),
    /// Every connected site, enrolled or not.
    AllSites,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub to: Destination,
    pub message: ProtocolMessage,
}

impl Outgoing {
    pub(crate) fn new(to: Destination, message: ProtocolMessage) -> Self {
        Self { to, message }
    }
}
