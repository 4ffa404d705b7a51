use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::dataset::SplitPlan;
use crate::envelope::{PublicKey, SealedEnvelope};
use crate::model::ClassConditionalStats;
use crate::perturb::{NoiseFamily, NoiseMode, PerturbedColumn};

use super::ProtocolError;

pub const PROTOCOL_VERSION: u32 = 1;

/// What sites upload inside their Stats envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UploadMode {
    /// Per-class counts, means and variances of the perturbed columns.
    #[default]
    Statistics,
    /// The perturbed training columns and labels; the coordinator computes
    /// the statistics itself.
    Records,
}

/// Wire messages. Serialized as canonical JSON with a lowercase `type` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ProtocolMessage {
    Init {
        session_id: String,
        protocol_version: u32,
        min_sites: usize,
    },
    Ready {
        session_id: String,
        site_id: u32,
        site_public_key: PublicKey,
    },
    Start {
        session_id: String,
        coordinator_public_key: PublicKey,
        split_plan: SplitPlan,
        /// Which of the plan's splits this session trains on.
        split_index: usize,
        noise_mode: NoiseMode,
        noise_family: NoiseFamily,
        upload: UploadMode,
        roster: Vec<u32>,
    },
    Stats {
        session_id: String,
        site_id: u32,
        envelope: SealedEnvelope,
    },
    Model {
        session_id: String,
        /// Canonical JSON of the fitted model.
        model: String,
    },
    Abort {
        session_id: String,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Init,
    Ready,
    Start,
    Stats,
    Model,
    Abort,
}

impl ProtocolMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            ProtocolMessage::Init { .. } => MessageKind::Init,
            ProtocolMessage::Ready { .. } => MessageKind::Ready,
            ProtocolMessage::Start { .. } => MessageKind::Start,
            ProtocolMessage::Stats { .. } => MessageKind::Stats,
            ProtocolMessage::Model { .. } => MessageKind::Model,
            ProtocolMessage::Abort { .. } => MessageKind::Abort,
        }
    }

    pub fn session_id(&self) -> &str {
        match self {
            ProtocolMessage::Init { session_id, .. }
            | ProtocolMessage::Ready { session_id, .. }
            | ProtocolMessage::Start { session_id, .. }
            | ProtocolMessage::Stats { session_id, .. }
            | ProtocolMessage::Model { session_id, .. }
            | ProtocolMessage::Abort { session_id, .. } => session_id,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        canonical::to_vec(self)
    }

    pub fn decode(body: &[u8]) -> Result<Self, ProtocolError> {
        serde_json::from_slice(body).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }
}

/// Statistics a site computes over its own perturbed training columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsPayload {
    pub site_id: u32,
    pub class_counts: BTreeMap<String, u64>,
    /// Attribute-major: all classes of the first attribute, then the next.
    pub attribute_stats: Vec<ClassConditionalStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordsPayload {
    pub site_id: u32,
    /// Labels of the training rows, aligned with every column.
    pub labels: Vec<String>,
    pub columns: Vec<PerturbedColumn>,
}

/// Plaintext carried inside a Stats envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SitePayload {
    Statistics(StatsPayload),
    Records(RecordsPayload),
}

impl SitePayload {
    pub fn upload_mode(&self) -> UploadMode {
        match self {
            SitePayload::Statistics(_) => UploadMode::Statistics,
            SitePayload::Records(_) => UploadMode::Records,
        }
    }

    pub fn site_id(&self) -> u32 {
        match self {
            SitePayload::Statistics(p) => p.site_id,
            SitePayload::Records(p) => p.site_id,
        }
    }
}

/// Name a site uses as envelope sender and transport node id.
pub fn site_node(site_id: u32) -> String {
    format!("site-{site_id}")
}

pub const COORDINATOR_NODE: &str = "coordinator";
