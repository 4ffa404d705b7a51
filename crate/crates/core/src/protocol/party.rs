use std::sync::Arc;

use crate::canonical;
use crate::dataset::{generate_splits, PartitionedTable};
use crate::envelope::{KeyPair, Scheme};
use crate::model::{class_counts, compute_stats, GaussianNBModel};
use crate::perturb::{
    perturb_column, resolve_variance, NoiseFamily, NoiseMode, NoiseSpec, PerturbError,
    PerturbedColumn,
};

use super::message::{
    site_node, ProtocolMessage, RecordsPayload, SitePayload, StatsPayload, UploadMode,
    PROTOCOL_VERSION,
};
use super::{Destination, Outgoing, ProtocolError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PartyPhase {
    Idle,
    SentReady,
    /// Perturbing and summarising the local fragment.
    Fitting,
    SentStats,
    HasModel,
    Aborted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartyConfig {
    pub scheme: Scheme,
    pub key_bits: usize,
    /// Seed of this site's noise streams. Never leaves the site.
    pub noise_seed: u64,
}

impl Default for PartyConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::default(),
            key_bits: crate::envelope::MIN_RSA_BITS,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartyEvent {
    Message(ProtocolMessage),
    Deadline,
}

/// Perturbs every column of a fragment over all of its rows. Column `j` uses
/// the noise stream of its parent-table position.
pub fn perturb_fragment(
    fragment: &PartitionedTable,
    mode: NoiseMode,
    family: NoiseFamily,
    seed: u64,
) -> Result<Vec<PerturbedColumn>, PerturbError> {
    fragment
        .attribute_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let x: Vec<f64> = fragment.rows.iter().map(|r| r.values[j]).collect();
            let variance = resolve_variance(mode, &x)?.variance;
            let spec = NoiseSpec::new(family, variance, seed);
            perturb_column(name, &x, &spec, fragment.attribute_indices[j])
        })
        .collect()
}

/// A data-holding site.
#[derive(Debug)]
pub struct Party {
    fragment: Arc<PartitionedTable>,
    config: PartyConfig,
    keys: Option<KeyPair>,
    phase: PartyPhase,
    history: Vec<PartyPhase>,
    session_id: Option<String>,
    model: Option<GaussianNBModel>,
    failure: Option<ProtocolError>,
}

impl Party {
    pub fn new(fragment: Arc<PartitionedTable>, config: PartyConfig) -> Self {
        Self {
            fragment,
            config,
            keys: None,
            phase: PartyPhase::Idle,
            history: vec![PartyPhase::Idle],
            session_id: None,
            model: None,
            failure: None,
        }
    }

    pub fn site_id(&self) -> u32 {
        self.fragment.site_id
    }

    pub fn node_id(&self) -> String {
        site_node(self.site_id())
    }

    pub fn fragment(&self) -> &PartitionedTable {
        &self.fragment
    }

    pub fn phase(&self) -> PartyPhase {
        self.phase
    }

    pub fn history(&self) -> &[PartyPhase] {
        &self.history
    }

    pub fn model(&self) -> Option<&GaussianNBModel> {
        self.model.as_ref()
    }

    pub fn failure(&self) -> Option<&ProtocolError> {
        self.failure.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, PartyPhase::HasModel | PartyPhase::Aborted)
    }

    pub fn step(&mut self, event: PartyEvent) -> Vec<Outgoing> {
        if self.is_finished() {
            return Vec::new();
        }
        match self.handle(event) {
            Ok(out) => out,
            Err((error, notify)) => {
                log::warn!("{} aborting: {error}", self.node_id());
                let reason = error.to_string();
                self.failure = Some(error);
                self.enter(PartyPhase::Aborted);
                match (notify, &self.session_id) {
                    (true, Some(session_id)) => vec![Outgoing::new(
                        Destination::Coordinator,
                        ProtocolMessage::Abort {
                            session_id: session_id.clone(),
                            reason,
                        },
                    )],
                    _ => Vec::new(),
                }
            }
        }
    }

    fn enter(&mut self, phase: PartyPhase) {
        debug_assert!(phase > self.phase, "{:?} -> {phase:?}", self.phase);
        self.phase = phase;
        self.history.push(phase);
    }

    /// Errors carry whether the coordinator should be told with an Abort.
    fn handle(&mut self, event: PartyEvent) -> Result<Vec<Outgoing>, (ProtocolError, bool)> {
        use PartyPhase as P;
        let msg = match event {
            PartyEvent::Deadline => {
                return Err((
                    ProtocolError::Timeout(format!("deadline expired in phase {:?}", self.phase)),
                    true,
                ))
            }
            PartyEvent::Message(m) => m,
        };
        match &self.session_id {
            Some(sid) if msg.session_id() != sid => {
                log::warn!("{} ignoring {:?} from session {}", self.node_id(), msg.kind(), msg.session_id());
                return Ok(Vec::new());
            }
            Some(_) => {}
            // first contact fixes the session, so even an early error can be reported
            None => self.session_id = Some(msg.session_id().to_string()),
        }
        match (self.phase, msg) {
            (_, ProtocolMessage::Abort { reason, .. }) => {
                Err((ProtocolError::PeerAbort(reason), false))
            }
            (P::Idle, ProtocolMessage::Init { session_id, protocol_version, .. }) => {
                if protocol_version != PROTOCOL_VERSION {
                    return Err((
                        ProtocolError::ProtocolViolation(format!(
                            "unsupported protocol version {protocol_version}"
                        )),
                        true,
                    ));
                }
                let keys = self
                    .config
                    .scheme
                    .generate_keypair(self.config.key_bits)
                    .map_err(|source| {
                        (ProtocolError::Envelope { site: self.node_id(), source }, true)
                    })?;
                let public = keys.public.clone();
                self.keys = Some(keys);
                self.enter(P::SentReady);
                Ok(vec![Outgoing::new(
                    Destination::Coordinator,
                    ProtocolMessage::Ready {
                        session_id,
                        site_id: self.site_id(),
                        site_public_key: public,
                    },
                )])
            }
            (P::SentReady, ProtocolMessage::Start { roster, .. })
                if !roster.contains(&self.site_id()) =>
            {
                // not enrolled: drop out quietly without disturbing the session
                Err((
                    ProtocolError::ProtocolViolation(format!(
                        "site {} not on the roster {roster:?}",
                        self.site_id()
                    )),
                    false,
                ))
            }
            (P::SentReady, start @ ProtocolMessage::Start { .. }) => {
                self.enter(P::Fitting);
                let stats = self.on_start(start).map_err(|e| (e, true))?;
                self.enter(P::SentStats);
                Ok(vec![stats])
            }
            (P::SentStats, ProtocolMessage::Model { model, .. }) => {
                let model = GaussianNBModel::from_json(&model)
                    .map_err(|e| (ProtocolError::from(e), true))?;
                self.model = Some(model);
                self.enter(P::HasModel);
                Ok(Vec::new())
            }
            (phase, other) => Err((
                ProtocolError::ProtocolViolation(format!(
                    "unexpected {:?} in phase {phase:?}",
                    other.kind()
                )),
                true,
            )),
        }
    }

    fn on_start(&self, start: ProtocolMessage) -> Result<Outgoing, ProtocolError> {
        let ProtocolMessage::Start {
            session_id,
            coordinator_public_key,
            split_plan,
            split_index,
            noise_mode,
            noise_family,
            upload,
            ..
        } = start
        else {
            unreachable!("on_start called with a non-Start message");
        };
        let frag = &self.fragment;
        let splits = generate_splits(frag.rows.len(), &split_plan)?;
        let split = splits.get(split_index).ok_or_else(|| {
            ProtocolError::Fit(format!(
                "split index {split_index} out of range ({} splits)",
                splits.len()
            ))
        })?;
        let perturbed = perturb_fragment(frag, noise_mode, noise_family, self.config.noise_seed)?;
        let labels: Vec<String> = split
            .train
            .iter()
            .map(|&i| frag.rows[i].class_label.clone())
            .collect();
        let train_columns: Vec<PerturbedColumn> = perturbed
            .iter()
            .map(|c| PerturbedColumn {
                attribute_name: c.attribute_name.clone(),
                values: split.train.iter().map(|&i| c.values[i]).collect(),
                noise_variance: c.noise_variance,
            })
            .collect();

        let mut attribute_stats = Vec::new();
        for column in &train_columns {
            attribute_stats
                .extend(compute_stats(column, &labels).map_err(|e| ProtocolError::Fit(e.to_string()))?);
        }
        let payload = match upload {
            UploadMode::Statistics => SitePayload::Statistics(StatsPayload {
                site_id: self.site_id(),
                class_counts: class_counts(&labels),
                attribute_stats,
            }),
            UploadMode::Records => SitePayload::Records(RecordsPayload {
                site_id: self.site_id(),
                labels,
                columns: train_columns,
            }),
        };

        let keys = self
            .keys
            .as_ref()
            .ok_or_else(|| ProtocolError::ProtocolViolation("Start before key generation".into()))?;
        let envelope = self
            .config
            .scheme
            .seal(
                &self.node_id(),
                &canonical::to_vec(&payload),
                &coordinator_public_key,
                &keys.private,
            )
            .map_err(|source| ProtocolError::Envelope { site: self.node_id(), source })?;
        Ok(Outgoing::new(
            Destination::Coordinator,
            ProtocolMessage::Stats {
                session_id,
                site_id: self.site_id(),
                envelope,
            },
        ))
    }
}
