use std::collections::{BTreeMap, BTreeSet};

use crate::dataset::SplitPlan;
use crate::envelope::{EnvelopeError, KeyPair, PublicKey, Scheme};
use crate::model::{assemble_model, class_counts, compute_stats, GaussianNBModel, DEFAULT_VARIANCE_FLOOR};
use crate::perturb::{NoiseFamily, NoiseMode};

use super::message::{site_node, ProtocolMessage, SitePayload, StatsPayload, UploadMode, PROTOCOL_VERSION};
use super::{Destination, Outgoing, ProtocolError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CoordinatorPhase {
    Broadcasting,
    CollectingReady,
    /// Start has been issued to the roster.
    Running,
    CollectingStats,
    Done,
    Aborted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorConfig {
    pub session_id: String,
    pub min_sites: usize,
    pub split_plan: SplitPlan,
    pub split_index: usize,
    pub noise_mode: NoiseMode,
    pub noise_family: NoiseFamily,
    pub upload: UploadMode,
    pub scheme: Scheme,
    pub key_bits: usize,
    pub variance_floor: f64,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            session_id: "session-0".into(),
            min_sites: 3,
            split_plan: SplitPlan::default(),
            split_index: 0,
            noise_mode: NoiseMode::default(),
            noise_family: NoiseFamily::default(),
            upload: UploadMode::default(),
            scheme: Scheme::default(),
            key_bits: crate::envelope::MIN_RSA_BITS,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoordinatorEvent {
    /// Kick off the session by broadcasting Init.
    Begin,
    Message(ProtocolMessage),
    /// The current phase's deadline expired.
    Deadline,
}

/// The trusted third party: enrols sites, collects their sealed statistics
/// and fits the global model.
#[derive(Debug)]
pub struct Coordinator {
    config: CoordinatorConfig,
    keys: KeyPair,
    phase: CoordinatorPhase,
    history: Vec<CoordinatorPhase>,
    site_keys: BTreeMap<u32, PublicKey>,
    roster: Vec<u32>,
    received: BTreeMap<u32, StatsPayload>,
    model: Option<GaussianNBModel>,
    failure: Option<ProtocolError>,
    rejected: usize,
}

impl Coordinator {
    pub fn new(config: CoordinatorConfig) -> Result<Self, EnvelopeError> {
        let keys = config.scheme.generate_keypair(config.key_bits)?;
        Ok(Self::with_keys(config, keys))
    }

    pub fn with_keys(config: CoordinatorConfig, keys: KeyPair) -> Self {
        Self {
            config,
            keys,
            phase: CoordinatorPhase::Broadcasting,
            history: vec![CoordinatorPhase::Broadcasting],
            site_keys: BTreeMap::new(),
            roster: Vec::new(),
            received: BTreeMap::new(),
            model: None,
            failure: None,
            rejected: 0,
        }
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    pub fn phase(&self) -> CoordinatorPhase {
        self.phase
    }

    /// Every phase entered so far, in order.
    pub fn history(&self) -> &[CoordinatorPhase] {
        &self.history
    }

    pub fn roster(&self) -> &[u32] {
        &self.roster
    }

    pub fn model(&self) -> Option<&GaussianNBModel> {
        self.model.as_ref()
    }

    pub fn failure(&self) -> Option<&ProtocolError> {
        self.failure.as_ref()
    }

    /// Messages ignored because they belonged to another session.
    pub fn rejected_messages(&self) -> usize {
        self.rejected
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, CoordinatorPhase::Done | CoordinatorPhase::Aborted)
    }

    pub fn step(&mut self, event: CoordinatorEvent) -> Vec<Outgoing> {
        if self.is_finished() {
            return Vec::new();
        }
        match self.handle(event) {
            Ok(out) => out,
            Err(e) => self.abort(e),
        }
    }

    fn enter(&mut self, phase: CoordinatorPhase) {
        debug_assert!(phase > self.phase, "{:?} -> {phase:?}", self.phase);
        self.phase = phase;
        self.history.push(phase);
    }

    fn abort(&mut self, error: ProtocolError) -> Vec<Outgoing> {
        log::warn!("coordinator aborting session {}: {error}", self.config.session_id);
        let reason = error.to_string();
        self.failure = Some(error);
        self.enter(CoordinatorPhase::Aborted);
        vec![Outgoing::new(
            Destination::AllSites,
            ProtocolMessage::Abort {
                session_id: self.config.session_id.clone(),
                reason,
            },
        )]
    }

    fn handle(&mut self, event: CoordinatorEvent) -> Result<Vec<Outgoing>, ProtocolError> {
        use CoordinatorPhase as P;
        let msg = match event {
            CoordinatorEvent::Deadline => {
                return Err(ProtocolError::Timeout(format!(
                    "deadline expired in phase {:?}",
                    self.phase
                )))
            }
            CoordinatorEvent::Begin if self.phase == P::Broadcasting => {
                self.enter(P::CollectingReady);
                return Ok(vec![Outgoing::new(
                    Destination::AllSites,
                    ProtocolMessage::Init {
                        session_id: self.config.session_id.clone(),
                        protocol_version: PROTOCOL_VERSION,
                        min_sites: self.config.min_sites,
                    },
                )]);
            }
            CoordinatorEvent::Begin => {
                return Err(ProtocolError::ProtocolViolation(format!(
                    "begin in phase {:?}",
                    self.phase
                )))
            }
            CoordinatorEvent::Message(m) => m,
        };

        if msg.session_id() != self.config.session_id {
            log::warn!("ignoring {:?} from session {}", msg.kind(), msg.session_id());
            self.rejected += 1;
            return Ok(Vec::new());
        }

        match (self.phase, msg) {
            (_, ProtocolMessage::Abort { reason, .. }) => Err(ProtocolError::PeerAbort(reason)),
            (P::CollectingReady, ProtocolMessage::Ready { site_id, site_public_key, .. }) => {
                self.on_ready(site_id, site_public_key)
            }
            (P::CollectingStats, ProtocolMessage::Ready { site_id, .. })
                if !self.roster.contains(&site_id) =>
            {
                // roster already closed: turn the late site away, keep the session
                log::info!("turning away late site {site_id}");
                self.rejected += 1;
                Ok(vec![Outgoing::new(
                    Destination::Site(site_id),
                    ProtocolMessage::Abort {
                        session_id: self.config.session_id.clone(),
                        reason: format!("roster closed before site {site_id} was ready"),
                    },
                )])
            }
            (P::CollectingStats, ProtocolMessage::Stats { site_id, envelope, .. }) => {
                self.on_stats(site_id, &envelope)
            }
            (phase, other) => Err(ProtocolError::ProtocolViolation(format!(
                "unexpected {:?} in phase {phase:?}",
                other.kind()
            ))),
        }
    }

    fn on_ready(&mut self, site_id: u32, key: PublicKey) -> Result<Vec<Outgoing>, ProtocolError> {
        if self.site_keys.insert(site_id, key).is_some() {
            return Err(ProtocolError::ProtocolViolation(format!(
                "duplicate Ready from site {site_id}"
            )));
        }
        if self.site_keys.len() < self.config.min_sites.max(1) {
            return Ok(Vec::new());
        }
        self.roster = self.site_keys.keys().copied().collect();
        self.enter(CoordinatorPhase::Running);
        let out = self
            .roster
            .iter()
            .map(|&site| {
                Outgoing::new(
                    Destination::Site(site),
                    ProtocolMessage::Start {
                        session_id: self.config.session_id.clone(),
                        coordinator_public_key: self.keys.public.clone(),
                        split_plan: self.config.split_plan.clone(),
                        split_index: self.config.split_index,
                        noise_mode: self.config.noise_mode,
                        noise_family: self.config.noise_family,
                        upload: self.config.upload,
                        roster: self.roster.clone(),
                    },
                )
            })
            .collect();
        self.enter(CoordinatorPhase::CollectingStats);
        Ok(out)
    }

    fn on_stats(
        &mut self,
        site_id: u32,
        envelope: &crate::envelope::SealedEnvelope,
    ) -> Result<Vec<Outgoing>, ProtocolError> {
        if !self.roster.contains(&site_id) {
            return Err(ProtocolError::ProtocolViolation(format!(
                "Stats from site {site_id}, which is not on the roster"
            )));
        }
        if self.received.contains_key(&site_id) {
            return Err(ProtocolError::ProtocolViolation(format!(
                "duplicate Stats from site {site_id}"
            )));
        }
        let node = site_node(site_id);
        if envelope.sender_id != node {
            return Err(ProtocolError::ProtocolViolation(format!(
                "envelope sender `{}` does not match site {site_id}",
                envelope.sender_id
            )));
        }
        let plaintext = self
            .config
            .scheme
            .open(envelope, &self.keys.private, &self.site_keys[&site_id])
            .map_err(|source| ProtocolError::Envelope { site: node.clone(), source })?;
        let payload: SitePayload = serde_json::from_slice(&plaintext)
            .map_err(|e| ProtocolError::Malformed(format!("stats payload from {node}: {e}")))?;
        if payload.site_id() != site_id {
            return Err(ProtocolError::ProtocolViolation(format!(
                "payload claims site {} but arrived from site {site_id}",
                payload.site_id()
            )));
        }
        if payload.upload_mode() != self.config.upload {
            return Err(ProtocolError::ProtocolViolation(format!(
                "site {site_id} uploaded {:?}, session expects {:?}",
                payload.upload_mode(),
                self.config.upload
            )));
        }
        let stats = match payload {
            SitePayload::Statistics(p) => p,
            SitePayload::Records(r) => {
                let mut attribute_stats = Vec::new();
                for column in &r.columns {
                    attribute_stats.extend(compute_stats(column, &r.labels)?);
                }
                StatsPayload {
                    site_id,
                    class_counts: class_counts(&r.labels),
                    attribute_stats,
                }
            }
        };
        self.check_consistency(&stats)?;
        self.received.insert(site_id, stats);

        if self.received.len() < self.roster.len() {
            return Ok(Vec::new());
        }
        let model = self.fit()?;
        let json = model.to_canonical_json();
        self.model = Some(model);
        self.enter(CoordinatorPhase::Done);
        Ok(self
            .roster
            .iter()
            .map(|&site| {
                Outgoing::new(
                    Destination::Site(site),
                    ProtocolMessage::Model {
                        session_id: self.config.session_id.clone(),
                        model: json.clone(),
                    },
                )
            })
            .collect())
    }

    fn check_consistency(&self, stats: &StatsPayload) -> Result<(), ProtocolError> {
        let total: u64 = stats.class_counts.values().sum();
        let mut per_attribute: BTreeMap<&str, u64> = BTreeMap::new();
        for s in &stats.attribute_stats {
            *per_attribute.entry(&s.attribute_name).or_default() += s.n;
        }
        if let Some((name, n)) = per_attribute.iter().find(|(_, &n)| n != total) {
            return Err(ProtocolError::Consistency(format!(
                "site {}: attribute `{name}` covers {n} rows but class counts total {total}",
                stats.site_id
            )));
        }
        for other in self.received.values() {
            if other.class_counts != stats.class_counts {
                return Err(ProtocolError::Consistency(format!(
                    "class counts of site {} {:?} differ from site {} {:?}",
                    stats.site_id, stats.class_counts, other.site_id, other.class_counts
                )));
            }
            let theirs: BTreeSet<&str> = other
                .attribute_stats
                .iter()
                .map(|s| s.attribute_name.as_str())
                .collect();
            if let Some(dup) = per_attribute.keys().find(|a| theirs.contains(*a)) {
                return Err(ProtocolError::Consistency(format!(
                    "attribute `{dup}` reported by both site {} and site {}",
                    stats.site_id, other.site_id
                )));
            }
        }
        Ok(())
    }

    /// Fits from the received payloads in site order, so the result does not
    /// depend on arrival order.
    fn fit(&self) -> Result<GaussianNBModel, ProtocolError> {
        let mut groups: Vec<Vec<crate::model::ClassConditionalStats>> = Vec::new();
        for payload in self.received.values() {
            for s in &payload.attribute_stats {
                match groups.last_mut() {
                    Some(g) if g[0].attribute_name == s.attribute_name => g.push(s.clone()),
                    _ => groups.push(vec![s.clone()]),
                }
            }
        }
        let counts = &self
            .received
            .values()
            .next()
            .ok_or_else(|| ProtocolError::Consistency("no statistics received".into()))?
            .class_counts;
        Ok(assemble_model(&groups, counts, self.config.variance_floor)?)
    }
}
