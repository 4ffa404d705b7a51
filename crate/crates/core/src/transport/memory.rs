use std::collections::VecDeque;

use super::{TransportError, MAX_FRAME_LEN};

/// Sequence number of an accepted frame, global across the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub from: String,
    pub to: String,
    pub frame: Vec<u8>,
}

/// Deterministic single-threaded network between named nodes.
///
/// Each node has one inbox holding frames in send order, which gives FIFO per
/// sender-receiver pair. [`deliver_next`](Self::deliver_next) visits inboxes
/// round-robin in registration order, starting after the node served last.
#[derive(Debug)]
pub struct InProcessNetwork {
    nodes: Vec<String>,
    inboxes: Vec<VecDeque<(usize, Vec<u8>)>>,
    cursor: usize,
    sent: u64,
}

impl InProcessNetwork {
    pub fn new<I, S>(node_ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let nodes: Vec<String> = node_ids.into_iter().map(Into::into).collect();
        let inboxes = nodes.iter().map(|_| VecDeque::new()).collect();
        Self { nodes, inboxes, cursor: 0, sent: 0 }
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    fn index(&self, node: &str) -> Result<usize, TransportError> {
        self.nodes
            .iter()
            .position(|n| n == node)
            .ok_or_else(|| TransportError::Unreachable(node.to_string()))
    }

    /// Enqueues an encoded frame (length prefix included).
    pub fn send(&mut self, from: &str, to: &str, frame: Vec<u8>) -> Result<Receipt, TransportError> {
        let src = self.index(from)?;
        let dst = self.index(to)?;
        if frame.len() > MAX_FRAME_LEN + 4 {
            return Err(TransportError::FrameTooLarge(frame.len() - 4));
        }
        self.inboxes[dst].push_back((src, frame));
        self.sent += 1;
        Ok(Receipt(self.sent - 1))
    }

    pub fn deliver_next(&mut self) -> Option<Delivery> {
        let n = self.nodes.len();
        for offset in 0..n {
            let dst = (self.cursor + offset) % n;
            if let Some((src, frame)) = self.inboxes[dst].pop_front() {
                self.cursor = (dst + 1) % n;
                return Some(Delivery {
                    from: self.nodes[src].clone(),
                    to: self.nodes[dst].clone(),
                    frame,
                });
            }
        }
        None
    }

    pub fn is_idle(&self) -> bool {
        self.inboxes.iter().all(VecDeque::is_empty)
    }
}
