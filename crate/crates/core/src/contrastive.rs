//! InfoNCE machinery: fixed-capacity FIFO queues of past key embeddings and
//! the negative-selection policy.
//!
//! Patch-level queues are scoped to one anatomical region each, so a push for
//! region `j` can never surface as a negative for region `j'`; the graph level
//! uses a single queue. Entries carry the subject they came from, and
//! negative assembly excludes the anchor's own entries — negatives are other
//! subjects' keys at the same region (or other subjects' graphs). Queue
//! entries are detached values: gradients flow only through the query (and
//! positive key) inside [`Tape::info_nce`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    /// Ring storage, `capacity * dim`.
    data: Vec<f32>,
    /// Source subject of each slot.
    tags: Vec<u32>,
    /// Next write slot.
    cursor: usize,
    fill: usize,
    /// Region index this queue serves, or "graph".
    scope: String,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize, scope: impl Into<String>) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::config(format!(
                "queue needs positive capacity/dim, got {capacity}/{dim}"
            )));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            tags: vec![0; capacity],
            cursor: 0,
            fill: 0,
            scope: scope.into(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// Append one embedding, evicting the oldest entry once full.
    pub fn push(&mut self, v: &[f32], subject: u32) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape(
                "queue_push",
                format!("entry len {} vs queue dim {}", v.len(), self.dim),
            ));
        }
        let start = self.cursor * self.dim;
        self.data[start..start + self.dim].copy_from_slice(v);
        self.tags[self.cursor] = subject;
        self.cursor = (self.cursor + 1) % self.capacity;
        self.fill = (self.fill + 1).min(self.capacity);
        Ok(())
    }

    /// Push every row of a `[B, F]` key matrix with its subject tag.
    pub fn push_rows(&mut self, keys: &Tensor, subjects: &[u32]) -> Result<()> {
        if keys.rank() != 2 || keys.dims()[1] != self.dim || keys.dims()[0] != subjects.len() {
            return Err(Error::shape(
                "queue_push",
                format!("keys {:?} with {} tags vs queue dim {}", keys.dims(), subjects.len(), self.dim),
            ));
        }
        for (row, &tag) in keys.data().chunks(self.dim).zip(subjects) {
            self.push(row, tag)?;
        }
        Ok(())
    }

    /// Slot indices in FIFO order (oldest first).
    fn fifo_slots(&self) -> impl Iterator<Item = usize> + '_ {
        let oldest = (self.cursor + self.capacity - self.fill) % self.capacity;
        (0..self.fill).map(move |i| (oldest + i) % self.capacity)
    }

    /// Current contents, oldest first, as `[fill, F]`; `None` when empty.
    pub fn snapshot(&self) -> Option<Tensor> {
        self.snapshot_filtered(|_| true)
    }

    /// Contents from every subject except `anchor`, oldest first.
    pub fn snapshot_excluding(&self, anchor: u32) -> Option<Tensor> {
        self.snapshot_filtered(|tag| tag != anchor)
    }

    fn snapshot_filtered(&self, keep: impl Fn(u32) -> bool) -> Option<Tensor> {
        let mut out = Vec::new();
        let mut rows = 0usize;
        for slot in self.fifo_slots() {
            if keep(self.tags[slot]) {
                out.extend_from_slice(&self.data[slot * self.dim..(slot + 1) * self.dim]);
                rows += 1;
            }
        }
        if rows == 0 {
            return None;
        }
        Tensor::new(&[rows, self.dim], out).ok()
    }

    /// Ring-layout view for checkpoint serialization.
    pub fn raw(&self) -> (&[f32], &[u32], usize, usize) {
        (&self.data, &self.tags, self.cursor, self.fill)
    }

    pub fn from_raw(
        capacity: usize,
        dim: usize,
        scope: impl Into<String>,
        data: Vec<f32>,
        tags: Vec<u32>,
        cursor: usize,
        fill: usize,
    ) -> Result<Self> {
        if data.len() != capacity * dim
            || tags.len() != capacity
            || cursor >= capacity.max(1)
            || fill > capacity
        {
            return Err(Error::format(format!(
                "queue state inconsistent: len {} tags {} cap {capacity} dim {dim} cursor {cursor} fill {fill}",
                data.len(),
                tags.len()
            )));
        }
        Ok(NegativeQueue { capacity, dim, data, tags, cursor, fill, scope: scope.into() })
    }
}

/// Negatives for one anchor: the queue's other-subject entries when any
/// exist, otherwise the other in-batch keys. A single-subject batch with an
/// empty queue has no negatives anywhere and is an error.
pub fn negatives_for(
    queue: &NegativeQueue,
    anchor_subject: u32,
    in_batch_keys: &Tensor,
    anchor_row: usize,
) -> Result<Tensor> {
    if let Some(snap) = queue.snapshot_excluding(anchor_subject) {
        return Ok(snap);
    }
    let (b, f) = (in_batch_keys.dims()[0], in_batch_keys.dims()[1]);
    if b < 2 {
        return Err(Error::config(format!(
            "queue '{}' holds no other-subject keys and the batch has a single subject: no negatives available",
            queue.scope()
        )));
    }
    let mut out = Vec::with_capacity((b - 1) * f);
    for row in 0..b {
        if row != anchor_row {
            out.extend_from_slice(&in_batch_keys.data()[row * f..(row + 1) * f]);
        }
    }
    Tensor::new(&[b - 1, f], out)
}

/// Plain-value InfoNCE (no gradients): the spec-level scalar operation.
pub fn info_nce_value(q: &Tensor, k_plus: &Tensor, negatives: &Tensor, tau: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let qv = tape.constant(q);
    let kv = tape.constant(k_plus);
    let loss = tape.info_nce(qv, kv, negatives, tau)?;
    tape.value(loss).item()
}
