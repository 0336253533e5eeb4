//! Slot-based global memory bank.
//!
//! The bank holds up to `max_mem` compressed vectors (z_comp, length m) with
//! a per-slot access counter. Reads retrieve the occupied slot with the
//! highest cosine similarity to the query's compressed code and bump its
//! counter; writes store the mean compressed code of a batch into the first
//! idle slot, or — when the bank is full — evict the least frequently used
//! one. A freshly written slot's counter is set to 1 so it is immediately
//! "in use" (a literal reset to 0 would make it instantly evictable).
//!
//! All tie-breaks (similarity and frequency) resolve to the lowest index so
//! every operation sequence is deterministic.

use serde::{Deserialize, Serialize};

use crate::diffcore::tensor::Tensor;
use crate::error::CoreError;
use crate::idrp::IdrpModel;

/// Guard against zero-norm vectors in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// q·v / (max(‖q‖, ε)·max(‖v‖, ε)); zero vectors yield similarity 0 rather
/// than a division error.
pub fn cosine_sim(q: &[f64], v: &[f64]) -> Result<f64, CoreError> {
    if q.len() != v.len() {
        return Err(CoreError::LengthMismatch {
            context: "cosine_sim",
            expected: q.len(),
            actual: v.len(),
        });
    }
    let mut dot = 0.0;
    let mut qq = 0.0;
    let mut vv = 0.0;
    for (a, b) in q.iter().zip(v) {
        dot += a * b;
        qq += a * a;
        vv += b * b;
    }
    Ok(dot / (qq.sqrt().max(COSINE_EPS) * vv.sqrt().max(COSINE_EPS)))
}

/// Outcome of a retrieval: which slot won, how similar it was, and the
/// reconstruction decoded from the stored code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadResult {
    pub slot: usize,
    pub similarity: f64,
    pub reconstruction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    /// Stored codes, one row per slot; unoccupied rows are all-zero.
    mem: Tensor,
    /// Access counters; slot i is occupied iff aff[i] > 0.
    aff: Vec<u64>,
    max_mem: usize,
    m: usize,
}

impl MemoryBank {
    pub fn new(max_mem: usize, m: usize) -> Result<Self, CoreError> {
        if max_mem == 0 {
            return Err(CoreError::contract("memory bank needs at least one slot"));
        }
        if m == 0 {
            return Err(CoreError::contract("stored vectors need positive length"));
        }
        Ok(Self {
            mem: Tensor::zeros(vec![max_mem, m]),
            aff: vec![0; max_mem],
            max_mem,
            m,
        })
    }

    pub fn max_mem(&self) -> usize {
        self.max_mem
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn aff(&self) -> &[u64] {
        &self.aff
    }

    pub fn slot_vec(&self, i: usize) -> &[f64] {
        self.mem.row(i)
    }

    pub fn is_occupied(&self, i: usize) -> bool {
        self.aff[i] > 0
    }

    pub fn occupied_count(&self) -> usize {
        self.aff.iter().filter(|&&a| a > 0).count()
    }

    /// Write target: lowest idle slot if any, otherwise the lowest-index
    /// slot among those with minimal access count.
    pub fn select_slot(&self) -> usize {
        if let Some(idle) = self.aff.iter().position(|&a| a == 0) {
            return idle;
        }
        let mut best = 0;
        for i in 1..self.max_mem {
            if self.aff[i] < self.aff[best] {
                best = i;
            }
        }
        best
    }

    /// Store a code directly; returns the slot written.
    pub fn write_latent(&mut self, z: &[f64]) -> Result<usize, CoreError> {
        if z.len() != self.m {
            return Err(CoreError::LengthMismatch {
                context: "write_latent",
                expected: self.m,
                actual: z.len(),
            });
        }
        let slot = self.select_slot();
        self.mem.row_mut(slot).copy_from_slice(z);
        self.aff[slot] = 1;
        Ok(slot)
    }

    /// Retrieve the most similar occupied slot and bump its counter;
    /// returns (slot, similarity).
    pub fn read_latent(&mut self, q: &[f64]) -> Result<(usize, f64), CoreError> {
        if q.len() != self.m {
            return Err(CoreError::LengthMismatch {
                context: "read_latent",
                expected: self.m,
                actual: q.len(),
            });
        }
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.max_mem {
            if self.aff[i] == 0 {
                continue;
            }
            let sim = cosine_sim(q, self.mem.row(i))?;
            match best {
                // Strict > keeps the lowest index on ties.
                Some((_, s)) if sim <= s => {}
                _ => best = Some((i, sim)),
            }
        }
        let (slot, sim) = best.ok_or(CoreError::EmptyBank)?;
        self.aff[slot] += 1;
        Ok((slot, sim))
    }

    /// Compress a batch with the model, store the mean code.
    pub fn write(&mut self, model: &IdrpModel, batch: &Tensor) -> Result<usize, CoreError> {
        if model.m() != self.m {
            return Err(CoreError::LengthMismatch {
                context: "bank write: model latent size",
                expected: self.m,
                actual: model.m(),
            });
        }
        if batch.ndim() != 2 || batch.rows() == 0 {
            return Err(CoreError::contract("bank write needs a non-empty batch"));
        }
        let codes = model.compress_batch(batch);
        let n = codes.rows();
        let mut mean = vec![0.0; self.m];
        for i in 0..n {
            for (acc, v) in mean.iter_mut().zip(codes.row(i)) {
                *acc += v;
            }
        }
        for v in &mut mean {
            *v /= n as f64;
        }
        self.write_latent(&mean)
    }

    /// Compress the query with the model, retrieve the best slot, decode it.
    pub fn read(&mut self, model: &IdrpModel, x_query: &[f64]) -> Result<ReadResult, CoreError> {
        if model.m() != self.m {
            return Err(CoreError::LengthMismatch {
                context: "bank read: model latent size",
                expected: self.m,
                actual: model.m(),
            });
        }
        let q = model.compress(x_query)?;
        let (slot, similarity) = self.read_latent(&q)?;
        let reconstruction = model.reconstruct(self.mem.row(slot))?;
        Ok(ReadResult {
            slot,
            similarity,
            reconstruction,
        })
    }
}
