//! Memory embedding: a forward LSTM over the per-batch retrieved sentence
//! embeddings, oldest batch first, from zero initial state. The final
//! hidden state is the memory vector handed to the tagger.

use crate::error::{Error, Result};
use crate::numerics::{NodeId, ParamStore, Tape, Tensor};
use crate::util::Rng;

pub const MEMORY_HIDDEN_DEFAULT: usize = 128;

#[derive(Debug, Clone)]
pub struct MemoryNetwork {
    lstm: crate::encoder::LstmParams,
}

impl MemoryNetwork {
    pub fn register(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> MemoryNetwork {
        MemoryNetwork {
            lstm: crate::encoder::LstmParams::register(store, "memory", input_dim, hidden, rng),
        }
    }

    pub fn attach(store: &ParamStore, input_dim: usize, hidden: usize) -> Result<MemoryNetwork> {
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Container(format!("missing parameter `{name}`")))
        };
        Ok(MemoryNetwork {
            lstm: crate::encoder::LstmParams {
                gates: get("memory.gates")?,
                bias: get("memory.bias")?,
                input_dim,
                hidden,
            },
        })
    }

    pub fn input_dim(&self) -> usize {
        self.lstm.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden
    }

    /// Runs the LSTM over the retrieved sequence (already ascending by batch
    /// ordinal) and returns the final hidden state, or `None` for an empty
    /// sequence — the first batch has nothing to remember.
    pub fn memory_embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sequence: &[Vec<f64>],
    ) -> Result<Option<NodeId>> {
        Ok(self
            .memory_states(tape, store, sequence)?
            .map(|states| *states.last().expect("non-empty by construction")))
    }

    /// Full hidden trajectory; exposed so the recurrence itself is testable.
    pub fn memory_states(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sequence: &[Vec<f64>],
    ) -> Result<Option<Vec<NodeId>>> {
        if sequence.is_empty() {
            return Ok(None);
        }
        let mut inputs = Vec::with_capacity(sequence.len());
        for v in sequence {
            if v.len() != self.lstm.input_dim {
                return Err(Error::Shape {
                    op: "memory_embed",
                    detail: format!(
                        "input width {}, expected {}",
                        v.len(),
                        self.lstm.input_dim
                    ),
                });
            }
            inputs.push(tape.input(Tensor::row_vector(v.clone())));
        }
        self.lstm.run(tape, store, &inputs).map(Some)
    }
}
