//! Order-blind baseline: mean of `item ‖ action` embeddings over the
//! visible window, concatenated with the candidate item embedding, then an
//! MLP and a sigmoid.

use super::{ModelConfig, Trainable};
use crate::error::{Error, Result};
use crate::inputs::encode::visible_events;
use crate::inputs::Sample;
use crate::rng::substream;
use crate::tensors::{Mlp, NodeId, ParamId, ParamStore, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct SumPooling {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub item: ParamId,
    pub action: ParamId,
    pub head: Mlp,
}

impl SumPooling {
    /// Uses the vocabulary, embedding widths, window length, head width
    /// and init seed of `config`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = substream(config.init_seed, "sum_pooling/init");
        let s = config.init_std;
        let item = store.normal("emb.item", &[config.n_items, config.item_emb_dim], s, &mut rng);
        let action = store.normal("emb.action", &[config.n_actions, config.action_emb_dim], s, &mut rng);
        let width = 2 * config.item_emb_dim + config.action_emb_dim;
        let head = Mlp::new(&mut store, "head", width, config.head_hidden, 1, &mut rng);
        Ok(SumPooling {
            config,
            store,
            item,
            action,
            head,
        })
    }

    /// Mean pooled `item ‖ action` row, zeros for an empty window.
    pub fn pooled(&self, tape: &mut Tape, sample: &Sample) -> Result<NodeId> {
        let c = &self.config;
        let events = visible_events(&sample.events, sample.candidate.timestamp, c.seq_len);
        let width = c.item_emb_dim + c.action_emb_dim;
        if events.is_empty() {
            return Ok(tape.leaf(Tensor::zeros(&[1, width])));
        }
        let mut items = Vec::with_capacity(events.len());
        let mut actions = Vec::with_capacity(events.len());
        for e in events {
            if e.item_id as usize >= c.n_items {
                return Err(Error::Lookup { table: "item", id: e.item_id.into(), size: c.n_items });
            }
            if e.action_type as usize >= c.n_actions {
                return Err(Error::Lookup { table: "action", id: e.action_type.into(), size: c.n_actions });
            }
            items.push(Some(e.item_id as usize));
            actions.push(Some(e.action_type as usize));
        }
        let ei = tape.embed(self.item, items)?;
        let ea = tape.embed(self.action, actions)?;
        let tokens = tape.concat_cols(&[ei, ea])?;
        let n = events.len();
        let w = tape.leaf(Tensor::filled(&[1, n], 1.0 / n as f64));
        tape.matmul(w, tokens)
    }
}

impl Trainable for SumPooling {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn logit_node(&self, tape: &mut Tape, sample: &Sample) -> Result<NodeId> {
        let pooled = self.pooled(tape, sample)?;
        let id = sample.candidate.item_id as usize;
        if id >= self.config.n_items {
            return Err(Error::Lookup { table: "item", id: id as u64, size: self.config.n_items });
        }
        let target = tape.embed(self.item, vec![Some(id)])?;
        let x = tape.concat_cols(&[pooled, target])?;
        self.head.forward(tape, x)
    }
}
