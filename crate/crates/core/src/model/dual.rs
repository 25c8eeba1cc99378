use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use super::{Encoder, EntityEmbeddingTable, TransformerConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntityModel {
    /// Trainable embedding per qid.
    E,
    /// Transformer over the entity's primary description.
    F,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EntityTower<T> {
    Featurized(Encoder<T>),
    Embedding(EntityEmbeddingTable<T>),
}

/// Mention tower plus entity tower; the two share no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder<T> {
    pub mention: Encoder<T>,
    pub entity: EntityTower<T>,
}

pub const DUAL_ENCODER_KIND: &str = "dual_encoder";

impl<T: Scalar> DualEncoder<T> {
    /// Model F: two independently initialized transformer towers.
    pub fn new_featurized(mention: TransformerConfig, entity: TransformerConfig) -> Result<Self> {
        if mention.d_enc != entity.d_enc {
            return Err(Error::Config(format!(
                "mention d_enc {} differs from entity d_enc {}",
                mention.d_enc, entity.d_enc
            )));
        }
        Ok(DualEncoder {
            mention: Encoder::new(mention)?,
            entity: EntityTower::Featurized(Encoder::new(entity)?),
        })
    }

    /// Model E: a transformer mention tower and one table row per qid.
    pub fn new_embedding(
        mention: TransformerConfig,
        qids: impl IntoIterator<Item = String>,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        let d_enc = mention.d_enc;
        Ok(DualEncoder {
            mention: Encoder::new(mention)?,
            entity: EntityTower::Embedding(EntityEmbeddingTable::new(qids, d_enc, init_std, seed)),
        })
    }

    pub fn model(&self) -> EntityModel {
        match self.entity {
            EntityTower::Featurized(_) => EntityModel::F,
            EntityTower::Embedding(_) => EntityModel::E,
        }
    }

    pub fn entity_encoder(&self) -> Option<&Encoder<T>> {
        match &self.entity {
            EntityTower::Featurized(e) => Some(e),
            EntityTower::Embedding(_) => None,
        }
    }

    pub fn d_enc(&self) -> usize {
        self.mention.config.d_enc
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let entity_meta = match &self.entity {
            EntityTower::Featurized(e) => serde_json::to_value(&e.config).expect("config"),
            EntityTower::Embedding(t) => serde_json::json!({
                "qids": t.qids(),
                "d_enc": t.d_enc(),
                "seed": t.seed,
            }),
        };
        let meta = serde_json::json!({
            "model": self.model(),
            "mention": self.mention.config,
            "entity": entity_meta,
        });
        let mut ckpt = Checkpoint::new(DUAL_ENCODER_KIND, meta);
        for (name, t) in self.mention.tensors() {
            ckpt.push(format!("mention.{name}"), t.to_owned());
        }
        match &self.entity {
            EntityTower::Featurized(e) => {
                for (name, t) in e.tensors() {
                    ckpt.push(format!("entity.{name}"), t.to_owned());
                }
            }
            EntityTower::Embedding(t) => ckpt.push("entity.table", t.vectors.clone().into_dyn()),
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        if ckpt.kind != DUAL_ENCODER_KIND {
            return Err(Error::Checkpoint(format!("expected {DUAL_ENCODER_KIND}, found {}", ckpt.kind)));
        }
        let model: EntityModel = ckpt.meta_field("model")?;
        let mention_cfg: TransformerConfig = ckpt.meta_field("mention")?;
        let entity_meta: serde_json::Value = ckpt.meta_field("entity")?;
        let mut store = ckpt.into_store();
        let mention = Encoder::from_tensors(mention_cfg, &mut store, "mention.")?;
        let bad = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        let entity = match model {
            EntityModel::F => {
                let cfg: TransformerConfig = serde_json::from_value(entity_meta).map_err(bad)?;
                EntityTower::Featurized(Encoder::from_tensors(cfg, &mut store, "entity.")?)
            }
            EntityModel::E => {
                #[derive(Deserialize)]
                struct TableMeta {
                    qids: Vec<String>,
                    seed: u64,
                }
                let m: TableMeta = serde_json::from_value(entity_meta).map_err(bad)?;
                EntityTower::Embedding(EntityEmbeddingTable::from_tensors(
                    m.qids,
                    m.seed,
                    &mut store,
                    "entity.table",
                )?)
            }
        };
        if let Some(extra) = store.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(DualEncoder { mention, entity })
    }

    /// All-zero copy, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let entity = match &self.entity {
            EntityTower::Featurized(e) => EntityTower::Featurized(e.zeros_like()),
            EntityTower::Embedding(t) => {
                let mut z = t.clone();
                z.vectors.fill(T::zero());
                EntityTower::Embedding(z)
            }
        };
        DualEncoder {
            mention: self.mention.zeros_like(),
            entity,
        }
    }

    /// Every trainable tensor, named as in checkpoints.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out: Vec<_> = self
            .mention
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("mention.{n}"), t))
            .collect();
        match &self.entity {
            EntityTower::Featurized(e) => {
                out.extend(e.tensors().into_iter().map(|(n, t)| (format!("entity.{n}"), t)))
            }
            EntityTower::Embedding(t) => out.push(("entity.table".into(), t.vectors.view().into_dyn())),
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out: Vec<_> = self
            .mention
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("mention.{n}"), t))
            .collect();
        match &mut self.entity {
            EntityTower::Featurized(e) => out.extend(
                e.tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("entity.{n}"), t)),
            ),
            EntityTower::Embedding(t) => {
                out.push(("entity.table".into(), t.vectors.view_mut().into_dyn()))
            }
        }
        out
    }

    /// Starts the entity tower from the mention tower's weights, as when both
    /// towers load one pretrained checkpoint. A no-op for Model E.
    pub fn share_initialization(&mut self) {
        if let EntityTower::Featurized(ent) = &mut self.entity {
            ent.copy_compatible_from(&self.mention);
        }
    }

    /// Entity-side encodings of table rows, for Model E.
    pub fn table_rows(&self) -> Option<&Array2<T>> {
        match &self.entity {
            EntityTower::Embedding(t) => Some(&t.vectors),
            EntityTower::Featurized(_) => None,
        }
    }
}
