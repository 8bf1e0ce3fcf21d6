//! JSON checkpoints: a vocabulary manifest, the model config and every
//! parameter array grouped by component.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::Geometry;
use crate::error::{Error, Result};
use crate::kg::MultiViewKg;
use crate::model::{KgSizes, Model, ModelConfig};
use crate::nn::StoredArray;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entities: usize,
    pub relations: usize,
    pub views: usize,
    pub d: usize,
    pub geometry: Geometry,
    pub seed: u64,
}

impl Manifest {
    /// Fails unless `kg` has the vocabulary sizes the model was built for.
    pub fn check(&self, kg: &MultiViewKg) -> Result<()> {
        let pairs = [
            ("entities", self.entities, kg.num_entities()),
            ("relation types", self.relations, kg.num_relations()),
            ("views", self.views, kg.num_views()),
        ];
        for (what, expected, found) in pairs {
            if expected != found {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained on {expected} {what}, the KG has {found}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub config: ModelConfig,
    pub semantic_table: Vec<StoredArray>,
    pub setenc_params: Vec<StoredArray>,
    pub encoder_params: Vec<StoredArray>,
    pub decoder_params: Vec<StoredArray>,
}

impl Checkpoint {
    pub fn of(model: &Model) -> Self {
        let store = &model.store;
        Self {
            manifest: Manifest {
                entities: model.sizes.entities,
                relations: model.sizes.relations,
                views: model.sizes.views,
                d: model.config.d,
                geometry: model.config.geometry,
                seed: model.seed,
            },
            config: model.config,
            semantic_table: store.export("semantic_table"),
            setenc_params: store.export("setenc."),
            encoder_params: store.export("encoder."),
            decoder_params: store.export("decoder."),
        }
    }

    /// Rebuilds the model and overwrites every parameter.
    pub fn into_model(self) -> Result<Model> {
        let m = self.manifest;
        if m.d != self.config.d || m.geometry != self.config.geometry {
            return Err(Error::Checkpoint("manifest disagrees with model config".into()));
        }
        let sizes = KgSizes {
            entities: m.entities,
            relations: m.relations,
            views: m.views,
        };
        let mut model = Model::new(self.config, sizes, m.seed)?;
        let groups = [
            &self.semantic_table,
            &self.setenc_params,
            &self.encoder_params,
            &self.decoder_params,
        ];
        let stored: usize = groups.iter().map(|g| g.len()).sum();
        if stored != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {stored} arrays, the model has {}",
                model.store.len()
            )));
        }
        for g in groups {
            model.store.import(g)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::of(model).save(path)
}

/// Loads a model and checks it against the KG it will run on.
pub fn load_model(path: impl AsRef<Path>, kg: &MultiViewKg) -> Result<Model> {
    let ckpt = Checkpoint::read(path)?;
    ckpt.manifest.check(kg)?;
    ckpt.into_model()
}
