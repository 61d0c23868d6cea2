use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Concept, Context, PretrainCaption, SyntheticWorld, WorldConfig};
use crate::container;
use crate::error::{PolarError, Result};
use crate::images::{ImageLabel, ImageStore};
use crate::lora::ConceptSpec;

const KIND: &str = "synthetic_world";

#[derive(Serialize, Deserialize)]
struct ImageEntry {
    id: String,
    label: ImageLabel,
}

/// Blob layout: concept latents, context latents, then image embeddings in
/// ascending id order, each `d_out` floats.
#[derive(Serialize, Deserialize)]
struct WorldHeader {
    config: WorldConfig,
    vocab: Vec<String>,
    concepts: Vec<ConceptSpec>,
    contexts: Vec<String>,
    multi_pairs: Vec<(usize, usize)>,
    images: Vec<ImageEntry>,
    pretrain_captions: Vec<PretrainCaption>,
}

impl SyntheticWorld {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let d = self.config.d_out;
        let mut blob = Vec::with_capacity((self.concepts.len() + self.contexts.len() + self.images.len()) * d);
        for c in &self.concepts {
            blob.extend_from_slice(&c.latent);
        }
        for x in &self.contexts {
            blob.extend_from_slice(&x.latent);
        }
        let mut images = Vec::with_capacity(self.images.len());
        for r in self.images.iter() {
            blob.extend_from_slice(&r.embedding);
            images.push(ImageEntry {
                id: r.id.clone(),
                label: r.label.clone(),
            });
        }
        let header = WorldHeader {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            concepts: self.concepts.iter().map(|c| c.spec.clone()).collect(),
            contexts: self.contexts.iter().map(|x| x.phrase.clone()).collect(),
            multi_pairs: self.multi_pairs.clone(),
            images,
            pretrain_captions: self.pretrain_captions.clone(),
        };
        container::write(path.as_ref(), KIND, &header, &blob)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (h, blob): (WorldHeader, Vec<f32>) = container::read(path, KIND)?;
        let corrupt = |reason: String| PolarError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let d = h.config.d_out;
        let expected = (h.concepts.len() + h.contexts.len() + h.images.len()) * d;
        if blob.len() != expected {
            return Err(corrupt(format!("payload has {} floats, expected {expected}", blob.len())));
        }
        let mut chunks = blob.chunks_exact(d.max(1)).map(<[f32]>::to_vec);
        let concepts = h
            .concepts
            .into_iter()
            .map(|spec| Concept {
                spec,
                latent: chunks.next().expect("length checked"),
            })
            .collect();
        let contexts = h
            .contexts
            .into_iter()
            .map(|phrase| Context {
                phrase,
                latent: chunks.next().expect("length checked"),
            })
            .collect();
        let mut images = ImageStore::new(d);
        for e in h.images {
            let emb = chunks.next().expect("length checked");
            images
                .insert_unit(e.id, emb, e.label)
                .map_err(|err| corrupt(err.to_string()))?;
        }
        Ok(SyntheticWorld {
            config: h.config,
            vocab: h.vocab,
            concepts,
            contexts,
            multi_pairs: h.multi_pairs,
            images,
            pretrain_captions: h.pretrain_captions,
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::synth::{generate_world, SyntheticWorld, WorldConfig};

    #[test]
    fn world_file_round_trip() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        w.save(&p).unwrap();
        assert_eq!(SyntheticWorld::load(&p).unwrap(), w);
        let q = dir.path().join("w2.bin");
        SyntheticWorld::load(&p).unwrap().save(&q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }
}
