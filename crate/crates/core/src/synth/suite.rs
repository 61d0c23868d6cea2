use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SyntheticWorld, FILLERS};
use crate::error::{PolarError, Result};
use crate::images::Split;
use crate::linalg::Rng;
use crate::metrics::{QueryKind, QueryRecord};
use crate::personalize::{fill_template, TEMPLATES};
use crate::retrieval::RetrievalIndex;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub queries: Vec<QueryRecord>,
}

impl EvalSuite {
    pub fn of_kind(&self, kind: QueryKind) -> Vec<QueryRecord> {
        self.queries.iter().filter(|q| q.kind == kind).cloned().collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| PolarError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PolarError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PolarError::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Errors unless every ground-truth id is in `index`.
    pub fn check_against(&self, index: &RetrievalIndex) -> Result<()> {
        for q in &self.queries {
            if q.ground_truth.is_empty() {
                return Err(PolarError::Empty(format!("ground truth of '{}'", q.text)));
            }
            if let Some(id) = q.ground_truth.iter().find(|id| !index.contains(id)) {
                return Err(PolarError::UnknownId(format!("{id} (ground truth of '{}')", q.text)));
            }
        }
        Ok(())
    }
}

impl SyntheticWorld {
    /// The retrieval database: every eval-split image.
    pub fn eval_index(&self) -> RetrievalIndex {
        RetrievalIndex::from_store(&self.images.with_split(Split::Eval))
    }
}

/// Labeled queries for every kind. Context queries place the placeholder
/// (once per concept) before the context phrase; ground truth is the exact
/// label match. General captions are written for one context-only eval
/// image; their ground truth is every context-only image of that context.
pub fn build_eval_suite(world: &SyntheticWorld) -> EvalSuite {
    let eval = world.images.with_split(Split::Eval);
    let mut queries = Vec::new();
    for c in &world.concepts {
        let id = &c.spec.concept_id;
        let placeholder = c.spec.placeholder();
        for x in &world.contexts {
            let gt: Vec<String> = eval
                .iter()
                .filter(|r| r.label.concepts == [id.clone()] && r.label.context.as_deref() == Some(x.phrase.as_str()))
                .map(|r| r.id.clone())
                .collect();
            queries.push(QueryRecord {
                text: format!("an image of {placeholder} {}", x.phrase),
                ground_truth: gt,
                kind: QueryKind::ContextSingle,
                concepts: vec![id.clone()],
                source_image: None,
            });
        }
    }
    for &(a, b) in &world.multi_pairs {
        let (ca, cb) = (&world.concepts[a].spec, &world.concepts[b].spec);
        let pair = [ca.concept_id.clone(), cb.concept_id.clone()];
        let contexts: std::collections::BTreeSet<&str> = eval
            .iter()
            .filter(|r| r.label.concepts == pair)
            .filter_map(|r| r.label.context.as_deref())
            .collect();
        for phrase in contexts {
            let gt = eval
                .iter()
                .filter(|r| r.label.concepts == pair && r.label.context.as_deref() == Some(phrase))
                .map(|r| r.id.clone())
                .collect();
            queries.push(QueryRecord {
                text: format!("an image of {} and {} {phrase}", ca.placeholder(), cb.placeholder()),
                ground_truth: gt,
                kind: QueryKind::ContextMulti,
                concepts: pair.to_vec(),
                source_image: None,
            });
        }
    }
    for c in &world.concepts {
        let id = &c.spec.concept_id;
        queries.push(QueryRecord {
            text: format!("an image of {}", c.spec.placeholder()),
            ground_truth: eval
                .iter()
                .filter(|r| r.label.concepts == [id.clone()])
                .map(|r| r.id.clone())
                .collect(),
            kind: QueryKind::ConceptOnly,
            concepts: vec![id.clone()],
            source_image: None,
        });
    }
    let mut rng = Rng::derive(world.config.seed, "suite/captions");
    for r in eval.iter().filter(|r| r.label.concepts.is_empty()) {
        let Some(phrase) = &r.label.context else { continue };
        let template = TEMPLATES[rng.below(TEMPLATES.len())];
        let filler = FILLERS[rng.below(FILLERS.len() - 1)];
        queries.push(QueryRecord {
            text: format!("{} {phrase}", fill_template(template, filler)),
            ground_truth: eval
                .iter()
                .filter(|o| o.label.concepts.is_empty() && o.label.context == r.label.context)
                .map(|o| o.id.clone())
                .collect(),
            kind: QueryKind::GeneralCaption,
            concepts: vec![],
            source_image: Some(r.id.clone()),
        });
    }
    EvalSuite { queries }
}
