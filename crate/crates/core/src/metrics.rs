//! Ranking metrics, the evaluation driver and the general-caption probe.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{FrozenEncoder, PrefixCache};
use crate::error::{PolarError, Result};
use crate::lora::{merge, ConceptDelta, MergeStrategy, MergedDelta, WeightUpdate};
use crate::retrieval::RetrievalIndex;

fn gt_set<S: AsRef<str>>(gt: &[S]) -> Result<HashSet<&str>> {
    if gt.is_empty() {
        return Err(PolarError::Empty("ground-truth set".into()));
    }
    Ok(gt.iter().map(AsRef::as_ref).collect())
}

/// `1 / rank` of the first ground-truth hit (1-based), or 0 without a hit.
pub fn reciprocal_rank<R: AsRef<str>, G: AsRef<str>>(ranked: &[R], gt: &[G]) -> Result<f64> {
    let gt = gt_set(gt)?;
    Ok(ranked
        .iter()
        .position(|id| gt.contains(id.as_ref()))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64))
}

/// 1 if any ground-truth id is among the first `k`, else 0.
pub fn recall_at_k<R: AsRef<str>, G: AsRef<str>>(ranked: &[R], gt: &[G], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(PolarError::Config("k must be at least 1".into()));
    }
    let gt = gt_set(gt)?;
    Ok(if ranked.iter().take(k).any(|id| gt.contains(id.as_ref())) {
        1.0
    } else {
        0.0
    })
}

/// Non-interpolated AP: mean over ground-truth items of precision at each
/// item's rank; items missing from the ranking add 0.
pub fn average_precision<R: AsRef<str>, G: AsRef<str>>(ranked: &[R], gt: &[G]) -> Result<f64> {
    let gt = gt_set(gt)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().enumerate() {
        if gt.contains(id.as_ref()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / gt.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryKind {
    ContextSingle,
    ContextMulti,
    ConceptOnly,
    GeneralCaption,
}

impl QueryKind {
    pub const ALL: [QueryKind; 4] = [
        QueryKind::ContextSingle,
        QueryKind::ContextMulti,
        QueryKind::ConceptOnly,
        QueryKind::GeneralCaption,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QueryKind::ContextSingle => "context-single",
            QueryKind::ContextMulti => "context-multi",
            QueryKind::ConceptOnly => "concept-only",
            QueryKind::GeneralCaption => "general-caption",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub text: String,
    pub ground_truth: Vec<String>,
    pub kind: QueryKind,
    #[serde(default)]
    pub concepts: Vec<String>,
    /// Image a general caption was written for; used by the caption probe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub text: String,
    pub kind: QueryKind,
    pub concepts: Vec<String>,
    pub reciprocal_rank: f64,
    pub average_precision: f64,
    /// `(k, hit)` for each configured cutoff.
    pub recall: Vec<(usize, f64)>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: QueryKind,
    pub queries: usize,
    pub failed: usize,
    pub mrr: f64,
    pub map: f64,
    pub recall: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_variant: String,
    pub ks: Vec<usize>,
    pub summaries: Vec<KindSummary>,
    /// Mean probe value over the personalized concepts.
    pub caption_recall_at_10: Option<f64>,
    /// Probe value with no update active.
    pub caption_recall_at_10_base: Option<f64>,
    pub queries: Vec<QueryOutcome>,
}

impl EvalReport {
    pub fn summary(&self, kind: QueryKind) -> Option<&KindSummary> {
        self.summaries.iter().find(|s| s.kind == kind)
    }

    pub fn mrr(&self, kind: QueryKind) -> Option<f64> {
        self.summary(kind).map(|s| s.mrr)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned text table, all values ×100.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16} {:>5} {:>7} {:>7}", "kind", "n", "mRR", "mAP");
        for k in &self.ks {
            let _ = write!(out, " {:>7}", format!("r@{k}"));
        }
        out.push('\n');
        for s in &self.summaries {
            let _ = write!(
                out,
                "{:<16} {:>5} {:>7.2} {:>7.2}",
                s.kind.name(),
                s.queries - s.failed,
                s.mrr * 100.0,
                s.map * 100.0
            );
            for (_, r) in &s.recall {
                let _ = write!(out, " {:>7.2}", r * 100.0);
            }
            out.push('\n');
        }
        if let Some(c) = self.caption_recall_at_10 {
            let _ = writeln!(out, "caption_r10 {:.2}", c * 100.0);
        }
        if let Some(c) = self.caption_recall_at_10_base {
            let _ = writeln!(out, "caption_r10_base {:.2}", c * 100.0);
        }
        out
    }
}

/// Caption and the image it was written for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionProbe {
    pub caption: String,
    pub image_id: String,
}

/// Fraction of captions whose source image appears in the top `k` with
/// `deltas` active.
pub fn caption_recall_probe(
    enc: &FrozenEncoder,
    index: &RetrievalIndex,
    deltas: &[&dyn WeightUpdate],
    pairs: &[CaptionProbe],
    k: usize,
) -> Result<f64> {
    caption_recall_cached(enc, &mut PrefixCache::new(), index, deltas, pairs, k)
}

pub(crate) fn caption_recall_cached(
    enc: &FrozenEncoder,
    cache: &mut PrefixCache,
    index: &RetrievalIndex,
    deltas: &[&dyn WeightUpdate],
    pairs: &[CaptionProbe],
    k: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(PolarError::Empty("caption probe pairs".into()));
    }
    let mut rankings: HashMap<&str, Vec<String>> = HashMap::new();
    let mut hits = 0usize;
    for p in pairs {
        if !rankings.contains_key(p.caption.as_str()) {
            let tokens = enc.tokenize(&p.caption)?;
            let emb = enc.encode_cached(cache, &tokens, deltas)?;
            let top = index.rank(&emb, k)?.into_iter().map(|h| h.id).collect();
            rankings.insert(&p.caption, top);
        }
        if rankings[p.caption.as_str()].contains(&p.image_id) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// How deltas of multi-concept queries are combined.
    pub merge: MergeStrategy,
    /// Concept-only queries rank single-concept images only.
    pub concept_only_single: bool,
    /// Run the caption probe for the general-caption queries.
    pub caption_probe: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            merge: MergeStrategy::Add,
            concept_only_single: true,
            caption_probe: true,
        }
    }
}

/// Concept deltas by id.
pub type DeltaStore = BTreeMap<String, ConceptDelta>;

fn score(ranked: &[String], q: &QueryRecord, ks: &[usize]) -> Result<(f64, f64, Vec<(usize, f64)>)> {
    let rr = reciprocal_rank(ranked, &q.ground_truth)?;
    let ap = average_precision(ranked, &q.ground_truth)?;
    let recall = ks
        .iter()
        .map(|&k| recall_at_k(ranked, &q.ground_truth, k).map(|r| (k, r)))
        .collect::<Result<Vec<_>>>()?;
    Ok((rr, ap, recall))
}

/// Aggregates outcomes per kind; failed queries are excluded from means.
pub fn summarize(outcomes: &[QueryOutcome], ks: &[usize]) -> Vec<KindSummary> {
    let mut out = Vec::new();
    for kind in QueryKind::ALL {
        let all: Vec<&QueryOutcome> = outcomes.iter().filter(|o| o.kind == kind).collect();
        if all.is_empty() {
            continue;
        }
        let ok: Vec<&QueryOutcome> = all.iter().copied().filter(|o| o.error.is_none()).collect();
        let n = ok.len().max(1) as f64;
        let mean = |f: &dyn Fn(&QueryOutcome) -> f64| ok.iter().map(|o| f(o)).sum::<f64>() / n;
        out.push(KindSummary {
            kind,
            queries: all.len(),
            failed: all.len() - ok.len(),
            mrr: mean(&|o| o.reciprocal_rank),
            map: mean(&|o| o.average_precision),
            recall: ks
                .iter()
                .enumerate()
                .map(|(i, &k)| (k, mean(&|o| o.recall[i].1)))
                .collect(),
        });
    }
    out
}

enum Active<'a> {
    None,
    One(&'a ConceptDelta),
    Merged(MergedDelta),
}

fn active_for<'a>(q: &QueryRecord, store: &'a DeltaStore, strategy: MergeStrategy) -> Result<Active<'a>> {
    let deltas = q
        .concepts
        .iter()
        .map(|c| store.get(c).ok_or_else(|| PolarError::UnknownId(format!("no delta for concept {c}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(match deltas.len() {
        0 => Active::None,
        1 => Active::One(deltas[0]),
        _ => Active::Merged(merge(&deltas, strategy)?),
    })
}

/// Scores every query with the deltas of its concepts active. Per-query
/// failures are recorded and skipped in the aggregates. General-caption
/// queries name no concept, so they rank with the base encoder; they also
/// feed the caption probe, run once per stored concept and once with no
/// update.
pub fn evaluate(
    enc: &FrozenEncoder,
    index: &RetrievalIndex,
    queries: &[QueryRecord],
    store: &DeltaStore,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(PolarError::Empty("query set".into()));
    }
    let single_index = index.subset(|_, l| l.concepts.len() == 1);
    let mut cache = PrefixCache::new();
    let mut outcomes = Vec::new();
    for q in queries {
        let target = if q.kind == QueryKind::ConceptOnly && opts.concept_only_single {
            &single_index
        } else {
            index
        };
        let result = (|| {
            let active = active_for(q, store, opts.merge)?;
            let deltas: Vec<&dyn WeightUpdate> = match &active {
                Active::None => vec![],
                Active::One(d) => vec![*d],
                Active::Merged(m) => vec![m],
            };
            let tokens = enc.tokenize(&q.text)?;
            let emb = enc.encode_cached(&mut cache, &tokens, &deltas)?;
            let ranked: Vec<String> = target.rank(&emb, target.len())?.into_iter().map(|h| h.id).collect();
            score(&ranked, q, &opts.ks)
        })();
        outcomes.push(match result {
            Ok((rr, ap, recall)) => QueryOutcome {
                text: q.text.clone(),
                kind: q.kind,
                concepts: q.concepts.clone(),
                reciprocal_rank: rr,
                average_precision: ap,
                recall,
                error: None,
            },
            Err(e) => QueryOutcome {
                text: q.text.clone(),
                kind: q.kind,
                concepts: q.concepts.clone(),
                reciprocal_rank: 0.0,
                average_precision: 0.0,
                recall: opts.ks.iter().map(|&k| (k, 0.0)).collect(),
                error: Some(e.to_string()),
            },
        });
    }

    let probes: Vec<CaptionProbe> = queries
        .iter()
        .filter(|q| q.kind == QueryKind::GeneralCaption)
        .filter_map(|q| {
            q.source_image.as_ref().or(q.ground_truth.first()).map(|id| CaptionProbe {
                caption: q.text.clone(),
                image_id: id.clone(),
            })
        })
        .collect();
    let (mut probe, mut probe_base) = (None, None);
    if opts.caption_probe && !probes.is_empty() {
        probe_base = Some(caption_recall_cached(enc, &mut cache, index, &[], &probes, 10)?);
        if !store.is_empty() {
            let mut sum = 0.0;
            for d in store.values() {
                sum += caption_recall_cached(enc, &mut cache, index, &[d], &probes, 10)?;
            }
            probe = Some(sum / store.len() as f64);
        }
    }

    Ok(EvalReport {
        ap_variant: "non-interpolated".into(),
        ks: opts.ks.clone(),
        summaries: summarize(&outcomes, &opts.ks),
        caption_recall_at_10: probe,
        caption_recall_at_10_base: probe_base,
        queries: outcomes,
    })
}

/// [`evaluate`] with every query run on the base encoder, ignoring the
/// concepts it names.
pub fn evaluate_base(
    enc: &FrozenEncoder,
    index: &RetrievalIndex,
    queries: &[QueryRecord],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let plain: Vec<QueryRecord> = queries
        .iter()
        .map(|q| QueryRecord {
            concepts: Vec::new(),
            ..q.clone()
        })
        .collect();
    evaluate(enc, index, &plain, &DeltaStore::new(), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reciprocal_rank_cases() {
        assert_eq!(reciprocal_rank(&["a", "b"], &["a"]).unwrap(), 1.0);
        assert_eq!(reciprocal_rank(&["x", "a", "y", "b"], &["a", "b"]).unwrap(), 0.5);
        assert_eq!(reciprocal_rank(&["x", "y"], &["a"]).unwrap(), 0.0);
        assert!(reciprocal_rank(&["x"], &[] as &[&str]).is_err());
    }

    #[test]
    fn recall_boundaries() {
        let r = ["x", "y", "a"];
        assert_eq!(recall_at_k(&r, &["a"], 3).unwrap(), 1.0);
        assert_eq!(recall_at_k(&r, &["a"], 2).unwrap(), 0.0);
        assert!(recall_at_k(&r, &["a"], 0).is_err());
    }

    #[test]
    fn average_precision_cases() {
        assert_eq!(average_precision(&["a", "b", "c"], &["a", "b"]).unwrap(), 1.0);
        assert_eq!(average_precision(&["x", "a"], &["a"]).unwrap(), 0.5);
        let ap = average_precision(&["a", "x", "b"], &["a", "b"]).unwrap();
        assert!((ap - 0.833_333_333).abs() < 1e-6);
        assert_eq!(average_precision(&["x"], &["a", "b"]).unwrap(), 0.0);
    }

    #[test]
    fn summary_excludes_failures() {
        let mk = |rr: f64, err: bool| QueryOutcome {
            text: String::new(),
            kind: QueryKind::ContextSingle,
            concepts: vec![],
            reciprocal_rank: rr,
            average_precision: rr,
            recall: vec![(1, rr)],
            error: err.then(|| "boom".into()),
        };
        let s = summarize(&[mk(1.0, false), mk(0.5, false), mk(0.0, true)], &[1]);
        assert_eq!(s[0].queries, 3);
        assert_eq!(s[0].failed, 1);
        assert_eq!(s[0].mrr, 0.75);
    }
}
