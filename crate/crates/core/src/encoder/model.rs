use std::collections::HashMap;
use std::sync::Arc;

use super::config::{EncoderConfig, Tokenizer};
use super::site::{Site, SiteAddress};
use super::weights::{LayerParam, ParamKey, Weights};
use crate::error::{PolarError, Result};
use crate::linalg::{Matrix, NodeId, Tape};
use crate::lora::{UpdateRef, WeightUpdate};

/// The pretrained text tower. Weights never change after construction;
/// personalization happens through [`WeightUpdate`]s applied at forward time.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    weights: Weights,
    tokenizer: Tokenizer,
    fingerprint: String,
}

/// Maps encoder tensors onto tape leaves, creating each leaf on first use.
pub(crate) struct Binding {
    trainable: bool,
    nodes: HashMap<ParamKey, NodeId>,
}

impl Binding {
    pub(crate) fn frozen() -> Self {
        Self {
            trainable: false,
            nodes: HashMap::new(),
        }
    }

    pub(crate) fn trainable() -> Self {
        Self {
            trainable: true,
            nodes: HashMap::new(),
        }
    }

    fn node(&mut self, tape: &mut Tape, weights: &Weights, key: ParamKey) -> NodeId {
        let trainable = self.trainable;
        *self
            .nodes
            .entry(key)
            .or_insert_with(|| tape.leaf(Arc::clone(weights.get(key)), trainable))
    }

    pub(crate) fn bound(&self) -> impl Iterator<Item = (ParamKey, NodeId)> + '_ {
        self.nodes.iter().map(|(k, v)| (*k, *v))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum BoundKind {
    LowRank { a: NodeId, b: NodeId },
    Dense(NodeId),
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BoundUpdate {
    pub addr: SiteAddress,
    pub kind: BoundKind,
}

pub(crate) enum Input<'a> {
    /// Token ids, optionally with rows of the embedded sequence replaced by
    /// the rows of another node (learned pseudo-token embeddings).
    Tokens {
        tokens: &'a [u32],
        replace: Option<(Vec<usize>, NodeId)>,
    },
    /// Resume from the input to zero-based layer `layer` (`n_layers` means
    /// the final residual row).
    Hidden {
        layer: usize,
        hidden: NodeId,
        seq_len: usize,
    },
}

pub(crate) struct ForwardOut {
    pub output: NodeId,
    pub layer_inputs: Vec<NodeId>,
    pub final_hidden: NodeId,
    pub attention: Vec<NodeId>,
}

/// Per-layer attention probabilities, `heads × query_rows × keys`.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub layer: usize,
    pub heads: usize,
    pub query_rows: usize,
    pub keys: usize,
    pub probs: Vec<f32>,
}

#[derive(Clone, Debug)]
struct CachedPrefix {
    layer_inputs: Vec<Arc<Matrix>>,
    final_hidden: Arc<Matrix>,
    output: Vec<f32>,
}

/// Memo of base-encoder activations per token sequence. Updates only touch
/// layers at or above their lowest site, so everything below can be reused.
#[derive(Debug, Default)]
pub struct PrefixCache {
    fingerprint: Option<String>,
    entries: HashMap<Vec<u32>, CachedPrefix>,
}

impl PrefixCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl FrozenEncoder {
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config);
        Self::from_weights(config, weights)
    }

    pub(crate) fn from_weights(config: EncoderConfig, weights: Weights) -> Result<Self> {
        let tokenizer = Tokenizer::new(&config)?;
        let fingerprint = weights.fingerprint(&config);
        Ok(Self {
            config,
            weights,
            tokenizer,
            fingerprint,
        })
    }

    /// Mutable weights for training; the fingerprint is stale until
    /// [`refresh_fingerprint`](Self::refresh_fingerprint) runs.
    pub(crate) fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub(crate) fn refresh_fingerprint(&mut self) {
        self.fingerprint = self.weights.fingerprint(&self.config);
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        self.tokenizer.tokenize(text)
    }

    /// Shape `(m, n)` of the weight addressed by `addr`.
    pub fn site_shape(&self, addr: SiteAddress) -> Result<(usize, usize)> {
        addr.validate(self.config.n_layers)?;
        Ok(self.weights.get(ParamKey::for_site(addr)).shape())
    }

    /// Copy of this encoder with `dw` added to the weight at `addr`.
    pub fn with_weight_added(&self, addr: SiteAddress, dw: &Matrix) -> Result<FrozenEncoder> {
        addr.validate(self.config.n_layers)?;
        let mut weights = self.weights.clone();
        let key = ParamKey::for_site(addr);
        let updated = weights.get(key).add(dw)?;
        *weights.get_mut(key) = updated;
        FrozenEncoder::from_weights(self.config.clone(), weights)
    }

    /// Text embedding at the EOS position, before normalization.
    pub fn encode_text(&self, tokens: &[u32], deltas: &[&dyn WeightUpdate]) -> Result<Vec<f32>> {
        self.check_updates(deltas)?;
        let mut tape = Tape::new();
        let updates = bind_updates(&mut tape, deltas);
        let mut binding = Binding::frozen();
        let out = self.forward(
            &mut tape,
            &mut binding,
            Input::Tokens {
                tokens,
                replace: None,
            },
            &updates,
        )?;
        Ok(tape.value(out.output).data().to_vec())
    }

    pub fn encode(&self, text: &str, deltas: &[&dyn WeightUpdate]) -> Result<Vec<f32>> {
        let tokens = self.tokenize(text)?;
        self.encode_text(&tokens, deltas)
    }

    /// Same result as [`encode_text`](Self::encode_text), reusing base
    /// activations below the lowest updated layer.
    pub fn encode_cached(
        &self,
        cache: &mut PrefixCache,
        tokens: &[u32],
        deltas: &[&dyn WeightUpdate],
    ) -> Result<Vec<f32>> {
        self.check_updates(deltas)?;
        let prefix = self.prefix(cache, tokens)?;
        let start = deltas
            .iter()
            .flat_map(|d| d.site_updates())
            .map(|(addr, _)| addr.first_layer(self.config.n_layers))
            .min();
        let Some(start) = start else {
            return Ok(prefix.output);
        };
        let mut tape = Tape::new();
        let hidden = if start < self.config.n_layers {
            tape.leaf(Arc::clone(&prefix.layer_inputs[start]), false)
        } else {
            tape.leaf(Arc::clone(&prefix.final_hidden), false)
        };
        let updates = bind_updates(&mut tape, deltas);
        let mut binding = Binding::frozen();
        let out = self.forward(
            &mut tape,
            &mut binding,
            Input::Hidden {
                layer: start,
                hidden,
                seq_len: tokens.len(),
            },
            &updates,
        )?;
        Ok(tape.value(out.output).data().to_vec())
    }

    /// Base activation entering zero-based layer `start` (`n_layers` gives
    /// the final residual row).
    pub(crate) fn prefix_hidden(&self, cache: &mut PrefixCache, tokens: &[u32], start: usize) -> Result<Arc<Matrix>> {
        let p = self.prefix(cache, tokens)?;
        Ok(if start < self.config.n_layers {
            Arc::clone(&p.layer_inputs[start])
        } else {
            Arc::clone(&p.final_hidden)
        })
    }

    fn prefix(&self, cache: &mut PrefixCache, tokens: &[u32]) -> Result<CachedPrefix> {
        if cache.fingerprint.as_deref() != Some(self.fingerprint.as_str()) {
            cache.entries.clear();
            cache.fingerprint = Some(self.fingerprint.clone());
        }
        if let Some(p) = cache.entries.get(tokens) {
            return Ok(p.clone());
        }
        let mut tape = Tape::new();
        let mut binding = Binding::frozen();
        let out = self.forward(
            &mut tape,
            &mut binding,
            Input::Tokens {
                tokens,
                replace: None,
            },
            &[],
        )?;
        let entry = CachedPrefix {
            layer_inputs: out.layer_inputs.iter().map(|&n| tape.shared_value(n)).collect(),
            final_hidden: tape.shared_value(out.final_hidden),
            output: tape.value(out.output).data().to_vec(),
        };
        cache.entries.insert(tokens.to_vec(), entry.clone());
        Ok(entry)
    }

    /// Attention probabilities of every layer (the last layer only attends
    /// from the pooled EOS row).
    pub fn attention_maps(&self, tokens: &[u32], deltas: &[&dyn WeightUpdate]) -> Result<Vec<AttentionMap>> {
        self.check_updates(deltas)?;
        let mut tape = Tape::new();
        let updates = bind_updates(&mut tape, deltas);
        let mut binding = Binding::frozen();
        let out = self.forward(
            &mut tape,
            &mut binding,
            Input::Tokens {
                tokens,
                replace: None,
            },
            &updates,
        )?;
        Ok(out
            .attention
            .iter()
            .enumerate()
            .map(|(layer, &node)| {
                let (probs, heads, query_rows, keys) = tape.attention_probs(node).expect("attention node");
                AttentionMap {
                    layer: layer + 1,
                    heads,
                    query_rows,
                    keys,
                    probs: probs.to_vec(),
                }
            })
            .collect())
    }

    /// Validates fingerprints, site addresses and factor shapes.
    pub fn check_updates(&self, deltas: &[&dyn WeightUpdate]) -> Result<()> {
        for d in deltas {
            if d.encoder_fingerprint() != self.fingerprint {
                return Err(PolarError::Fingerprint {
                    expected: self.fingerprint.clone(),
                    found: d.encoder_fingerprint().to_string(),
                });
            }
            for (addr, update) in d.site_updates() {
                let (m, n) = self.site_shape(addr)?;
                let ok = match update {
                    UpdateRef::LowRank { a, b } => {
                        a.cols() == n && b.rows() == m && a.rows() == b.cols()
                    }
                    UpdateRef::Dense(dw) => dw.shape() == (m, n),
                };
                if !ok {
                    return Err(PolarError::shape(format!("update at {addr} does not fit a {m}x{n} weight")));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        binding: &mut Binding,
        input: Input<'_>,
        updates: &[BoundUpdate],
    ) -> Result<ForwardOut> {
        let cfg = &self.config;
        let w = &self.weights;
        let (mut h, start, seq_len) = match input {
            Input::Tokens { tokens, replace } => {
                if tokens.is_empty() {
                    return Err(PolarError::Empty("token sequence".into()));
                }
                if tokens.len() > cfg.max_seq {
                    return Err(PolarError::TooLong {
                        len: tokens.len(),
                        max: cfg.max_seq,
                    });
                }
                if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab.len()) {
                    return Err(PolarError::UnknownId(format!("token id {bad}")));
                }
                let emb = binding.node(tape, w, ParamKey::TokenEmbedding);
                let mut x = tape.select_rows(emb, tokens.iter().map(|&t| t as usize).collect())?;
                if let Some((positions, rows)) = replace {
                    x = tape.set_rows(x, rows, positions)?;
                }
                let pos = binding.node(tape, w, ParamKey::PositionEmbedding);
                let p = tape.select_rows(pos, (0..tokens.len()).collect())?;
                (tape.add(x, p)?, 0, tokens.len())
            }
            Input::Hidden { layer, hidden, seq_len } => (hidden, layer, seq_len),
        };
        let mut layer_inputs = Vec::new();
        let mut attention = Vec::new();
        for l in start..cfg.n_layers {
            layer_inputs.push(h);
            let last = l + 1 == cfg.n_layers;
            let (next, attn) = self.layer(tape, binding, l, h, seq_len, last, updates)?;
            attention.push(attn);
            h = next;
        }
        let final_hidden = h;
        let g = binding.node(tape, w, ParamKey::FinalLnGain);
        let b = binding.node(tape, w, ParamKey::FinalLnBias);
        let z = tape.layer_norm(h, g, b)?;
        let output = self.linear(tape, binding, z, ParamKey::FinalProj, None, SiteAddress::final_proj(), updates)?;
        Ok(ForwardOut {
            output,
            layer_inputs,
            final_hidden,
            attention,
        })
    }

    /// One pre-LN block. The last block only computes the EOS row, which is
    /// all the pooled output depends on.
    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        tape: &mut Tape,
        binding: &mut Binding,
        l: usize,
        h: NodeId,
        seq_len: usize,
        last: bool,
        updates: &[BoundUpdate],
    ) -> Result<(NodeId, NodeId)> {
        let w = &self.weights;
        let cfg = &self.config;
        let key = |p| ParamKey::Layer(l, p);
        let addr = |s| SiteAddress::new(l + 1, s);

        let g1 = binding.node(tape, w, key(LayerParam::Ln1Gain));
        let b1 = binding.node(tape, w, key(LayerParam::Ln1Bias));
        let a = tape.layer_norm(h, g1, b1)?;
        let k = self.linear(tape, binding, a, key(LayerParam::Key), Some(key(LayerParam::KeyBias)), addr(Site::K), updates)?;
        let v = self.linear(tape, binding, a, key(LayerParam::Value), Some(key(LayerParam::ValueBias)), addr(Site::V), updates)?;
        let (aq, resid, q_offset) = if last {
            let eos = seq_len - 1;
            (
                tape.select_rows(a, vec![eos])?,
                tape.select_rows(h, vec![eos])?,
                eos,
            )
        } else {
            (a, h, 0)
        };
        let q = self.linear(tape, binding, aq, key(LayerParam::Query), Some(key(LayerParam::QueryBias)), addr(Site::Q), updates)?;
        // Scores are scaled by 1/sqrt(d_model).
        let scale = 1.0 / (cfg.d_model as f64).sqrt();
        let att = tape.attention(q, k, v, cfg.n_heads, scale, q_offset)?;
        let o = self.linear(tape, binding, att, key(LayerParam::Out), Some(key(LayerParam::OutBias)), addr(Site::O), updates)?;
        let h2 = tape.add(resid, o)?;

        let g2 = binding.node(tape, w, key(LayerParam::Ln2Gain));
        let b2 = binding.node(tape, w, key(LayerParam::Ln2Bias));
        let m = tape.layer_norm(h2, g2, b2)?;
        let f = self.linear(tape, binding, m, key(LayerParam::Mlp1), Some(key(LayerParam::Mlp1Bias)), addr(Site::Mlp1), updates)?;
        let f = tape.gelu(f);
        let f = self.linear(tape, binding, f, key(LayerParam::Mlp2), Some(key(LayerParam::Mlp2Bias)), addr(Site::Mlp2), updates)?;
        Ok((tape.add(h2, f)?, att))
    }

    /// `y = x Wᵀ + bias + Σ x (B A)ᵀ` over the updates bound at `addr`.
    #[allow(clippy::too_many_arguments)]
    fn linear(
        &self,
        tape: &mut Tape,
        binding: &mut Binding,
        x: NodeId,
        weight: ParamKey,
        bias: Option<ParamKey>,
        addr: SiteAddress,
        updates: &[BoundUpdate],
    ) -> Result<NodeId> {
        let w = binding.node(tape, &self.weights, weight);
        let mut y = tape.matmul_t(x, w)?;
        if let Some(bk) = bias {
            let b = binding.node(tape, &self.weights, bk);
            y = tape.add_row(y, b)?;
        }
        for u in updates.iter().filter(|u| u.addr == addr) {
            let dy = match u.kind {
                BoundKind::LowRank { a, b } => {
                    let t = tape.matmul_t(x, a)?;
                    tape.matmul_t(t, b)?
                }
                BoundKind::Dense(dw) => tape.matmul_t(x, dw)?,
            };
            y = tape.add(y, dy)?;
        }
        Ok(y)
    }
}

pub(crate) fn bind_updates(tape: &mut Tape, deltas: &[&dyn WeightUpdate]) -> Vec<BoundUpdate> {
    let mut out = Vec::new();
    for d in deltas {
        for (addr, update) in d.site_updates() {
            let kind = match update {
                UpdateRef::LowRank { a, b } => BoundKind::LowRank {
                    a: tape.constant(a.clone()),
                    b: tape.constant(b.clone()),
                },
                UpdateRef::Dense(dw) => BoundKind::Dense(tape.constant(dw.clone())),
            };
            out.push(BoundUpdate { addr, kind });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{pretrain, CaptionPair, PretrainConfig};
    use crate::linalg::Rng;
    use crate::lora::{ConceptDelta, HyperRecord, SiteFactors};

    fn vocab() -> Vec<String> {
        ["<eos>", "sks", "an", "image", "of", "a", "dog", "on", "the", "beach", "in", "snow"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn small() -> FrozenEncoder {
        let mut cfg = EncoderConfig::toy(vocab(), 5);
        cfg.d_model = 16;
        cfg.n_layers = 2;
        cfg.n_heads = 2;
        cfg.d_out = 8;
        FrozenEncoder::init(cfg).unwrap()
    }

    fn toy() -> FrozenEncoder {
        FrozenEncoder::init(EncoderConfig::toy(vocab(), 3)).unwrap()
    }

    fn random_delta(enc: &FrozenEncoder, addr: SiteAddress, rank: usize, seed: u64) -> ConceptDelta {
        let (m, n) = enc.site_shape(addr).unwrap();
        let mut rng = Rng::new(seed);
        ConceptDelta::new(
            "c",
            enc.fingerprint(),
            rank,
            vec![SiteFactors {
                address: addr,
                a: Matrix::new(rank, n, rng.gaussian_vec(rank * n, 1.0)).unwrap(),
                b: Matrix::new(m, rank, rng.gaussian_vec(m * rank, 0.05)).unwrap(),
            }],
            HyperRecord::default(),
        )
        .unwrap()
    }

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn zero_b_is_bitwise_identity() {
        let enc = toy();
        let tokens = enc.tokenize("an image of sks on the beach").unwrap();
        let base = enc.encode_text(&tokens, &[]).unwrap();
        for addr in [SiteAddress::new(4, Site::V), SiteAddress::new(1, Site::Q), SiteAddress::final_proj()] {
            let z = ConceptDelta::zeros(&enc, "z", &[addr], 2).unwrap();
            assert_eq!(bits(&enc.encode_text(&tokens, &[&z]).unwrap()), bits(&base), "{addr}");
        }
    }

    #[test]
    fn low_rank_matches_dense_substitution() {
        let enc = toy();
        let tokens = enc.tokenize("a dog in the snow").unwrap();
        for (i, addr) in [
            SiteAddress::new(4, Site::V),
            SiteAddress::new(2, Site::K),
            SiteAddress::new(3, Site::Mlp1),
            SiteAddress::final_proj(),
        ]
        .into_iter()
        .enumerate()
        {
            let d = random_delta(&enc, addr, 1, i as u64);
            let got = enc.encode_text(&tokens, &[&d]).unwrap();
            let oracle = enc
                .with_weight_added(addr, &d.materialize(addr).unwrap())
                .unwrap()
                .encode_text(&tokens, &[])
                .unwrap();
            for (g, o) in got.iter().zip(&oracle) {
                assert!((g - o).abs() < 1e-6, "{addr}: {g} vs {o}");
            }
        }
    }

    #[test]
    fn cached_equals_uncached() {
        let enc = toy();
        let mut cache = PrefixCache::new();
        let d = random_delta(&enc, SiteAddress::new(4, Site::V), 1, 9);
        let p = random_delta(&enc, SiteAddress::final_proj(), 1, 10);
        for text in ["an image of sks", "sks on the beach", "an image of sks"] {
            let tokens = enc.tokenize(text).unwrap();
            for set in [vec![], vec![&d as &dyn WeightUpdate], vec![&p as &dyn WeightUpdate]] {
                let a = enc.encode_text(&tokens, &set).unwrap();
                let b = enc.encode_cached(&mut cache, &tokens, &set).unwrap();
                assert_eq!(bits(&a), bits(&b));
            }
        }
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn fingerprint_guard_and_changes() {
        let enc = toy();
        let other = FrozenEncoder::init(EncoderConfig::toy(vocab(), 4)).unwrap();
        assert_ne!(enc.fingerprint(), other.fingerprint());
        let d = random_delta(&other, SiteAddress::new(4, Site::V), 1, 1);
        assert!(matches!(enc.encode("an image of sks", &[&d]), Err(PolarError::Fingerprint { .. })));
        let addr = SiteAddress::new(1, Site::O);
        let mut dw = Matrix::zeros(64, 64);
        dw.set(3, 5, 1e-3);
        assert_ne!(enc.with_weight_added(addr, &dw).unwrap().fingerprint(), enc.fingerprint());
        assert_eq!(enc.with_weight_added(addr, &Matrix::zeros(64, 64)).unwrap().fingerprint(), enc.fingerprint());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let enc = toy();
        let tokens = enc.tokenize("an image of a dog on the beach").unwrap();
        let maps = enc.attention_maps(&tokens, &[]).unwrap();
        assert_eq!(maps.len(), 4);
        for map in maps {
            for row in map.probs.chunks(map.keys) {
                let s: f64 = row.iter().map(|&p| f64::from(p)).sum();
                assert!((s - 1.0).abs() < 1e-6, "layer {}: {s}", map.layer);
            }
        }
    }

    #[test]
    fn causal_mask_ignores_later_tokens() {
        // The EOS row sees every token, so only the prefix rows are compared.
        let enc = toy();
        let a = enc.tokenize("a dog on the beach").unwrap();
        let b = enc.tokenize("a dog in the snow").unwrap();
        let ma = enc.attention_maps(&a, &[]).unwrap();
        let mb = enc.attention_maps(&b, &[]).unwrap();
        let keys = ma[0].keys;
        for h in 0..ma[0].heads {
            for q in 0..2 {
                let off = (h * ma[0].query_rows + q) * keys;
                assert_eq!(ma[0].probs[off..off + keys], mb[0].probs[off..off + keys]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        enc.save(&path).unwrap();
        let back = FrozenEncoder::load(&path).unwrap();
        assert_eq!(back.fingerprint(), enc.fingerprint());
        assert_eq!(back.weights(), enc.weights());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(FrozenEncoder::load(&path).is_err());
    }

    #[test]
    fn pretrain_noop_determinism_and_descent() {
        let enc = small();
        let mut rng = Rng::new(2);
        let pairs: Vec<CaptionPair> = ["a dog on the beach", "a dog in the snow", "an image of the beach"]
            .iter()
            .map(|c| CaptionPair {
                caption: c.to_string(),
                target: rng.gaussian_vec(8, 1.0),
            })
            .collect();
        let zero = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        let (same, _) = pretrain(&enc, &pairs, &zero).unwrap();
        assert_eq!(same.fingerprint(), enc.fingerprint());

        let cfg = PretrainConfig {
            steps: 150,
            learning_rate: 5e-3,
            batch_size: 3,
            seed: 1,
        };
        let (a, report) = pretrain(&enc, &pairs, &cfg).unwrap();
        let (b, _) = pretrain(&enc, &pairs, &cfg).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), enc.fingerprint());
        let head: f64 = report.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = report.losses[140..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
        assert!(pretrain(&enc, &[], &cfg).is_err());
    }
}
