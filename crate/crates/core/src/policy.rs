//! Linear-softmax sequence policy.
//!
//! Logits for the next token are `featuresᵀ W`, where the features are the
//! concatenation of one-hot(prompt), one-hot(position) and one-hot(previous
//! token, with a slot for "no previous token"). Because every feature vector
//! has exactly three active entries, logits are a sum of three rows of `W`.
//!
//! Everything is computed in log space; probabilities only appear when a
//! token is sampled or an entropy is reported.

use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::batch::TrainBatch;
use crate::env::{PromptId, Token};
use crate::error::{Error, Result};

/// Deterministic featurizer for `(prompt, position, previous token)` contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub num_prompts: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

/// Active one-hot indices of a context. All active entries have value 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Features {
    active: [usize; 3],
    dim: usize,
}

impl Features {
    pub fn active(&self) -> &[usize; 3] {
        &self.active
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &i in &self.active {
            v[i] = 1.0;
        }
        v
    }
}

impl FeatureMap {
    pub fn new(num_prompts: usize, max_len: usize, vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 2, got {vocab_size}"
            )));
        }
        if num_prompts == 0 || max_len == 0 {
            return Err(Error::Config(
                "num_prompts and max_len must be positive".into(),
            ));
        }
        Ok(Self {
            num_prompts,
            max_len,
            vocab_size,
        })
    }

    pub fn num_features(&self) -> usize {
        self.num_prompts + self.max_len + self.vocab_size + 1
    }

    /// Stable identifier, written into checkpoints and manifests.
    pub fn id(&self) -> String {
        format!(
            "onehot-p{}-l{}-v{}",
            self.num_prompts, self.max_len, self.vocab_size
        )
    }

    pub fn features_at(
        &self,
        prompt: PromptId,
        position: usize,
        prev: Option<Token>,
    ) -> Result<Features> {
        if prompt.0 >= self.num_prompts {
            return Err(Error::Config(format!(
                "unknown prompt id {} (have {})",
                prompt.0, self.num_prompts
            )));
        }
        if position >= self.max_len {
            return Err(Error::Contract(format!(
                "position {position} beyond max_len {}",
                self.max_len
            )));
        }
        let prev_slot = match prev {
            None => 0,
            Some(t) if t < self.vocab_size => t + 1,
            Some(t) => {
                return Err(Error::Contract(format!(
                    "token {t} outside vocab of {}",
                    self.vocab_size
                )))
            }
        };
        let pos_base = self.num_prompts;
        let prev_base = pos_base + self.max_len;
        Ok(Features {
            active: [prompt.0, pos_base + position, prev_base + prev_slot],
            dim: self.num_features(),
        })
    }

    /// Features for generating the token that follows `prefix`.
    pub fn featurize(&self, prompt: PromptId, prefix: &[Token]) -> Result<Features> {
        self.features_at(prompt, prefix.len(), prefix.last().copied())
    }
}

/// Trainable weights, `[num_features × vocab_size]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    weights: Array2<f64>,
    feature_map: FeatureMap,
}

impl PolicyParams {
    pub fn zeros(feature_map: FeatureMap) -> Self {
        Self {
            weights: Array2::zeros((feature_map.num_features(), feature_map.vocab_size)),
            feature_map,
        }
    }

    pub fn from_weights(feature_map: FeatureMap, weights: Array2<f64>) -> Result<Self> {
        let expected = (feature_map.num_features(), feature_map.vocab_size);
        if weights.dim() != expected {
            return Err(Error::Contract(format!(
                "weights shape {:?} does not match feature map {:?}",
                weights.dim(),
                expected
            )));
        }
        if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Numeric {
                index: pos,
                message: "non-finite weight".into(),
            });
        }
        Ok(Self {
            weights,
            feature_map,
        })
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Mutable access for the optimizer. Callers are responsible for keeping
    /// the weights finite.
    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub fn vocab_size(&self) -> usize {
        self.feature_map.vocab_size
    }

    pub fn num_features(&self) -> usize {
        self.feature_map.num_features()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn logits(&self, features: &Features) -> Vec<f64> {
        let [a, b, c] = features.active;
        let (ra, rb, rc) = (
            self.weights.row(a),
            self.weights.row(b),
            self.weights.row(c),
        );
        (0..self.vocab_size())
            .map(|v| ra[v] + rb[v] + rc[v])
            .collect()
    }
}

/// Frozen, versioned copy of the parameters. Owns its weights, so training
/// never mutates a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    params: PolicyParams,
    version: u64,
}

impl PolicySnapshot {
    pub fn new(params: &PolicyParams, version: u64) -> Self {
        Self {
            params: params.clone(),
            version,
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Shannon entropy in nats.
    pub entropy: f64,
}

impl TokenDistribution {
    pub fn from_logits(logits: Vec<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
            return Err(Error::Numeric {
                index: i,
                message: "non-finite logit".into(),
            });
        }
        let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = scaled.iter().map(|s| s - lse).collect();
        let entropy = -log_probs
            .iter()
            .map(|&lp| {
                let p = lp.exp();
                if p > 0.0 {
                    p * lp
                } else {
                    0.0
                }
            })
            .sum::<f64>();
        Ok(Self {
            logits,
            log_probs,
            entropy: entropy.max(0.0),
        })
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|lp| lp.exp()).collect()
    }
}

pub fn token_distribution(
    params: &PolicyParams,
    features: &Features,
    temperature: f64,
) -> Result<TokenDistribution> {
    TokenDistribution::from_logits(params.logits(features), temperature)
}

/// Per-token `log π(token_t | prompt, tokens[..t])`.
pub fn sequence_logprob(
    params: &PolicyParams,
    prompt: PromptId,
    tokens: &[Token],
    temperature: f64,
) -> Result<Vec<f64>> {
    let map = params.feature_map();
    let mut out = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        if tok >= map.vocab_size {
            return Err(Error::Contract(format!("token {tok} outside vocab")));
        }
        let feats = map.featurize(prompt, &tokens[..t])?;
        let dist = token_distribution(params, &feats, temperature)?;
        out.push(dist.log_probs[tok]);
    }
    Ok(out)
}

/// `∂/∂W Σ_t weights[t] · log π_W(token_t | context_t)`.
///
/// For a linear softmax with temperature `T` the per-token gradient is
/// `(1/T) · features ⊗ (one_hot(token) − probs)`.
pub fn weighted_logprob_grad(
    params: &PolicyParams,
    batch: &TrainBatch,
    weights: &[f64],
    temperature: f64,
) -> Result<Array2<f64>> {
    if weights.len() != batch.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} tokens",
            weights.len(),
            batch.len()
        )));
    }
    let mut grad = Array2::zeros(params.weights.dim());
    let map = params.feature_map();
    for (i, (tok, &w)) in batch.tokens.iter().zip(weights).enumerate() {
        if !w.is_finite() {
            return Err(Error::Numeric {
                index: i,
                message: format!("non-finite token weight {w}"),
            });
        }
        if w == 0.0 {
            continue;
        }
        let feats = map.features_at(tok.prompt, tok.position, tok.prev)?;
        let dist = token_distribution(params, &feats, temperature)?;
        let scale = w / temperature;
        for &row in feats.active() {
            let mut g = grad.row_mut(row);
            for (v, lp) in dist.log_probs.iter().enumerate() {
                let indicator = if v == tok.token { 1.0 } else { 0.0 };
                g[v] += scale * (indicator - lp.exp());
            }
        }
    }
    Ok(grad)
}

// Checkpoint layout, all integers u64 little-endian, floats f64 little-endian:
//   magic "STRCKPT1" (8 bytes)
//   vocab_size, num_features, version, num_prompts, max_len
//   num_features * vocab_size weights, row-major (feature-major)
const CHECKPOINT_MAGIC: &[u8; 8] = b"STRCKPT1";

impl PolicySnapshot {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let map = self.params.feature_map;
        w.write_all(CHECKPOINT_MAGIC)?;
        for h in [
            map.vocab_size as u64,
            map.num_features() as u64,
            self.version,
            map.num_prompts as u64,
            map.max_len as u64,
        ] {
            w.write_all(&h.to_le_bytes())?;
        }
        for x in self.params.weights.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut header = [0u64; 5];
        for h in &mut header {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            *h = u64::from_le_bytes(buf);
        }
        let [vocab, nfeat, version, num_prompts, max_len] = header;
        let map = FeatureMap::new(num_prompts as usize, max_len as usize, vocab as usize)?;
        if map.num_features() as u64 != nfeat {
            return Err(Error::Checkpoint(format!(
                "num_features {nfeat} inconsistent with featurizer {}",
                map.id()
            )));
        }
        let mut data = Vec::with_capacity((nfeat * vocab) as usize);
        let mut buf = [0u8; 8];
        for _ in 0..nfeat * vocab {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let weights = Array2::from_shape_vec((nfeat as usize, vocab as usize), data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            params: PolicyParams::from_weights(map, weights)?,
            version,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Group, Response};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map() -> FeatureMap {
        FeatureMap::new(3, 6, 5).unwrap()
    }

    fn random_params(map: FeatureMap, rng: &mut impl Rng, scale: f64) -> PolicyParams {
        let w = Array2::from_shape_fn((map.num_features(), map.vocab_size), |_| {
            rng.gen_range(-scale..scale)
        });
        PolicyParams::from_weights(map, w).unwrap()
    }

    #[test]
    fn featurize_is_deterministic_and_position_sensitive() {
        let m = map();
        let a = m.featurize(PromptId(0), &[]).unwrap();
        assert_eq!(a, m.featurize(PromptId(0), &[]).unwrap());
        assert_eq!(a.to_dense().iter().sum::<f64>(), 3.0);
        let x = m.featurize(PromptId(0), &[3]).unwrap().to_dense();
        let y = m.featurize(PromptId(0), &[4]).unwrap().to_dense();
        assert_ne!(x, y);
        assert!(matches!(
            m.featurize(PromptId(3), &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_logits_give_log_vocab_entropy() {
        let d = TokenDistribution::from_logits(vec![0.7; 4], 1.0).unwrap();
        assert!((d.entropy - 4f64.ln()).abs() < 1e-12);
        for lp in &d.log_probs {
            assert!((lp - (0.25f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_logit() {
        let d = TokenDistribution::from_logits(vec![10.0, 0.0, 0.0, 0.0], 1.0).unwrap();
        // 1 / (1 + 3 e^-10)
        let expected = 1.0 / (1.0 + 3.0 * (-10f64).exp());
        assert!((d.log_probs[0].exp() - expected).abs() < 1e-15);
        assert!(d.log_probs[0].exp() > 0.999);
    }

    #[test]
    fn high_temperature_approaches_uniform() {
        let d = TokenDistribution::from_logits(vec![3.0, -1.0, 0.5, 2.0], 1e6).unwrap();
        assert!((d.entropy - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(TokenDistribution::from_logits(vec![0.0, f64::NAN], 1.0).is_err());
        assert!(TokenDistribution::from_logits(vec![0.0, 1.0], 0.0).is_err());
        assert!(FeatureMap::new(1, 1, 1).is_err());
    }

    #[test]
    fn sequence_logprob_basics() {
        let m = map();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(m, &mut rng, 1.0);
        assert!(sequence_logprob(&p, PromptId(1), &[], 1.0)
            .unwrap()
            .is_empty());

        let lps = sequence_logprob(&p, PromptId(1), &[2, 0, 4, 1], 1.0).unwrap();
        let sum: f64 = lps.iter().sum();
        let prod: f64 = lps.iter().map(|l| l.exp()).product();
        assert!((sum - prod.ln()).abs() < 1e-9);

        // one dominant logit per step: token 2 everywhere
        let mut w = Array2::zeros((m.num_features(), m.vocab_size));
        for r in 0..m.num_features() {
            w[[r, 2]] = 20.0;
        }
        let det = PolicyParams::from_weights(m, w).unwrap();
        for lp in sequence_logprob(&det, PromptId(0), &[2, 2, 2], 1.0).unwrap() {
            assert!(lp <= 0.0 && lp > -1e-20);
        }
        assert!(sequence_logprob(&det, PromptId(0), &[9], 1.0).is_err());
    }

    fn single_token_batch(prompt: usize, prefix: &[Token], token: Token) -> TrainBatch {
        let mut tokens = prefix.to_vec();
        tokens.push(token);
        let n = tokens.len();
        let resp = Response {
            prompt: PromptId(prompt),
            tokens,
            behavior_version: 0,
            behavior_logprobs: vec![0.0; n],
            behavior_entropy: vec![0.0; n],
            reward: 0.0,
        };
        let mut group = Group::new(vec![resp.clone(), resp]).unwrap();
        group.advantages = vec![1.0, 0.0];
        let mut b = TrainBatch::from_groups(&[group]).unwrap();
        b.tokens
            .retain(|t| t.response_index == 0 && t.position == prefix.len());
        b
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let m = map();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(m, &mut rng, 1.0);
        let b = single_token_batch(0, &[1, 2], 3);
        let g = weighted_logprob_grad(&p, &b, &vec![0.0; b.len()], 1.0).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(weighted_logprob_grad(&p, &b, &[], 1.0).is_err());
    }

    #[test]
    fn single_token_gradient_matches_outer_product_and_fd() {
        let m = map();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(m, &mut rng, 1.0);
        let b = single_token_batch(2, &[4], 1);
        let g = weighted_logprob_grad(&p, &b, &[1.0], 1.0).unwrap();

        let feats = m.featurize(PromptId(2), &[4]).unwrap().to_dense();
        let probs = token_distribution(&p, &m.featurize(PromptId(2), &[4]).unwrap(), 1.0)
            .unwrap()
            .probs();
        let h = 1e-5;
        for f in 0..m.num_features() {
            for v in 0..m.vocab_size {
                let onehot = if v == 1 { 1.0 } else { 0.0 };
                let hand = feats[f] * (onehot - probs[v]);
                assert!((g[[f, v]] - hand).abs() < 1e-12);

                let eval = |delta: f64| {
                    let mut q = p.clone();
                    q.weights_mut()[[f, v]] += delta;
                    sequence_logprob(&q, PromptId(2), &[4, 1], 1.0).unwrap()[1]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - g[[f, v]]).abs() / g[[f, v]].abs().max(1.0) <= 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = map();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let snap = PolicySnapshot::new(&random_params(m, &mut rng, 2.0), 17);
        let mut buf = Vec::new();
        snap.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 5 * 8 + 8 * m.num_features() * m.vocab_size);
        assert_eq!(&buf[8..16], &(m.vocab_size as u64).to_le_bytes());
        let back = PolicySnapshot::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, snap);
        buf[0] = b'X';
        assert!(PolicySnapshot::read_checkpoint(&buf[..]).is_err());
    }

    #[test]
    fn snapshot_does_not_alias_live_params() {
        let mut live = PolicyParams::zeros(map());
        let snap = PolicySnapshot::new(&live, 0);
        live.weights_mut()[[0, 0]] = 5.0;
        assert_eq!(snap.params().weights()[[0, 0]], 0.0);
    }
}
