//! Temperature / top-k sampling with a seeded stream.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::JointToken;
use crate::error::{Error, Result};

/// Temperature 0 means argmax (lowest index on ties) and draws nothing from
/// the random stream; `top_k == 0` keeps every class.
#[derive(Debug, Clone)]
pub struct Sampler {
    pub temperature: f64,
    pub top_k: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(temperature: f64, top_k: usize, seed: u64) -> Result<Self> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::Argument(format!("temperature {temperature}")));
        }
        Ok(Self {
            temperature,
            top_k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn greedy() -> Self {
        Self::new(0.0, 0, 0).expect("valid")
    }

    pub fn sample<T: Float>(&mut self, logits: &[T], allowed: impl Fn(usize) -> bool) -> Result<usize> {
        let mut cand: Vec<(usize, f64)> = Vec::with_capacity(logits.len());
        for (i, &l) in logits.iter().enumerate() {
            if !allowed(i) {
                continue;
            }
            let l = l.to_f64().unwrap_or(f64::NAN);
            if l.is_nan() {
                return Err(Error::Sampling(format!("NaN logit at class {i}")));
            }
            cand.push((i, l));
        }
        if cand.is_empty() {
            return Err(Error::Sampling("every class is masked".into()));
        }
        if self.temperature == 0.0 {
            let mut best = cand[0];
            for &c in &cand[1..] {
                if c.1 > best.1 {
                    best = c;
                }
            }
            return Ok(best.0);
        }
        for c in &mut cand {
            c.1 /= self.temperature;
        }
        if self.top_k > 0 && self.top_k < cand.len() {
            cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            cand.truncate(self.top_k);
            cand.sort_by_key(|c| c.0);
        }
        let max = cand.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Sampling("no finite logit among allowed classes".into()));
        }
        let weights: Vec<f64> = cand.iter().map(|c| (c.1 - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        let u = self.rng.gen::<f64>() * z;
        let mut cum = 0.0;
        for (c, w) in cand.iter().zip(&weights) {
            cum += w;
            if u < cum {
                return Ok(c.0);
            }
        }
        Ok(cand.last().expect("non-empty").0)
    }
}

/// Samples a joint token from head logits with the PAD class masked.
pub fn sample_joint<T: Float>(logits: &[T], semantic_vocab: usize, sampler: &mut Sampler) -> Result<JointToken> {
    let pad = semantic_vocab * super::DURATION_VOCAB;
    let class = sampler.sample(logits, |c| c < pad)?;
    JointToken::from_class(class, semantic_vocab)
}
