//! Incremental inference through the row kernels and KV caches.

use num_traits::Float;

use super::params::head_name;
use super::train::DT_SEQ;
use super::{JointToken, Model, ModelConfig, Sampler, SpeakerVector, StackConfig, ACOUSTIC_ROWS, CODEBOOKS};
use crate::error::{Error, Result};
use crate::phonemizer::PhonemeId;
use crate::tensor::kernels::{attend, linear_vec, rms_norm, rope, silu};
use crate::tensor::{KvCache, ParameterStore, Tensor};

struct Layer<T> {
    attn_norm: Vec<T>,
    wq: Tensor<T>,
    wk: Tensor<T>,
    wv: Tensor<T>,
    wo: Tensor<T>,
    ffn_norm: Vec<T>,
    w_gate: Tensor<T>,
    w_up: Tensor<T>,
    w_down: Tensor<T>,
}

struct Stack<T> {
    cfg: StackConfig,
    layers: Vec<Layer<T>>,
    norm: Vec<T>,
}

fn conv<T: Float>(t: &Tensor) -> Tensor<T> {
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|&x| T::from(x).unwrap()).collect(),
    )
    .expect("same shape")
}

fn fetch<T: Float>(p: &ParameterStore, name: &str) -> Result<Tensor<T>> {
    Ok(conv(p.get(name)?))
}

fn fetch_vec<T: Float>(p: &ParameterStore, name: &str) -> Result<Vec<T>> {
    Ok(fetch::<T>(p, name)?.into_data())
}

impl<T: Float> Stack<T> {
    fn load(p: &ParameterStore, prefix: &str, cfg: StackConfig) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.layers.{l}.{s}");
                Ok(Layer {
                    attn_norm: fetch_vec(p, &n("attn_norm"))?,
                    wq: fetch(p, &n("wq"))?,
                    wk: fetch(p, &n("wk"))?,
                    wv: fetch(p, &n("wv"))?,
                    wo: fetch(p, &n("wo"))?,
                    ffn_norm: fetch_vec(p, &n("ffn_norm"))?,
                    w_gate: fetch(p, &n("w_gate"))?,
                    w_up: fetch(p, &n("w_up"))?,
                    w_down: fetch(p, &n("w_down"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            layers,
            norm: fetch_vec(p, &format!("{prefix}.norm"))?,
        })
    }

    /// Runs `xs` (absolute positions `start..`) through every layer. All new
    /// keys are appended to `cache` before attending, so `range` may reach
    /// forward; afterwards only the first `commit` new rows stay cached.
    /// Returns the final-normed rows.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        mut xs: Vec<Vec<T>>,
        start: usize,
        rope_offset: usize,
        cache: &mut KvCache<T>,
        range: impl Fn(usize, usize) -> (usize, usize),
        commit: usize,
        eps: T,
        base: f64,
    ) -> Result<Vec<Vec<T>>> {
        let heads = self.cfg.heads;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut qs = Vec::with_capacity(xs.len());
            for (r, x) in xs.iter().enumerate() {
                let h = rms_norm(x, &layer.attn_norm, eps);
                let mut q = linear_vec(&h, &layer.wq);
                let mut k = linear_vec(&h, &layer.wk);
                let v = linear_vec(&h, &layer.wv);
                let pos = start + r - rope_offset;
                rope(&mut q, heads, pos, base);
                rope(&mut k, heads, pos, base);
                cache.append(l, start + r, &k, &v)?;
                qs.push(q);
            }
            for (r, (x, q)) in xs.iter_mut().zip(&qs).enumerate() {
                let (lo, hi) = range(l, start + r);
                if hi >= cache.len(l) || lo > hi {
                    return Err(Error::State(format!(
                        "attention range {lo}..={hi} with {} cached positions",
                        cache.len(l)
                    )));
                }
                let a = attend(q, cache.keys(l), cache.values(l), heads, lo, hi);
                let o = linear_vec(&a, &layer.wo);
                x.iter_mut().zip(&o).for_each(|(x, o)| *x = *x + *o);
                let h = rms_norm(x, &layer.ffn_norm, eps);
                let g = linear_vec(&h, &layer.w_gate);
                let u = linear_vec(&h, &layer.w_up);
                let m: Vec<T> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
                let d = linear_vec(&m, &layer.w_down);
                x.iter_mut().zip(&d).for_each(|(x, d)| *x = *x + *d);
            }
        }
        cache.truncate(start + commit);
        Ok(xs.iter().map(|x| rms_norm(x, &self.norm, eps)).collect())
    }
}

/// Per-layer keys and values of the finalized phoneme positions.
pub type PtCache<T = f32> = KvCache<T>;

/// Temporal-stack cache; one position per generated column.
#[derive(Debug, Clone, PartialEq)]
pub struct TtCache<T = f32> {
    kv: KvCache<T>,
}

impl<T: Float> TtCache<T> {
    pub fn columns(&self) -> usize {
        if self.kv.layers() == 0 {
            0
        } else {
            self.kv.len(0)
        }
    }
}

/// Read-only weights for generation, in `T` precision (f32 by default).
pub struct InferenceModel<T = f32> {
    pub config: ModelConfig,
    pt_embed: Tensor<T>,
    pt: Stack<T>,
    tt_sem_embed: Tensor<T>,
    tt_in_proj: Tensor<T>,
    tt_spk_proj: Option<Tensor<T>>,
    tt: Stack<T>,
    tt_head: Tensor<T>,
    tt_head_bias: Vec<T>,
    dt_spk_proj: Tensor<T>,
    dt_h_proj: Tensor<T>,
    dt_sem_embed: Tensor<T>,
    dt_ac_embed: Tensor<T>,
    dt: Stack<T>,
    dt_heads: Vec<Tensor<T>>,
}

impl<T: Float> InferenceModel<T> {
    pub fn from_model(model: &Model) -> Result<Self> {
        let p = &model.params;
        let c = model.config.clone();
        Ok(Self {
            pt_embed: fetch(p, "pt.embed")?,
            pt: Stack::load(p, "pt", c.pt)?,
            tt_sem_embed: fetch(p, "tt.sem_embed")?,
            tt_in_proj: fetch(p, "tt.in_proj")?,
            tt_spk_proj: if c.tt_speaker {
                Some(fetch(p, "tt.spk_proj")?)
            } else {
                None
            },
            tt: Stack::load(p, "tt", c.tt)?,
            tt_head: fetch(p, "tt.head")?,
            tt_head_bias: fetch_vec(p, "tt.head_bias")?,
            dt_spk_proj: fetch(p, "dt.spk_proj")?,
            dt_h_proj: fetch(p, "dt.h_proj")?,
            dt_sem_embed: fetch(p, "dt.sem_embed")?,
            dt_ac_embed: fetch(p, "dt.ac_embed")?,
            dt: Stack::load(p, "dt", c.dt)?,
            dt_heads: (2..=CODEBOOKS)
                .map(|q| fetch(p, &head_name(q)))
                .collect::<Result<_>>()?,
            config: c,
        })
    }

    fn eps(&self) -> T {
        T::from(self.config.norm_eps).unwrap()
    }

    fn speaker(&self, spk: &SpeakerVector) -> Result<Vec<T>> {
        if spk.dim() != self.config.speaker_dim {
            return Err(Error::Argument(format!(
                "speaker dim {} != {}",
                spk.dim(),
                self.config.speaker_dim
            )));
        }
        Ok(if self.config.use_speaker {
            spk.values().iter().map(|&x| T::from(x).unwrap()).collect()
        } else {
            vec![T::zero(); spk.dim()]
        })
    }

    pub fn new_pt_cache(&self) -> PtCache<T> {
        KvCache::new(self.config.pt.layers, self.config.pt.d_model)
    }

    pub fn new_tt_cache(&self) -> TtCache<T> {
        TtCache {
            kv: KvCache::new(self.config.tt.layers, self.config.tt.d_model),
        }
    }

    fn check_la(&self, phonemes: &[PhonemeId], la_limits: &[usize]) -> Result<()> {
        let n = phonemes.len();
        if la_limits.len() != n {
            return Err(Error::Argument(format!(
                "{} look-ahead limits for {n} phonemes",
                la_limits.len()
            )));
        }
        for (i, &la) in la_limits.iter().enumerate() {
            if la > self.config.lookahead_cap || i + la >= n {
                return Err(Error::Argument(format!("look-ahead {la} at position {i} of {n}")));
            }
        }
        if let Some(p) = phonemes.iter().find(|p| p.index() >= self.config.phoneme_vocab) {
            return Err(Error::Argument(format!("phoneme {p} outside vocabulary")));
        }
        Ok(())
    }

    /// Embeddings for positions `cache.len()..n`, reusing cached keys/values of
    /// the earlier positions; positions below `commit_to` are added to the
    /// cache. Position `i` attends to `0..=i + la_limits[i]` in the first layer.
    pub fn pt_rows(
        &self,
        cache: &mut PtCache<T>,
        phonemes: &[PhonemeId],
        la_limits: &[usize],
        commit_to: usize,
    ) -> Result<Vec<Vec<T>>> {
        self.check_la(phonemes, la_limits)?;
        let start = cache.len(0);
        let n = phonemes.len();
        if start > n || commit_to < start || commit_to > n {
            return Err(Error::State(format!(
                "phoneme cache holds {start} positions, buffer {n}, commit {commit_to}"
            )));
        }
        let xs = phonemes[start..]
            .iter()
            .map(|p| self.pt_embed.row(p.index()).to_vec())
            .collect();
        self.pt.run(
            xs,
            start,
            0,
            cache,
            |l, i| if l == 0 { (0, i + la_limits[i]) } else { (0, i) },
            commit_to - start,
            self.eps(),
            self.config.rope_base,
        )
    }

    /// Whole-buffer phoneme encoding without reuse.
    pub fn pt_encode(&self, phonemes: &[PhonemeId], la_limits: &[usize]) -> Result<Vec<Vec<T>>> {
        let mut cache = self.new_pt_cache();
        self.pt_rows(&mut cache, phonemes, la_limits, 0)
    }

    /// Projected temporal-stack input for one column.
    pub fn tt_input(
        &self,
        prev_semantic: Option<u16>,
        slot_a: &[T],
        slot_b: Option<&[T]>,
        spk: &SpeakerVector,
    ) -> Result<Vec<T>> {
        let c = &self.config;
        let dp = c.pt.d_model;
        if slot_a.len() != dp || slot_b.is_some_and(|b| b.len() != dp) {
            return Err(Error::Argument("phoneme slot width".into()));
        }
        let sem = match prev_semantic {
            None => c.semantic_vocab,
            Some(s) if (s as usize) < c.semantic_vocab => s as usize,
            Some(s) => return Err(Error::Argument(format!("semantic token {s}"))),
        };
        let mut cat = self.tt_sem_embed.row(sem).to_vec();
        cat.extend_from_slice(slot_a);
        match slot_b {
            Some(b) => cat.extend_from_slice(b),
            None => cat.extend(std::iter::repeat(T::zero()).take(dp)),
        }
        let mut x = linear_vec(&cat, &self.tt_in_proj);
        let s = self.speaker(spk)?;
        if let Some(w) = &self.tt_spk_proj {
            let sp = linear_vec(&s, w);
            x.iter_mut().zip(&sp).for_each(|(x, s)| *x = *x + *s);
        }
        Ok(x)
    }

    fn tt_head(&self, h: &[T]) -> Vec<T> {
        let mut l = linear_vec(h, &self.tt_head);
        l.iter_mut()
            .zip(&self.tt_head_bias)
            .for_each(|(l, b)| *l = *l + *b);
        l
    }

    /// One temporal step at `column`; returns the hidden state and the joint
    /// logits (including the PAD class).
    #[allow(clippy::too_many_arguments)]
    pub fn tt_step(
        &self,
        cache: &mut TtCache<T>,
        column: usize,
        prev_semantic: Option<u16>,
        slot_a: &[T],
        slot_b: Option<&[T]>,
        spk: &SpeakerVector,
    ) -> Result<(Vec<T>, Vec<T>)> {
        if column != cache.columns() {
            return Err(Error::State(format!(
                "temporal cache holds {} columns, step for column {column}",
                cache.columns()
            )));
        }
        let x = self.tt_input(prev_semantic, slot_a, slot_b, spk)?;
        self.tt_step_input(cache, x)
    }

    pub(crate) fn tt_step_input(&self, cache: &mut TtCache<T>, x: Vec<T>) -> Result<(Vec<T>, Vec<T>)> {
        let col = cache.columns();
        let mut out = self.tt.run(
            vec![x],
            col,
            0,
            &mut cache.kv,
            |_, i| (0, i),
            1,
            self.eps(),
            self.config.rope_base,
        )?;
        let h = out.pop().expect("one row");
        let logits = self.tt_head(&h);
        Ok((h, logits))
    }

    /// Non-incremental temporal pass over prepared inputs.
    pub fn tt_forward_full(&self, inputs: Vec<Vec<T>>) -> Result<Vec<(Vec<T>, Vec<T>)>> {
        let mut cache = self.new_tt_cache();
        let hs = self.tt.run(
            inputs,
            0,
            0,
            &mut cache.kv,
            |_, i| (0, i),
            0,
            self.eps(),
            self.config.rope_base,
        )?;
        Ok(hs
            .into_iter()
            .map(|h| {
                let l = self.tt_head(&h);
                (h, l)
            })
            .collect())
    }

    fn dt_prefix(&self, h: &[T], semantic: u16, spk: &SpeakerVector) -> Result<Vec<Vec<T>>> {
        if h.len() != self.config.tt.d_model {
            return Err(Error::Argument("hidden width".into()));
        }
        if semantic as usize >= self.config.semantic_vocab {
            return Err(Error::Argument(format!("semantic token {semantic}")));
        }
        let s = self.speaker(spk)?;
        Ok(vec![
            linear_vec(&s, &self.dt_spk_proj),
            linear_vec(h, &self.dt_h_proj),
            self.dt_sem_embed.row(semantic as usize).to_vec(),
        ])
    }

    fn ac_row(&self, codebook_index: usize, token: u16) -> Vec<T> {
        self.dt_ac_embed
            .row(codebook_index * self.config.acoustic_vocab + token as usize)
            .to_vec()
    }

    /// Generates codebooks 2..=12 for one column, one codebook at a time.
    pub fn dt_generate(
        &self,
        h: &[T],
        semantic: u16,
        spk: &SpeakerVector,
        sampler: &mut Sampler,
    ) -> Result<[u16; ACOUSTIC_ROWS]> {
        let mut cache = KvCache::new(self.config.dt.layers, self.config.dt.d_model);
        let eps = self.eps();
        let base = self.config.rope_base;
        let prefix = self.dt_prefix(h, semantic, spk)?;
        let mut rows = self.dt.run(prefix, 0, 0, &mut cache, |_, i| (0, i), 3, eps, base)?;
        let mut out = [0u16; ACOUSTIC_ROWS];
        for q in 0..ACOUSTIC_ROWS {
            let last = rows.pop().expect("one row");
            let logits = linear_vec(&last, &self.dt_heads[q]);
            let tok = sampler.sample(&logits, |_| true)? as u16;
            out[q] = tok;
            if q + 1 < ACOUSTIC_ROWS {
                let pos = cache.len(0);
                rows = self.dt.run(
                    vec![self.ac_row(q, tok)],
                    pos,
                    0,
                    &mut cache,
                    |_, i| (0, i),
                    1,
                    eps,
                    base,
                )?;
            }
        }
        Ok(out)
    }

    /// Depth-stack logits for codebooks 2..=12 given the column's tokens, in a
    /// single non-incremental pass.
    pub fn dt_logits_full(
        &self,
        h: &[T],
        semantic: u16,
        spk: &SpeakerVector,
        tokens: &[u16; ACOUSTIC_ROWS],
    ) -> Result<Vec<Vec<T>>> {
        let mut xs = self.dt_prefix(h, semantic, spk)?;
        for (q, &t) in tokens[..ACOUSTIC_ROWS - 1].iter().enumerate() {
            if t as usize >= self.config.acoustic_vocab {
                return Err(Error::Argument(format!("acoustic token {t}")));
            }
            xs.push(self.ac_row(q, t));
        }
        debug_assert_eq!(xs.len(), DT_SEQ);
        let mut cache = KvCache::new(self.config.dt.layers, self.config.dt.d_model);
        let out = self.dt.run(
            xs,
            0,
            0,
            &mut cache,
            |_, i| (0, i),
            0,
            self.eps(),
            self.config.rope_base,
        )?;
        Ok(out[2..]
            .iter()
            .zip(&self.dt_heads)
            .map(|(r, w)| linear_vec(r, w))
            .collect())
    }

    /// Samples a joint token, never the PAD class; `allowed` can exclude more.
    pub fn sample_joint(
        &self,
        logits: &[T],
        sampler: &mut Sampler,
        allowed: impl Fn(JointToken) -> bool,
    ) -> Result<JointToken> {
        let vs = self.config.semantic_vocab;
        let pad = self.config.joint_pad();
        let class = sampler.sample(logits, |c| {
            c != pad && JointToken::from_class(c, vs).map_or(false, &allowed)
        })?;
        JointToken::from_class(class, vs)
    }
}
