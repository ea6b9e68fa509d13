//! Teacher-forced forward pass on the recorded graph (f64).

use super::params::head_name;
use super::{JointToken, Model, SpeakerVector, StackConfig, TokenGrid, ACOUSTIC_ROWS, CODEBOOKS, DURATION_VOCAB};
use crate::align::{decode_tokens, DurationToken};
use crate::error::{Error, Result};
use crate::phonemizer::PhonemeId;
use crate::tensor::{AttentionMask, Graph, Tensor, Var};

/// Positions per depth-stack column: speaker, hidden, semantic, then the
/// embeddings of codebooks 2..=11.
pub(crate) const DT_SEQ: usize = 3 + ACOUSTIC_ROWS - 1;

/// One teacher-forced training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub phonemes: Vec<PhonemeId>,
    pub la_limits: Vec<usize>,
    pub grid: TokenGrid,
    pub durations: Vec<DurationToken>,
    pub speaker: SpeakerVector,
    /// 0-based phoneme indices that end an utterance; the second slot is
    /// left empty while the pointer sits on one of them.
    pub final_phonemes: Vec<usize>,
}

impl TrainExample {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let cfg = &model.config;
        let n = self.phonemes.len();
        if n == 0 {
            return Err(Error::EmptyUtterance);
        }
        if self.la_limits.len() != n {
            return Err(Error::Validation(format!(
                "{} look-ahead limits for {n} phonemes",
                self.la_limits.len()
            )));
        }
        for (i, &la) in self.la_limits.iter().enumerate() {
            if la > cfg.lookahead_cap || i + la >= n {
                return Err(Error::Validation(format!("look-ahead {la} at position {i} of {n}")));
            }
        }
        if let Some(p) = self.phonemes.iter().find(|p| p.index() >= cfg.phoneme_vocab) {
            return Err(Error::Validation(format!("phoneme {p} outside vocabulary")));
        }
        if self.durations.len() != self.grid.width() || self.durations.is_empty() {
            return Err(Error::Validation(format!(
                "{} duration tokens for grid width {}",
                self.durations.len(),
                self.grid.width()
            )));
        }
        decode_tokens(&self.durations, n)?;
        self.grid.validate(cfg)?;
        if self.speaker.dim() != cfg.speaker_dim {
            return Err(Error::Validation(format!(
                "speaker dim {} != {}",
                self.speaker.dim(),
                cfg.speaker_dim
            )));
        }
        Ok(())
    }

    /// 0-based `(slot_a, slot_b)` phoneme indices per frame.
    pub fn slots(&self) -> Result<Vec<(usize, Option<usize>)>> {
        let n = self.phonemes.len();
        let dec = decode_tokens(&self.durations, n)?;
        Ok(dec
            .coverage
            .iter()
            .map(|c| {
                let a = c.b - 1;
                let last = a + 1 == n || self.final_phonemes.binary_search(&a).is_ok();
                (a, if last { None } else { Some(a + 1) })
            })
            .collect())
    }

    pub fn joint_targets(&self) -> Vec<usize> {
        self.durations
            .iter()
            .enumerate()
            .map(|(t, &d)| {
                JointToken {
                    semantic: self.grid.semantic(t),
                    duration: d,
                }
                .class()
            })
            .collect()
    }
}

/// Graph handles produced by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub loss_tt: Var,
    pub loss_dt: Var,
    /// `[T × joint classes]`.
    pub tt_logits: Var,
    /// Final hidden states of the temporal stack, `[T × d]`.
    pub tt_hidden: Var,
    /// Per codebook 2..=12, `[(T-1) × V_a]` for grid columns `1..T`.
    pub dt_logits: Vec<Var>,
}

fn param<'p>(g: &mut Graph<'p>, model: &'p Model, name: &str) -> Result<Var> {
    Ok(g.param(&model.params, model.params.id(name)?))
}

/// Pre-norm transformer stack; `first` masks layer 0 and `rest` the others.
#[allow(clippy::too_many_arguments)]
pub(crate) fn stack_forward<'p>(
    g: &mut Graph<'p>,
    model: &'p Model,
    prefix: &str,
    cfg: &StackConfig,
    mut x: Var,
    positions: &[usize],
    first: &AttentionMask,
    rest: &AttentionMask,
) -> Result<Var> {
    let eps = model.config.norm_eps;
    let base = model.config.rope_base;
    for l in 0..cfg.layers {
        let p = |n: &str| format!("{prefix}.layers.{l}.{n}");
        let mask = if l == 0 { first } else { rest };
        let w = param(g, model, &p("attn_norm"))?;
        let h = g.rms_norm(x, w, eps)?;
        let wq = param(g, model, &p("wq"))?;
        let wk = param(g, model, &p("wk"))?;
        let wv = param(g, model, &p("wv"))?;
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let q = g.rope(q, cfg.heads, positions, base)?;
        let k = g.rope(k, cfg.heads, positions, base)?;
        let a = g.attention(q, k, v, cfg.heads, mask)?;
        let wo = param(g, model, &p("wo"))?;
        let a = g.matmul(a, wo)?;
        x = g.add(x, a)?;
        let w = param(g, model, &p("ffn_norm"))?;
        let h = g.rms_norm(x, w, eps)?;
        let f = swiglu(g, model, h, &p("w_gate"), &p("w_up"), &p("w_down"))?;
        x = g.add(x, f)?;
    }
    let w = param(g, model, &format!("{prefix}.norm"))?;
    g.rms_norm(x, w, eps)
}

pub(crate) fn swiglu<'p>(
    g: &mut Graph<'p>,
    model: &'p Model,
    h: Var,
    gate: &str,
    up: &str,
    down: &str,
) -> Result<Var> {
    let wg = param(g, model, gate)?;
    let wu = param(g, model, up)?;
    let wd = param(g, model, down)?;
    let a = g.matmul(h, wg)?;
    let a = g.silu(a);
    let b = g.matmul(h, wu)?;
    let m = g.mul(a, b)?;
    g.matmul(m, wd)
}

/// Contextual phoneme embeddings: look-ahead mask on the first layer, causal
/// above it, so position `i` depends on phonemes `0..=i + la[i]` only.
pub(crate) fn pt_forward<'p>(
    g: &mut Graph<'p>,
    model: &'p Model,
    phonemes: &[PhonemeId],
    la_limits: &[usize],
) -> Result<Var> {
    let n = phonemes.len();
    let table = param(g, model, "pt.embed")?;
    let idx: Vec<usize> = phonemes.iter().map(|p| p.index()).collect();
    let x = g.gather(table, &idx)?;
    let positions: Vec<usize> = (0..n).collect();
    stack_forward(
        g,
        model,
        "pt",
        &model.config.pt,
        x,
        &positions,
        &AttentionMask::lookahead(la_limits),
        &AttentionMask::causal(n),
    )
}

fn speaker_row(model: &Model, spk: &SpeakerVector) -> Result<Tensor> {
    let d = model.config.speaker_dim;
    let data = if model.config.use_speaker {
        spk.values().to_vec()
    } else {
        vec![0.0; d]
    };
    Tensor::matrix(1, d, data)
}

fn broadcast<'p>(g: &mut Graph<'p>, row: Var, n: usize) -> Result<Var> {
    g.select_rows(&[row], &vec![Some((0, 0)); n])
}

pub fn forward<'p>(g: &mut Graph<'p>, model: &'p Model, ex: &TrainExample) -> Result<ForwardVars> {
    ex.validate(model)?;
    let cfg = &model.config;
    let t_len = ex.grid.width();

    let pt = pt_forward(g, model, &ex.phonemes, &ex.la_limits)?;
    let slots = ex.slots()?;
    let slot_a = g.select_rows(&[pt], &slots.iter().map(|s| Some((0, s.0))).collect::<Vec<_>>())?;
    let slot_b = g.select_rows(&[pt], &slots.iter().map(|s| s.1.map(|b| (0, b))).collect::<Vec<_>>())?;

    let mut prev = Vec::with_capacity(t_len);
    prev.push(cfg.semantic_vocab);
    prev.extend((0..t_len - 1).map(|t| ex.grid.semantic(t) as usize));
    let sem_table = param(g, model, "tt.sem_embed")?;
    let sem = g.gather(sem_table, &prev)?;
    let cat = g.concat_cols(&[sem, slot_a, slot_b])?;
    let in_proj = param(g, model, "tt.in_proj")?;
    let mut x = g.matmul(cat, in_proj)?;
    let spk = g.constant(speaker_row(model, &ex.speaker)?);
    if cfg.tt_speaker {
        let w = param(g, model, "tt.spk_proj")?;
        let s = g.matmul(spk, w)?;
        let s = broadcast(g, s, t_len)?;
        x = g.add(x, s)?;
    }
    let positions: Vec<usize> = (0..t_len).collect();
    let causal = AttentionMask::causal(t_len);
    let h = stack_forward(g, model, "tt", &cfg.tt, x, &positions, &causal, &causal)?;
    let head = param(g, model, "tt.head")?;
    let bias = param(g, model, "tt.head_bias")?;
    let logits = g.matmul(h, head)?;
    let bias = broadcast(g, bias, t_len)?;
    let tt_logits = g.add(logits, bias)?;
    let loss_tt =
        g.cross_entropy_over(tt_logits, &ex.joint_targets(), cfg.semantic_vocab * DURATION_VOCAB)?;

    let cols = t_len - 1;
    let mut dt_logits = Vec::new();
    let loss_dt = if cols == 0 {
        g.constant(Tensor::new(vec![1], vec![0.0])?)
    } else {
        let w = param(g, model, "dt.spk_proj")?;
        let spk_row = g.matmul(spk, w)?;
        let w = param(g, model, "dt.h_proj")?;
        let hp = g.matmul(h, w)?;
        let table = param(g, model, "dt.sem_embed")?;
        let sems: Vec<usize> = (1..t_len).map(|t| ex.grid.semantic(t) as usize).collect();
        let semv = g.gather(table, &sems)?;
        let va = cfg.acoustic_vocab;
        let mut ac_idx = Vec::with_capacity(cols * (ACOUSTIC_ROWS - 1));
        for t in 1..t_len {
            let a = ex.grid.acoustic(t);
            for q in 0..ACOUSTIC_ROWS - 1 {
                ac_idx.push(q * va + a[q] as usize);
            }
        }
        let table = param(g, model, "dt.ac_embed")?;
        let ac = g.gather(table, &ac_idx)?;
        let mut picks = Vec::with_capacity(cols * DT_SEQ);
        for j in 0..cols {
            picks.push(Some((0, 0)));
            picks.push(Some((1, j + 1)));
            picks.push(Some((2, j)));
            for q in 0..ACOUSTIC_ROWS - 1 {
                picks.push(Some((3, j * (ACOUSTIC_ROWS - 1) + q)));
            }
        }
        let x = g.select_rows(&[spk_row, hp, semv, ac], &picks)?;
        let positions: Vec<usize> = (0..cols).flat_map(|_| 0..DT_SEQ).collect();
        let mask = AttentionMask::block_causal(cols, DT_SEQ);
        let out = stack_forward(g, model, "dt", &cfg.dt, x, &positions, &mask, &mask)?;
        let mut total = None;
        for q in 0..ACOUSTIC_ROWS {
            let rows: Vec<_> = (0..cols).map(|j| Some((0, j * DT_SEQ + 2 + q))).collect();
            let hq = g.select_rows(&[out], &rows)?;
            let w = param(g, model, &head_name(q + 2))?;
            let lq = g.matmul(hq, w)?;
            let targets: Vec<usize> =
                (1..t_len).map(|t| ex.grid.acoustic(t)[q] as usize).collect();
            let ce = g.cross_entropy(lq, &targets)?;
            dt_logits.push(lq);
            total = Some(match total {
                None => ce,
                Some(acc) => g.add(acc, ce)?,
            });
        }
        g.scale(total.expect("at least one codebook"), 1.0 / ACOUSTIC_ROWS as f64)
    };
    debug_assert_eq!(CODEBOOKS, ACOUSTIC_ROWS + 1);
    Ok(ForwardVars {
        loss_tt,
        loss_dt,
        tt_logits,
        tt_hidden: h,
        dt_logits,
    })
}

/// Mean teacher-forced losses `(loss_tt, loss_dt)` over a batch.
pub fn teacher_forced_nll(model: &Model, batch: &[TrainExample]) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let (mut tt, mut dt) = (0.0, 0.0);
    for (i, ex) in batch.iter().enumerate() {
        ex.validate(model)
            .map_err(|e| Error::Validation(format!("utterance {i}: {e}")))?;
        let mut g = Graph::new();
        let f = forward(&mut g, model, ex)?;
        tt += g.value(f.loss_tt).data()[0];
        dt += g.value(f.loss_dt).data()[0];
    }
    let n = batch.len() as f64;
    Ok((tt / n, dt / n))
}
