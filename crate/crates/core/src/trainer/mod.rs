//! Toy-scale training: teacher-forced NLL over chunks, AdamW with warmup and
//! cosine decay, freezing, checkpoints and evaluation.

mod chunks;
mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::corpus::{mix, phoneme_error_rate, Utterance};
use crate::engine::{generate_offline, EngineConfig};
use crate::error::{Error, Result};
use crate::model::{forward, InferenceModel, Model, TokenGrid, TrainExample, ACOUSTIC_ROWS};
use crate::phonemizer::Lexicon;
use crate::tensor::checkpoint::Container;
use crate::tensor::{Graph, Tensor};

pub use chunks::{make_chunks, utterance_lookahead};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    /// Warmup steps; `None` means one epoch.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub chunk_frames: usize,
    pub adam: AdamWConfig,
    pub grad_clip: f64,
    /// Probability that a chunk sees a shortened look-ahead, as when text
    /// arrives word by word.
    pub short_lookahead: f64,
    pub freeze_dt: bool,
    pub use_speaker: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            warmup_steps: None,
            epochs: 20,
            batch_size: 8,
            chunk_frames: 64,
            adam: AdamWConfig::default(),
            grad_clip: 1.0,
            short_lookahead: 0.25,
            freeze_dt: false,
            use_speaker: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_frames < 8 {
            return Err(Error::Validation("chunk length must be at least 8 frames".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Validation("batch size and epochs must be positive".into()));
        }
        if !(self.peak_lr > 0.0) || !(0.0..=1.0).contains(&self.short_lookahead) {
            return Err(Error::Validation("learning rate or look-ahead probability".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_tt: f64,
    pub loss_dt: f64,
}

pub fn metrics_csv(log: &[StepMetrics]) -> String {
    let mut s = String::from("step,lr,loss_tt,loss_dt\n");
    for m in log {
        s.push_str(&format!("{},{:e},{:.9},{:.9}\n", m.step, m.lr, m.loss_tt, m.loss_dt));
    }
    s
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub step: usize,
    pub log: Vec<StepMetrics>,
    steps_per_epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, mut model: Model, chunks: usize) -> Result<Self> {
        config.validate()?;
        if chunks == 0 {
            return Err(Error::Validation("no training chunks".into()));
        }
        model.config.use_speaker = config.use_speaker;
        if config.freeze_dt {
            model.params.freeze_prefix("dt.");
        }
        let optimizer = AdamW::new(config.adam, &model.params);
        let steps_per_epoch = chunks.div_ceil(config.batch_size);
        let t = Self {
            config,
            model,
            optimizer,
            step: 0,
            log: Vec::new(),
            steps_per_epoch,
        };
        if t.schedule().warmup > t.total_steps() {
            return Err(Error::Validation("warmup longer than training".into()));
        }
        Ok(t)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.config.epochs
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak: self.config.peak_lr,
            warmup: self.config.warmup_steps.unwrap_or(self.steps_per_epoch),
            total: self.total_steps(),
        }
    }

    /// Chunk indices of a step: a seeded permutation per epoch, so any step
    /// can be recomputed after a restart.
    fn batch(&self, step: usize, chunks: usize) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        let mut perm: Vec<usize> = (0..chunks).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.seed ^ mix(epoch as u64))));
        let i = step % self.steps_per_epoch * self.config.batch_size;
        perm[i..(i + self.config.batch_size).min(chunks)].to_vec()
    }

    fn augment(&self, step: usize, slot: usize, ex: &TrainExample) -> Option<TrainExample> {
        let mut r = ChaCha8Rng::seed_from_u64(mix_all(&[self.config.seed, step as u64, slot as u64]));
        if r.gen::<f64>() >= self.config.short_lookahead {
            return None;
        }
        let cap = r.gen_range(1..=self.model.config.lookahead_cap);
        let mut e = ex.clone();
        e.la_limits.iter_mut().for_each(|l| *l = (*l).min(cap));
        Some(e)
    }

    /// Trains until `until` steps (or the end of the schedule).
    pub fn run(&mut self, chunks: &[TrainExample], until: Option<usize>) -> Result<()> {
        let stop = until.unwrap_or(usize::MAX).min(self.total_steps());
        let sched = self.schedule();
        while self.step < stop {
            let idx = self.batch(self.step, chunks.len());
            self.model.params.zero_grads();
            let (mut tt, mut dt) = (0.0, 0.0);
            let scale = 1.0 / idx.len() as f64;
            for (slot, &i) in idx.iter().enumerate() {
                let aug = self.augment(self.step, slot, &chunks[i]);
                let ex = aug.as_ref().unwrap_or(&chunks[i]);
                let grads = {
                    let mut g = Graph::new();
                    let f = forward(&mut g, &self.model, ex)?;
                    let lt = g.value(f.loss_tt).data()[0];
                    let ld = g.value(f.loss_dt).data()[0];
                    tt += lt * scale;
                    dt += ld * scale;
                    let loss = if self.config.freeze_dt {
                        f.loss_tt
                    } else {
                        g.add(f.loss_tt, f.loss_dt)?
                    };
                    g.backward(loss)?
                };
                self.model.params.accumulate_grads(&grads, scale);
            }
            if !tt.is_finite() || !dt.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step as u64,
                    loss_tt: tt,
                    loss_dt: dt,
                });
            }
            let lr = sched.lr(self.step);
            clip_grad_norm(&mut self.model.params, self.config.grad_clip);
            self.optimizer.step(&mut self.model.params, lr);
            self.log.push(StepMetrics {
                step: self.step,
                lr,
                loss_tt: tt,
                loss_dt: dt,
            });
            if self.step % 50 == 0 {
                info!(step = self.step, lr, loss_tt = tt, loss_dt = dt, "train");
            } else {
                debug!(step = self.step, loss_tt = tt, loss_dt = dt, "train");
            }
            self.step += 1;
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "train_config": self.config,
            "step": self.step,
            "adam_t": self.optimizer.t,
            "steps_per_epoch": self.steps_per_epoch,
            "rng": {"kind": "per-step ChaCha8 streams", "seed": self.config.seed},
            "log": self.log,
        });
        let mut c = self.model.to_container(meta);
        for id in self.model.params.ids() {
            let name = self.model.params.name(id);
            c.push(format!("adam.m.{name}"), self.optimizer.m[id.index()].clone());
            c.push(format!("adam.v.{name}"), self.optimizer.v[id.index()].clone());
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.metadata;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing {k} in checkpoint metadata")))
        };
        let config: TrainConfig = serde_json::from_value(field("train_config")?)?;
        let model = Model::from_container(c)?;
        let spe: usize = serde_json::from_value(field("steps_per_epoch")?)?;
        let batch = config.batch_size;
        let mut t = Self::new(config, model, spe * batch)?;
        t.steps_per_epoch = spe;
        t.step = serde_json::from_value(field("step")?)?;
        t.optimizer.t = serde_json::from_value(field("adam_t")?)?;
        t.log = serde_json::from_value(field("log")?)?;
        for id in t.model.params.ids() {
            let name = t.model.params.name(id).to_string();
            let get = |k: &str| -> Result<Tensor> {
                c.get(&format!("adam.{k}.{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {name}")))
            };
            t.optimizer.m[id.index()] = get("m")?;
            t.optimizer.v[id.index()] = get("v")?;
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn mix_all(parts: &[u64]) -> u64 {
    parts.iter().fold(0x7A1, |h, &p| mix(h ^ p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub joint_accuracy: f64,
    pub semantic_accuracy: f64,
    pub duration_accuracy: f64,
    pub dt_accuracy: f64,
    /// Mean free-running phoneme error rate at temperature 0.
    pub per: f64,
    pub frames: usize,
    pub utterances: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced argmax accuracies over `chunks` and free-running PER over
/// `utterances`.
pub fn evaluate(model: &Model, lexicon: &Lexicon, chunks: &[TrainExample], utterances: &[Utterance]) -> Result<EvalReport> {
    let real = model.config.semantic_vocab * crate::model::DURATION_VOCAB;
    let (mut frames, mut joint, mut sem, mut dur) = (0usize, 0usize, 0usize, 0usize);
    let (mut dt_total, mut dt_hits) = (0usize, 0usize);
    for ex in chunks {
        let mut g = Graph::new();
        let f = forward(&mut g, model, ex)?;
        let logits = g.value(f.tt_logits);
        for (t, target) in ex.joint_targets().into_iter().enumerate() {
            let pred = argmax(&logits.row(t)[..real]);
            frames += 1;
            joint += usize::from(pred == target);
            sem += usize::from(pred / 4 == target / 4);
            dur += usize::from(pred % 4 == target % 4);
        }
        for (q, &v) in f.dt_logits.iter().enumerate().take(ACOUSTIC_ROWS) {
            let l = g.value(v);
            for t in 1..ex.grid.width() {
                dt_total += 1;
                dt_hits += usize::from(argmax(l.row(t - 1)) == ex.grid.acoustic(t)[q] as usize);
            }
        }
    }
    let im = InferenceModel::<f32>::from_model(model)?;
    let cfg = EngineConfig::default();
    let mut per = 0.0;
    for u in utterances {
        let out = generate_offline(&im, lexicon, &u.words, None, &u.speaker, &cfg)?;
        let grid = TokenGrid::from_columns(out.iter().map(|f| f.tokens).collect());
        let durations: Vec<_> = out.iter().map(|f| f.duration).collect();
        per += phoneme_error_rate(&u.phonemes, &grid, &durations);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EvalReport {
        joint_accuracy: ratio(joint, frames),
        semantic_accuracy: ratio(sem, frames),
        duration_accuracy: ratio(dur, frames),
        dt_accuracy: ratio(dt_hits, dt_total),
        per: if utterances.is_empty() { 0.0 } else { per / utterances.len() as f64 },
        frames,
        utterances: utterances.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub freeze_dt: bool,
    pub use_speaker: bool,
    pub final_loss_tt: f64,
    pub final_loss_dt: f64,
    pub eval: EvalReport,
}

/// Trains and evaluates the 2×2 grid of `freeze_dt` × `use_speaker` from the
/// same initial model.
pub fn ablation(
    base: &TrainConfig,
    init: &Model,
    lexicon: &Lexicon,
    train: &[TrainExample],
    held_out: &[TrainExample],
    held_out_utts: &[Utterance],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for freeze_dt in [false, true] {
        for use_speaker in [true, false] {
            let cfg = TrainConfig {
                freeze_dt,
                use_speaker,
                ..base.clone()
            };
            let mut t = Trainer::new(cfg, init.clone(), train.len())?;
            t.run(train, None)?;
            let last = t.log.last().copied();
            rows.push(AblationRow {
                freeze_dt,
                use_speaker,
                final_loss_tt: last.map_or(f64::NAN, |m| m.loss_tt),
                final_loss_dt: last.map_or(f64::NAN, |m| m.loss_dt),
                eval: evaluate(&t.model, lexicon, held_out, held_out_utts)?,
            });
        }
    }
    Ok(rows)
}

/// Fixed-width text table, one row per ablation cell.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<10} {:<12} {:>9} {:>9} {:>10} {:>9} {:>7}\n",
        "freeze_dt", "use_speaker", "loss_tt", "loss_dt", "joint_acc", "dt_acc", "per"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:<12} {:>9.4} {:>9.4} {:>10.4} {:>9.4} {:>7.4}\n",
            r.freeze_dt, r.use_speaker, r.final_loss_tt, r.final_loss_dt, r.eval.joint_accuracy, r.eval.dt_accuracy, r.eval.per
        ));
    }
    s
}
