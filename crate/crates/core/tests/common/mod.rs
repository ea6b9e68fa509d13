#![allow(dead_code)]

use fullstream_core::align::{encode_alignment, ForcedAlignment};
use fullstream_core::model::{Model, ModelConfig, SpeakerVector, StackConfig, TokenGrid, TrainExample, CODEBOOKS};
use fullstream_core::PhonemeId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A deliberately small configuration for fast checks.
pub fn tiny_config() -> ModelConfig {
    let s = StackConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        ff_hidden: 12,
    };
    ModelConfig {
        pt: s,
        tt: s,
        dt: s,
        semantic_vocab: 6,
        acoustic_vocab: 5,
        speaker_dim: 3,
        ..ModelConfig::toy()
    }
}

pub fn random_speaker(r: &mut ChaCha8Rng, dim: usize) -> SpeakerVector {
    SpeakerVector::new((0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn la_limits(n: usize) -> Vec<usize> {
    (0..n).map(|i| (n - 1 - i).min(10)).collect()
}

/// Random but consistent training example for `cfg`.
pub fn random_example(r: &mut ChaCha8Rng, cfg: &ModelConfig, phonemes: usize) -> TrainExample {
    let ph: Vec<PhonemeId> = (0..phonemes)
        .map(|_| PhonemeId(r.gen_range(2..cfg.phoneme_vocab as u16)))
        .collect();
    let mut acc = 0.0;
    let ends: Vec<f64> = (0..phonemes)
        .map(|_| {
            acc += r.gen_range(0.4..2.5);
            acc
        })
        .collect();
    let a = ForcedAlignment::new(ph.clone(), ends).unwrap();
    let durations = encode_alignment(&a).unwrap();
    let frames: Vec<[u16; CODEBOOKS]> = (0..durations.len())
        .map(|_| {
            let mut f = [0u16; CODEBOOKS];
            f[0] = r.gen_range(0..cfg.semantic_vocab as u16);
            for x in &mut f[1..] {
                *x = r.gen_range(0..cfg.acoustic_vocab as u16);
            }
            f
        })
        .collect();
    TrainExample {
        la_limits: la_limits(phonemes),
        phonemes: ph,
        grid: TokenGrid::from_frames(&frames, cfg.acoustic_pad()),
        durations,
        speaker: random_speaker(r, cfg.speaker_dim),
        final_phonemes: vec![phonemes - 1],
    }
}

pub fn random_model(cfg: ModelConfig, seed: u64) -> Model {
    Model::new(cfg, seed).unwrap()
}

pub mod grad {
    use fullstream_core::model::Model;
    use fullstream_core::tensor::{AttentionMask, Graph, Tensor, Var};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub const STEP: f64 = 1e-5;
    /// Denominator floor for components that are numerically zero.
    pub const FLOOR: f64 = 1e-8;

    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
    }

    pub fn rand_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn eval(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
        let l = build(&mut g, &vars);
        g.value(l).data()[0]
    }

    /// Max relative error between recorded and central-difference gradients
    /// over every coordinate of every input.
    pub fn check(inputs: Vec<Tensor>, build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let l = build(&mut g, &vars);
        let grads = g.backward(l).unwrap();
        let mut worst = 0.0f64;
        let mut work = inputs.clone();
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.input(*v).unwrap().to_vec();
            for j in 0..inputs[i].numel() {
                let x0 = inputs[i].data()[j];
                work[i].data_mut()[j] = x0 + STEP;
                let up = eval(&work, build);
                work[i].data_mut()[j] = x0 - STEP;
                let down = eval(&work, build);
                work[i].data_mut()[j] = x0;
                let numeric = (up - down) / (2.0 * STEP);
                worst = worst.max(rel_err(analytic[j], numeric));
            }
        }
        worst
    }

    /// Scalar projection `sum(out ⊙ weights)` so every output element matters.
    pub fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
        let w = g.constant(weights.clone());
        let m = g.mul(out, w).unwrap();
        g.sum(m)
    }

    pub struct BlockCase {
        pub rows: usize,
        pub d: usize,
        pub heads: usize,
        pub ff: usize,
        pub mask: AttentionMask,
    }

    pub fn random_case(r: &mut ChaCha8Rng) -> BlockCase {
        let heads = r.gen_range(1..=3);
        let d = heads * 2 * r.gen_range(1..=2);
        let rows = r.gen_range(1..=6);
        let mask = match r.gen_range(0..3) {
            0 => AttentionMask::causal(rows),
            1 => AttentionMask::window(rows, r.gen_range(0..3)),
            _ => {
                let la: Vec<usize> = (0..rows).map(|i| (rows - 1 - i).min(r.gen_range(0..3))).collect();
                AttentionMask::lookahead(&la)
            }
        };
        BlockCase {
            rows,
            d,
            heads,
            ff: r.gen_range(2..=6),
            mask,
        }
    }

    /// Pre-norm attention block with residual: x + attn(rope(norm(x)·wq), ...)·wo.
    pub fn attention_block(r: &mut ChaCha8Rng, c: &BlockCase) -> f64 {
        let (n, d) = (c.rows, c.d);
        let inputs = vec![
            rand_tensor(r, vec![n, d], 1.0),
            rand_tensor(r, vec![d], 1.0),
            rand_tensor(r, vec![d, d], 0.7),
            rand_tensor(r, vec![d, d], 0.7),
            rand_tensor(r, vec![d, d], 0.7),
            rand_tensor(r, vec![d, d], 0.7),
        ];
        let proj = rand_tensor(r, vec![n, d], 1.0);
        let positions: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        let (heads, mask) = (c.heads, c.mask.clone());
        check(inputs, &move |g, v| {
            let h = g.rms_norm(v[0], v[1], 1e-5).unwrap();
            let q = g.matmul(h, v[2]).unwrap();
            let k = g.matmul(h, v[3]).unwrap();
            let vv = g.matmul(h, v[4]).unwrap();
            let q = g.rope(q, heads, &positions, 10_000.0).unwrap();
            let k = g.rope(k, heads, &positions, 10_000.0).unwrap();
            let a = g.attention(q, k, vv, heads, &mask).unwrap();
            let o = g.matmul(a, v[5]).unwrap();
            let y = g.add(v[0], o).unwrap();
            project(g, y, &proj)
        })
    }

    pub fn swiglu_block(r: &mut ChaCha8Rng, c: &BlockCase) -> f64 {
        let (n, d, ff) = (c.rows, c.d, c.ff);
        let inputs = vec![
            rand_tensor(r, vec![n, d], 1.0),
            rand_tensor(r, vec![d, ff], 0.8),
            rand_tensor(r, vec![d, ff], 0.8),
            rand_tensor(r, vec![ff, d], 0.8),
        ];
        let proj = rand_tensor(r, vec![n, d], 1.0);
        check(inputs, &move |g, v| {
            let a = g.matmul(v[0], v[1]).unwrap();
            let a = g.silu(a);
            let b = g.matmul(v[0], v[2]).unwrap();
            let m = g.mul(a, b).unwrap();
            let y = g.matmul(m, v[3]).unwrap();
            project(g, y, &proj)
        })
    }

    pub fn rotary(r: &mut ChaCha8Rng, c: &BlockCase) -> f64 {
        let (n, d) = (c.rows, c.d);
        let inputs = vec![rand_tensor(r, vec![n, d], 1.0)];
        let proj = rand_tensor(r, vec![n, d], 1.0);
        let positions: Vec<usize> = (0..n).map(|_| r.gen_range(0..50)).collect();
        let heads = c.heads;
        check(inputs, &move |g, v| {
            let y = g.rope(v[0], heads, &positions, 10_000.0).unwrap();
            // Square so the check also exercises a non-linear consumer.
            let y2 = g.mul(y, y).unwrap();
            let s = g.add(y, y2).unwrap();
            project(g, s, &proj)
        })
    }

    pub fn joint_head(r: &mut ChaCha8Rng, c: &BlockCase) -> f64 {
        let (n, d) = (c.rows, c.d);
        let vs = r.gen_range(1..=4);
        let classes = vs * 4 + 1;
        let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..vs * 4)).collect();
        let inputs = vec![
            rand_tensor(r, vec![n, d], 1.0),
            rand_tensor(r, vec![d, classes], 1.0),
            rand_tensor(r, vec![classes], 0.5),
        ];
        check(inputs, &move |g, v| {
            let l = g.matmul(v[0], v[1]).unwrap();
            let b = g.select_rows(&[v[2]], &vec![Some((0, 0)); n]).unwrap();
            let l = g.add(l, b).unwrap();
            g.cross_entropy_over(l, &targets, vs * 4).unwrap()
        })
    }

    /// Checks `coords` randomly chosen parameter coordinates of a full model
    /// loss against central differences.
    pub fn model_loss(
        r: &mut ChaCha8Rng,
        model: &mut Model,
        coords: usize,
        loss: &dyn Fn(&Model) -> (f64, Option<fullstream_core::tensor::Gradients>),
    ) -> f64 {
        let (_, grads) = loss(model);
        let grads = grads.unwrap();
        let ids: Vec<_> = model.params.ids().collect();
        let mut worst = 0.0f64;
        for _ in 0..coords {
            let id = ids[r.gen_range(0..ids.len())];
            let j = r.gen_range(0..model.params.value(id).numel());
            let analytic = grads.param(id).map_or(0.0, |g| g[j]);
            let x0 = model.params.value(id).data()[j];
            model.params.value_mut(id).data_mut()[j] = x0 + STEP;
            let up = loss(model).0;
            model.params.value_mut(id).data_mut()[j] = x0 - STEP;
            let down = loss(model).0;
            model.params.value_mut(id).data_mut()[j] = x0;
            worst = worst.max(rel_err(analytic, (up - down) / (2.0 * STEP)));
        }
        worst
    }
}
