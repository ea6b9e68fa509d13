use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, StackConfig, ACOUSTIC_ROWS, CODEBOOKS};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::Container;
use crate::tensor::{ParameterStore, Tensor};

/// Trainable model: configuration plus named f64 parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let a = std * 3f64.sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-a..a)).collect();
        Tensor::new(shape, data).expect("init shape")
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
        self.uniform(vec![fan_in, fan_out], gain / (fan_in as f64).sqrt())
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("non-empty")
}

fn add_stack(
    store: &mut ParameterStore,
    init: &mut Init,
    prefix: &str,
    s: &StackConfig,
) -> Result<()> {
    let d = s.d_model;
    let resid = 1.0 / (2.0 * s.layers as f64).sqrt();
    for l in 0..s.layers {
        let p = |n: &str| format!("{prefix}.layers.{l}.{n}");
        store.insert(p("attn_norm"), ones(d))?;
        store.insert(p("wq"), init.linear(d, d, 1.0))?;
        store.insert(p("wk"), init.linear(d, d, 1.0))?;
        store.insert(p("wv"), init.linear(d, d, 1.0))?;
        store.insert(p("wo"), init.linear(d, d, resid))?;
        store.insert(p("ffn_norm"), ones(d))?;
        store.insert(p("w_gate"), init.linear(d, s.ff_hidden, 1.0))?;
        store.insert(p("w_up"), init.linear(d, s.ff_hidden, 1.0))?;
        store.insert(p("w_down"), init.linear(s.ff_hidden, d, resid))?;
    }
    store.insert(format!("{prefix}.norm"), ones(d))?;
    Ok(())
}

pub(crate) fn head_name(codebook: usize) -> String {
    format!("dt.head.{codebook}")
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut p = ParameterStore::new();
        let c = &config;
        let (dp, dtt, ddt) = (c.pt.d_model, c.tt.d_model, c.dt.d_model);

        p.insert("pt.embed", init.uniform(vec![c.phoneme_vocab, dp], 1.0))?;
        add_stack(&mut p, &mut init, "pt", &c.pt)?;

        p.insert(
            "tt.sem_embed",
            init.uniform(vec![c.semantic_vocab + 1, dtt], 1.0),
        )?;
        p.insert("tt.in_proj", init.linear(dtt + 2 * dp, dtt, 1.0))?;
        if c.tt_speaker {
            p.insert("tt.spk_proj", init.linear(c.speaker_dim, dtt, 1.0))?;
        }
        add_stack(&mut p, &mut init, "tt", &c.tt)?;
        p.insert("tt.head", init.linear(dtt, c.joint_classes(), 1.0))?;
        p.insert("tt.head_bias", Tensor::zeros(vec![c.joint_classes()]))?;

        p.insert("dt.spk_proj", init.linear(c.speaker_dim, ddt, 1.0))?;
        p.insert("dt.h_proj", init.linear(dtt, ddt, 1.0))?;
        p.insert("dt.sem_embed", init.uniform(vec![c.semantic_vocab, ddt], 1.0))?;
        p.insert(
            "dt.ac_embed",
            init.uniform(vec![(ACOUSTIC_ROWS - 1) * c.acoustic_vocab, ddt], 1.0),
        )?;
        add_stack(&mut p, &mut init, "dt", &c.dt)?;
        for q in 2..=CODEBOOKS {
            p.insert(head_name(q), init.linear(ddt, c.acoustic_vocab, 1.0))?;
        }
        Ok(Self { config, params: p })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn to_container(&self, mut metadata: serde_json::Value) -> Container {
        if let Some(obj) = metadata.as_object_mut() {
            obj.insert(
                "model_config".into(),
                serde_json::to_value(&self.config).expect("config serializes"),
            );
        }
        let mut c = Container::new(metadata);
        for (name, t) in self.params.iter() {
            c.push(format!("param.{name}"), t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg = c
            .metadata
            .get("model_config")
            .ok_or_else(|| Error::Checkpoint("missing model_config".into()))?;
        let config: ModelConfig = serde_json::from_value(cfg.clone())?;
        config.validate()?;
        let mut params = ParameterStore::new();
        for (name, t) in &c.tensors {
            if let Some(n) = name.strip_prefix("param.") {
                params.insert(n, t.clone())?;
            }
        }
        // Shape check against a freshly initialized model of the same config.
        let reference = Model::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params.get(name).map_err(|_| {
                Error::Checkpoint(format!("missing parameter {name}"))
            })?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container(serde_json::json!({ "kind": "model" }))
            .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
