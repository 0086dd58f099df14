//! Named parameter tensors, seeded initialization, and binding onto a tape.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::{attention, encoder, flow};
use matchflow_tensor::{Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use std::ops::Index;

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Feature encoder and attention stack (pretrained on matching).
    Features,
    /// Context encoder of the flow refiner.
    Context,
    /// Motion encoder, GRU and flow head.
    Refiner,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("enc.") || name.starts_with("attn.") {
            Self::Features
        } else if name.starts_with("ctx.") {
            Self::Context
        } else {
            Self::Refiner
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with std `gain · sqrt(2 / fan_in)`.
    He { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn conv(name: impl Into<String>, cout: usize, cin: usize, k: usize, gain: f64) -> Self {
        Self { name: name.into(), shape: vec![cout, cin, k, k], init: Init::He { fan_in: cin * k * k, gain } }
    }

    pub fn linear(name: impl Into<String>, cin: usize, cout: usize, gain: f64) -> Self {
        Self { name: name.into(), shape: vec![cin, cout], init: Init::He { fan_in: cin, gain } }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init: Init::Zeros }
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init: Init::Ones }
    }

    pub fn constant(name: impl Into<String>, shape: &[usize], value: f64) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init: Init::Const(value) }
    }
}

/// Every parameter the architecture instantiates, in a fixed order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = encoder::param_specs("enc", &config.encoder, config.encoder.out_channels, encoder::FEATURE_HEAD_GAIN);
    specs.extend(attention::param_specs(&config.attention, config.channels()));
    specs.extend(encoder::param_specs("ctx", &config.encoder, config.flow.hidden + config.flow.context, encoder::CONTEXT_HEAD_GAIN));
    specs.extend(flow::param_specs(&config.flow));
    specs
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name gives each tensor its own stream.
    let mut fnv: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        fnv ^= b as u64;
        fnv = fnv.wrapping_mul(0x100000001b3);
    }
    fnv ^ seed.rotate_left(17) ^ 0x9e3779b97f4a7c15
}

fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor<f32> {
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::ones(&spec.shape),
        Init::Const(v) => Tensor::full(&spec.shape, v as f32),
        Init::He { fan_in, gain } => {
            let std = gain * (2.0 / fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &spec.name));
            Tensor::from_fn(&spec.shape, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * std) as f32
            })
        }
    }
}

/// Versioned, named collection of parameter tensors plus the architecture
/// they instantiate.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ModelWeights {
    /// Fresh seeded initialization of every parameter.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = param_specs(config)
            .iter()
            .map(|s| (s.name.clone(), init_tensor(s, seed)))
            .collect();
        Ok(Self { config: config.clone(), tensors })
    }

    /// Builds weights from raw entries without checking them against the config.
    pub fn from_entries(config: ModelConfig, entries: impl IntoIterator<Item = (String, Tensor<f32>)>) -> Self {
        Self { config, tensors: entries.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Copy holding only the parameters of the given groups.
    pub fn subset(&self, keep: &[ParamGroup]) -> Self {
        let tensors = self
            .tensors
            .iter()
            .filter(|(n, _)| keep.contains(&ParamGroup::of(n)))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        Self { config: self.config.clone(), tensors }
    }

    /// Overwrites every parameter that `other` also holds; returns how many
    /// were copied. Shapes must agree.
    pub fn merge_from(&mut self, other: &ModelWeights) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in &other.tensors {
            if let Some(dst) = self.tensors.get_mut(name) {
                if dst.shape() != t.shape() {
                    return Err(Error::Shape { name: name.clone(), expected: dst.shape().to_vec(), found: t.shape().to_vec() });
                }
                *dst = t.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Checks that every expected parameter is present with its expected shape.
    pub fn check_against_config(&self) -> Result<()> {
        for spec in param_specs(&self.config) {
            match self.tensors.get(&spec.name) {
                None => return Err(Error::Shape { name: spec.name, expected: spec.shape, found: vec![] }),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Shape { name: spec.name, expected: spec.shape, found: t.shape().to_vec() })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Order-sensitive hash over the bits of one group's parameters.
    pub fn fingerprint(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in self.tensors.iter().filter(|(n, _)| ParamGroup::of(n) == group) {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            for v in t.data() {
                h = (h ^ v.to_bits() as u64).wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    /// Records every parameter as a tape leaf; only groups accepted by
    /// `trainable` require gradients.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: impl Fn(ParamGroup) -> bool) -> Params {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.cast::<T>(), trainable(ParamGroup::of(n)))))
            .collect();
        Params { vars }
    }
}

/// Tape handles of bound parameters, indexed by name.
#[derive(Clone, Debug, Default)]
pub struct Params {
    vars: BTreeMap<String, Var>,
}

impl Params {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl Index<&str> for Params {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}
