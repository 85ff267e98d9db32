//! Named parameter storage and binding of parameters onto a tape.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::{Gradients, LinearVars, LoraVars, Tape, Tensor, Var};

/// Accounting group of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Head,
    /// Backbone weight matrices and layer-norm scales.
    Backbone,
    /// Backbone linear biases and layer-norm shifts.
    Bias,
    PromptToken,
    Pool,
    Generator,
    Lora,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Head,
        ParamGroup::Backbone,
        ParamGroup::Bias,
        ParamGroup::PromptToken,
        ParamGroup::Pool,
        ParamGroup::Generator,
        ParamGroup::Lora,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Head => "head",
            ParamGroup::Backbone => "backbone",
            ParamGroup::Bias => "biases",
            ParamGroup::PromptToken => "prompts",
            ParamGroup::Pool => "pools",
            ParamGroup::Generator => "generators",
            ParamGroup::Lora => "lora",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// Insertion-ordered parameter tensors keyed by dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(
            name,
            Param {
                value,
                group,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::wiring(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Scalar count over all tensors of `group`.
    pub fn numel(&self, group: ParamGroup) -> usize {
        self.params
            .values()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    /// First non-finite tensor, if any.
    pub fn find_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|(_, p)| !p.value.is_finite())
            .map(|(k, _)| k.as_str())
    }
}

/// RNG for a parameter, keyed by model seed and parameter name so that adding
/// or removing one tensor never shifts the initialization of another.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed.rotate_left(17))
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("uniform shape")
}

/// Weight `[out×in]` drawn from `U(±1/√in)`.
pub fn fan_in_weight(dout: usize, din: usize, rng: &mut impl Rng) -> Tensor {
    uniform(&[dout, din], 1.0 / (din.max(1) as f64).sqrt(), rng)
}

/// Lazily creates one tape leaf per parameter used in a forward pass.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder {
            store,
            vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::wiring(format!("missing parameter `{name}`")))?;
        let v = tape.leaf(p.value.clone(), p.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// `{prefix}.weight`, optional `{prefix}.bias`, and the LoRA pair
    /// `{prefix}.lora_a` / `{prefix}.lora_b` when present.
    pub fn linear(&mut self, tape: &mut Tape, prefix: &str, lora_scale: f64) -> Result<LinearVars> {
        let w = self.bind(tape, &format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.store.contains(&bias_name) {
            Some(self.bind(tape, &bias_name)?)
        } else {
            None
        };
        let a_name = format!("{prefix}.lora_a");
        let lora = if self.store.contains(&a_name) {
            Some(LoraVars {
                a: self.bind(tape, &a_name)?,
                b: self.bind(tape, &format!("{prefix}.lora_b"))?,
                scale: lora_scale,
            })
        } else {
            None
        };
        Ok(LinearVars { w, b, lora })
    }

    /// Gradients of every bound trainable parameter, in store order.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .filter_map(|(name, _)| {
                let v = self.vars.get(name)?;
                grads.take(*v).map(|g| (name.to_string(), g))
            })
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}
