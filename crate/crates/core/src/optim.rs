//! Adam over named parameters of one or more modules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorArchive;
use crate::nn::Module;
use crate::tensor::{lit, Scalar};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// First and second moment estimates keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Starts a new update; call [`Adam::apply`] once per module afterwards.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates every trainable parameter of `module` from its accumulated gradient.
    pub fn apply<M: Module<T> + ?Sized>(&mut self, prefix: &str, module: &mut M, lr: f64) {
        assert!(self.t > 0, "Adam::apply before begin_step");
        let c = self.config;
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let bc1 = lit::<T>(1.0 - c.beta1.powf(self.t as f64));
        let bc2 = lit::<T>(1.0 - c.beta2.powf(self.t as f64));
        let (lr, eps) = (lit::<T>(lr), lit::<T>(c.eps));
        let one = T::one();
        let state = &mut self.state;
        module.visit(prefix, &mut |name, p| {
            if !p.trainable {
                return;
            }
            let mo = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); p.len()],
                v: vec![T::zero(); p.len()],
            });
            for i in 0..p.value.len() {
                let g = p.grad[i];
                mo.m[i] = b1 * mo.m[i] + (one - b1) * g;
                mo.v[i] = b2 * mo.v[i] + (one - b2) * g * g;
                let mhat = mo.m[i] / bc1;
                let vhat = mo.v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }

    pub fn store(&self, archive: &mut TensorArchive) {
        for (name, mo) in &self.state {
            archive.insert(&format!("adam.m.{name}"), &[mo.m.len()], &mo.m);
            archive.insert(&format!("adam.v.{name}"), &[mo.v.len()], &mo.v);
        }
    }

    pub fn load(config: AdamConfig, t: u64, archive: &TensorArchive) -> Result<Self> {
        let mut adam = Self::new(config);
        adam.t = t;
        let names: Vec<String> = archive
            .names()
            .filter_map(|n| n.strip_prefix("adam.m."))
            .map(String::from)
            .collect();
        for name in names {
            let get = |kind: &str| {
                archive
                    .get::<T>(&format!("adam.{kind}.{name}"))
                    .map(|(_, v)| v)
                    .ok_or_else(|| Error::Config(format!("optimizer state for {name} is incomplete")))
            };
            adam.state.insert(
                name.clone(),
                Moments {
                    m: get("m")?,
                    v: get("v")?,
                },
            );
        }
        Ok(adam)
    }
}
