//! Named parameter registry with order-independent deterministic initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out)))`.
    FanScaledUniform,
    Zeros,
    Ones,
}

/// 64-bit FNV-1a over the seed bytes followed by the name bytes.
fn stream_key(seed: u64, name: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    seed.to_le_bytes()
        .iter()
        .chain(name.as_bytes())
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// `(fan_in, fan_out)` for the layouts used in this crate: conv kernels
/// `[out, in/groups, kh, kw]`, linear maps `[in, out]`, and vectors.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [cout, cin, kh, kw] => (cin * kh * kw, cout * kh * kw),
        [fin, fout] => (fin, fout),
        _ => {
            let n = shape.iter().product();
            (n, n)
        }
    }
}

/// Pure function of `(seed, name, shape, scheme)`.
pub fn init_param(name: &str, shape: &[usize], scheme: Init, seed: u64) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Registry(format!(
            "parameter `{name}` has empty shape {shape:?}"
        )));
    }
    Ok(match scheme {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::FanScaledUniform => {
            let (fi, fo) = fans(shape);
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, name));
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
        }
    })
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn init(&mut self, name: &str, shape: &[usize], scheme: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Registry(format!("duplicate parameter `{name}`")));
        }
        let t = init_param(name, shape, scheme, self.seed)?;
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Registry(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replaces an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Registry(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Registry(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (_, t) in self
            .params
            .iter_mut()
            .filter(|(k, _)| k.starts_with(prefix))
        {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}
