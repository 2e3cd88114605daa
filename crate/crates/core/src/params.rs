//! Named model parameters grouped into the three update partitions: encoder,
//! main decoder, auxiliary decoder.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Encoder,
    MainDecoder,
    AuxDecoder,
}

impl Partition {
    pub fn tag(self) -> u8 {
        match self {
            Partition::Encoder => 0,
            Partition::MainDecoder => 1,
            Partition::AuxDecoder => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Partition::Encoder),
            1 => Ok(Partition::MainDecoder),
            2 => Ok(Partition::AuxDecoder),
            t => Err(Error::Checkpoint(format!("unknown partition tag {t}"))),
        }
    }
}

/// How a parameter tensor is filled at registration time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform { lo: f64, hi: f64 },
    Normal { std: f64 },
    /// `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    UniformFan { fan_in: usize },
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub partition: Partition,
    pub init: Init,
    pub tensor: Tensor,
}

/// Ordered collection of named parameters. Registration order is the
/// deterministic iteration order everywhere (initialization draws, optimizer
/// sweeps, serialization).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<R: Rng>(
        &mut self,
        name: &str,
        partition: Partition,
        shape: Vec<usize>,
        init: Init,
        rng: &mut R,
    ) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        let mut tensor = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Ones => tensor = Tensor::full(tensor.shape().to_vec(), 1.0),
            Init::Uniform { lo, hi } => tensor.fill_uniform(lo, hi, rng),
            Init::Normal { std } => tensor.fill_normal(std, rng),
            Init::UniformFan { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                tensor.fill_uniform(-bound, bound, rng);
            }
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param { name: name.to_string(), partition, init, tensor });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries[self.index[name]].tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].tensor
    }

    pub fn partition_of(&self, name: &str) -> Partition {
        self.entries[self.index[name]].partition
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    /// Names in one or more partitions, in registration order.
    pub fn partition_names(&self, partitions: &[Partition]) -> Vec<String> {
        self.entries
            .iter()
            .filter(|p| partitions.contains(&p.partition))
            .map(|p| p.name.clone())
            .collect()
    }

    /// Bit-exact copy of one partition's tensors, for update-discipline checks.
    pub fn snapshot(&self, partitions: &[Partition]) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .filter(|p| partitions.contains(&p.partition))
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect()
    }

    pub fn total_coords(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.register("w", Partition::Encoder, vec![1], Init::Zeros, &mut rng);
        store.register("w", Partition::MainDecoder, vec![1], Init::Zeros, &mut rng);
    }

    #[test]
    fn snapshot_filters_by_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.register("enc.w", Partition::Encoder, vec![2], Init::Ones, &mut rng);
        store.register("dec.w", Partition::MainDecoder, vec![2], Init::Ones, &mut rng);
        store.register("aux.w", Partition::AuxDecoder, vec![2], Init::Ones, &mut rng);
        let snap = store.snapshot(&[Partition::Encoder, Partition::MainDecoder]);
        let names: Vec<&str> = snap.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["enc.w", "dec.w"]);
    }

    #[test]
    fn uniform_fan_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.register("w", Partition::Encoder, vec![100], Init::UniformFan { fan_in: 16 }, &mut rng);
        let bound = 0.25;
        assert!(store.get("w").values().iter().all(|v| v.abs() <= bound));
    }
}
