//! Low-rank adapters: W + scale·B·A on a chosen subset of layers.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{cast, ArchSpec, DenoiserParams, LayerId, Scalar};
use crate::error::{Result, TifError};
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer<F> {
    pub id: LayerId,
    /// rank × in.
    pub a: Array2<F>,
    /// out × rank.
    pub b: Array2<F>,
}

impl<F: Scalar> LoraLayer<F> {
    /// scale·B·A, the effective weight delta.
    pub fn delta(&self, scale: f64) -> Array2<F> {
        self.b.dot(&self.a) * cast::<F>(scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<F> {
    pub rank: usize,
    pub scale: f64,
    pub layers: Vec<LoraLayer<F>>,
}

impl<F: Scalar> LoraAdapter<F> {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.a.len() + l.b.len()).sum()
    }

    pub fn layer(&self, id: LayerId) -> Option<&LoraLayer<F>> {
        self.layers.iter().find(|l| l.id == id)
    }
}

/// Which layers receive an adapter, by name (`cond`, `w0`, `w1`, ..., `last`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerSubset(pub Vec<String>);

impl LayerSubset {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Self {
        Self(names.iter().map(|n| n.as_ref().to_string()).collect())
    }

    /// `{last}`, `{last, w1}`, `{last, w1, w0}`: the output layer plus
    /// progressively earlier hidden layers.
    pub fn preset(arch: &ArchSpec, depth: usize) -> Self {
        let mut names = vec!["last".to_string()];
        names.extend(
            (0..arch.hidden.len())
                .rev()
                .take(depth.saturating_sub(1))
                .map(|i| format!("w{i}")),
        );
        Self(names)
    }

    pub fn resolve(&self, arch: &ArchSpec) -> Result<Vec<LayerId>> {
        if self.0.is_empty() {
            return Err(TifError::InvalidArgument("empty LoRA subset".into()));
        }
        let mut ids = self
            .0
            .iter()
            .map(|n| arch.layer_by_name(n))
            .collect::<Result<Vec<_>>>()?;
        ids.sort();
        ids.dedup();
        Ok(ids)
    }

    pub fn label(&self) -> String {
        self.0.join("+")
    }
}

/// Zero-initialised adapter (B = 0) with A ~ Uniform(±1/√in).
pub fn inject_lora<F: Scalar>(
    params: &DenoiserParams<F>,
    rank: usize,
    subset: &LayerSubset,
    scale: f64,
    seed: u64,
) -> Result<LoraAdapter<F>> {
    if rank == 0 {
        return Err(TifError::InvalidArgument("LoRA rank must be >= 1".into()));
    }
    let arch = &params.arch;
    let ids = subset.resolve(arch)?;
    let mut rng = rng_for(seed, &[stream::INIT, rank as u64]);
    let mut layers = Vec::with_capacity(ids.len());
    for id in ids {
        let (out, inp) = arch.layer_dims(id).expect("resolved layer exists");
        if rank > out.min(inp) {
            return Err(TifError::InvalidArgument(format!(
                "rank {rank} exceeds min(in, out) = {} for layer {}",
                out.min(inp),
                arch.layer_name(id)
            )));
        }
        let bound = 1.0 / (inp as f64).sqrt();
        layers.push(LoraLayer {
            id,
            a: Array2::from_shape_fn((rank, inp), |_| cast(rng.gen_range(-bound..bound))),
            b: Array2::zeros((out, rank)),
        });
    }
    Ok(LoraAdapter {
        rank,
        scale,
        layers,
    })
}

/// One adapter per class; the condition vector y is shared through the base.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBank<F> {
    adapters: Vec<LoraAdapter<F>>,
}

impl<F: Scalar> AdapterBank<F> {
    pub fn new(adapters: Vec<LoraAdapter<F>>) -> Result<Self> {
        if adapters.is_empty() {
            return Err(TifError::InvalidArgument("empty adapter bank".into()));
        }
        Ok(Self { adapters })
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, class: usize) -> Result<&LoraAdapter<F>> {
        self.adapters
            .get(class)
            .ok_or_else(|| TifError::IndexOutOfRange(format!("class {class} not in adapter bank")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter<F>> {
        self.adapters.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserParams<f64> {
        let arch = ArchSpec {
            image_len: 6,
            time_dim: 4,
            cond_dim: 3,
            hidden: vec![8, 7],
        };
        DenoiserParams::init(&arch, 1).unwrap()
    }

    #[test]
    fn presets() {
        let arch = &tiny().arch;
        assert_eq!(LayerSubset::preset(arch, 1).0, vec!["last"]);
        assert_eq!(LayerSubset::preset(arch, 2).0, vec!["last", "w1"]);
        assert_eq!(LayerSubset::preset(arch, 3).0, vec!["last", "w1", "w0"]);
    }

    #[test]
    fn parameter_counts() {
        let p = tiny();
        let last = inject_lora(&p, 2, &LayerSubset::new(&["last"]), 1.0, 0).unwrap();
        let all = inject_lora(
            &p,
            2,
            &LayerSubset::new(&["cond", "w0", "w1", "last"]),
            1.0,
            0,
        )
        .unwrap();
        // last: 7 -> 6, w1: 8 -> 7, w0: (6+4+3) -> 8, cond: 3 -> 3.
        assert_eq!(last.num_params(), 2 * (7 + 6));
        assert_eq!(
            all.num_params(),
            2 * ((7 + 6) + (8 + 7) + (13 + 8) + (3 + 3))
        );
        assert!(last.num_params() < all.num_params());
    }

    #[test]
    fn rejects_bad_injections() {
        let p = tiny();
        assert!(inject_lora(&p, 0, &LayerSubset::new(&["last"]), 1.0, 0).is_err());
        assert!(inject_lora(&p, 4, &LayerSubset::new(&["cond"]), 1.0, 0).is_err());
        assert!(inject_lora(&p, 1, &LayerSubset::new(&["w9"]), 1.0, 0).is_err());
        assert!(inject_lora(&p, 1, &LayerSubset::new::<&str>(&[]), 1.0, 0).is_err());
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let p = tiny();
        let a = inject_lora(&p, 3, &LayerSubset::preset(&p.arch, 3), 1.0, 9).unwrap();
        for l in &a.layers {
            assert!(l.delta(a.scale).iter().all(|&v| v == 0.0));
            assert!(l.a.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn bank_lookup() {
        let p = tiny();
        let a = inject_lora(&p, 1, &LayerSubset::preset(&p.arch, 1), 1.0, 0).unwrap();
        let bank = AdapterBank::new(vec![a.clone(), a]).unwrap();
        assert!(bank.get(1).is_ok());
        assert!(bank.get(2).is_err());
        assert!(AdapterBank::<f64>::new(vec![]).is_err());
    }
}
