//! Trained-model files: configuration, normalizer and every parameter
//! tensor in one JSON document.
//!
//! Floats are written in shortest round-trip form, so a save/load cycle
//! reproduces every bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, Parameters};
use crate::tensor::Tensor;

pub const FORMAT: &str = "surgvae-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub normalizer: NormStats,
    pub train_seed: u64,
    pub loss_weights: LossWeights,
    /// Held-out fold the model never saw, when trained inside a split.
    pub fold: Option<usize>,
    pub target_group: usize,
    /// Case ids of the held-out rows; explanations default to these.
    #[serde(default)]
    pub eval_cases: Vec<String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(
        params: &Parameters,
        normalizer: &NormStats,
        train_seed: u64,
        loss_weights: &LossWeights,
    ) -> Self {
        let tensors = params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: params.config.clone(),
            normalizer: normalizer.clone(),
            train_seed,
            loss_weights: loss_weights.clone(),
            fold: None,
            target_group: 0,
            eval_cases: Vec::new(),
            tensors,
        }
    }

    pub fn parameters(&self) -> Result<Parameters> {
        let named = self
            .tensors
            .iter()
            .map(|t| Ok((t.name.clone(), Tensor::new(t.shape.clone(), t.values.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Parameters::from_named(&self.model, named)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Value(format!(
                "not a {FORMAT} v{VERSION} file (found {} v{})",
                ck.format, ck.version
            )));
        }
        let nf = ck.model.features;
        if ck.normalizer.mean.len() != nf || ck.normalizer.std.len() != nf {
            return Err(Error::Value(format!(
                "normalizer covers {} features, model expects {nf}",
                ck.normalizer.mean.len()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            features: 7,
            invariant_dim: 3,
            specific_dim: 2,
            enc_hidden: 8,
            dec_hidden: 8,
            head_hidden: 4,
            seed: 11,
            ..ModelConfig::default()
        };
        let mut p = Parameters::init(&cfg).unwrap();
        // awkward values: subnormals, extremes, negative zero
        let mut r = rng::stream(3, &[]);
        let specials = [f64::MIN_POSITIVE / 3.0, f64::MAX, -0.0, 1.0 / 3.0, -1e-300];
        for (k, t) in p.tensors_mut().iter_mut().enumerate() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = if i < specials.len() && k % 3 == 0 {
                    specials[i]
                } else {
                    r.gen_range(-1.0..1.0) * 10f64.powi(r.gen_range(-20..20))
                };
            }
        }
        let norm = NormStats {
            mean: vec![0.1; 7],
            std: vec![3.0f64.sqrt(); 7],
        };
        let mut ck = Checkpoint::new(&p, &norm, 42, &LossWeights::default());
        ck.fold = Some(2);
        ck.eval_cases = vec!["c1".into(), "c9".into()];
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let q = back.parameters().unwrap();
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_foreign_documents() {
        assert!(Checkpoint::from_json("{\"format\":\"x\"}").is_err());
    }
}
