//! JSON checkpoints: the run config plus every parameter tensor by name.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, params: &ModelParams) -> Self {
        let tensors = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| {
                (
                    name,
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        values: t.values().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            tensors,
        }
    }

    /// Floats are written in their shortest round-tripping form.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Rebuilds the parameters. Every tensor the config implies must be
    /// present with the right shape, and no others.
    pub fn params(&self) -> Result<ModelParams> {
        let first = self
            .tensors
            .get("embed.layer0.weight")
            .ok_or_else(|| Error::Checkpoint("missing tensor `embed.layer0.weight`".into()))?;
        let d_x = *first
            .shape
            .first()
            .ok_or_else(|| Error::Checkpoint("`embed.layer0.weight` has no shape".into()))?;
        let way = self
            .tensors
            .get("margin_gen.layer0.weight")
            .and_then(|t| t.shape.first())
            .map_or(self.config.episode.way, |w| w + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params =
            ModelParams::init(&self.config.model, &self.config.loss, d_x, way, &mut rng)?;
        let mut seen = 0;
        for (name, t) in params.named_tensors_mut() {
            let rec = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if rec.shape != t.shape() || rec.values.len() != t.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    rec.shape,
                    t.shape()
                )));
            }
            t.values_mut().copy_from_slice(&rec.values);
            seen += 1;
        }
        if seen != self.tensors.len() {
            let known: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
            let extra = self.tensors.keys().find(|k| !known.contains(k)).unwrap();
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossName;
    use crate::train::init_params;

    fn config(kind: LossName) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.loss.kind = kind;
        cfg.model.widths = vec![6, 3];
        cfg
    }

    #[test]
    fn round_trip_is_exact() {
        for kind in [
            LossName::Plain,
            LossName::ClassRelevant,
            LossName::TaskRelevant,
        ] {
            let cfg = config(kind);
            let mut p = init_params(&cfg, 5).unwrap();
            p.metric.log_temperature.values_mut()[0] = 0.1f64.ln();
            let ck = Checkpoint::new(&cfg, &p);
            let back = Checkpoint::from_json(&ck.to_json()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.params().unwrap(), p);
        }
    }

    #[test]
    fn shape_errors_are_named() {
        let cfg = config(LossName::Plain);
        let p = init_params(&cfg, 5).unwrap();
        let mut ck = Checkpoint::new(&cfg, &p);
        ck.tensors.get_mut("embed.layer1.bias").unwrap().shape = vec![4];
        let err = ck.params().unwrap_err().to_string();
        assert!(err.contains("embed.layer1.bias"), "{err}");

        let mut ck = Checkpoint::new(&cfg, &p);
        ck.tensors.remove("metric.log_temperature");
        assert!(ck
            .params()
            .unwrap_err()
            .to_string()
            .contains("log_temperature"));

        let mut ck = Checkpoint::new(&cfg, &p);
        ck.tensors.insert(
            "margin.alpha".into(),
            TensorRecord {
                shape: vec![1],
                values: vec![0.0],
            },
        );
        assert!(ck
            .params()
            .unwrap_err()
            .to_string()
            .contains("margin.alpha"));

        let mut ck = Checkpoint::new(&cfg, &p);
        ck.format_version = 99;
        assert!(Checkpoint::from_json(&ck.to_json()).is_err());
    }
}
