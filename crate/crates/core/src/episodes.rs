//! N-way K-shot episode sampling.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{ClassId, Dataset, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Classes per episode (`n_t`).
    pub way: usize,
    /// Support samples per class (`n_s`).
    pub shot: usize,
    /// Query samples per class (`n_q`).
    pub query: usize,
    pub split: Split,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            query: 15,
            split: Split::Base,
        }
    }
}

impl EpisodeConfig {
    pub fn new(way: usize, shot: usize, query: usize, split: Split) -> Self {
        Self {
            way,
            shot,
            query,
            split,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot < 1 || self.query < 1 {
            return Err(Error::Config(format!(
                "episode needs way >= 2, shot >= 1, query >= 1 (got {}-way {}-shot {} queries)",
                self.way, self.shot, self.query
            )));
        }
        Ok(())
    }
}

/// A sample inside an episode, labelled by its class position in
/// [`Episode::classes`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeItem {
    pub sample: usize,
    pub label: usize,
}

/// One sampled task. Support and query lists are class-major: the items of
/// `classes[0]` come first, then `classes[1]`, and so on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<ClassId>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    pub shot: usize,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|q| q.label).collect()
    }
}

pub fn sample_episode<R: Rng + ?Sized>(
    ds: &Dataset,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    cfg.validate()?;
    let pool = ds.classes_in(cfg.split);
    if pool.len() < cfg.way {
        return Err(Error::Insufficient {
            what: format!("{}-way episode on {} split", cfg.way, cfg.split.as_str()),
            required: cfg.way,
            available: pool.len(),
        });
    }
    let per_class = cfg.shot + cfg.query;
    if let Some(&short) = pool.iter().find(|&&c| ds.samples_of(c).len() < per_class) {
        return Err(Error::Insufficient {
            what: format!("class `{}` samples", ds.class_name(short)),
            required: per_class,
            available: ds.samples_of(short).len(),
        });
    }

    let classes: Vec<ClassId> = index::sample(rng, pool.len(), cfg.way)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let mut support = Vec::with_capacity(cfg.way * cfg.shot);
    let mut query = Vec::with_capacity(cfg.way * cfg.query);
    for (label, &class) in classes.iter().enumerate() {
        let members = ds.samples_of(class);
        let picked = index::sample(rng, members.len(), per_class);
        for (j, i) in picked.into_iter().enumerate() {
            let item = EpisodeItem {
                sample: members[i],
                label,
            };
            if j < cfg.shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        classes,
        support,
        query,
        shot: cfg.shot,
    })
}
