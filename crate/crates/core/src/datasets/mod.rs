//! Labeled feature datasets with fixed base / validation / novel class splits.

mod blobs;
mod io;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use blobs::{
    generate_blobs, generate_blobs_with_means, min_mean_separation, BlobSpec, Blobs, SplitCounts,
};
pub use io::{load_csv, save_csv, DataFiles};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub usize);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(Split::Base),
            "val" => Some(Split::Val),
            "novel" => Some(Split::Novel),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub class: ClassId,
}

/// Samples plus the class metadata they index into. Class ids are dense:
/// `ClassId(i)` names `class_names[i]` and belongs to `splits[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    splits: Vec<Split>,
    d_x: usize,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, splits: Vec<Split>) -> Result<Self> {
        if class_names.len() != splits.len() {
            return Err(Error::Data(format!(
                "{} class names but {} split assignments",
                class_names.len(),
                splits.len()
            )));
        }
        let mut seen = HashMap::new();
        for (i, name) in class_names.iter().enumerate() {
            if let Some(prev) = seen.insert(name.as_str(), i) {
                return Err(Error::Data(format!(
                    "class name `{name}` used by ids {prev} and {i}"
                )));
            }
        }
        let d_x = samples.first().map_or(0, |s| s.features.len());
        let mut by_class = vec![Vec::new(); class_names.len()];
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != d_x {
                return Err(Error::Data(format!(
                    "sample {i} has {} features, expected {d_x}",
                    s.features.len()
                )));
            }
            let list = by_class
                .get_mut(s.class.0)
                .ok_or_else(|| Error::Data(format!("sample {i} has unknown class {}", s.class)))?;
            list.push(i);
        }
        Ok(Self {
            samples,
            class_names,
            splits,
            d_x,
            by_class,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_name(&self, id: ClassId) -> &str {
        &self.class_names[id.0]
    }

    pub fn class_id(&self, name: &str) -> Option<ClassId> {
        self.class_names.iter().position(|n| n == name).map(ClassId)
    }

    pub fn split_of(&self, id: ClassId) -> Split {
        self.splits[id.0]
    }

    /// Classes of `split`, ascending by id.
    pub fn classes_in(&self, split: Split) -> Vec<ClassId> {
        (0..self.splits.len())
            .filter(|&i| self.splits[i] == split)
            .map(ClassId)
            .collect()
    }

    /// Indices of every sample of `class`, in file order.
    pub fn samples_of(&self, class: ClassId) -> &[usize] {
        &self.by_class[class.0]
    }
}
