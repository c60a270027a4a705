use super::augment::{augment, AugmentConfig};
use super::image::decode_and_resize;
use super::manifest::{LensClass, SampleRecord};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// What a record is trained to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    /// Bonafide 0, attack 1.
    Binary,
    /// Position of the lens class in the list.
    LensClass(Vec<LensClass>),
}

impl Target {
    pub fn classes(&self) -> usize {
        match self {
            Target::Binary => 2,
            Target::LensClass(c) => c.len(),
        }
    }

    pub fn of(&self, r: &SampleRecord) -> Result<usize> {
        match self {
            Target::Binary => Ok(r.label.target()),
            Target::LensClass(classes) => classes
                .iter()
                .position(|c| *c == r.lens_class)
                .ok_or_else(|| Error::Data(format!("{}: lens class {} not in target list", r.path.display(), r.lens_class))),
        }
    }
}

pub struct Batch {
    /// `B×H×W×3`.
    pub images: Tensor<f32>,
    pub targets: Vec<usize>,
}

/// Decoded images held in memory next to their records.
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub images: Vec<Tensor<f32>>,
    pub targets: Vec<usize>,
    pub target: Target,
}

impl Dataset {
    pub fn load(records: Vec<SampleRecord>, size: usize, target: Target) -> Result<Self> {
        let targets = records.iter().map(|r| target.of(r)).collect::<Result<Vec<_>>>()?;
        let images = par::map_range(records.len(), |i| decode_and_resize(&records[i].path, (size, size)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            records,
            images,
            targets,
            target,
        })
    }

    pub fn from_parts(records: Vec<SampleRecord>, images: Vec<Tensor<f32>>, target: Target) -> Result<Self> {
        if records.len() != images.len() {
            return Err(Error::InvalidArgument(format!("{} records but {} images", records.len(), images.len())));
        }
        let targets = records.iter().map(|r| target.of(r)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            records,
            images,
            targets,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.target.classes()];
        for &t in &self.targets {
            out[t] += 1;
        }
        out
    }

    /// Stacks the samples at `indices`. With augmentation, each sample's
    /// transform depends only on its index and `epoch`.
    pub fn batch(&self, indices: &[usize], aug: Option<(&AugmentConfig, u64)>) -> Result<Batch> {
        let images = par::map_range(indices.len(), |k| {
            let i = indices[k];
            match aug {
                Some((cfg, epoch)) => augment(&self.images[i], cfg, (epoch << 32) ^ i as u64),
                None => self.images[i].clone(),
            }
        });
        Ok(Batch {
            images: Tensor::stack(&images)?,
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
        })
    }
}
