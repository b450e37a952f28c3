//! Context tokens: per-group embeddings placed in slot 1 of the input
//! sequence, either looked up from a trainable table (oracle) or inferred
//! on the fly from the batch members that share a group.

mod infer;
mod kind;
mod model;

pub use infer::{
    apply_linear_head, deep_sets_infer, infer_context_mean, oracle_lookup,
    sample_context_patches, DeepSets, EmaState, OracleTable, SetMlp, DEFAULT_EMA_LAMBDA,
};
pub use kind::{ContextKind, Inference, DEFAULT_CONTEXT_PATCHES, KIND_NAMES};
pub use model::{contextvit_forward, ContextParams, ContextViT, ForwardOptions, ForwardOutput};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Identifier of a group (hospital, plate, region, …).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId(pub u64);

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Batch indices grouped by [`GroupId`], groups in first-occurrence order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    groups: Vec<(GroupId, Vec<usize>)>,
    slot_of: Vec<usize>,
}

impl Partition {
    pub fn groups(&self) -> impl Iterator<Item = (GroupId, &[usize])> {
        self.groups.iter().map(|(g, m)| (*g, m.as_slice()))
    }

    pub fn group_ids(&self) -> Vec<GroupId> {
        self.groups.iter().map(|(g, _)| *g).collect()
    }

    pub fn members(&self, group: GroupId) -> Option<&[usize]> {
        self.groups
            .iter()
            .find(|(g, _)| *g == group)
            .map(|(_, m)| m.as_slice())
    }

    /// Position of the group of batch element `i` in [`Partition::groups`].
    pub fn slot_of(&self, i: usize) -> usize {
        self.slot_of[i]
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

pub fn group_partition(groups: &[GroupId]) -> Partition {
    let mut out: Vec<(GroupId, Vec<usize>)> = Vec::new();
    let mut slot_of = Vec::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        match out.iter().position(|(k, _)| k == g) {
            Some(s) => {
                out[s].1.push(i);
                slot_of.push(s);
            }
            None => {
                slot_of.push(out.len());
                out.push((*g, vec![i]));
            }
        }
    }
    Partition {
        groups: out,
        slot_of,
    }
}

/// Images with labels and group ids; `images` is `[B × H × W × C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub groups: Vec<GroupId>,
    pub partition: Partition,
}

impl GroupedBatch {
    pub fn new(images: Tensor, labels: Vec<usize>, groups: Vec<GroupId>) -> Result<Self> {
        let b = groups.len();
        if b == 0 {
            return Err(Error::Empty("batch with no images".into()));
        }
        if labels.len() != b || images.shape().first() != Some(&b) {
            return Err(Error::shape(
                "GroupedBatch",
                format!(
                    "images {:?}, {} labels, {} groups",
                    images.shape(),
                    labels.len(),
                    b
                ),
            ));
        }
        let partition = group_partition(&groups);
        Ok(Self {
            images,
            labels,
            groups,
            partition,
        })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Sub-batch of the given elements, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let per = self.images.len() / self.len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Self::new(
            Tensor::new(shape, data)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
            idx.iter().map(|&i| self.groups[i]).collect(),
        )
    }
}
