//! Structured pruning with restorable records, and the inverse rebuild.
//!
//! A [`PruneRecord`] keeps, for every pruned group, the original indices of
//! the removed channels and their values taken from the pre-step model. The
//! rebuild places the core's channels back at their original positions and
//! scatters the saved values into the gaps, so an untouched core rebuilds to
//! the pre-step model bit for bit.

mod cost;
mod stack;

use std::collections::BTreeMap;

pub use cost::{conv_flops, cost_report, CostReport};
pub use stack::{iterative_pipeline, ElasticModel, LayerSelection, LevelStack, PipelineConfig, PipelineOutput};

use crate::depgraph::{apply_index_drop, check_drop, CouplingEntry, DependencyGroup, EntryKind};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, NodeId, ParamKey, Role, Slot};
use crate::tensor::{Scalar, Tensor};

/// Values removed from one registry tensor along one channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedSlice<T> {
    pub slot: Slot,
    pub key: ParamKey,
    pub axis: usize,
    pub block: usize,
    pub values: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRecord<T> {
    pub entries: Vec<CouplingEntry>,
    pub pre_width: usize,
    /// Original indices of the removed channels, ascending.
    pub dropped: Vec<usize>,
    pub slices: Vec<SavedSlice<T>>,
}

impl<T: Scalar> GroupRecord<T> {
    pub fn post_width(&self) -> usize {
        self.pre_width - self.dropped.len()
    }

    /// The group as it appears in a model at the post-step width.
    pub fn post_group(&self) -> DependencyGroup {
        DependencyGroup {
            entries: self.entries.clone(),
            width: self.post_width(),
            prunable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneRecord<T> {
    pub step: usize,
    pub groups: Vec<GroupRecord<T>>,
    /// Registry checksum of the model the step was taken from.
    pub pre_checksum: String,
    /// Structure fingerprint of the model the step produced.
    pub post_structure: String,
}

impl<T: Scalar> PruneRecord<T> {
    pub fn dropped_total(&self) -> usize {
        self.groups.iter().map(|g| g.dropped.len()).sum()
    }

    /// Re-reads every saved slice from `pre`, a model with the pre-step
    /// structure. Used after soft pruning, where the slices captured at
    /// extraction time are the zeroed ones.
    pub fn recapture(&mut self, pre: &ModelGraph<T>) -> Result<()> {
        for g in &mut self.groups {
            for s in &mut g.slices {
                let origin = pre
                    .origin(s.slot)
                    .ok_or_else(|| Error::RecordMismatch(format!("slot {} missing from model", s.slot)))?;
                let pos = positions_of(origin, &g.dropped, s.slot)?;
                let t = pre
                    .param(s.key)
                    .ok_or_else(|| Error::RecordMismatch(format!("tensor {} missing from model", s.key)))?;
                let fresh = t.gather_axis(s.axis, &pos, s.block)?;
                if fresh.shape() != s.values.shape() {
                    return Err(Error::RecordMismatch(format!(
                        "slice {} has shape {:?}, model gives {:?}",
                        s.key,
                        s.values.shape(),
                        fresh.shape()
                    )));
                }
                s.values = fresh;
            }
        }
        self.pre_checksum = pre.registry_checksum();
        Ok(())
    }
}

/// Positions of `wanted` (original indices) within an origin map.
fn positions_of(origin: &[usize], wanted: &[usize], slot: Slot) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| {
            origin
                .binary_search(w)
                .map_err(|_| Error::RecordMismatch(format!("original channel {} not present in slot {}", w, slot)))
        })
        .collect()
}

/// Per-coordinate freeze flags for selective fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FreezeMask {
    /// `true` = core coordinate, must not change.
    pub params: BTreeMap<ParamKey, Vec<bool>>,
    /// Batchnorm channels whose running statistics must not change.
    pub bn_channels: BTreeMap<NodeId, Vec<bool>>,
}

impl FreezeMask {
    /// Every coordinate of `model` frozen.
    pub fn all<T: Scalar>(model: &ModelGraph<T>) -> Self {
        let params = model.params().map(|(k, t)| (*k, vec![true; t.numel()])).collect();
        let bn_channels = model
            .params()
            .filter(|(k, _)| k.role == Role::Gamma)
            .map(|(k, t)| (k.node, vec![true; t.numel()]))
            .collect();
        FreezeMask { params, bn_channels }
    }

    pub fn frozen_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| !k.role.is_buffer())
            .map(|(_, m)| m.iter().filter(|f| **f).count())
            .sum()
    }
}

fn check_all<T: Scalar>(model: &ModelGraph<T>, groups: &[DependencyGroup], drops: &[Vec<usize>]) -> Result<()> {
    if groups.len() != drops.len() {
        return Err(Error::InvalidArgument(format!(
            "{} drop sets for {} groups",
            drops.len(),
            groups.len()
        )));
    }
    for (g, d) in groups.iter().zip(drops) {
        check_drop(model, g, d)?;
    }
    Ok(())
}

/// Removes the given channels (current indices per group) and records what
/// was removed. The input model is not modified.
pub fn hard_prune<T: Scalar>(
    model: &ModelGraph<T>,
    groups: &[DependencyGroup],
    drops: &[Vec<usize>],
) -> Result<(ModelGraph<T>, PruneRecord<T>)> {
    check_all(model, groups, drops)?;
    let mut records = Vec::new();
    for (g, d) in groups.iter().zip(drops) {
        if d.is_empty() {
            continue;
        }
        let mut slices = Vec::new();
        let mut dropped = None;
        for e in &g.entries {
            let slot = e.slot();
            let origin = model.origin(slot).expect("slot has origin");
            let orig: Vec<usize> = d.iter().map(|&i| origin[i]).collect();
            if dropped.get_or_insert_with(|| orig.clone()) != &orig {
                return Err(Error::IllegalDrop(format!(
                    "origin maps disagree within the group of slot {}",
                    slot
                )));
            }
            for axis in model.slot_axes(slot) {
                let values = model
                    .param(axis.key)
                    .expect("slot tensor")
                    .gather_axis(axis.axis, d, axis.block)?;
                slices.push(SavedSlice {
                    slot,
                    key: axis.key,
                    axis: axis.axis,
                    block: axis.block,
                    values,
                });
            }
        }
        records.push(GroupRecord {
            entries: g.entries.clone(),
            pre_width: g.width,
            dropped: dropped.unwrap_or_default(),
            slices,
        });
    }
    let mut core = model.clone();
    for (g, d) in groups.iter().zip(drops) {
        apply_index_drop(&mut core, g, d)?;
    }
    core.infer_shapes()?;
    let record = PruneRecord {
        step: 0,
        groups: records,
        pre_checksum: model.registry_checksum(),
        post_structure: core.structure_fingerprint(),
    };
    Ok((core, record))
}

/// Zeroes the dropped channels in place of removing them: conv filters and
/// biases, batchnorm γ and β, and running statistics reset to (0, 1). Input
/// slices of downstream layers are left as they are; they only ever see
/// zeros.
pub fn soft_prune<T: Scalar>(
    model: &ModelGraph<T>,
    groups: &[DependencyGroup],
    drops: &[Vec<usize>],
) -> Result<ModelGraph<T>> {
    check_all(model, groups, drops)?;
    let mut out = model.clone();
    for (g, d) in groups.iter().zip(drops) {
        if d.is_empty() {
            continue;
        }
        for e in &g.entries {
            if !matches!(
                e.kind,
                EntryKind::ConvOut | EntryKind::LinearOut | EntryKind::BnChannels
            ) {
                continue;
            }
            for axis in out.slot_axes(e.slot()) {
                let fill = if axis.key.role == Role::RunningVar {
                    T::one()
                } else {
                    T::zero()
                };
                let t = out.param_mut(axis.key).expect("slot tensor");
                let mut shape = t.shape().to_vec();
                shape[axis.axis] = d.len() * axis.block;
                t.scatter_axis(axis.axis, d, axis.block, &Tensor::full(&shape, fill))?;
            }
        }
    }
    Ok(out)
}

/// Channels detected as soft-pruned: every conv filter of the group is zero.
/// `ambiguous` lists detections whose bias, γ or β is nonzero, i.e. channels
/// that may carry signal despite having no weights.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Detection {
    pub drops: Vec<Vec<usize>>,
    pub ambiguous: Vec<(usize, usize)>,
}

pub fn detect_zeroed<T: Scalar>(model: &ModelGraph<T>, groups: &[DependencyGroup]) -> Result<Detection> {
    let mut det = Detection::default();
    for (gi, g) in groups.iter().enumerate() {
        let mut drop = Vec::new();
        if g.prunable {
            for c in 0..g.width {
                let mut zero = true;
                let mut residue = false;
                for e in g
                    .entries
                    .iter()
                    .filter(|e| matches!(e.kind, EntryKind::ConvOut | EntryKind::BnChannels))
                {
                    for axis in model.slot_axes(e.slot()) {
                        if axis.key.role.is_buffer() {
                            continue;
                        }
                        let t = model.param(axis.key).expect("slot tensor");
                        let slice = t.gather_axis(axis.axis, &[c], axis.block)?;
                        let nonzero = slice.data().iter().any(|v| *v != T::zero());
                        match (e.kind, axis.key.role) {
                            (EntryKind::ConvOut, Role::Weight) => zero &= !nonzero,
                            _ => residue |= nonzero,
                        }
                    }
                }
                if zero {
                    drop.push(c);
                    if residue {
                        det.ambiguous.push((gi, c));
                    }
                }
            }
            if drop.len() == g.width {
                // an all-zero group keeps its first channel
                drop.remove(0);
            }
        }
        det.drops.push(drop);
    }
    Ok(det)
}

/// Builds the compact model holding only the channels that survived soft
/// pruning. The record's slices are the zeroed values; see
/// [`PruneRecord::recapture`] to restore the originals.
pub fn extract_core<T: Scalar>(
    soft: &ModelGraph<T>,
    groups: &[DependencyGroup],
) -> Result<(ModelGraph<T>, PruneRecord<T>)> {
    let det = detect_zeroed(soft, groups)?;
    for (g, c) in &det.ambiguous {
        log::warn!(
            "group {} channel {} has zero filters but nonzero bias or affine terms; treated as pruned",
            g,
            c
        );
    }
    hard_prune(soft, groups, &det.drops)
}

/// Reinserts the channels of `record` into `core`. Kept channels move to
/// their original positions with the core's current values; removed ones
/// get the saved values. The mask freezes exactly the core coordinates.
pub fn rebuild<T: Scalar>(core: &ModelGraph<T>, record: &PruneRecord<T>) -> Result<(ModelGraph<T>, FreezeMask)> {
    if core.structure_fingerprint() != record.post_structure {
        return Err(Error::RecordMismatch(format!(
            "model structure does not match the output of prune step {}",
            record.step
        )));
    }
    struct Placement {
        pre_width: usize,
        block: usize,
        merged: Vec<usize>,
        kept_pos: Vec<usize>,
        drop_pos: Vec<usize>,
    }
    let mut placements: BTreeMap<Slot, Placement> = BTreeMap::new();
    for g in &record.groups {
        for e in &g.entries {
            let slot = e.slot();
            let cur = core
                .origin(slot)
                .ok_or_else(|| Error::RecordMismatch(format!("slot {} missing from core", slot)))?;
            if cur.len() + g.dropped.len() != g.pre_width {
                return Err(Error::RecordMismatch(format!(
                    "slot {} has width {}, record expects {} - {}",
                    slot,
                    cur.len(),
                    g.pre_width,
                    g.dropped.len()
                )));
            }
            let mut merged: Vec<usize> = cur.iter().chain(&g.dropped).copied().collect();
            merged.sort_unstable();
            if merged.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::RecordMismatch(format!(
                    "reinserted channels overlap kept ones in slot {}",
                    slot
                )));
            }
            let kept_pos = positions_of(&merged, cur, slot)?;
            let drop_pos = positions_of(&merged, &g.dropped, slot)?;
            let placement = Placement {
                pre_width: g.pre_width,
                block: core.slot_block(slot),
                merged,
                kept_pos,
                drop_pos,
            };
            if placements.insert(slot, placement).is_some() {
                return Err(Error::RecordMismatch(format!(
                    "slot {} appears twice in the record",
                    slot
                )));
            }
        }
    }
    for g in &record.groups {
        for s in &g.slices {
            let p = placements
                .get(&s.slot)
                .ok_or_else(|| Error::RecordMismatch(format!("slice for unknown slot {}", s.slot)))?;
            if s.values.shape().get(s.axis) != Some(&(p.drop_pos.len() * s.block)) {
                return Err(Error::RecordMismatch(format!(
                    "slice {} has shape {:?}",
                    s.key,
                    s.values.shape()
                )));
            }
        }
    }

    // widen every sliced axis, zeros at reinserted positions
    let mut full = core.clone();
    let mut ones: BTreeMap<ParamKey, Tensor<T>> = core
        .params()
        .map(|(k, t)| (*k, Tensor::full(t.shape(), T::one())))
        .collect();
    for (slot, p) in &placements {
        for axis in core.slot_axes(*slot) {
            let t = full.param(axis.key).expect("slot tensor");
            let widened = t.expand_axis(axis.axis, p.pre_width, &p.kept_pos, axis.block)?;
            full.replace_param(axis.key, widened);
            let m = ones.get_mut(&axis.key).expect("mask tensor");
            *m = m.expand_axis(axis.axis, p.pre_width, &p.kept_pos, axis.block)?;
        }
    }
    for g in &record.groups {
        for s in &g.slices {
            let p = &placements[&s.slot];
            let t = full.param_mut(s.key).expect("slot tensor");
            if t.shape().len() != s.values.shape().len() {
                return Err(Error::RecordMismatch(format!("slice {} rank mismatch", s.key)));
            }
            t.scatter_axis(s.axis, &p.drop_pos, s.block, &s.values)?;
        }
    }
    for (slot, p) in placements {
        full.set_origin(slot, p.merged);
        full.set_slot_extent(slot, p.pre_width, p.block);
    }
    full.infer_shapes()?;
    for (k, t) in full.params() {
        if t.shape() != ones[k].shape() {
            return Err(Error::RecordMismatch(format!(
                "tensor {} rebuilt to inconsistent shape",
                k
            )));
        }
    }

    let params: BTreeMap<ParamKey, Vec<bool>> = ones
        .into_iter()
        .map(|(k, t)| (k, t.data().iter().map(|v| *v == T::one()).collect()))
        .collect();
    let bn_channels = params
        .iter()
        .filter(|(k, _)| k.role == Role::Gamma)
        .map(|(k, m)| (k.node, m.clone()))
        .collect();
    Ok((full, FreezeMask { params, bn_channels }))
}

/// Applies a record's drop again to a model at the record's pre-step
/// structure (for example a rebuilt and selectively fine-tuned model),
/// without capturing anything.
pub fn reapply<T: Scalar>(model: &ModelGraph<T>, record: &PruneRecord<T>) -> Result<ModelGraph<T>> {
    let mut out = model.clone();
    for g in &record.groups {
        let slot = g.entries[0].slot();
        let origin = model
            .origin(slot)
            .ok_or_else(|| Error::RecordMismatch(format!("slot {} missing from model", slot)))?;
        let drop = positions_of(origin, &g.dropped, slot)?;
        let group = DependencyGroup {
            entries: g.entries.clone(),
            width: g.pre_width,
            prunable: true,
        };
        apply_index_drop(&mut out, &group, &drop).map_err(|e| Error::RecordMismatch(e.to_string()))?;
    }
    if out.structure_fingerprint() != record.post_structure {
        return Err(Error::RecordMismatch(format!(
            "re-applying step {} does not reproduce its structure",
            record.step
        )));
    }
    Ok(out)
}
