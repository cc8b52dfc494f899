//! Channel coupling analysis.
//!
//! Every node output carries a *channel space*. Convs and linears open a new
//! space for their outputs; batchnorm, activations and pools pass their
//! input's space through; an add node unifies the spaces of both operands.
//! A union-find over spaces then yields the dependency groups: all the
//! layer dimensions that must lose the same channel indices together.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph, NodeId, Slot, SlotDim};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    ConvOut,
    ConvIn,
    BnChannels,
    LinearOut,
    LinearIn,
}

impl EntryKind {
    pub fn dim(self) -> SlotDim {
        match self {
            EntryKind::ConvOut | EntryKind::LinearOut => SlotDim::Out,
            EntryKind::ConvIn | EntryKind::LinearIn => SlotDim::In,
            EntryKind::BnChannels => SlotDim::Channel,
        }
    }
}

/// One coupled layer dimension. `expansion` is the number of consecutive
/// linear-input columns fed by one channel (the flattened spatial size at a
/// conv → flatten → linear boundary, 1 everywhere else).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CouplingEntry {
    pub node: NodeId,
    pub kind: EntryKind,
    pub expansion: usize,
}

impl CouplingEntry {
    pub fn slot(&self) -> Slot {
        Slot::new(self.node, self.kind.dim())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyGroup {
    pub entries: Vec<CouplingEntry>,
    pub width: usize,
    pub prunable: bool,
}

impl DependencyGroup {
    pub fn conv_outs(&self) -> impl Iterator<Item = &CouplingEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::ConvOut)
    }

    /// Stable identity across prune steps (widths change, entries do not).
    pub fn key(&self) -> Vec<Slot> {
        self.entries.iter().map(CouplingEntry::slot).collect()
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new() -> Self {
        UnionFind {
            parent: Vec::new(),
            rank: Vec::new(),
        }
    }

    fn make(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.rank.push(0);
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Partitions every channel slot of `model` into dependency groups.
///
/// A group is prunable when it contains at least one conv output and touches
/// neither the network input, the classifier output, nor the output of a
/// `protected` layer.
pub fn build_groups<T: Scalar>(model: &ModelGraph<T>, protected: &BTreeSet<NodeId>) -> Result<Vec<DependencyGroup>> {
    let shapes = model.infer_shapes()?;
    let mut uf = UnionFind::new();
    // (space, columns per channel) of each node's output
    let mut spaces: Vec<(usize, usize)> = Vec::with_capacity(model.nodes().len());
    let mut entries: Vec<(usize, CouplingEntry)> = Vec::new();
    let mut input_space = None;
    let mut pinned: Vec<usize> = Vec::new();

    for node in model.nodes() {
        let unsupported = || Error::UnsupportedCoupling {
            node: node.id.0,
            kind: node.kind.name(),
        };
        let input = node.inputs.first().map(|i| spaces[i.0]);
        let spatial_input = || match input {
            Some((s, 1)) => Ok(s),
            _ => Err(unsupported()),
        };
        let mut entry = |space, kind, expansion| {
            entries.push((
                space,
                CouplingEntry {
                    node: node.id,
                    kind,
                    expansion,
                },
            ))
        };
        let out = match node.kind {
            LayerKind::Input { .. } => {
                let s = uf.make();
                input_space = Some(s);
                (s, 1)
            }
            LayerKind::Conv2d { .. } => {
                let s = spatial_input()?;
                entry(s, EntryKind::ConvIn, 1);
                let t = uf.make();
                entry(t, EntryKind::ConvOut, 1);
                if protected.contains(&node.id) {
                    pinned.push(t);
                }
                (t, 1)
            }
            LayerKind::BatchNorm2d { .. } => {
                let s = spatial_input()?;
                entry(s, EntryKind::BnChannels, 1);
                (s, 1)
            }
            LayerKind::Relu => input.ok_or_else(unsupported)?,
            LayerKind::MaxPool2d { .. } | LayerKind::AvgPool2d { .. } => (spatial_input()?, 1),
            LayerKind::Add => {
                let a = spaces[node.inputs[0].0];
                let b = spaces[node.inputs[1].0];
                if a.1 != b.1 {
                    return Err(unsupported());
                }
                uf.union(a.0, b.0);
                a
            }
            LayerKind::Flatten => {
                let (s, f) = input.ok_or_else(unsupported)?;
                let src = &shapes[node.inputs[0].0];
                match src.as_slice() {
                    [_, h, w] => (s, f * h * w),
                    _ => (s, f),
                }
            }
            LayerKind::Linear { .. } => {
                let (s, f) = input.ok_or_else(unsupported)?;
                entry(s, EntryKind::LinearIn, f);
                let t = uf.make();
                entry(t, EntryKind::LinearOut, 1);
                if protected.contains(&node.id) || node.id == model.output() {
                    pinned.push(t);
                }
                (t, 1)
            }
        };
        spaces.push(out);
    }

    let input_root = input_space.map(|s| uf.find(s));
    let pinned: BTreeSet<usize> = pinned.into_iter().map(|s| uf.find(s)).collect();
    let mut by_root: BTreeMap<usize, Vec<CouplingEntry>> = BTreeMap::new();
    for (space, e) in entries {
        by_root.entry(uf.find(space)).or_default().push(e);
    }

    let mut groups = Vec::with_capacity(by_root.len());
    for (root, mut members) in by_root {
        members.sort();
        let mut width = None;
        for e in &members {
            let w = model
                .slot_width(e.slot())
                .ok_or_else(|| Error::InvalidArgument(format!("slot {} has no origin map", e.slot())))?;
            match width {
                None => width = Some(w),
                Some(prev) if prev != w => {
                    return Err(Error::NodeShape {
                        node: e.node.0,
                        kind: model.node(e.node).kind.name(),
                        message: format!("coupled width {} disagrees with group width {}", w, prev),
                    })
                }
                _ => {}
            }
        }
        let prunable =
            members.iter().any(|e| e.kind == EntryKind::ConvOut) && Some(root) != input_root && !pinned.contains(&root);
        groups.push(DependencyGroup {
            entries: members,
            width: width.unwrap_or(0),
            prunable,
        });
    }
    groups.sort_by(|a, b| a.entries[0].cmp(&b.entries[0]));
    Ok(groups)
}

/// Checks that every slot of `model` appears in exactly one group.
pub fn validate_partition<T: Scalar>(model: &ModelGraph<T>, groups: &[DependencyGroup]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for g in groups {
        for e in &g.entries {
            if !seen.insert(e.slot()) {
                return Err(Error::InvalidArgument(format!(
                    "slot {} appears in more than one group",
                    e.slot()
                )));
            }
        }
    }
    for slot in model.slots() {
        if !seen.remove(&slot) {
            return Err(Error::InvalidArgument(format!(
                "slot {} is not covered by any group",
                slot
            )));
        }
    }
    if let Some(extra) = seen.into_iter().next() {
        return Err(Error::InvalidArgument(format!(
            "group slot {} does not exist in the model",
            extra
        )));
    }
    Ok(())
}

/// Parameters and buffers removed per dropped channel of one entry, from
/// layer attributes: conv out `k²·m_in (+1 bias)`, conv in `k²·m_out`,
/// batchnorm `2 (+2 buffers)`, linear in `f·out`, linear out `in (+1 bias)`.
pub fn channel_cost<T: Scalar>(model: &ModelGraph<T>, entry: &CouplingEntry) -> (usize, usize) {
    match (&model.node(entry.node).kind, entry.kind) {
        (
            LayerKind::Conv2d {
                in_channels,
                kernel,
                bias,
                ..
            },
            EntryKind::ConvOut,
        ) => (kernel * kernel * in_channels + usize::from(*bias), 0),
        (
            LayerKind::Conv2d {
                out_channels, kernel, ..
            },
            EntryKind::ConvIn,
        ) => (kernel * kernel * out_channels, 0),
        (LayerKind::BatchNorm2d { .. }, EntryKind::BnChannels) => (2, 2),
        (LayerKind::Linear { out_features, .. }, EntryKind::LinearIn) => (entry.expansion * out_features, 0),
        (LayerKind::Linear { in_features, bias, .. }, EntryKind::LinearOut) => (in_features + usize::from(*bias), 0),
        _ => (0, 0),
    }
}

/// Checks `drop` against `group` without mutating anything.
pub fn check_drop<T: Scalar>(model: &ModelGraph<T>, group: &DependencyGroup, drop: &[usize]) -> Result<()> {
    if drop.is_empty() {
        return Ok(());
    }
    if !group.prunable {
        return Err(Error::IllegalDrop("group is not prunable".into()));
    }
    if drop.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::IllegalDrop(format!(
            "drop set {:?} is not sorted and duplicate-free",
            drop
        )));
    }
    for e in &group.entries {
        let w = model.slot_width(e.slot());
        if w != Some(group.width) {
            return Err(Error::IllegalDrop(format!(
                "group width {} is stale for slot {} (width {:?})",
                group.width,
                e.slot(),
                w
            )));
        }
    }
    if let Some(&last) = drop.last() {
        if last >= group.width {
            return Err(Error::IllegalDrop(format!(
                "index {} out of range for width {}",
                last, group.width
            )));
        }
    }
    if drop.len() >= group.width {
        return Err(Error::IllegalDrop(format!(
            "dropping {} of {} channels would empty the group",
            drop.len(),
            group.width
        )));
    }
    Ok(())
}

/// Removes the channels `drop` (current indices) from every entry of
/// `group`, composing origin maps with the kept selection. Either the whole
/// drop is applied or the model is left untouched.
pub fn apply_index_drop<T: Scalar>(model: &mut ModelGraph<T>, group: &DependencyGroup, drop: &[usize]) -> Result<()> {
    check_drop(model, group, drop)?;
    if drop.is_empty() {
        return Ok(());
    }
    let kept = kept_indices(group.width, drop);
    for e in &group.entries {
        let slot = e.slot();
        let block = model.slot_block(slot);
        for axis in model.slot_axes(slot) {
            let sliced = model
                .param(axis.key)
                .expect("slot axes reference registry tensors")
                .gather_axis(axis.axis, &kept, axis.block)?;
            model.replace_param(axis.key, sliced);
        }
        let origin = model.origin(slot).expect("slot has origin map");
        let composed: Vec<usize> = kept.iter().map(|&i| origin[i]).collect();
        model.set_origin(slot, composed);
        model.set_slot_extent(slot, kept.len(), block);
    }
    Ok(())
}

pub fn kept_indices(width: usize, drop: &[usize]) -> Vec<usize> {
    let mut d = drop.iter().peekable();
    (0..width)
        .filter(|i| {
            if d.peek() == Some(&i) {
                d.next();
                false
            } else {
                true
            }
        })
        .collect()
}
