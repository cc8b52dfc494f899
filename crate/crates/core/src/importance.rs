//! Channel saliency scores and drop selection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::depgraph::{CouplingEntry, DependencyGroup, EntryKind};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ParamKey, Role};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    L1,
    L2Global,
    Taylor,
    Hessian,
    /// L2 magnitude scores, applied by zeroing instead of removal.
    Soft,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::L1,
        Method::L2Global,
        Method::Taylor,
        Method::Hessian,
        Method::Soft,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::L1 => "l1",
            Method::L2Global => "l2_global",
            Method::Taylor => "taylor",
            Method::Hessian => "hessian",
            Method::Soft => "soft",
        }
    }

    /// Whether scoring needs labeled batches.
    pub fn needs_data(self) -> bool {
        matches!(self, Method::Taylor | Method::Hessian)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown method {:?} (expected l1, l2_global, taylor, hessian or soft)",
                s
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Local,
    Global,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Scope::Local),
            "global" => Ok(Scope::Global),
            _ => Err(Error::InvalidArgument(format!(
                "unknown scope {:?} (expected local or global)",
                s
            ))),
        }
    }
}

/// Scores for the channels of one group, indexed by current channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    /// Index of the group in the list it was scored from.
    pub group: usize,
    pub scores: Vec<f64>,
    pub method: Method,
    pub scope: Scope,
}

impl ImportanceVector {
    fn new(group: usize, scores: Vec<f64>, method: Method, scope: Scope) -> Self {
        debug_assert!(scores.iter().all(|s| s.is_finite() && *s >= 0.0), "{:?}", scores);
        ImportanceVector {
            group,
            scores,
            method,
            scope,
        }
    }
}

/// Per-channel trainable values of one entry, read from `source` using the
/// slicing of `model`. Buffers are skipped.
fn entry_values<T: Scalar>(
    model: &ModelGraph<T>,
    entry: &CouplingEntry,
    source: &BTreeMap<ParamKey, Tensor<T>>,
) -> Result<Vec<Vec<f64>>> {
    let slot = entry.slot();
    let width = model.slot_width(slot).unwrap_or(0);
    let mut out = vec![Vec::new(); width];
    for axis in model.slot_axes(slot) {
        if axis.key.role.is_buffer() {
            continue;
        }
        let t = source
            .get(&axis.key)
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor for {}", axis.key)))?;
        for (c, vals) in t.channel_slices(axis.axis, axis.block)?.into_iter().enumerate() {
            out[c].extend(vals.into_iter().map(Scalar::as_f64));
        }
    }
    Ok(out)
}

fn registry<T: Scalar>(model: &ModelGraph<T>) -> BTreeMap<ParamKey, Tensor<T>> {
    model.params().map(|(k, t)| (*k, t.clone())).collect()
}

fn mean_over_entries(per_entry: Vec<Vec<f64>>, width: usize) -> Vec<f64> {
    let n = per_entry.len().max(1) as f64;
    (0..width)
        .map(|c| per_entry.iter().map(|e| e[c]).sum::<f64>() / n)
        .collect()
}

/// Σ|w| over each filter of the group's first conv output entry.
pub fn l1_filter<T: Scalar>(
    model: &ModelGraph<T>,
    groups: &[DependencyGroup],
    group: usize,
) -> Result<ImportanceVector> {
    let g = &groups[group];
    let entry = g
        .conv_outs()
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("group {} has no conv output entry", group)))?;
    let w = model
        .param(ParamKey::new(entry.node, Role::Weight))
        .expect("conv weight present");
    let scores = w
        .channel_slices(0, 1)?
        .into_iter()
        .map(|f| f.iter().map(|v| v.as_f64().abs()).sum())
        .collect();
    Ok(ImportanceVector::new(group, scores, Method::L1, Scope::Local))
}

/// Mean over entries of each channel's L2 norm. With `all_entries` false
/// only conv output entries contribute.
pub fn magnitude_l2<T: Scalar>(
    model: &ModelGraph<T>,
    groups: &[DependencyGroup],
    group: usize,
    all_entries: bool,
) -> Result<ImportanceVector> {
    let g = &groups[group];
    let reg = registry(model);
    let mut per_entry = Vec::new();
    for e in &g.entries {
        if !all_entries && e.kind != EntryKind::ConvOut {
            continue;
        }
        let vals = entry_values(model, e, &reg)?;
        per_entry.push(
            vals.iter()
                .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect(),
        );
    }
    let scores = mean_over_entries(per_entry, g.width);
    Ok(ImportanceVector::new(group, scores, Method::L2Global, Scope::Global))
}

fn taylor_from<T: Scalar>(
    model: &ModelGraph<T>,
    groups: &[DependencyGroup],
    group: usize,
    reg: &BTreeMap<ParamKey, Tensor<T>>,
    grads: &BTreeMap<ParamKey, Tensor<T>>,
) -> Result<ImportanceVector> {
    let g = &groups[group];
    let mut per_entry = Vec::new();
    for e in &g.entries {
        let w = entry_values(model, e, reg)?;
        let gr = entry_values(model, e, grads)?;
        per_entry.push(
            w.iter()
                .zip(&gr)
                .map(|(w, g)| w.iter().zip(g).map(|(a, b)| a * b).sum::<f64>().abs())
                .collect(),
        );
    }
    Ok(ImportanceVector::new(
        group,
        mean_over_entries(per_entry, g.width),
        Method::Taylor,
        Scope::Local,
    ))
}

/// First-order Taylor scores |Σ w·∂L/∂w| for every listed group from one
/// forward/backward pass.
pub fn taylor_many<T: Scalar>(
    model: &ModelGraph<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    groups: &[DependencyGroup],
    which: &[usize],
) -> Result<Vec<ImportanceVector>> {
    check_labels(batch, labels)?;
    let (_, grads) = model.loss_gradients(batch, labels)?;
    let reg = registry(model);
    which
        .iter()
        .map(|&i| taylor_from(model, groups, i, &reg, &grads))
        .collect()
}

pub fn taylor<T: Scalar>(
    model: &ModelGraph<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    groups: &[DependencyGroup],
    group: usize,
) -> Result<ImportanceVector> {
    Ok(taylor_many(model, batch, labels, groups, &[group])?.remove(0))
}

fn check_labels<T: Scalar>(batch: &Tensor<T>, labels: &[usize]) -> Result<()> {
    let n = batch.shape().first().copied().unwrap_or(0);
    if labels.len() != n || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {}",
            labels.len(),
            n
        )));
    }
    Ok(())
}

/// Raw empirical-Fisher diagonal per channel: mean over batches of Σ g².
fn fisher_raw<T: Scalar>(
    model: &ModelGraph<T>,
    batches: &[(Tensor<T>, Vec<usize>)],
    groups: &[DependencyGroup],
    which: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument(
            "hessian scoring needs at least one batch".into(),
        ));
    }
    let mut acc: Vec<Vec<f64>> = which.iter().map(|&i| vec![0.0; groups[i].width]).collect();
    for (x, y) in batches {
        check_labels(x, y)?;
        let (_, grads) = model.loss_gradients(x, y)?;
        for (slot, &i) in acc.iter_mut().zip(which) {
            let g = &groups[i];
            let mut per_entry = Vec::new();
            for e in &g.entries {
                let gr = entry_values(model, e, &grads)?;
                per_entry.push(gr.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>()).collect());
            }
            for (a, s) in slot.iter_mut().zip(mean_over_entries(per_entry, g.width)) {
                *a += s;
            }
        }
    }
    let n = batches.len() as f64;
    Ok(acc
        .into_iter()
        .map(|v| v.into_iter().map(|s| s / n).collect())
        .collect())
}

fn min_max(scores: Vec<f64>) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0.0; scores.len()];
    }
    scores.into_iter().map(|s| (s - lo) / (hi - lo)).collect()
}

/// Hessian-diagonal surrogate (squared gradients averaged over batches),
/// min-max scaled to [0, 1] within each group.
pub fn hessian_many<T: Scalar>(
    model: &ModelGraph<T>,
    batches: &[(Tensor<T>, Vec<usize>)],
    groups: &[DependencyGroup],
    which: &[usize],
) -> Result<Vec<ImportanceVector>> {
    let raw = fisher_raw(model, batches, groups, which)?;
    Ok(raw
        .into_iter()
        .zip(which)
        .map(|(s, &i)| ImportanceVector::new(i, min_max(s), Method::Hessian, Scope::Local))
        .collect())
}

pub fn hessian_diag<T: Scalar>(
    model: &ModelGraph<T>,
    batches: &[(Tensor<T>, Vec<usize>)],
    groups: &[DependencyGroup],
    group: usize,
) -> Result<ImportanceVector> {
    Ok(hessian_many(model, batches, groups, &[group])?.remove(0))
}

/// Scores the listed groups with `method`. Gradient methods draw on
/// `batches` (Taylor uses the first one).
pub fn score<T: Scalar>(
    model: &ModelGraph<T>,
    groups: &[DependencyGroup],
    which: &[usize],
    method: Method,
    batches: &[(Tensor<T>, Vec<usize>)],
) -> Result<Vec<ImportanceVector>> {
    match method {
        Method::L1 => which.iter().map(|&i| l1_filter(model, groups, i)).collect(),
        Method::L2Global | Method::Soft => which
            .iter()
            .map(|&i| {
                magnitude_l2(model, groups, i, true).map(|mut v| {
                    v.method = method;
                    v
                })
            })
            .collect(),
        Method::Taylor => {
            let (x, y) = batches
                .first()
                .ok_or_else(|| Error::InvalidArgument("taylor scoring needs a labeled batch".into()))?;
            taylor_many(model, x, y, groups, which)
        }
        Method::Hessian => hessian_many(model, batches, groups, which),
    }
}

fn drop_count(width: usize, ratio: f64) -> usize {
    // guard against products like 0.29 * 100 = 28.999999999999996
    let k = (width as f64 * ratio + 1e-9).floor() as usize;
    k.min(width.saturating_sub(1))
}

fn lowest(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut drop: Vec<usize> = idx.into_iter().take(k).collect();
    drop.sort_unstable();
    drop
}

/// Sorted drop sets, one per input vector.
///
/// Local scope drops `floor(width·ratio)` lowest scores per group. Global
/// scope divides each group's scores by the group mean, pools them, drops
/// the `floor(total·ratio)` lowest, then returns channels to any group that
/// would otherwise be emptied. Ties drop the lower channel index first.
pub fn rank_for_drop(vectors: &[ImportanceVector], ratio: f64, scope: Scope) -> Result<Vec<Vec<usize>>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("ratio {} outside [0, 1)", ratio)));
    }
    match scope {
        Scope::Local => Ok(vectors
            .iter()
            .map(|v| lowest(&v.scores, drop_count(v.scores.len(), ratio)))
            .collect()),
        Scope::Global => {
            let mut pool: Vec<(f64, usize, usize)> = Vec::new();
            for (g, v) in vectors.iter().enumerate() {
                let mean = v.scores.iter().sum::<f64>() / v.scores.len().max(1) as f64;
                for (c, &s) in v.scores.iter().enumerate() {
                    let n = if mean > 0.0 { s / mean } else { 0.0 };
                    pool.push((n, c, g));
                }
            }
            let k = (pool.len() as f64 * ratio + 1e-9).floor() as usize;
            pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut drops: Vec<Vec<usize>> = vec![Vec::new(); vectors.len()];
            for &(_, c, g) in pool.iter().take(k) {
                drops[g].push(c);
            }
            for (g, d) in drops.iter_mut().enumerate() {
                let width = vectors[g].scores.len();
                if width > 0 && d.len() >= width {
                    // selection order is ascending score, so the last is the most important
                    d.truncate(width - 1);
                }
                d.sort_unstable();
            }
            Ok(drops)
        }
    }
}
