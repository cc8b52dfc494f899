use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{extract_core, hard_prune, reapply, rebuild, soft_prune, CostReport, FreezeMask, PruneRecord};
use crate::depgraph::build_groups;
use crate::error::{Error, Result};
use crate::graph::{ArchSpec, ModelGraph, NodeId, Slot};
use crate::importance::{rank_for_drop, score, Method, Scope};
use crate::tensor::{Scalar, Tensor};

/// Which prunable groups a step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    All,
    /// Every other prunable group, starting with the first.
    Alternate,
}

impl FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(LayerSelection::All),
            "alternate" => Ok(LayerSelection::Alternate),
            _ => Err(Error::InvalidArgument(format!(
                "unknown layer selection {:?} (expected all or alternate)",
                s
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub steps: usize,
    /// Fraction removed per step.
    pub ratio: f64,
    pub method: Method,
    pub scope: Scope,
    pub layers: LayerSelection,
    pub finetune_each: bool,
    pub protected: BTreeSet<NodeId>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            steps: 1,
            ratio: 0.2,
            method: Method::L1,
            scope: Scope::Local,
            layers: LayerSelection::All,
            finetune_each: false,
            protected: BTreeSet::new(),
        }
    }
}

/// Prune records of successive steps plus the cost of every level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStack<T> {
    pub arch: Option<ArchSpec>,
    pub records: Vec<PruneRecord<T>>,
    /// `costs[i]` describes level `i`; level 0 is the unpruned model.
    pub costs: Vec<CostReport>,
}

impl<T: Scalar> LevelStack<T> {
    pub fn depth(&self) -> usize {
        self.records.len()
    }

    /// Width of every pruned group at each level 0..=depth.
    pub fn group_widths(&self) -> BTreeMap<Vec<Slot>, Vec<usize>> {
        let mut out: BTreeMap<Vec<Slot>, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            for g in &r.groups {
                let key: Vec<Slot> = g.entries.iter().map(|e| e.slot()).collect();
                let w = out.entry(key).or_insert_with(|| vec![g.pre_width; i + 1]);
                w.push(g.post_width());
            }
            for w in out.values_mut() {
                if w.len() < i + 2 {
                    let last = *w.last().expect("nonempty");
                    w.push(last);
                }
            }
        }
        out
    }
}

pub struct PipelineOutput<T> {
    pub stack: LevelStack<T>,
    /// Model after each step; `levels[0]` is the input.
    pub levels: Vec<ModelGraph<T>>,
}

impl<T: Scalar> PipelineOutput<T> {
    pub fn into_elastic(mut self) -> ElasticModel<T> {
        let level = self.stack.depth();
        let core = self.levels.pop().expect("at least the input level");
        ElasticModel {
            stack: self.stack,
            model: core,
            level,
        }
    }
}

/// Runs `cfg.steps` prune steps. `batches` feed gradient-based scoring;
/// `finetune` is called after every step when `cfg.finetune_each` is set,
/// otherwise only after the last one. A failing step leaves no trace.
pub fn iterative_pipeline<T: Scalar>(
    model: &ModelGraph<T>,
    cfg: &PipelineConfig,
    batches: &[(Tensor<T>, Vec<usize>)],
    finetune: &mut dyn FnMut(&mut ModelGraph<T>, usize) -> Result<()>,
) -> Result<PipelineOutput<T>> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("at least one prune step is required".into()));
    }
    let mut levels = vec![model.clone()];
    let mut costs = vec![super::cost_report(model)?];
    let mut records = Vec::new();
    for step in 1..=cfg.steps {
        let current = levels.last().expect("nonempty");
        let groups = build_groups(current, &cfg.protected)?;
        let prunable: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].prunable).collect();
        let selected: Vec<usize> = match cfg.layers {
            LayerSelection::All => prunable,
            LayerSelection::Alternate => prunable.into_iter().step_by(2).collect(),
        };
        if selected.is_empty() {
            return Err(Error::InvalidArgument(
                "no prunable groups selected (every candidate is protected or pinned)".into(),
            ));
        }
        let vectors = score(current, &groups, &selected, cfg.method, batches)?;
        let picked = rank_for_drop(&vectors, cfg.ratio, cfg.scope)?;
        let mut drops = vec![Vec::new(); groups.len()];
        for (gi, d) in selected.iter().zip(picked) {
            drops[*gi] = d;
        }
        let (mut core, mut record) = if cfg.method == Method::Soft {
            let soft = soft_prune(current, &groups, &drops)?;
            let (core, mut record) = extract_core(&soft, &groups)?;
            record.recapture(current)?;
            (core, record)
        } else {
            hard_prune(current, &groups, &drops)?
        };
        record.step = step;
        if cfg.finetune_each || step == cfg.steps {
            finetune(&mut core, step)?;
        }
        log::info!(
            "step {}: removed {} channels, {} -> {} params",
            step,
            record.dropped_total(),
            current.count_params(),
            core.count_params()
        );
        costs.push(super::cost_report(&core)?);
        records.push(record);
        levels.push(core);
    }
    Ok(PipelineOutput {
        stack: LevelStack {
            arch: model.arch().cloned(),
            records,
            costs,
        },
        levels,
    })
}

/// One stored model plus the records that reach every other level.
#[derive(Debug, Clone)]
pub struct ElasticModel<T> {
    pub stack: LevelStack<T>,
    model: ModelGraph<T>,
    level: usize,
}

impl<T: Scalar> ElasticModel<T> {
    pub fn new(stack: LevelStack<T>, model: ModelGraph<T>, level: usize) -> Result<Self> {
        if level > stack.depth() {
            return Err(Error::LevelUnavailable {
                level,
                min: 0,
                max: stack.depth(),
            });
        }
        Ok(ElasticModel { stack, model, level })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn model(&self) -> &ModelGraph<T> {
        &self.model
    }

    pub fn into_parts(self) -> (LevelStack<T>, ModelGraph<T>, usize) {
        (self.stack, self.model, self.level)
    }

    /// The model at `level` (0 = full, depth = smallest core). Deeper levels
    /// are sliced out of the stored model; shallower ones are rebuilt from
    /// the records.
    pub fn switch_capacity(&self, level: usize) -> Result<ModelGraph<T>> {
        let depth = self.stack.depth();
        if level > depth {
            return Err(Error::LevelUnavailable {
                level,
                min: 0,
                max: depth,
            });
        }
        let mut m = self.model.clone();
        if level >= self.level {
            for r in &self.stack.records[self.level..level] {
                m = reapply(&m, r)?;
            }
        } else {
            for r in self.stack.records[level..self.level].iter().rev() {
                m = rebuild(&m, r)?.0;
            }
        }
        Ok(m)
    }

    /// Makes `level` the stored model.
    pub fn set_level(&mut self, level: usize) -> Result<()> {
        self.model = self.switch_capacity(level)?;
        self.level = level;
        Ok(())
    }

    /// Rebuilds one level up, lets `finetune` train the reinserted channels
    /// under the returned mask, then stores the tuned values in the record so
    /// later switches reproduce them.
    pub fn grow(
        &mut self,
        finetune: &mut dyn FnMut(&mut ModelGraph<T>, &FreezeMask) -> Result<()>,
    ) -> Result<FreezeMask> {
        if self.level == 0 {
            return Err(Error::LevelUnavailable {
                level: 0,
                min: 0,
                max: self.stack.depth(),
            });
        }
        let record = &self.stack.records[self.level - 1];
        let (mut full, mask) = rebuild(&self.model, record)?;
        finetune(&mut full, &mask)?;
        let mut updated = record.clone();
        updated.recapture(&full)?;
        self.stack.records[self.level - 1] = updated;
        self.stack.costs[self.level - 1] = super::cost_report(&full)?;
        self.model = full;
        self.level -= 1;
        Ok(mask)
    }
}
