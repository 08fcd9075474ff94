//! Hierarchical layer-first/filter-second pruning.
//!
//! The budget N comes from the filter pruning ratio; the loop keeps the
//! global top-N filters by entropy and, whenever that starves a layer
//! below the filter floor, excises the starving layer with the lowest
//! cross-entropy to its predecessor and reselects. Surgery rebuilds the
//! surviving architecture with fresh parameters for retraining from
//! scratch.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::efa::EFAReport;
use crate::entropy::EntropyReport;
use crate::error::{Error, Result};
use crate::nn::{LayerKind, LayerSpec, ModelSpec};

pub const DEFAULT_MIN_FILTERS: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Entropy of the N-th best filter at this iteration.
    pub threshold: f64,
    pub removed_layer: Option<String>,
    /// Predecessor cross-entropy of the removed layer.
    pub cross_entropy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PruningPlan {
    /// Total number of filters to keep (N).
    pub target_keep_count: usize,
    /// Kept filter indices per surviving prunable layer, traversal order.
    pub kept_filters: Vec<(String, Vec<usize>)>,
    /// Whole layers excised, in removal order.
    pub removed_layers: Vec<String>,
    /// Layers whose filter floor had to be force-kept because the layer
    /// is not a removal candidate (first/last conv, block members).
    pub floor_promoted_layers: Vec<String>,
    pub threshold_trace: Vec<TraceEntry>,
    pub min_filters: usize,
    pub variance_rate: f64,
    pub filter_pruning_ratio: f64,
    pub feasible: bool,
    pub infeasible_reason: Option<String>,
}

impl PruningPlan {
    pub fn kept_count(&self) -> usize {
        self.kept_filters.iter().map(|(_, f)| f.len()).sum()
    }

    pub fn kept_in(&self, layer: &str) -> Option<&[usize]> {
        self.kept_filters
            .iter()
            .find(|(l, _)| l == layer)
            .map(|(_, f)| f.as_slice())
    }
}

struct Candidate {
    layer_pos: usize,
    filter: usize,
    entropy: f64,
}

/// Runs the hierarchical selection loop at an explicit keep budget.
pub fn build_plan_with_target(
    model: &ModelSpec,
    target_keep: usize,
    entropy: &EntropyReport,
    min_filters: usize,
    variance_rate: f64,
    filter_pruning_ratio: f64,
) -> Result<PruningPlan> {
    if min_filters == 0 {
        return Err(Error::InvalidArgument("min_filters must be >= 1".into()));
    }
    let prunable = model.prunable_convs();
    if prunable.is_empty() {
        return Err(Error::EmptyInput("no prunable conv layers"));
    }

    // entropy coverage check
    let mut candidates: Vec<Candidate> = Vec::new();
    for (pos, (layer, c_out)) in prunable.iter().enumerate() {
        for f in 0..*c_out {
            let h = entropy.entropy_of(layer, f).ok_or_else(|| {
                Error::InvalidArgument(format!("entropy report misses {layer}:{f}"))
            })?;
            candidates.push(Candidate {
                layer_pos: pos,
                filter: f,
                entropy: h,
            });
        }
    }

    // whole-layer removal candidates: top-level chain convs that are
    // neither input-adjacent nor classifier-adjacent
    let all_convs = crate::entropy::collect_conv_layers(model);
    let first_conv = all_convs.first().cloned().unwrap_or_default();
    let last_conv = all_convs.last().cloned().unwrap_or_default();
    let removable: BTreeSet<usize> = prunable
        .iter()
        .enumerate()
        .filter(|(_, (l, _))| {
            !l.contains('.') && *l != first_conv && *l != last_conv
        })
        .map(|(pos, _)| pos)
        .collect();

    let mut removed: BTreeSet<usize> = BTreeSet::new();
    let mut forced: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut removed_order: Vec<String> = Vec::new();
    let mut promoted: Vec<String> = Vec::new();
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut feasible = true;
    let mut infeasible_reason = None;

    // sort once: entropy descending, ties by (layer, filter)
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&candidates[a], &candidates[b]);
        cb.entropy
            .partial_cmp(&ca.entropy)
            .unwrap()
            .then(ca.layer_pos.cmp(&cb.layer_pos))
            .then(ca.filter.cmp(&cb.filter))
    });

    let mut selected: Vec<usize> = Vec::new();
    for iteration in 0.. {
        if iteration > prunable.len() * 2 + 4 {
            feasible = false;
            infeasible_reason = Some("selection loop failed to stabilize".into());
            break;
        }

        // floor-forced picks first, then the best of the rest up to N
        selected.clear();
        let mut taken: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &(pos, f) in &forced {
            if !removed.contains(&pos) {
                taken.insert((pos, f));
            }
        }
        if taken.len() > target_keep {
            feasible = false;
            infeasible_reason = Some(format!(
                "filter floors require {} slots but the budget is {target_keep}",
                taken.len()
            ));
        }
        let mut threshold = 0.0;
        let mut picked = taken.len();
        for &idx in &order {
            if picked >= target_keep {
                break;
            }
            let c = &candidates[idx];
            if removed.contains(&c.layer_pos) || taken.contains(&(c.layer_pos, c.filter)) {
                continue;
            }
            taken.insert((c.layer_pos, c.filter));
            picked += 1;
            threshold = c.entropy;
        }
        if picked < target_keep {
            feasible = false;
            infeasible_reason = Some(format!(
                "budget {target_keep} exceeds the {picked} filters available after removals"
            ));
        }
        selected.extend(taken.iter().map(|&(pos, f)| {
            candidates
                .iter()
                .position(|c| c.layer_pos == pos && c.filter == f)
                .unwrap()
        }));

        if !feasible {
            trace.push(TraceEntry {
                iteration,
                threshold,
                removed_layer: None,
                cross_entropy: None,
            });
            break;
        }

        // per-layer survival counts
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &idx in &selected {
            *counts.entry(candidates[idx].layer_pos).or_insert(0) += 1;
        }
        let starving: Vec<usize> = prunable
            .iter()
            .enumerate()
            .filter(|(pos, (_, c_out))| {
                !removed.contains(pos)
                    && counts.get(pos).copied().unwrap_or(0) < min_filters.min(*c_out)
            })
            .map(|(pos, _)| pos)
            .collect();

        if starving.is_empty() {
            trace.push(TraceEntry {
                iteration,
                threshold,
                removed_layer: None,
                cross_entropy: None,
            });
            break;
        }

        // among starving layers, remove the removable one with the lowest
        // predecessor cross-entropy
        let mut best: Option<(usize, f64)> = None;
        for &pos in &starving {
            if !removable.contains(&pos) {
                continue;
            }
            let layer = &prunable[pos].0;
            if let Some(ce) = entropy.cross_entropy_of(layer) {
                if best.is_none() || ce < best.unwrap().1 {
                    best = Some((pos, ce));
                }
            }
        }

        match best {
            Some((pos, ce)) => {
                removed.insert(pos);
                removed_order.push(prunable[pos].0.clone());
                trace.push(TraceEntry {
                    iteration,
                    threshold,
                    removed_layer: Some(prunable[pos].0.clone()),
                    cross_entropy: Some(ce),
                });
            }
            None => {
                // every starving layer is pinned in place; force-keep its
                // floor and reselect
                trace.push(TraceEntry {
                    iteration,
                    threshold,
                    removed_layer: None,
                    cross_entropy: None,
                });
                for &pos in &starving {
                    let (layer, c_out) = &prunable[pos];
                    let floor = min_filters.min(*c_out);
                    if !promoted.contains(layer) {
                        promoted.push(layer.clone());
                    }
                    let mut kept = 0;
                    for &idx in &order {
                        let c = &candidates[idx];
                        if c.layer_pos != pos {
                            continue;
                        }
                        forced.insert((pos, c.filter));
                        kept += 1;
                        if kept >= floor {
                            break;
                        }
                    }
                }
            }
        }
    }

    let mut kept_map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &idx in &selected {
        let c = &candidates[idx];
        kept_map.entry(c.layer_pos).or_default().push(c.filter);
    }
    let mut kept_filters = Vec::new();
    for (pos, (layer, _)) in prunable.iter().enumerate() {
        if removed.contains(&pos) {
            continue;
        }
        let mut filters = kept_map.remove(&pos).unwrap_or_default();
        filters.sort_unstable();
        kept_filters.push((layer.clone(), filters));
    }

    Ok(PruningPlan {
        target_keep_count: target_keep,
        kept_filters,
        removed_layers: removed_order,
        floor_promoted_layers: promoted,
        threshold_trace: trace,
        min_filters,
        variance_rate,
        filter_pruning_ratio,
        feasible,
        infeasible_reason,
    })
}

/// Algorithm entry point: the keep budget is
/// `round((1 - filter_pruning_ratio) * total_prunable_filters)`.
pub fn build_plan(
    model: &ModelSpec,
    efa: &EFAReport,
    entropy: &EntropyReport,
    min_filters: usize,
) -> Result<PruningPlan> {
    let total: usize = model.prunable_convs().iter().map(|(_, c)| c).sum();
    let target = ((1.0 - efa.filter_pruning_ratio) * total as f64).round() as usize;
    build_plan_with_target(
        model,
        target,
        entropy,
        min_filters,
        efa.variance_contribution_rate,
        efa.filter_pruning_ratio,
    )
}

/// Applies the plan structurally: prunable conv layers shrink to their
/// kept filters, removed conv layers are excised together with their
/// batch-norm and activation, downstream channel counts are rewired and
/// every surviving parameter is freshly initialized from the model seed
/// (the retrain-from-scratch protocol).
pub fn apply_plan(
    model: &ModelSpec,
    plan: &PruningPlan,
    input_shape: (usize, usize, usize),
) -> Result<ModelSpec> {
    if !plan.feasible {
        return Err(Error::InvalidArgument(format!(
            "plan is infeasible: {}",
            plan.infeasible_reason.as_deref().unwrap_or("unknown")
        )));
    }
    let removed: BTreeSet<&str> = plan.removed_layers.iter().map(|s| s.as_str()).collect();
    let kept: BTreeMap<&str, usize> = plan
        .kept_filters
        .iter()
        .map(|(l, f)| (l.as_str(), f.len()))
        .collect();
    for (layer, count) in &kept {
        if *count == 0 {
            return Err(Error::InvalidArgument(format!(
                "surviving layer {layer} keeps zero filters"
            )));
        }
        if removed.contains(layer) {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} is both kept and removed"
            )));
        }
    }

    let mut new_layers: Vec<LayerSpec> = Vec::new();
    let mut skip_support = false;
    for (i, spec) in model.layers.iter().enumerate() {
        let path = i.to_string();
        match &spec.kind {
            LayerKind::Conv(c) => {
                skip_support = false;
                if removed.contains(path.as_str()) {
                    skip_support = true;
                    continue;
                }
                let mut c = c.clone();
                if let Some(&count) = kept.get(path.as_str()) {
                    c.out_channels = count;
                }
                new_layers.push(LayerSpec {
                    kind: LayerKind::Conv(c),
                    prunable: spec.prunable,
                });
            }
            LayerKind::BatchNorm { .. } | LayerKind::Relu if skip_support => {
                // batch norm and activation leave with their conv
            }
            LayerKind::ResidualBlock { members } => {
                skip_support = false;
                let mut members = members.clone();
                for (j, member) in members.iter_mut().enumerate() {
                    let mpath = format!("{i}.{j}");
                    if let Some(&count) = kept.get(mpath.as_str()) {
                        if let LayerKind::Conv(c) = &mut member.kind {
                            c.out_channels = count;
                        }
                    }
                }
                new_layers.push(LayerSpec {
                    kind: LayerKind::ResidualBlock { members },
                    prunable: spec.prunable,
                });
            }
            _ => {
                skip_support = false;
                new_layers.push(spec.clone());
            }
        }
    }

    rewire_channels(&mut new_layers, input_shape)?;
    ModelSpec::build(new_layers, model.seed)
}

/// Propagates channel counts and spatial extents through the edited
/// chain, fixing `in_channels`, batch-norm widths and the classifier's
/// `in_features`.
fn rewire_channels(
    layers: &mut [LayerSpec],
    input_shape: (usize, usize, usize),
) -> Result<usize> {
    let (mut c, mut h, mut w) = input_shape;
    for spec in layers.iter_mut() {
        match &mut spec.kind {
            LayerKind::Conv(conv) => {
                conv.in_channels = c;
                c = conv.out_channels;
                h = crate::nn::conv_out(h, conv.kernel, conv.stride, conv.padding)?;
                w = crate::nn::conv_out(w, conv.kernel, conv.stride, conv.padding)?;
            }
            LayerKind::BatchNorm { channels } => *channels = c,
            LayerKind::MaxPool { size, stride } | LayerKind::AvgPool { size, stride } => {
                h = crate::nn::pool_out(h, *size, *stride)?;
                w = crate::nn::pool_out(w, *size, *stride)?;
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                *in_features = c * h * w;
                // classifier head ends spatial bookkeeping
                h = 1;
                w = 1;
                c = *out_features;
            }
            LayerKind::ResidualBlock { members } => {
                let body_in = (c, h, w);
                let mut inner_c = c;
                let (mut ih, mut iw) = (h, w);
                for member in members.iter_mut() {
                    match &mut member.kind {
                        LayerKind::Conv(conv) => {
                            conv.in_channels = inner_c;
                            inner_c = conv.out_channels;
                            ih = crate::nn::conv_out(ih, conv.kernel, conv.stride, conv.padding)?;
                            iw = crate::nn::conv_out(iw, conv.kernel, conv.stride, conv.padding)?;
                        }
                        LayerKind::BatchNorm { channels } => *channels = inner_c,
                        _ => {}
                    }
                }
                if inner_c < body_in.0 {
                    return Err(Error::LayerMismatch {
                        index: "residual".into(),
                        detail: format!(
                            "block output {} channels under input {}",
                            inner_c, body_in.0
                        ),
                    });
                }
                c = inner_c;
                h = ih;
                w = iw;
            }
            LayerKind::Flatten | LayerKind::SoftmaxXent | LayerKind::Relu => {}
        }
    }
    Ok(c)
}

/// Per-layer surviving filter counts under (a) a flat global top-N cut
/// and (b) the hierarchical plan at the same budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverpruningComparison {
    pub budget_keep: usize,
    pub min_filters: usize,
    /// `(layer, survivors)` for the flat global threshold.
    pub flat_counts: Vec<(String, usize)>,
    /// `(layer, survivors)` for the hierarchical plan (removed layers
    /// appear with 0).
    pub hierarchical_counts: Vec<(String, usize)>,
    pub hierarchical_removed: Vec<String>,
    /// Flat-pruned layers left with `0 < count < min_filters`.
    pub flat_starved: Vec<String>,
}

pub fn overpruning_comparison(
    model: &ModelSpec,
    entropy: &EntropyReport,
    prune_ratio: f64,
    min_filters: usize,
) -> Result<OverpruningComparison> {
    if !(0.0..=1.0).contains(&prune_ratio) {
        return Err(Error::InvalidArgument(format!(
            "prune ratio must lie in [0,1], got {prune_ratio}"
        )));
    }
    let prunable = model.prunable_convs();
    let total: usize = prunable.iter().map(|(_, c)| c).sum();
    let budget = ((1.0 - prune_ratio) * total as f64).round() as usize;

    // flat baseline: global top-N by entropy, no floors
    let mut ranked: Vec<(&String, usize, f64)> = Vec::new();
    for (layer, c_out) in &prunable {
        for f in 0..*c_out {
            let h = entropy.entropy_of(layer, f).ok_or_else(|| {
                Error::InvalidArgument(format!("entropy report misses {layer}:{f}"))
            })?;
            ranked.push((layer, f, h));
        }
    }
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.1.cmp(&b.1)));
    let mut flat: BTreeMap<&str, usize> = prunable.iter().map(|(l, _)| (l.as_str(), 0)).collect();
    for (layer, _, _) in ranked.iter().take(budget) {
        *flat.get_mut(layer.as_str()).unwrap() += 1;
    }
    let flat_counts: Vec<(String, usize)> = prunable
        .iter()
        .map(|(l, _)| (l.clone(), flat[l.as_str()]))
        .collect();
    let flat_starved: Vec<String> = flat_counts
        .iter()
        .filter(|(_, n)| *n > 0 && *n < min_filters)
        .map(|(l, _)| l.clone())
        .collect();

    let plan = build_plan_with_target(model, budget, entropy, min_filters, 0.0, prune_ratio)?;
    let hierarchical_counts: Vec<(String, usize)> = prunable
        .iter()
        .map(|(l, _)| {
            let n = plan.kept_in(l).map(|f| f.len()).unwrap_or(0);
            (l.clone(), n)
        })
        .collect();
    if plan.feasible {
        for ((layer, n), (_, width)) in hierarchical_counts.iter().zip(&prunable) {
            if *n > 0 && *n < min_filters.min(*width) {
                return Err(Error::InvalidArgument(format!(
                    "hierarchical plan starved layer {layer} at {n} filters"
                )));
            }
        }
    }

    Ok(OverpruningComparison {
        budget_keep: budget,
        min_filters,
        flat_counts,
        hierarchical_counts,
        hierarchical_removed: plan.removed_layers,
        flat_starved,
    })
}
