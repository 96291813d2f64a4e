//! Pruning-plan generation and nested submodel extraction.
//!
//! Plans come from a gamma sweep: per prunable unit j the retain ratio is
//! clamp((1 - A_j * AdjW_j) * gamma, 0.01, 1), and gamma grows by a fixed
//! step until the resolved parameter count lands within the tolerance band
//! around the target. Channel selection is prefix-order, so smaller plans
//! are structural submodels of larger ones.

use serde::{Deserialize, Serialize};

use crate::apoz::ApozProfile;
use crate::error::{FlexError, Result};
use crate::nn::{param_count_for_widths, DenseLayer, ModelArch, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    /// 1-based pool level this plan belongs to.
    pub level: usize,
    /// True for the re-pruned adaptive variant of the level.
    pub adaptive: bool,
    /// Target size as a fraction of the full model's parameter count.
    pub target_ratio: f64,
    /// Retain ratio per hidden layer.
    pub ratios: Vec<f64>,
    /// Resolved widths, input and output included.
    pub widths: Vec<usize>,
    pub achieved_params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSearchConfig {
    /// Absolute parameter-count tolerance.
    pub epsilon: f64,
    /// Gamma iteration step.
    pub xi: f64,
}

impl GenSearchConfig {
    pub fn for_size(full_params: usize) -> Self {
        GenSearchConfig {
            epsilon: 0.01 * full_params as f64,
            xi: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(FlexError::InvalidConfig("epsilon must be > 0".into()));
        }
        if self.xi <= 0.0 || self.xi > 0.1 {
            return Err(FlexError::InvalidConfig("xi must be in (0, 0.1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    /// Adaptive pruning size as a fraction of the full model size.
    pub gamma_frac: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig { gamma_frac: 0.10 }
    }
}

/// Per-hidden-layer retain ratios at a given gamma.
fn ratios_at(profile: &ApozProfile, gamma: f64) -> Vec<f64> {
    profile.per_hidden_layer(|e| ((1.0 - e.apoz * e.adj_weight) * gamma).clamp(0.01, 1.0))
}

/// Resolve ratios to integer widths: round-half-up with a floor of 1;
/// input and output widths are never pruned.
pub fn resolve_widths(ratios: &[f64], arch: &ModelArch) -> Vec<usize> {
    let mut widths = Vec::with_capacity(arch.layer_widths.len());
    widths.push(arch.layer_widths[0]);
    for (h, &s) in ratios.iter().enumerate() {
        let y = arch.layer_widths[h + 1] as f64;
        widths.push(((y * s).round() as usize).max(1));
    }
    widths.push(arch.output_dim());
    widths
}

fn achieved_at(profile: &ApozProfile, arch: &ModelArch, gamma: f64) -> usize {
    param_count_for_widths(&resolve_widths(&ratios_at(profile, gamma), arch))
}

fn plan_at(
    profile: &ApozProfile,
    arch: &ModelArch,
    gamma: f64,
    level: usize,
    adaptive: bool,
    target_ratio: f64,
) -> PruningPlan {
    let ratios = ratios_at(profile, gamma);
    let widths = resolve_widths(&ratios, arch);
    let achieved_params = param_count_for_widths(&widths);
    PruningPlan {
        level,
        adaptive,
        target_ratio,
        ratios,
        widths,
        achieved_params,
    }
}

/// Gamma sweep toward an absolute parameter-count target. Advances gamma on
/// the xi grid and takes the first in-band value; if one step jumps over the
/// band, bisects the gap (the achieved size is monotone in gamma).
fn sweep_to_target(
    profile: &ApozProfile,
    arch: &ModelArch,
    target_params: f64,
    cfg: &GenSearchConfig,
    level: usize,
    adaptive: bool,
    target_ratio: f64,
) -> Result<PruningPlan> {
    cfg.validate()?;
    let unreachable = || FlexError::UnreachableTarget {
        level,
        target: target_ratio,
        epsilon: cfg.epsilon,
    };
    // past this gamma every unclamped ratio has hit 1.0
    let min_keep = profile
        .entries
        .iter()
        .map(|e| 1.0 - e.apoz * e.adj_weight)
        .filter(|&k| k > 0.0)
        .fold(f64::INFINITY, f64::min);
    let gamma_max = if min_keep.is_finite() {
        1.0 / min_keep + cfg.xi
    } else {
        cfg.xi
    };

    let in_band = |a: usize| (a as f64 - target_params).abs() <= cfg.epsilon;
    let mut prev_gamma = 0.0;
    let mut gamma = 0.0;
    loop {
        let achieved = achieved_at(profile, arch, gamma);
        if in_band(achieved) {
            return Ok(plan_at(profile, arch, gamma, level, adaptive, target_ratio));
        }
        if (achieved as f64) > target_params + cfg.epsilon {
            // jumped over the band; bisect [prev_gamma, gamma]
            let (mut lo, mut hi) = (prev_gamma, gamma);
            while hi - lo > 1e-12 {
                let mid = 0.5 * (lo + hi);
                let a = achieved_at(profile, arch, mid);
                if in_band(a) {
                    return Ok(plan_at(profile, arch, mid, level, adaptive, target_ratio));
                }
                if (a as f64) < target_params - cfg.epsilon {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            if adaptive {
                // Width rounding quantises achievable sizes; an adaptive
                // shrink keeps the nearest achievable size when the band
                // falls between two quantisation steps.
                let (a_lo, a_hi) = (
                    achieved_at(profile, arch, lo),
                    achieved_at(profile, arch, hi),
                );
                let pick =
                    if (a_lo as f64 - target_params).abs() <= (a_hi as f64 - target_params).abs() {
                        lo
                    } else {
                        hi
                    };
                return Ok(plan_at(profile, arch, pick, level, adaptive, target_ratio));
            }
            return Err(unreachable());
        }
        if gamma > gamma_max {
            return Err(unreachable());
        }
        prev_gamma = gamma;
        gamma += cfg.xi;
    }
}

/// All-ones plan for a level (the unpruned full model).
pub fn full_plan(arch: &ModelArch, level: usize) -> PruningPlan {
    let ratios = vec![1.0; arch.num_hidden()];
    let widths = arch.layer_widths.clone();
    let achieved_params = param_count_for_widths(&widths);
    PruningPlan {
        level,
        adaptive: false,
        target_ratio: 1.0,
        ratios,
        widths,
        achieved_params,
    }
}

/// One plan per ascending target ratio. A target of exactly 1.0 keeps every
/// ratio at the clamp ceiling and matches the full size exactly.
pub fn generate_plans(
    profile: &ApozProfile,
    arch: &ModelArch,
    targets: &[f64],
    cfg: &GenSearchConfig,
) -> Result<Vec<PruningPlan>> {
    if targets.is_empty() {
        return Err(FlexError::InvalidConfig("empty target list".into()));
    }
    for w in targets.windows(2) {
        if w[0] >= w[1] {
            return Err(FlexError::InvalidConfig(
                "target ratios must be strictly ascending".into(),
            ));
        }
    }
    if targets.iter().any(|&t| t <= 0.0 || t > 1.0) {
        return Err(FlexError::InvalidConfig(
            "target ratios must lie in (0, 1]".into(),
        ));
    }
    let size_m = param_count_for_widths(&arch.layer_widths) as f64;
    let mut plans = Vec::with_capacity(targets.len());
    for (i, &t) in targets.iter().enumerate() {
        let level = i + 1;
        let plan = if t == 1.0 {
            full_plan(arch, level)
        } else {
            sweep_to_target(profile, arch, t * size_m, cfg, level, false, t)?
        };
        plans.push(plan);
    }
    Ok(plans)
}

/// Keep the first `width` rows/columns of every layer.
pub fn extract_submodel(full: &ParamSet, widths: &[usize]) -> Result<ParamSet> {
    let full_widths = full.widths();
    if widths.len() != full_widths.len()
        || widths
            .iter()
            .zip(&full_widths)
            .any(|(&w, &f)| w > f || w == 0)
    {
        return Err(FlexError::ShapeMismatch(format!(
            "submodel widths {:?} do not fit inside {:?}",
            widths, full_widths
        )));
    }
    let mut layers = Vec::with_capacity(full.layers.len());
    for (j, layer) in full.layers.iter().enumerate() {
        let (in_w, out_w) = (widths[j], widths[j + 1]);
        let mut sub = DenseLayer::zeros(out_w, in_w);
        for o in 0..out_w {
            for i in 0..in_w {
                *sub.w_mut(o, i) = layer.w(o, i);
            }
            sub.bias[o] = layer.bias[o];
        }
        layers.push(sub);
    }
    Ok(ParamSet { layers })
}

/// Write `sub`'s entries into the prefix coordinates of `into`; everything
/// else is untouched.
pub fn embed_submodel(sub: &ParamSet, into: &ParamSet) -> Result<ParamSet> {
    let sub_widths = sub.widths();
    let full_widths = into.widths();
    if sub_widths.len() != full_widths.len()
        || sub_widths.iter().zip(&full_widths).any(|(&s, &f)| s > f)
    {
        return Err(FlexError::ShapeMismatch(format!(
            "cannot embed widths {:?} into {:?}",
            sub_widths, full_widths
        )));
    }
    let mut out = into.clone();
    for (j, sl) in sub.layers.iter().enumerate() {
        let layer = &mut out.layers[j];
        for o in 0..sl.out_dim {
            for i in 0..sl.in_dim {
                *layer.w_mut(o, i) = sl.w(o, i);
            }
            layer.bias[o] = sl.bias[o];
        }
    }
    Ok(out)
}

/// Re-pruned variant of pool level `level`: same sweep, target shrunk by
/// gamma_frac * size(M). The shrink must stay below the smallest size gap
/// between pool levels.
pub fn adaptive_plan(
    level: usize,
    pool: &[PruningPlan],
    profile: &ApozProfile,
    arch: &ModelArch,
    cfg: &GenSearchConfig,
    adaptive: &AdaptiveConfig,
) -> Result<PruningPlan> {
    let base = pool
        .iter()
        .find(|p| p.level == level && !p.adaptive)
        .ok_or_else(|| FlexError::InvalidConfig(format!("no pool plan for level {level}")))?;
    let size_m = param_count_for_widths(&arch.layer_widths) as f64;
    let shrink = adaptive.gamma_frac * size_m;

    let mut min_gap = f64::INFINITY;
    for a in pool {
        for b in pool {
            if a.level < b.level {
                min_gap = min_gap.min((b.achieved_params as f64 - a.achieved_params as f64).abs());
            }
        }
    }
    if pool.len() > 1 && shrink > 0.0 && shrink >= min_gap {
        return Err(FlexError::InvalidConfig(format!(
            "adaptive shrink {shrink} must stay below the smallest pool size gap {min_gap}"
        )));
    }

    if adaptive.gamma_frac == 0.0 {
        let mut plan = base.clone();
        plan.adaptive = true;
        return Ok(plan);
    }
    let target = base.achieved_params as f64 - shrink;
    if target <= 0.0 {
        return Err(FlexError::InvalidConfig(
            "adaptive target would be non-positive".into(),
        ));
    }
    sweep_to_target(profile, arch, target, cfg, level, true, target / size_m)
}

/// Identifier of a plan in the pool, for the fallback walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanId {
    Pool(usize),
    Adaptive(usize),
}

/// Fallback order for a dispatch at `level`: the level itself, its adaptive
/// variant, then each lower level and its adaptive variant, ending at level 1
/// (which has no adaptive variant).
pub fn fallback_chain(level: usize, with_adaptive: bool) -> Vec<PlanId> {
    let mut chain = Vec::new();
    for l in (1..=level).rev() {
        chain.push(PlanId::Pool(l));
        if l >= 2 && with_adaptive {
            chain.push(PlanId::Adaptive(l));
        }
    }
    chain
}

/// 1 - avg(|a - b| / b).
pub fn plan_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FlexError::ShapeMismatch(format!(
            "ratio vectors of length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(FlexError::EmptyInput("empty ratio vectors".into()));
    }
    if b.iter().any(|&v| v <= 0.0) {
        return Err(FlexError::InvalidConfig(
            "reference ratios must be positive".into(),
        ));
    }
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y).abs() / y).sum();
    Ok(1.0 - sum / a.len() as f64)
}
