//! Server-side orchestration: device population with uncertain memory,
//! selection, dispatch with adaptive re-pruning, self-KD local training,
//! overlapping-submodel aggregation, pool refresh, and per-round metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apoz::{self, ApozProfile};
use crate::config::{ExperimentConfig, Mode};
use crate::data::{self, Dataset};
use crate::error::{FlexError, Result};
use crate::kd;
use crate::nn::{self, param_count_for_widths, ModelArch, ParamSet};
use crate::pruner::{self, PlanId, PruningPlan};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: usize,
    pub class_name: String,
    /// Maximum memory capacity as percent of size(M).
    pub r_max: f64,
    /// Variance of the Gaussian resource fluctuation.
    pub sigma2: f64,
    pub seed: u64,
}

/// The server's leveled models: one global ParamSet plus plans for every
/// pool level and adaptive variant. Pooled submodels are always fresh
/// extractions from the global model.
#[derive(Debug, Clone)]
pub struct ModelPool {
    pub global: ParamSet,
    pub plans: Vec<PruningPlan>,
    pub adaptive_plans: Vec<PruningPlan>,
    pub submodels: Vec<ParamSet>,
}

impl ModelPool {
    pub fn new(
        global: ParamSet,
        plans: Vec<PruningPlan>,
        adaptive_plans: Vec<PruningPlan>,
    ) -> Result<Self> {
        let submodels = plans
            .iter()
            .map(|p| pruner::extract_submodel(&global, &p.widths))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelPool {
            global,
            plans,
            adaptive_plans,
            submodels,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.plans.len()
    }

    pub fn plan(&self, id: PlanId) -> Option<&PruningPlan> {
        match id {
            PlanId::Pool(l) => self.plans.iter().find(|p| p.level == l && !p.adaptive),
            PlanId::Adaptive(l) => self.adaptive_plans.iter().find(|p| p.level == l),
        }
    }

    /// Re-extract every pooled submodel from a new global model.
    pub fn update(&mut self, new_global: ParamSet) -> Result<()> {
        self.global = new_global;
        for (i, plan) in self.plans.iter().enumerate() {
            self.submodels[i] = pruner::extract_submodel(&self.global, &plan.widths)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub per_level_accuracy: Vec<f64>,
    pub avg_accuracy: f64,
    pub global_accuracy: f64,
    /// Bytes moved since the previous report.
    pub dispatch_bytes: u64,
    pub upload_bytes: u64,
    pub adaptive_events: u64,
    pub forced_m1: u64,
}

/// One dispatch decision, kept for auditing resource safety.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispatchEvent {
    pub round: usize,
    pub device: usize,
    pub assigned_level: usize,
    pub chosen: PlanId,
    pub chosen_params: usize,
    pub resource: f64,
    pub forced: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<RoundReport>,
    pub plans: Vec<PruningPlan>,
    pub adaptive_plans: Vec<PruningPlan>,
    pub profile: ApozProfile,
    pub audit: Vec<DispatchEvent>,
    pub config_hash: String,
}

/// Stable seed derivation for the independent random streams of a run.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// r = r_max - |u|, u ~ N(0, sigma^2), deterministic in (device seed, round).
pub fn sample_resource(profile: &DeviceProfile, round: usize) -> f64 {
    if profile.sigma2 == 0.0 {
        return profile.r_max;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(
        profile
            .seed
            .wrapping_add((round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    let u: f64 = StandardNormal.sample(&mut rng);
    profile.r_max - (u * profile.sigma2.sqrt()).abs()
}

/// A device can train a model only if r strictly exceeds its size percent.
pub fn can_host(r: f64, model_params: usize, full_params: usize) -> bool {
    r > model_params as f64 / full_params as f64 * 100.0
}

/// Uniform-random choice of K distinct devices; each is assigned the
/// largest pool level whose nominal size fits its registered capacity.
pub fn select_devices(
    profiles: &[DeviceProfile],
    eligible: &[usize],
    pool: &ModelPool,
    full_params: usize,
    fraction: f64,
    round_seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let k = ((fraction * profiles.len() as f64).floor() as usize).max(1);
    if k > eligible.len() {
        return Err(FlexError::InvalidConfig(format!(
            "cannot select {k} devices from {} eligible",
            eligible.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(round_seed);
    let mut ids = eligible.to_vec();
    ids.shuffle(&mut rng);
    ids.truncate(k);
    ids.sort_unstable();
    Ok(ids
        .into_iter()
        .map(|id| {
            let level = pool
                .plans
                .iter()
                .filter(|p| can_host(profiles[id].r_max, p.achieved_params, full_params))
                .map(|p| p.level)
                .max()
                .unwrap_or(1);
            (id, level)
        })
        .collect())
}

/// Walk the fallback chain and return the first plan the fresh resource
/// draw can host; level 1 is returned unconditionally (flagged forced).
pub fn dispatch_and_adapt(
    assigned_level: usize,
    resource: f64,
    pool: &ModelPool,
    full_params: usize,
) -> (PlanId, bool) {
    let with_adaptive = !pool.adaptive_plans.is_empty();
    let chain = pruner::fallback_chain(assigned_level, with_adaptive);
    for id in &chain {
        if let Some(plan) = pool.plan(*id) {
            if can_host(resource, plan.achieved_params, full_params) {
                return (*id, false);
            }
        }
    }
    (PlanId::Pool(1), true)
}

pub struct Upload {
    pub device: usize,
    pub params: ParamSet,
    pub samples: u64,
}

/// Per-coordinate weighted mean over the uploads covering it; uncovered
/// coordinates keep the current global value. Uploads are consumed in the
/// caller's (canonical) order with plain sequential summation.
pub fn aggregate(uploads: &[Upload], current: &ParamSet) -> Result<ParamSet> {
    if uploads.is_empty() {
        return Err(FlexError::EmptyInput("no uploads to aggregate".into()));
    }
    let mut weighted = ParamSet::zeros(&current.widths());
    let mut weights = ParamSet::zeros(&current.widths());
    for up in uploads {
        let w = up.samples as f64;
        for (j, sl) in up.params.layers.iter().enumerate() {
            let acc = &mut weighted.layers[j];
            let cov = &mut weights.layers[j];
            if sl.out_dim > acc.out_dim || sl.in_dim > acc.in_dim {
                return Err(FlexError::ShapeMismatch(format!(
                    "upload from device {} exceeds global shape",
                    up.device
                )));
            }
            for o in 0..sl.out_dim {
                for i in 0..sl.in_dim {
                    *acc.w_mut(o, i) += w * sl.w(o, i);
                    *cov.w_mut(o, i) += w;
                }
                acc.bias[o] += w * sl.bias[o];
                cov.bias[o] += w;
            }
        }
    }
    let mut out = current.clone();
    for j in 0..out.layers.len() {
        let layer = &mut out.layers[j];
        let acc = &weighted.layers[j];
        let cov = &weights.layers[j];
        for idx in 0..layer.weights.len() {
            if cov.weights[idx] > 0.0 {
                layer.weights[idx] = acc.weights[idx] / cov.weights[idx];
            }
        }
        for idx in 0..layer.bias.len() {
            if cov.bias[idx] > 0.0 {
                layer.bias[idx] = acc.bias[idx] / cov.bias[idx];
            }
        }
    }
    Ok(out)
}

/// Deterministic device population: class labels by configured proportions,
/// variance drawn from the configured choices, one seed per device.
pub fn build_devices(cfg: &ExperimentConfig, master: u64) -> Result<Vec<DeviceProfile>> {
    let n = cfg.num_devices;
    let mut counts: Vec<usize> = cfg
        .device_classes
        .iter()
        .map(|c| (c.proportion * n as f64).floor() as usize)
        .collect();
    let mut assigned: usize = counts.iter().sum();
    let num_classes = counts.len();
    let mut k = 0;
    while assigned < n {
        counts[k % num_classes] += 1;
        assigned += 1;
        k += 1;
    }
    let mut class_of: Vec<usize> = Vec::with_capacity(n);
    for (ci, &cnt) in counts.iter().enumerate() {
        class_of.extend(std::iter::repeat_n(ci, cnt));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(master, "devices"));
    class_of.shuffle(&mut rng);
    Ok((0..n)
        .map(|id| {
            let spec = &cfg.device_classes[class_of[id]];
            let sigma2 = *cfg
                .sigma2_choices
                .get(rand::Rng::gen_range(&mut rng, 0..cfg.sigma2_choices.len()))
                .unwrap();
            DeviceProfile {
                id,
                class_name: spec.name.clone(),
                r_max: spec.r_max,
                sigma2,
                seed: derive_seed(master, &format!("device-{id}")),
            }
        })
        .collect())
}

fn profile_for_mode(
    cfg: &ExperimentConfig,
    arch: &ModelArch,
    proxy_train: &Dataset,
    proxy_test: &Dataset,
    master: u64,
) -> Result<ApozProfile> {
    let pretrain = apoz::PretrainConfig {
        epochs: cfg.pretrain_epochs,
        batch_size: cfg.kd.batch_size,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
    };
    let mut profile = apoz::build_profile(
        arch,
        (&proxy_train.features, &proxy_train.labels),
        (&proxy_test.features, &proxy_test.labels),
        &pretrain,
        derive_seed(master, "pretrain"),
    )?;
    match cfg.mode {
        Mode::NoApoz => {
            for e in profile.entries.iter_mut() {
                e.apoz = 0.0;
            }
        }
        Mode::NoAdjw => {
            for e in profile.entries.iter_mut() {
                e.adj_weight = 1.0;
            }
        }
        _ => {}
    }
    Ok(profile)
}

/// Pool plans for the uniform-width baseline: every layer keeps exactly the
/// target ratio, no sweep.
fn baseline_plans(arch: &ModelArch, targets: &[f64]) -> Vec<PruningPlan> {
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let ratios = vec![t; arch.num_hidden()];
            let widths = pruner::resolve_widths(&ratios, arch);
            let achieved_params = param_count_for_widths(&widths);
            PruningPlan {
                level: i + 1,
                adaptive: false,
                target_ratio: t,
                ratios,
                widths,
                achieved_params,
            }
        })
        .collect()
}

/// Generate the pool and adaptive plans for the configured mode.
pub fn build_plans(
    cfg: &ExperimentConfig,
    arch: &ModelArch,
    profile: &ApozProfile,
) -> Result<(Vec<PruningPlan>, Vec<PruningPlan>)> {
    let size_m = param_count_for_widths(&arch.layer_widths);
    let gen = pruner::GenSearchConfig {
        epsilon: cfg.epsilon_frac * size_m as f64,
        xi: cfg.xi,
    };
    let plans = match cfg.mode {
        Mode::Baseline => baseline_plans(arch, &cfg.pool_targets),
        _ => pruner::generate_plans(profile, arch, &cfg.pool_targets, &gen)?,
    };
    let adaptive = if cfg.mode == Mode::NoAdaptive || cfg.adaptive.gamma_frac == 0.0 {
        Vec::new()
    } else if cfg.mode == Mode::Baseline {
        // uniform-width control: integer quantization is too coarse for the
        // epsilon band, so take the closest achievable uniform ratio instead
        (2..=plans.len())
            .map(|level| {
                let base = &plans[level - 1];
                let target = base.achieved_params as f64 - cfg.adaptive.gamma_frac * size_m as f64;
                let mut best: Option<PruningPlan> = None;
                let mut u = 0.01;
                while u <= base.target_ratio {
                    let ratios = vec![u; arch.num_hidden()];
                    let widths = pruner::resolve_widths(&ratios, arch);
                    let achieved = param_count_for_widths(&widths);
                    let better = best
                        .as_ref()
                        .map(|b| {
                            (achieved as f64 - target).abs()
                                < (b.achieved_params as f64 - target).abs()
                        })
                        .unwrap_or(true);
                    if better {
                        best = Some(PruningPlan {
                            level,
                            adaptive: true,
                            target_ratio: target / size_m as f64,
                            ratios,
                            widths,
                            achieved_params: achieved,
                        });
                    }
                    u += 0.001;
                }
                best.ok_or_else(|| {
                    FlexError::InvalidConfig(format!("no uniform adaptive plan for level {level}"))
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        (2..=plans.len())
            .map(|level| pruner::adaptive_plan(level, &plans, profile, arch, &gen, &cfg.adaptive))
            .collect::<Result<Vec<_>>>()?
    };
    Ok((plans, adaptive))
}

fn evaluate(pool: &ModelPool, test: &Dataset) -> Result<(Vec<f64>, f64, f64)> {
    let mut per_level = Vec::with_capacity(pool.num_levels());
    for sub in &pool.submodels {
        per_level.push(nn::accuracy(sub, &test.features, &test.labels)?);
    }
    let avg = per_level.iter().sum::<f64>() / per_level.len() as f64;
    let global = *per_level.last().unwrap();
    Ok((per_level, avg, global))
}

/// Full experiment: pre-processing (proxy pretrain, profile, reset, plans,
/// pool) followed by `rounds` rounds of select / dispatch / local train /
/// aggregate / pool update, with reports at the eval cadence.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let master = cfg.seed;
    let config_hash = cfg.hash();

    let arch = cfg.arch()?;
    let size_m = param_count_for_widths(&arch.layer_widths);

    let mut data_cfg = cfg.data.clone();
    data_cfg.seed = derive_seed(master, "data");
    let (train, test) = data::generate_corpus(&data_cfg)?;
    let (proxy_train, proxy_test) = data::proxy_split(
        &train,
        cfg.data.proxy_fraction,
        derive_seed(master, "proxy"),
    )?;

    let profile = profile_for_mode(cfg, &arch, &proxy_train, &proxy_test, master)?;
    let (plans, adaptive_plans) = build_plans(cfg, &arch, &profile)?;

    // Reset(M): fresh init from a derived seed, pre-training discarded
    let global = ParamSet::init(&arch.layer_widths, derive_seed(master, "reset"));
    let mut pool = ModelPool::new(global, plans.clone(), adaptive_plans.clone())?;

    let devices = build_devices(cfg, master)?;
    let shards = data::dirichlet_partition(
        &train,
        cfg.num_devices,
        cfg.data.alpha,
        derive_seed(master, "partition"),
    )?;
    let eligible: Vec<usize> = shards
        .iter()
        .filter(|s| !s.data.is_empty())
        .map(|s| s.device_id)
        .collect();

    let kd_cfg = match cfg.mode {
        Mode::Baseline | Mode::NoKd => kd::KdConfig {
            lambda: 0.0,
            ..cfg.kd.clone()
        },
        _ => cfg.kd.clone(),
    };

    let mut reports = Vec::new();
    let mut audit = Vec::new();
    let mut window_dispatch_bytes = 0u64;
    let mut window_upload_bytes = 0u64;
    let mut window_adaptive = 0u64;
    let mut window_forced = 0u64;

    for round in 1..=cfg.rounds {
        let selection = select_devices(
            &devices,
            &eligible,
            &pool,
            size_m,
            cfg.fraction,
            derive_seed(master, &format!("select-{round}")),
        )?;

        let mut uploads: Vec<Upload> = Vec::with_capacity(selection.len());
        for &(device_id, level) in &selection {
            let resource = sample_resource(&devices[device_id], round);
            let (chosen, forced) = dispatch_and_adapt(level, resource, &pool, size_m);
            let plan = pool.plan(chosen).expect("chosen plan exists");
            if forced && cfg.skip_forced {
                audit.push(DispatchEvent {
                    round,
                    device: device_id,
                    assigned_level: level,
                    chosen,
                    chosen_params: plan.achieved_params,
                    resource,
                    forced,
                });
                window_forced += 1;
                continue;
            }
            if matches!(chosen, PlanId::Adaptive(_)) {
                window_adaptive += 1;
            }
            if forced {
                window_forced += 1;
            }
            audit.push(DispatchEvent {
                round,
                device: device_id,
                assigned_level: level,
                chosen,
                chosen_params: plan.achieved_params,
                resource,
                forced,
            });

            let dispatched = pruner::extract_submodel(&pool.global, &plan.widths)?;
            window_dispatch_bytes += plan.achieved_params as u64 * 8;

            // teachers: every strictly smaller pool level nested inside
            let teacher_widths: Vec<Vec<usize>> = pool
                .plans
                .iter()
                .filter(|p| p.achieved_params < plan.achieved_params)
                .map(|p| p.widths.clone())
                .collect();

            let shard = &shards[device_id].data;
            let result = kd::local_train(
                dispatched,
                &teacher_widths,
                &shard.features,
                &shard.labels,
                &kd_cfg,
                cfg.learning_rate,
                cfg.momentum,
                derive_seed(devices[device_id].seed, &format!("train-{round}")),
            )
            .map_err(|e| match e {
                FlexError::NonFiniteLoss { .. } => FlexError::NonFiniteLoss {
                    device: device_id,
                    round,
                },
                other => other,
            })?;
            window_upload_bytes += result.params.param_count() as u64 * 8;
            uploads.push(Upload {
                device: device_id,
                params: result.params,
                samples: result.sample_count as u64,
            });
        }

        if uploads.is_empty() {
            eprintln!("round {round}: no uploads, skipping aggregation");
        } else {
            uploads.sort_by_key(|u| u.device);
            let new_global = aggregate(&uploads, &pool.global)?;
            pool.update(new_global)?;
        }

        if round % cfg.eval_every == 0 || round == cfg.rounds {
            let (per_level, avg, global_acc) = evaluate(&pool, &test)?;
            reports.push(RoundReport {
                round,
                per_level_accuracy: per_level,
                avg_accuracy: avg,
                global_accuracy: global_acc,
                dispatch_bytes: window_dispatch_bytes,
                upload_bytes: window_upload_bytes,
                adaptive_events: window_adaptive,
                forced_m1: window_forced,
            });
            window_dispatch_bytes = 0;
            window_upload_bytes = 0;
            window_adaptive = 0;
            window_forced = 0;
        }
    }

    Ok(RunOutput {
        reports,
        plans,
        adaptive_plans,
        profile,
        audit,
        config_hash,
    })
}

/// Fixed CSV schema, one row per eval point.
pub const CSV_SCHEMA_VERSION: &str = "flexfl-metrics-v1";

pub fn render_csv(reports: &[RoundReport], num_levels: usize) -> String {
    let mut out = String::from("round");
    for l in 1..=num_levels {
        out.push_str(&format!(",acc_level_{l}"));
    }
    out.push_str(",avg_acc,global_acc,dispatch_bytes,upload_bytes,adaptive_events,forced_m1\n");
    for r in reports {
        out.push_str(&r.round.to_string());
        for a in &r.per_level_accuracy {
            out.push_str(&format!(",{a:.6}"));
        }
        out.push_str(&format!(
            ",{:.6},{:.6},{},{},{},{}\n",
            r.avg_accuracy,
            r.global_accuracy,
            r.dispatch_bytes,
            r.upload_bytes,
            r.adaptive_events,
            r.forced_m1
        ));
    }
    out
}
