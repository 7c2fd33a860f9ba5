//! The experiment pipelines: attack → train → measure → defend, a 2-d
//! defense-failure scenario, and the mixture-model simulation.
//!
//! The adversary-knowledge boundary is structural: filter construction and
//! poison generation only ever receive the auxiliary split and surrogate
//! models, never the victim's training or test data.

use std::time::Instant;

use subpop_core::attacks::{
    grad_opt, influence_attack, label_flip, AttackConfig, Generator, PoisonSet,
};
use subpop_core::data::{split_dataset, synth_gaussian_subpops, BlobSpec, Dataset, Split};
use subpop_core::defenses::{self, SpectralBudget, DEFAULT_DEFENSE_ITERS};
use subpop_core::metrics::{damage_report, DamageReport};
use subpop_core::models::{self, Architecture, ModelParams, TrainConfig};
use subpop_core::select::{
    annotation_tags, cluster_match, feature_match, pick_cluster, FilterFunction,
};
use subpop_core::seed;
use subpop_core::theory::{verify_theorem, MixtureSpec, TheoryReport};
use subpop_core::Error as CoreError;

use crate::config::{ExperimentConfig, SelectionSpec, TheorySpec};
use crate::reports::{
    aggregate_worst_k, DefenseRow, Fig2Report, GridRow, LayerSweepRow, RunReport, SkippedCell,
    TrialDamage,
};
use crate::CliError;

const DATA_SALT: u64 = 0x01;
const SPLIT_SALT: u64 = 0x02;
const VICTIM_SALT: u64 = 0x03;
const SURROGATE_SALT: u64 = 0x04;
const CLUSTER_SALT: u64 = 0x05;
const PICK_SALT: u64 = 0x06;
const ATTACK_SALT: u64 = 0x07;
const THEORY_SALT: u64 = 0x08;
const TRIAL_SALT: u64 = 0x09;
const SWEEP_SALT: u64 = 0x0A;

/// Root seed for one trial of a run.
pub fn trial_seed(root: u64, trial: usize) -> u64 {
    seed::derive(seed::derive(root, TRIAL_SALT), trial as u64)
}

/// A filter plus its report name.
#[derive(Debug, Clone)]
pub struct NamedFilter {
    pub name: String,
    pub filter: FilterFunction,
}

/// Everything a trial shares across its (subpopulation, α) cells.
#[derive(Debug, Clone)]
pub struct TrialContext {
    pub split: Split,
    pub arch: Architecture,
    /// Victim training settings; reused verbatim for poisoned retraining so
    /// a zero-poison attack reproduces the clean model exactly.
    pub victim_cfg: TrainConfig,
    pub clean: ModelParams,
    pub surrogate_arch: Architecture,
    pub surrogate_cfg: TrainConfig,
    pub surrogate: ModelParams,
    pub filters: Vec<NamedFilter>,
    /// Index into `filters` the pick strategy favored (cluster mode only).
    pub picked: Option<usize>,
}

/// Loads data, splits it, trains the clean and surrogate models, and builds
/// the subpopulation filters for one trial.
pub fn prepare_trial(
    config: &ExperimentConfig,
    trial_seed: u64,
) -> Result<TrialContext, CliError> {
    let data = config.dataset.load(seed::derive(trial_seed, DATA_SALT))?;
    let split = split_dataset(
        &data,
        config.split.fractions(),
        seed::derive(trial_seed, SPLIT_SALT),
    )?;

    let arch = config.model.resolve(data.feature_dim, data.num_classes);
    let victim_cfg = config.train.to_config(seed::derive(trial_seed, VICTIM_SALT));
    let clean = models::train(&split.train, &arch, &victim_cfg)?;

    let surrogate_spec = config.surrogate_model.clone().unwrap_or_else(|| config.model.clone());
    let surrogate_arch = surrogate_spec.resolve(data.feature_dim, data.num_classes);
    let surrogate_cfg = config
        .train
        .to_config(seed::derive(trial_seed, SURROGATE_SALT));
    let surrogate = models::train(&split.aux, &surrogate_arch, &surrogate_cfg)?;

    let (filters, picked) = build_filters(
        config,
        &split.aux,
        &surrogate,
        &surrogate_arch,
        &surrogate_cfg,
        trial_seed,
    )?;

    Ok(TrialContext {
        split,
        arch,
        victim_cfg,
        clean,
        surrogate_arch,
        surrogate_cfg,
        surrogate,
        filters,
        picked,
    })
}

fn build_filters(
    config: &ExperimentConfig,
    aux: &Dataset,
    surrogate: &ModelParams,
    surrogate_arch: &Architecture,
    surrogate_cfg: &TrainConfig,
    trial_seed: u64,
) -> Result<(Vec<NamedFilter>, Option<usize>), CliError> {
    match &config.selection {
        SelectionSpec::FeatureMatch { tags } => {
            let tags = match tags {
                Some(t) => t.clone(),
                None => annotation_tags(aux),
            };
            if tags.is_empty() {
                return Err(CliError::Config(
                    "feature_match found no annotation tags in the auxiliary split".into(),
                ));
            }
            let mut filters = Vec::with_capacity(tags.len());
            for tag in tags {
                let filter = feature_match(aux, &tag)?;
                filters.push(NamedFilter {
                    name: filter.describe(),
                    filter,
                });
            }
            Ok((filters, None))
        }
        SelectionSpec::ClusterMatch {
            layer,
            rank,
            k,
            pick,
            ..
        } => {
            let (filters, _) = cluster_match(
                aux,
                surrogate,
                *layer,
                *rank,
                *k,
                seed::derive(trial_seed, CLUSTER_SALT),
            )?;
            let picked = pick_cluster(
                &filters,
                aux,
                surrogate,
                surrogate_arch,
                surrogate_cfg,
                *pick,
                seed::derive(trial_seed, PICK_SALT),
            )?;
            let named = filters
                .into_iter()
                .map(|filter| NamedFilter {
                    name: filter.describe(),
                    filter,
                })
                .collect();
            Ok((named, Some(picked)))
        }
    }
}

/// Crafts one poison set from the auxiliary split and surrogate alone.
///
/// The optimizing generators start from the label-flip set and ascend the
/// loss alignment against the subpopulation carrying the flipped label;
/// clamping uses the auxiliary feature bounds, the only bounds the
/// adversary can see.
pub fn generate_poison(
    aux: &Dataset,
    surrogate: &ModelParams,
    filter: &FilterFunction,
    config: &ExperimentConfig,
    alpha: f64,
    seed_value: u64,
) -> Result<PoisonSet, CoreError> {
    let attack = &config.attack;
    let cfg = AttackConfig {
        poison_rate: alpha,
        target_label: attack.target_label,
        steps: attack.steps,
        step_size: attack.step_size,
        clamp: attack.clamp,
        hessian_identity: false,
    };
    let flipped = label_flip(aux, filter, &cfg, surrogate, seed_value)?;
    if attack.generator == Generator::LabelFlip {
        return Ok(flipped);
    }

    let members = filter.member_indices(aux)?;
    let mut target_set = aux.subset(&members)?;
    if let Some(flip) = flipped.flip_label {
        for p in &mut target_set.points {
            p.label = flip;
        }
    }
    let bounds = if cfg.clamp {
        Some(aux.bounds.as_slice())
    } else {
        None
    };
    match attack.generator {
        Generator::GradOpt => grad_opt(&flipped, surrogate, &target_set, &cfg, bounds),
        Generator::Influence => influence_attack(
            &flipped,
            surrogate,
            aux,
            config.train.l2_reg,
            &target_set,
            &cfg,
            bounds,
        ),
        Generator::LabelFlip => unreachable!("handled above"),
    }
}

/// Results of the (subpopulation, α) grid for one trial.
#[derive(Debug, Clone, Default)]
pub struct CellResults {
    pub damages: Vec<DamageReport>,
    pub defense: Vec<DefenseRow>,
    pub skipped: Vec<SkippedCell>,
}

/// Runs every (filter, α) cell: craft poison, retrain, measure, and
/// optionally run the configured defenses.
///
/// A subpopulation with no members in the auxiliary split, or none (or all)
/// of the test split, is recorded as skipped rather than failing the run.
pub fn run_cells(
    config: &ExperimentConfig,
    ctx: &TrialContext,
    filters: &[NamedFilter],
    alphas: &[f64],
    trial: usize,
    cell_seed_base: u64,
    with_defenses: bool,
) -> Result<CellResults, CliError> {
    let mut out = CellResults::default();

    for (si, nf) in filters.iter().enumerate() {
        let aux_members = nf.filter.member_indices(&ctx.split.aux)?;
        if aux_members.is_empty() {
            out.skipped.push(SkippedCell {
                trial,
                subpop: nf.name.clone(),
                reason: "no members in the auxiliary split".into(),
            });
            continue;
        }

        for (ai, &alpha) in alphas.iter().enumerate() {
            let attack_seed =
                seed::derive(seed::derive(cell_seed_base, si as u64), ai as u64);
            let poison = generate_poison(
                &ctx.split.aux,
                &ctx.surrogate,
                &nf.filter,
                config,
                alpha,
                attack_seed,
            )?;

            let mut poisoned_train = ctx.split.train.clone();
            poisoned_train.extend(poison.points.clone())?;
            let poisoned = models::train(&poisoned_train, &ctx.arch, &ctx.victim_cfg)?;

            let report = match damage_report(
                &ctx.clean,
                &poisoned,
                &ctx.split.test,
                &nf.filter,
                alpha,
                poison.len(),
            ) {
                Ok(r) => r,
                Err(CoreError::EmptySubpopulation(reason)) => {
                    out.skipped.push(SkippedCell {
                        trial,
                        subpop: nf.name.clone(),
                        reason,
                    });
                    break;
                }
                Err(e) => return Err(e.into()),
            };
            out.damages.push(report);

            if with_defenses && !config.defenses.is_empty() {
                out.defense.extend(run_defenses(
                    config,
                    ctx,
                    nf,
                    alpha,
                    &poisoned_train,
                    &poisoned,
                    trial,
                )?);
            }
        }
    }
    Ok(out)
}

fn default_rep_layer(arch: &Architecture) -> usize {
    arch.num_layers() - 1
}

fn run_defenses(
    config: &ExperimentConfig,
    ctx: &TrialContext,
    nf: &NamedFilter,
    alpha: f64,
    poisoned_train: &Dataset,
    undefended: &ModelParams,
    trial: usize,
) -> Result<Vec<DefenseRow>, CliError> {
    let mut rows = Vec::new();
    let poison_count = poisoned_train.poison_indices().len();

    let mut push = |name: &str, run: &defenses::DefenseRun| -> Result<(), CliError> {
        let outcome = defenses::evaluate_defense(
            &ctx.clean,
            undefended,
            run,
            &ctx.split.test,
            &nf.filter,
        )?;
        rows.push(DefenseRow {
            trial,
            subpop: nf.name.clone(),
            alpha,
            defense: name.to_string(),
            found_fraction: outcome.found_fraction,
            removed_fraction: outcome.removed_fraction,
            target_before: outcome.target_before,
            target_after: outcome.target_after,
            collateral_after: outcome.collateral_after,
            warning: run.warning.clone(),
        });
        Ok(())
    };

    if let Some(budget) = &config.defenses.trim {
        let m = budget.m.unwrap_or(poison_count);
        let run = defenses::trim(poisoned_train, &ctx.arch, &ctx.victim_cfg, m, budget.max_iters)?;
        push("trim", &run)?;
    }
    if let Some(budget) = &config.defenses.sever {
        let m = budget.m.unwrap_or(poison_count);
        let run =
            defenses::sever(poisoned_train, &ctx.arch, &ctx.victim_cfg, m, budget.max_iters)?;
        push("sever", &run)?;
    }
    if let Some(spec) = &config.defenses.spectral {
        let layer = spec.layer.unwrap_or_else(|| default_rep_layer(&ctx.arch));
        let budget = if spec.use_poison_counts {
            let mut counts = vec![0usize; poisoned_train.num_classes];
            for i in poisoned_train.poison_indices() {
                counts[poisoned_train.points[i].label] += 1;
            }
            SpectralBudget::SuspectedCounts {
                counts,
                multiplier: spec.multiplier,
            }
        } else {
            SpectralBudget::Fraction {
                fraction: spec.fraction,
                multiplier: spec.multiplier,
            }
        };
        let removed = defenses::spectral_signatures(poisoned_train, undefended, layer, &budget)?;
        let run = defenses::run_from_removal(poisoned_train, &ctx.arch, &ctx.victim_cfg, &removed)?;
        push("spectral_signatures", &run)?;
    }
    if let Some(spec) = &config.defenses.activation {
        let layer = spec.layer.unwrap_or_else(|| default_rep_layer(&ctx.arch));
        let removed = defenses::activation_clustering(poisoned_train, undefended, layer)?;
        let run = defenses::run_from_removal(poisoned_train, &ctx.arch, &ctx.victim_cfg, &removed)?;
        push("activation_clustering", &run)?;
    }
    Ok(rows)
}

/// Runs the full configured experiment: per trial, build filters, attack
/// every (subpopulation, α) cell, measure damages, and run any configured
/// defenses; then aggregate worst-k tables and the optional layer sweep.
pub fn run_attack_pipeline(config: &ExperimentConfig) -> Result<RunReport, CliError> {
    config.validate()?;
    let started = Instant::now();

    let mut damages: Vec<TrialDamage> = Vec::new();
    let mut defense = Vec::new();
    let mut skipped = Vec::new();
    let mut picked_subpop = None;

    for trial in 0..config.trials {
        let trial_seed = trial_seed(config.seed, trial);
        let ctx = prepare_trial(config, trial_seed)?;
        if trial == 0 {
            picked_subpop = ctx.picked.map(|i| ctx.filters[i].name.clone());
        }
        let cells = run_cells(
            config,
            &ctx,
            &ctx.filters,
            &config.attack.alphas,
            trial,
            seed::derive(trial_seed, ATTACK_SALT),
            true,
        )?;
        damages.extend(
            cells
                .damages
                .into_iter()
                .map(|report| TrialDamage { trial, report }),
        );
        defense.extend(cells.defense);
        skipped.extend(cells.skipped);
    }

    let worst_k = aggregate_worst_k(&damages, &config.attack.alphas, config.trials)?;
    let layer_sweep = run_layer_sweep(config)?;

    Ok(RunReport {
        seed: config.seed,
        trials: config.trials,
        config: config.clone(),
        picked_subpop,
        damages,
        worst_k,
        defense,
        layer_sweep,
        skipped,
        wall_clock: started.elapsed(),
    })
}

/// Re-clusters at every representation layer of the surrogate and reports
/// worst-k target damage per layer at the first configured α.
fn run_layer_sweep(config: &ExperimentConfig) -> Result<Vec<LayerSweepRow>, CliError> {
    let (rank, k) = match &config.selection {
        SelectionSpec::ClusterMatch {
            rank,
            k,
            layer_sweep: true,
            ..
        } => (*rank, *k),
        _ => return Ok(Vec::new()),
    };

    let trial_seed = trial_seed(config.seed, 0);
    let ctx = prepare_trial(config, trial_seed)?;
    let alpha = config.attack.alphas[0];
    let mut rows = Vec::new();

    for layer in 0..=ctx.surrogate_arch.num_layers() {
        let (filters, _) = cluster_match(
            &ctx.split.aux,
            &ctx.surrogate,
            layer,
            rank,
            k,
            seed::derive(trial_seed, CLUSTER_SALT),
        )?;
        let named: Vec<NamedFilter> = filters
            .into_iter()
            .map(|filter| NamedFilter {
                name: filter.describe(),
                filter,
            })
            .collect();
        let cells = run_cells(
            config,
            &ctx,
            &named,
            &[alpha],
            0,
            seed::derive(seed::derive(trial_seed, SWEEP_SALT), layer as u64),
            false,
        )?;
        if cells.damages.is_empty() {
            continue;
        }
        let k_eff = cells.damages.len().min(5);
        let summary = subpop_core::metrics::worst_k_summary(&cells.damages, k_eff)?;
        rows.push(LayerSweepRow {
            layer,
            alpha,
            k: k_eff,
            mean_target_damage: summary.mean_target_damage,
        });
    }
    Ok(rows)
}

/// Runs the mixture-model simulation behind the impossibility and
/// concentration results.
pub fn run_theory(spec: &TheorySpec, seed_value: u64) -> Result<TheoryReport, CliError> {
    let mixture = MixtureSpec {
        weights: spec.weights.clone(),
        label_probs: spec.label_probs.clone(),
    };
    Ok(verify_theorem(
        &mixture,
        spec.n,
        spec.trials,
        seed::derive(seed_value, THEORY_SALT),
    )?)
}

fn fig2_blobs(count: usize) -> Vec<BlobSpec> {
    vec![
        BlobSpec {
            center: vec![-6.0, 0.0],
            sigma: 1.0,
            count,
            label: 0,
        },
        BlobSpec {
            center: vec![6.0, 0.0],
            sigma: 1.0,
            count,
            label: 1,
        },
        BlobSpec {
            center: vec![0.0, 6.0],
            sigma: 1.0,
            count,
            label: 0,
        },
    ]
}

/// The 2-d defense-failure scenario: three separable blobs, subpopulation 2
/// flooded with flipped-label poisons, and a loss-trimming defense that
/// removes the genuine subpopulation instead of the poisons.
///
/// Returns the summary report and a decision grid over the plane for
/// external plotting.
pub fn run_fig2_scenario(seed_value: u64) -> Result<(Fig2Report, Vec<GridRow>), CliError> {
    let train = synth_gaussian_subpops(&fig2_blobs(20), 2, seed::derive(seed_value, 1))?;
    let test = synth_gaussian_subpops(&fig2_blobs(40), 2, seed::derive(seed_value, 2))?;

    let arch = Architecture::linear(2, 2);
    let cfg = TrainConfig {
        epochs: 300,
        seed: seed::derive(seed_value, 3),
        ..TrainConfig::default()
    };
    let clean = models::train(&train, &arch, &cfg)?;

    let filter = feature_match(&train, "2")?;
    let attack_cfg = AttackConfig {
        poison_rate: 1.5,
        ..AttackConfig::default()
    };
    let poison = label_flip(&train, &filter, &attack_cfg, &clean, seed::derive(seed_value, 4))?;

    let mut poisoned_train = train.clone();
    poisoned_train.extend(poison.points.clone())?;
    let poisoned = models::train(&poisoned_train, &arch, &cfg)?;

    let m = poison.len();
    let trim_run = defenses::trim(&poisoned_train, &arch, &cfg, m, DEFAULT_DEFENSE_ITERS)?;
    let outcome = defenses::evaluate_defense(&clean, &poisoned, &trim_run, &test, &filter)?;

    let subpop_test = test.subset(&filter.member_indices(&test)?)?;
    let clean_subpop_error = 1.0 - models::accuracy(&clean, &subpop_test)?;

    let damage = damage_report(&clean, &poisoned, &test, &filter, attack_cfg.poison_rate, m)?;

    let genuine: Vec<usize> = (0..train.len())
        .filter(|&i| train.points[i].annotation.as_deref() == Some("2"))
        .collect();
    let removed_genuine = genuine
        .iter()
        .filter(|i| trim_run.removed_indices.contains(i))
        .count();

    let report = Fig2Report {
        seed: seed_value,
        clean_subpop_error,
        damage,
        trim_target_damage: outcome.target_after,
        trim_collateral_damage: outcome.collateral_after,
        trim_found_fraction: outcome.found_fraction,
        removed_total: trim_run.removed_indices.len(),
        removed_genuine_subpop: removed_genuine,
        genuine_subpop_train_count: genuine.len(),
    };

    let mut grid = Vec::new();
    let steps = 72;
    for ix in 0..=steps {
        let x = -9.0 + 0.25 * ix as f64;
        for iy in 0..=steps {
            let y = -9.0 + 0.25 * iy as f64;
            let point = [x, y];
            grid.push(GridRow {
                x,
                y,
                clean: models::predict(&clean, &point),
                poisoned: models::predict(&poisoned, &point),
                trimmed: models::predict(&trim_run.final_model, &point),
            });
        }
    }

    Ok((report, grid))
}
