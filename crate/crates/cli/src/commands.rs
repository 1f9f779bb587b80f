//! Subcommand implementations. Every command is deterministic given its
//! config and seeds; outputs are plain-text checkpoints, CSV tables, and
//! JSON-lines logs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};

use ttrf_core::backbone::{
    accuracy, load_backbone, pretrain, save_backbone, FrozenBackbone,
};
use ttrf_core::graph::save_dataset;
use ttrf_core::iamae::{adapt, infer, InferenceMode, MaskingConfig};
use ttrf_core::intervention::{
    load_intervention, save_intervention, Intervention, VariantKind,
};
use ttrf_core::kernel::RngKey;
use ttrf_core::selection::{InterventionMask, SelectionMode};
use ttrf_core::theory::{trial_csv_header, run_trials, TrialParams};

use crate::config::ExperimentConfig;
use crate::experiment::{adapt_spec_from_config, build_data, layer_dims, mean_std, BenchmarkData};

/// Distinguishes usage/validation failures (exit 2) from runtime failures
/// (exit 1).
#[derive(Debug)]
pub enum CmdError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CmdError {
    fn from(e: anyhow::Error) -> Self {
        CmdError::Runtime(e)
    }
}

impl std::fmt::Display for CmdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CmdError::Usage(m) => write!(f, "{m}"),
            CmdError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

pub type CmdResult = Result<(), CmdError>;

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CmdError> {
    let mut cfg = ExperimentConfig::from_file(path).map_err(|e| CmdError::Usage(e.to_string()))?;
    cfg.apply_overrides(overrides).map_err(|e| CmdError::Usage(e.to_string()))?;
    // Missing dataset files are a usage error, reported by name before any
    // work starts.
    if let crate::config::DataSource::Files { edges, features, labels, split } = &cfg.data {
        for path in [edges, features, labels, split] {
            if !path.exists() {
                return Err(CmdError::Usage(format!(
                    "dataset file not found: {}",
                    path.display()
                )));
            }
        }
    }
    Ok(cfg)
}

fn ensure_out_dir(out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))
}

fn backbone_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("backbone_seed{seed}.ckpt"))
}

fn intervention_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("intervention_seed{seed}.ckpt"))
}

fn selected_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("selected_seed{seed}.txt"))
}

fn seeds_to_run(cfg: &ExperimentConfig, seed_flag: Option<u64>) -> Vec<u64> {
    match seed_flag {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    }
}

/// `split`: materialize the configured dataset and write it in the text
/// formats, including the shifted target features when a shift is configured.
pub fn cmd_split(cfg: &ExperimentConfig, out_dir: &Path) -> CmdResult {
    ensure_out_dir(out_dir)?;
    let data = build_data(cfg)?;
    save_dataset(
        &data.source,
        &data.masks,
        &out_dir.join("edges.txt"),
        &out_dir.join("features.txt"),
        &out_dir.join("labels.txt"),
        &out_dir.join("split.txt"),
    )
    .context("writing dataset")?;
    if !data.target.features.bits_eq(&data.source.features) {
        save_dataset(
            &data.target,
            &data.masks,
            &out_dir.join("edges.txt"),
            &out_dir.join("features_target.txt"),
            &out_dir.join("labels.txt"),
            &out_dir.join("split.txt"),
        )
        .context("writing shifted features")?;
    }
    println!("wrote dataset to {}", out_dir.display());
    Ok(())
}

/// `pretrain`: train one backbone per seed on the source graph and write
/// checkpoints plus a training log.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out_dir: &Path, seed_flag: Option<u64>) -> CmdResult {
    ensure_out_dir(out_dir)?;
    let data = build_data(cfg)?;
    for seed in seeds_to_run(cfg, seed_flag) {
        let (bb, log) =
            pretrain(&data.source, &data.masks, &cfg.pretrain, RngKey::new(seed).child(0))
                .context("pretraining")?;
        let path = backbone_path(out_dir, seed);
        save_backbone(&path, &bb).context("writing checkpoint")?;
        let mut csv = String::from("epoch,loss,val_accuracy\n");
        for e in &log {
            let _ = writeln!(csv, "{},{:.12e},{:.6}", e.epoch, e.loss, e.val_accuracy);
        }
        std::fs::write(out_dir.join(format!("train_log_seed{seed}.csv")), csv)
            .context("writing training log")?;
        println!(
            "seed {seed}: backbone fingerprint {:016x} ({} epochs) -> {}",
            bb.fingerprint(),
            log.len(),
            path.display()
        );
    }
    Ok(())
}

fn load_backbone_for(data: &BenchmarkData, out_dir: &Path, seed: u64) -> Result<FrozenBackbone> {
    let path = backbone_path(out_dir, seed);
    load_backbone(&path, &data.target)
        .with_context(|| format!("loading backbone checkpoint {}", path.display()))
}

/// `adapt`: load each seed's backbone, adapt interventions on the target
/// graph, and write the intervention checkpoint, the per-epoch JSON-lines
/// report, and the selected-node export. Fails hard if the backbone
/// fingerprint drifts.
pub fn cmd_adapt(cfg: &ExperimentConfig, out_dir: &Path, seed_flag: Option<u64>) -> CmdResult {
    ensure_out_dir(out_dir)?;
    let data = build_data(cfg)?;
    for seed in seeds_to_run(cfg, seed_flag) {
        let bb = load_backbone_for(&data, out_dir, seed)?;
        let fingerprint_before = bb.fingerprint();
        let iv0 = Intervention::initialize(
            cfg.variant,
            cfg.rank,
            &layer_dims(&bb, &cfg.layers),
            RngKey::new(seed).child(1),
        )
        .context("intervention init")?;
        let (best, report) = match adapt(
            &bb,
            &data.target,
            &data.masks,
            &cfg.selection,
            iv0,
            &cfg.masking,
            &cfg.ssl,
            RngKey::new(seed).child(2),
        ) {
            Ok(out) => out,
            Err(ttrf_core::iamae::AdaptError::Diverged { epoch, loss, report }) => {
                // Keep the partial per-epoch log around for the postmortem.
                let _ = std::fs::write(
                    out_dir.join(format!("adapt_seed{seed}.jsonl")),
                    report.to_jsonl(),
                );
                return Err(CmdError::Runtime(anyhow!(
                    "adaptation diverged at epoch {epoch} (loss {loss}); partial report written"
                )));
            }
            Err(e) => return Err(CmdError::Runtime(anyhow::Error::new(e).context("adaptation"))),
        };
        if !report.fingerprint_verified || bb.fingerprint() != fingerprint_before {
            return Err(CmdError::Runtime(anyhow!(
                "backbone fingerprint drifted during adaptation (seed {seed})"
            )));
        }
        save_intervention(&intervention_path(out_dir, seed), &best)
            .context("writing intervention checkpoint")?;
        std::fs::write(out_dir.join(format!("adapt_seed{seed}.jsonl")), report.to_jsonl())
            .context("writing adaptation report")?;
        let mut selected = String::new();
        for i in &report.selected {
            let _ = writeln!(selected, "{i}");
        }
        std::fs::write(selected_path(out_dir, seed), selected)
            .context("writing selected-node export")?;
        println!(
            "seed {seed}: adapted {} epochs, best {:?}, |targets| {}, fingerprint ok",
            report.epochs.len(),
            report.best_epoch,
            report.selected.len()
        );
    }
    Ok(())
}

/// One evaluation row; `adapted` fields are present only when an
/// intervention checkpoint exists for the seed.
struct EvalRow {
    seed: u64,
    split: &'static str,
    accuracy_frozen: f64,
    accuracy_adapted: Option<f64>,
    id_retention: Option<f64>,
    selected_count: usize,
    tunable_params: usize,
    wall_time_s: Option<f64>,
}

fn read_selected(path: &Path, n: usize) -> Result<InterventionMask> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading selected-node export {}", path.display()))?;
    let mut mask = InterventionMask::empty(n);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let idx: usize = line
            .parse()
            .with_context(|| format!("{}:{}: bad node index", path.display(), lineno + 1))?;
        if idx >= n {
            return Err(anyhow!("{}:{}: node {idx} out of range", path.display(), lineno + 1));
        }
        mask.selected[idx] = true;
        mask.probs[idx] = 1.0;
    }
    Ok(mask)
}

/// `eval`: per-seed accuracy of the frozen baseline and (when intervention
/// checkpoints exist) the adapted model, plus the in-distribution retention
/// ratio. Writes a CSV and a JSON document with an aggregate row.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    mode_flag: Option<InferenceMode>,
    timings: bool,
) -> CmdResult {
    ensure_out_dir(out_dir)?;
    let data = build_data(cfg)?;
    let mode = mode_flag.unwrap_or(cfg.inference);
    let split = match cfg.shift_kind {
        crate::config::ShiftConfigKind::None => "none",
        crate::config::ShiftConfigKind::Covariate => "covariate",
        crate::config::ShiftConfigKind::ConceptDegree => "concept_degree",
    };
    let test_rows = data.masks.test_indices();
    let train_rows = data.masks.train_indices();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let bb = load_backbone_for(&data, out_dir, seed)?;
        let (frozen_target, _) = bb.forward(&data.target.features, None).context("forward")?;
        let (frozen_source, _) = bb.forward(&data.source.features, None).context("forward")?;
        let accuracy_frozen = accuracy(&frozen_target, &data.target.labels, &test_rows);
        let iv_path = intervention_path(out_dir, seed);
        let (accuracy_adapted, id_retention, selected_count, tunable_params) = if iv_path
            .exists()
        {
            let iv = load_intervention(&iv_path).context("loading intervention checkpoint")?;
            let mask = read_selected(&selected_path(out_dir, seed), data.target.n())?;
            let adapted_target =
                infer(&bb, &iv, &mask, &data.target.features, mode).context("inference")?;
            let adapted_source =
                infer(&bb, &iv, &mask, &data.source.features, mode).context("inference")?;
            let acc_adapted = accuracy(&adapted_target.logits, &data.target.labels, &test_rows);
            let frozen_id = accuracy(&frozen_source, &data.source.labels, &train_rows);
            let adapted_id = accuracy(&adapted_source.logits, &data.source.labels, &train_rows);
            let retention = if frozen_id > 0.0 { adapted_id / frozen_id } else { 1.0 };
            (Some(acc_adapted), Some(retention), mask.count(), iv.parameter_count())
        } else {
            (None, None, 0, 0)
        };
        rows.push(EvalRow {
            seed,
            split,
            accuracy_frozen,
            accuracy_adapted,
            id_retention,
            selected_count,
            tunable_params,
            wall_time_s: timings.then(|| started.elapsed().as_secs_f64()),
        });
    }

    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut csv = String::from(
        "seed,split,accuracy_frozen,accuracy_adapted,id_retention,selected_count,tunable_params,wall_time_s\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{},{},{},{},{}",
            r.seed,
            r.split,
            r.accuracy_frozen,
            fmt_opt(r.accuracy_adapted),
            fmt_opt(r.id_retention),
            r.selected_count,
            r.tunable_params,
            fmt_opt(r.wall_time_s),
        );
    }
    let frozen: Vec<f64> = rows.iter().map(|r| r.accuracy_frozen).collect();
    let (fm, fs) = mean_std(&frozen);
    let adapted: Vec<f64> = rows.iter().filter_map(|r| r.accuracy_adapted).collect();
    if adapted.is_empty() {
        let _ = writeln!(csv, "aggregate,{split},{fm:.6}+-{fs:.6},,,,,");
    } else {
        let (am, as_) = mean_std(&adapted);
        let _ = writeln!(csv, "aggregate,{split},{fm:.6}+-{fs:.6},{am:.6}+-{as_:.6},,,,");
    }
    std::fs::write(out_dir.join("eval.csv"), &csv).context("writing eval.csv")?;

    let mut json_rows = Vec::new();
    for r in &rows {
        json_rows.push(serde_json::json!({
            "seed": r.seed,
            "split": r.split,
            "accuracy_frozen": r.accuracy_frozen,
            "accuracy_adapted": r.accuracy_adapted,
            "id_retention": r.id_retention,
            "selected_count": r.selected_count,
            "tunable_params": r.tunable_params,
            "wall_time_s": r.wall_time_s,
            "mode": mode.name(),
        }));
    }
    let json = serde_json::json!({
        "rows": json_rows,
        "aggregate": {
            "accuracy_frozen_mean": fm,
            "accuracy_frozen_std": fs,
            "accuracy_adapted_mean": if adapted.is_empty() { None } else { Some(mean_std(&adapted).0) },
            "accuracy_adapted_std": if adapted.is_empty() { None } else { Some(mean_std(&adapted).1) },
        },
    });
    std::fs::write(
        out_dir.join("eval.json"),
        serde_json::to_string_pretty(&json).expect("json"),
    )
    .context("writing eval.json")?;
    print!("{csv}");
    Ok(())
}

/// One ablation arm: intervention variant x masking strategy x selection
/// strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub variant: VariantKind,
    /// `true` for intervention-aware masking, `false` for uniform masking.
    pub intervention_aware: bool,
    /// `true` for uncertainty-guided top-fraction selection, `false` for
    /// random selection of equal size.
    pub uncertainty_selection: bool,
}

impl AblationArm {
    pub fn name(&self) -> String {
        format!(
            "{}:{}:{}",
            self.variant.name(),
            if self.intervention_aware { "iamae" } else { "mae_uniform" },
            if self.uncertainty_selection { "uncertainty" } else { "random" },
        )
    }

    pub fn parse(s: &str) -> Option<Self> {
        let mut it = s.split(':');
        let variant = VariantKind::parse(it.next()?)?;
        let intervention_aware = match it.next()? {
            "iamae" => true,
            "mae_uniform" => false,
            _ => return None,
        };
        let uncertainty_selection = match it.next()? {
            "uncertainty" => true,
            "random" => false,
            _ => return None,
        };
        it.next().is_none().then_some(AblationArm {
            variant,
            intervention_aware,
            uncertainty_selection,
        })
    }

    pub fn default_grid() -> Vec<AblationArm> {
        let mut arms = Vec::new();
        for variant in [VariantKind::LoReft, VariantKind::DiReft, VariantKind::Uv] {
            for intervention_aware in [true, false] {
                for uncertainty_selection in [true, false] {
                    arms.push(AblationArm { variant, intervention_aware, uncertainty_selection });
                }
            }
        }
        arms
    }
}

/// `ablate`: run paired arms over the config seeds. Every arm for a given
/// seed shares the same data and the same pretrained backbone; arms differ
/// only in the audited component.
pub fn cmd_ablate(cfg: &ExperimentConfig, out_dir: &Path, arm_specs: &[String]) -> CmdResult {
    ensure_out_dir(out_dir)?;
    let arms: Vec<AblationArm> = if arm_specs.is_empty() {
        AblationArm::default_grid()
    } else {
        arm_specs
            .iter()
            .map(|s| {
                AblationArm::parse(s).ok_or_else(|| {
                    CmdError::Usage(format!(
                        "bad arm `{s}` (expected <variant>:<iamae|mae_uniform>:<uncertainty|random>)"
                    ))
                })
            })
            .collect::<Result<_, _>>()?
    };

    let data = build_data(cfg)?;
    // Selection fraction shared by both selection strategies.
    let q = match cfg.selection.mode {
        SelectionMode::TopFraction(q) | SelectionMode::RandomFraction(q) => q,
        SelectionMode::Bernoulli => 0.10,
    };

    // One backbone per seed, shared across arms (paired comparison).
    let mut backbones = Vec::new();
    for &seed in &cfg.seeds {
        let (bb, _) =
            pretrain(&data.source, &data.masks, &cfg.pretrain, RngKey::new(seed).child(0))
                .context("pretraining")?;
        backbones.push((seed, bb));
    }

    let mut csv = String::from("arm,seed,accuracy_frozen,accuracy_adapted,gain\n");
    let mut summary = String::from("arm,mean_frozen,mean_adapted,mean_gain,std_gain\n");
    for arm in &arms {
        let mut frozen_accs = Vec::new();
        let mut adapted_accs = Vec::new();
        let mut gains = Vec::new();
        for (seed, bb) in &backbones {
            let mut arm_cfg = adapt_spec_from_config(cfg);
            arm_cfg.variant = arm.variant;
            arm_cfg.selection.mode = if arm.uncertainty_selection {
                SelectionMode::TopFraction(q)
            } else {
                SelectionMode::RandomFraction(q)
            };
            if !arm.intervention_aware {
                // Uniform masking: the base rate covers the whole budget, so
                // the density term contributes nothing.
                arm_cfg.masking = MaskingConfig { beta: 1.0, ..cfg.masking };
            }
            let iv0 = Intervention::initialize(
                arm.variant,
                arm_cfg.rank,
                &layer_dims(bb, &arm_cfg.layers),
                RngKey::new(*seed).child(1),
            )
            .context("intervention init")?;
            let (best, report) = adapt(
                bb,
                &data.target,
                &data.masks,
                &arm_cfg.selection,
                iv0,
                &arm_cfg.masking,
                &arm_cfg.ssl,
                RngKey::new(*seed).child(2),
            )
            .context("adaptation")?;
            let mut mask = InterventionMask::empty(data.target.n());
            for &i in &report.selected {
                mask.selected[i] = true;
                mask.probs[i] = 1.0;
            }
            let (frozen_logits, _) =
                bb.forward(&data.target.features, None).context("forward")?;
            let adapted = infer(bb, &best, &mask, &data.target.features, arm_cfg.inference)
                .context("inference")?;
            let test_rows = data.masks.test_indices();
            let f = accuracy(&frozen_logits, &data.target.labels, &test_rows);
            let a = accuracy(&adapted.logits, &data.target.labels, &test_rows);
            let _ = writeln!(csv, "{},{seed},{f:.6},{a:.6},{:.6}", arm.name(), a - f);
            frozen_accs.push(f);
            adapted_accs.push(a);
            gains.push(a - f);
        }
        let (gm, gs) = mean_std(&gains);
        let _ = writeln!(
            summary,
            "{},{:.6},{:.6},{gm:.6},{gs:.6}",
            arm.name(),
            mean_std(&frozen_accs).0,
            mean_std(&adapted_accs).0,
        );
    }
    std::fs::write(out_dir.join("ablate.csv"), &csv).context("writing ablate.csv")?;
    std::fs::write(out_dir.join("ablate_summary.csv"), &summary)
        .context("writing ablate_summary.csv")?;
    print!("{summary}");
    Ok(())
}

/// `theory`: run the risk-reduction harness and write one CSV row per trial.
pub fn cmd_theory(
    trials: usize,
    params: &TrialParams,
    seed: u64,
    out_dir: &Path,
) -> CmdResult {
    if !(0.0..=1.0).contains(&params.repair_quality) {
        return Err(CmdError::Usage(format!(
            "repair quality must lie in [0, 1], got {}",
            params.repair_quality
        )));
    }
    if trials == 0 {
        return Err(CmdError::Usage("need at least one trial".into()));
    }
    if params.m == 0 || params.m > params.d {
        return Err(CmdError::Usage(format!(
            "need 0 < m <= d, got m={}, d={}",
            params.m, params.d
        )));
    }
    ensure_out_dir(out_dir)?;
    let rows = run_trials(trials, params, seed).context("running theory trials")?;
    let mut csv = String::from(trial_csv_header());
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    std::fs::write(out_dir.join("theory.csv"), &csv).context("writing theory.csv")?;
    let endpoint = rows.iter().filter(|r| r.report.endpoint_reduced).count();
    let deviation = rows.iter().filter(|r| r.report.deviation_reduced).count();
    let risk = rows.iter().filter(|r| r.report.risk_reduced).count();
    let passed = rows.iter().filter(|r| r.report.passed()).count();
    let worst_gap = rows.iter().map(|r| r.report.max_rel_gap).fold(0.0f64, f64::max);
    println!("trials: {trials}");
    println!("d(1) < d(0):        {endpoint}/{trials}");
    println!("d(a*) < d(0):       {deviation}/{trials}");
    println!("Risk(a*) < Risk(0): {risk}/{trials}");
    println!("all checks:         {passed}/{trials}");
    println!("worst trace-vs-brute relative gap: {worst_gap:.3e}");
    Ok(())
}
