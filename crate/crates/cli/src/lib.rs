//! Pipeline stages behind the `metainfluence` binary.
//!
//! Each stage reads the artifacts of earlier stages from the output directory
//! and writes its own, so expensive stages can be rerun independently:
//!
//! ```text
//! gen        → train_tasks.json, test_tasks.json
//! train      → params.bin, train_log.jsonl
//! hessian    → hessian.bin, spectrum.json
//! influence  → influence.bin, scores.csv, inverse.json
//! experiment → report.json
//! ```

pub mod config;

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use metainfluence::experiments::{
    degradation_from_records, distribution_from_records, run_exact_vs_gn, self_rank_from_records, DegradationReport,
    ExactVsGnReport, ProperOrderReport, Report, SelfRankReport,
};
use metainfluence::hessian::{
    accumulate_gn, exact_meta_hessian_with_asymmetry, invert, spectrum_summary, SpectrumSummary,
};
use metainfluence::influence::{influence_meta_all, score_table_from_records};
use metainfluence::metalearn::meta_train;
use metainfluence::taskgen::{augment_group, mix_tasksets, sample_taskset};
use metainfluence::{io, linalg, HessianMethod, HessianVariant, Keep, MetaParams, SignConvention, Task};
use serde::{Deserialize, Serialize};

pub use config::RunConfig;
use config::TasksetConfig;

pub const TRAIN_TASKS: &str = "train_tasks.json";
pub const TEST_TASKS: &str = "test_tasks.json";
pub const PARAMS: &str = "params.bin";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const HESSIAN: &str = "hessian.bin";
pub const SPECTRUM: &str = "spectrum.json";
pub const INFLUENCE: &str = "influence.bin";
pub const SCORES: &str = "scores.csv";
pub const INVERSE: &str = "inverse.json";
pub const REPORT: &str = "report.json";

/// Bad command line, configuration, or mismatched inputs.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A prerequisite artifact is absent from the output directory.
#[derive(Debug)]
pub struct MissingArtifact(pub PathBuf);

impl fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing artifact {} (run the earlier stage first)", self.0.display())
    }
}

impl std::error::Error for MissingArtifact {}

fn artifact(out: &Path, name: &str) -> Result<PathBuf> {
    let p = out.join(name);
    if !p.exists() {
        return Err(MissingArtifact(p).into());
    }
    Ok(p)
}

/// Regular tasks (plus rotated copies) mixed with noise tasks.
///
/// Noise ids are offset past the regular ones before augmentation so every
/// source task gets a distinct group id; the final mix renumbers task ids.
pub fn build_taskset(c: &TasksetConfig) -> metainfluence::Result<Vec<Task>> {
    let mut regular = sample_taskset(&c.regular, c.regular_count)?;
    let mut noise = match &c.noise {
        Some(spec) => sample_taskset(spec, c.noise_count)?,
        None => Vec::new(),
    };
    for t in &mut noise {
        t.id += c.regular_count as u64;
    }
    if let Some(a) = &c.augment {
        let grow = |tasks: Vec<Task>| -> Vec<Task> {
            let mut out = Vec::with_capacity(tasks.len() * (a.copies + 1));
            for mut t in tasks {
                t.group_id = Some(t.id);
                let copies = augment_group(&t, a.copies, a.transform_scale, a.seed, 0);
                out.push(t);
                out.extend(copies);
            }
            out
        };
        regular = grow(regular);
        noise = grow(noise);
    }
    Ok(mix_tasksets(&regular, &noise, c.mix_seed))
}

fn taskset_specs(c: &TasksetConfig) -> Vec<metainfluence::TaskDistributionSpec> {
    std::iter::once(c.regular.clone()).chain(c.noise.clone()).collect()
}

fn load_tasks(out: &Path, name: &str) -> Result<Vec<Task>> {
    let p = artifact(out, name)?;
    Ok(io::load_taskset(&p).with_context(|| format!("reading {}", p.display()))?.1)
}

fn load_params(out: &Path) -> Result<MetaParams> {
    let p = artifact(out, PARAMS)?;
    io::load_meta_params(&p).with_context(|| format!("reading {}", p.display()))
}

/// Test tasks if generated, otherwise the training tasks.
fn load_test_tasks(out: &Path) -> Result<Vec<Task>> {
    if out.join(TEST_TASKS).exists() {
        load_tasks(out, TEST_TASKS)
    } else {
        load_tasks(out, TRAIN_TASKS)
    }
}

pub fn cmd_gen(config: &RunConfig, out: &Path) -> Result<String> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let train = build_taskset(&config.train_tasks)?;
    io::save_taskset(&out.join(TRAIN_TASKS), taskset_specs(&config.train_tasks), &train)?;
    let mut msg = format!("{} training tasks", train.len());
    if let Some(tc) = &config.test_tasks {
        let test = build_taskset(tc)?;
        io::save_taskset(&out.join(TEST_TASKS), taskset_specs(tc), &test)?;
        msg.push_str(&format!(", {} test tasks", test.len()));
    }
    Ok(msg)
}

pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<String> {
    let tasks = load_tasks(out, TRAIN_TASKS)?;
    let mp0 = MetaParams::initialize(config.mlp_spec()?, config.learner, config.seed)?;
    let (mp, log) = meta_train(&mp0, &tasks, &config.training)?;
    io::save_meta_params(&out.join(PARAMS), &mp)?;
    std::fs::write(out.join(TRAIN_LOG), log.to_json_lines())?;
    Ok(format!(
        "q = {}, {} steps, final loss {:.6}, accuracy {:.4}",
        mp.q(),
        config.training.steps,
        log.final_loss,
        log.final_accuracy
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumFile {
    pub method: HessianMethod,
    pub q: usize,
    pub task_count: usize,
    /// Relative asymmetry of the finite-difference Hessian before symmetrization.
    pub asymmetry: Option<f64>,
    /// Eigenvalue summary; dense Hessians only.
    pub spectrum: Option<SpectrumSummary>,
    pub factor_columns: Option<usize>,
}

pub fn cmd_hessian(config: &RunConfig, out: &Path) -> Result<String> {
    let tasks = load_tasks(out, TRAIN_TASKS)?;
    let mp = load_params(out)?;
    let hc = &config.hessian;
    let (rep, asymmetry) = match hc.method {
        HessianMethod::Exact => {
            let (r, a) = exact_meta_hessian_with_asymmetry(&mp, &tasks, hc.dense_cap)?;
            (r, Some(a))
        }
        HessianMethod::GaussNewton => (accumulate_gn(&mp, &tasks, hc.capacity)?, None),
    };
    io::save_hessian(&out.join(HESSIAN), &rep)?;
    let (spectrum, factor_columns) = match &rep.variant {
        HessianVariant::Dense(m) => (Some(spectrum_summary(&linalg::eigh_symmetric(m)?.values)), None),
        HessianVariant::Factored(f) => (None, Some(f.len())),
    };
    let file = SpectrumFile {
        method: rep.method,
        q: rep.q(),
        task_count: rep.task_count,
        asymmetry,
        spectrum: spectrum.clone(),
        factor_columns,
    };
    io::save_json(&out.join(SPECTRUM), &file)?;
    Ok(match (spectrum, factor_columns) {
        (Some(s), _) => format!(
            "dense {q}×{q}: {} eigenvalues ≤ 0, λmax {:.6e}, λmin {:.6e}",
            s.count_nonpositive,
            s.lambda_max,
            s.lambda_min,
            q = rep.q()
        ),
        (None, Some(c)) => format!("factor with {c} columns in dimension {}", rep.q()),
        _ => unreachable!("one of the two variants"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseFile {
    pub keep: Keep,
    pub sign: SignConvention,
    pub retained: usize,
    pub discarded_negative: usize,
    pub warnings: Vec<String>,
}

fn load_inverse(out: &Path, mp: &MetaParams, keep: Keep) -> Result<metainfluence::SpectralInverse> {
    let p = artifact(out, HESSIAN)?;
    let h = io::load_hessian(&p).with_context(|| format!("reading {}", p.display()))?;
    if h.q() != mp.q() {
        return Err(UsageError(format!(
            "Hessian dimension {} does not match the {} meta-parameters",
            h.q(),
            mp.q()
        ))
        .into());
    }
    Ok(invert(&h, keep)?)
}

pub fn cmd_influence(config: &RunConfig, out: &Path) -> Result<String> {
    let train = load_tasks(out, TRAIN_TASKS)?;
    let test = load_test_tasks(out)?;
    let mp = load_params(out)?;
    let inv = load_inverse(out, &mp, config.hessian.keep)?;
    let records = influence_meta_all(&inv, &mp, &train)?;
    io::save_influence(&out.join(INFLUENCE), &records)?;
    let table = score_table_from_records(&mp, &records, &test, config.influence.sign)?;
    io::save_score_csv(&out.join(SCORES), &table)?;
    io::save_json(
        &out.join(INVERSE),
        &InverseFile {
            keep: config.hessian.keep,
            sign: config.influence.sign,
            retained: inv.retained,
            discarded_negative: inv.discarded_negative,
            warnings: inv.warnings.clone(),
        },
    )?;
    for w in &inv.warnings {
        eprintln!("warning: {w}");
    }
    Ok(format!(
        "{} records, {} × {} scores, {} directions retained",
        records.len(),
        table.test_ids.len(),
        table.train_ids.len(),
        inv.retained
    ))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentResults {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub self_rank: Option<SelfRankReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degradation: Option<DegradationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degradation_baseline: Option<DegradationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distribution: Option<ProperOrderReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_vs_gn: Option<ExactVsGnReport>,
}

pub type RunReport = Report<ExperimentResults>;

pub fn cmd_experiment(config: &RunConfig, out: &Path) -> Result<String> {
    let ec = &config.experiments;
    let mut results = ExperimentResults::default();
    let needs_records = ec.self_rank || ec.degradation.is_some() || ec.distribution;
    if needs_records || ec.exact_vs_gn.is_some() {
        let train = load_tasks(out, TRAIN_TASKS)?;
        let mp = load_params(out)?;
        if needs_records {
            let p = artifact(out, INFLUENCE)?;
            let records = io::load_influence(&p).with_context(|| format!("reading {}", p.display()))?;
            if ec.self_rank {
                results.self_rank = Some(self_rank_from_records(&mp, &records, &train)?);
            }
            if let Some(d) = &ec.degradation {
                results.degradation = Some(degradation_from_records(&mp, &records, &train, &d.grid)?);
                if let Some(keep) = d.baseline_keep {
                    let inv = load_inverse(out, &mp, keep)?;
                    let base = influence_meta_all(&inv, &mp, &train)?;
                    results.degradation_baseline = Some(degradation_from_records(&mp, &base, &train, &d.grid)?);
                }
            }
            if ec.distribution {
                let test = load_tasks(out, TEST_TASKS)?;
                results.distribution = Some(distribution_from_records(&mp, &records, &train, &test)?);
            }
        }
        if let Some(g) = &ec.exact_vs_gn {
            results.exact_vs_gn = Some(run_exact_vs_gn(
                &mp,
                &train,
                &g.keeps,
                &g.capacities,
                config.hessian.dense_cap,
            )?);
        }
    }
    let report = Report::new(serde_json::to_value(config)?, results);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::save_json(&out.join(REPORT), &report)?;
    Ok(summarize_report(&report))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".to_string(), |v| format!("{v:+.4}"))
}

/// Human-readable digest of a report.
pub fn summarize_report(report: &RunReport) -> String {
    let r = &report.results;
    let mut lines = Vec::new();
    if let Some(s) = &r.self_rank {
        lines.push(format!(
            "self-rank: {:.1}% of {} tests rank first (mean rank {:.3} ± {:.3})",
            100.0 * s.summary.fraction_rank0,
            s.self_rank.len(),
            s.summary.mean,
            s.summary.std
        ));
    }
    for (name, d) in [("degradation", &r.degradation), ("degradation (baseline)", &r.degradation_baseline)] {
        if let Some(d) = d {
            lines.push(format!(
                "{name}: corr(alpha, score) {} ± {} [{} excluded], corr(alpha, rank) {} [{} excluded], corr(ratio, score) {}, corr(ratio, rank) {}",
                fmt_opt(d.alpha_score.mean),
                fmt_opt(d.alpha_score.std),
                d.alpha_score.excluded,
                fmt_opt(d.alpha_rank.mean),
                d.alpha_rank.excluded,
                fmt_opt(d.ratio_score.mean),
                fmt_opt(d.ratio_rank.mean),
            ));
        }
    }
    if let Some(p) = &r.distribution {
        lines.push(format!(
            "proper order: mean {}/{} (p = {:.3e}), median {}/{} (p = {:.3e})",
            p.count_mean, p.tests, p.p_value_mean, p.count_median, p.tests, p.p_value_median
        ));
    }
    if let Some(g) = &r.exact_vs_gn {
        lines.push(format!(
            "exact vs Gauss-Newton: row maxima on or next to the diagonal in {:.0}% of rows",
            100.0 * g.diagonal_fraction()
        ));
        for (k, row) in g.keeps.iter().zip(&g.mean) {
            let cells: Vec<String> = row.iter().map(|v| fmt_opt(*v)).collect();
            lines.push(format!("  keep {k:>5}: {}", cells.join(" ")));
        }
    }
    if lines.is_empty() {
        lines.push("no experiments selected".into());
    }
    lines.join("\n")
}

pub fn cmd_report(out: &Path) -> Result<String> {
    let p = artifact(out, REPORT)?;
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let report: RunReport =
        serde_json::from_str(&text).map_err(metainfluence::Error::from).with_context(|| format!("parsing {}", p.display()))?;
    let mut s = summarize_report(&report);
    if let Ok(text) = std::fs::read_to_string(out.join(SPECTRUM)) {
        if let Ok(sp) = serde_json::from_str::<SpectrumFile>(&text) {
            if let Some(x) = sp.spectrum {
                s = format!(
                    "Hessian: q = {}, {} eigenvalues ≤ 0, λmax {:.6e}, λmin {:.6e}\n{s}",
                    sp.q, x.count_nonpositive, x.lambda_max, x.lambda_min
                );
            }
        }
    }
    Ok(s)
}

/// All stages in order.
pub fn run_all(config: &RunConfig, out: &Path) -> Result<Vec<String>> {
    Ok(vec![
        cmd_gen(config, out)?,
        cmd_train(config, out)?,
        cmd_hessian(config, out)?,
        cmd_influence(config, out)?,
        cmd_experiment(config, out)?,
    ])
}

/// Process exit status for a failed command: 1 usage, 2 numerical, 3 I/O.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use metainfluence::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<MissingArtifact>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NoConvergence { .. }
                | E::IllConditioned { .. }
                | E::NotPsd(_)
                | E::Diverged { .. }
                | E::NonFiniteHessian { .. } => 2,
                E::Io(_) | E::Json(_) | E::Format(_) => 3,
                E::DimensionMismatch { .. } | E::Invalid(_) | E::EmptyClass { .. } | E::DenseCapExceeded { .. } => 1,
            };
        }
    }
    2
}
