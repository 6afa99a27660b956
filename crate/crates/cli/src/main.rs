mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use rss_core::baselines::{l1_weight_scores, l2_weight_scores, randomized_l1, ttest_scores, RandL1Config, DEFAULT_L1_LAMBDA};
use rss_core::clustering::{build_feature_vectors, kmeans_fit, read_parcellation_csv, write_parcellation_csv, ClusterConfig, ParcellationMeta};
use rss_core::data::{load_dataset, save_dataset, Dataset, Parcellation};
use rss_core::eval::{
    cv_accuracies, permutation_fp_estimate, precision_recall_curve, prediction_accuracy, selection_precision,
    top_t_selection, write_json, write_pr_csv, FoldSpec, PrSummary, Selector,
};
use rss_core::stability::{read_scores_csv, run_stability_selection, write_scores_csv, write_stability_scores, StabilityConfig};
use rss_core::synth::{generate_synthetic, read_ground_truth_csv, write_ground_truth_csv, SynthConfig};

use manifest::{hash_outputs, hash_path, RunManifest};

const DEFAULT_RIDGE: f64 = 1.0;

#[derive(Debug, Parser)]
#[command(name = "rss", version, about = "Randomized structural sparsity feature selection")]
struct Cli {
    /// Master seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; affects wall time only.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for all outputs (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic case/control dataset with planted clusters.
    Synth(SynthArgs),
    /// Parcellate the features with k-means.
    Cluster(ClusterArgs),
    /// Score features with one selector.
    Select(SelectArgs),
    /// Precision-recall or held-out accuracy of a score file.
    Eval(EvalArgs),
    /// Permutation estimate of false positives at a threshold.
    Perm(PermArgs),
    /// Rerun a manifest and check that every output is byte-identical.
    Replay(ReplayArgs),
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected AxBxC, got {s}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("bad dimension {p} in {s}"))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct SynthArgs {
    #[arg(long, value_parser = parse_dims, default_value = "46x55x46")]
    dims: [usize; 3],
    /// Number of in-mask voxels.
    #[arg(long = "mask", default_value_t = 27884)]
    mask_size: usize,
    #[arg(long, default_value_t = 50)]
    n_per_group: usize,
    /// Five planted cluster sizes; the last three must be equal.
    #[arg(long = "clusters", value_delimiter = ',', default_values_t = [76, 76, 77, 77, 77])]
    cluster_sizes: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    #[arg(long = "threshold", default_value_t = 1.0)]
    constraint_threshold: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ClusterArgs {
    /// Dataset container directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    q: usize,
    #[arg(long, default_value_t = ClusterConfig::DEFAULT_RESTARTS)]
    restarts: usize,
    #[arg(long, default_value_t = ClusterConfig::DEFAULT_MAX_LLOYD_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = 0.0)]
    spatial_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    Rss,
    RandL1,
    L1,
    L2,
    Ttest,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct SelectorArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    /// Parcellation CSV; required by rss.
    #[arg(long)]
    parcellation: Option<PathBuf>,
    /// Resampling count; defaults to 50 for rss and 500 for rand-l1.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Row-subsampling fraction (rss).
    #[arg(long, default_value_t = StabilityConfig::DEFAULT_ALPHA)]
    alpha: f64,
    /// Per-cluster voxel fraction (rss).
    #[arg(long, default_value_t = StabilityConfig::DEFAULT_BETA)]
    beta: f64,
    #[arg(long, value_parser = parse_dims, default_value = "3x3x3")]
    block: [usize; 3],
    /// Row fraction (rand-l1).
    #[arg(long, default_value_t = RandL1Config::DEFAULT_ROW_FRACTION)]
    row_fraction: f64,
    /// Lower end of the rescaling interval (rand-l1).
    #[arg(long, default_value_t = RandL1Config::DEFAULT_WEAKNESS)]
    weakness: f64,
    /// Loss weight of the sparse fit; the default depends on the method.
    #[arg(long)]
    lambda: Option<f64>,
    /// Ridge strength (l2).
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    lambda_ridge: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct SelectArgs {
    #[command(flatten)]
    selector: SelectorArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct EvalArgs {
    /// Score CSV written by `select`.
    #[arg(long)]
    scores: PathBuf,
    /// Ground truth CSV; produces a precision-recall report.
    #[arg(long, conflicts_with = "test")]
    truth: Option<PathBuf>,
    /// Size of the top-T snapshot; defaults to the number of true features.
    #[arg(long = "T")]
    t: Option<usize>,
    /// Training container for the accuracy report.
    #[arg(long, requires = "test")]
    data: Option<PathBuf>,
    /// Held-out container; produces an accuracy report.
    #[arg(long, requires = "data")]
    test: Option<PathBuf>,
    /// Fixed score threshold; without it the threshold is chosen by
    /// cross-validation over `--grid`.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    lambda_ridge: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct PermArgs {
    #[command(flatten)]
    selector: SelectorArgs,
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
    #[arg(long = "B", default_value_t = 20)]
    b: usize,
}

#[derive(Debug, Clone, Args)]
struct ReplayArgs {
    manifest: PathBuf,
}

/// Where a command wrote its files and what it read.
struct Outcome {
    params: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    if let Err(e) = run(argv) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(argv: Vec<String>) -> Result<()> {
    let cli = Cli::parse_from(std::iter::once("rss".to_string()).chain(argv.iter().cloned()));
    if let Command::Replay(r) = &cli.command {
        return replay(&r.manifest, &cli.out_dir, cli.threads);
    }
    let threads = cli.threads;
    let pool = build_pool(threads)?;
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let started = Instant::now();
    let (name, outcome) = pool.install(|| dispatch(&cli))?;
    let manifest = RunManifest {
        command: name.to_string(),
        argv,
        cwd: std::env::current_dir()?,
        params: outcome.params,
        inputs: outcome
            .inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), hash_path(p)?)))
            .collect::<Result<BTreeMap<_, _>>>()?,
        outputs: hash_outputs(&cli.out_dir, &outcome.outputs)?,
        out_dir: cli.out_dir.clone(),
        seed: cli.seed,
        threads,
        version: env!("CARGO_PKG_VERSION").to_string(),
        duration_secs: started.elapsed().as_secs_f64(),
    };
    let path = manifest.write(&cli.out_dir)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn build_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        ensure!(t >= 1, "--threads must be at least 1");
        b = b.num_threads(t);
    }
    Ok(b.build()?)
}

fn dispatch(cli: &Cli) -> Result<(&'static str, Outcome)> {
    let out = &cli.out_dir;
    Ok(match &cli.command {
        Command::Synth(a) => ("synth", cmd_synth(a, cli.seed, out)?),
        Command::Cluster(a) => ("cluster", cmd_cluster(a, cli.seed, out)?),
        Command::Select(a) => ("select", cmd_select(a, cli.seed, out)?),
        Command::Eval(a) => ("eval", cmd_eval(a, cli.seed, out)?),
        Command::Perm(a) => ("perm", cmd_perm(a, cli.seed, out)?),
        Command::Replay(_) => unreachable!("handled before dispatch"),
    })
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn cmd_synth(a: &SynthArgs, seed: u64, out: &Path) -> Result<Outcome> {
    let sizes: [usize; 5] = a
        .cluster_sizes
        .clone()
        .try_into()
        .map_err(|_| anyhow::anyhow!("--clusters takes exactly five sizes"))?;
    let cfg = SynthConfig {
        dims: a.dims,
        mask_size: a.mask_size,
        n_per_group: a.n_per_group,
        cluster_sizes: sizes,
        noise_sd: a.noise_sd,
        constraint_threshold: a.constraint_threshold,
        seed,
    };
    let (d, gt) = generate_synthetic(&cfg)?;
    save_dataset(&d, &out.join("data"))?;
    write_ground_truth_csv(&out.join("ground_truth.csv"), &gt)?;
    info!("n = {}, p = {}, {} discriminative features", d.n(), d.p(), gt.discriminative.len());
    Ok(Outcome {
        params: serde_json::to_value(&cfg)?,
        inputs: vec![],
        outputs: vec!["data".into(), "ground_truth.csv".into()],
    })
}

fn cmd_cluster(a: &ClusterArgs, seed: u64, out: &Path) -> Result<Outcome> {
    let d = load(&a.data)?;
    let n = d.n();
    if a.q < 2 * n || a.q > 5 * n {
        warn!("q = {} lies outside [2n, 5n] = [{}, {}]", a.q, 2 * n, 5 * n);
    }
    let cfg = ClusterConfig {
        q: a.q,
        restarts: a.restarts,
        max_lloyd_iters: a.max_iters,
        spatial_weight: a.spatial_weight,
        seed,
    };
    let fit = kmeans_fit(build_feature_vectors(&d, a.spatial_weight).view(), &cfg)?;
    if !fit.converged {
        warn!("best restart stopped at the iteration cap ({})", a.max_iters);
    }
    info!("wcss {:.6} from restart {}", fit.wcss, fit.restart);
    write_parcellation_csv(&out.join("parcellation.csv"), &fit.parcellation)?;
    write_json(
        &out.join("parcellation.json"),
        &ParcellationMeta { q: a.q, seed, spatial_weight: a.spatial_weight },
    )?;
    Ok(Outcome {
        params: serde_json::to_value(cfg)?,
        inputs: vec![a.data.clone()],
        outputs: vec!["parcellation.csv".into(), "parcellation.json".into()],
    })
}

/// A selector with every default resolved.
enum Resolved {
    Rss(StabilityConfig, Parcellation),
    RandL1(RandL1Config),
    L1(f64),
    L2(f64),
    Ttest,
}

fn resolve(a: &SelectorArgs, seed: u64, d: &Dataset) -> Result<(Resolved, serde_json::Value)> {
    let needs_parc = a.method == Method::Rss;
    ensure!(
        needs_parc || a.parcellation.is_none(),
        "--parcellation only applies to --method rss"
    );
    Ok(match a.method {
        Method::Rss => {
            let path = a.parcellation.as_ref().context("--method rss needs --parcellation")?;
            let parc = read_parcellation_csv(path)?;
            let cfg = StabilityConfig {
                k: a.k.unwrap_or(StabilityConfig::DEFAULT_K),
                alpha: a.alpha,
                beta: a.beta,
                block_shape: a.block,
                lambda: a.lambda.unwrap_or(StabilityConfig::DEFAULT_LAMBDA),
                master_seed: seed,
            };
            cfg.validate()?;
            if d.geometry().is_none() {
                warn!("dataset has no geometry; rss uses stratified sampling without blocks");
            }
            let params = serde_json::json!({
                "method": "rss",
                "config": cfg,
                "parcellation_checksum": parc.checksum(),
            });
            (Resolved::Rss(cfg, parc), params)
        }
        Method::RandL1 => {
            let cfg = RandL1Config {
                k: a.k.unwrap_or(RandL1Config::DEFAULT_K),
                row_fraction: a.row_fraction,
                weakness: a.weakness,
                lambda: a.lambda.unwrap_or(RandL1Config::DEFAULT_LAMBDA),
                master_seed: seed,
            };
            cfg.validate()?;
            (Resolved::RandL1(cfg), serde_json::json!({ "method": "rand-l1", "config": cfg }))
        }
        Method::L1 => {
            let lambda = a.lambda.unwrap_or(DEFAULT_L1_LAMBDA);
            (Resolved::L1(lambda), serde_json::json!({ "method": "l1", "lambda": lambda }))
        }
        Method::L2 => (
            Resolved::L2(a.lambda_ridge),
            serde_json::json!({ "method": "l2", "lambda_ridge": a.lambda_ridge }),
        ),
        Method::Ttest => (Resolved::Ttest, serde_json::json!({ "method": "ttest" })),
    })
}

fn selector_inputs(a: &SelectorArgs) -> Vec<PathBuf> {
    std::iter::once(a.data.clone()).chain(a.parcellation.clone()).collect()
}

fn cmd_select(a: &SelectArgs, seed: u64, out: &Path) -> Result<Outcome> {
    let a = &a.selector;
    let d = load(&a.data)?;
    let (sel, params) = resolve(a, seed, &d)?;
    let path = out.join("scores.csv");
    let geom = d.geometry();
    match sel {
        Resolved::Rss(cfg, parc) => write_stability_scores(&path, &run_stability_selection(&d, &parc, &cfg)?, geom)?,
        Resolved::RandL1(cfg) => write_stability_scores(&path, &randomized_l1(&d, &cfg)?, geom)?,
        Resolved::L1(lambda) => write_scores_csv(&path, &l1_weight_scores(&d, lambda)?, None, geom)?,
        Resolved::L2(r) => write_scores_csv(&path, &l2_weight_scores(&d, r)?, None, geom)?,
        Resolved::Ttest => write_scores_csv(&path, &ttest_scores(&d)?, None, geom)?,
    }
    write_json(&out.join("scores.json"), &params)?;
    Ok(Outcome {
        params,
        inputs: selector_inputs(a),
        outputs: vec!["scores.csv".into(), "scores.json".into()],
    })
}

#[derive(Debug, Serialize)]
struct AccuracyReport {
    tau: f64,
    n_features: usize,
    accuracy: f64,
    /// Cross-validated accuracy per grid threshold; absent with a fixed tau.
    cv: Option<Vec<(f64, Option<f64>)>>,
}

fn cmd_eval(a: &EvalArgs, seed: u64, out: &Path) -> Result<Outcome> {
    let table = read_scores_csv(&a.scores)?;
    let scores = table.scores;
    let mut inputs = vec![a.scores.clone()];
    let params = serde_json::to_value(a)?;
    if let Some(truth_path) = &a.truth {
        inputs.push(truth_path.clone());
        let gt = read_ground_truth_csv(truth_path)?;
        let curve = precision_recall_curve(&scores, &gt.discriminative)?;
        let t = a.t.unwrap_or(gt.discriminative.len());
        let top = top_t_selection(&scores, t);
        let summary = PrSummary {
            auc: curve.auc,
            t,
            top_t_precision: selection_precision(&top, &gt.discriminative),
        };
        write_pr_csv(&out.join("pr_curve.csv"), &curve)?;
        write_json(&out.join("pr_summary.json"), &summary)?;
        info!("AUC {:.4}, top-{t} precision {:.4}", summary.auc, summary.top_t_precision);
        return Ok(Outcome {
            params,
            inputs,
            outputs: vec!["pr_curve.csv".into(), "pr_summary.json".into()],
        });
    }
    let (Some(train_path), Some(test_path)) = (&a.data, &a.test) else {
        bail!("eval needs either --truth or both --data and --test");
    };
    inputs.push(train_path.clone());
    inputs.push(test_path.clone());
    let train = load(train_path)?;
    let test = load(test_path)?;
    ensure!(scores.len() == train.p(), "{} scores for {} features", scores.len(), train.p());
    let (tau, cv) = match a.tau {
        Some(t) => (t, None),
        None => {
            let folds = FoldSpec { k: a.folds, shuffle_seed: Some(seed) };
            let acc = cv_accuracies(&train, &scores, &a.grid, &folds, a.lambda_ridge)?;
            let mut best: Option<(f64, f64)> = None;
            for (&t, v) in a.grid.iter().zip(&acc) {
                if let Some(v) = *v {
                    if best.is_none_or(|(bt, bv)| v > bv || (v == bv && t > bt)) {
                        best = Some((t, v));
                    }
                }
            }
            let (t, _) = best.context("every threshold in --grid selects zero features")?;
            (t, Some(a.grid.iter().copied().zip(acc).collect()))
        }
    };
    let features: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= tau).collect();
    ensure!(!features.is_empty(), "threshold {tau} selects no features");
    let accuracy = prediction_accuracy(&train, &test, &features, a.lambda_ridge)?;
    info!("tau {tau}: {} features, held-out accuracy {accuracy:.4}", features.len());
    write_json(
        &out.join("accuracy.json"),
        &AccuracyReport { tau, n_features: features.len(), accuracy, cv },
    )?;
    Ok(Outcome {
        params,
        inputs,
        outputs: vec!["accuracy.json".into()],
    })
}

#[derive(Debug, Serialize)]
struct PermSummary<'a> {
    tau: f64,
    #[serde(rename = "B")]
    b: usize,
    estimate: f64,
    observed_count: usize,
    per_permutation: &'a [usize],
}

fn cmd_perm(a: &PermArgs, seed: u64, out: &Path) -> Result<Outcome> {
    let s = &a.selector;
    let d = load(&s.data)?;
    let (sel, mut params) = resolve(s, seed, &d)?;
    let selector = match sel {
        Resolved::Rss(cfg, parc) => Selector::Rss { parcellation: parc, config: cfg },
        Resolved::RandL1(cfg) => Selector::RandL1(cfg),
        _ => bail!("perm supports --method rss and --method rand-l1"),
    };
    let report = permutation_fp_estimate(&d, &selector, a.tau, a.b, seed)?;
    info!(
        "tau {}: observed {}, permutation estimate {:.3}",
        report.tau, report.observed_count, report.estimate
    );
    write_json(
        &out.join("permutation.json"),
        &PermSummary {
            tau: report.tau,
            b: report.b,
            estimate: report.estimate,
            observed_count: report.observed_count,
            per_permutation: &report.per_permutation,
        },
    )?;
    params["tau"] = a.tau.into();
    params["B"] = a.b.into();
    Ok(Outcome {
        params,
        inputs: selector_inputs(s),
        outputs: vec!["permutation.json".into()],
    })
}

/// Rerun `manifest` into `out_dir` and compare every output hash.
fn replay(manifest_path: &Path, out_dir: &Path, threads: Option<usize>) -> Result<()> {
    let m = RunManifest::read(manifest_path)?;
    std::env::set_current_dir(&m.cwd).with_context(|| format!("entering {}", m.cwd.display()))?;
    for (input, digest) in &m.inputs {
        let now = hash_path(Path::new(input))?;
        ensure!(&now == digest, "input {input} changed since the recorded run");
    }
    let out_dir = std::path::absolute(out_dir)?;
    ensure!(
        std::path::absolute(&m.out_dir)? != out_dir,
        "replay needs an --out-dir different from the recorded one"
    );
    let mut argv = strip_flag(&m.argv, "--out-dir");
    argv = strip_flag(&argv, "--threads");
    argv.push("--out-dir".into());
    argv.push(out_dir.display().to_string());
    if let Some(t) = threads {
        argv.push("--threads".into());
        argv.push(t.to_string());
    }
    run(argv)?;
    let fresh = RunManifest::read(&out_dir.join(RunManifest::file_name(&m.command)))?;
    let mut mismatches = Vec::new();
    for (name, digest) in &m.outputs {
        match fresh.outputs.get(name) {
            Some(d) if d == digest => {}
            _ => mismatches.push(name.clone()),
        }
    }
    ensure!(mismatches.is_empty(), "outputs differ from the recorded run: {}", mismatches.join(", "));
    info!("replay of {} reproduced {} outputs", m.command, m.outputs.len());
    Ok(())
}

/// `argv` without `flag` and its value (either `--flag v` or `--flag=v`).
fn strip_flag(argv: &[String], flag: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(argv.len());
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
            continue;
        }
        if a == flag {
            skip = true;
            continue;
        }
        if a.starts_with(&format!("{flag}=")) {
            continue;
        }
        out.push(a.clone());
    }
    out
}
