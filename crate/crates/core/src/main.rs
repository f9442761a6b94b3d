use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use vcc_core::bridge::BridgeOracle;
use vcc_core::concepts::segment_input;
use vcc_core::config::{parse_override, RunConfig, SEED_ENV};
use vcc_core::graph::{
    aps_ls_correlation, build_vcc, layer_metrics, nearest_concept_diff, spearman, suppression_experiment,
};
use vcc_core::io::{
    decode_image, export_dot, load_architecture, load_dataset, load_images, load_model, load_segments, save_dataset,
    save_images, save_model, save_segments, write_vcc_json, read_vcc_json, LabeledImage,
};
use vcc_core::itcav::SignConvention;
use vcc_core::netcore::gradcheck::{check_model, check_random_instances};
use vcc_core::netcore::{vgg16_architecture, Architecture, LayeredModel};
use vcc_core::rng::{derive_seed, tag};
use vcc_core::segment::{relative_segment_size, SegmentConfig};
use vcc_core::toylab::{generate_dataset, random_pool, train_labeled};
use vcc_core::{FeatureOracle, Result, VccError};

/// Visual concept connectomes for layered image classifiers.
#[derive(Parser)]
#[command(name = "vcc", version)]
struct Cli {
    /// JSON config with flat dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, `key=value` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads; results are identical for every value.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Shorthand for `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Shorthand for `paths.data`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Shorthand for `paths.model`.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic train, eval and random-pool sets.
    GenData,
    /// Train the toy CNN on the train set.
    Train,
    /// Build a graph for `build.class` from the eval set.
    Build(BuildArgs),
    /// Per-layer branching factor, concept count and edge-weight statistics.
    Metrics(GraphArg),
    /// Average path strength against logit sum, per concept.
    ApsLs(GraphArg),
    /// Accuracy under concept and random-direction suppression.
    Suppress(GraphArg),
    /// Receptive fields of the tap layers, with segment sizes when available.
    RfReport(RfArgs),
    /// Assign one image's segments to the nearest concepts of two graphs.
    Compare(CompareArgs),
    /// Graphviz rendering of a graph.
    ExportDot(GraphArg),
    /// Numerical and structural self-checks.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct BuildArgs {
    /// Command of an external NDJSON model oracle, split on whitespace.
    #[arg(long)]
    oracle: Option<String>,
    /// Responder processes to start for `--oracle`.
    #[arg(long, default_value_t = 1)]
    oracle_procs: usize,
    /// Use the unnegated sensitivity sign for concept edges.
    #[arg(long)]
    literal_sign: bool,
}

#[derive(Args)]
struct GraphArg {
    /// Graph JSON; defaults to `<out>/vcc.json`.
    #[arg(long)]
    vcc: Option<PathBuf>,
}

#[derive(Args)]
struct RfArgs {
    /// Report the bundled VGG16 layout instead of the trained model.
    #[arg(long, conflicts_with = "manifest")]
    vgg16: bool,
    /// Any model manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// PNG or PPM image to explain.
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Finite-difference check of distance gradients.
    #[arg(long)]
    gradients: bool,
    /// Random model instances for `--gradients`.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Largest accepted relative gradient error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Check a graph JSON against the structural invariants.
    #[arg(long)]
    graph: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&VccError::Config(e.to_string().trim().to_string())),
    };
    match run(cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            // A closed stdout is not an error for a finished command.
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &VccError) -> ExitCode {
    let record = json!({"error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code()});
    eprintln!("{record}");
    ExitCode::from(e.exit_code() as u8)
}

fn run(cli: Cli) -> Result<Value> {
    let mut overrides = cli.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    for (key, v) in [("paths.out", &cli.out), ("paths.data", &cli.data), ("paths.model", &cli.model)] {
        if let Some(p) = v {
            overrides.push((key.into(), json!(p)));
        }
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::resolve(cli.config.as_deref(), env_seed.as_deref(), &overrides)?;
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(VccError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| VccError::Config(e.to_string()))?;
    }
    match cli.command {
        Cmd::GenData => gen_data(&cfg),
        Cmd::Train => train(&cfg),
        Cmd::Build(a) => build(&cfg, &a),
        Cmd::Metrics(g) => metrics(&cfg, &g),
        Cmd::ApsLs(g) => aps_ls(&cfg, &g),
        Cmd::Suppress(g) => suppress(&cfg, &g),
        Cmd::RfReport(a) => rf_report(&cfg, &a),
        Cmd::Compare(a) => compare(&cfg, &a),
        Cmd::ExportDot(g) => dot(&cfg, &g),
        Cmd::Validate(a) => validate(&cfg, &a),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn gen_data(cfg: &RunConfig) -> Result<Value> {
    let classes = cfg.classes()?;
    let d = &cfg.data;
    let root = &cfg.paths.data;
    let train = generate_dataset(derive_seed(cfg.seed, &[tag("train-set")]), &classes, d.train_per_class);
    let eval = generate_dataset(derive_seed(cfg.seed, &[tag("eval-set")]), &classes, d.eval_per_class);
    let pool = random_pool(derive_seed(cfg.seed, &[tag("pool")]), &classes, d.pool_size);
    save_dataset(&root.join("train"), &train)?;
    save_dataset(&root.join("eval"), &eval)?;
    save_images(&root.join("pool"), &pool)?;
    write_json(&root.join("classes.json"), &cfg.data.classes)?;
    Ok(json!({"train": train.len(), "eval": eval.len(), "pool": pool.len(), "dir": root}))
}

fn split(set: &[LabeledImage]) -> (Vec<vcc_core::io::ImageFile>, Vec<usize>) {
    set.iter().map(|s| (s.image.clone(), s.label)).unzip()
}

fn train(cfg: &RunConfig) -> Result<Value> {
    let (images, labels) = split(&load_dataset(&cfg.paths.data.join("train"))?);
    let classes = cfg.classes()?.len();
    let outcome = train_labeled(&images, &labels, classes, derive_seed(cfg.seed, &[tag("train")]), &cfg.train)?;
    save_model(&outcome.model, &cfg.paths.model)?;
    Ok(json!({
        "train_accuracy": outcome.train_accuracy,
        "final_loss": outcome.epoch_losses.last(),
        "model_hash": outcome.model.content_hash(),
        "dir": cfg.paths.model,
    }))
}

/// The first `build.images` eval images of the configured class.
fn class_images(cfg: &RunConfig, class: usize) -> Result<Vec<vcc_core::io::ImageFile>> {
    let images: Vec<_> = load_dataset(&cfg.paths.data.join("eval"))?
        .into_iter()
        .filter(|s| s.label == class)
        .take(cfg.build.images)
        .map(|s| s.image)
        .collect();
    if images.is_empty() {
        return Err(VccError::InvalidInput(format!("no eval images of class {class}")));
    }
    Ok(images)
}

fn vcc_path(cfg: &RunConfig, g: &GraphArg) -> PathBuf {
    g.vcc.clone().unwrap_or_else(|| cfg.paths.out.join("vcc.json"))
}

fn build(cfg: &RunConfig, args: &BuildArgs) -> Result<Value> {
    let mut build_cfg = cfg.build_config();
    if args.literal_sign {
        build_cfg.edges.sign = SignConvention::Literal;
    }
    let oracle: Box<dyn FeatureOracle> = match &args.oracle {
        Some(cmd) => {
            let parts: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            Box::new(BridgeOracle::spawn(&parts, args.oracle_procs)?)
        }
        None => Box::new(load_model(&cfg.paths.model)?),
    };
    let images = class_images(cfg, cfg.build.class)?;
    let pool = load_images(&cfg.paths.data.join("pool"))?;
    let built = build_vcc(oracle.as_ref(), &images, cfg.build.class, &pool, &build_cfg)?;
    let out = &cfg.paths.out;
    fs::create_dir_all(out)?;
    write_vcc_json(&built.graph, &out.join("vcc.json"))?;
    save_segments(&out.join("segments"), &built.segments, &images)?;
    write_json(&out.join("config.json"), &cfg.to_flat())?;
    let g = &built.graph;
    Ok(json!({
        "class": g.class,
        "images": images.len(),
        "segments": built.segments.len(),
        "concepts": g.layers.iter().map(|l| json!({"layer": l.layer, "concepts": l.concepts.len()})).collect::<Vec<_>>(),
        "edges": g.edges.len(),
        "class_edges": g.class_edges.len(),
        "warnings": g.warnings,
        "vcc": out.join("vcc.json"),
    }))
}

fn metrics(cfg: &RunConfig, g: &GraphArg) -> Result<Value> {
    let graph = read_vcc_json(&vcc_path(cfg, g))?;
    let m = layer_metrics(&graph);
    write_json(&cfg.paths.out.join("metrics.json"), &m)?;
    Ok(serde_json::to_value(m)?)
}

fn aps_ls(cfg: &RunConfig, g: &GraphArg) -> Result<Value> {
    let graph = read_vcc_json(&vcc_path(cfg, g))?;
    let model = load_model(&cfg.paths.model)?;
    let (segments, _) = load_segments(&cfg.paths.out.join("segments"))?;
    let (points, r) = aps_ls_correlation(&graph, &model, &segments)?;
    let v = json!({"pearson_r": r, "concepts": points.len(), "points": points});
    write_json(&cfg.paths.out.join("aps_ls.json"), &v)?;
    Ok(json!({"pearson_r": r, "concepts": points.len()}))
}

fn suppress(cfg: &RunConfig, g: &GraphArg) -> Result<Value> {
    let graph = read_vcc_json(&vcc_path(cfg, g))?;
    let model = load_model(&cfg.paths.model)?;
    let eval: Vec<LabeledImage> = load_dataset(&cfg.paths.data.join("eval"))?
        .into_iter()
        .filter(|s| s.label == graph.class)
        .collect();
    let inputs = eval
        .iter()
        .map(|s| segment_input(&s.image, model.input_shape()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = eval.iter().map(|s| s.label).collect();
    let summary = suppression_experiment(
        &model,
        &graph,
        &inputs,
        &labels,
        &cfg.suppress.epsilons,
        cfg.suppress.seeds,
        cfg.seed,
    )?;
    write_json(&cfg.paths.out.join("suppress.json"), &summary)?;
    Ok(json!({
        "concept_auc": summary.concept_auc,
        "random_auc": summary.random_auc,
        "ratio": summary.concept_auc / summary.random_auc,
    }))
}

fn rf_report(cfg: &RunConfig, a: &RfArgs) -> Result<Value> {
    let arch: Architecture = if a.vgg16 {
        vgg16_architecture()
    } else if let Some(p) = &a.manifest {
        load_architecture(p)?
    } else {
        load_architecture(&cfg.paths.model.join(vcc_core::io::MANIFEST_FILE))?
    };
    let taps = cfg.build.tap_layers.clone().unwrap_or_else(|| arch.tap_layers.clone());
    let rfs = taps
        .iter()
        .map(|&t| arch.receptive_field(t))
        .collect::<Result<Vec<_>>>()?;
    let mut report = json!({
        "layers": taps.iter().zip(&rfs).map(|(t, rf)| json!({"layer": t, "receptive_field": rf})).collect::<Vec<_>>(),
    });
    let seg_dir = cfg.paths.out.join("segments");
    if !a.vgg16 && a.manifest.is_none() && seg_dir.join(vcc_core::io::LINEAGE_FILE).exists() {
        let (segments, _) = load_segments(&seg_dir)?;
        let sizes = taps
            .iter()
            .map(|&t| relative_segment_size(segments.segments(t)))
            .collect::<Result<Vec<_>>>()?;
        let rf: Vec<f64> = rfs.iter().map(|&r| r as f64).collect();
        report["relative_segment_size"] = json!(sizes);
        report["spearman_rho"] = json!(spearman(&rf, &sizes).ok());
    }
    write_json(&cfg.paths.out.join("rf_report.json"), &report)?;
    Ok(report)
}

fn compare(cfg: &RunConfig, a: &CompareArgs) -> Result<Value> {
    let ga = read_vcc_json(&a.a)?;
    let gb = read_vcc_json(&a.b)?;
    let model: LayeredModel = load_model(&cfg.paths.model)?;
    let image = decode_image(&fs::read(&a.image)?)?;
    let seg = cfg.build_config().segment;
    let seg_cfg = SegmentConfig {
        seed: derive_seed(cfg.seed, &[tag("compare")]),
        ..seg
    };
    let (tallies, warnings) = nearest_concept_diff(&model, [&ga, &gb], &image, &seg_cfg)?;
    let logits = model.forward_full(&segment_input(&image, model.input_shape())?)?;
    let v = json!({
        "classes": [ga.class, gb.class],
        "predicted": vcc_core::netcore::argmax(&logits),
        "layers": tallies.iter().map(|t| json!({"layer": t.layer, "counts": t.counts})).collect::<Vec<_>>(),
        "warnings": warnings,
    });
    write_json(&cfg.paths.out.join("compare.json"), &json!({"summary": v, "tallies": tallies}))?;
    Ok(v)
}

fn dot(cfg: &RunConfig, g: &GraphArg) -> Result<Value> {
    let path = vcc_path(cfg, g);
    let graph = read_vcc_json(&path)?;
    let out = path.with_extension("dot");
    fs::write(&out, export_dot(&graph))?;
    Ok(json!({"dot": out}))
}

fn validate(cfg: &RunConfig, a: &ValidateArgs) -> Result<Value> {
    if !a.gradients && a.graph.is_none() {
        return Err(VccError::Config("validate needs --gradients and/or --graph".into()));
    }
    let mut report = json!({});
    if let Some(p) = &a.graph {
        read_vcc_json(p)?;
        report["graph"] = json!("valid");
    }
    if a.gradients {
        let r = check_random_instances(a.instances, derive_seed(cfg.seed, &[tag("gradcheck")]))?;
        let mut worst = r.max_relative_error;
        report["random_instances"] = serde_json::to_value(&r)?;
        let manifest = cfg.paths.model.join(vcc_core::io::MANIFEST_FILE);
        if manifest.exists() {
            let model = load_model(&cfg.paths.model)?;
            let m = check_model(&model, 10, derive_seed(cfg.seed, &[tag("gradcheck-model")]))?;
            worst = worst.max(m.max_relative_error);
            report["model"] = serde_json::to_value(&m)?;
        }
        report["max_relative_error"] = json!(worst);
        if !(worst <= a.tolerance) {
            return Err(VccError::NumericValidation(format!(
                "max relative gradient error {worst:e} exceeds {:e}",
                a.tolerance
            )));
        }
    }
    Ok(report)
}
