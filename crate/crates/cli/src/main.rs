//! `jetfit`: normals, curvatures and denoising for point clouds from the command line.

mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use jetfit::data::{
    load_pcpnet, read_manifest, save_pcpnet, write_corpus, CorpusEntry, CorpusSpec, Density, NamedCloud, Outliers, SaveWhat,
    ShapeKind, ShapeSpec,
};
use jetfit::eval::{aggregate_weights, denoise, run_benchmark, BenchmarkConfig, Category, Method, MethodKind};
use jetfit::fit::{fit_cloud, FitOptions, PointFit, Weighting};
use jetfit::neighborhood::PointCloud;
use jetfit::train::{recorded_config, train, TrainConfig};
use jetfit::weightnet::checkpoint;
use jetfit::weightnet::WeightNet;
use jetfit::{Error, Result};

use manifest::{hash_inputs, io, now, RunManifest};

const DATA_ROOT_ENV: &str = "JETFIT_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(name = "jetfit", version, about = "Weighted n-jet fitting for point cloud normals and curvatures")]
struct Cli {
    /// Worker threads; 1 makes every result bitwise reproducible. Defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate per-point normals, curvatures and summed weights.
    Fit(FitArgs),
    /// Train the weight network on a shape manifest.
    Train(TrainArgs),
    /// Benchmark estimators over a shape manifest.
    Eval(EvalArgs),
    /// Remove points whose summed weight falls below mean minus one deviation.
    Denoise(DenoiseArgs),
    /// Write synthetic shapes with exact ground truth.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("weighting").required(true).args(["checkpoint", "uniform_weights"])))]
struct FitArgs {
    /// Basepath of the input cloud (`<input>.xyz` must exist).
    #[arg(long)]
    input: PathBuf,
    /// Basepath for `<output>.xyz/.normals/.curv/.weights`.
    #[arg(long)]
    output: PathBuf,
    /// Trained network (`best.ckpt` or `last.ckpt`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Skip the network and fit with unit weights.
    #[arg(long)]
    uniform_weights: bool,
    /// Neighborhood size [default: training value from the checkpoint, else 256].
    #[arg(long)]
    k: Option<usize>,
    /// Jet order [default: training value from the checkpoint, else 3].
    #[arg(long)]
    order: Option<u8>,
    #[arg(long, default_value_t = jetfit::jet::DEFAULT_RIDGE)]
    ridge: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML file with training settings; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shape list, one basepath per line.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for checkpoints, `metrics.csv` and the resolved `config.toml`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a `last.ckpt`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    samples_per_epoch: Option<usize>,
    /// Resolves relative manifest entries.
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MethodName {
    Pca,
    Jet,
    Net,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Estimators to run [default: jet, plus net when a checkpoint is given].
    #[arg(long, value_delimiter = ',', conflicts_with = "uniform_weights")]
    methods: Vec<MethodName>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Classical mode: run only the unweighted jet.
    #[arg(long, conflicts_with = "checkpoint")]
    uniform_weights: bool,
    /// One or more neighborhood sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "122")]
    k: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    order: u8,
    #[arg(long, default_value_t = jetfit::jet::DEFAULT_RIDGE)]
    ridge: f64,
    /// Corruptions applied before estimation: none, noise_low, noise_med, noise_high, gradient, stripes, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "none")]
    categories: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `report.json`, `report.txt` and the run manifest.
    #[arg(long)]
    out: PathBuf,
    /// Write per-point angle errors under `<out>/errors`.
    #[arg(long)]
    dump_errors: bool,
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    order: Option<u8>,
    /// Repeat estimation and removal this many times.
    #[arg(long, default_value_t = 1)]
    iterations: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeName {
    Plane,
    Sphere,
    Cylinder,
    Paraboloid,
    Saddle,
    Torus,
    Corner,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DensityName {
    Gradient,
    Stripes,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["spec", "kind"])))]
struct SynthArgs {
    /// Corpus description (JSON); writes `<out>/<name>.*` and `<out>/list.txt`.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Single shape; writes `<out>.*`.
    #[arg(long, value_enum)]
    kind: Option<ShapeName>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    size: f64,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 2.0)]
    height: f64,
    #[arg(long, default_value_t = 0.5)]
    a: f64,
    #[arg(long, default_value_t = 0.5)]
    b: f64,
    #[arg(long, default_value_t = 1.0)]
    extent: f64,
    #[arg(long, default_value_t = 1.0)]
    major: f64,
    #[arg(long, default_value_t = 0.25)]
    minor: f64,
    #[arg(long, default_value_t = 90.0)]
    angle: f64,
    /// Gaussian σ as a fraction of the bounding-box diagonal.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, value_enum)]
    density: Option<DensityName>,
    /// Share of extra off-surface points.
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    /// Mean outlier displacement as a fraction of the bounding-box diagonal.
    #[arg(long, default_value_t = 0.05)]
    outlier_offset: f64,
    #[arg(long)]
    rotate: bool,
}

struct Context {
    threads: usize,
    argv: Vec<String>,
    started: f64,
}

impl Context {
    fn manifest(&self, command: &str, config: serde_json::Value, seeds: serde_json::Value, inputs: &[PathBuf], outputs: Vec<PathBuf>, notes: serde_json::Value) -> Result<RunManifest> {
        Ok(RunManifest {
            command: command.into(),
            argv: self.argv.clone(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config,
            seeds,
            threads: self.threads,
            inputs: hash_inputs(inputs)?,
            outputs,
            started_unix_s: self.started,
            finished_unix_s: now(),
            notes,
        })
    }
}

fn parent_dir(base: &Path) -> PathBuf {
    match base.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn pcpnet_inputs(base: &Path) -> Vec<PathBuf> {
    ["xyz", "normals", "curv", "pidx"].iter().map(|e| jetfit::data::sibling(base, e)).collect()
}

fn load_net(path: &Path) -> Result<(WeightNet, Option<TrainConfig>)> {
    let ck = checkpoint::load(path)?;
    let cfg = recorded_config(&ck);
    Ok((ck.net, cfg))
}

fn fit_options(k: Option<usize>, order: Option<u8>, ridge: f64, recorded: Option<&TrainConfig>) -> Result<FitOptions> {
    let k = k.or(recorded.map(|c| c.k_neighbors)).unwrap_or(256);
    let order = order.or(recorded.map(|c| c.jet_order)).unwrap_or(3);
    let mut opts = FitOptions::new(k, order)?;
    opts.ridge = ridge;
    Ok(opts)
}

/// Fits whose estimate failed fall back to the patch's PCA normal with zero
/// curvature; their count is returned.
fn fit_all(cloud: &PointCloud, weighting: Weighting<'_>, opts: &FitOptions) -> Result<(Vec<PointFit>, usize)> {
    let fits = fit_cloud(cloud, weighting, opts, false)?;
    let index = jetfit::neighborhood::NeighborIndex::new(&cloud.positions);
    let mut fallbacks = 0;
    let mut out = Vec::with_capacity(fits.len());
    for (q, f) in fits.into_iter().enumerate() {
        match f {
            Ok(f) => out.push(f),
            Err(err) => {
                fallbacks += 1;
                let patch = jetfit::neighborhood::extract_patch(cloud, &index, q, opts.k)
                    .map_err(|e| Error::InvalidInput(format!("point {q}: {err}; no fallback: {e}")))?;
                out.push(PointFit {
                    query_index: q,
                    normal: patch.basis.column(2).into_owned(),
                    curvatures: (opts.order.get() >= 2).then_some([0.0, 0.0]),
                    directions: None,
                    weights: vec![0.0; patch.len()],
                    neighbor_indices: patch.neighbor_indices,
                    ridge_used: f64::NAN,
                });
            }
        }
    }
    Ok((out, fallbacks))
}

fn summed_weights(n: usize, fits: &[PointFit]) -> Result<Vec<f64>> {
    aggregate_weights(n, fits.iter().map(|f| (f.neighbor_indices.as_slice(), f.weights.as_slice())))
}

fn write_lines(path: &Path, values: &[f64]) -> Result<()> {
    let mut s = String::with_capacity(values.len() * 18);
    for v in values {
        let _ = writeln!(s, "{v:.10e}");
    }
    std::fs::write(path, s).map_err(|e| io(path, e))
}

fn cmd_fit(a: &FitArgs, ctx: &Context) -> Result<()> {
    let cloud = load_pcpnet(&a.input)?;
    let loaded = a.checkpoint.as_deref().map(load_net).transpose()?;
    let opts = fit_options(a.k, a.order, a.ridge, loaded.as_ref().and_then(|l| l.1.as_ref()))?;
    let weighting = match &loaded {
        Some((net, _)) => Weighting::Network(net),
        None => Weighting::Uniform,
    };
    let (fits, fallbacks) = fit_all(&cloud, weighting, &opts)?;
    let summed = summed_weights(cloud.len(), &fits)?;
    let est = PointCloud {
        positions: cloud.positions.clone(),
        gt_normals: Some(fits.iter().map(|f| f.normal).collect()),
        gt_curvatures: (opts.order.get() >= 2).then(|| fits.iter().map(|f| f.curvatures.unwrap_or([0.0, 0.0])).collect()),
        eval_indices: None,
    };
    let mut outputs = save_pcpnet(&est, &a.output, SaveWhat::ALL)?;
    let wpath = jetfit::data::sibling(&a.output, "weights");
    write_lines(&wpath, &summed)?;
    outputs.push(wpath);
    if fallbacks > 0 {
        eprintln!("warning: {fallbacks} of {} points fell back to a PCA normal", cloud.len());
    }
    let mut inputs = pcpnet_inputs(&a.input);
    inputs.extend(a.checkpoint.clone());
    let m = ctx.manifest(
        "fit",
        json!({ "k": opts.k, "order": opts.order.get(), "ridge": opts.ridge, "uniform_weights": loaded.is_none(),
                "input": a.input, "output": a.output, "checkpoint": a.checkpoint }),
        json!({}),
        &inputs,
        outputs,
        json!({ "points": cloud.len(), "fallbacks": fallbacks }),
    )?;
    m.write(&parent_dir(&a.output))?;
    Ok(())
}

fn load_manifest_clouds(manifest: &Path, root: Option<&Path>) -> Result<(Vec<NamedCloud>, Vec<PathBuf>)> {
    let bases = read_manifest(manifest, root)?;
    let mut clouds = Vec::with_capacity(bases.len());
    let mut inputs = vec![manifest.to_path_buf()];
    for b in &bases {
        let name = b.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        clouds.push(NamedCloud {
            name,
            cloud: load_pcpnet(b)?,
        });
        inputs.extend(pcpnet_inputs(b));
    }
    Ok((clouds, inputs))
}

fn cmd_train(a: &TrainArgs, ctx: &Context) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    // flags take precedence over the file
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.k {
        cfg.k_neighbors = v;
    }
    if let Some(v) = a.samples_per_epoch {
        cfg.samples_per_epoch = v;
    }
    cfg.validate()?;
    let (named, mut inputs) = load_manifest_clouds(&a.manifest, a.data_root.as_deref())?;
    let clouds: Vec<PointCloud> = named.into_iter().map(|n| n.cloud).collect();
    std::fs::create_dir_all(&a.out).map_err(|e| io(&a.out, e))?;
    let resolved = a.out.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml_string()).map_err(|e| io(&resolved, e))?;
    let summary = train(&cfg, &clouds, &a.out, a.resume.as_deref(), &mut |m| {
        eprintln!(
            "epoch {:>4}  steps {:>7}  loss {:.5}  val {:.3} deg  mean w {:.3}  skipped {}",
            m.epoch, m.steps, m.loss, m.val_rmse_deg, m.mean_weight, m.skipped
        );
    })?;
    inputs.extend(a.config.clone());
    inputs.extend(a.resume.clone());
    let m = ctx.manifest(
        "train",
        serde_json::to_value(&cfg).expect("config serializes"),
        json!({ "seed": cfg.seed }),
        &inputs,
        vec![resolved, a.out.join("metrics.csv"), summary.last_checkpoint.clone(), summary.best_checkpoint.clone()],
        json!({ "best_val_rmse_deg": summary.best_val_rmse_deg, "epochs_run": summary.history.len() }),
    )?;
    m.write(&a.out)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, ctx: &Context) -> Result<()> {
    let loaded = a.checkpoint.as_deref().map(load_net).transpose()?;
    let names: Vec<MethodName> = if a.uniform_weights {
        vec![MethodName::Jet]
    } else if a.methods.is_empty() {
        if loaded.is_some() {
            vec![MethodName::Jet, MethodName::Net]
        } else {
            vec![MethodName::Jet]
        }
    } else {
        a.methods.clone()
    };
    if names.contains(&MethodName::Net) && loaded.is_none() {
        return Err(Error::InvalidInput("method `net` needs --checkpoint".into()));
    }
    let mut methods = Vec::new();
    for &k in &a.k {
        for n in &names {
            let kind = match n {
                MethodName::Pca => MethodKind::Pca,
                MethodName::Jet => MethodKind::Jet,
                MethodName::Net => MethodKind::Network,
            };
            methods.push(Method { kind, k, order: a.order });
        }
    }
    let categories: Vec<Category> = if a.categories.iter().any(|c| c == "all") {
        Category::standard()
    } else {
        a.categories.iter().map(|c| Category::by_name(c)).collect::<Result<_>>()?
    };
    let (shapes, mut inputs) = load_manifest_clouds(&a.manifest, a.data_root.as_deref())?;
    let cfg = BenchmarkConfig {
        seed: a.seed,
        ridge: a.ridge,
        dump_dir: a.dump_errors.then(|| a.out.join("errors")),
        ..BenchmarkConfig::default()
    };
    let report = run_benchmark(&shapes, &methods, &categories, loaded.as_ref().map(|l| &l.0), &cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io(&a.out, e))?;
    let rj = a.out.join("report.json");
    std::fs::write(&rj, serde_json::to_string_pretty(&report).expect("report serializes") + "\n").map_err(|e| io(&rj, e))?;
    let table = report.table();
    let rt = a.out.join("report.txt");
    std::fs::write(&rt, &table).map_err(|e| io(&rt, e))?;
    print!("{table}");
    inputs.extend(a.checkpoint.clone());
    let m = ctx.manifest("eval", report.config.clone(), json!({ "seed": a.seed }), &inputs, vec![rj, rt], json!({}))?;
    m.write(&a.out)?;
    Ok(())
}

fn cmd_denoise(a: &DenoiseArgs, ctx: &Context) -> Result<()> {
    if a.iterations == 0 {
        return Err(Error::InvalidInput("--iterations must be at least 1".into()));
    }
    let (net, recorded) = load_net(&a.checkpoint)?;
    let opts = fit_options(a.k, a.order, jetfit::jet::DEFAULT_RIDGE, recorded.as_ref())?;
    let mut cloud = load_pcpnet(&a.input)?;
    let original = cloud.len();
    let mut removed_per_pass = Vec::new();
    for _ in 0..a.iterations {
        if cloud.len() < opts.k {
            break;
        }
        let (fits, _) = fit_all(&cloud, Weighting::Network(&net), &opts)?;
        let summed = summed_weights(cloud.len(), &fits)?;
        let (kept, _) = denoise(&cloud, &summed)?;
        removed_per_pass.push(cloud.len() - kept.len());
        cloud = kept;
    }
    let outputs = save_pcpnet(&cloud, &a.output, SaveWhat::ALL)?;
    eprintln!("kept {} of {original} points", cloud.len());
    let mut inputs = pcpnet_inputs(&a.input);
    inputs.push(a.checkpoint.clone());
    let m = ctx.manifest(
        "denoise",
        json!({ "k": opts.k, "order": opts.order.get(), "iterations": a.iterations, "input": a.input, "output": a.output }),
        json!({}),
        &inputs,
        outputs,
        json!({ "points_in": original, "points_out": cloud.len(), "removed_per_pass": removed_per_pass }),
    )?;
    m.write(&parent_dir(&a.output))?;
    Ok(())
}

fn single_entry(a: &SynthArgs, kind: ShapeName) -> CorpusEntry {
    let shape = match kind {
        ShapeName::Plane => ShapeKind::Plane { size: a.size },
        ShapeName::Sphere => ShapeKind::Sphere { radius: a.radius },
        ShapeName::Cylinder => ShapeKind::Cylinder { radius: a.radius, height: a.height },
        ShapeName::Paraboloid => ShapeKind::Paraboloid { a: a.a, b: a.b, extent: a.extent },
        ShapeName::Saddle => ShapeKind::Saddle { a: a.a, b: a.b, extent: a.extent },
        ShapeName::Torus => ShapeKind::Torus { major: a.major, minor: a.minor },
        ShapeName::Corner => ShapeKind::Corner { angle_deg: a.angle },
    };
    let name = a.out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "shape".into());
    CorpusEntry {
        name,
        shape: ShapeSpec::new(shape, a.count, a.seed),
        noise: a.noise,
        density: a.density.map(|d| match d {
            DensityName::Gradient => Density::DEFAULT_GRADIENT,
            DensityName::Stripes => Density::DEFAULT_STRIPES,
        }),
        outliers: (a.outliers > 0.0).then_some(Outliers {
            fraction: a.outliers,
            offset: a.outlier_offset,
        }),
        rotate: a.rotate,
    }
}

fn cmd_synth(a: &SynthArgs, ctx: &Context) -> Result<()> {
    let (spec, dir, outputs, inputs) = match (&a.spec, a.kind) {
        (Some(path), _) => {
            let spec = CorpusSpec::load(path)?;
            let clouds = spec.build()?;
            let list = write_corpus(&a.out, &clouds)?;
            (spec, a.out.clone(), vec![list], vec![path.clone()])
        }
        (None, Some(kind)) => {
            let spec = CorpusSpec {
                shapes: vec![single_entry(a, kind)],
            };
            spec.validate()?;
            let cloud = spec.shapes[0].build()?;
            let files = save_pcpnet(&cloud, &a.out, SaveWhat::ALL)?;
            (spec, parent_dir(&a.out), files, Vec::new())
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    let seeds: Vec<u64> = spec.shapes.iter().map(|s| s.shape.seed).collect();
    let m = ctx.manifest("synth", serde_json::to_value(&spec).expect("spec serializes"), json!(seeds), &inputs, outputs, json!({}))?;
    m.write(&dir)?;
    Ok(())
}

fn run(cli: &Cli, ctx: &Context) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, ctx),
        Command::Train(a) => cmd_train(a, ctx),
        Command::Eval(a) => cmd_eval(a, ctx),
        Command::Denoise(a) => cmd_denoise(a, ctx),
        Command::Synth(a) => cmd_synth(a, ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let ctx = Context {
        threads: rayon::current_num_threads(),
        argv: std::env::args().collect(),
        started: now(),
    };
    match run(&cli, &ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
