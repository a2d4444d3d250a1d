use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use geoagg::io::{self, Tensor};
use geoagg::tasks::{self, TextFeatures, ViewProjection};
use geoagg::{anchors, compute_fpfh, run_pipeline, Error, FeatureField, Preset, Result, RunConfig};
use ndarray::{s, Array2};

#[derive(Parser)]
#[command(name = "geoagg", version, about = "Geometry-aware refinement of per-point vision-language features")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute 33-bin FPFH descriptors for a PLY cloud.
    Fpfh {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse per-view features (tensors of rows `index, weight, features...`).
    FuseViews {
        #[arg(long, num_args = 1.., required = true)]
        views: Vec<PathBuf>,
        /// Number of points in the cloud.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the refinement pipeline.
    Aggregate {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        vlm: PathBuf,
        #[arg(long)]
        geo: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Anchor bank to project onto instead of computing anchors.
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write a JSON run report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predict one class for a whole cloud.
    Classify {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        text: PathBuf,
        /// Extra global features averaged with the pooled feature.
        #[arg(long)]
        aux: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one class per point.
    Segment {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Label file, or a PLY with a `label` property.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Class count; labels >= this are unlabeled. Default: largest ground-truth label + 1.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Build or merge anchor banks.
    Anchors(AnchorArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset preset (applied before --set).
    #[arg(long)]
    preset: Option<Preset>,
    /// Override one setting, e.g. `--set n_super=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidParameter("use either --config or --preset, not both".into()))
            }
            (Some(path), None) => RunConfig::load(path)?,
            (None, Some(p)) => RunConfig::from_preset(p),
            (None, None) => RunConfig::default(),
        };
        for (k, item) in self.overrides.iter().enumerate() {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config { line: k + 1, message: format!("--set {item:?} is not KEY=VALUE") })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|message| Error::Config { line: k + 1, message })?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
#[group(skip)]
#[command(group(ArgGroup::new("mode").required(true).args(["save", "merge"])))]
struct AnchorArgs {
    /// Compute anchors of one cloud and save them as a bank.
    #[arg(long, requires_all = ["cloud", "vlm", "geo"])]
    save: Option<PathBuf>,
    /// Merge existing banks (`--inputs`) into one.
    #[arg(long, requires = "inputs")]
    merge: Option<PathBuf>,
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    vlm: Option<PathBuf>,
    #[arg(long)]
    geo: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Miou,
    Accuracy,
}

fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    io::read_tensor(path)?.to_matrix()
}

fn read_field(path: &Path) -> Result<FeatureField> {
    FeatureField::new(read_matrix(path)?)
}

fn read_gt(path: &Path) -> Result<Vec<usize>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        let cloud = io::read_ply(path)?;
        let labels = cloud
            .labels()
            .ok_or_else(|| Error::PlyFormat(format!("{} has no label property", path.display())))?;
        Ok(labels.iter().map(|&l| l as usize).collect())
    } else {
        io::read_labels(path)
    }
}

fn read_view(path: &Path) -> Result<ViewProjection> {
    let m = read_matrix(path)?;
    if m.ncols() < 3 {
        return Err(Error::DimensionMismatch(format!(
            "{}: view rows need index, weight and at least one feature column",
            path.display()
        )));
    }
    let indices = m
        .column(0)
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::InvalidParameter(format!("{}: point index {v} is not a nonnegative integer", path.display())))
            }
        })
        .collect::<Result<_>>()?;
    Ok(ViewProjection {
        indices,
        weights: m.column(1).to_vec(),
        features: m.slice(s![.., 2..]).to_owned(),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fpfh { input, config, out } => {
            let cfg = config.resolve()?;
            let cloud = io::read_ply(&input)?;
            let geo = compute_fpfh(&cloud, &cfg.fpfh)?;
            io::write_tensor(&out, &Tensor::from_matrix(geo.values()))
        }
        Command::FuseViews { views, n, out } => {
            let views = views.iter().map(|p| read_view(p)).collect::<Result<Vec<_>>>()?;
            let fused = tasks::fuse_views(&views, n)?;
            eprintln!("fused {} of {n} points", fused.valid_count());
            io::write_tensor(&out, &Tensor::from_matrix(fused.values()))
        }
        Command::Aggregate { cloud, vlm, geo, config, anchors, out, report } => {
            let cfg = config.resolve()?;
            let cloud = io::read_ply(&cloud)?;
            let vlm = read_field(&vlm)?;
            let geo = read_field(&geo)?;
            let bank = anchors.map(io::read_anchor_bank).transpose()?;
            let result = run_pipeline(&cloud, &vlm, &geo, &cfg.pipeline, bank.as_ref())?;
            io::write_tensor(&out, &Tensor::from_matrix(result.features.values()))?;
            if let Some(path) = report {
                let json = serde_json::json!({ "config": cfg, "report": result.report });
                let text = serde_json::to_string_pretty(&json).expect("report serialises");
                std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Command::Classify { features, text, aux, out } => {
            let features = read_field(&features)?;
            let text = TextFeatures::unnamed(read_matrix(&text)?)?;
            let aux = aux.as_deref().map(read_matrix).transpose()?;
            let c = tasks::classify(&features, &text, aux.as_ref())?;
            let scores: Vec<String> = c.scores.iter().map(|s| format!("{s:.6}")).collect();
            println!("class {} scores {}", c.class, scores.join(" "));
            io::write_labels(&out, &[c.class])
        }
        Command::Segment { features, text, out } => {
            let features = read_field(&features)?;
            let text = TextFeatures::unnamed(read_matrix(&text)?)?;
            io::write_labels(&out, &tasks::segment(&features, &text)?)
        }
        Command::Eval { pred, gt, metric, classes } => {
            let pred = io::read_labels(&pred)?;
            let gt = read_gt(&gt)?;
            match metric {
                Metric::Accuracy => println!("accuracy {:?}", tasks::accuracy(&pred, &gt)?),
                Metric::Miou => {
                    let c = classes.unwrap_or_else(|| gt.iter().max().map_or(0, |m| m + 1));
                    println!("miou {:?}", tasks::miou(&pred, &gt, c)?.miou);
                }
            }
            Ok(())
        }
        Command::Anchors(args) => {
            let cfg = args.config.resolve()?;
            let p = &cfg.pipeline;
            if let Some(out) = args.save {
                let (cloud, vlm, geo) = (args.cloud.expect("clap"), args.vlm.expect("clap"), args.geo.expect("clap"));
                let cloud = io::read_ply(&cloud)?;
                let result = run_pipeline(&cloud, &read_field(&vlm)?, &read_field(&geo)?, p, None)?;
                eprintln!("{} anchors", result.anchors.len());
                io::write_anchor_bank(&out, &result.anchors)
            } else {
                let out = args.merge.expect("clap group");
                let sets = args.inputs.iter().map(io::read_anchor_bank).collect::<Result<Vec<_>>>()?;
                let bank = anchors::build_anchor_bank(&sets, p.bandwidth_rank, p.nms_mode)?;
                eprintln!("{} anchors from {} banks", bank.len(), sets.len());
                io::write_anchor_bank(&out, &bank)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
