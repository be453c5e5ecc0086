use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use hgsr_core::arch::{self, ArchError, ModelConfig, Variant};
use hgsr_core::checkpoint::{self, CheckpointError};
use hgsr_core::data::{self, DataError, DatasetSpec, ImageBuffer, LumaRange};
use hgsr_core::graph::{init_parameters, GraphError, ParameterStore};
use hgsr_core::metrics::{self, EvalOptions, MetricError, Upscaler};
use hgsr_core::tensor::Tensor4;
use hgsr_core::train::{TrainError, TrainEvent, Trainer};

mod config;

use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "hgsr", version, about = "Heterogeneous group super-resolution CNN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key=value configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Super-resolve one PNG image.
    Sr {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        scale: u32,
    },
    /// Y-channel PSNR/SSIM over a directory of HR PNG images.
    #[command(group(ArgGroup::new("source").required(true).args(["model", "baseline_bicubic"])))]
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        baseline_bicubic: bool,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scale: u32,
        /// Also write per-image rows (image,psnr_db,ssim,seconds) here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Skip clamping and rounding the SR output before scoring.
        #[arg(long)]
        unclamped: bool,
        /// Full-range instead of studio-swing luma.
        #[arg(long)]
        full_range_luma: bool,
    },
    /// Layer table, parameter and FLOP accounting for a config or checkpoint.
    #[command(group(ArgGroup::new("source").required(true).args(["config", "model"])))]
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Also time x2 inference on this host.
        #[arg(long)]
        timing: bool,
    },
    /// Build (and optionally inspect or train) an ablation variant.
    Ablate {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        inspect: bool,
        /// Train the variant with this configuration file.
        #[arg(long, value_name = "CONFIG")]
        train: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Center-crop to a multiple of the scale and bicubic-downscale.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Exit code 2 for usage and configuration errors, 1 for I/O and data errors.
enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 1,
        }
    }
}

impl From<ArchError> for Failure {
    fn from(e: ArchError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Data(e.to_string()),
            ConfigError::Syntax { .. } | ConfigError::UnknownKey { .. } | ConfigError::Value { .. } => {
                Failure::Usage(e.to_string())
            }
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::ConfigMismatch { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::UnknownScale(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Graph(g) => g.into(),
            MetricError::Data(d) => d.into(),
            MetricError::Repeats(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::NoSamples(_) => Failure::Usage(e.to_string()),
            TrainError::Arch(a) => a.into(),
            TrainError::Graph(g) => g.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

fn print_settings(pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        println!("# {k} = {v}");
    }
}

fn print_block(text: &str) {
    for line in text.lines() {
        println!("# {line}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, max_steps } => cmd_train(&config, None, seed, max_steps),
        Command::Sr {
            model,
            input,
            output,
            scale,
        } => cmd_sr(&model, &input, &output, scale),
        Command::Eval {
            model,
            baseline_bicubic,
            dataset,
            scale,
            csv,
            unclamped,
            full_range_luma,
        } => {
            let options = EvalOptions {
                clamp: !unclamped,
                luma: if full_range_luma { LumaRange::Full } else { LumaRange::Studio },
            };
            cmd_eval(model.as_deref().filter(|_| !baseline_bicubic), &dataset, scale, csv.as_deref(), options)
        }
        Command::Inspect { config, model, timing } => cmd_inspect(config.as_deref(), model.as_deref(), timing),
        Command::Ablate {
            variant,
            inspect,
            train,
            seed,
            max_steps,
        } => cmd_ablate(&variant, inspect, train.as_deref(), seed, max_steps),
        Command::Degrade { input, scale, output } => cmd_degrade(&input, scale, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(msg) | Failure::Data(msg)) = &f;
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}

fn cmd_train(path: &Path, variant: Option<Variant>, seed: Option<u64>, max_steps: Option<u64>) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(v) = variant {
        cfg.model.variant = v;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(m) = max_steps {
        cfg.train.max_steps = m;
    }
    print_block(&cfg.render());
    cfg.model.validate()?;
    cfg.train.validate()?;
    let dataset = cfg
        .dataset
        .clone()
        .ok_or_else(|| Failure::Usage("configuration has no `dataset` entry".into()))?;

    let mut trainer = match &cfg.resume {
        Some(ck) => {
            let ck = checkpoint::load_checkpoint(ck)?;
            ck.ensure_compatible(&cfg.model)?;
            Trainer::<f32>::resume(ck, cfg.train.clone())?
        }
        None => Trainer::<f32>::new(cfg.model.clone(), cfg.train.clone())?,
    };

    let paths = data::list_images(&dataset)?;
    let spec = DatasetSpec {
        scales: cfg.train.scales.clone(),
        patch_size: cfg.train.patch_size,
        patches_per_image: cfg.patches_per_image,
        seed: cfg.train.seed,
    };
    let (set, skipped) = data::build_train_set(&paths, &spec)?;
    println!("# images = {}, samples = {}, skipped = {}", paths.len(), set.len(), skipped);
    println!("# parameters = {}", trainer.store.param_count());

    let mut log = match &cfg.log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Some(BufWriter::new(File::create(p)?))
        }
        None => None,
    };
    let output = cfg.output.clone();
    let final_step = cfg.train.max_steps;
    let mut save_error: Option<Failure> = None;
    let stdout = io::stdout();
    let result = trainer.run(&set, |event| {
        match event {
            TrainEvent::Step(r) => {
                let mut out = stdout.lock();
                let _ = writeln!(out, "{r}");
                if let Some(l) = log.as_mut() {
                    if let Err(e) = writeln!(l, "{r}") {
                        save_error = Some(e.into());
                        return Err(TrainError::Config("progress log write failed".into()));
                    }
                }
            }
            TrainEvent::Checkpoint(ck) => {
                let target = if ck.step == final_step {
                    output.clone()
                } else {
                    let mut name = output.clone().into_os_string();
                    name.push(format!(".step{}", ck.step));
                    PathBuf::from(name)
                };
                if let Err(e) = checkpoint::save_checkpoint(&target, &ck) {
                    save_error = Some(e.into());
                    return Err(TrainError::Config("checkpoint write failed".into()));
                }
                eprintln!("checkpoint step {} -> {}", ck.step, target.display());
            }
        }
        Ok(())
    });
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    if let Some(e) = save_error {
        return Err(e);
    }
    result?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(hgsr_core::graph::Graph, checkpoint::Checkpoint), Failure> {
    let ck = checkpoint::load_checkpoint(path)?;
    let graph = arch::build_hgsrcnn(&ck.model)?;
    ck.params.check_against(&graph)?;
    Ok((graph, ck))
}

fn scale_list(scales: &[u32]) -> String {
    scales.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
}

fn cmd_sr(model: &Path, input: &Path, output: &Path, scale: u32) -> Result<(), Failure> {
    print_settings(&[
        ("model", model.display().to_string()),
        ("input", input.display().to_string()),
        ("output", output.display().to_string()),
        ("scale", scale.to_string()),
    ]);
    let (graph, ck) = load_model(model)?;
    let supported = graph.scales();
    if !supported.contains(&scale) {
        return Err(Failure::Usage(format!(
            "scale {scale} is not supported by this model (supported scales: {})",
            scale_list(&supported)
        )));
    }
    let img = data::load_png(input)?;
    if img.channels() != ck.model.image_channels {
        return Err(Failure::Data(format!(
            "{} has {} channels but the model expects {}",
            input.display(),
            img.channels(),
            ck.model.image_channels
        )));
    }
    let x: Tensor4<f32> = img.to_tensor();
    let trace = graph.forward_scale(&ck.params, &x, scale)?;
    let sr = ImageBuffer::from_tensor(trace.output(scale).expect("selected branch evaluated"), 0)?.quantize();
    data::save_png(output, &sr)?;
    println!("wrote {}x{} image to {}", sr.width(), sr.height(), output.display());
    Ok(())
}

const PAPER_BICUBIC_SET5: [(u32, &str); 3] = [(2, "33.66/0.9299"), (3, "30.39/0.8682"), (4, "28.42/0.8104")];

fn cmd_eval(model: Option<&Path>, dataset: &Path, scale: u32, csv: Option<&Path>, options: EvalOptions) -> Result<(), Failure> {
    print_settings(&[
        ("source", model.map(|m| m.display().to_string()).unwrap_or_else(|| "bicubic".into())),
        ("dataset", dataset.display().to_string()),
        ("scale", scale.to_string()),
        ("shave", scale.to_string()),
        ("clamp", options.clamp.to_string()),
        ("luma", format!("{:?}", options.luma).to_lowercase()),
    ]);
    if !arch::SUPPORTED_SCALES.contains(&scale) {
        return Err(Failure::Usage(format!(
            "scale {scale} is not supported (supported scales: {})",
            scale_list(&arch::SUPPORTED_SCALES)
        )));
    }
    let loaded = model.map(load_model).transpose()?;
    let upscaler = match &loaded {
        Some((graph, ck)) => {
            if !graph.scales().contains(&scale) {
                return Err(Failure::Usage(format!(
                    "scale {scale} is not supported by this model (supported scales: {})",
                    scale_list(&graph.scales())
                )));
            }
            Upscaler::Model { graph, store: &ck.params }
        }
        None => Upscaler::Bicubic,
    };
    let report = metrics::evaluate(dataset, &upscaler, scale as usize, options)?;
    print!("{}", report.to_table());
    if model.is_none() {
        if let Some((_, v)) = PAPER_BICUBIC_SET5.iter().find(|(s, _)| *s == scale) {
            println!("paper-reported bicubic on Set5 x{scale} (PSNR/SSIM): {v}");
        }
    }
    if let Some(path) = csv {
        std::fs::write(path, report.to_csv())?;
    }
    Ok(())
}

/// Layer table plus parameter and FLOP accounting; shared by inspect and ablate.
fn structure_report(model: &ModelConfig, params: Option<&ParameterStore<f32>>) -> Result<String, Failure> {
    use std::fmt::Write as _;
    let graph = arch::build_hgsrcnn(model)?;
    let owned;
    let store = match params {
        Some(p) => p,
        None => {
            owned = init_parameters::<f32>(&graph, 0);
            &owned
        }
    };
    let mut s = arch::model_summary(&graph);
    let counts = metrics::count_params(&graph, store);
    let _ = writeln!(s, "{} layers", graph.layer_count());
    let _ = writeln!(s, "parameters (analytic): {}", counts.analytic);
    let _ = writeln!(s, "parameters (enumerated): {}", counts.enumerated);
    for (block, n) in &counts.per_block {
        let _ = writeln!(s, "  {block}: {n}");
    }
    let _ = writeln!(s, "parameters (paper-reported): {}", metrics::PAPER_REPORTED_PARAMS);
    for scale in graph.scales() {
        let lr = metrics::PAPER_FLOPS_SR_SIZE / scale as usize;
        let f = metrics::count_flops_branch(&graph, lr, lr, scale)?;
        let _ = writeln!(
            s,
            "flops x{scale} ({lr}x{lr} -> {sr}x{sr}): {macs} MACs, {flops} FLOPs (2*MACs + bias), relu {relu}, add {add}, moves {moves}",
            sr = lr * scale as usize,
            macs = f.conv_macs,
            flops = f.conv_flops(),
            relu = f.relu_ops,
            add = f.add_ops,
            moves = f.data_moves,
        );
    }
    let _ = writeln!(
        s,
        "flops (paper-reported, {0}x{0} output): {1}",
        metrics::PAPER_FLOPS_SR_SIZE,
        metrics::PAPER_REPORTED_FLOPS
    );
    Ok(s)
}

fn model_settings(m: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("variant", m.variant.to_string()),
        ("base_channels", m.base_channels.to_string()),
        ("num_hgb", m.num_hgb.to_string()),
        ("scales", scale_list(&m.scales)),
        ("controller", m.controller.to_string()),
        ("image_channels", m.image_channels.to_string()),
        ("anchors", m.resolved_anchors().map(|(a, b)| format!("{a},{b}")).unwrap_or_else(|| "none".into())),
    ]
}

fn cmd_inspect(config: Option<&Path>, model: Option<&Path>, timing: bool) -> Result<(), Failure> {
    let (cfg, ck) = match (config, model) {
        (Some(c), _) => (RunConfig::load(c)?.model, None),
        (None, Some(m)) => {
            let ck = checkpoint::load_checkpoint(m)?;
            (ck.model.clone(), Some(ck))
        }
        (None, None) => return Err(Failure::Usage("inspect needs --config or --model".into())),
    };
    print_settings(&model_settings(&cfg));
    if let Some(ck) = &ck {
        println!("# step = {}", ck.step);
    }
    cfg.validate()?;
    print!("{}", structure_report(&cfg, ck.as_ref().map(|c| &c.params))?);
    if timing {
        let graph = arch::build_hgsrcnn(&cfg)?;
        if graph.scales().contains(&2) {
            let store = match ck {
                Some(c) => c.params,
                None => init_parameters::<f32>(&graph, 0),
            };
            let (size, paper) = metrics::PAPER_REPORTED_SECONDS[0];
            let t = metrics::time_inference(&graph, &store, size / 2, size / 2, 2, 3)?;
            println!("time x2 {size}x{size} output: mean {:.4} s, min {:.4} s (host CPU)", t.mean, t.min);
            println!("time x2 {size}x{size} output (paper-reported GPU): {paper} s");
        }
    }
    Ok(())
}

fn cmd_ablate(variant: &str, inspect: bool, train: Option<&Path>, seed: Option<u64>, max_steps: Option<u64>) -> Result<(), Failure> {
    let variant: Variant = variant.parse()?;
    if let Some(cfg) = train {
        return cmd_train(cfg, Some(variant), seed, max_steps);
    }
    let model = ModelConfig {
        variant,
        ..ModelConfig::default()
    };
    print_settings(&model_settings(&model));
    println!("variant: {} ({})", variant.id(), variant.description());
    if inspect {
        print!("{}", structure_report(&model, None)?);
    } else {
        print!("{}", arch::model_summary(&arch::build_hgsrcnn(&model)?));
    }
    Ok(())
}

fn cmd_degrade(input: &Path, scale: usize, output: &Path) -> Result<(), Failure> {
    print_settings(&[
        ("input", input.display().to_string()),
        ("scale", scale.to_string()),
        ("output", output.display().to_string()),
    ]);
    if scale == 0 {
        return Err(Failure::Usage("scale must be at least 1".into()));
    }
    let img = data::load_png(input)?;
    let lr = data::degrade(&img, scale)?;
    data::save_png(output, &lr)?;
    println!("wrote {}x{} image to {}", lr.width(), lr.height(), output.display());
    Ok(())
}
