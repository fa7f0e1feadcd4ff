//! Command-line front end: configuration layering and the five commands.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::audit;
use crate::autograd::{Graph, ParamStore};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::flow::{ggam_name, parse_ggam, FlowNet, Fusion, ModelConfig};
use crate::ggam::{Ggam, GgamConfig, GgamMode};
use crate::gradcheck::GradCheckConfig;
use crate::synth::{corpus, flow_to_color, generate, write_flo, write_pgm, write_ppm, Metrics, SceneParams, SceneSpec};
use crate::train::{self, assign, evaluate, Control, DataSource, Event, OptimConfig, TrainConfig};

/// First seed of the held-out evaluation corpus.
pub const EVAL_SEED_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scenes {
    /// Layered scenes with motions up to about 50 px.
    #[default]
    Large,
    /// Background-only scenes with motions up to 6 px.
    Gentle,
}

impl Scenes {
    pub fn params(self, height: usize, width: usize) -> SceneParams {
        match self {
            Self::Large => SceneParams::large(height, width),
            Self::Gentle => SceneParams::gentle(height, width),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// window 9, sigma 3
    Toy,
    /// sigma 20
    Sintel,
    /// sigma 15
    Kitti,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

/// Every run setting. Serialised as a flat TOML table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub out: String,
    /// Empty means `<out>/model.ckpt`.
    pub ckpt: String,
    pub height: usize,
    pub width: usize,
    pub scenes: Scenes,
    pub eval_every: usize,
    pub eval_count: usize,

    pub factor: usize,
    pub channels: usize,
    pub iters: usize,
    pub radius: usize,
    pub levels: usize,
    pub gcl: bool,
    pub ggam: String,
    pub window: usize,
    pub sigma: f64,
    pub heads: usize,
    pub fusion: Fusion,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: f64,
    pub clip: f64,
    pub gamma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: 0,
            steps: t.steps,
            out: "runs/default".into(),
            ckpt: String::new(),
            height: 64,
            width: 96,
            scenes: Scenes::Large,
            eval_every: t.eval_every,
            eval_count: 100,
            factor: m.factor,
            channels: m.channels,
            iters: m.iters,
            radius: m.radius,
            levels: m.levels,
            gcl: m.use_gcl,
            ggam: ggam_name(m.ggam),
            window: m.window,
            sigma: m.sigma,
            heads: m.heads,
            fusion: m.fusion,
            lr: t.optim.lr,
            beta1: t.optim.beta1,
            beta2: t.optim.beta2,
            eps: t.optim.eps,
            weight_decay: t.optim.weight_decay,
            warmup: t.optim.warmup,
            clip: t.optim.clip,
            gamma: t.gamma,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {}", e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            factor: self.factor,
            channels: self.channels,
            iters: self.iters,
            radius: self.radius,
            levels: self.levels,
            use_gcl: self.gcl,
            ggam: parse_ggam(&self.ggam)?,
            window: self.window,
            sigma: self.sigma,
            heads: self.heads,
            fusion: self.fusion,
        };
        cfg.validate()?;
        let stride = cfg.stride();
        if self.height % stride != 0 || self.width % stride != 0 {
            return Err(Error::Config(format!(
                "canvas {}x{} must be a multiple of {stride}",
                self.height, self.width
            )));
        }
        Ok(cfg)
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            gamma: self.gamma,
            eval_every: self.eval_every,
            optim: OptimConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
                warmup: self.warmup,
                clip: self.clip,
            },
        }
    }

    pub fn scene_params(&self) -> SceneParams {
        self.scenes.params(self.height, self.width)
    }

    pub fn ckpt_path(&self) -> PathBuf {
        if self.ckpt.is_empty() {
            Path::new(&self.out).join("model.ckpt")
        } else {
            PathBuf::from(&self.ckpt)
        }
    }

    /// First scene seed of the training stream for this run.
    pub fn train_seed_base(&self) -> u64 {
        self.seed.wrapping_add(1).wrapping_shl(24)
    }

    pub fn eval_corpus(&self) -> Result<Vec<crate::synth::SyntheticSample>> {
        corpus(&self.scene_params(), EVAL_SEED_BASE, self.eval_count)
    }

    fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::Toy => {
                self.window = 9;
                self.sigma = 3.0;
            }
            Preset::Sintel => self.sigma = 20.0,
            Preset::Kitti => self.sigma = 15.0,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gauss-flow", version, about = "Train and inspect a small optical-flow network with Gaussian-windowed attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on streamed synthetic pairs; writes a checkpoint and a metrics log.
    Train,
    /// Evaluate a checkpoint on the held-out synthetic corpus.
    Eval,
    /// Finite-difference audit of every differentiable operator.
    Gradcheck,
    /// Write the aggregation windows at one pixel and the predicted flow.
    AttnDump {
        /// Query pixel in input coordinates, as `y,x`.
        #[arg(long, value_parser = parse_pixel)]
        pixel: (usize, usize),
        /// Evaluation-corpus scene to use.
        #[arg(long, default_value_t = 0)]
        scene: u64,
    },
    /// Write synthetic pairs as PPM frames and `.flo` ground truth.
    Gen {
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

/// Settings that override the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Flat TOML file of settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// off, smooth, ggac or ggad.
    #[arg(long, global = true, value_parser = ["off", "smooth", "ggac", "ggad"])]
    pub ggam: Option<String>,
    #[arg(long, global = true)]
    pub gcl: Option<Switch>,
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    #[arg(long, global = true)]
    pub window: Option<usize>,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<String>,
    #[arg(long, global = true)]
    pub ckpt: Option<String>,
    /// Named window/sigma settings, applied before explicit flags.
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

fn parse_pixel(s: &str) -> std::result::Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or("expected y,x")?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(y)?, n(x)?))
}

impl Overrides {
    /// Default, then the config file, then the preset, then explicit flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml(&fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        if let Some(p) = self.preset {
            cfg.apply_preset(p);
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = &self.ggam {
            cfg.ggam = v.clone();
        }
        if let Some(v) = self.gcl {
            cfg.gcl = v == Switch::On;
        }
        if let Some(v) = self.sigma {
            cfg.sigma = v;
        }
        if let Some(v) = self.window {
            cfg.window = v;
        }
        if let Some(v) = self.iters {
            cfg.iters = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &self.ckpt {
            cfg.ckpt = v.clone();
        }
        Ok(cfg)
    }
}

/// Runs a parsed command line, writing its report to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let cfg = cli.overrides.resolve()?;
    if cli.overrides.print_config {
        write!(out, "{}", cfg.to_toml())?;
        return Ok(());
    }
    match &cli.command {
        Command::Train => cmd_train(&cfg, out),
        Command::Eval => cmd_eval(&cfg, out),
        Command::Gradcheck => cmd_gradcheck(out),
        Command::AttnDump { pixel, scene } => cmd_attn_dump(&cfg, *pixel, *scene, out),
        Command::Gen { count } => cmd_gen(&cfg, *count, out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let model_cfg = cfg.model()?;
    let dir = Path::new(&cfg.out);
    create_dir(dir)?;
    let log_path = dir.join("metrics.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", log_path.display())))?;

    let mut store = ParamStore::new();
    let model = FlowNet::new(&mut store, model_cfg, cfg.seed)?;
    let eval_set = if cfg.steps > 0 { cfg.eval_corpus()? } else { Vec::new() };
    let mut data = DataSource::stream(cfg.scene_params(), cfg.train_seed_base(), cfg.steps);
    let mut last: Option<Metrics> = None;
    train::train(&model, &mut store, &cfg.training(), &mut data, &eval_set, |event| {
        writeln!(log, "{}", serde_json::to_string(event).expect("events serialise"))?;
        if let Event::Eval { metrics, .. } = event {
            last = Some(*metrics);
        }
        Ok(Control::Continue)
    })?;

    Checkpoint::from_store(cfg.to_toml(), &store).save(cfg.ckpt_path())?;
    match last {
        Some(m) => writeln!(out, "trained {} steps: {}", cfg.steps, summary(&m))?,
        None => writeln!(out, "trained {} steps", cfg.steps)?,
    }
    writeln!(out, "checkpoint {}", cfg.ckpt_path().display())?;
    Ok(())
}

fn summary(m: &Metrics) -> String {
    format!("EPE {:.4}, F1-all {:.2}%", m.epe, m.f1_all)
}

/// Rebuilds the model stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(RunConfig, FlowNet, ParamStore)> {
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })?;
    let cfg = RunConfig::from_toml(&ckpt.config)?;
    let mut store = ParamStore::new();
    let model = FlowNet::new(&mut store, cfg.model()?, cfg.seed)?;
    assign(&mut store, &ckpt.tensors)?;
    Ok((cfg, model, store))
}

/// The metrics table printed by `eval`.
pub fn metrics_table(m: &Metrics) -> String {
    let bin = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    format!(
        "pixels  {}\nEPE     {:.4}\nF1-all  {:.4}%\ns0-10   {}\ns10-40  {}\ns40+    {}\n",
        m.pixels,
        m.epe,
        m.f1_all,
        bin(m.bins.s0_10),
        bin(m.bins.s10_40),
        bin(m.bins.s40_plus)
    )
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let (trained, model, store) = load_model(&cfg.ckpt_path())?;
    let metrics = evaluate(&model, &store, &trained.eval_corpus()?)?;
    write!(out, "{}", metrics_table(&metrics))?;
    Ok(())
}

pub fn cmd_gradcheck(out: &mut dyn std::io::Write) -> Result<()> {
    let outcomes = audit::run(&audit::suite(), &GradCheckConfig::default(), 7);
    for o in &outcomes {
        writeln!(out, "{}", o.line())?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    writeln!(out, "{}/{} operators passed", outcomes.len() - failed.len(), outcomes.len())?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("gradient check failed: {}", failed.join(", "))))
    }
}

/// Aggregation module of `mode` carrying whatever parameters the trained
/// model shares with it.
fn aggregation_view(trained: &ParamStore, model: &FlowNet, mode: GgamMode) -> Result<(Ggam, ParamStore)> {
    let mut store = ParamStore::new();
    let cfg = GgamConfig {
        channels: model.cfg.channels,
        window: model.cfg.window,
        sigma: model.cfg.sigma,
        mode,
    };
    let m = Ggam::new(&mut store, "ggam", cfg, 0)?;
    for p in store.iter_mut() {
        if let Some(id) = trained.find(&p.name) {
            p.value = trained.value(id).clone();
        }
    }
    Ok((m, store))
}

pub fn cmd_attn_dump(cfg: &RunConfig, (y, x): (usize, usize), scene: u64, out: &mut dyn std::io::Write) -> Result<()> {
    let (trained, model, store) = load_model(&cfg.ckpt_path())?;
    if y >= trained.height || x >= trained.width {
        return Err(Error::OutOfBounds {
            y,
            x,
            height: trained.height,
            width: trained.width,
        });
    }
    let sample = generate(&SceneSpec::random(&trained.scene_params(), EVAL_SEED_BASE + scene))?;
    let g = Graph::new();
    let fwd = model.forward(&g, &store, &sample.img1, &sample.img2)?;
    let f_c = fwd.context.value().as_ref().clone();
    let f_m = fwd.motion.last().expect("at least one iteration").value().as_ref().clone();
    let at = (y / model.cfg.factor, x / model.cfg.factor);

    let dir = Path::new(&cfg.out);
    create_dir(dir)?;
    for mode in [GgamMode::Smooth, GgamMode::Ggac, GgamMode::Ggad] {
        let (m, s) = aggregation_view(&store, &model, mode)?;
        let window = m.attn_export(&s, &f_c, &f_m, at)?;
        let path = dir.join(format!("attn_{mode}.pgm"));
        write_pgm(&path, &window)?;
        writeln!(out, "{}", path.display())?;
    }
    let flow = fwd.predictions.last().expect("at least one iteration").value();
    for (name, f) in [("flow_pred.ppm", flow.as_ref()), ("flow_gt.ppm", &sample.flow)] {
        let path = dir.join(name);
        write_ppm(&path, &flow_to_color(f)?)?;
        writeln!(out, "{}", path.display())?;
    }
    Ok(())
}

pub fn cmd_gen(cfg: &RunConfig, count: usize, out: &mut dyn std::io::Write) -> Result<()> {
    let dir = Path::new(&cfg.out);
    create_dir(dir)?;
    let params = cfg.scene_params();
    for i in 0..count {
        let s = generate(&SceneSpec::random(&params, cfg.train_seed_base() + i as u64))?;
        write_ppm(dir.join(format!("{i:04}_img1.ppm")), &s.img1)?;
        write_ppm(dir.join(format!("{i:04}_img2.ppm")), &s.img2)?;
        write_flo(dir.join(format!("{i:04}_flow.flo")), &s.flow)?;
        write_ppm(dir.join(format!("{i:04}_flow.ppm")), &flow_to_color(&s.flow)?)?;
    }
    writeln!(out, "wrote {count} pairs to {}", dir.display())?;
    Ok(())
}
