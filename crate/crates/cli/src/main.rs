//! `loopwatch` command-line front end.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use loopwatch::cfam::{train_cfam_with, CfamConfig};
use loopwatch::dataio::{
    find_override_window, linked_dirs, make_windows, run, AnomalyKind, Episode, LinkedPair, TrainingWindow, WorldConfig,
    MANIFEST,
};
use loopwatch::monitor::{calibrate_threshold, evaluate_episode, Metrics, Monitor, MonitorConfig, MonitorInput, MonitorReport};
use loopwatch::sfam::{train_sfam_with, SfamConfig, SfamProgress};
use loopwatch::{Cfam, Error, Frame, Result, Sfam};

#[derive(Parser)]
#[command(name = "loopwatch", version, about = "Runtime anomaly monitors for learned steering controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate nominal corridor episodes and injected override pairs.
    Datagen(DatagenArgs),
    /// Train the controller-focused monitor.
    TrainCfam(TrainArgs),
    /// Train the system-focused monitor (both stages).
    TrainSfam(TrainArgs),
    /// Derive thresholds from nominal episodes.
    Calibrate(CalibrateArgs),
    /// Score an episode or linked pair and write report.csv.
    Monitor(MonitorArgs),
    /// Compare a report with episode labels.
    Eval(EvalArgs),
    /// Render a report as PNG plots.
    Plot(PlotArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// World config (TOML); defaults to the built-in corridor.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of nominal episodes.
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 300)]
    length: usize,
    /// Number of late-right override pairs.
    #[arg(long, default_value_t = 0)]
    late_right: usize,
    /// Number of early-left override pairs.
    #[arg(long, default_value_t = 0)]
    early_left: usize,
    /// Override duration in frames.
    #[arg(long, default_value_t = 15)]
    span: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Episode directory, or a directory tree of episodes.
    #[arg(long)]
    data: PathBuf,
    /// Model config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelArgs {
    /// Monitor config (TOML) holding checkpoints, grid, thresholds and window.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cfam: Option<PathBuf>,
    #[arg(long)]
    sfam: Option<PathBuf>,
    /// Resample frames to the predictor's input size.
    #[arg(long)]
    resize: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Nominal episode directory or tree.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 99.0)]
    percentile: f64,
    #[command(flatten)]
    models: ModelArgs,
    /// Where to write the calibrated monitor config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MonitorArgs {
    /// Single episode directory.
    #[arg(long, conflicts_with = "linked", required_unless_present = "linked")]
    episode: Option<PathBuf>,
    /// Linked pair directory with `nominal/` and `executed/`.
    #[arg(long)]
    linked: Option<PathBuf>,
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long)]
    tau_cfam: Option<f64>,
    #[arg(long)]
    tau_sfam: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    report: PathBuf,
    /// Labelled episode directory; for a linked pair, its root.
    #[arg(long)]
    episode: PathBuf,
    /// Frames after a span that still count toward detecting it.
    #[arg(long)]
    slack: Option<usize>,
    /// Monitor config supplying the default slack.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    report: PathBuf,
    /// Output directory for the PNG files.
    #[arg(long)]
    out: PathBuf,
    /// Episode for energy and dissimilarity profile plots at `--at`.
    #[arg(long, requires = "at")]
    episode: Option<PathBuf>,
    #[arg(long)]
    at: Option<usize>,
    #[command(flatten)]
    models: ModelArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Datagen(a) => datagen(a),
        Command::TrainCfam(a) => train_cfam_cmd(a),
        Command::TrainSfam(a) => train_sfam_cmd(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Monitor(a) => monitor(a),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn datagen(a: DatagenArgs) -> Result<()> {
    let world = match &a.world {
        Some(p) => WorldConfig::load(p)?,
        None => WorldConfig::default(),
    };
    world.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let path = a.out.join("world.toml");
    fs::write(&path, world.to_toml_string()).map_err(|e| Error::io(&path, e))?;
    for i in 0..a.count {
        let seed = a.seed.wrapping_add(i as u64);
        let ep = loopwatch::dataio::simulate_episode(&world, seed, a.length)?;
        ep.save(&a.out.join("nominal").join(format!("ep_{i:04}")))?;
    }
    println!("wrote {} nominal episodes", a.count);
    for (kind, count, base) in [
        (AnomalyKind::LateRight, a.late_right, 1_000_000u64),
        (AnomalyKind::EarlyLeft, a.early_left, 2_000_000u64),
    ] {
        let mut seed = a.seed.wrapping_add(base);
        let mut made = 0;
        let mut tries = 0;
        while made < count {
            if tries >= 100 * count {
                return Err(Error::config(format!(
                    "no {} override location found after {tries} episodes",
                    kind.name()
                )));
            }
            tries += 1;
            let nominal = run(&world, seed, a.length, None)?;
            if let Some(sc) = find_override_window(&nominal, kind, a.span, 20) {
                let pair = LinkedPair::simulate(&world, seed, a.length, &sc)?;
                let root = a.out.join("anomalies").join(format!("{}_{made:04}", kind.name()));
                let (n, x) = linked_dirs(&root);
                pair.nominal.save(&n)?;
                pair.executed.save(&x)?;
                made += 1;
            }
            seed = seed.wrapping_add(1);
        }
        if count > 0 {
            println!("wrote {count} {} pairs", kind.name());
        }
    }
    Ok(())
}

/// Episode directories under `root` in sorted order.
fn episode_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(MANIFEST).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    if !root.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", root.display())));
    }
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        out.extend(episode_dirs(&e)?);
    }
    Ok(out)
}

fn load_episodes(root: &Path) -> Result<Vec<Episode>> {
    let dirs = episode_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::format(root, "no episodes found"));
    }
    dirs.iter().map(|d| Episode::load(d)).collect()
}

fn train_cfam_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => CfamConfig::load(p)?,
        None => CfamConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let eps = load_episodes(&a.data)?;
    let pairs: Vec<(&Frame<f32>, f64)> = eps
        .iter()
        .flat_map(|e| e.frames().iter().zip(e.commands()))
        .collect();
    println!("training on {} frames from {} episodes", pairs.len(), eps.len());
    let (model, _) = train_cfam_with::<f32>(&pairs, &cfg, |e| {
        println!(
            "epoch {:>3}  d_loss {:.6}  g_loss {:.6}  real_energy {:.6}",
            e.epoch, e.d_loss, e.g_loss, e.real_energy
        )
    })?;
    model.save(&a.out)?;
    println!("saved {}", a.out.display());
    Ok(())
}

fn train_sfam_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SfamConfig::load(p)?,
        None => SfamConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let eps: Vec<Episode> = load_episodes(&a.data)?
        .into_iter()
        .map(|e| fit_episode(e, cfg.height, cfg.width))
        .collect::<Result<_>>()?;
    let windows: Vec<TrainingWindow<'_>> = eps
        .iter()
        .map(make_windows)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    println!("training on {} windows from {} episodes", windows.len(), eps.len());
    let (model, _) = train_sfam_with::<f32>(&windows, &cfg, |p| match p {
        SfamProgress::Stage1(e) => println!("stage1 epoch {:>3}  loss {:.6}", e.epoch, e.loss),
        SfamProgress::Stage2(e) => println!(
            "stage2 epoch {:>3}  critic {:.6}  generator {:.6}  accuracy {:.3}",
            e.epoch, e.critic_loss, e.gen_loss, e.real_fake_accuracy
        ),
    })?;
    model.save(&a.out)?;
    println!("saved {}", a.out.display());
    Ok(())
}

fn fit_episode(e: Episode, h: usize, w: usize) -> Result<Episode> {
    match e.frame_dims() {
        Some((_, eh, ew)) if (eh, ew) != (h, w) => e.resized(h, w),
        _ => Ok(e),
    }
}

/// Monitor config from file and flags, with checkpoints resolved.
fn monitor_config(m: &ModelArgs) -> Result<MonitorConfig> {
    let mut cfg = match &m.config {
        Some(p) => MonitorConfig::load(p)?,
        None => MonitorConfig::default(),
    };
    if m.cfam.is_some() {
        cfg.cfam_checkpoint = m.cfam.clone();
    }
    if m.sfam.is_some() {
        cfg.sfam_checkpoint = m.sfam.clone();
    }
    cfg.resize |= m.resize;
    Ok(cfg)
}

fn load_models(cfg: &MonitorConfig) -> Result<(Cfam, Sfam)> {
    let c = cfg
        .cfam_checkpoint
        .as_ref()
        .ok_or_else(|| Error::invalid("no controller-monitor checkpoint given (--cfam or config)"))?;
    let s = cfg
        .sfam_checkpoint
        .as_ref()
        .ok_or_else(|| Error::invalid("no prediction-monitor checkpoint given (--sfam or config)"))?;
    Ok((Cfam::load(c)?, Sfam::load(s, None)?))
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let cfg = monitor_config(&a.models)?;
    cfg.validate()?;
    let (cfam, sfam) = load_models(&cfg)?;
    let mon = Monitor::new(&cfam, &sfam, cfg.clone())?;
    let reports = load_episodes(&a.data)?
        .iter()
        .map(|e| mon.run(MonitorInput::single(e)))
        .collect::<Result<Vec<_>>>()?;
    let (tau_cfam, tau_sfam) = calibrate_threshold(&reports, a.percentile)?;
    let out = MonitorConfig {
        tau_cfam,
        tau_sfam,
        ..cfg
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&a.out, out.to_toml_string()).map_err(|e| Error::io(&a.out, e))?;
    println!("tau_cfam = {tau_cfam}\ntau_sfam = {tau_sfam}");
    Ok(())
}

fn monitor(a: MonitorArgs) -> Result<()> {
    let mut cfg = monitor_config(&a.models)?;
    if let Some(t) = a.tau_cfam {
        cfg.tau_cfam = t;
    }
    if let Some(t) = a.tau_sfam {
        cfg.tau_sfam = t;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    cfg.validate()?;
    let (cfam, sfam) = load_models(&cfg)?;
    let mon = Monitor::new(&cfam, &sfam, cfg)?;
    let report = match (&a.episode, &a.linked) {
        (Some(dir), _) => mon.run(MonitorInput::single(&Episode::load(dir)?))?,
        (None, Some(root)) => {
            let (n, x) = linked_dirs(root);
            let pair = LinkedPair::new(Episode::load(&n)?, Episode::load(&x)?)?;
            mon.run(MonitorInput::linked(&pair))?
        }
        (None, None) => return Err(Error::invalid("give --episode or --linked")),
    };
    report.save(&a.out)?;
    let count = |f: fn(&loopwatch::monitor::ReportRow) -> bool| report.rows.iter().filter(|r| f(r)).count();
    println!(
        "{} frames, triggers: cfam {}, sfam {}; wrote {}",
        report.len(),
        count(|r| r.cfam_trigger),
        count(|r| r.sfam_trigger),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => MonitorConfig::load(p)?,
        None => MonitorConfig::default(),
    };
    if let Some(s) = a.slack {
        cfg.detection_slack = s;
    }
    let report = MonitorReport::load(&a.report)?;
    // Labels of a linked pair live with the executed run.
    let dir = if a.episode.join(MANIFEST).is_file() {
        a.episode.clone()
    } else {
        linked_dirs(&a.episode).1
    };
    let episode = Episode::load(&dir)?;
    let metrics: Metrics = evaluate_episode(&report, &episode, &cfg)?;
    let text = metrics.to_key_values();
    match &a.out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(p, &text).map_err(|e| Error::io(p, e))?;
            println!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    let report = MonitorReport::load(&a.report)?;
    let mcfg = monitor_config(&a.models)?;
    // Thresholds are only drawn when a config supplies them.
    let taus = a.models.config.as_ref().map(|_| &mcfg);
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut written = plot::report_plots(&report, taus, &a.out)?;
    if let (Some(dir), Some(t)) = (&a.episode, a.at) {
        let episode = Episode::load(dir)?;
        if t >= episode.len() {
            return Err(Error::invalid(format!("--at {t} beyond episode of {} frames", episode.len())));
        }
        let grid = mcfg.grid()?;
        if let Some(p) = &mcfg.cfam_checkpoint {
            let cfam = Cfam::load(p)?;
            let profile = cfam.energy_sweep(&cfam.prepare(episode.frame(t))?, &grid)?;
            written.push(plot::profile_plot(
                &grid,
                &profile.energies,
                episode.steering(t),
                &a.out.join(format!("energy_t{t:05}.png")),
            )?);
        }
        if let Some(p) = &mcfg.sfam_checkpoint {
            if t >= 4 {
                let sfam = Sfam::load(p, None)?;
                let (h, w) = (sfam.config().height, sfam.config().width);
                let fitted = fit_episode(episode.clone(), h, w)?;
                let frames: Vec<&Frame<f32>> = (t - 4..t).map(|i| fitted.frame(i)).collect();
                let commands: Vec<f64> = (t - 3..t).map(|i| fitted.steering(i)).collect();
                let preds = sfam.conditioned_predictions(&frames, &commands, &grid)?;
                let profile = loopwatch::sfam::dissimilarity_profile(&preds, fitted.frame(t), &grid, sfam.config().ssim_kernel)?;
                written.push(plot::profile_plot(
                    &grid,
                    &profile.dssims,
                    episode.steering(t),
                    &a.out.join(format!("dissimilarity_t{t:05}.png")),
                )?);
            }
        }
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
