//! Command-line interface.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use motia_core::adaptation::adapt;
use motia_core::data::{gen_moving_shapes, Video};
use motia_core::denoiser::{pretrain_base, DenoiserNet};
use motia_core::longvideo::outpaint_long;
use motia_core::metrics::{psnr, ssim, SSIM_WINDOW};
use motia_core::oracle::sampler_posterior_check;
use motia_core::outpaint::{outpaint, Expansion, OutpaintSpec};
use motia_core::schedule::{NoiseSchedule, TimestepPlan};

use crate::checkpoint::{load_adapters, load_base, save_adapters, save_base};
use crate::config::{RunConfig, SceneKind};
use crate::error::{self, Error, Result};
use crate::frames::export_frames;
use crate::manifest::{LayoutEcho, OutpaintManifest};
use crate::tables::{loss_csv, metrics_csv, schedule_csv};
use crate::vtn::{load_vtn, save_vtn};

#[derive(Debug, Parser)]
#[command(name = "motia", version, about = "Desk-scale video outpainting with per-video low-rank adaptation")]
pub struct Cli {
    /// Log verbosity; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic moving-shapes video.
    GenData(GenDataArgs),
    /// Train the base denoiser from scratch on synthetic clips.
    Pretrain(PretrainArgs),
    /// Fit adapters to one source video.
    Adapt(AdaptArgs),
    /// Expand a video beyond its borders.
    Outpaint(OutpaintArgs),
    /// PSNR and SSIM of a prediction against a reference.
    Eval(EvalArgs),
    /// Check the sampler against the closed-form Gaussian posterior.
    OracleCheck(OracleArgs),
    /// Export the noise schedule as CSV.
    InspectSchedule(ScheduleArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value_t = SceneKind::Mixed)]
    pub kind: SceneKind,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    pub frames: u32,
    /// Frame height and width.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    pub size: u32,
    #[arg(long, default_value_t = 2)]
    pub shapes: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the frames as PGM/PPM files into this directory.
    #[arg(long)]
    pub frames_dir: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `denoiser.pretrain.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-step loss trace.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub video: Option<PathBuf>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `adapt.iterations`.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss trace; defaults to the output path with a `.csv` extension.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct OutpaintArgs {
    #[arg(long)]
    pub video: Option<PathBuf>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Omit to run the base network alone.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    /// Pixels added per side, e.g. `left=8,right=8`.
    #[arg(long, value_parser = parse_expansion)]
    pub expand: Expansion,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to the output path with a `.json` extension.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `sampler.decay`, the spatial decay constant K.
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub frames_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Region {
    All,
    Unknown,
    Known,
}

impl Region {
    fn name(self) -> &'static str {
        match self {
            Region::All => "all",
            Region::Unknown => "unknown",
            Region::Known => "known",
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long, value_enum, default_value_t = Region::All)]
    pub region: Region,
    /// Expansion that produced `pred`; required for the known and unknown regions.
    #[arg(long, value_parser = parse_expansion)]
    pub expand: Option<Expansion>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub mean_tolerance: Option<f64>,
    #[arg(long)]
    pub cov_tolerance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct ScheduleArgs {
    #[arg(long = "T", default_value_t = 1000, value_parser = clap::value_parser!(u32).range(1..))]
    pub t: u32,
    /// Adds the inference-plan column for this many steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_end: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `left=8,right=8[,top=..,bottom=..]`.
pub fn parse_expansion(s: &str) -> std::result::Result<Expansion, String> {
    let mut e = Expansion::default();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part.split_once('=').ok_or_else(|| format!("expected side=pixels, got `{part}`"))?;
        let v: usize = value.trim().parse().map_err(|_| format!("bad pixel count `{value}`"))?;
        match key.trim() {
            "top" => e.top = v,
            "bottom" => e.bottom = v,
            "left" => e.left = v,
            "right" => e.right = v,
            other => return Err(format!("unknown side `{other}`")),
        }
    }
    Ok(e)
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Usage(format!("--{name} is required (or set paths.{name} in the config)")))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Outpaint(a) => outpaint_cmd(a),
        Command::Eval(a) => eval(a),
        Command::OracleCheck(a) => oracle_check(a),
        Command::InspectSchedule(a) => inspect_schedule(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let data = crate::config::DataConfig {
        kind: a.kind,
        frames: a.frames as usize,
        size: a.size as usize,
        shapes: a.shapes as usize,
        ..Default::default()
    };
    let (video, _) = gen_moving_shapes(&data.scene(a.seed)?)?;
    save_vtn(&video, &a.out)?;
    if let Some(dir) = &a.frames_dir {
        export_frames(&video, dir)?;
    }
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?.with_seed(a.seed);
    if let Some(s) = a.steps {
        cfg.denoiser.pretrain.steps = s;
    }
    let out = required(a.out, &cfg.paths.out, "out")?;
    let sched = cfg.schedule.build()?;
    let seed = cfg.seeds.seed;
    let mut net = DenoiserNet::build(cfg.denoiser.architecture.clone(), seed)?;
    let report = pretrain_base(&mut net, &cfg.denoiser.pretrain, &sched, seed, |step, mean| {
        log::info!("step {step}: mean loss {mean:.5}");
    })?;
    save_base(&net, &out)?;
    if let Some(p) = &a.loss_csv {
        error::write(p, loss_csv(&report.losses).as_bytes())?;
    }
    log::info!("wrote {}", out.display());
    Ok(())
}

fn adapt_cmd(a: AdaptArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?.with_seed(a.seed);
    if let Some(n) = a.iterations {
        cfg.adapt.iterations = n;
    }
    let video = load_vtn(&required(a.video, &cfg.paths.video, "video")?)?;
    let net = load_base(&required(a.base, &cfg.paths.base, "base")?)?;
    let out = required(a.out, &cfg.paths.out, "out")?;
    let sched = cfg.schedule.build()?;
    let outcome = adapt(&net, video.tensor(), &cfg.adapt, &sched, |i, loss| {
        if (i + 1) % 100 == 0 {
            log::info!("iteration {}: loss {loss:.5}", i + 1);
        }
    })?;
    save_adapters(&outcome.adapters, &out)?;
    let csv = a.loss_csv.unwrap_or_else(|| out.with_extension("csv"));
    error::write(&csv, loss_csv(&outcome.losses).as_bytes())?;
    log::info!("wrote {} and {}", out.display(), csv.display());
    Ok(())
}

fn outpaint_cmd(a: OutpaintArgs) -> Result<()> {
    let started = Instant::now();
    let mut cfg = RunConfig::load(a.config.as_deref())?.with_seed(a.seed);
    if let Some(k) = a.decay {
        cfg.sampler.decay = k;
    }
    let video = load_vtn(&required(a.video, &cfg.paths.video, "video")?)?;
    let net = load_base(&required(a.base, &cfg.paths.base, "base")?)?;
    let adapters = a.adapters.or_else(|| cfg.paths.adapters.clone()).map(|p| load_adapters(&p)).transpose()?;
    let out = required(a.out, &cfg.paths.out, "out")?;
    let sched = cfg.schedule.build()?;
    let spec = OutpaintSpec::new((video.height(), video.width()), a.expand)?;
    let layout = cfg.layout.layout(video.frames())?;
    let result = match &layout {
        Some(l) => outpaint_long(video.tensor(), &spec, &net, adapters.as_ref(), &cfg.sampler, l, &sched, cfg.layout.norm)?,
        None => outpaint(video.tensor(), &spec, &net, adapters.as_ref(), &cfg.sampler, &sched)?,
    };
    let output = Video::new(result.video)?;
    save_vtn(&output, &out)?;
    if let Some(dir) = &a.frames_dir {
        export_frames(&output, dir)?;
    }
    let manifest = OutpaintManifest {
        seed: cfg.seeds.seed,
        source_shape: video.tensor().shape().to_vec(),
        output_shape: output.tensor().shape().to_vec(),
        expansion: a.expand,
        identity: result.identity,
        base_only: !result.used_adapters,
        reverse_steps: result.reverse_steps,
        network_passes: result.network_passes,
        regrets: result.regrets,
        layout: layout.as_ref().map(|l| LayoutEcho::new(l, cfg.layout.norm)),
        config: cfg,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let manifest_path = a.manifest.unwrap_or_else(|| out.with_extension("json"));
    error::write(&manifest_path, manifest.to_json().as_bytes())?;
    log::info!("wrote {} and {}", out.display(), manifest_path.display());
    Ok(())
}

/// Per-pixel selection map of `region` on an `h x w` canvas.
fn region_map(region: Region, expand: Option<Expansion>, h: usize, w: usize) -> Result<Option<Vec<bool>>> {
    if region == Region::All {
        return Ok(None);
    }
    let e = expand.ok_or_else(|| Error::Usage(format!("--region {} needs --expand", region.name())))?;
    let (sh, sw) = (h.checked_sub(e.top + e.bottom), w.checked_sub(e.left + e.right));
    let (sh, sw) = sh
        .zip(sw)
        .filter(|&(a, b)| a > 0 && b > 0)
        .ok_or_else(|| motia_core::Error::Input(format!("expansion does not fit a {h}x{w} canvas")))?;
    let known = OutpaintSpec::new((sh, sw), e)?.known_map();
    Ok(Some(known.into_iter().map(|k| k == (region == Region::Known)).collect()))
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = load_vtn(&a.pred)?;
    let reference = load_vtn(&a.reference)?;
    pred.tensor().same_shape(reference.tensor())?;
    let map = region_map(a.region, a.expand, pred.height(), pred.width())?;
    let (p, s) = rayon::join(
        || psnr(pred.tensor(), reference.tensor(), map.as_deref()),
        || {
            (pred.height() >= SSIM_WINDOW && pred.width() >= SSIM_WINDOW)
                .then(|| ssim(pred.tensor(), reference.tensor()))
                .transpose()
        },
    );
    let mut rows = vec![("psnr", a.region.name(), p?)];
    match s? {
        Some(v) => rows.push(("ssim", "all", v)),
        None => log::warn!("frames smaller than {SSIM_WINDOW}x{SSIM_WINDOW}; SSIM skipped"),
    }
    error::write(&a.out, metrics_csv(&rows).as_bytes())
}

/// Runs the check and writes the report; `Ok(false)` when a tolerance is missed.
pub fn oracle_report(a: &OracleArgs) -> Result<(bool, PathBuf)> {
    let mut cfg = RunConfig::load(a.config.as_deref())?.with_seed(a.seed);
    if let Some(n) = a.samples {
        cfg.oracle.samples = n;
    }
    if let Some(t) = a.mean_tolerance {
        cfg.oracle.mean_tolerance = t;
    }
    if let Some(t) = a.cov_tolerance {
        cfg.oracle.cov_tolerance = t;
    }
    let out = required(a.out.clone(), &cfg.paths.out, "out")?;
    let sched = cfg.schedule.build()?;
    let report = sampler_posterior_check(&sched, &cfg.oracle)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    error::write(&out, json.as_bytes())?;
    Ok((report.pass, out))
}

fn oracle_check(a: OracleArgs) -> Result<()> {
    let (pass, out) = oracle_report(&a)?;
    if pass {
        Ok(())
    } else {
        Err(motia_core::Error::Contract(format!("oracle tolerances not met; see {}", out.display())).into())
    }
}

fn inspect_schedule(a: ScheduleArgs) -> Result<()> {
    let sched = NoiseSchedule::linear(a.t as usize, a.beta_start, a.beta_end)?;
    let plan = a
        .steps
        .map(|n| TimestepPlan::new(&sched, n, Default::default()))
        .transpose()?;
    error::write(&a.out, schedule_csv(&sched, plan.as_ref()).as_bytes())
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    crate::threads::configure();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_parsing() {
        let e = parse_expansion("left=8,right=8").unwrap();
        assert_eq!((e.left, e.right, e.top, e.bottom), (8, 8, 0, 0));
        let e = parse_expansion("top=1, bottom=2").unwrap();
        assert_eq!((e.top, e.bottom), (1, 2));
        assert!(parse_expansion("middle=3").is_err());
        assert!(parse_expansion("left=-1").is_err());
        assert!(parse_expansion("left").is_err());
    }

    #[test]
    fn regions_partition_the_canvas() {
        let e = parse_expansion("left=2,top=1").unwrap();
        let known = region_map(Region::Known, Some(e), 5, 6).unwrap().unwrap();
        let unknown = region_map(Region::Unknown, Some(e), 5, 6).unwrap().unwrap();
        assert!(known.iter().zip(&unknown).all(|(a, b)| a != b));
        assert_eq!(known.iter().filter(|k| **k).count(), 4 * 4);
        assert!(region_map(Region::Known, None, 5, 6).is_err());
        assert!(region_map(Region::All, None, 5, 6).unwrap().is_none());
    }
}
