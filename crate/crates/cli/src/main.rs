//! `talkstyle` command-line front end.

mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use talkstyle::audio::{surrogate_features, AudioClip, AudioFeatureSequence};
use talkstyle::container::{read_json, write_json};
use talkstyle::data::{build_corpus, render_toy_set, ClipWindows, Manifest, Split, SplitRule, StyleGeneratorSpec, FEATURE_SEED};
use talkstyle::face_model::{lip_distance, FaceParams};
use talkstyle::lsf::{synthesize, train, Blend, LsfModel};
use talkstyle::render::{
    extract_texture, rasterize_uv, train_render, uv_texture_sampling, Frame, Framing, RenderNets, RenderSample,
};
use talkstyle::style::{
    interpolate, observation_stats, project_styles_2d, style_code, MotionSeries, StyleCode, BETA_STD, BETA_VEL_STD, POSE_VEL_STD,
};
use talkstyle::{Error, Result};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "talkstyle", version, about = "Stylized talking-face synthesis from audio")]
struct Cli {
    /// Global seed; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Style code of a motion series.
    ExtractStyle { motion: PathBuf },
    /// Motion for an audio clip (WAV or feature container) in a reference style.
    Synthesize {
        input: PathBuf,
        /// Motion container or style JSON.
        style_ref: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// One synthesis per point of a uniform grid between two styles.
    Interpolate {
        style_a: PathBuf,
        style_b: PathBuf,
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Lip distance curves of one or more motion series.
    PlotLipdist {
        #[arg(required = true)]
        motion: Vec<PathBuf>,
    },
    /// Frames for a motion series from a neutral portrait.
    Render {
        motion: PathBuf,
        portrait: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the style-specific animation generator on a corpus.
    TrainLsf { corpus: Option<PathBuf> },
    /// Train the render networks, on frames of a real sequence or on the synthetic toy set.
    TrainRender {
        #[command(flatten)]
        data: RenderDataArgs,
    },
    /// Write a synthetic corpus.
    BuildCorpus {
        /// JSON list of style generator specs; three default specs when absent.
        specs: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        clips_per_spec: usize,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, value_delimiter = ',', conflicts_with = "hold_out_clips")]
        hold_out_specs: Vec<usize>,
        #[arg(long)]
        hold_out_clips: Option<usize>,
    },
    /// Means and standard deviations of a motion series and its derivatives.
    Stats { motion: PathBuf },
    /// 2-D projection of style codes (style JSON files or a corpus directory).
    ProjectStyles {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Window stride in motion frames.
    #[arg(long, default_value_t = 16)]
    stride: usize,
    #[arg(long, default_value = "crossfade")]
    blend: Blend,
}

#[derive(Debug, Args)]
struct RenderDataArgs {
    /// Frames of the synthetic toy set when no real sequence is given.
    #[arg(long, default_value_t = 16)]
    toy_frames: usize,
    /// Motion series of a real sequence.
    #[arg(long, requires_all = ["frames", "portrait"])]
    motion: Option<PathBuf>,
    /// Directory of `frame_NNNNN.png` files, one per motion frame.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Neutral-pose portrait of the identity.
    #[arg(long)]
    portrait: Option<PathBuf>,
}

fn out_path(cli_out: &Option<PathBuf>, cfg: &RunConfig, default: &str) -> PathBuf {
    cli_out
        .clone()
        .unwrap_or_else(|| cfg.paths.outputs.clone().unwrap_or_else(|| PathBuf::from(".")).join(default))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn load_features(input: &Path) -> Result<AudioFeatureSequence> {
    require(input)?;
    if input.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
        surrogate_features(&AudioClip::read_wav(input)?, FEATURE_SEED)
    } else {
        AudioFeatureSequence::load(input)
    }
}

fn load_style(reference: &Path) -> Result<StyleCode> {
    require(reference)?;
    if reference.is_file() {
        StyleCode::load(reference)
    } else {
        style_code(&MotionSeries::load(reference)?)
    }
}

fn load_lsf(arg: &Option<PathBuf>, cfg: &RunConfig) -> Result<LsfModel> {
    let path = arg
        .clone()
        .or_else(|| cfg.paths.lsf_checkpoint.clone())
        .ok_or_else(|| Error::InvalidArgument("no LSF checkpoint given (--checkpoint or paths.lsf_checkpoint)".into()))?;
    require(&path)?;
    LsfModel::load(&path)
}

fn cmd_extract_style(motion: &Path, out: PathBuf) -> Result<()> {
    require(motion)?;
    let code = style_code(&MotionSeries::load(motion)?)?;
    code.save(&out)?;
    println!(
        "beta_std {:.6} beta_vel_std {:.6} pose_vel_std {:.6}",
        code.block_norm(BETA_STD),
        code.block_norm(BETA_VEL_STD),
        code.block_norm(POSE_VEL_STD)
    );
    Ok(())
}

fn cmd_synthesize(input: &Path, style_ref: &Path, synth: &SynthArgs, cfg: &RunConfig, out: PathBuf) -> Result<()> {
    let features = load_features(input)?;
    let style = load_style(style_ref)?;
    let model = load_lsf(&synth.checkpoint, cfg)?;
    let motion = synthesize(&model, &features, &style, synth.stride, synth.blend)?;
    motion.save(&out)?;
    println!("{} frames at {} fps -> {}", motion.len(), motion.fps(), out.display());
    Ok(())
}

fn cmd_interpolate(a: &Path, b: &Path, input: &Path, steps: usize, synth: &SynthArgs, cfg: &RunConfig, out: PathBuf) -> Result<()> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("steps must be at least 2, got {steps}")));
    }
    let (sa, sb) = (load_style(a)?, load_style(b)?);
    let features = load_features(input)?;
    let model = load_lsf(&synth.checkpoint, cfg)?;
    create_dir(&out)?;
    for i in 0..steps {
        let lam = i as f64 / (steps - 1) as f64;
        let style = interpolate(&sa, &sb, lam)?;
        let motion = synthesize(&model, &features, &style, synth.stride, synth.blend)?;
        let dir = out.join(format!("lambda_{lam:.3}"));
        motion.save(&dir)?;
        println!("lambda {lam:.3}: pose_vel_std {:.6}", style_code(&motion)?.pose_norm());
    }
    Ok(())
}

#[derive(Serialize)]
struct LipRow {
    frame: usize,
    time: f64,
    lip_distance: f64,
}

fn cmd_plot_lipdist(motions: &[PathBuf], cfg: &RunConfig, out: PathBuf) -> Result<()> {
    let basis = cfg.basis()?;
    let mut table = Vec::new();
    let mut curves = Vec::new();
    for path in motions {
        require(path)?;
        let m = MotionSeries::load(path)?;
        let mut rows = Vec::with_capacity(m.len());
        for t in 0..m.len() {
            let p = FaceParams::from_frame(m.beta().row(t), m.pose().row(t))?;
            rows.push(LipRow {
                frame: t,
                time: t as f64 / m.fps(),
                lip_distance: lip_distance(&basis, &p),
            });
        }
        curves.push(rows.iter().map(|r| (r.time, r.lip_distance)).collect::<Vec<_>>());
        table.push(json!({ "source": path.display().to_string(), "rows": rows }));
    }
    create_dir(&out)?;
    write_json(&out.join("lipdist.json"), &json!({ "series": table }))?;
    let png = out.join("lipdist.png");
    plot::line_plot(&curves, 800, 400).save(&png).map_err(Error::Image)?;
    println!("{} curves -> {}", curves.len(), png.display());
    Ok(())
}

fn cmd_render(motion: &Path, portrait: &Path, checkpoint: &Option<PathBuf>, cfg: &RunConfig, out: PathBuf) -> Result<()> {
    require(motion)?;
    let ckpt = checkpoint
        .clone()
        .or_else(|| cfg.paths.render_checkpoint.clone())
        .ok_or_else(|| Error::InvalidArgument("no render checkpoint given (--checkpoint or paths.render_checkpoint)".into()))?;
    require(&ckpt)?;
    let nets = RenderNets::load(&ckpt)?;
    let m = MotionSeries::load(motion)?;
    let portrait = Frame::read_png(portrait)?;
    let n = nets.config().image_size;
    let t = nets.config().texture_size;
    if (portrait.height(), portrait.width()) != (n, n) {
        return Err(Error::InvalidArgument(format!(
            "portrait must be {n}×{n}, got {}×{}",
            portrait.height(),
            portrait.width()
        )));
    }
    let basis = cfg.basis()?;
    let framing = Framing::for_image(n, n);
    let texture = extract_texture(&portrait, &basis, &FaceParams::neutral(), &framing, t, t)?;
    let neural = nets.texture_net_apply(&texture)?;
    create_dir(&out)?;
    let mut names = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let p = FaceParams::from_frame(m.beta().row(i), m.pose().row(i))?;
        let uv = rasterize_uv(&basis, &p, n, n, &framing)?;
        let frame = nets.translate(&uv_texture_sampling(&uv, &neural)?)?;
        let name = format!("frame_{i:05}.png");
        frame.write_png(&out.join(&name))?;
        names.push(name);
    }
    write_json(&out.join("index.json"), &json!({ "fps": m.fps(), "frames": names }))?;
    println!("{} frames -> {}", names.len(), out.display());
    Ok(())
}

fn cmd_train_lsf(corpus: &Option<PathBuf>, cfg: &RunConfig, out: PathBuf) -> Result<()> {
    let corpus = corpus
        .clone()
        .or_else(|| cfg.paths.corpus.clone())
        .ok_or_else(|| Error::InvalidArgument("no corpus given (positional argument or paths.corpus)".into()))?;
    require(&corpus)?;
    let clips = Manifest::load(&corpus)?.load_clips(&corpus, Some(Split::Train))?;
    let mut model = LsfModel::new(cfg.lsf.clone())?;
    let windows = ClipWindows::new(&clips, &cfg.lsf, 2)?;
    let report = train(&mut model, &windows, &cfg.lsf_train)?;
    model.save(&out.join("checkpoint"))?;
    report.write_jsonl(&out.join("loss.jsonl"))?;
    println!(
        "{} clips, {} windows, loss {:.5} -> {:.5}",
        clips.len(),
        talkstyle::lsf::LsfDataset::len(&windows),
        report.initial_loss().unwrap_or(f64::NAN),
        report.final_loss(50).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn real_render_samples(data: &RenderDataArgs, cfg: &RunConfig) -> Result<Option<Vec<RenderSample>>> {
    let (Some(motion), Some(frames), Some(portrait)) = (&data.motion, &data.frames, &data.portrait) else {
        return Ok(None);
    };
    for p in [motion, frames, portrait] {
        require(p)?;
    }
    let basis = cfg.basis()?;
    let n = cfg.render.image_size;
    let t = cfg.render.texture_size;
    let framing = Framing::for_image(n, n);
    let portrait = Frame::read_png(portrait)?;
    let texture = extract_texture(&portrait, &basis, &FaceParams::neutral(), &framing, t, t)?;
    let m = MotionSeries::load(motion)?;
    let mut samples = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let p = FaceParams::from_frame(m.beta().row(i), m.pose().row(i))?;
        samples.push(RenderSample {
            uv: rasterize_uv(&basis, &p, n, n, &framing)?,
            texture: texture.clone(),
            target: Frame::read_png(&frames.join(format!("frame_{i:05}.png")))?,
        });
    }
    Ok(Some(samples))
}

fn cmd_train_render(data: &RenderDataArgs, cfg: &RunConfig, out: PathBuf) -> Result<()> {
    let samples = match real_render_samples(data, cfg)? {
        Some(s) => s,
        None => {
            let set = render_toy_set(&cfg.basis()?, data.toy_frames, cfg.render.image_size, cfg.render.texture_size, cfg.seed)?;
            create_dir(&out)?;
            set.portrait.write_png(&out.join("portrait.png"))?;
            set.samples
        }
    };
    let mut nets = RenderNets::new(cfg.render.clone())?;
    let phi = cfg.perceptual(nets.dtype())?;
    let report = train_render(&mut nets, &samples, &phi, &cfg.render_train)?;
    nets.save(&out.join("checkpoint"))?;
    report.write_jsonl(&out.join("loss.jsonl"))?;
    println!(
        "{} samples, loss {:.5} -> {:.5}",
        samples.len(),
        report.initial_loss().unwrap_or(f64::NAN),
        report.final_loss(50).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn default_specs(seed: u64) -> Vec<StyleGeneratorSpec> {
    vec![
        StyleGeneratorSpec::uniform(0.2, 0.2, 0.5, seed.wrapping_mul(3)),
        StyleGeneratorSpec::uniform(0.8, 0.8, 1.0, seed.wrapping_mul(3).wrapping_add(1)),
        StyleGeneratorSpec::uniform(2.0, 3.0, 2.0, seed.wrapping_mul(3).wrapping_add(2)),
    ]
}

fn cmd_build_corpus(
    specs: &Option<PathBuf>,
    clips_per_spec: usize,
    duration: f64,
    hold_out_specs: &[usize],
    hold_out_clips: Option<usize>,
    cfg: &RunConfig,
    out: PathBuf,
) -> Result<()> {
    let specs: Vec<StyleGeneratorSpec> = match specs {
        Some(p) => read_json(p)?,
        None => default_specs(cfg.seed),
    };
    let rule = match (hold_out_specs, hold_out_clips) {
        ([], None) => SplitRule::AllTrain,
        ([], Some(n)) => SplitRule::HoldOutClips(n),
        (held, _) => SplitRule::HoldOutSpecs(held.to_vec()),
    };
    let manifest = build_corpus(&specs, clips_per_spec, duration, &rule, &out)?;
    let test = manifest.entries(Some(Split::Test)).count();
    println!("{} clips ({} train, {test} test) -> {}", manifest.clips.len(), manifest.clips.len() - test, out.display());
    Ok(())
}

fn cmd_stats(motion: &Path, out: &Option<PathBuf>) -> Result<()> {
    require(motion)?;
    let stats = observation_stats(&MotionSeries::load(motion)?)?;
    let map: serde_json::Map<String, serde_json::Value> = stats.named().iter().map(|(k, v)| (k.to_string(), json!(v.to_vec()))).collect();
    let value = serde_json::Value::Object(map);
    match out {
        Some(p) => write_json(p, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value).map_err(|e| Error::Format(e.to_string()))?),
    }
    Ok(())
}

fn cmd_project_styles(inputs: &[PathBuf], out: PathBuf) -> Result<()> {
    let mut names = Vec::new();
    let mut groups = Vec::new();
    let mut codes = Vec::new();
    for (gi, input) in inputs.iter().enumerate() {
        require(input)?;
        if input.is_dir() {
            let manifest = Manifest::load(input)?;
            for e in manifest.entries(None) {
                codes.push(StyleCode::load(&input.join(&e.path).join("style.json"))?);
                names.push(e.id.clone());
                groups.push(e.spec_index);
            }
        } else {
            codes.push(StyleCode::load(input)?);
            names.push(input.display().to_string());
            groups.push(gi);
        }
    }
    let scores = project_styles_2d(&codes)?;
    let rows: Vec<_> = names
        .iter()
        .zip(&groups)
        .zip(&scores)
        .map(|((n, g), s)| json!({ "name": n, "group": g, "x": s[0], "y": s[1] }))
        .collect();
    create_dir(&out)?;
    write_json(&out.join("projection.json"), &json!({ "points": rows }))?;
    let pts: Vec<(f64, f64, usize)> = scores.iter().zip(&groups).map(|(s, &g)| (s[0], s[1], g)).collect();
    plot::scatter(&pts, 600, 600).save(out.join("projection.png")).map_err(Error::Image)?;
    println!("{} codes -> {}", codes.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), cli.seed)?;
    let out = &cli.out;
    match &cli.command {
        Command::ExtractStyle { motion } => cmd_extract_style(motion, out_path(out, &cfg, "style.json")),
        Command::Synthesize { input, style_ref, synth } => cmd_synthesize(input, style_ref, synth, &cfg, out_path(out, &cfg, "motion")),
        Command::Interpolate {
            style_a,
            style_b,
            input,
            steps,
            synth,
        } => cmd_interpolate(style_a, style_b, input, *steps, synth, &cfg, out_path(out, &cfg, "interpolation")),
        Command::PlotLipdist { motion } => cmd_plot_lipdist(motion, &cfg, out_path(out, &cfg, "lipdist")),
        Command::Render {
            motion,
            portrait,
            checkpoint,
        } => cmd_render(motion, portrait, checkpoint, &cfg, out_path(out, &cfg, "frames")),
        Command::TrainLsf { corpus } => cmd_train_lsf(corpus, &cfg, out_path(out, &cfg, "lsf")),
        Command::TrainRender { data } => cmd_train_render(data, &cfg, out_path(out, &cfg, "render")),
        Command::BuildCorpus {
            specs,
            clips_per_spec,
            duration,
            hold_out_specs,
            hold_out_clips,
        } => cmd_build_corpus(
            specs,
            *clips_per_spec,
            *duration,
            hold_out_specs,
            *hold_out_clips,
            &cfg,
            out_path(out, &cfg, "corpus"),
        ),
        Command::Stats { motion } => cmd_stats(motion, out),
        Command::ProjectStyles { inputs } => cmd_project_styles(inputs, out_path(out, &cfg, "projection")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            match e {
                Error::Io { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
