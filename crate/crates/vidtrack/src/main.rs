use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vidtrack::config::{parse_overrides, RunConfig};
use vidtrack::core::Point2;
use vidtrack::eval::{evaluate_video, format_report, group_by_occlusion, load_badja, load_tapvid, sample_queries, write_tapvid, GroundTruthVideo, QueryProtocol};
use vidtrack::flowsup::write_flo;
use vidtrack::media::{export_trajectories, read_trajectories, save_frames};
use vidtrack::occlusion::Query;
use vidtrack::pipeline::Pipeline;
use vidtrack::synthetic::{SceneConfig, SyntheticScene};
use vidtrack::viz::{foreground_queries, render_overlays, VizOptions};
use vidtrack::{Error, Result};

#[derive(Parser)]
#[command(name = "vidtrack", version, about = "Per-video test-time-trained point tracking")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frame directory or GIF.
    #[arg(long)]
    video: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Mock backbone, and a static-scene flow when no flow directory is set.
    #[arg(long)]
    mock: bool,
    /// Config overrides after `--`, e.g. `-- --train.lr 0.005 --seed 3`.
    #[arg(last = true)]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut pairs = parse_overrides(&self.overrides)?;
        if let Some(v) = &self.video {
            pairs.push(("video".into(), v.display().to_string()));
        }
        if let Some(o) = &self.output {
            pairs.push(("output".into(), o.display().to_string()));
        }
        if self.mock {
            pairs.push(("mock".into(), "true".into()));
        }
        RunConfig::load(self.config.as_deref(), &pairs)
    }
}

#[derive(Args, Clone)]
struct QueryArgs {
    /// `x,y,frame;x,y,frame;...` at original resolution.
    #[arg(long)]
    queries: Option<String>,
    /// File with one `x,y,frame` per line.
    #[arg(long)]
    query_file: Option<PathBuf>,
    /// Ground truth (TAP-Vid JSON) to sample queries from.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Protocol::Strided)]
    protocol: Protocol,
    /// Checkpoint; defaults to `<output>/checkpoints/final.bin`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Track with the untrained tracker.
    #[arg(long)]
    untrained: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Strided,
    FirstVisible,
}

#[derive(Clone, Copy, ValueEnum)]
enum GtFormat {
    Tapvid,
    Badja,
}

#[derive(Subcommand)]
enum Command {
    /// Decode, extract features and masks, mine supervision; all cached.
    Preprocess(Common),
    /// Optimise the tracker on the video.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest periodic checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Track queries; every frame is marked visible.
    Track {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        q: QueryArgs,
    },
    /// Track queries and predict visibility by trajectory agreement.
    Visibility {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        q: QueryArgs,
    },
    /// Score predictions against ground truth; pairs are matched by order.
    Eval {
        #[arg(long = "predictions", required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long = "gt", required = true)]
        gt: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = GtFormat::Tapvid)]
        format: GtFormat,
        #[arg(long, value_enum)]
        protocol: Option<Protocol>,
        /// Also report means over three occlusion-rate buckets.
        #[arg(long)]
        group_by_occlusion: bool,
        /// Write the reports as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Draw trajectories over the frames.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only queries that start on the foreground.
        #[arg(long)]
        foreground_only: bool,
    },
    /// Write a synthetic clip with exact flow files and ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        frames: usize,
    },
}

fn parse_queries(spec: &str) -> Result<Vec<Query>> {
    spec.split([';', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty() && !s.starts_with('#'))
        .map(|s| {
            let parts: Vec<&str> = s.split(',').map(str::trim).collect();
            let bad = || Error::input(format!("query {s:?} is not x,y,frame"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let x: f64 = parts[0].parse().map_err(|_| bad())?;
            let y: f64 = parts[1].parse().map_err(|_| bad())?;
            let frame: usize = parts[2].parse().map_err(|_| bad())?;
            Ok(Query { frame, point: Point2::new(x, y) })
        })
        .collect()
}

fn protocol(p: Protocol) -> QueryProtocol {
    match p {
        Protocol::Strided => QueryProtocol::Strided(5),
        Protocol::FirstVisible => QueryProtocol::FirstVisible,
    }
}

fn load_gt(path: &Path, format: GtFormat) -> Result<GroundTruthVideo> {
    match format {
        GtFormat::Tapvid => load_tapvid(path),
        GtFormat::Badja => load_badja(path),
    }
}

fn collect_queries(q: &QueryArgs) -> Result<Vec<Query>> {
    let mut out = Vec::new();
    if let Some(s) = &q.queries {
        out.extend(parse_queries(s)?);
    }
    if let Some(f) = &q.query_file {
        out.extend(parse_queries(&std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?)?);
    }
    if let Some(g) = &q.gt {
        let gt = load_tapvid(g)?;
        out.extend(sample_queries(&gt, protocol(q.protocol)).into_iter().map(|e| Query { frame: e.frame, point: e.point }));
    }
    if out.is_empty() {
        return Err(Error::input("no queries; pass --queries, --query-file or --gt"));
    }
    Ok(out)
}

fn track(common: &Common, q: &QueryArgs, visibility: bool) -> Result<()> {
    let pipe = Pipeline::new(common.load()?);
    let queries = collect_queries(q)?;
    let (seq, pre) = pipe.preprocess()?;
    let ckpt = if q.untrained {
        None
    } else {
        let p = q.checkpoint.clone().unwrap_or_else(|| pipe.checkpoint_dir().join("final.bin"));
        if !p.is_file() {
            return Err(Error::input(format!("checkpoint {} not found; run `train` first or pass --untrained", p.display())));
        }
        Some(p)
    };
    let records = pipe.track_with(&seq, &pre, ckpt.as_deref(), &queries, visibility)?;
    let name = if visibility { "trajectories_visibility" } else { "trajectories" };
    let (csv, bin) = export_trajectories(&records, pipe.cfg.output.join(name))?;
    println!("wrote {} and {}", csv.display(), bin.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Preprocess(common) => {
            let pipe = Pipeline::new(common.load()?);
            let (seq, pre) = pipe.preprocess()?;
            let (hits, misses) = pipe.cache.stats();
            println!(
                "{}: {} frames, {}x{} grid, {} flow pairs, {} best buddies (cache: {hits} hits, {misses} computed)",
                seq.video_id(),
                seq.len(),
                pre.grid.rows,
                pre.grid.cols,
                pre.supervision.flow.len(),
                pre.supervision.dino_bb.len()
            );
        }
        Command::Train { common, resume } => {
            let pipe = Pipeline::new(common.load()?);
            let (seq, pre) = pipe.preprocess()?;
            let path = pipe.train_with(&seq, &pre, resume)?;
            println!("wrote {}", path.display());
        }
        Command::Track { common, q } => track(&common, &q, false)?,
        Command::Visibility { common, q } => track(&common, &q, true)?,
        Command::Eval { predictions, gt, format, protocol: proto, group_by_occlusion: group, json } => {
            if predictions.len() != gt.len() {
                return Err(Error::input("pass one --predictions per --gt"));
            }
            let proto = proto.map(protocol).unwrap_or(match format {
                GtFormat::Tapvid => QueryProtocol::Strided(5),
                GtFormat::Badja => QueryProtocol::FirstVisible,
            });
            let mut videos = Vec::new();
            let mut reports = Vec::new();
            for (p, g) in predictions.iter().zip(&gt) {
                let video = load_gt(g, format)?;
                let queries = sample_queries(&video, proto);
                let report = evaluate_video(&video, &queries, &read_trajectories(p)?)?;
                println!("{}", format_report(&report));
                videos.push(video);
                reports.push(report);
            }
            let mut all = reports.clone();
            if reports.len() > 1 {
                let mean = vidtrack::core::metrics::MetricReport::mean_of("mean", &reports);
                println!("{}", format_report(&mean));
                all.push(mean);
            }
            if group {
                for b in group_by_occlusion(&videos, &reports)? {
                    println!("{}", format_report(&b));
                    all.push(b);
                }
            }
            if let Some(path) = json {
                std::fs::write(&path, serde_json::to_string_pretty(&all)?).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Viz { common, predictions, out, foreground_only } => {
            let pipe = Pipeline::new(common.load()?);
            let records = read_trajectories(&predictions)?;
            let (seq, selected) = if foreground_only {
                let (seq, pre) = pipe.preprocess()?;
                let ids = foreground_queries(&records, &pre.supervision.masks, &pre.grid, &seq);
                (seq, Some(ids))
            } else {
                (pipe.load_video()?, None)
            };
            render_overlays(&seq, &records, selected.as_deref(), &out, &VizOptions::default())?;
            println!("wrote {} frames to {}", seq.len(), out.display());
        }
        Command::Synth { out, seed, frames } => {
            let scene = SyntheticScene::new(SceneConfig { seed, frames, ..Default::default() });
            let seq = scene.render()?;
            save_frames(&seq.frames, out.join("frames"))?;
            let flow_dir = out.join("flow");
            std::fs::create_dir_all(&flow_dir).map_err(|e| Error::io(&flow_dir, e))?;
            for s in 0..frames {
                for t in 0..frames {
                    if s != t {
                        write_flo(&flow_dir.join(format!("{s:05}_{t:05}.flo")), &scene.flow(s, t))?;
                    }
                }
            }
            let mut gt = scene.ground_truth(10, 10, 12.0, seed);
            gt.video_id = "frames".into();
            write_tapvid(&gt, &out.join("gt.json"))?;
            println!("wrote {} frames, flows and ground truth to {}", frames, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
