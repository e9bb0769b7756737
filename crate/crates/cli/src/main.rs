use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acm_core::augment::{save_training_set, Label};
use acm_core::evalpipe::{
    average_precision, gen_synthetic, measure_fps, save_corpus, EvalReport, SynthSpec, Tier, ANNOTATIONS_FILE,
    WARMUP_FRAMES,
};
use acm_core::fuzzy::{annotate, feature_csv, parse_feature_csv, train_fuzzy, FuzzyModel};
use acm_core::imaging::{load_image, save_image, GrayImage};
use acm_core::mser::regions_to_jsonl;
use acm_core::pipeline::{
    acm_stage, fuzzy_samples, propose, seg_stage, train_cnn_corpus, Corpus, Detector, FrameResult, ProposalMode,
    RunConfig,
};
use acm_core::tinycnn::{load_model, save_model, training_log_csv};
use acm_core::Cnn;
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "acm", version, about = "Vehicle detection with augmented confidence maps")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for mining, training and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Directory holding the images named by the annotations.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// JSON-lines annotations or a KITTI label directory.
    #[arg(long)]
    annotations: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// CNN model file ("ACM1").
    #[arg(long)]
    model: Option<PathBuf>,
    /// Fuzzy model JSON.
    #[arg(long)]
    fuzzy: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TierArg {
    Easy,
    Medium,
    Hard,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mser,
    MrMser,
    Acm,
}

impl From<ModeArg> for ProposalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mser => ProposalMode::Mser,
            ModeArg::MrMser => ProposalMode::MrMser,
            ModeArg::Acm => ProposalMode::Acm,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with exact annotations.
    GenSynth {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, value_enum, default_value_t = TierArg::Easy)]
        tier: TierArg,
    },
    /// Mine patches from an annotated corpus and train the CNN.
    TrainCnn {
        #[command(flatten)]
        data: DataArgs,
        /// Also write the mined patches and manifest here.
        #[arg(long)]
        save_samples: Option<PathBuf>,
    },
    /// Fit the fuzzy blob classifier from a corpus or a feature CSV.
    TrainFuzzy {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
        /// Labelled features (mean,std,fill,label) instead of a corpus.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Detect vehicles in images.
    Detect {
        images: Vec<PathBuf>,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long, value_enum)]
        proposals: Option<ModeArg>,
        /// Write a colour overlay per image.
        #[arg(long)]
        overlay: bool,
        /// Write the confidence map of each image as PGM.
        #[arg(long)]
        dump_acm: bool,
    },
    /// Average precision of detections (from a file or a live run).
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
        /// Output of `detect`; without it the detector runs on the corpus.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, value_enum)]
        proposals: Option<ModeArg>,
        /// Evaluate all three proposal modes.
        #[arg(long)]
        ablation: bool,
        /// Measure frames per second of the live detector.
        #[arg(long)]
        timing: bool,
    },
    /// Write the MSER regions of one image.
    Proposals {
        image: PathBuf,
        #[arg(long, value_enum)]
        proposals: Option<ModeArg>,
    },
    /// Write the confidence map of one image.
    AcmDump {
        image: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Write the rough-entropy table and mask of a confidence map image.
    RoughsegDump { acm: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ACM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| anyhow!("ACM_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.mining_seed = s;
        cfg.train.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.output = Some(o.clone());
    }
    let out = cfg.paths.output.clone().unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::GenSynth { n, tier } => {
            let tier = match tier {
                TierArg::Easy => Tier::Easy,
                TierArg::Medium => Tier::Medium,
                TierArg::Hard => Tier::Hard,
            };
            let spec = SynthSpec::tier(tier);
            let seed = cli.seed.unwrap_or(0);
            let scenes = gen_synthetic(n, seed, &spec)?;
            save_corpus(&out, &scenes)?;
            write_json(&out.join("synth.json"), &json!({ "seed": seed, "n": n, "spec": spec }))?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::TrainCnn { data, save_samples } => {
            apply_data(&mut cfg, &data);
            cfg.validate()?;
            let corpus = load_corpus(&cfg)?;
            let (model, mined) = train_cnn_corpus(&corpus, &cfg)?;
            for s in &mined.skipped {
                eprintln!("skipped {}: {}", s.image, s.reason);
            }
            if let Some(dir) = save_samples {
                save_training_set(&dir, &mined.samples)?;
            }
            create_dir(&out)?;
            let model_path = cfg.paths.model.clone().unwrap_or_else(|| out.join("model.acm"));
            save_model(&model, &model_path)?;
            fs::write(out.join("training_log.csv"), training_log_csv(&model.meta))?;
            let last = model.meta.last();
            write_json(
                &out.join("train_report.json"),
                &json!({
                    "config": cfg.echo(),
                    "model": model_path,
                    "samples": mined.samples.len(),
                    "skipped": mined.skipped,
                    "final": last,
                }),
            )?;
            if let Some(l) = last {
                println!(
                    "trained {} epochs on {} samples: val_loss {:.4} val_acc {:.4}",
                    l.epoch,
                    mined.samples.len(),
                    l.val_loss,
                    l.val_acc
                );
            }
            println!("model written to {}", model_path.display());
        }
        Command::TrainFuzzy { data, models, features } => {
            apply_data(&mut cfg, &data);
            apply_models(&mut cfg, &models);
            cfg.validate()?;
            let samples = match features {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    parse_feature_csv(&text, &p)?
                }
                None => {
                    let cnn = load_cnn(&cfg)?;
                    let corpus = load_corpus(&cfg)?;
                    fuzzy_samples(&corpus, &cnn, &cfg)?
                }
            };
            let model = train_fuzzy(&samples, cfg.feature_set)?;
            create_dir(&out)?;
            let path = cfg.paths.fuzzy_model.clone().unwrap_or_else(|| out.join("fuzzy.json"));
            model.save(&path)?;
            fs::write(out.join("fuzzy_features.csv"), feature_csv(&samples))?;
            write_json(
                &out.join("fuzzy_report.json"),
                &json!({ "config": cfg.echo(), "model": path, "samples": samples.len() }),
            )?;
            let v = samples.iter().filter(|s| s.1 == Label::Vehicle).count();
            println!(
                "fuzzy model from {v} vehicle and {} background samples written to {}",
                samples.len() - v,
                path.display()
            );
        }
        Command::Detect {
            images,
            models,
            proposals,
            overlay,
            dump_acm,
        } => {
            apply_models(&mut cfg, &models);
            if let Some(m) = proposals {
                cfg.proposals = m.into();
            }
            if images.is_empty() {
                bail!("no input images");
            }
            let det = detector(&cfg)?;
            create_dir(&out)?;
            let mut frames = Vec::with_capacity(images.len());
            let mut failed = Vec::new();
            for path in &images {
                let id = file_name(path);
                let frame = load_image(path).and_then(|img| det.detect(&img, &id).map(|f| (img, f)));
                match frame {
                    Ok((img, f)) => {
                        let stem = file_stem(path);
                        if overlay {
                            let boxes: Vec<_> = f.result.blobs.iter().flat_map(|b| b.boxes.clone()).collect();
                            let labels: Vec<_> = f
                                .result
                                .blobs
                                .iter()
                                .flat_map(|b| std::iter::repeat_n(b.label.hard, b.boxes.len()))
                                .collect();
                            let (boxes, labels) = if f.result.blobs.is_empty() {
                                let b: Vec<_> = f.result.detections.iter().map(|d| d.bbox).collect();
                                let n = b.len();
                                (b, vec![Label::Vehicle; n])
                            } else {
                                (boxes, labels)
                            };
                            annotate(&img, &boxes, &labels).save(out.join(format!("{stem}_overlay.png")))?;
                        }
                        if dump_acm {
                            if let Some(acm) = &f.acm {
                                save_image(acm, out.join(format!("{stem}_acm.pgm")))?;
                            }
                        }
                        frames.push(f.result);
                    }
                    Err(e) => {
                        eprintln!("{}: {e}", path.display());
                        failed.push(id.clone());
                        frames.push(FrameResult {
                            image: id,
                            error: Some(e.to_string()),
                            ..FrameResult::default()
                        });
                    }
                }
            }
            let path = out.join("detections.json");
            write_json(&path, &json!({ "config": cfg.echo(), "frames": frames, "failed": failed }))?;
            let n: usize = frames.iter().map(|f| f.detections.len()).sum();
            println!("{n} detections in {} images written to {}", frames.len(), path.display());
            if !failed.is_empty() {
                eprintln!("{} of {} images failed", failed.len(), images.len());
            }
        }
        Command::Eval {
            data,
            models,
            detections,
            proposals,
            ablation,
            timing,
        } => {
            apply_data(&mut cfg, &data);
            apply_models(&mut cfg, &models);
            if let Some(m) = proposals {
                cfg.proposals = m.into();
            }
            cfg.validate()?;
            let corpus = load_corpus(&cfg)?;
            create_dir(&out)?;
            let mut reports = Vec::new();
            if let Some(p) = detections {
                let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                let v: serde_json::Value =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                let frames: Vec<FrameResult> = serde_json::from_value(v["frames"].clone())
                    .with_context(|| format!("{} has no frames list", p.display()))?;
                let dets: Vec<_> = frames.into_iter().flat_map(|f| f.detections).collect();
                let mut r = average_precision(&dets, &corpus.annotations, cfg.iou_thresh, cfg.interpolation)?;
                r.config = Some(json!({ "run": cfg.echo(), "detections": v["config"].clone() }));
                reports.push(("file".to_string(), r));
            } else {
                let modes = if ablation {
                    vec![ProposalMode::Mser, ProposalMode::MrMser, ProposalMode::Acm]
                } else {
                    vec![cfg.proposals]
                };
                for mode in modes {
                    let mut c = cfg.clone();
                    c.proposals = mode;
                    let det = detector(&c)?;
                    let frames = acm_core::pipeline::detect_corpus(&det, &corpus)?;
                    let dets: Vec<_> = frames.into_iter().flat_map(|f| f.detections).collect();
                    let mut r = average_precision(&dets, &corpus.annotations, c.iou_thresh, c.interpolation)?;
                    if timing {
                        let ids: Vec<(&GrayImage, &str)> = corpus
                            .images
                            .iter()
                            .zip(&corpus.annotations)
                            .map(|(i, a)| (i, a.image_id.as_str()))
                            .collect();
                        r.throughput = Some(measure_fps(&ids, WARMUP_FRAMES, |(img, id)| det.detect(img, id))?);
                    }
                    r.config = Some(c.echo());
                    reports.push((mode_name(mode).to_string(), r));
                }
            }
            print_reports(&reports);
            let body: Vec<_> = reports.iter().map(|(m, r)| json!({ "mode": m, "report": r })).collect();
            write_json(&out.join("eval_report.json"), &json!({ "config": cfg.echo(), "results": body }))?;
        }
        Command::Proposals { image, proposals } => {
            let mode = proposals.map_or(ProposalMode::MrMser, ProposalMode::from);
            cfg.validate()?;
            let img = load_image(&image)?;
            let regions = propose(&img, &cfg.mser, mode)?;
            create_dir(&out)?;
            let path = out.join(format!("{}_regions.jsonl", file_stem(&image)));
            let header = serde_json::to_string(&json!({ "config": cfg.echo(), "mode": mode_name(mode) }))?;
            fs::write(&path, format!("{header}\n{}", regions_to_jsonl(&regions)?))?;
            println!("{} regions written to {}", regions.len(), path.display());
        }
        Command::AcmDump { image, models } => {
            apply_models(&mut cfg, &models);
            cfg.validate()?;
            let cnn = load_cnn(&cfg)?;
            let img = load_image(&image)?;
            let stage = acm_stage(&img, &cnn, &cfg)?;
            create_dir(&out)?;
            let stem = file_stem(&image);
            save_image(&stage.acm, out.join(format!("{stem}_acm.pgm")))?;
            write_json(
                &out.join(format!("{stem}_acm.json")),
                &json!({ "config": cfg.echo(), "regions": stage.regions.len(), "proposals": stage.proposals.len() }),
            )?;
            println!("confidence map of {} written to {}", image.display(), out.display());
        }
        Command::RoughsegDump { acm } => {
            cfg.validate()?;
            let img = load_image(&acm)?;
            let seg = seg_stage(&img, &cfg);
            create_dir(&out)?;
            let stem = file_stem(&acm);
            fs::write(out.join(format!("{stem}_rough.csv")), seg.table.to_csv())?;
            seg.mask.save_pgm(out.join(format!("{stem}_mask.pgm")))?;
            write_json(
                &out.join(format!("{stem}_rough.json")),
                &json!({ "config": cfg.echo(), "t_star": seg.table.t_star, "blobs": seg.blobs.len() }),
            )?;
            println!("t* = {}, {} blobs", seg.table.t_star, seg.blobs.len());
        }
    }
    Ok(())
}

fn mode_name(m: ProposalMode) -> &'static str {
    match m {
        ProposalMode::Mser => "mser",
        ProposalMode::MrMser => "mr-mser",
        ProposalMode::Acm => "acm",
    }
}

fn print_reports(reports: &[(String, EvalReport)]) {
    if let [(_, r)] = reports {
        print!("{}", r.table());
        return;
    }
    println!("{:<10} {:>8} {:>6} {:>6} {:>6}", "proposals", "AP", "TP", "FP", "FN");
    for (m, r) in reports {
        println!("{m:<10} {:>8.4} {:>6} {:>6} {:>6}", r.ap, r.tp, r.fp, r.fn_count);
    }
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    if let Some(p) = &d.dataset {
        cfg.paths.dataset = Some(p.clone());
    }
    if let Some(p) = &d.annotations {
        cfg.paths.annotations = Some(p.clone());
    }
}

fn apply_models(cfg: &mut RunConfig, m: &ModelArgs) {
    if let Some(p) = &m.model {
        cfg.paths.model = Some(p.clone());
    }
    if let Some(p) = &m.fuzzy {
        cfg.paths.fuzzy_model = Some(p.clone());
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let root = cfg
        .paths
        .dataset
        .clone()
        .ok_or_else(|| anyhow!("no dataset directory (use --dataset or paths.dataset)"))?;
    let ann = cfg.paths.annotations.clone().unwrap_or_else(|| root.join(ANNOTATIONS_FILE));
    if !ann.exists() {
        bail!("annotation file {} not found", ann.display());
    }
    let corpus = Corpus::load(&ann, &root)?;
    if corpus.is_empty() {
        bail!("{} lists no images", ann.display());
    }
    Ok(corpus)
}

fn require(p: &Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf> {
    let p = p.clone().ok_or_else(|| anyhow!("no {what} given (use {flag})"))?;
    if !p.is_file() {
        bail!("{what} {} not found", p.display());
    }
    Ok(p)
}

fn load_cnn(cfg: &RunConfig) -> Result<Cnn> {
    Ok(load_model(require(&cfg.paths.model, "CNN model", "--model")?)?)
}

fn detector(cfg: &RunConfig) -> Result<Detector> {
    if cfg.proposals != ProposalMode::Acm {
        return Ok(Detector::new(cfg.clone(), None, None)?);
    }
    let cnn = load_cnn(cfg)?;
    let fuzzy = FuzzyModel::load(require(&cfg.paths.fuzzy_model, "fuzzy model", "--fuzzy")?)?;
    Ok(Detector::new(cfg.clone(), Some(cnn), Some(fuzzy))?)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}
