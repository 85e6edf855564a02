//! Command-line surface.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bbox::BBox;
use crate::config::RunConfig;
use crate::eval::{evaluate_sequence, mean_curve, write_curve_csv, SequenceMetrics};
use crate::experiment::{
    corpus_metrics, ground_truth, mean_success_auc, reacquisition_rate, sequence_seed, track_corpus, train_gpg_model,
    train_salnet_model, Models, Variant,
};
use crate::gpgnet::{evaluate_attention, AttentionMap, GpgNet};
use crate::image::Frame;
use crate::language::Vocabulary;
use crate::numerics::ParamStore;
use crate::oracles::gradient_suite;
use crate::salnet::{write_loss_csv, Salnet};
use crate::synth::{corpus_vocabulary, generate_corpus, load_split, CorpusConfig, Sequence};
use crate::tracker::{read_track_csv, write_track_csv, AttentionSource, TrackRecord, Tracker};
use crate::{Error, Result};

pub const LAMBDA_SWEEP: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0];
pub const NODE_SWEEP: [usize; 5] = [20, 28, 32, 43, 50];

#[derive(Debug, Parser)]
#[command(name = "langtrack", version, about = "Language-guided visual tracking on synthetic video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options every experiment command accepts.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat TOML file with any run-configuration keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Corpus root containing `train/`, `test/` and `vocab.txt`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SeedArg {
    #[arg(long, required = true)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 40)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the proposal network on the training split.
    TrainSalnet {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration losses as CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Train the attention network on the training split.
    TrainGpgnet {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
        /// Report held-out attention quality on the test split.
        #[arg(long)]
        evaluate: bool,
    },
    /// Track one sequence directory or every sequence under a directory.
    Track {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        salnet: PathBuf,
        #[arg(long)]
        gpgnet: Option<PathBuf>,
        /// Sequence or split directory; defaults to the corpus test split.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Local candidates only.
        #[arg(long, group = "variant")]
        local_only: bool,
        /// Attention from the target patch alone.
        #[arg(long, group = "variant")]
        target_only: bool,
        /// Same as `--target-only`.
        #[arg(long, group = "variant")]
        no_language: bool,
        /// Attention from the sentence alone.
        #[arg(long, group = "variant")]
        language_only: bool,
        /// Write per-candidate JSON lines next to each CSV.
        #[arg(long)]
        debug: bool,
        /// Write per-frame PNG overlays of the box and attention.
        #[arg(long)]
        overlay: bool,
    },
    /// Score tracking CSVs against ground truth.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory of `<sequence>.csv` files.
        #[arg(long)]
        tracks: PathBuf,
        /// Ground-truth split directory; defaults to the corpus test split.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every finite-difference gradient oracle.
    Gradcheck,
    /// Sweep the triplet weight and the node count.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
        /// Track with attention proposals from this network.
        #[arg(long)]
        gpgnet: Option<PathBuf>,
        /// Only the first `limit` test sequences.
        #[arg(long)]
        limit: Option<usize>,
    },
}

impl ConfigArgs {
    fn load(&self, seed: Option<u64>) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(corpus) = &self.corpus {
            overrides.push(format!("corpus={:?}", corpus.display().to_string()));
        }
        if let Some(seed) = seed {
            overrides.push(format!("seed={seed}"));
        }
        let cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        log::debug!("run config:\n{}", cfg.to_toml()?);
        Ok(cfg)
    }
}

impl Command {
    fn variant(local_only: bool, target_only: bool, no_language: bool, language_only: bool) -> Variant {
        if local_only {
            Variant::LocalOnly
        } else if target_only || no_language {
            Variant::TargetOnly
        } else if language_only {
            Variant::LanguageOnly
        } else {
            Variant::Full
        }
    }
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let path = cfg.corpus.join("vocab.txt");
    if path.is_file() {
        Vocabulary::load(&path)
    } else {
        Ok(corpus_vocabulary())
    }
}

fn load_sequences(path: &Path) -> Result<Vec<Sequence>> {
    if path.join("groundtruth.csv").is_file() {
        Ok(vec![Sequence::load(path)?])
    } else {
        load_split(path)
    }
}

fn nonempty(seqs: Vec<Sequence>, path: &Path) -> Result<Vec<Sequence>> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument(format!("no sequences under {}", path.display())));
    }
    Ok(seqs)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::file(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, train, test, frames, seed } => {
            let cfg = CorpusConfig {
                train_sequences: train,
                test_sequences: test,
                train_frames: frames,
                test_frames: frames,
                seed,
                ..Default::default()
            };
            generate_corpus(&out, &cfg)?;
            println!("wrote {train} training and {test} test sequences to {}", out.display());
        }
        Command::TrainSalnet { cfg, seed, out, loss_csv } => {
            let rc = cfg.load(Some(seed.seed))?;
            let vocab = load_vocab(&rc)?;
            let dir = rc.corpus.join("train");
            let train = nonempty(load_split(&dir)?, &dir)?;
            let (net, store, history) = train_salnet_model(&train, &vocab, rc.salnet_config(), &rc.salnet_train_config())?;
            net.save(&out, &store)?;
            if let Some(path) = loss_csv {
                write_loss_csv(&path, &history)?;
            }
            if let (Some(first), Some(last)) = (history.first(), history.last()) {
                println!("salnet loss {:.4} -> {:.4} over {} iterations", first.total, last.total, history.len());
            }
        }
        Command::TrainGpgnet { cfg, seed, out, evaluate } => {
            let rc = cfg.load(Some(seed.seed))?;
            let vocab = load_vocab(&rc)?;
            let dir = rc.corpus.join("train");
            let train = nonempty(load_split(&dir)?, &dir)?;
            let (net, store, report) = train_gpg_model(&train, &vocab, rc.gpg_config(vocab.len()), &rc.gpg_train_config())?;
            net.save(&out, &store)?;
            if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
                println!("gpgnet loss {first:.4} -> {last:.4} over {} steps", report.steps);
            }
            if evaluate {
                let test = load_split(&rc.corpus.join("test"))?;
                let ev = evaluate_attention(&net, &store, &test, &vocab, rc.tau)?;
                println!("held-out attention: mean IoU {:.4} over {} frames, target wins {:.4}", ev.mean_iou, ev.frames, ev.win_rate());
            }
        }
        Command::Track { cfg, seed, salnet, gpgnet, input, out, local_only, target_only, no_language, language_only, debug, overlay } => {
            let rc = cfg.load(Some(seed.seed))?;
            let variant = Command::variant(local_only, target_only, no_language, language_only);
            let vocab = load_vocab(&rc)?;
            let input = input.unwrap_or_else(|| rc.corpus.join("test"));
            let seqs = nonempty(load_sequences(&input)?, &input)?;
            let (net, store) = Salnet::load(&salnet)?;
            let gpg = gpgnet.as_deref().map(GpgNet::load).transpose()?;
            if variant != Variant::LocalOnly && gpg.is_none() {
                log::warn!("no attention network given; tracking with local candidates only");
            }
            let variant = if gpg.is_none() { Variant::LocalOnly } else { variant };
            let gpg = gpg.and_then(|(n, s)| variant.attention_net(&n).map(|n| (n, s)));
            create_dir(&out)?;
            let tcfg = rc.tracker_config();
            for (i, seq) in seqs.iter().enumerate() {
                let attention = gpg.as_ref().map(|(net, store)| AttentionSource { net, store });
                let records = track_one(&net, &store, attention, &tcfg, seq, &vocab, sequence_seed(seed.seed, i), &out, debug, overlay)?;
                write_track_csv(File::create(out.join(format!("{}.csv", seq.name)))?, &records)?;
                let pred: Vec<BBox> = records.iter().map(|r| r.bbox).collect();
                let (m, _, _) = evaluate_sequence(&seq.name, &pred, &ground_truth(seq), seq.spec.width)?;
                println!("{}: success AUC {:.4}, precision@20 {:.4}", seq.name, m.success_auc, m.precision_at_20);
            }
        }
        Command::Eval { cfg, tracks, input, out } => {
            let rc = cfg.load(None)?;
            let input = input.unwrap_or_else(|| rc.corpus.join("test"));
            let seqs = nonempty(load_sequences(&input)?, &input)?;
            create_dir(&out)?;
            let mut metrics = Vec::new();
            let (mut successes, mut precisions) = (Vec::new(), Vec::new());
            let mut all_tracks = Vec::new();
            let mut scored = Vec::new();
            for seq in &seqs {
                let path = tracks.join(format!("{}.csv", seq.name));
                if !path.is_file() {
                    log::warn!("{}: no track file, skipped", seq.name);
                    continue;
                }
                let records = read_track_csv(&path)?;
                let pred: Vec<BBox> = records.iter().map(|r| r.bbox).collect();
                let (m, s, p) = evaluate_sequence(&seq.name, &pred, &ground_truth(seq), seq.spec.width)?;
                metrics.push(m);
                successes.push(s);
                precisions.push(p);
                all_tracks.push(records);
                scored.push(seq.clone());
            }
            let (Some(success), Some(precision)) = (mean_curve(&successes), mean_curve(&precisions)) else {
                return Err(Error::InvalidArgument(format!("no track files under {}", tracks.display())));
            };
            write_curve_csv(&out.join("success.csv"), "iou_threshold", &success)?;
            write_curve_csv(&out.join("precision.csv"), "distance_px", &precision)?;
            write_metrics_csv(&out.join("sequences.csv"), &metrics)?;
            println!("sequences {}", metrics.len());
            println!("success AUC {:.4}", success.auc());
            println!("precision@20 {:.4}", precision.values[crate::eval::PRECISION_HEADLINE_PX]);
            println!("re-acquisition rate {:.4}", reacquisition_rate(&scored, &all_tracks));
        }
        Command::Gradcheck => {
            let mut failed = 0;
            for r in gradient_suite()? {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:4} {:32} rel error {:.3e} (worst {}, {} coords)",
                    r.name, r.report.max_rel_error, r.report.worst_param, r.report.coordinates_checked
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::NonFinite(format!("{failed} gradient oracles above tolerance")));
            }
        }
        Command::Ablate { cfg, seed, out, gpgnet, limit } => {
            let rc = cfg.load(Some(seed.seed))?;
            ablate(&rc, &out, gpgnet.as_deref(), limit)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn track_one(
    salnet: &Salnet,
    store: &ParamStore,
    attention: Option<AttentionSource<'_>>,
    config: &crate::tracker::TrackerConfig,
    seq: &Sequence,
    vocab: &Vocabulary,
    seed: u64,
    out: &Path,
    debug: bool,
    overlay: bool,
) -> Result<Vec<TrackRecord>> {
    let config = crate::tracker::TrackerConfig { use_global: attention.is_some(), ..config.clone() };
    let init = seq.initial_box()?;
    let mut tracker = Tracker::init(salnet, store, attention, config, &seq.frames[0], init, &seq.sentence, vocab, seed)?;
    let mut debug_out = if debug {
        Some(BufWriter::new(File::create(out.join(format!("{}.jsonl", seq.name)))?))
    } else {
        None
    };
    let overlay_dir = out.join(&seq.name);
    if overlay {
        create_dir(&overlay_dir)?;
        draw_overlay(&seq.frames[0], &init, None).save_png(&overlay_dir.join(format!("{:06}.png", 0)))?;
    }
    let mut records = vec![TrackRecord { frame: 0, bbox: init, score: 1.0, provenance: "init".into() }];
    for (t, frame) in seq.frames.iter().enumerate().skip(1) {
        let sink = debug_out.as_mut().map(|w| w as &mut dyn Write);
        let r = tracker.step(frame, sink)?;
        if overlay {
            draw_overlay(frame, &r.bbox, tracker.last_attention()).save_png(&overlay_dir.join(format!("{t:06}.png")))?;
        }
        records.push(TrackRecord {
            frame: r.frame,
            bbox: r.bbox,
            score: r.score,
            provenance: r.provenance.map_or_else(|| "none".to_string(), |p| p.to_string()),
        });
    }
    if let Some(mut w) = debug_out {
        w.flush()?;
    }
    Ok(records)
}

/// Frame with attention blended into the red channel and the box outlined in green.
fn draw_overlay(frame: &Frame, bbox: &BBox, attention: Option<&AttentionMap>) -> Frame {
    let mut img = frame.clone();
    let (w, h) = (frame.width(), frame.height());
    if let Some(map) = attention {
        for y in 0..h {
            for x in 0..w {
                let [r, g, b] = img.pixel(x, y);
                let a = map.at(x, y).clamp(0.0, 1.0);
                let red = (f64::from(r) * (1.0 - a) + 255.0 * a).round() as u8;
                img.set_pixel(x, y, [red, g, b]);
            }
        }
    }
    if let Some(b) = bbox.clip_to_frame(w, h) {
        let (x0, y0) = (b.x.floor() as usize, b.y.floor() as usize);
        let x1 = (b.right().ceil() as usize).saturating_sub(1).min(w - 1);
        let y1 = (b.bottom().ceil() as usize).saturating_sub(1).min(h - 1);
        for x in x0..=x1 {
            img.set_pixel(x, y0, [0, 255, 0]);
            img.set_pixel(x, y1, [0, 255, 0]);
        }
        for y in y0..=y1 {
            img.set_pixel(x0, y, [0, 255, 0]);
            img.set_pixel(x1, y, [0, 255, 0]);
        }
    }
    img
}

fn write_metrics_csv(path: &Path, metrics: &[SequenceMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains one proposal network per sweep value and tracks the test split.
fn ablate(rc: &RunConfig, out: &Path, gpgnet: Option<&Path>, limit: Option<usize>) -> Result<()> {
    let vocab = load_vocab(rc)?;
    let train_dir = rc.corpus.join("train");
    let train = nonempty(load_split(&train_dir)?, &train_dir)?;
    let test_dir = rc.corpus.join("test");
    let mut test = nonempty(load_split(&test_dir)?, &test_dir)?;
    if let Some(n) = limit {
        test.truncate(n);
    }
    let gpg = gpgnet.map(GpgNet::load).transpose()?;
    let variant = if gpg.is_some() { Variant::Full } else { Variant::LocalOnly };
    let seed = rc.require_seed()?;
    create_dir(out)?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    w.write_record(["parameter", "value", "success_auc", "final_loss"])?;
    let mut runs: Vec<(&str, String, RunConfig)> = Vec::new();
    for lambda in LAMBDA_SWEEP {
        runs.push(("lambda", lambda.to_string(), RunConfig { lambda, ..rc.clone() }));
    }
    for nodes in NODE_SWEEP {
        runs.push(("nodes", nodes.to_string(), RunConfig { nodes, ..rc.clone() }));
    }
    for (param, value, cfg) in runs {
        cfg.validate()?;
        let (net, store, history) = train_salnet_model(&train, &vocab, cfg.salnet_config(), &cfg.salnet_train_config())?;
        let models = Models {
            salnet: &net,
            salnet_store: &store,
            attention: gpg.as_ref().map(|(n, s)| (n, s)),
            vocab: &vocab,
        };
        let tracks = track_corpus(&models, &cfg.tracker_config(), variant, &test, seed)?;
        let auc = mean_success_auc(&corpus_metrics(&test, &tracks)?);
        let loss = history.last().map_or(f64::NAN, |r| r.total);
        println!("{param} = {value}: success AUC {auc:.4}, final loss {loss:.4}");
        w.write_record([param.to_string(), value, format!("{auc:.6}"), format!("{loss:.6}")])?;
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn seed_is_mandatory_for_track_and_training() {
        for cmd in [
            vec!["langtrack", "track", "--salnet", "s", "--out", "o"],
            vec!["langtrack", "train-salnet", "--out", "o"],
            vec!["langtrack", "train-gpgnet", "--out", "o"],
        ] {
            assert!(Cli::try_parse_from(&cmd).is_err(), "{cmd:?}");
            let mut with_seed = cmd.clone();
            with_seed.extend(["--seed", "7"]);
            assert!(Cli::try_parse_from(&with_seed).is_ok(), "{with_seed:?}");
        }
    }

    #[test]
    fn variant_flags_are_exclusive() {
        let base = ["langtrack", "track", "--salnet", "s", "--out", "o", "--seed", "1"];
        let mut both = base.to_vec();
        both.extend(["--local-only", "--target-only"]);
        assert!(Cli::try_parse_from(&both).is_err());
        assert_eq!(Command::variant(false, false, true, false), Variant::TargetOnly);
        assert_eq!(Command::variant(false, false, false, false), Variant::Full);
    }

    #[test]
    fn overlay_marks_box_and_attention() {
        let frame = Frame::new(8, 6);
        let map = AttentionMap::new(8, 6, vec![1.0; 48], 0).unwrap();
        let img = draw_overlay(&frame, &BBox::new(2.0, 1.0, 3.0, 3.0), Some(&map));
        assert_eq!(img.pixel(2, 1), [0, 255, 0]);
        assert_eq!(img.pixel(3, 2)[0], 255);
        assert_eq!(img.pixel(7, 5)[0], 255);
    }
}
