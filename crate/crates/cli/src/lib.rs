//! `evreloc` command line: dataset conversion and synthesis, training,
//! evaluation and the event-fraction robustness sweep.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use evreloc_core::eval::{evaluate, robustness_experiment, DEFAULT_FRACTIONS};
use evreloc_core::event_image::window_image;
use evreloc_core::event_io::{parse_events, parse_poses, window_events, DEFAULT_SENSOR_H, DEFAULT_SENSOR_W};
use evreloc_core::pipeline::{
    load_checkpoint, load_recording, save_checkpoint, train_with, SplitKind, TrainConfig, EVENTS_FILE, GROUNDTRUTH_FILE,
};
use evreloc_core::synth::{generate, SceneConfig};

pub mod fetch;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "evreloc", version, about = "Event-camera 6DOF relocalization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render every groundtruth window as a PGM event image plus an index CSV.
    Convert {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only the most recent fraction of each window's events.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = DEFAULT_SENSOR_W)]
        width: usize,
        #[arg(long, default_value_t = DEFAULT_SENSOR_H)]
        height: usize,
    },
    /// Generate a synthetic wireframe recording (events.txt, groundtruth.txt).
    Synth {
        /// Scene JSON; the built-in desk scene when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split of a recording and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training JSON; defaults for every missing field.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of a recording.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["random", "novel"], default_value = "random")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
        /// `.csv` for per-sample rows, anything else for a JSON report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Median errors on the test split when only a fraction of each
    /// window's events is kept, for fractions 0.1 to 1.0.
    Robustness {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["random", "novel"], default_value = "random")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Download dataset files listed in a JSON manifest.
    Fetch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Numeric failures get their own code; every other failure is a data error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numeric = err
        .chain()
        .filter_map(|c| c.downcast_ref::<evreloc_core::Error>())
        .any(evreloc_core::Error::is_numeric);
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Convert {
            events,
            poses,
            out,
            fraction,
            width,
            height,
        } => convert(&events, &poses, &out, fraction, width, height),
        Command::Synth { config, out } => synth(config.as_deref(), &out),
        Command::Train { data, config, out } => train(&data, config.as_deref(), &out),
        Command::Eval {
            ckpt,
            data,
            split,
            seed,
            train_fraction,
            out,
        } => eval(&ckpt, &data, parse_split(&split)?, seed, train_fraction, &out),
        Command::Robustness {
            ckpt,
            data,
            split,
            seed,
            train_fraction,
            out,
        } => robustness(&ckpt, &data, parse_split(&split)?, seed, train_fraction, &out),
        Command::Fetch { manifest, out } => fetch::fetch_manifest(&manifest, &out).map(|_| ()),
    }
}

fn parse_split(s: &str) -> Result<SplitKind> {
    Ok(s.parse::<SplitKind>()?)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn convert(events: &Path, poses: &Path, out: &Path, fraction: f64, width: usize, height: usize) -> Result<()> {
    let open = |p: &Path| {
        fs::File::open(p)
            .map(std::io::BufReader::new)
            .with_context(|| format!("opening {}", p.display()))
    };
    let events = parse_events(open(events)?, width, height).context("parsing events")?;
    let poses = parse_poses(open(poses)?).context("parsing groundtruth")?;
    let win = window_events(&events, &poses)?;
    let img_dir = out.join("images");
    fs::create_dir_all(&img_dir).with_context(|| format!("creating {}", img_dir.display()))?;
    let mut index = create(&out.join("index.csv"))?;
    writeln!(index, "sequence_index,image,events,t,px,py,pz,qx,qy,qz,qw")?;
    for w in &win.windows {
        let img = window_image(w, fraction, height, width)?;
        let name = format!("window_{:06}.pgm", w.sequence_index);
        img.write_pgm(create(&img_dir.join(&name))?)?;
        let l = &w.label;
        writeln!(
            index,
            "{},images/{name},{},{},{},{},{},{},{},{},{}",
            w.sequence_index,
            w.events.len(),
            l.t,
            l.p[0],
            l.p[1],
            l.p[2],
            l.q[0],
            l.q[1],
            l.q[2],
            l.q[3]
        )?;
    }
    index.flush()?;
    println!(
        "{} windows written, {} empty intervals skipped, {} events outside groundtruth",
        win.windows.len(),
        win.skipped_empty,
        win.discarded_events
    );
    Ok(())
}

fn synth(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => SceneConfig::from_json(&read_text(p)?).with_context(|| format!("scene config {}", p.display()))?,
        None => SceneConfig::default(),
    };
    let data = generate(&cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(EVENTS_FILE), data.events_text()?)?;
    fs::write(out.join(GROUNDTRUTH_FILE), data.groundtruth_text()?)?;
    fs::write(out.join("scene.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!(
        "{} poses, {} events, {}x{} sensor -> {}",
        data.poses.len(),
        data.events.len(),
        cfg.width,
        cfg.height,
        out.display()
    );
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => TrainConfig::from_json(&read_text(p)?).with_context(|| format!("train config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    let win = load_recording(data, cfg.model.input_w, cfg.model.input_h)
        .with_context(|| format!("loading recording {}", data.display()))?;
    let (train_set, test_set) = cfg.split_windows(&win.windows)?;
    println!(
        "{} training windows, {} held out ({:?} split)",
        train_set.len(),
        test_set.len(),
        cfg.split
    );
    let ckpt = train_with(&cfg, &train_set, |epoch, loss| {
        if epoch == 1 || epoch % 10 == 0 || epoch == cfg.epochs {
            println!("epoch {epoch:>5}  loss {loss:.6}");
        }
    })?;
    save_checkpoint(&ckpt, out).with_context(|| format!("writing {}", out.display()))?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn test_windows(
    ckpt: &evreloc_core::Checkpoint,
    data: &Path,
    split: SplitKind,
    seed: u64,
    train_fraction: f64,
) -> Result<Vec<evreloc_core::EventWindow>> {
    let cfg = ckpt.config();
    let win = load_recording(data, cfg.input_w, cfg.input_h)
        .with_context(|| format!("loading recording {}", data.display()))?;
    let split_cfg = TrainConfig {
        model: cfg.clone(),
        split,
        seed,
        train_fraction,
        ..TrainConfig::default()
    };
    Ok(split_cfg.split_windows(&win.windows)?.1)
}

fn eval(ckpt_path: &Path, data: &Path, split: SplitKind, seed: u64, fraction: f64, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let windows = test_windows(&ckpt, data, split, seed, fraction)?;
    let report = evaluate(&ckpt.params, &windows)?;
    let is_csv = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let mut w = create(out)?;
    if is_csv {
        report.write_csv(&mut w)?;
    } else {
        serde_json::to_writer_pretty(&mut w, &report)?;
        writeln!(w)?;
    }
    w.flush()?;
    println!(
        "{} test windows: median position {:.4} m, median orientation {:.3} deg",
        report.per_sample.len(),
        report.position.median,
        report.orientation.median
    );
    Ok(())
}

fn robustness(ckpt_path: &Path, data: &Path, split: SplitKind, seed: u64, fraction: f64, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let windows = test_windows(&ckpt, data, split, seed, fraction)?;
    if windows.is_empty() {
        bail!("no test windows");
    }
    let table = robustness_experiment(&ckpt.params, &windows, &DEFAULT_FRACTIONS)?;
    let mut w = create(out)?;
    table.write_csv(&mut w)?;
    w.flush()?;
    for r in &table.rows {
        println!(
            "fraction {:.1}: position {:.4} m, orientation {:.3} deg",
            r.fraction, r.position_median, r.orientation_median
        );
    }
    Ok(())
}
