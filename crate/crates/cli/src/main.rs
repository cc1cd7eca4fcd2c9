use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ctcseq::config::RunConfig;
use ctcseq::ctc::{Alphabet, LabelSeq};
use ctcseq::data::{read_clip, read_dataset, read_partition, read_tensor, synthesize, write_dataset};
use ctcseq::decoder::{lm_train, CharNGramModel};
use ctcseq::model::{load_checkpoint, write_checkpoint, Model, PrecomputedPrior};
use ctcseq::training::{ablate, clip_distribution, evaluate, prepare_clip_with, train, Decoder, TrainOptions};
use ctcseq::Error;

const CONFIG_ECHO: &str = "config.toml";

#[derive(Parser)]
#[command(name = "ctcseq", version, about = "Train and decode CTC letter-sequence recognizers on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n_clips: usize,
        #[arg(long)]
        out: PathBuf,
        /// TOML file whose [data] section configures the generator.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint, training log and language model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one dataset partition.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        #[arg(long, value_enum, default_value_t = DecoderArg::Greedy)]
        decoder: DecoderArg,
        #[arg(long, default_value_t = 20)]
        beam_width: usize,
        /// CHARLM file, required by beam-lm.
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        /// Directory for the per-clip report and the settings echo.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the decoded letter string of one clip.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long, value_enum, default_value_t = DecoderArg::Beam)]
        decoder: DecoderArg,
        #[arg(long, default_value_t = 20)]
        beam_width: usize,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        /// Tensor file of prior maps `[T, H, W]` used instead of the motion prior.
        #[arg(long)]
        priors: Option<PathBuf>,
    },
    /// Fit a character n-gram model on a corpus of one word per line.
    LmTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
        /// Letters in class order; defaults to the sorted letters of the corpus.
        #[arg(long)]
        alphabet: Option<String>,
        #[arg(long, default_value_t = 0.1)]
        smoothing: f64,
    },
    /// Train the loss/augmentation ablation grid and report dev accuracy.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DecoderArg {
    Greedy,
    Beam,
    BeamLm,
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::Contract(_) => "contract",
            Error::TooLarge(_) => "too-large",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "non-finite",
            Error::Io(_) => "io",
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { kind: "usage", message: message.into() }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| with_path(e, p))?,
        None => {
            let mut c = RunConfig::default();
            c.apply_env()?;
            c
        }
    };
    cfg.train.validate()?;
    Ok(cfg)
}

fn with_path(e: Error, path: &Path) -> Failure {
    let mut f = Failure::from(e);
    f.message = format!("{}: {}", path.display(), f.message);
    f
}

/// Builds a directory beside `out` and moves it into place only when complete.
fn staged_dir(out: &Path, fill: impl FnOnce(&Path) -> CliResult) -> CliResult {
    if out.exists() {
        return Err(usage(format!("{} already exists", out.display())));
    }
    let name = out
        .file_name()
        .ok_or_else(|| usage(format!("{} is not a valid output path", out.display())))?;
    let mut staging_name = std::ffi::OsString::from(".");
    staging_name.push(name);
    staging_name.push(format!(".partial-{}", std::process::id()));
    let staging = out.with_file_name(staging_name);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::create_dir_all(&staging)?;
    match fill(&staging) {
        Ok(()) => {
            fs::rename(&staging, out)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

/// Writes a single file through a temporary sibling.
fn staged_file(out: &Path, bytes: &[u8]) -> CliResult {
    let mut tmp = out.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    if let Err(e) = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, out)) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> CliResult {
    fs::write(dir.join(CONFIG_ECHO), cfg.to_toml_string()?)?;
    Ok(())
}

fn load_lm(path: Option<&Path>, decoder: DecoderArg) -> CliResult<Option<CharNGramModel>> {
    match (decoder, path) {
        (DecoderArg::BeamLm, None) => Err(usage("--decoder beam-lm requires --lm")),
        (DecoderArg::BeamLm, Some(p)) => Ok(Some(CharNGramModel::load(p).map_err(|e| with_path(e, p))?)),
        _ => Ok(None),
    }
}

fn make_decoder(kind: DecoderArg, width: usize, lm: Option<&CharNGramModel>, alpha: f64) -> CliResult<Decoder<'_>> {
    if kind != DecoderArg::Greedy && width == 0 {
        return Err(usage("--beam-width must be >= 1"));
    }
    Ok(match kind {
        DecoderArg::Greedy => Decoder::Greedy,
        DecoderArg::Beam => Decoder::Beam { width },
        DecoderArg::BeamLm => Decoder::BeamLm {
            width,
            lm: lm.expect("checked by load_lm"),
            alpha,
        },
    })
}

fn check_lm_alphabet(lm: Option<&CharNGramModel>, alphabet: &Alphabet) -> CliResult {
    match lm {
        Some(lm) if lm.alphabet() != alphabet => Err(usage(format!(
            "language model alphabet {:?} differs from checkpoint alphabet {:?}",
            lm.alphabet().as_string(),
            alphabet.as_string()
        ))),
        _ => Ok(()),
    }
}

fn cmd_synth(seed: u64, n_clips: usize, out: &Path, config: Option<&Path>) -> CliResult {
    let mut cfg = load_config(config)?;
    cfg.train.seed = seed;
    let alphabet = Alphabet::from_str_letters(&cfg.data.alphabet)?;
    cfg.data.validate(&alphabet)?;
    let split = synthesize(seed, n_clips, &alphabet, &cfg.data)?;
    staged_dir(out, |dir| {
        write_dataset(&split, dir)?;
        echo_config(dir, &cfg)
    })?;
    println!(
        "wrote {} train / {} dev / {} test clips to {}",
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

fn check_frame_size(cfg: &RunConfig, split: &ctcseq::data::DatasetSplit) -> CliResult {
    let m = &cfg.model;
    let want = [m.in_channels, m.frame_height, m.frame_width];
    for (_, clips) in split.partitions() {
        if let Some(clip) = clips.iter().find(|c| c.frames.shape()[1..] != want) {
            return Err(usage(format!(
                "clip {} has frames {:?} but the model expects {:?}",
                clip.id,
                &clip.frames.shape()[1..],
                want
            )));
        }
    }
    Ok(())
}

fn cmd_train(data: &Path, config: Option<&Path>, out: &Path) -> CliResult {
    let mut cfg = load_config(config)?;
    let split = read_dataset(data).map_err(|e| with_path(e, data))?;
    let classes = split.alphabet.len();
    if cfg.model.num_classes != 0 && cfg.model.num_classes != classes {
        return Err(usage(format!(
            "model.num_classes = {} but the dataset alphabet has {classes} letters",
            cfg.model.num_classes
        )));
    }
    cfg.model.num_classes = classes;
    cfg.model.validate()?;
    check_frame_size(&cfg, &split)?;
    let targets: Vec<LabelSeq> = split.train.iter().map(|c| c.target.clone()).collect();
    let lm = lm_train(&targets, &split.alphabet, cfg.train.lm_order, cfg.train.lm_smoothing)?;
    staged_dir(out, |dir| {
        echo_config(dir, &cfg)?;
        let model = Model::<f64>::new(cfg.model.clone(), cfg.train.seed)?;
        let mut log = String::new();
        let outcome = {
            let log = &mut log;
            let options = TrainOptions {
                dump_dir: Some(dir.to_path_buf()),
                on_epoch: Some(Box::new(move |r| {
                    eprintln!("{r}");
                    log.push_str(&format!("{r}\n"));
                })),
            };
            train(model, &split, &cfg.train, options)
        };
        let outcome = match outcome {
            Ok(o) => o,
            Err(e @ Error::NonFinite(_)) => {
                // keep the dump next to the intended output
                let keep = out.with_extension("nan-dump");
                let _ = fs::create_dir_all(&keep);
                for entry in fs::read_dir(dir)?.flatten() {
                    let _ = fs::copy(entry.path(), keep.join(entry.file_name()));
                }
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        fs::write(dir.join("train_log.tsv"), log)?;
        let mut bytes = Vec::new();
        write_checkpoint(&outcome.best_model, &split.alphabet, &mut bytes)?;
        fs::write(dir.join("model.ckpt"), bytes)?;
        let mut bytes = Vec::new();
        write_checkpoint(&outcome.final_model, &split.alphabet, &mut bytes)?;
        fs::write(dir.join("final.ckpt"), bytes)?;
        lm.save(&dir.join("lm.charlm"))?;
        println!("best epoch {} of {}; wrote {}", outcome.best_epoch, cfg.train.epochs, out.display());
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    split_name: &str,
    decoder: DecoderArg,
    beam_width: usize,
    lm_path: Option<&Path>,
    alpha: f64,
    out: Option<&Path>,
) -> CliResult {
    if !["train", "dev", "test"].contains(&split_name) {
        return Err(usage(format!("--split must be train, dev or test, not {split_name:?}")));
    }
    let lm = load_lm(lm_path, decoder)?;
    let (model, alphabet) = load_checkpoint::<f64>(ckpt).map_err(|e| with_path(e, ckpt))?;
    check_lm_alphabet(lm.as_ref(), &alphabet)?;
    let data_alphabet = ctcseq::data::read_alphabet(data).map_err(|e| with_path(e, data))?;
    if data_alphabet != alphabet {
        return Err(usage("dataset alphabet differs from checkpoint alphabet"));
    }
    let clips = read_partition(data, split_name, &alphabet).map_err(|e| with_path(e, data))?;
    let dec = make_decoder(decoder, beam_width, lm.as_ref(), alpha)?;
    let report = evaluate(&model, &clips, dec)?;
    print!("{report}");
    if let Some(out) = out {
        let settings = format!(
            "checkpoint = {:?}\ndata = {:?}\nsplit = {split_name:?}\ndecoder = {:?}\nbeam_width = {beam_width}\nlm = {:?}\nalpha = {alpha}\n",
            ckpt.display().to_string(),
            data.display().to_string(),
            decoder.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default(),
            lm_path.map(|p| p.display().to_string()).unwrap_or_default(),
        );
        let lines = report.to_lines();
        staged_dir(out, |dir| {
            fs::write(dir.join("report.tsv"), &lines)?;
            fs::write(dir.join("eval.toml"), &settings)?;
            Ok(())
        })?;
    }
    Ok(())
}

fn cmd_decode(
    ckpt: &Path,
    clip: &Path,
    decoder: DecoderArg,
    beam_width: usize,
    lm_path: Option<&Path>,
    alpha: f64,
    priors: Option<&Path>,
) -> CliResult {
    let lm = load_lm(lm_path, decoder)?;
    let (model, alphabet) = load_checkpoint::<f64>(ckpt).map_err(|e| with_path(e, ckpt))?;
    check_lm_alphabet(lm.as_ref(), &alphabet)?;
    let frames = read_clip(clip).map_err(|e| with_path(e, clip))?;
    let dist = match priors {
        None => clip_distribution(&model, &frames)?,
        Some(p) => {
            let maps = read_tensor(std::io::BufReader::new(fs::File::open(p)?))
                .and_then(|t| t.to_grid::<f64>())
                .map_err(|e| with_path(e, p))?;
            let provider = PrecomputedPrior::new(maps)?;
            let (x, pr) = prepare_clip_with(&frames, model.config(), &provider)?;
            model.distribution(&x, &pr)?
        }
    };
    let labels = make_decoder(decoder, beam_width, lm.as_ref(), alpha)?.decode(&dist)?;
    println!("{}", alphabet.decode(&labels));
    Ok(())
}

fn cmd_lm_train(corpus: &Path, order: usize, out: &Path, alphabet: Option<&str>, smoothing: f64) -> CliResult {
    let text = fs::read_to_string(corpus).map_err(|e| with_path(e.into(), corpus))?;
    let words: Vec<&str> = text.lines().map(str::trim).filter(|w| !w.is_empty()).collect();
    let alphabet = match alphabet {
        Some(a) => Alphabet::from_str_letters(a)?,
        None => {
            let mut letters: Vec<char> = words.iter().flat_map(|w| w.chars()).collect();
            letters.sort_unstable();
            letters.dedup();
            Alphabet::new(letters)?
        }
    };
    let encoded: Vec<LabelSeq> = words.iter().map(|w| alphabet.encode(w)).collect::<Result<_, _>>()?;
    let lm = lm_train(&encoded, &alphabet, order, smoothing)?;
    let mut bytes = Vec::new();
    lm.write_to(&mut bytes)?;
    staged_file(out, &bytes)?;
    let mut echo = out.as_os_str().to_owned();
    echo.push(".toml");
    let settings = format!(
        "corpus = {:?}\norder = {order}\nsmoothing = {smoothing}\nalphabet = {:?}\n",
        corpus.display().to_string(),
        alphabet.as_string()
    );
    staged_file(Path::new(&echo), settings.as_bytes())?;
    println!("wrote order-{order} model over {} words to {}", words.len(), out.display());
    Ok(())
}

fn cmd_ablate(data: &Path, config: Option<&Path>, seeds: &[u64], out: Option<&Path>) -> CliResult {
    let mut cfg = load_config(config)?;
    let split = read_dataset(data).map_err(|e| with_path(e, data))?;
    cfg.model.num_classes = split.alphabet.len();
    cfg.model.validate()?;
    check_frame_size(&cfg, &split)?;
    let table = ablate(&split, &cfg, seeds)?;
    println!("{table}");
    if let Some(out) = out {
        staged_dir(out, |dir| {
            echo_config(dir, &cfg)?;
            fs::write(dir.join("ablation.txt"), format!("{table}\n"))?;
            let mut raw = String::from("configuration\tseed\tgreedy\tbeam\tbeam_lm\n");
            for row in &table.rows {
                for (seed, s) in table.seeds.iter().zip(&row.per_seed) {
                    raw.push_str(&format!("{}\t{seed}\t{}\t{}\t{}\n", row.label, s[0], s[1], s[2]));
                }
            }
            fs::write(dir.join("ablation_raw.tsv"), raw)?;
            Ok(())
        })?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth { seed, n_clips, out, config } => cmd_synth(seed, n_clips, &out, config.as_deref()),
        Command::Train { data, config, out } => cmd_train(&data, config.as_deref(), &out),
        Command::Eval { ckpt, data, split, decoder, beam_width, lm, alpha, out } => {
            cmd_eval(&ckpt, &data, &split, decoder, beam_width, lm.as_deref(), alpha, out.as_deref())
        }
        Command::Decode { ckpt, clip, decoder, beam_width, lm, alpha, priors } => {
            cmd_decode(&ckpt, &clip, decoder, beam_width, lm.as_deref(), alpha, priors.as_deref())
        }
        Command::LmTrain { corpus, order, out, alphabet, smoothing } => {
            cmd_lm_train(&corpus, order, &out, alphabet.as_deref(), smoothing)
        }
        Command::Ablate { data, config, seeds, out } => cmd_ablate(&data, config.as_deref(), &seeds, out.as_deref()),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error\tusage\t{}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error\t{}\t{}", f.kind, one_line(&f.message));
            ExitCode::FAILURE
        }
    }
}
