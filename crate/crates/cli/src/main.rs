use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use tessera_core::palette::{self, ExtractionParams, Palette, PaletteError, PaletteFormat};
use tessera_core::recolor::{recolor, RecolorError, RecolorOptions, RecolorRequest};
use tessera_core::stats::{self, io as stats_io, Grouping, StatsError};
use tessera_core::stimulus::{self, CorpusEntry, PaletteCorpus, StimulusError};
use tessera_core::Image;

/// Palette extraction, palette-guided recoloring, survey stimuli and rating
/// statistics.
#[derive(Debug, Parser)]
#[command(name = "tessera", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract a palette from a PNG and write it as JSON.
    Extract(ExtractArgs),
    /// Recolor a PNG toward an edited palette.
    Recolor(RecolorArgs),
    /// Build survey conditions and swatches from a design corpus.
    Stimuli(StimuliArgs),
    /// Analyze survey ratings or score CSI responses.
    Stats(StatsArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, value_parser = parse_format)]
    format: PaletteFormat,
    /// Number of palette colors (4 to 12).
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u16).range(4..=12))]
    k: u16,
    #[arg(long, default_value_t = palette::DEFAULT_GRID)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = palette::DEFAULT_N_SUPERPIXELS)]
    n_superpixels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RecolorArgs {
    #[arg(long)]
    image: PathBuf,
    /// Edited palette JSON; the source palette is re-extracted with the
    /// same format, k and grid.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = RecolorOptions::default().balance_eps)]
    eps: f64,
    #[arg(long, default_value_t = RecolorOptions::default().balance_max_iter)]
    max_iter: usize,
    #[arg(long, default_value_t = RecolorOptions::default().feather)]
    feather: f64,
    /// Seed for the source extraction.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = palette::DEFAULT_N_SUPERPIXELS)]
    n_superpixels: usize,
}

#[derive(Debug, Args)]
struct StimuliArgs {
    /// Directory of design PNGs and/or corpus entry JSON files.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON array naming the chosen design id for each palette cluster.
    #[arg(long)]
    picks: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StatsMode {
    Survey,
    Csi,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GroupingArg {
    Format,
    Combination,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    ratings: PathBuf,
    #[arg(long, value_enum)]
    mode: StatsMode,
    #[arg(long, value_enum, default_value = "format")]
    grouping: GroupingArg,
    /// Report JSON path; the text table goes to stdout.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "TESSERA_ADDR", default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, env = "TESSERA_DATA_DIR", default_value = "tessera-data")]
    data_dir: PathBuf,
    #[arg(long, env = "TESSERA_MAX_UPLOAD_BYTES", default_value_t = tessera_service::DEFAULT_MAX_UPLOAD_BYTES)]
    max_upload_bytes: usize,
}

fn parse_format(s: &str) -> Result<PaletteFormat, String> {
    s.parse()
}

/// Failure classes with stable exit codes.
enum Failure {
    /// 1: I/O, decode or other runtime errors.
    Runtime(anyhow::Error),
    /// 2: invalid input or flags.
    Usage(String),
    /// 3: target palette does not fit the source.
    Mismatch(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<PaletteError> for Failure {
    fn from(e: PaletteError) -> Self {
        match e {
            PaletteError::KOutOfRange(_)
            | PaletteError::InvalidParams(_)
            | PaletteError::InvalidPalette(_)
            | PaletteError::Json(_)
            | PaletteError::ImageTooSmall { .. } => Self::Usage(e.to_string()),
            other => Self::Runtime(other.into()),
        }
    }
}

impl From<RecolorError> for Failure {
    fn from(e: RecolorError) -> Self {
        match e {
            RecolorError::FormatMismatch { .. } | RecolorError::KMismatch { .. } | RecolorError::GridMismatch { .. } => {
                Self::Mismatch(e.to_string())
            }
            RecolorError::InvalidOptions(_) | RecolorError::InvalidTargets(_) => Self::Usage(e.to_string()),
            other => Self::Runtime(other.into()),
        }
    }
}

impl From<StatsError> for Failure {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::Schema(_) | StatsError::InvalidWeights(_) | StatsError::InvalidRating(_) => {
                Self::Usage(e.to_string())
            }
            other => Self::Runtime(other.into()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn read_image(path: &Path) -> anyhow::Result<Image> {
    Image::read_png(path).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn extract(a: ExtractArgs) -> Outcome {
    let params = ExtractionParams::with_k(usize::from(a.k))
        .seed(a.seed)
        .grid(a.grid)
        .n_superpixels(a.n_superpixels);
    params.validate()?;
    let image = read_image(&a.image)?;
    let extraction = palette::extract(&image, a.format, &params)?;
    write_file(&a.out, extraction.palette.to_json() + "\n")?;
    Ok(())
}

fn recolor_cmd(a: RecolorArgs) -> Outcome {
    let text = std::fs::read_to_string(&a.target)
        .with_context(|| format!("reading {}", a.target.display()))?;
    let target = Palette::from_json(&text)?;
    let options = RecolorOptions {
        balance_eps: a.eps,
        balance_max_iter: a.max_iter,
        feather: a.feather,
        seed: a.seed,
    };
    options.validate()?;
    let params = ExtractionParams::with_k(target.k())
        .seed(a.seed)
        .grid(target.grid_size().unwrap_or(palette::DEFAULT_GRID))
        .n_superpixels(a.n_superpixels);
    params.validate()?;
    let image = read_image(&a.image)?;
    let source = palette::extract(&image, target.format(), &params)?;
    let out = recolor(&RecolorRequest {
        image: &image,
        source: &source,
        target: &target,
        options,
    })?;
    out.image
        .write_png(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(b) = out.balance {
        let achieved: Vec<String> = b.achieved.iter().map(|p| format!("{p:.4}")).collect();
        println!(
            "residual {:.6} after {} iterations; achieved proportions {}",
            b.residual,
            b.iterations,
            achieved.join(",")
        );
    }
    Ok(())
}

fn load_corpus(dir: &Path, seed: u64) -> anyhow::Result<PaletteCorpus> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading corpus {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut entries = Vec::new();
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => {
                let image = read_image(&path)?;
                match CorpusEntry::from_image(stem, &image, seed) {
                    Ok(e) => entries.push(e),
                    Err(e @ StimulusError::InvalidEntry { .. }) => eprintln!("skipping {}: {e}", path.display()),
                    Err(e) => return Err(e).with_context(|| format!("extracting {}", path.display())),
                }
            }
            Some("json") => {
                let text = std::fs::read_to_string(&path)?;
                let entry: CorpusEntry =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                entries.push(entry);
            }
            _ => {}
        }
    }
    Ok(PaletteCorpus::new(entries)?)
}

fn stimuli(a: StimuliArgs) -> Outcome {
    let corpus = load_corpus(&a.corpus, a.seed)?;
    if corpus.len() < stimulus::DEFAULT_CLUSTERS {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "corpus has {} valid designs, at least {} required",
            corpus.len(),
            stimulus::DEFAULT_CLUSTERS
        )));
    }
    let picks: Option<Vec<String>> = match &a.picks {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("picks file: {e}")))?)
        }
        None => None,
    };
    let set = stimulus::build_stimuli(&corpus, picks.as_deref(), a.seed).context("building stimuli")?;
    write_file(&a.out.join("stimuli.json"), serde_json::to_string_pretty(&set).expect("serializable") + "\n")?;
    let mut swatches = 0;
    for combo in &set.combinations {
        let dir = a.out.join(&combo.id);
        for cond in &combo.conditions {
            write_file(
                &dir.join(format!("{}.json", cond.id)),
                serde_json::to_string_pretty(cond).expect("serializable") + "\n",
            )?;
            let png = stimulus::render_swatch(cond).encode_png().context("encoding swatch")?;
            write_file(&dir.join(format!("{}.png", cond.id)), png)?;
            swatches += 1;
        }
    }
    println!(
        "{} combinations, {} conditions, {} swatches",
        set.combinations.len(),
        set.combinations.iter().map(|c| c.conditions.len()).sum::<usize>(),
        swatches
    );
    Ok(())
}

fn stats_cmd(a: StatsArgs) -> Outcome {
    let file = std::fs::File::open(&a.ratings).with_context(|| format!("reading {}", a.ratings.display()))?;
    let json = match a.mode {
        StatsMode::Survey => {
            let table = stats_io::read_ratings(file)?;
            let grouping = match a.grouping {
                GroupingArg::Format => Grouping::Format,
                GroupingArg::Combination => Grouping::Combination,
            };
            let report = stats::analyze_ratings(&table, grouping)?;
            print!("{}", stats::render_report(&report));
            serde_json::to_string_pretty(&report).expect("serializable")
        }
        StatsMode::Csi => {
            let report = stats_io::csi_report(&stats_io::read_csi(file)?)?;
            for s in &report.systems {
                println!("{}: mean CSI {:.2} over {} participants", s.system, s.mean, s.scores.len());
                for (p, score) in &s.scores {
                    println!("  {p}: {score:.2}");
                }
            }
            if let Some(t) = &report.comparison {
                println!("paired t = {:.4}, p = {:.4}", t.statistic, t.p_value);
            }
            serde_json::to_string_pretty(&report).expect("serializable")
        }
    };
    write_file(&a.out, json + "\n")?;
    Ok(())
}

fn serve(a: ServeArgs) -> Outcome {
    let addr = a
        .addr
        .parse()
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("invalid --addr {:?}: {e}", a.addr)))?;
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let config = tessera_service::ServiceConfig {
        addr,
        data_dir: a.data_dir,
        max_upload_bytes: a.max_upload_bytes,
    };
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(tessera_service::serve(config))
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("{e}")))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract(a) => extract(a),
        Command::Recolor(a) => recolor_cmd(a),
        Command::Stimuli(a) => stimuli(a),
        Command::Stats(a) => stats_cmd(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Mismatch(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
