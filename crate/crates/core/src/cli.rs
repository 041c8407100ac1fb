//! `lochead` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::corpus_geometry;
use crate::error::{Error, Result};
use crate::fixtures::{generate_corpus, FixtureSpec};
use crate::grounding::{ground_corpus, GroundingConfig, GroundingResult, HeadChoice, Padding};
use crate::io::{
    read_annotations, read_results, read_selection_report, write_eval_summary, write_prompts, write_results,
    write_selection_report, ManifestCorpus,
};
use crate::metrics::{evaluate_rec, evaluate_res, EvalSummary, Task};
use crate::overlay;
use crate::selection::{rank_iou_correlation, selection_frequency, Criteria, RankIouAnalysis, SelectionConfig, Strategy};
use crate::stats::{max_curvature_threshold, mean_attention_sums, ThresholdResult, DEFAULT_EXCLUDED_LAYERS};
use crate::types::{AttentionDump, HeadId, SampleAnnotation};

#[derive(Debug, Parser)]
#[command(name = "lochead", version, about = "Find localization heads in attention dumps and ground text with them")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rank heads by selection frequency and write a selection report.
    Discover(DiscoverArgs),
    /// Ground every sample with the report's heads.
    Ground(GroundArgs),
    /// Score grounding results against annotations.
    Eval(EvalArgs),
    /// Correlate selection frequency with per-head IoU.
    Analyze(AnalyzeArgs),
    /// Write a synthetic corpus with a planted localization head.
    GenFixtures(GenFixturesArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Validate every map on load.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// With annotations, also report the frequency/IoU correlation of the top heads.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Report path; `<out>.curve.tsv` and `<out>.freq.tsv` are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Heads to keep in the report's top list.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub lowest_n: usize,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = 1000)]
    pub samples_per_trial: usize,
    /// Fixed attention-sum threshold instead of the curvature knee.
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long, value_enum, default_value_t = Criteria::Both)]
    pub criteria: Criteria,
    #[arg(long, value_enum, default_value_t = Strategy::Fixed)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EXCLUDED_LAYERS)]
    pub excluded_layers: usize,
}

#[derive(Debug, Args)]
pub struct SmoothingArgs {
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 7)]
    pub kernel: usize,
    #[arg(long)]
    pub no_smoothing: bool,
}

#[derive(Debug, Args)]
pub struct GroundArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub report: PathBuf,
    /// Results file, one JSON record per line.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of heads to combine (default: the report's top list).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub strategy: Option<Strategy>,
    /// Per-sample ranking criterion for the greedy strategy (default: the report's).
    #[arg(long, value_enum)]
    pub criteria: Option<Criteria>,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
    /// Box the arg-max cell when nothing in the combined map exceeds its mean.
    #[arg(long)]
    pub fallback_argmax: bool,
    /// Directory for PPM overlays.
    #[arg(long)]
    pub overlays: Option<PathBuf>,
    /// Ground-truth boxes to draw on overlays.
    #[arg(long, requires = "overlays")]
    pub annotations: Option<PathBuf>,
    /// Box prompts for an external mask refiner, one JSON record per line.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Rec)]
    pub task: TaskArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum TaskArg {
    Rec,
    Res,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Consider only the first `top` ranked heads.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long, default_value_t = 0.0)]
    pub min_frequency: f64,
    /// Table path (tab-separated).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenFixturesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub num_samples: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 24)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 32)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// e.g. "L14 H1".
    #[arg(long, default_value = "L14 H1")]
    pub planted_head: HeadId,
    #[arg(long, default_value_t = 0.5)]
    pub blob_sigma: f64,
    #[arg(long, default_value_t = 0.09)]
    pub noise_heads_mass: f64,
    #[arg(long, default_value_t = 0.2)]
    pub diffuse_fraction: f64,
    #[arg(long, default_value_t = 336)]
    pub image_size: u32,
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Discover(a) => discover(a),
        Command::Ground(a) => ground(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::GenFixtures(a) => gen_fixtures(a),
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn curve_table(th: &ThresholdResult) -> String {
    let mut out = String::from("rank\tlayer\thead\tmean_sum\tcurvature\tknee\n");
    for p in &th.sorted_curve {
        let knee = u8::from(p.rank == th.curvature_index);
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", p.rank, p.head.layer, p.head.head, p.mean_sum, p.curvature, knee);
    }
    out
}

fn analysis_table(a: &RankIouAnalysis) -> String {
    let mut out = String::from("rank\tlayer\thead\tfrequency\tmean_iou\n");
    for r in &a.rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.rank, r.head.layer, r.head.head, r.frequency, r.mean_iou);
    }
    out
}

fn print_analysis(a: &RankIouAnalysis) {
    println!("{:>4}  {:<8} {:>9} {:>9}", "rank", "head", "frequency", "mean_iou");
    for r in &a.rows {
        println!("{:>4}  {:<8} {:>9.4} {:>9.4}", r.rank, r.head.to_string(), r.frequency, r.mean_iou);
    }
    println!(
        "spearman rho {:.4}  p {:.3e}  ({} heads, {} samples)",
        a.correlation.rho,
        a.correlation.p_value,
        a.rows.len(),
        a.num_samples
    );
}

fn discover(a: DiscoverArgs) -> Result<()> {
    let corpus = ManifestCorpus::open(&a.corpus.manifest, a.corpus.strict)?;
    let config = SelectionConfig {
        num_samples_per_trial: a.samples_per_trial,
        num_trials: a.trials,
        lowest_n: a.lowest_n,
        top_k: a.k,
        excluded_layers: a.excluded_layers,
        strategy: a.strategy,
        criteria: a.criteria,
        rng_seed: a.seed,
        tau_override: a.tau,
    };
    config.validate()?;
    let stats = mean_attention_sums(&corpus, a.excluded_layers)?;
    let threshold = max_curvature_threshold(&stats)?;
    let report = selection_frequency(&corpus, &stats, &config)?;

    write_selection_report(&report, &a.out)?;
    write_text(&sibling(&a.out, ".curve.tsv"), &curve_table(&threshold))?;
    let mut freq = String::from("rank\tlayer\thead\tfrequency\tfrequency_std\n");
    for (i, e) in report.ranks.iter().enumerate() {
        let _ = writeln!(freq, "{}\t{}\t{}\t{}\t{}", i + 1, e.head.layer, e.head.head, e.frequency, e.frequency_std);
    }
    write_text(&sibling(&a.out, ".freq.tsv"), &freq)?;

    println!("samples     {}", stats.num_samples);
    println!("knee tau    {:.6} (rank {})", threshold.tau, threshold.curvature_index);
    println!("tau used    {:.6}", report.tau_used);
    for (i, e) in report.ranks.iter().take(a.k).enumerate() {
        println!("top {:<2}      {:<8} frequency {:.4} ± {:.4}", i + 1, e.head.to_string(), e.frequency, e.frequency_std);
    }
    if let Some(path) = &a.annotations {
        let annotations = read_annotations(path)?;
        let analysis = rank_iou_correlation(&corpus, &annotations, &report, 0.0, Some(a.lowest_n))?;
        print_analysis(&analysis);
    }
    Ok(())
}

fn ground(a: GroundArgs) -> Result<()> {
    let corpus = ManifestCorpus::open(&a.corpus.manifest, a.corpus.strict)?;
    let report = read_selection_report(&a.report)?;
    let strategy = a.strategy.unwrap_or(report.config.strategy);
    let k = a.k.unwrap_or(report.config.top_k);
    if k == 0 {
        return Err(Error::Config("--k must be positive".into()));
    }
    let config = GroundingConfig {
        kernel_size: a.smoothing.kernel,
        sigma: a.smoothing.sigma,
        smoothing_enabled: !a.smoothing.no_smoothing,
        padding: Padding::Reflect,
        strategy,
        fallback_argmax: a.fallback_argmax,
    };
    config.validate(report.geometry.grid_size)?;
    let geometry = corpus_geometry(&corpus)?;
    if geometry != report.geometry {
        return Err(Error::GeometryMismatch {
            sample_id: corpus.manifest.samples.first().map(|e| e.sample_id.clone()).unwrap_or_default(),
            detail: format!("corpus is {geometry:?}, report was built for {:?}", report.geometry),
        });
    }

    let fixed: Vec<HeadId> = report.ranks.iter().take(k).map(|e| e.head).collect();
    if fixed.len() < k {
        return Err(Error::Config(format!("report ranks only {} heads, --k is {k}", fixed.len())));
    }
    let analysed = report.geometry.analysed_heads(report.config.excluded_layers);
    let choice = match strategy {
        Strategy::Fixed => HeadChoice::Fixed(&fixed),
        Strategy::Greedy => HeadChoice::Greedy {
            analysed: &analysed,
            tau: report.tau_used,
            top_k: k,
            criteria: a.criteria.unwrap_or(report.config.criteria),
        },
    };

    let gt_boxes = match &a.annotations {
        Some(p) => Some(
            read_annotations(p)?
                .into_iter()
                .map(|s| (s.sample_id.clone(), s))
                .collect::<std::collections::BTreeMap<String, SampleAnnotation>>(),
        ),
        None => None,
    };
    if let Some(dir) = &a.overlays {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let render = |dump: &AttentionDump, result: &GroundingResult| -> Result<()> {
        let Some(dir) = &a.overlays else { return Ok(()) };
        let gt = gt_boxes.as_ref().and_then(|m| m.get(dump.sample_id())).map(|s| &s.gt_bbox);
        let name = dump.sample_id().replace(['/', '\\'], "_");
        overlay::render(result, gt).write(&dir.join(format!("{name}.ppm")))
    };
    let sink: Option<crate::grounding::ResultSink<'_>> = if a.overlays.is_some() { Some(&render) } else { None };
    let records = ground_corpus(&corpus, &choice, &config, Some(report.geometry), sink)?;

    write_results(&records, &a.out)?;
    if let Some(p) = &a.prompts {
        write_prompts(&records, p)?;
    }
    let misses = records.iter().filter(|r| r.bbox_pixels.is_none()).count();
    let fallbacks = records.iter().filter(|r| r.used_fallback).count();
    println!("grounded {} samples ({misses} without foreground, {fallbacks} fallback boxes)", records.len());
    if strategy == Strategy::Fixed {
        println!("heads {}", fixed.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "));
    }
    Ok(())
}

pub fn format_summary(s: &EvalSummary) -> String {
    let task = match s.task {
        Task::Rec => "rec",
        Task::Res => "res",
    };
    let mut out = String::new();
    let _ = writeln!(out, "task          {task}");
    let _ = writeln!(out, "samples       {}", s.num_samples);
    let _ = writeln!(out, "acc@0.5       {:.4}", s.acc_at_05);
    let _ = writeln!(out, "mean box iou  {:.4}", s.mean_box_iou);
    if let Some(c) = s.ciou {
        let _ = writeln!(out, "ciou          {c:.4}");
    }
    out
}

fn eval(a: EvalArgs) -> Result<()> {
    let results = read_results(&a.results)?;
    let annotations = read_annotations(&a.annotations)?;
    let summary = match a.task {
        TaskArg::Rec => evaluate_rec(&results, &annotations)?,
        TaskArg::Res => evaluate_res(&results, &annotations)?,
    };
    if let Some(out) = &a.out {
        write_eval_summary(&summary, out)?;
    }
    print!("{}", format_summary(&summary));
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let corpus = ManifestCorpus::open(&a.corpus.manifest, a.corpus.strict)?;
    let annotations = read_annotations(&a.annotations)?;
    let report = read_selection_report(&a.report)?;
    let analysis = rank_iou_correlation(&corpus, &annotations, &report, a.min_frequency, Some(a.top))?;
    if let Some(out) = &a.out {
        let mut table = analysis_table(&analysis);
        let _ = writeln!(table, "# spearman_rho\t{}\n# p_value\t{}", analysis.correlation.rho, analysis.correlation.p_value);
        write_text(out, &table)?;
    }
    print_analysis(&analysis);
    Ok(())
}

fn gen_fixtures(a: GenFixturesArgs) -> Result<()> {
    let spec = FixtureSpec {
        num_samples: a.num_samples,
        grid_size: a.grid_size,
        num_layers: a.layers,
        num_heads: a.heads,
        planted_head: a.planted_head,
        blob_sigma: a.blob_sigma,
        noise_heads_mass: a.noise_heads_mass,
        diffuse_heads_fraction: a.diffuse_fraction,
        rng_seed: a.seed,
        image_size: a.image_size,
        ..FixtureSpec::default()
    };
    let manifest = generate_corpus(&spec, &a.out)?;
    println!("wrote {} samples to {}", manifest.samples.len(), a.out.display());
    Ok(())
}
