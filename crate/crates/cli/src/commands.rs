//! One function per subcommand.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ikod_core::attn_analysis::{
    regular_grid, write_csv_rows, DegradationRow, ImageAttentionStat, KdeRecord, SegmentSummary,
};
use ikod_core::cost::cost_report;
use ikod_core::metrics::{read_caption_records, BinaryMetrics, ChairScores};
use ikod_core::{
    binary_metrics, chair_scores, ikod_generate, kde2d, segment_averages,
    uniform_attention_prediction, AnchorStrategy, AttentionTrace, BinaryOutcomes, CaptionRecord,
    CostInputs, DecodeMode, DecodePolicy, Generation, Model, Prompt, SequenceLayout, TokenId,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::{AnalyzeArgs, DecodeArgs, FlopsArgs, MetricsArgs, RunArgs, SweepArgs};
use crate::config::{read_json, GroundTruth, RunConfig, SweepConfig};
use crate::{CliError, Result};

pub const GENERATION_FILE: &str = "generation.json";
pub const TRACE_FILE: &str = "attention_trace.csv";
pub const LAYOUT_FILE: &str = "layout.json";
pub const MERGE_PLANS_FILE: &str = "merge_plans.json";
pub const DEGRADATION_FILE: &str = "degradation.csv";
pub const SEGMENTS_FILE: &str = "segments.csv";
pub const KDE_FILE: &str = "kde.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_BASELINE_FILE: &str = "sweep_baseline.csv";

/// Sequence shape of a decode run, enough to rebuild a synthetic trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutInfo {
    pub l_image: usize,
    pub l_others: usize,
    pub l_gen: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: TokenId,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub chosen: TokenId,
    pub v_head_size: usize,
    pub p_orig_top5: Vec<TokenProb>,
    pub p_aug_top5: Vec<TokenProb>,
    pub orig_image_attention: f64,
    pub aug_image_attention: Option<f64>,
}

/// Per-run aggregates shared by `decode` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub generated_len: usize,
    /// Mean image attention of the generated tokens fed back as queries.
    pub gen_image_attention: Option<f64>,
    /// Mean image attention of every step's query on the original cache.
    pub orig_image_attention: Option<f64>,
    /// Same on the merged cache.
    pub aug_image_attention: Option<f64>,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub config: RunConfig,
    pub layout: LayoutInfo,
    pub summary: RunSummary,
    pub steps: Vec<StepSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlans {
    pub step: usize,
    pub text_len: usize,
    pub anchor_ratio: f64,
    pub strategy: AnchorStrategy,
    pub layers: Vec<ikod_core::kv_merge::LayerPlanRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    out.write_all(b"\n").map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = create(path)?;
    write_csv_rows(&mut out, rows)?;
    out.flush().map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn top5(p: &[f64]) -> Vec<TokenProb> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(5)
        .map(|i| TokenProb {
            token: i as TokenId,
            p: p[i],
        })
        .collect()
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn load_run(args: &RunArgs) -> Result<RunConfig> {
    let mut config: RunConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        config.policy.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

struct Session {
    model: Model,
    prompt: Prompt,
}

impl Session {
    fn new(config: &RunConfig) -> Result<Self> {
        let model = Model::init(config.model.clone())?;
        let prompt = Prompt::new(
            &model,
            config.image_count,
            config.seed,
            config.prompt_tokens.clone(),
        );
        Ok(Self { model, prompt })
    }

    fn generate(&self, policy: &DecodePolicy) -> Result<Generation> {
        Ok(ikod_generate(&self.model, &self.prompt, policy)?)
    }
}

pub fn summarize(gen: &Generation) -> Result<RunSummary> {
    let stat = ImageAttentionStat::from_trace(&gen.trace, &gen.layout)?;
    Ok(RunSummary {
        generated_len: gen.tokens.len(),
        gen_image_attention: mean(stat.att_avg()),
        orig_image_attention: gen.mean_orig_image_attention(),
        aug_image_attention: gen.mean_aug_image_attention(),
        tokens: gen.tokens.clone(),
    })
}

fn layout_info(gen: &Generation, model: &Model) -> LayoutInfo {
    LayoutInfo {
        l_image: gen.layout.l_image(),
        l_others: gen.layout.l_others(),
        l_gen: gen.layout.l_gen(),
        n_layers: model.config().n_layers,
        n_heads: model.config().n_heads,
    }
}

pub fn decode(args: &DecodeArgs) -> Result<()> {
    let config = load_run(&args.run)?;
    let out = config.resolve_out(args.run.out.as_deref())?;
    let session = Session::new(&config)?;
    let gen = session.generate(&config.policy)?;
    ensure_dir(&out)?;

    let steps = gen
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| StepSummary {
            step: i + 1,
            chosen: s.chosen,
            v_head_size: s.distributions.v_head.len(),
            p_orig_top5: top5(&s.distributions.p_orig),
            p_aug_top5: top5(&s.distributions.p_aug),
            orig_image_attention: s.orig_image_attention,
            aug_image_attention: s.aug_image_attention,
        })
        .collect();
    let report = GenerationReport {
        config: config.clone(),
        layout: layout_info(&gen, &session.model),
        summary: summarize(&gen)?,
        steps,
    };
    write_json(&out.join(GENERATION_FILE), &report)?;
    write_json(&out.join(LAYOUT_FILE), &report.layout)?;

    let stat = ImageAttentionStat::from_trace(&gen.trace, &gen.layout)?;
    let trace_path = out.join(TRACE_FILE);
    let mut trace_out = create(&trace_path)?;
    stat.write_csv(&mut trace_out)?;
    trace_out.flush().map_err(io_err(&trace_path))?;

    if args.emit_merge_plans {
        let plans: Vec<StepPlans> = gen
            .steps
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                s.plan.as_ref().map(|plan| StepPlans {
                    step: i + 1,
                    text_len: plan.text_len,
                    anchor_ratio: plan.anchor_ratio,
                    strategy: plan.strategy,
                    layers: plan.records(),
                })
            })
            .collect();
        write_json(&out.join(MERGE_PLANS_FILE), &plans)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PredictedRow {
    step: usize,
    relative_position: f64,
    att_avg: f64,
    predicted: f64,
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let stat = if args.synthetic_uniform {
        let info: LayoutInfo = read_json(&args.input.join(LAYOUT_FILE))?;
        let layout = SequenceLayout::new(info.l_image, info.l_others, info.l_gen);
        let trace = AttentionTrace::synthetic_uniform(&layout, info.n_layers, info.n_heads);
        ImageAttentionStat::from_trace(&trace, &layout)?
    } else {
        let path = args.input.join(TRACE_FILE);
        let file = File::open(&path).map_err(io_err(&path))?;
        ImageAttentionStat::read_csv(BufReader::new(file))?
    };
    if stat.is_empty() {
        return Err(CliError::Usage(
            "attention trace has no generated tokens".into(),
        ));
    }
    ensure_dir(&args.out)?;

    let degradation: Vec<DegradationRow> = stat.degradation();
    if args.synthetic_uniform {
        let info: LayoutInfo = read_json(&args.input.join(LAYOUT_FILE))?;
        let rows = degradation
            .iter()
            .map(|r| {
                Ok(PredictedRow {
                    step: r.step,
                    relative_position: r.relative_position,
                    att_avg: r.att_avg,
                    predicted: uniform_attention_prediction(info.l_image, info.l_others, r.step)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_csv(&args.out.join(DEGRADATION_FILE), &rows)?;
    } else {
        write_csv(&args.out.join(DEGRADATION_FILE), &degradation)?;
    }

    if stat.len() < 5 {
        eprintln!(
            "warning: {} generated tokens is fewer than 5; segment summary omitted",
            stat.len()
        );
    } else {
        let mut segments: Vec<SegmentSummary> = Vec::new();
        for layer in 0..stat.n_layers() {
            for head in 0..stat.n_heads() {
                segments.push(segment_averages(&stat, layer, head)?);
            }
        }
        write_csv(&args.out.join(SEGMENTS_FILE), &segments)?;
    }

    let mut points = Vec::with_capacity(stat.len() * stat.n_layers() * stat.n_heads());
    for (t, row) in degradation.iter().enumerate() {
        for layer in 0..stat.n_layers() {
            for head in 0..stat.n_heads() {
                points.push((row.relative_position, stat.get(t, layer, head)));
            }
        }
    }
    let n = args.grid.max(2);
    let grid = regular_grid((0.0, 1.0), (0.0, 1.0), n, n);
    let density = kde2d(&points, &grid, args.bandwidth, args.bandwidth)?;
    let kde: Vec<KdeRecord> = grid
        .iter()
        .zip(density)
        .map(|(&(x, y), density)| KdeRecord { x, y, density })
        .collect();
    write_csv(&args.out.join(KDE_FILE), &kde)?;
    Ok(())
}

/// One sweep grid point, in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub mode: DecodeMode,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub strategy: AnchorStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub mode: DecodeMode,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub strategy: AnchorStrategy,
    pub generated_len: usize,
    pub gen_image_attention: Option<f64>,
    pub orig_image_attention: Option<f64>,
    pub aug_image_attention: Option<f64>,
    pub chair_s: Option<f64>,
    pub chair_i: Option<f64>,
    /// Space-separated token ids.
    pub tokens: String,
}

fn axis<T: Copy>(name: &str, values: &Option<Vec<T>>, default: T) -> Result<Vec<T>> {
    match values {
        None => Ok(vec![default]),
        Some(v) if v.is_empty() => Err(CliError::Usage(format!("sweep axis {name} is empty"))),
        Some(v) => Ok(v.clone()),
    }
}

/// Cartesian product with the strategy axis varying fastest.
pub fn expand_grid(config: &SweepConfig) -> Result<Vec<SweepPoint>> {
    let base = &config.run.policy;
    let grid = &config.grid;
    let lambdas = axis("lambda", &grid.lambda, base.lambda)?;
    let alphas = axis("alpha", &grid.alpha, base.alpha)?;
    let betas = axis("beta", &grid.beta, base.beta)?;
    let strategies = axis("strategy", &grid.strategy, base.anchor_strategy)?;
    let mut points = Vec::new();
    for &lambda in &lambdas {
        for &alpha in &alphas {
            for &beta in &betas {
                for &strategy in &strategies {
                    points.push(SweepPoint {
                        index: points.len() + 1,
                        mode: base.mode,
                        lambda,
                        alpha,
                        beta,
                        strategy,
                    });
                }
            }
        }
    }
    Ok(points)
}

fn chair_for(tokens: &[TokenId], truth: &GroundTruth) -> Option<ChairScores> {
    let mentioned = tokens.iter().filter(|t| truth.object_tokens.contains(t));
    let record = CaptionRecord::new(
        mentioned.map(|t| t.to_string()),
        truth.present.iter().map(|t| t.to_string()),
    );
    chair_scores(&[record]).ok()
}

fn sweep_row(
    session: &Session,
    point: &SweepPoint,
    base: &DecodePolicy,
    truth: Option<&GroundTruth>,
) -> Result<SweepRow> {
    let policy = DecodePolicy {
        mode: point.mode,
        lambda: point.lambda,
        alpha: point.alpha,
        beta: point.beta,
        anchor_strategy: point.strategy,
        ..base.clone()
    };
    policy.validate()?;
    let summary = summarize(&session.generate(&policy)?)?;
    let chair = truth.and_then(|t| chair_for(&summary.tokens, t));
    Ok(SweepRow {
        index: point.index,
        mode: point.mode,
        lambda: point.lambda,
        alpha: point.alpha,
        beta: point.beta,
        strategy: point.strategy,
        generated_len: summary.generated_len,
        gen_image_attention: summary.gen_image_attention,
        orig_image_attention: summary.orig_image_attention,
        aug_image_attention: summary.aug_image_attention,
        chair_s: chair.map(|c| c.chair_s),
        chair_i: chair.map(|c| c.chair_i),
        tokens: summary
            .tokens
            .iter()
            .map(TokenId::to_string)
            .collect::<Vec<_>>()
            .join(" "),
    })
}

/// Worker count from `IKOD_THREADS`, if set.
fn thread_count() -> Result<Option<usize>> {
    match std::env::var("IKOD_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "IKOD_THREADS={v:?} is not a positive integer"
            ))),
        },
    }
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let mut config: SweepConfig = read_json(&args.run.config)?;
    if let Some(seed) = args.run.seed {
        config.run.policy.seed = seed;
    }
    config.run.validate()?;
    let out = config.run.resolve_out(args.run.out.as_deref())?;
    let points = expand_grid(&config)?;
    let session = Session::new(&config.run)?;
    let base = &config.run.policy;
    let truth = config.ground_truth.as_ref();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count()? {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;

    let baseline = SweepPoint {
        index: 0,
        mode: DecodeMode::Baseline,
        lambda: base.lambda,
        alpha: base.alpha,
        beta: base.beta,
        strategy: base.anchor_strategy,
    };
    let (baseline_row, rows) = pool.install(|| {
        rayon::join(
            || sweep_row(&session, &baseline, base, truth),
            || {
                points
                    .par_iter()
                    .map(|p| sweep_row(&session, p, base, truth))
                    .collect::<Result<Vec<_>>>()
            },
        )
    });
    let (baseline_row, rows) = (baseline_row?, rows?);

    ensure_dir(&out)?;
    write_csv(&out.join(SWEEP_BASELINE_FILE), &[baseline_row])?;
    write_csv(&out.join(SWEEP_FILE), &rows)?;
    Ok(())
}

pub fn flops(args: &FlopsArgs) -> Result<()> {
    let inputs = CostInputs::new(args.layers, args.n, args.d, args.l, args.lambda)?;
    let report = cost_report(&inputs)?;
    let text = serde_json::to_string_pretty(&report).expect("cost report serializes");
    println!("{text}");
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chair: Option<ChairScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binary: Option<BinaryMetrics>,
}

pub fn metrics(args: &MetricsArgs) -> Result<()> {
    if args.captions.is_none() && args.binary.is_none() {
        return Err(CliError::Usage("pass --captions and/or --binary".into()));
    }
    let chair = match &args.captions {
        Some(path) => {
            let file = File::open(path).map_err(io_err(path))?;
            Some(chair_scores(&read_caption_records(BufReader::new(file))?)?)
        }
        None => None,
    };
    let binary = match &args.binary {
        Some(path) => {
            let outcomes: BinaryOutcomes = read_json(path)?;
            Some(binary_metrics(&outcomes)?)
        }
        None => None,
    };
    let text =
        serde_json::to_string_pretty(&MetricsReport { chair, binary }).expect("metrics serialize");
    println!("{text}");
    Ok(())
}
