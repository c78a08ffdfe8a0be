use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::{ArgGroup, Args, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use attnvtg::eval::{delta_report, DEFAULT_THRESHOLDS};
use attnvtg::gate::bucket_by_confidence;
use attnvtg::headlab::{attention_ratio, random_baseline_ratio, select_top_k, sorted_drop_curve};
use attnvtg::interval::time_to_frames;
use attnvtg::pipeline::{
    analyze_pair, merge_predictions, pair_with_ground_truth, read_jsonl, score as score_predictions, write_jsonl,
    FinalPrediction, GroundTruth, LocalPrediction, StageOneRecord,
};
use attnvtg::relevance::{write_curve_csv, RelevanceTrace};
use attnvtg::synth::{read_manifest, write_corpus, SynthSpec};
use attnvtg::{read_dump_file, AttentionDump, HeadId, PipelineConfig, Summary, Sweep};

use crate::output::{emit, fail, json_line, read_to_string, CliResult, CoreContext, EXIT_INPUT, EXIT_SWEEP};
use crate::svg::{line_chart, Series};
use crate::GlobalOpts;

fn load_config(g: &GlobalOpts) -> CliResult<PipelineConfig> {
    PipelineConfig::load(g.config.as_deref(), g.overlay.as_deref()).at("loading config")
}

fn load_dump(path: &Path) -> CliResult<AttentionDump> {
    read_dump_file(path).at(path.display())
}

fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = read_to_string(path)?;
    read_jsonl(text.as_bytes(), "records").at(path.display())
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    write_jsonl(&mut out, items).expect("writing to memory");
    out
}

fn thread_pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| fail(1, anyhow!("cannot start worker pool: {e}")))
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("input").required(true).args(["positive", "corpus"])))]
pub struct AnalyzeArgs {
    /// Positive-pass dump.
    #[arg(long, requires = "zero")]
    positive: Option<PathBuf>,
    /// Zero-video dump paired with `--positive`.
    #[arg(long, requires = "positive")]
    zero: Option<PathBuf>,
    /// Corpus directory with a `manifest.json`; writes one record per line.
    #[arg(long, conflicts_with_all = ["positive", "zero"])]
    corpus: Option<PathBuf>,
    /// Also write every intermediate curve of the pair as CSV.
    #[arg(long, requires = "positive")]
    curves: Option<PathBuf>,
}

pub fn analyze(g: &GlobalOpts, a: AnalyzeArgs) -> CliResult<()> {
    let config = load_config(g)?;
    if let Some(dir) = &a.corpus {
        let (manifest, dir) = read_manifest(dir).at(dir.display())?;
        let pool = thread_pool(g.jobs)?;
        let records: Vec<CliResult<StageOneRecord>> = pool.install(|| {
            manifest
                .samples
                .par_iter()
                .map(|entry| {
                    let pos = load_dump(&dir.join(&entry.positive))?;
                    let zero = load_dump(&dir.join(&entry.zero))?;
                    Ok(analyze_pair(&pos, &zero, &config).at(&entry.sample_id)?.record)
                })
                .collect()
        });
        let records = records.into_iter().collect::<CliResult<Vec<_>>>()?;
        return emit(g.out.as_deref(), g.force, &jsonl_bytes(&records));
    }

    let (pos_path, zero_path) = (a.positive.expect("clap group"), a.zero.expect("clap requires"));
    let pos = load_dump(&pos_path)?;
    let zero = load_dump(&zero_path)?;
    let analysis = analyze_pair(&pos, &zero, &config).at(format!("{} + {}", pos_path.display(), zero_path.display()))?;
    if let (Some(path), Some(trace)) = (&a.curves, &analysis.trace) {
        emit(Some(path), g.force, &curves_csv(&pos, trace)?)?;
    }
    emit(g.out.as_deref(), g.force, &json_line(&analysis.record))
}

/// One column per head stage (positive, zero, debiased) plus the fused curve.
fn curves_csv(pos: &AttentionDump, trace: &RelevanceTrace) -> CliResult<Vec<u8>> {
    let mut curves = Vec::new();
    for h in &trace.heads {
        curves.extend([&h.positive, &h.zero, &h.debiased]);
    }
    curves.push(&trace.fused);
    let mut csv = Vec::new();
    write_curve_csv(&mut csv, &pos.timeline, &curves).at("curve export")?;
    Ok(csv)
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    /// Stage-1 records from `analyze` (JSON lines).
    #[arg(long)]
    stage1: PathBuf,
    /// Stage-2 outputs `{"sample_id", "prediction": [s, e]}` (JSON lines).
    #[arg(long)]
    local: Option<PathBuf>,
}

pub fn merge(g: &GlobalOpts, a: MergeArgs) -> CliResult<()> {
    let records: Vec<StageOneRecord> = load_jsonl(&a.stage1)?;
    let locals: Vec<LocalPrediction> = match &a.local {
        Some(p) => load_jsonl(p)?,
        None => Vec::new(),
    };
    let merged = merge_predictions(&records, &locals).at("merging predictions")?;
    emit(g.out.as_deref(), g.force, &jsonl_bytes(&merged))
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("mode").required(true).args(["predictions", "baseline_summary"])))]
pub struct ScoreArgs {
    /// Final predictions (JSON lines with `sample_id` and `prediction`).
    #[arg(long, requires = "ground_truth")]
    predictions: Option<PathBuf>,
    /// Ground truth (JSON lines with `sample_id` and `ground_truth`).
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// IoU thresholds for R1@θ.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS)]
    thresholds: Vec<f64>,
    /// Also bucket Stage-1 IoU by gate confidence with these edges (must cover [0, 1]).
    #[arg(long, value_delimiter = ',')]
    buckets: Option<Vec<f64>>,
    /// Summary JSON of a baseline run; with `--improved-summary`, prints deltas rounded to 0.1.
    #[arg(long, requires = "improved_summary", conflicts_with = "predictions")]
    baseline_summary: Option<PathBuf>,
    #[arg(long)]
    improved_summary: Option<PathBuf>,
}

pub fn score(g: &GlobalOpts, a: ScoreArgs) -> CliResult<()> {
    if let (Some(base), Some(imp)) = (&a.baseline_summary, &a.improved_summary) {
        let parse = |p: &Path| -> CliResult<Summary> {
            serde_json::from_str(&read_to_string(p)?).map_err(|e| fail(EXIT_INPUT, anyhow!("{}: {e}", p.display())))
        };
        let report = delta_report(&parse(base)?, &parse(imp)?).at("delta report")?.rounded();
        return emit(g.out.as_deref(), g.force, &json_line(&report));
    }
    let preds: Vec<FinalPrediction> = load_jsonl(a.predictions.as_deref().expect("clap group"))?;
    let truth: Vec<GroundTruth> = load_jsonl(a.ground_truth.as_deref().expect("clap requires"))?;
    let report = score_predictions(&preds, &truth, &a.thresholds, a.buckets.as_deref()).at("scoring")?;
    emit(g.out.as_deref(), g.force, &json_line(&report))
}

#[derive(Args, Debug)]
pub struct SelectHeadsArgs {
    /// Knockout sweep (JSON lines: header, then one result per head).
    #[arg(long)]
    sweep: PathBuf,
    /// Number of heads; defaults to the config's `k_heads`.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Serialize)]
struct HeadSelection {
    k: usize,
    baseline_miou: f64,
    heads: Vec<HeadId>,
    gcs: Vec<f64>,
}

fn load_sweep(path: &Path) -> CliResult<Sweep> {
    let text = read_to_string(path)?;
    Sweep::read(text.as_bytes()).map_err(|e| fail(EXIT_SWEEP, anyhow::Error::new(e).context(path.display().to_string())))
}

pub fn select_heads(g: &GlobalOpts, a: SelectHeadsArgs) -> CliResult<()> {
    let k = match a.k {
        Some(k) => k,
        None => load_config(g)?.k_heads,
    };
    let sweep = load_sweep(&a.sweep)?;
    let sweep_err = |e: attnvtg::Error| fail(EXIT_SWEEP, e);
    let table = sweep.gcs_table().map_err(sweep_err)?;
    let heads = select_top_k(&table, k).map_err(sweep_err)?;
    let gcs = heads
        .iter()
        .map(|h| table.entries.iter().find(|e| e.head == *h).expect("selected from table").gcs)
        .collect();
    let out = HeadSelection { k, baseline_miou: table.baseline_miou, heads, gcs };
    emit(g.out.as_deref(), g.force, &json_line(&out))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Generator spec (JSON, or TOML by extension). Defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the spec's sample count.
    #[arg(long)]
    num_samples: Option<usize>,
}

pub fn synth(g: &GlobalOpts, a: SynthArgs) -> CliResult<()> {
    let dir = g
        .out
        .as_deref()
        .ok_or_else(|| fail(EXIT_INPUT, anyhow!("synth needs --out <DIR>")))?;
    let mut spec = match &a.spec {
        None => SynthSpec::default(),
        Some(p) => {
            let text = read_to_string(p)?;
            let parsed = if p.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text).map_err(anyhow::Error::from)
            } else {
                serde_json::from_str(&text).map_err(anyhow::Error::from)
            };
            parsed.map_err(|e| fail(EXIT_INPUT, e.context(p.display().to_string())))?
        }
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(n) = a.num_samples {
        spec.num_samples = n;
    }
    let manifest = write_corpus(&spec, dir, g.force).at(dir.display())?;
    let summary = serde_json::json!({
        "out_dir": dir,
        "num_samples": manifest.num_samples,
        "spec_hash": manifest.spec_hash,
    });
    emit(None, false, &json_line(&summary))
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[command(subcommand)]
    what: PlotKind,
    #[arg(long, value_enum, default_value_t = Format::Csv, global = true)]
    format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Svg,
}

#[derive(Subcommand, Debug)]
enum PlotKind {
    /// Per-head and fused relevance curves of one dump pair.
    Curves {
        #[arg(long)]
        positive: PathBuf,
        #[arg(long)]
        zero: PathBuf,
    },
    /// Sorted GCS (knockout mIoU drop) curve of a sweep.
    Drops {
        #[arg(long)]
        sweep: PathBuf,
    },
    /// Stage-1 IoU bucketed by decode and attention confidence.
    Buckets {
        /// Final predictions from `merge` (carry gate decisions).
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])]
        edges: Vec<f64>,
    },
    /// Share of fused relevance inside the ground truth, per sample of a corpus.
    Ratio {
        #[arg(long)]
        corpus: PathBuf,
    },
}

pub fn plot(g: &GlobalOpts, a: PlotArgs) -> CliResult<()> {
    let bytes = match a.what {
        PlotKind::Curves { positive, zero } => {
            let config = load_config(g)?;
            let pos = load_dump(&positive)?;
            let neg = load_dump(&zero)?;
            let analysis = analyze_pair(&pos, &neg, &config).at(positive.display())?;
            let trace = analysis
                .trace
                .ok_or_else(|| fail(EXIT_INPUT, anyhow!("no relevance curve: the dumps carry no attention evidence")))?;
            match a.format {
                Format::Csv => curves_csv(&pos, &trace)?,
                Format::Svg => {
                    let dt = pos.timeline.frame_dt_s();
                    let pts = |v: &[f64]| v.iter().enumerate().map(|(i, &y)| ((i as f64 + 0.5) * dt, y)).collect();
                    let labels: Vec<String> = trace.heads.iter().map(|h| format!("debiased {}", h.head)).collect();
                    let mut series: Vec<Series> = trace
                        .heads
                        .iter()
                        .zip(&labels)
                        .map(|(h, l)| Series { label: l, points: pts(h.debiased.values()) })
                        .collect();
                    series.push(Series { label: "fused", points: pts(trace.fused.values()) });
                    let band = analysis.record.detected.map(|d| (d.seconds.start_s, d.seconds.end_s));
                    line_chart(&format!("{}: relevance (s)", pos.sample_id), &series, band).into_bytes()
                }
            }
        }
        PlotKind::Drops { sweep } => {
            let sweep = load_sweep(&sweep)?;
            let table = sweep.gcs_table().map_err(|e| fail(EXIT_SWEEP, e))?;
            let curve = sorted_drop_curve(&table);
            match a.format {
                Format::Csv => {
                    let mut s = String::from("rank,gcs\n");
                    for (rank, v) in &curve {
                        let _ = writeln!(s, "{rank},{v}");
                    }
                    s.into_bytes()
                }
                Format::Svg => {
                    let points = curve.iter().map(|&(r, v)| (r as f64, v)).collect();
                    line_chart("sorted knockout mIoU drop", &[Series { label: "GCS", points }], None).into_bytes()
                }
            }
        }
        PlotKind::Buckets { predictions, ground_truth, edges } => {
            let preds: Vec<FinalPrediction> = load_jsonl(&predictions)?;
            let truth: Vec<GroundTruth> = load_jsonl(&ground_truth)?;
            let records = pair_with_ground_truth(&preds, &truth).at("pairing predictions")?;
            let mut dec = Vec::new();
            let mut attn = Vec::new();
            for (p, r) in preds.iter().zip(&records) {
                if let (Some(gate), Some(s1)) = (p.gate, p.stage1_prediction) {
                    let v = attnvtg::iou(s1, r.ground_truth);
                    if let Some(c) = gate.c_dec {
                        dec.push((c, v));
                    }
                    attn.push((gate.c_attn, v));
                }
            }
            let mut s = String::from("signal,lower,upper,count,mean_iou\n");
            for (name, recs) in [("c_dec", dec), ("c_attn", attn)] {
                for b in bucket_by_confidence(&recs, &edges).at("bucketing")? {
                    let mean = b.mean_iou.map_or(String::new(), |m| m.to_string());
                    let _ = writeln!(s, "{name},{},{},{},{mean}", b.lower, b.upper, b.count);
                }
            }
            s.into_bytes()
        }
        PlotKind::Ratio { corpus } => {
            let config = load_config(g)?;
            let (manifest, dir) = read_manifest(&corpus).at(corpus.display())?;
            let pool = thread_pool(g.jobs)?;
            let rows: Vec<CliResult<String>> = pool.install(|| {
                manifest
                    .samples
                    .par_iter()
                    .map(|e| {
                        let pos = load_dump(&dir.join(&e.positive))?;
                        let zero = load_dump(&dir.join(&e.zero))?;
                        let gt = pos
                            .ground_truth
                            .ok_or_else(|| fail(EXIT_INPUT, anyhow!("{}: dump carries no ground truth", e.sample_id)))?;
                        let frames = time_to_frames(gt, &pos.timeline);
                        let fused = attnvtg::compute_relevance(&pos, &zero, &config).at(&e.sample_id)?;
                        let ratio = attention_ratio(fused.values(), frames).ok();
                        let base = random_baseline_ratio(frames, pos.timeline.num_frames());
                        Ok(format!(
                            "{},{},{}\n",
                            e.sample_id,
                            ratio.map_or(String::new(), |r| r.to_string()),
                            base
                        ))
                    })
                    .collect()
            });
            let mut s = String::from("sample_id,attention_ratio,random_baseline\n");
            for row in rows {
                s.push_str(&row?);
            }
            s.into_bytes()
        }
    };
    emit(g.out.as_deref(), g.force, &bytes)
}
