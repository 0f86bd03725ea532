//! `nabla` — reproducible offline experiments over the engine crate.
//!
//! Subcommands cover adaptive mask construction, sparse-versus-dense
//! benchmarks, analytic cost tables, batch-scheduler simulation, and
//! checkpoint souping. Every run is a pure function of its flags and
//! `--seed`; the only fields that vary between identical runs are the
//! benchmark wall-clock measurements, all prefixed `wall_`.
//!
//! Artifacts go to standard output, or to `--out PATH`, as `--format`
//! JSON (default) or CSV. Errors are printed to standard error as a
//! single JSON object `{"error": <kind>, "message": <text>}` with a
//! stable machine-parsable kind, and the exit code is nonzero.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nabla_engine::batch::{aspect_weight_preset, parse_items_jsonl, task_mix};
use nabla_engine::cost::{preset, sweep, ModelPreset, SWEEP_CSV_HEADER};
use nabla_engine::soup::{load_param_set, save_param_set};
use nabla_engine::sparse::DEFAULT_BEST_OF;
use nabla_engine::{
    bench_sparse_vs_dense, build_nabla_mask, merge, plan_tar_packing, schedule, soup_weights,
    AttentionSpec, BenchConfig, Calibration, Error, NablaConfig, QueuePolicy, Result, Rng,
    ScheduleConfig, SparseAttnReport, VideoLayout, WeightScheme,
};

#[derive(Parser, Debug)]
#[command(
    name = "nabla",
    version,
    about = "Block-sparse attention experiments: masks, benchmarks, cost tables, batching, soups"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed for every randomized step; fixing it fixes all non-timing output bytes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Write the primary artifact to this file instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Primary artifact format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    /// Cap on worker threads. Precedence: this flag, then the
    /// NABLA_ENGINE_THREADS environment variable, then 1.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build adaptive block masks for a video layout and report their sparsity.
    Mask(MaskArgs),
    /// Time the block-sparse kernel against dense attention on random inputs.
    Bench(BenchArgs),
    /// Tabulate analytic step-time and GPU-memory estimates over parameter axes.
    Cost(CostArgs),
    /// Simulate the batch scheduler over a JSONL item stream.
    BatchSim(BatchSimArgs),
    /// Average checkpoints into one merged parameter set.
    Soup(SoupArgs),
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// Latent frames.
    #[arg(long, default_value_t = 4)]
    frames: usize,

    /// Latent height in tokens; must be divisible by the patch edge.
    #[arg(long, default_value_t = 32)]
    height: usize,

    /// Latent width in tokens; must be divisible by the patch edge.
    #[arg(long, default_value_t = 32)]
    width: usize,

    /// Patch edge; each tile holds patch^2 consecutive tokens after reordering.
    #[arg(long, default_value_t = 8)]
    patch: usize,

    /// Attention heads.
    #[arg(long, default_value_t = 4)]
    heads: usize,

    /// Per-head channel count.
    #[arg(long, default_value_t = 32)]
    head_dim: usize,

    /// Cumulative probability mass each mask row may drop, in [0, 1).
    /// Repeat the flag for a sweep; queries and keys are drawn once, so
    /// the sparsity column is comparable across rows.
    #[arg(long, required = true)]
    thr: Vec<f64>,

    /// Union a local attention window into every mask, given as
    /// frames,rows,cols tile extents (odd numbers, e.g. 3,3,3).
    #[arg(long, value_parser = parse_window)]
    sta: Option<(usize, usize, usize)>,

    /// Block edge in tokens; defaults to the tile size patch^2.
    #[arg(long)]
    block_size: Option<usize>,

    /// Write one PGM image per (threshold, head) into this directory.
    #[arg(long)]
    pgm_dir: Option<PathBuf>,

    /// Write one packed bitset per threshold into this directory.
    #[arg(long)]
    bitset_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Sequence length in tokens; must be a multiple of the block size.
    #[arg(long, default_value_t = 1024)]
    seq_len: usize,

    /// Per-head channel count.
    #[arg(long, default_value_t = 64)]
    head_dim: usize,

    /// Attention heads.
    #[arg(long, default_value_t = 4)]
    heads: usize,

    /// Target fraction of block pairs to drop, in [0, 1). Repeat the
    /// flag for one report row per target.
    #[arg(long, required = true)]
    sparsity: Vec<f64>,

    /// Block edge in tokens.
    #[arg(long, default_value_t = nabla_engine::DEFAULT_BLOCK_SIZE)]
    block_size: usize,

    /// Timing repetitions per kernel; the fastest run is reported.
    #[arg(long, default_value_t = DEFAULT_BEST_OF)]
    best_of: usize,
}

#[derive(Args, Debug)]
struct CostArgs {
    /// Model preset name; repeat for several. Known: image-lite, video-lite, video-pro.
    #[arg(long = "preset", required = true)]
    presets: Vec<String>,

    /// Sequence length in tokens; repeat for a sweep axis.
    #[arg(long = "seq", required = true)]
    seqs: Vec<u64>,

    /// GPU count; repeat for a sweep axis.
    #[arg(long = "gpus", default_values_t = [1u64])]
    gpus: Vec<u64>,

    /// Whether activations are offloaded from GPU memory.
    #[arg(long, value_enum, default_value_t = OffloadAxis::Off)]
    offload: OffloadAxis,

    /// Per-GPU batch size.
    #[arg(long, default_value_t = 1)]
    batch: u64,

    /// Calibration factor applied to every step-time value.
    #[arg(long, default_value_t = 1.0)]
    step_unit: f64,

    /// Calibration factor applied to every memory value.
    #[arg(long, default_value_t = 1.0)]
    mem_unit: f64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum OffloadAxis {
    Off,
    On,
    Both,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("fraction")
    .required(true)
    .args(["image_fraction", "task_mix"]))]
struct BatchSimArgs {
    /// JSONL file with one item object per line.
    #[arg(long)]
    items: PathBuf,

    /// Temporal budget per batch.
    #[arg(long, default_value_t = 32)]
    t_max: u64,

    /// Target fraction of batches that are image-only, in [0, 1].
    #[arg(long)]
    image_fraction: Option<f64>,

    /// Derive the image fraction from a named task mix instead. Known:
    /// video-lite-pretrain, video-pro-pretrain.
    #[arg(long)]
    task_mix: Option<String>,

    /// How the scheduler picks among non-empty aspect-class queues.
    #[arg(long, value_enum, default_value_t = PolicyArg::RoundRobin)]
    policy: PolicyArg,

    /// Aspect-class weights for --policy weighted, as "class=w,class=w".
    #[arg(long, conflicts_with = "weights_preset")]
    weights: Option<String>,

    /// Named weight preset for --policy weighted. Known: video-lite-lr.
    #[arg(long)]
    weights_preset: Option<String>,

    /// Reject items outside these aspect classes instead of opening new queues.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    aspect_classes: Option<Vec<String>>,

    /// Consecutive unsatisfiable picks tolerated before a starvation error.
    #[arg(long, default_value_t = 100)]
    patience: u64,

    /// Emit the aggregate summary instead of the full batch list.
    #[arg(long)]
    summary: bool,

    /// Also write a tar-shard packing plan for the same items to this file.
    #[arg(long)]
    tar_plan_out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum PolicyArg {
    RoundRobin,
    Weighted,
}

#[derive(Args, Debug)]
struct SoupArgs {
    /// Checkpoint manifest path; repeat once per checkpoint, in merge order.
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,

    /// How dataset sizes turn into merge weights.
    #[arg(long, default_value = "proportional", value_parser = WeightScheme::from_str)]
    scheme: WeightScheme,

    /// Directory the merged checkpoint is written into.
    #[arg(long)]
    out_dir: PathBuf,

    /// Basename for the merged manifest.
    #[arg(long, default_value = "soup")]
    name: String,
}

fn parse_window(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected frames,rows,cols (three integers), got {s:?}"));
    }
    let mut v = [0usize; 3];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| format!("{part:?} is not a non-negative integer"))?;
    }
    Ok((v[0], v[1], v[2]))
}

fn parse_weights(s: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for pair in s.split(',') {
        let (class, value) = pair.split_once('=').ok_or_else(|| {
            Error::Parameter(format!("weight {pair:?} is not of the form class=value"))
        })?;
        let w: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Parameter(format!("weight value {value:?} is not a number")))?;
        out.push((class.trim().to_string(), w));
    }
    Ok(out)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                emit_error("usage", &e.to_string());
                std::process::exit(2);
            }
            // --help and --version print to stdout and exit cleanly.
            let _ = e.print();
            return;
        }
    };
    if let Err(e) = run(cli) {
        emit_error(e.kind(), &e.to_string());
        std::process::exit(1);
    }
}

fn emit_error(kind: &str, message: &str) {
    let obj = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{obj}");
}

fn run(cli: Cli) -> Result<()> {
    let threads = match cli.threads {
        Some(n) => n,
        None => match std::env::var("NABLA_ENGINE_THREADS") {
            Ok(s) => s.trim().parse().map_err(|_| {
                Error::Parameter(format!("NABLA_ENGINE_THREADS must be an integer, got {s:?}"))
            })?,
            Err(_) => 1,
        },
    };
    nabla_engine::threads::set_max_threads(threads);

    let artifact = match &cli.command {
        Command::Mask(args) => cmd_mask(args, cli.seed, cli.format)?,
        Command::Bench(args) => cmd_bench(args, cli.seed, cli.format)?,
        Command::Cost(args) => cmd_cost(args, cli.format)?,
        Command::BatchSim(args) => cmd_batch_sim(args, cli.seed, cli.format)?,
        Command::Soup(args) => cmd_soup(args, cli.format)?,
    };

    let mut payload = artifact;
    if !payload.ends_with('\n') {
        payload.push('\n');
    }
    match &cli.out {
        Some(path) => fs::write(path, payload)?,
        None => print!("{payload}"),
    }
    Ok(())
}

/// One output row of the mask subcommand.
#[derive(Debug, Serialize)]
struct MaskRow {
    thr: f64,
    block_size: usize,
    heads: usize,
    q_blocks: usize,
    k_blocks: usize,
    sparsity: f64,
    per_head_sparsity: Vec<f64>,
}

const MASK_CSV_HEADER: &str = "thr,block_size,heads,q_blocks,k_blocks,sparsity,per_head_sparsity";

/// File-name tag for one threshold value, e.g. 0.25 -> "thr0p25".
fn thr_tag(thr: f64) -> String {
    format!("thr{thr}").replace('.', "p")
}

fn cmd_mask(args: &MaskArgs, seed: u64, format: Format) -> Result<String> {
    let layout = VideoLayout::new(args.frames, args.height, args.width, args.patch)?;
    let block = args.block_size.unwrap_or_else(|| layout.tokens_per_tile());
    let spec = AttentionSpec::new(args.heads, args.head_dim)?;
    let mut rng = Rng::new(seed);
    let shape = [args.heads, layout.seq_len(), args.head_dim];
    let q = rng.normal_tensor(&shape)?;
    let k = rng.normal_tensor(&shape)?;

    let mut rows = Vec::with_capacity(args.thr.len());
    for &thr in &args.thr {
        let mut cfg = NablaConfig::new(thr).with_block_size(block);
        if let Some(window) = args.sta {
            cfg = cfg.with_window(window);
        }
        let mask = build_nabla_mask(&q, &k, &layout, &cfg, &spec)?;

        if let Some(dir) = &args.pgm_dir {
            fs::create_dir_all(dir)?;
            for head in 0..mask.heads() {
                let path = dir.join(format!("mask_{}_head{head}.pgm", thr_tag(thr)));
                fs::write(path, mask.to_pgm(head)?)?;
            }
        }
        if let Some(dir) = &args.bitset_dir {
            fs::create_dir_all(dir)?;
            let mut buf = Vec::new();
            mask.write_bitset(&mut buf)?;
            fs::write(dir.join(format!("mask_{}.bits", thr_tag(thr))), buf)?;
        }

        rows.push(MaskRow {
            thr,
            block_size: block,
            heads: mask.heads(),
            q_blocks: mask.grid().num_q_blocks,
            k_blocks: mask.grid().num_k_blocks,
            sparsity: mask.sparsity(),
            per_head_sparsity: mask.per_head_sparsity(),
        });
    }

    Ok(match format {
        Format::Json => to_pretty_json(&rows),
        Format::Csv => {
            let mut text = String::from(MASK_CSV_HEADER);
            for r in &rows {
                let per_head: Vec<String> =
                    r.per_head_sparsity.iter().map(|s| s.to_string()).collect();
                let _ = write!(
                    text,
                    "\n{},{},{},{},{},{},{}",
                    r.thr,
                    r.block_size,
                    r.heads,
                    r.q_blocks,
                    r.k_blocks,
                    r.sparsity,
                    per_head.join(";"),
                );
            }
            text
        }
    })
}

fn cmd_bench(args: &BenchArgs, seed: u64, format: Format) -> Result<String> {
    let mut reports = Vec::with_capacity(args.sparsity.len());
    for &target in &args.sparsity {
        let cfg = BenchConfig {
            seq_len: args.seq_len,
            head_dim: args.head_dim,
            num_heads: args.heads,
            target_sparsity: target,
            seed,
            block_size: args.block_size,
            best_of: args.best_of,
        };
        reports.push(bench_sparse_vs_dense(&cfg)?);
    }
    Ok(match format {
        Format::Json => to_pretty_json(&reports),
        Format::Csv => {
            let mut text = String::from(SparseAttnReport::CSV_HEADER);
            for r in &reports {
                let _ = write!(text, "\n{}", r.to_csv_row());
            }
            text
        }
    })
}

fn cmd_cost(args: &CostArgs, format: Format) -> Result<String> {
    let mut presets: Vec<&'static ModelPreset> = Vec::with_capacity(args.presets.len());
    for name in &args.presets {
        presets.push(preset(name)?);
    }
    let offloads: &[bool] = match args.offload {
        OffloadAxis::Off => &[false],
        OffloadAxis::On => &[true],
        OffloadAxis::Both => &[false, true],
    };
    let calibration = Calibration {
        step_unit: args.step_unit,
        memory_unit: args.mem_unit,
    };
    let rows = sweep(
        &presets,
        &args.seqs,
        &args.gpus,
        offloads,
        args.batch,
        Some(calibration),
    )?;
    Ok(match format {
        Format::Json => to_pretty_json(&rows),
        Format::Csv => {
            let mut text = String::from(SWEEP_CSV_HEADER);
            for r in &rows {
                let _ = write!(text, "\n{}", r.to_csv_row());
            }
            text
        }
    })
}

fn cmd_batch_sim(args: &BatchSimArgs, seed: u64, format: Format) -> Result<String> {
    let text = fs::read_to_string(&args.items)?;
    let items = parse_items_jsonl(&text)?;

    let image_fraction = match (args.image_fraction, &args.task_mix) {
        (Some(f), None) => f,
        (None, Some(name)) => task_mix(name)?.image_fraction(),
        // clap's argument group guarantees exactly one of the two.
        _ => unreachable!("--image-fraction and --task-mix are mutually exclusive"),
    };

    let mut cfg = ScheduleConfig::new(args.t_max, image_fraction, seed);
    cfg.patience = args.patience;
    cfg.aspect_classes = args.aspect_classes.clone();
    cfg.policy = match args.policy {
        PolicyArg::RoundRobin => QueuePolicy::RoundRobin,
        PolicyArg::Weighted => {
            let weights = if let Some(spec) = &args.weights {
                parse_weights(spec)?
            } else if let Some(name) = &args.weights_preset {
                aspect_weight_preset(name)?
            } else {
                return Err(Error::Parameter(
                    "--policy weighted needs --weights or --weights-preset".into(),
                ));
            };
            QueuePolicy::Weighted(weights)
        }
    };

    let plan = schedule(items.clone(), &cfg)?;

    if let Some(path) = &args.tar_plan_out {
        let tar = plan_tar_packing(&items)?;
        fs::write(path, to_pretty_json(&tar) + "\n")?;
    }

    Ok(match (format, args.summary) {
        (Format::Json, true) => to_pretty_json(&plan.summary()),
        (Format::Json, false) => to_pretty_json(&plan),
        (Format::Csv, true) => {
            let summary = plan.summary();
            let mut text = String::from("aspect_class,kind,batches,items,mean_fill");
            for q in &summary.per_queue {
                let kind = serde_json::to_value(q.kind).expect("kind serializes");
                let _ = write!(
                    text,
                    "\n{},{},{},{},{}",
                    q.aspect_class,
                    kind.as_str().expect("kind is a string"),
                    q.batches,
                    q.items,
                    q.mean_fill,
                );
            }
            text
        }
        (Format::Csv, false) => {
            let mut text = String::from("index,kind,aspect_class,num_items,total_temporal");
            for (i, b) in plan.batches.iter().enumerate() {
                let kind = serde_json::to_value(b.kind).expect("kind serializes");
                let _ = write!(
                    text,
                    "\n{},{},{},{},{}",
                    i,
                    kind.as_str().expect("kind is a string"),
                    b.aspect_class,
                    b.item_ids.len(),
                    b.total_temporal,
                );
            }
            text
        }
    })
}

/// Provenance block the soup subcommand reports for each input, plus the
/// merged result.
#[derive(Debug, Serialize)]
struct SoupReport {
    scheme: WeightScheme,
    inputs: Vec<SoupInput>,
    merged_subdomain: String,
    merged_dataset_size: u64,
    merged_params: usize,
    manifest: String,
}

#[derive(Debug, Serialize)]
struct SoupInput {
    manifest: String,
    subdomain: String,
    dataset_size: u64,
    weight: f64,
}

fn cmd_soup(args: &SoupArgs, format: Format) -> Result<String> {
    let mut sets = Vec::with_capacity(args.manifests.len());
    for path in &args.manifests {
        sets.push(load_param_set(path)?);
    }
    let sizes: Vec<u64> = sets.iter().map(|s| s.dataset_size).collect();
    let weights = soup_weights(&sizes, args.scheme)?;
    let merged = merge(&sets, &weights)?;
    let manifest = save_param_set(&args.out_dir, &args.name, &merged)?;

    let report = SoupReport {
        scheme: args.scheme,
        inputs: args
            .manifests
            .iter()
            .zip(&sets)
            .zip(&weights)
            .map(|((path, set), &weight)| SoupInput {
                manifest: path.display().to_string(),
                subdomain: set.subdomain.clone(),
                dataset_size: set.dataset_size,
                weight,
            })
            .collect(),
        merged_subdomain: merged.subdomain.clone(),
        merged_dataset_size: merged.dataset_size,
        merged_params: merged.len(),
        manifest: manifest.display().to_string(),
    };
    Ok(match format {
        Format::Json => to_pretty_json(&report),
        Format::Csv => {
            let mut text = String::from("manifest,subdomain,dataset_size,weight");
            for i in &report.inputs {
                let _ = write!(
                    text,
                    "\n{},{},{},{}",
                    i.manifest, i.subdomain, i.dataset_size, i.weight
                );
            }
            text
        }
    })
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact types serialize without error")
}
