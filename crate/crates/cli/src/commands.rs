//! Subcommand implementations. Results go to `out`; progress and the
//! resolved configuration go to `log`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hbnn_core::binarize::hetero_binarize;
use hbnn_core::bitalloc::generate_mask;
use hbnn_core::hwcost::{self, AccuracyEntry, CostBaseline, CostEstimate, Platform};
use hbnn_core::{DistPolicy, SortHeuristic};
use hbnn_train::data::{self, SyntheticParams};
use hbnn_train::{Dataset, LrSchedule, MaskRefresh, TrainConfig};
use serde::Serialize;

use crate::approx::{self, BenchConfig, BenchPolicy};
use crate::config::RunConfig;
use crate::formats;
use crate::points::parse_point;
use crate::UsageError;

#[derive(Debug, Parser)]
#[command(name = "hbnn", version, about = "Heterogeneous-bitwidth binarization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Approximation error of binarization schemes on Gaussian tensors (CSV).
    ApproxBench(BenchArgs),
    /// Binarize a RAWTENS1 tensor into an HBT file.
    Quantize(QuantizeArgs),
    /// Reconstruct an HBT file into a RAWTENS1 tensor.
    Dequantize(DequantizeArgs),
    /// Train one model per sweep point and seed (CSV).
    Train(TrainArgs),
    /// Hardware cost estimates and Pareto report.
    Cost(CostArgs),
    /// Print version and format identifiers.
    Version,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tensor size.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub avg_bits: Option<Vec<f64>>,
    /// Comma-separated: td, mo, mo-signed, bu, random.
    #[arg(long, value_delimiter = ',')]
    pub heuristics: Option<Vec<String>>,
    /// adjacent, tiered-1.4, preset(1:0.8,3:0.2), grid-best or grid-best(MAX,STEP).
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub homogeneous_bits: Option<Vec<usize>>,
    /// Write CSV here instead of standard output.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Target average bitwidth.
    #[arg(long)]
    pub bits: f64,
    #[arg(long, default_value = "mo")]
    pub heuristic: String,
    #[arg(long, default_value = "adjacent")]
    pub policy: String,
}

#[derive(Debug, Args)]
pub struct DequantizeArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Sweep point, repeatable (e.g. `--point "w=1.4"`).
    #[arg(long = "point")]
    pub points: Vec<String>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Compare packed xnor-popcount and dense logits for every model.
    #[arg(long)]
    pub verify_packed: bool,
    /// Results CSV; standard output when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Directory for final shadow weights (JSON per point and seed).
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Baseline CSV; the bundled table when absent.
    #[arg(long)]
    pub baselines: Option<PathBuf>,
    #[arg(long)]
    pub platform: Option<String>,
    /// Baseline id to scale from.
    #[arg(long)]
    pub base: Option<String>,
    /// Average bitwidth (FPGA), or both input and weight bits (ASIC).
    #[arg(long, allow_negative_numbers = true)]
    pub bits: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub bits_in: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub bits_w: Option<f64>,
    /// FPGA unfolding; the baseline's own when absent.
    #[arg(long)]
    pub unfolding: Option<u32>,
    /// Estimate every baseline over `--grid` and mark the Pareto front.
    #[arg(long)]
    pub pareto: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,1.2,1.4,1.6,1.8,2")]
    pub grid: Vec<f64>,
    /// Accuracy annotation `MODEL:BITS:TOP1`, repeatable. Baseline top-1
    /// values are always included.
    #[arg(long = "accuracy")]
    pub accuracy: Vec<String>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: OutputFormat,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn log_config(log: &mut dyn Write, cfg: &RunConfig) -> Result<()> {
    writeln!(log, "# resolved config")?;
    for line in cfg.resolved().lines() {
        writeln!(log, "#   {line}")?;
    }
    Ok(())
}

fn open_output<'a>(path: &Option<PathBuf>, out: &'a mut dyn Write) -> Result<Box<dyn Write + 'a>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(out),
    })
}

pub fn run(cli: Cli, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::ApproxBench(a) => approx_bench(a, out, log),
        Command::Quantize(a) => quantize(a, out),
        Command::Dequantize(a) => dequantize(a, out),
        Command::Train(a) => train(a, out, log),
        Command::Cost(a) => cost(a, out),
        Command::Version => {
            writeln!(out, "hbnn {}", env!("CARGO_PKG_VERSION"))?;
            writeln!(out, "rng {}", hbnn_core::rng::ALGORITHM)?;
            writeln!(out, "hbt-version {}", formats::HBT_VERSION)?;
            Ok(())
        }
    }
}

fn parse_heuristics(names: &[String]) -> Result<Vec<SortHeuristic>> {
    names
        .iter()
        .map(|n| n.parse::<SortHeuristic>().map_err(|e| usage(e.to_string())))
        .collect()
}

pub fn approx_bench(a: BenchArgs, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    cfg.n = a.n.or(cfg.n).or(Some(1_000_000));
    cfg.seeds = a.seeds.or(cfg.seeds).or(Some(vec![1, 2, 3, 4, 5]));
    cfg.avg_bits = a.avg_bits.or(cfg.avg_bits).or(Some(vec![1.2, 1.4, 1.6, 1.8]));
    cfg.heuristics = a
        .heuristics
        .or(cfg.heuristics)
        .or(Some(["td", "mo", "bu", "random"].map(String::from).to_vec()));
    cfg.policy = a.policy.or(cfg.policy).or(Some("grid-best".into()));
    cfg.homogeneous_bits = a.homogeneous_bits.or(cfg.homogeneous_bits).or(Some(vec![1, 2, 3]));
    log_config(log, &cfg)?;

    let n = cfg.n.unwrap();
    if n == 0 {
        bail!(usage("n must be positive"));
    }
    if let Some(b) = cfg.homogeneous_bits.as_ref().unwrap().iter().find(|&&b| !(1..=hbnn_core::MAX_BITS as usize).contains(&b)) {
        bail!(usage(format!("homogeneous bitwidth {b} outside 1..=8")));
    }
    let bench = BenchConfig {
        n,
        seeds: cfg.seeds.clone().unwrap(),
        avg_bits: cfg.avg_bits.clone().unwrap(),
        heuristics: parse_heuristics(cfg.heuristics.as_ref().unwrap())?,
        policy: cfg.policy.as_ref().unwrap().parse::<BenchPolicy>().map_err(|e| usage(e.to_string()))?,
        homogeneous: cfg.homogeneous_bits.clone().unwrap(),
    };
    let sink = open_output(&a.output, out)?;
    let mut w = csv::Writer::from_writer(sink);
    let mut write_err = None;
    approx::run(&bench, |row| {
        if write_err.is_none() {
            write_err = w.serialize(row).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

pub fn quantize(a: QuantizeArgs, out: &mut dyn Write) -> Result<()> {
    let heuristic: SortHeuristic = a.heuristic.parse().map_err(|e: hbnn_core::Error| usage(e.to_string()))?;
    let policy: DistPolicy = a.policy.parse().map_err(|e: hbnn_core::Error| usage(e.to_string()))?;
    hbnn_core::bitalloc::dist_from_avg(a.bits, &policy).map_err(|e| usage(e.to_string()))?;
    let f = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let t = formats::read_raw(&mut BufReader::new(f)).with_context(|| format!("reading {}", a.input.display()))?;
    t.ensure_finite()?;
    let mask = generate_mask(&t, a.bits, heuristic, &policy)?;
    let h = hetero_binarize(&t, &mask)?;
    let mut w = BufWriter::new(File::create(&a.output).with_context(|| format!("creating {}", a.output.display()))?);
    formats::write_hbt(&mut w, &h)?;
    w.flush()?;
    writeln!(out, "average_bits {}", mask.average())?;
    match t.normalized_distance(&h.reconstruct()) {
        Ok(d) => writeln!(out, "normalized_distance {d}")?,
        Err(_) => writeln!(out, "normalized_distance n/a (zero tensor)")?,
    }
    Ok(())
}

pub fn dequantize(a: DequantizeArgs, out: &mut dyn Write) -> Result<()> {
    let f = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let h = formats::read_hbt(&mut BufReader::new(f)).with_context(|| format!("reading {}", a.input.display()))?;
    let t = h.reconstruct();
    let mut w = BufWriter::new(File::create(&a.output).with_context(|| format!("creating {}", a.output.display()))?);
    formats::write_raw(&mut w, &t)?;
    w.flush()?;
    writeln!(out, "elements {} average_bits {}", h.len(), h.mask().average())?;
    Ok(())
}

#[derive(Serialize)]
struct Checkpoint<'a> {
    network: &'a str,
    point: &'a str,
    seed: u64,
    tensors: &'a [Vec<f64>],
}

pub fn train(a: TrainArgs, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    let defaults = TrainConfig::default();
    cfg.data_dir = a.data_dir.or(cfg.data_dir);
    cfg.seeds = a.seeds.or(cfg.seeds).or(Some(vec![1]));
    cfg.epochs = a.epochs.or(cfg.epochs).or(Some(defaults.epochs));
    cfg.n_train = a.n_train.or(cfg.n_train).or(Some(8000));
    cfg.n_test = a.n_test.or(cfg.n_test).or(Some(2000));
    if !a.points.is_empty() {
        cfg.points = Some(a.points);
    }
    cfg.points = cfg
        .points
        .or(Some(["w=1", "w=1.4", "w=2", "full"].map(String::from).to_vec()));
    cfg.verify_packed = Some(a.verify_packed || cfg.verify_packed.unwrap_or(false));
    cfg.model = cfg.model.or(Some("convnet4".into()));
    cfg.width = cfg.width.or(Some(16));
    cfg.batch_size = cfg.batch_size.or(Some(defaults.batch_size));
    cfg.learning_rate = cfg.learning_rate.or(Some(defaults.learning_rate));
    cfg.momentum = cfg.momentum.or(Some(defaults.momentum));
    cfg.weight_decay = cfg.weight_decay.or(Some(defaults.weight_decay));
    cfg.mask_refresh = cfg.mask_refresh.or(Some(defaults.mask_refresh.to_string()));
    cfg.lr_schedule = cfg.lr_schedule.or(Some(defaults.lr_schedule.to_string()));
    if cfg.data_dir.is_none() {
        let p = SyntheticParams::default();
        cfg.data_seed = cfg.data_seed.or(Some(42));
        cfg.synthetic_noise = cfg.synthetic_noise.or(Some(p.noise));
        cfg.synthetic_distractor = cfg.synthetic_distractor.or(Some(p.distractor));
    }
    log_config(log, &cfg)?;

    let points = cfg
        .points
        .as_ref()
        .unwrap()
        .iter()
        .map(|p| parse_point(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mask_refresh: MaskRefresh = cfg.mask_refresh.as_ref().unwrap().parse().map_err(|e: hbnn_train::TrainError| usage(e.to_string()))?;
    let lr_schedule: LrSchedule = cfg.lr_schedule.as_ref().unwrap().parse().map_err(|e: hbnn_train::TrainError| usage(e.to_string()))?;
    let tcfg = TrainConfig {
        learning_rate: cfg.learning_rate.unwrap(),
        momentum: cfg.momentum.unwrap(),
        weight_decay: cfg.weight_decay.unwrap(),
        epochs: cfg.epochs.unwrap(),
        batch_size: cfg.batch_size.unwrap(),
        seed: 0,
        mask_refresh,
        lr_schedule,
    };
    if tcfg.batch_size == 0 {
        bail!(usage("batch_size must be positive"));
    }
    let width = cfg.width.unwrap();
    let binarized_inputs = points.iter().any(|p| p.inputs != hbnn_train::Precision::Full);
    let template = match cfg.model.as_deref().unwrap() {
        "convnet4" => hbnn_train::four_layer_convnet(width, data::CLASSES, binarized_inputs),
        "separable" => hbnn_train::separable_convnet(width, data::CLASSES),
        other => bail!(usage(format!("unknown model '{other}' (convnet4, separable)"))),
    };
    for p in &points {
        hbnn_train::network::Network::new(p.apply(&template)?).map_err(|e| usage(format!("point '{}': {e}", p.id)))?;
    }

    let (n_train, n_test) = (cfg.n_train.unwrap(), cfg.n_test.unwrap());
    let (train_split, test_split) = match &cfg.data_dir {
        Some(dir) => data::load_dir(dir, n_train, n_test)?,
        None => data::synthetic(
            n_train,
            n_test,
            cfg.data_seed.unwrap(),
            SyntheticParams {
                noise: cfg.synthetic_noise.unwrap(),
                distractor: cfg.synthetic_distractor.unwrap(),
                ..SyntheticParams::default()
            },
        ),
    };
    let dataset = Dataset::from_raw(&train_split, &test_split)?;
    if let Some(dir) = &a.checkpoint_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }

    let verify = cfg.verify_packed.unwrap();
    let mut side_err: Option<anyhow::Error> = None;
    let rows = hbnn_train::run_sweep(&dataset, &template, &points, cfg.seeds.as_ref().unwrap(), &tcfg, |row, model| {
        if side_err.is_some() {
            return;
        }
        let _ = writeln!(log, "# {} seed {}: top1 {:.2}% in {:.1}s", row.point_id, row.seed, row.top1, row.wall_seconds);
        if verify {
            match hbnn_train::packed_divergence(model, &dataset, 64) {
                Ok(d) => {
                    let _ = writeln!(log, "# {} seed {}: packed-vs-dense max |diff| {d:.3e}", row.point_id, row.seed);
                }
                Err(e) => side_err = Some(e.into()),
            }
        }
        if let Some(dir) = &a.checkpoint_dir {
            let ck = Checkpoint {
                network: &model.network.spec().name,
                point: &row.point_id,
                seed: row.seed,
                tensors: &model.weights.tensors,
            };
            let path = checkpoint_path(dir, &row.point_id, row.seed);
            let res = serde_json::to_vec(&ck)
                .map_err(anyhow::Error::from)
                .and_then(|bytes| fs::write(&path, bytes).with_context(|| format!("writing {}", path.display())));
            if let Err(e) = res {
                side_err = Some(e);
            }
        }
    })?;
    if let Some(e) = side_err {
        return Err(e);
    }
    let sink = open_output(&a.output, out)?;
    let mut w = csv::Writer::from_writer(sink);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn checkpoint_path(dir: &Path, point: &str, seed: u64) -> PathBuf {
    let safe: String = point
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    dir.join(format!("{safe}_seed{seed}.json"))
}

fn parse_accuracy(s: &str) -> Result<AccuracyEntry> {
    let parts: Vec<&str> = s.rsplitn(3, ':').collect();
    if parts.len() != 3 {
        bail!(usage(format!("accuracy '{s}': expected MODEL:BITS:TOP1")));
    }
    let bits = parts[1].parse().map_err(|_| usage(format!("accuracy '{s}': bad bits")))?;
    let top1 = parts[0].parse().map_err(|_| usage(format!("accuracy '{s}': bad top-1")))?;
    Ok(AccuracyEntry { model: parts[2].to_string(), bits, top1 })
}

#[derive(Serialize)]
struct EstimateRow<'a> {
    #[serde(flatten)]
    estimate: &'a CostEstimate,
    top1: Option<f64>,
    pareto: Option<bool>,
}

fn write_estimates(out: &mut dyn Write, format: OutputFormat, rows: &[EstimateRow]) -> Result<()> {
    match format {
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut *out, rows)?;
            writeln!(out)?;
        }
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record([
                "baseline", "platform", "model", "unfolding", "bits_in", "bits_w", "occupancy", "kfps", "power_w",
                "saturated", "top1", "pareto", "note",
            ])?;
            for r in rows {
                let e = r.estimate;
                w.write_record([
                    e.baseline.clone(),
                    e.platform.to_string(),
                    e.model.clone(),
                    e.unfolding.map(|u| u.to_string()).unwrap_or_default(),
                    e.bits_in.to_string(),
                    e.bits_w.to_string(),
                    format!("{:.4}", e.occupancy),
                    format!("{:.4}", e.kfps),
                    format!("{:.4}", e.power_w),
                    e.saturated.to_string(),
                    r.top1.map(|t| t.to_string()).unwrap_or_default(),
                    r.pareto.map(|p| p.to_string()).unwrap_or_default(),
                    e.note.clone(),
                ])?;
            }
            w.flush()?;
        }
        OutputFormat::Table => {
            writeln!(
                out,
                "{:<8} {:<5} {:<10} {:>6} {:>5} {:>5} {:>12} {:>9} {:>8} {:>7} {:>6}",
                "base", "plat", "model", "unfold", "b_in", "b_w", "occupancy", "kFPS", "power_W", "top1", "pareto"
            )?;
            for r in rows {
                let e = r.estimate;
                let occ = match e.platform {
                    Platform::Fpga => format!("{:.1}%{}", e.occupancy, if e.saturated { "*" } else { "" }),
                    Platform::Asic => format!("{:.2}mm2", e.occupancy),
                };
                writeln!(
                    out,
                    "{:<8} {:<5} {:<10} {:>6} {:>5} {:>5} {:>12} {:>9.3} {:>8.3} {:>7} {:>6}",
                    e.baseline,
                    e.platform.to_string(),
                    e.model,
                    e.unfolding.map(|u| format!("{u}x")).unwrap_or_else(|| "-".into()),
                    e.bits_in,
                    e.bits_w,
                    occ,
                    e.kfps,
                    e.power_w,
                    r.top1.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into()),
                    match r.pareto {
                        Some(true) => "yes",
                        Some(false) => "no",
                        None => "-",
                    }
                )?;
            }
            if rows.iter().any(|r| r.estimate.saturated) {
                writeln!(out, "* occupancy capped at 100%")?;
            }
        }
    }
    Ok(())
}

pub fn cost(a: CostArgs, out: &mut dyn Write) -> Result<()> {
    let baselines: Vec<CostBaseline> = match &a.baselines {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            hwcost::parse_baselines(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => hwcost::bundled_baselines(),
    };
    let platform = a
        .platform
        .as_deref()
        .map(|p| p.parse::<Platform>().map_err(|e| usage(e.to_string())))
        .transpose()?;
    for b in [a.bits, a.bits_in, a.bits_w].into_iter().flatten() {
        if !(b.is_finite() && b > 0.0) {
            bail!(usage(format!("bitwidth {b} must be positive")));
        }
    }

    if a.pareto {
        let selected: Vec<CostBaseline> = baselines
            .iter()
            .filter(|b| platform.map_or(true, |p| b.platform == p))
            .filter(|b| a.base.as_ref().map_or(true, |id| &b.id == id))
            .cloned()
            .collect();
        if selected.is_empty() {
            bail!(usage("no baselines match the query"));
        }
        let mut accuracy: Vec<AccuracyEntry> = baselines
            .iter()
            .filter_map(|b| b.top1.map(|t| AccuracyEntry { model: b.model.clone(), bits: b.bits_w, top1: t }))
            .collect();
        for s in &a.accuracy {
            accuracy.insert(0, parse_accuracy(s)?);
        }
        let report = hwcost::pareto_report(&selected, &a.grid, &accuracy).map_err(|e| usage(e.to_string()))?;
        let rows: Vec<EstimateRow> = report
            .estimates
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let top1 = report.ranked.iter().find(|(k, _)| *k == i).map(|(_, t)| *t);
                EstimateRow { estimate: e, top1, pareto: top1.map(|_| report.pareto.contains(&i)) }
            })
            .collect();
        return write_estimates(out, a.format, &rows);
    }

    let id = a.base.as_ref().ok_or_else(|| usage("--base is required unless --pareto is given"))?;
    let base = baselines
        .iter()
        .find(|b| &b.id == id)
        .ok_or_else(|| usage(format!("unknown baseline id '{id}'")))?;
    if let Some(p) = platform {
        if p != base.platform {
            bail!(usage(format!("baseline {id} is {}, not {p}", base.platform)));
        }
    }
    let est = match base.platform {
        Platform::Fpga => {
            let bits = a.bits.or(a.bits_w).ok_or_else(|| usage("--bits is required"))?;
            hwcost::fpga_estimate(base, bits, a.unfolding.or(base.unfolding).unwrap_or(1))
        }
        Platform::Asic => {
            let bits_in = a.bits_in.or(a.bits).ok_or_else(|| usage("--bits or --bits-in is required"))?;
            let bits_w = a.bits_w.or(a.bits).ok_or_else(|| usage("--bits or --bits-w is required"))?;
            hwcost::asic_estimate(base, bits_in, bits_w)
        }
    }
    .map_err(|e| usage(e.to_string()))?;
    write_estimates(out, a.format, &[EstimateRow { estimate: &est, top1: None, pareto: None }])
}
