use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ladapt::adapters::{count_learnable_params, l_adapter_config_params, AdaptationStrategy, LAdapterConfig, LAdapterVariant};
use ladapt::backbone::{BackboneConfig, Checkpoint};
use ladapt::experiments::{
    ablate_l_config, format_ablation, layer_weight_report, lr_grid_search, pretrain, sweep_layers, train,
    write_weight_report, Preset, RunConfig, RunReport, SweepRow, TaskKind, LR_GRID,
};

#[derive(Parser)]
#[command(name = "ladapt", version, about = "Layer and encoder adapters over a frozen encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Run configuration (JSON, or TOML by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `toy` or `wavlm-base`.
    #[arg(long)]
    preset: Option<Preset>,
    /// Strategy, e.g. `proposed:4:3`, `conventional:2`, `finetune:1`,
    /// `l_adapters_only`, `e_adapters_only`.
    #[arg(long)]
    strategy: Option<AdaptationStrategy>,
    /// `frame_content`, `utterance_speaker` or `utterance_class`.
    #[arg(long)]
    task: Option<TaskKind>,
    /// L-adapter configuration, e.g. `Base`, `FC+LN`, `Skip`.
    #[arg(long)]
    variant: Option<LAdapterVariant>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Frozen backbone checkpoint written by `pretrain`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the toy backbone and write checkpoint.json.
    Pretrain(Common),
    /// Train one configuration per seed and write run.json.
    Train(Common),
    /// Train every strategy of the layer sweep and write sweep.csv.
    Sweep(Common),
    /// Compare the eight L-adapter configurations and write ablation.csv.
    Ablate(Common),
    /// Learning-rate grid over the strategy families; writes lrgrid.csv.
    Lrgrid(Common),
    /// Exact learnable-parameter counts, without training.
    CountParams {
        #[command(flatten)]
        common: Common,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Layer weights of a trained run as weights.csv and weights.svg.
    WeightsReport {
        #[command(flatten)]
        common: Common,
        /// Read an existing run.json instead of training.
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(p) = c.preset {
        cfg.preset = p;
    }
    if let Some(t) = c.task {
        cfg.task.kind = t;
    }
    match c.strategy {
        Some(s) => cfg.strategy = s,
        // without a config file, default to the full proposed layout
        None if c.config.is_none() => cfg.strategy = AdaptationStrategy::proposed_full(cfg.backbone_config().num_layers),
        None => {}
    }
    if let Some(v) = c.variant {
        cfg.variant = v;
    }
    if let Some(s) = c.steps {
        cfg.steps = s;
    }
    if let Some(lr) = c.lr {
        cfg.lr = lr;
    }
    if !c.seed.is_empty() {
        cfg.seeds = c.seed.clone();
    }
    if let Some(ck) = &c.checkpoint {
        cfg.checkpoint = Some(ck.clone());
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), value)?;
    Ok(())
}

fn summarize(r: &RunReport) {
    let metric = match r.final_value() {
        Some(v) => format!("{v:.4}"),
        None => "-".into(),
    };
    let status = if r.diverged { " DIVERGED" } else { "" };
    eprintln!(
        "{} {} seed={} lr={}: loss {:.4} -> {} {}={} ({:.1}s){status}",
        r.task,
        r.strategy,
        r.seed,
        r.lr,
        r.initial_loss,
        r.final_loss.map_or("-".into(), |v| format!("{v:.4}")),
        r.initial_metric.metric,
        metric,
        r.wall_clock_secs
    );
}

#[derive(Serialize)]
struct VariantCount {
    variant: String,
    params: usize,
    /// Millions rounded to two decimals; absent below 0.005M.
    millions: Option<String>,
}

#[derive(Serialize)]
struct CountOutput {
    preset: String,
    num_layers: usize,
    l_adapter_configs: Vec<VariantCount>,
    strategy: ladapt::adapters::ParamReport,
}

fn count_params(cfg: &RunConfig, json: bool) -> Result<()> {
    let bb: BackboneConfig = cfg.backbone_config();
    let configs = LAdapterVariant::ALL
        .iter()
        .map(|&v| {
            let l_cfg = match cfg.preset {
                Preset::Toy => LAdapterConfig::toy(v),
                Preset::WavlmBase => LAdapterConfig::wavlm_base(v),
            };
            let params = l_adapter_config_params(&l_cfg, &bb);
            VariantCount {
                variant: v.name().to_string(),
                params,
                millions: (params >= 5_000).then(|| format!("{:.2}M", params as f64 / 1e6)),
            }
        })
        .collect();
    let out = CountOutput {
        preset: cfg.preset.to_string(),
        num_layers: bb.num_layers,
        l_adapter_configs: configs,
        strategy: count_learnable_params(&cfg.model_config())?,
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    println!("L-adapter configurations ({}, {} layers)", out.preset, out.num_layers);
    println!("{:<8} {:>12} {:>8}", "variant", "# params", "");
    for c in &out.l_adapter_configs {
        let m = c.millions.as_ref().map_or(String::new(), |m| format!("({m})"));
        println!("{:<8} {:>12} {:>8}", c.variant, c.params, m);
    }
    let s = &out.strategy;
    println!();
    println!("strategy {}", s.strategy);
    for (component, n) in &s.trainable_by_component {
        println!("  {:<22} {:>12}", format!("{component:?}"), n);
    }
    println!("  {:<22} {:>12}", "trainable", s.trainable);
    println!("  {:<22} {:>12}", "total", s.total);
    println!("  {:<22} {:>12}", "head", s.head);
    println!("  {:<22} {:>12.6}", "ratio", s.ratio);
    println!("  {:<22} {:>12.6}", "ratio excluding head", s.ratio_excluding_head);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CountParams { common, json } => count_params(&load_config(&common)?, json),
        Command::Pretrain(c) => {
            let cfg = load_config(&c)?;
            let dir = out_dir(&cfg)?;
            let pre = pretrain(&cfg)?;
            let path = dir.join("checkpoint.json");
            Checkpoint::from_store(&pre.store)
                .with_config(pre.backbone.config.clone())
                .save(&path)?;
            if let Some(r) = &pre.report {
                write_json(&dir.join("pretrain.json"), r)?;
                if let Some((before, after)) = r.held_out {
                    eprintln!("held-out masked loss {before:.4} -> {after:.4}");
                }
            }
            println!("{}", path.display());
            Ok(())
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let dir = out_dir(&cfg)?;
            let pre = pretrain(&cfg)?;
            let mut reports = Vec::new();
            for &seed in &cfg.seeds {
                let r = train(&cfg, &pre, seed)?;
                summarize(&r);
                reports.push(r);
            }
            let path = dir.join("run.json");
            if let [one] = &reports[..] {
                write_json(&path, one)?;
            } else {
                write_json(&path, &reports)?;
            }
            println!("{}", path.display());
            Ok(())
        }
        Command::Sweep(c) => {
            let cfg = load_config(&c)?;
            let dir = out_dir(&cfg)?;
            let pre = pretrain(&cfg)?;
            let reports = sweep_layers(&cfg, &pre, Some(&dir))?;
            for r in &reports {
                summarize(r);
            }
            let rows: Vec<SweepRow> = reports.iter().map(SweepRow::from_report).collect();
            write_json(&dir.join("sweep.json"), &rows)?;
            println!("{}", dir.join("sweep.csv").display());
            Ok(())
        }
        Command::Ablate(c) => {
            let cfg = load_config(&c)?;
            let dir = out_dir(&cfg)?;
            let pre = pretrain(&cfg)?;
            let (rows, reports) = ablate_l_config(&cfg, &pre, Some(&dir))?;
            for r in &reports {
                summarize(r);
            }
            print!("{}", format_ablation(&rows));
            Ok(())
        }
        Command::Lrgrid(c) => {
            let cfg = load_config(&c)?;
            let dir = out_dir(&cfg)?;
            let pre = pretrain(&cfg)?;
            let l = cfg.backbone_config().num_layers;
            let strategies = [
                AdaptationStrategy::FineTuneTop { l },
                AdaptationStrategy::Conventional { l },
                AdaptationStrategy::proposed_full(l),
                AdaptationStrategy::LAdaptersOnly,
                AdaptationStrategy::EAdaptersOnly,
            ];
            let rep = lr_grid_search(&cfg, &pre, &strategies, &LR_GRID, Some(&dir))?;
            write_json(&dir.join("lrgrid.json"), &rep)?;
            for cell in &rep.cells {
                let mark = if cell.diverged { "  DIVERGED" } else { "" };
                println!(
                    "{:<18} lr={:<7} seed={} final_loss={}{mark}",
                    cell.strategy,
                    cell.lr,
                    cell.seed,
                    cell.final_loss.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
            for (s, lr) in &rep.best {
                println!("best {s}: {}", lr.map_or("none (all diverged)".into(), |v| v.to_string()));
            }
            Ok(())
        }
        Command::WeightsReport { common, run } => {
            let report: RunReport = match &run {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                    // run.json holds one report, or an array when several seeds ran
                    let mut reports: Vec<RunReport> = match value {
                        serde_json::Value::Array(_) => serde_json::from_value(value)?,
                        other => vec![serde_json::from_value(other)?],
                    };
                    let pick = match common.seed.first() {
                        Some(&seed) => reports.iter().position(|r| r.seed == seed),
                        None => (!reports.is_empty()).then_some(0),
                    };
                    let i = pick.ok_or_else(|| anyhow::anyhow!("no matching run in {}", p.display()))?;
                    reports.swap_remove(i)
                }
                None => {
                    let cfg = load_config(&common)?;
                    let pre = pretrain(&cfg)?;
                    let r = train(&cfg, &pre, cfg.seeds[0])?;
                    summarize(&r);
                    r
                }
            };
            let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let wr = layer_weight_report(&report)?;
            write_weight_report(&wr, &dir)?;
            for row in &wr.rows {
                println!("layer {:>2}  {:.6}", row.layer, row.weight);
            }
            println!("centroid {:.6}", wr.centroid);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
