//! Multi-run studies and their report files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tasks::{generate_task, TaskData};
use super::train::{train_on, weight_centroid, Pretrained, RunConfig, RunReport};
use crate::adapters::{l_adapter_config_params, AdaptationStrategy, LAdapterConfig, LAdapterVariant};
use crate::backbone::BackboneConfig;
use crate::{Error, Result};

/// Every strategy of a layer sweep over an `num_layers`-deep encoder:
/// FineTuneTop(l) and Conventional(l) for l = 1..=L, Proposed(k, l) over
/// k = 1..=L and l = 0..L, then LAdaptersOnly and EAdaptersOnly.
pub fn sweep_grid(num_layers: usize) -> Vec<AdaptationStrategy> {
    let mut out = Vec::new();
    out.extend((1..=num_layers).map(|l| AdaptationStrategy::FineTuneTop { l }));
    out.extend((1..=num_layers).map(|l| AdaptationStrategy::Conventional { l }));
    for k in 1..=num_layers {
        out.extend((0..num_layers).map(|l| AdaptationStrategy::Proposed { k, l }));
    }
    out.push(AdaptationStrategy::LAdaptersOnly);
    out.push(AdaptationStrategy::EAdaptersOnly);
    out
}

/// One CSV row per run. Divergent runs keep their row with `diverged`
/// set and empty metric cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: String,
    pub strategy: String,
    pub family: String,
    pub k: Option<usize>,
    pub l: Option<usize>,
    pub variant: String,
    pub lr: f64,
    pub seed: u64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub ratio: f64,
    pub initial_loss: f64,
    pub final_loss: Option<f64>,
    pub metric: String,
    pub final_metric: Option<f64>,
    pub centroid: Option<f64>,
    pub diverged: bool,
}

impl SweepRow {
    pub fn from_report(r: &RunReport) -> Self {
        let (k, l) = r.strategy.axes();
        SweepRow {
            task: r.task.name().to_string(),
            strategy: r.strategy.to_string(),
            family: r.strategy.family().to_string(),
            k,
            l,
            variant: r.variant.name().to_string(),
            lr: r.lr,
            seed: r.seed,
            trainable_params: r.params.trainable,
            total_params: r.params.total,
            ratio: r.params.ratio,
            initial_loss: r.initial_loss,
            final_loss: r.final_loss.filter(|v| v.is_finite()),
            metric: r.initial_metric.metric.clone(),
            final_metric: r.final_value().filter(|v| v.is_finite()),
            centroid: r.centroid,
            diverged: r.diverged,
        }
    }
}

pub fn write_csv<T: Serialize, W: Write>(w: W, rows: &[T]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_csv_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_csv(std::fs::File::create(path)?, rows)
}

/// Trains every `(strategy, seed)` pair on a shared backbone. Task data is
/// generated once per seed.
pub fn run_many(
    base: &RunConfig,
    pre: &Pretrained,
    strategies: &[AdaptationStrategy],
    mut on_report: impl FnMut(&RunReport),
) -> Result<Vec<RunReport>> {
    let mut out = Vec::with_capacity(strategies.len() * base.seeds.len());
    for &seed in &base.seeds {
        let data = generate_task(&base.task, seed)?;
        for &strategy in strategies {
            let cfg = RunConfig {
                strategy,
                ..base.clone()
            };
            let r = train_on(&cfg, pre, &data, seed)?;
            on_report(&r);
            out.push(r);
        }
    }
    Ok(out)
}

/// Layer sweep over [`sweep_grid`]; optionally writes `sweep.csv` to `out`.
pub fn sweep_layers(base: &RunConfig, pre: &Pretrained, out: Option<&Path>) -> Result<Vec<RunReport>> {
    let grid = sweep_grid(base.num_layers);
    let reports = run_many(base, pre, &grid, |_| {})?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let rows: Vec<SweepRow> = reports.iter().map(SweepRow::from_report).collect();
        write_csv_file(&dir.join("sweep.csv"), &rows)?;
    }
    Ok(reports)
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// L-adapter parameters at the toy preset used for training.
    pub toy_params: usize,
    /// The same configuration at the wavlm-base preset.
    pub wavlm_base_params: usize,
    pub metric: String,
    pub mean: Option<f64>,
    /// Rendered as the `±` field.
    pub std: Option<f64>,
    pub runs: usize,
    pub diverged_runs: usize,
}

/// One LAdaptersOnly run per L-adapter variant and seed.
pub fn ablate_l_config(base: &RunConfig, pre: &Pretrained, out: Option<&Path>) -> Result<(Vec<AblationRow>, Vec<RunReport>)> {
    let cfg = RunConfig {
        strategy: AdaptationStrategy::LAdaptersOnly,
        ..base.clone()
    };
    let data: Vec<(u64, TaskData)> = base
        .seeds
        .iter()
        .map(|&s| generate_task(&base.task, s).map(|d| (s, d)))
        .collect::<Result<_>>()?;
    let toy_bb = cfg.backbone_config();
    let wavlm_bb = BackboneConfig::wavlm_base();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for variant in LAdapterVariant::ALL {
        let vcfg = RunConfig { variant, ..cfg.clone() };
        let mut values = Vec::new();
        let mut diverged = 0;
        for (seed, d) in &data {
            let r = train_on(&vcfg, pre, d, *seed)?;
            match r.final_value().filter(|v| v.is_finite()) {
                Some(v) => values.push(v),
                None => diverged += 1,
            }
            reports.push(r);
        }
        let (mean, std) = if values.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&values);
            (Some(m), Some(s))
        };
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            toy_params: l_adapter_config_params(&vcfg.model_config().l_adapter, &toy_bb),
            wavlm_base_params: l_adapter_config_params(&LAdapterConfig::wavlm_base(variant), &wavlm_bb),
            metric: base.task.kind.metric_name().to_string(),
            mean,
            std,
            runs: data.len(),
            diverged_runs: diverged,
        });
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_csv_file(&dir.join("ablation.csv"), &rows)?;
    }
    Ok((rows, reports))
}

/// Formats an ablation table with `mean ± std` cells.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let metric = rows.first().map_or("metric", |r| r.metric.as_str());
    let mut s = format!("{:<8} {:>10} {:>18} {:>18}\n", "variant", "toy", "wavlm-base", metric);
    for r in rows {
        let cell = match (r.mean, r.std) {
            (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
            _ => "diverged".to_string(),
        };
        s.push_str(&format!("{:<8} {:>10} {:>18} {:>18}\n", r.variant, r.toy_params, r.wavlm_base_params, cell));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub strategy: String,
    pub lr: f64,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: Option<f64>,
    pub final_metric: Option<f64>,
    pub converged: bool,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    /// Best learning rate per strategy by mean final metric over seeds;
    /// `None` if every rate diverged.
    pub best: Vec<(String, Option<f64>)>,
}

/// Trains each strategy at each rate and picks the best rate per strategy.
pub fn lr_grid_search(
    base: &RunConfig,
    pre: &Pretrained,
    strategies: &[AdaptationStrategy],
    grid: &[f64],
    out: Option<&Path>,
) -> Result<GridReport> {
    if grid.is_empty() {
        return Err(Error::config("learning-rate grid is empty"));
    }
    if strategies.is_empty() {
        return Err(Error::config("no strategies to search"));
    }
    let data: Vec<(u64, TaskData)> = base
        .seeds
        .iter()
        .map(|&s| generate_task(&base.task, s).map(|d| (s, d)))
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    let mut best = Vec::new();
    for &strategy in strategies {
        let mut choice: Option<(f64, f64)> = None;
        for &lr in grid {
            let cfg = RunConfig {
                strategy,
                lr,
                ..base.clone()
            };
            let mut values = Vec::new();
            for (seed, d) in &data {
                let r = train_on(&cfg, pre, d, *seed)?;
                let fm = r.final_value().filter(|v| v.is_finite());
                values.extend(fm);
                cells.push(GridCell {
                    strategy: strategy.to_string(),
                    lr,
                    seed: *seed,
                    initial_loss: r.initial_loss,
                    final_loss: r.final_loss,
                    final_metric: fm,
                    converged: r.converged(),
                    diverged: r.diverged,
                });
            }
            // a rate counts only if every seed produced a metric
            if values.len() == data.len() {
                let m = mean_std(&values).0;
                if choice.is_none_or(|(_, b)| m < b) {
                    choice = Some((lr, m));
                }
            }
        }
        best.push((strategy.to_string(), choice.map(|(lr, _)| lr)));
    }
    let report = GridReport { cells, best };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_csv_file(&dir.join("lrgrid.csv"), &report.cells)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub layer: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub rows: Vec<WeightRow>,
    pub centroid: f64,
    pub num_layers: usize,
}

/// Per-layer weights and their centroid from a finished run.
pub fn layer_weight_report(report: &RunReport) -> Result<WeightReport> {
    let num_layers = report.num_layers;
    let w = report
        .layer_weights
        .as_ref()
        .ok_or_else(|| Error::NoLayerWeights(report.strategy.to_string()))?;
    Ok(WeightReport {
        rows: report
            .weighted_layers
            .iter()
            .zip(w)
            .map(|(&layer, &weight)| WeightRow { layer, weight })
            .collect(),
        centroid: weight_centroid(&report.weighted_layers, w, num_layers),
        num_layers,
    })
}

/// Writes `weights.csv` and `weights.svg`.
pub fn write_weight_report(report: &WeightReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv_file(&dir.join("weights.csv"), &report.rows)?;
    std::fs::write(dir.join("weights.svg"), weights_svg(report))?;
    Ok(())
}

/// Bar chart of layer weights, bottom layer on the left.
pub fn weights_svg(report: &WeightReport) -> String {
    let (w, h, pad) = (60.0 * report.rows.len().max(1) as f64 + 40.0, 240.0, 20.0);
    let top = report.rows.iter().map(|r| r.weight).fold(0.0, f64::max).max(1e-12);
    let plot_h = h - 3.0 * pad;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <text x=\"{pad}\" y=\"{}\" font-size=\"12\">layer weights (centroid {:.4})</text>\n",
        pad - 6.0,
        report.centroid
    );
    for (i, r) in report.rows.iter().enumerate() {
        let bh = plot_h * r.weight / top;
        let x = pad + 60.0 * i as f64;
        let y = pad + plot_h - bh;
        s.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y:.2}\" width=\"40\" height=\"{bh:.2}\" fill=\"#4a78b5\"><title>{:.6}</title></rect>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            r.weight,
            x + 20.0,
            h - pad,
            r.layer
        ));
    }
    s.push_str("</svg>\n");
    s
}
