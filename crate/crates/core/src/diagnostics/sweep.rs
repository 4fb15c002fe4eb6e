//! Grid sweeps over `k`, attachment mode, `β` and seed.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::AttachmentMode;
use crate::data::LabeledImageDataset;
use crate::error::{ensure, Result, SfeError};
use crate::trainer::{ExperimentConfig, Seeds, Trainer};

pub const CSV_HEADER: [&str; 9] = ["k", "layer", "mode", "beta", "seed", "acc_si", "acc_ag", "wall_ms", "status"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub ks: Vec<usize>,
    pub modes: Vec<AttachmentMode>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Base experiment inline...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<ExperimentConfig>,
    /// ...or in a separate file, relative to the grid file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_config: Option<PathBuf>,
}

impl SweepGrid {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SfeError::io(path, e))?;
        let mut grid: SweepGrid =
            toml::from_str(&text).map_err(|e| SfeError::config(format!("{}: {e}", path.display())))?;
        if grid.base.is_none() {
            if let Some(rel) = &grid.base_config {
                let p = path.parent().unwrap_or(Path::new(".")).join(rel);
                grid.base = Some(ExperimentConfig::load(p)?);
            }
        }
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.ks.is_empty() && !self.modes.is_empty() && !self.betas.is_empty() && !self.seeds.is_empty(),
            SfeError::config("every sweep axis needs at least one value")
        );
        ensure!(self.base.is_some(), SfeError::config("sweep grid needs `base` or `base_config`"));
        Ok(())
    }

    pub fn base(&self) -> &ExperimentConfig {
        self.base.as_ref().expect("validated grid has a base")
    }

    /// Cells in CSV order: mode, k, β, seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &k in &self.ks {
                for &beta in &self.betas {
                    for &seed in &self.seeds {
                        out.push(Cell { mode, k, beta, seed });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mode: AttachmentMode,
    pub k: usize,
    pub beta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    /// 1-based stages carrying heads, or the expansion stage in propagate mode.
    pub layer: String,
    pub mode: String,
    pub beta: f64,
    pub seed: u64,
    pub acc_si: Option<f64>,
    pub acc_ag: Option<f64>,
    pub wall_ms: Option<f64>,
    pub status: String,
}

fn layer_label(mode: AttachmentMode, stages: usize) -> String {
    match mode {
        AttachmentMode::SingleClassifierAtLayer(l) => l.to_string(),
        AttachmentMode::Baseline => stages.to_string(),
        AttachmentMode::TwoClassifier => format!("{}+{}", stages - 1, stages),
        AttachmentMode::ThreeClassifier => format!("{}+{}+{}", stages - 2, stages - 1, stages),
    }
}

fn run_cell(base: &ExperimentConfig, cell: Cell, train: &LabeledImageDataset, test: &LabeledImageDataset) -> SweepRow {
    let mut row = SweepRow {
        k: cell.k,
        layer: layer_label(cell.mode, base.backbone.stages()),
        mode: cell.mode.to_string(),
        beta: cell.beta,
        seed: cell.seed,
        acc_si: None,
        acc_ag: None,
        wall_ms: None,
        status: "ok".into(),
    };
    let mut cfg = base.clone();
    cfg.plan.mode = cell.mode;
    cfg.plan.k = cell.k;
    cfg.plan.beta = cell.beta;
    cfg.seeds = Seeds::all(cell.seed);
    let result = Trainer::<f32>::with_data(cfg, train.clone(), test.clone()).and_then(|mut t| t.run(None));
    match result {
        Ok(recs) => {
            let last = recs.last().expect("at least one epoch");
            row.acc_si = Some(last.acc_si);
            row.acc_ag = Some(last.acc_ag);
            row.wall_ms = Some(recs.iter().map(|r| r.wall_ms_per_iter).sum::<f64>() / recs.len() as f64);
        }
        Err(e) => row.status = format!("error: {e}"),
    }
    row
}

/// Train every cell (at most `jobs` at a time) and return rows in grid order.
/// Failed cells are reported in their `status` column.
pub fn run_sweep(grid: &SweepGrid, jobs: usize) -> Result<Vec<SweepRow>> {
    grid.validate()?;
    let base = grid.base();
    let (train, test) = base.dataset.load()?;
    let cells = grid.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| SfeError::config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(|&c| run_cell(base, c, &train, &test)).collect()))
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let err = |e: csv::Error| SfeError::data(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| SfeError::data(format!("csv: {e}")))
}

pub fn write_csv_file(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| SfeError::io(path, e))?;
    write_csv(rows, f)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| SfeError::format(path, e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| SfeError::format(path, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    ensure!(header == CSV_HEADER, SfeError::format(path, format!("unexpected header {header:?}")));
    r.deserialize()
        .map(|row| row.map_err(|e| SfeError::format(path, e.to_string())))
        .collect()
}

/// Mean and standard deviation of SI accuracy per β over successful rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaPoint {
    pub beta: f64,
    pub n: usize,
    pub mean_acc_si: f64,
    pub std_acc_si: f64,
    pub mean_acc_ag: f64,
}

pub fn beta_curve(rows: &[SweepRow]) -> Vec<BetaPoint> {
    let mut betas: Vec<f64> = rows.iter().map(|r| r.beta).collect();
    betas.sort_by(|a, b| a.total_cmp(b));
    betas.dedup();
    betas
        .into_iter()
        .filter_map(|beta| {
            let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.beta == beta && r.acc_si.is_some()).collect();
            if ok.is_empty() {
                return None;
            }
            let n = ok.len() as f64;
            let si: Vec<f64> = ok.iter().filter_map(|r| r.acc_si).collect();
            let mean = si.iter().sum::<f64>() / n;
            let var = si.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            Some(BetaPoint {
                beta,
                n: ok.len(),
                mean_acc_si: mean,
                std_acc_si: var.sqrt(),
                mean_acc_ag: ok.iter().filter_map(|r| r.acc_ag).sum::<f64>() / n,
            })
        })
        .collect()
}

pub fn write_beta_curve(points: &[BetaPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| SfeError::format(path, e.to_string()))?;
    for p in points {
        w.serialize(p).map_err(|e| SfeError::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| SfeError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;

    fn tiny_base() -> ExperimentConfig {
        let mut c = ExperimentConfig::quick_synthetic();
        c.backbone.stage_channels = vec![4, 8, 8];
        c.backbone.input_shape = [3, 8, 8];
        c.dataset = DatasetSpec::Synthetic {
            classes: 4,
            per_class: 4,
            test_per_class: 2,
            size: [3, 8, 8],
            seed: 0,
        };
        c.batch.train = 8;
        c.schedule.epochs = 1;
        c.schedule.milestones = vec![];
        c
    }

    fn grid(ks: Vec<usize>, modes: Vec<AttachmentMode>, betas: Vec<f64>, seeds: Vec<u64>) -> SweepGrid {
        SweepGrid {
            ks,
            modes,
            betas,
            seeds,
            base: Some(tiny_base()),
            base_config: None,
        }
    }

    #[test]
    fn beta_grid_yields_one_row_per_cell_and_seed() {
        let g = grid(vec![2], vec![AttachmentMode::TwoClassifier], vec![0.1, 0.5, 1.0], vec![0, 1]);
        let rows = run_sweep(&g, 2).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.status == "ok" && r.layer == "2+3"));
        let curve = beta_curve(&rows);
        assert_eq!(curve.iter().map(|p| p.beta).collect::<Vec<_>>(), vec![0.1, 0.5, 1.0]);
        assert!(curve.iter().all(|p| p.n == 2));
    }

    #[test]
    fn failed_cells_are_recorded_and_the_rest_run() {
        let g = grid(vec![2, 64], vec![AttachmentMode::SingleClassifierAtLayer(1)], vec![0.5], vec![0]);
        let rows = run_sweep(&g, 1).unwrap();
        assert_eq!(rows[0].status, "ok");
        assert!(rows[1].status.starts_with("error:"), "{}", rows[1].status);
        assert!(rows[1].acc_si.is_none());
    }

    #[test]
    fn csv_round_trips_with_fixed_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let rows = vec![SweepRow {
            k: 4,
            layer: "1".into(),
            mode: "single@1".into(),
            beta: 0.5,
            seed: 3,
            acc_si: Some(0.25),
            acc_ag: None,
            wall_ms: Some(1.5),
            status: "error: x, y".into(),
        }];
        write_csv_file(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("k,layer,mode,beta,seed,acc_si,acc_ag,wall_ms,status\n"));
        assert_eq!(read_csv(&p).unwrap(), rows);
    }

    #[test]
    fn grid_file_with_external_base() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.toml"), tiny_base().to_toml_string().unwrap()).unwrap();
        std::fs::write(
            dir.path().join("grid.toml"),
            "ks = [4, 8]\nmodes = [\"single@1\", \"two\"]\nbetas = [0.5]\nseeds = [0]\nbase_config = \"base.toml\"\n",
        )
        .unwrap();
        let g = SweepGrid::load(dir.path().join("grid.toml")).unwrap();
        assert_eq!(g.cells().len(), 4);
        assert_eq!(g.base(), &tiny_base());
        std::fs::write(dir.path().join("bad.toml"), "ks = []\nmodes = [\"two\"]\nbetas = [0.5]\nseeds = [0]\n").unwrap();
        assert!(SweepGrid::load(dir.path().join("bad.toml")).is_err());
    }
}
