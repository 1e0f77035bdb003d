use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{ReplicateMetrics, Scenario};
use crate::data::SCHEMA_VERSION;
use crate::error::Result;

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Cell {
    fn from_values(v: &[f64]) -> Option<Cell> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let se = if v.len() > 1 {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            f64::NAN
        };
        Some(Cell { mean, se, n: v.len() })
    }
}

pub const COLUMNS: [&str; 11] = [
    "bias_f1",
    "cvg_f1",
    "bias_f2",
    "cvg_f2",
    "bias_sigma0",
    "bias_sigma1",
    "bias_rho",
    "rmsep_u0",
    "rmsep_u1",
    "cvg_f1_naive",
    "cvg_f2_naive",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    /// One entry per name in `COLUMNS`; `None` where the metric does not apply.
    pub cells: Vec<Option<Cell>>,
}

impl ModelRow {
    pub fn get(&self, column: &str) -> Option<Cell> {
        let i = COLUMNS.iter().position(|c| *c == column)?;
        self.cells[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: Scenario,
    pub replications: usize,
    pub failed: Vec<(usize, String)>,
    /// More than 10% of replicates failed.
    pub unreliable: bool,
    pub rows: Vec<ModelRow>,
    pub replicates: Vec<ReplicateMetrics>,
}

impl StudyReport {
    pub fn aggregate(scenario: &Scenario, replicates: Vec<ReplicateMetrics>) -> Self {
        let failed: Vec<(usize, String)> = replicates
            .iter()
            .filter_map(|r| r.error.clone().map(|e| (r.replicate, e)))
            .collect();
        let ok: Vec<&ReplicateMetrics> = replicates.iter().filter(|r| r.error.is_none()).collect();
        let col = |f: &dyn Fn(&ReplicateMetrics) -> Option<f64>| -> Option<Cell> {
            let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            Cell::from_values(&v)
        };

        let gam = ModelRow {
            model: "GAM".into(),
            cells: vec![
                col(&|r| r.gam.map(|g| g[0].bias)),
                col(&|r| r.gam.map(|g| g[0].coverage)),
                col(&|r| r.gam.map(|g| g[1].bias)),
                col(&|r| r.gam.map(|g| g[1].coverage)),
                None,
                None,
                None,
                None,
                None,
                None,
                None,
            ],
        };
        let re_cells = |k: usize| col(&move |r: &ReplicateMetrics| r.gamm.as_ref().and_then(|g| g.bias[k]));
        let rmsep = |k: usize| col(&move |r: &ReplicateMetrics| r.gamm.as_ref().and_then(|g| g.rmsep[k]));
        let gamm = ModelRow {
            model: "GAMM".into(),
            cells: vec![
                None,
                None,
                None,
                None,
                re_cells(0),
                re_cells(1),
                re_cells(2),
                rmsep(0),
                rmsep(1),
                None,
                None,
            ],
        };
        let mam = ModelRow {
            model: "MAM".into(),
            cells: vec![
                col(&|r| r.mam.map(|g| g[0].bias)),
                col(&|r| r.mam.map(|g| g[0].coverage)),
                col(&|r| r.mam.map(|g| g[1].bias)),
                col(&|r| r.mam.map(|g| g[1].coverage)),
                re_cells(0),
                re_cells(1),
                re_cells(2),
                rmsep(0),
                rmsep(1),
                col(&|r| r.mam_naive_coverage.map(|c| c[0])),
                col(&|r| r.mam_naive_coverage.map(|c| c[1])),
            ],
        };
        let unreliable = failed.len() * 10 > replicates.len();
        StudyReport {
            scenario: scenario.clone(),
            replications: replicates.len(),
            failed,
            unreliable,
            rows: vec![gam, gamm, mam],
            replicates,
        }
    }

    pub fn row(&self, model: &str) -> Option<&ModelRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Table with one row per model: each metric followed by its MC standard
    /// error; empty fields where a metric does not apply.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec![
            "schema_version".to_string(),
            "model".into(),
            "n_clusters".into(),
            "cluster_size".into(),
            "replicates_ok".into(),
            "replicates_failed".into(),
        ];
        for c in COLUMNS {
            header.push(c.to_string());
            header.push(format!("{c}_se"));
        }
        wr.write_record(&header)?;
        let ok = self.replications - self.failed.len();
        for row in &self.rows {
            let mut rec = vec![
                SCHEMA_VERSION.to_string(),
                row.model.clone(),
                self.scenario.n_clusters.to_string(),
                self.scenario.cluster_size.to_string(),
                ok.to_string(),
                self.failed.len().to_string(),
            ];
            for cell in &row.cells {
                match cell {
                    Some(c) => {
                        rec.push(format!("{:.6}", c.mean));
                        rec.push(format!("{:.6}", c.se));
                    }
                    None => {
                        rec.push(String::new());
                        rec.push(String::new());
                    }
                }
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Per-replicate dump for auditing.
    pub fn write_replicates_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "schema_version",
            "replicate",
            "error",
            "gam_bias_f1",
            "gam_cvg_f1",
            "gam_bias_f2",
            "gam_cvg_f2",
            "mam_bias_f1",
            "mam_cvg_f1",
            "mam_bias_f2",
            "mam_cvg_f2",
            "sigma0_hat",
            "sigma1_hat",
            "rho_hat",
            "rmsep_u0",
            "rmsep_u1",
        ])?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.replicates {
            let g = r.gam;
            let m = r.mam;
            let re = r.gamm.as_ref();
            wr.write_record([
                SCHEMA_VERSION.to_string(),
                r.replicate.to_string(),
                r.error.clone().unwrap_or_default(),
                f(g.map(|c| c[0].bias)),
                f(g.map(|c| c[0].coverage)),
                f(g.map(|c| c[1].bias)),
                f(g.map(|c| c[1].coverage)),
                f(m.map(|c| c[0].bias)),
                f(m.map(|c| c[0].coverage)),
                f(m.map(|c| c[1].bias)),
                f(m.map(|c| c[1].coverage)),
                f(re.and_then(|x| x.estimate[0])),
                f(re.and_then(|x| x.estimate[1])),
                f(re.and_then(|x| x.estimate[2])),
                f(re.and_then(|x| x.rmsep[0])),
                f(re.and_then(|x| x.rmsep[1])),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}
