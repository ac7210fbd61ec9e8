use serde::Serialize;

use super::{evaluate, TrainConfig, TrainState, TrainingSet};
use crate::data::LogWedge;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::ModelSpec;
use crate::tensor::Precision;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub m: usize,
    pub n: usize,
    pub encoder_parameters: usize,
    pub final_loss: f64,
    pub metrics: MetricsReport,
}

/// Results of training every `(m, n)` pair, row-major over `ms` then `ns`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridReport {
    pub ms: Vec<usize>,
    pub ns: Vec<usize>,
    pub d: usize,
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn cell(&self, m: usize, n: usize) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.m == m && c.n == n)
    }

    /// Long-format CSV, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,n,encoder_parameters,final_loss,mae,precision,recall\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |x| x.to_string());
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.m,
                c.n,
                c.encoder_parameters,
                c.final_loss,
                c.metrics.mae,
                opt(c.metrics.precision),
                opt(c.metrics.recall)
            ));
        }
        out
    }

    /// Text matrix with one row per `m` and one column per `n`.
    pub fn matrix(&self, metric: impl Fn(&MetricsReport) -> Option<f64>) -> String {
        let mut out = String::from("m\\n");
        for n in &self.ns {
            out.push_str(&format!("\t{n}"));
        }
        for &m in &self.ms {
            out.push_str(&format!("\n{m}"));
            for &n in &self.ns {
                let v = self.cell(m, n).and_then(|c| metric(&c.metrics));
                out.push_str(&v.map_or_else(|| "\tNA".to_owned(), |x| format!("\t{x:.4}")));
            }
        }
        out.push('\n');
        out
    }
}

/// Train BCAE-2D(m, n, d) for every pair and score each on `test`.
/// `base` supplies the trunk width, radial layer count and threshold.
pub fn grid_search(
    ms: &[usize],
    ns: &[usize],
    d: usize,
    base: &ModelSpec,
    data: &TrainingSet,
    test: &[LogWedge],
    config: &TrainConfig,
    mut on_cell: impl FnMut(&GridCell),
) -> Result<GridReport> {
    if ms.is_empty() || ns.is_empty() {
        return Err(Error::config("grid needs at least one m and one n"));
    }
    if test.is_empty() {
        return Err(Error::config("grid evaluation set is empty"));
    }
    let mut cells = Vec::with_capacity(ms.len() * ns.len());
    for &m in ms {
        for &n in ns {
            let spec = ModelSpec {
                m,
                n,
                d,
                ..base.clone()
            };
            let mut state = TrainState::new(spec, config.clone())?;
            let logs = state.train(data, |_| {})?;
            let eval = evaluate(&state.model, test, Precision::Full32, state.model.spec.seg_threshold)?;
            let cell = GridCell {
                m,
                n,
                encoder_parameters: state.model.encoder_parameters(),
                final_loss: logs.last().map_or(f64::NAN, |l| l.combined_loss()),
                metrics: eval.aggregate,
            };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    Ok(GridReport {
        ms: ms.to_vec(),
        ns: ns.to_vec(),
        d,
        cells,
    })
}
