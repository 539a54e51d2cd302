//! Per-component decomposition of a trained MultiSVGP.
//!
//! Each pool member `i` contributes `GP(w_i μ_i(·), w_i² Σ_i(·, ·))`; the
//! predictive mean is their sum, which is checked on every call.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::kernel::describe;
use crate::multisvgp::{group_conditional_with, marginal_predictive_diag, MultiSvgp};

/// Relative tolerance of the sum check.
pub const SUM_CHECK_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// 1-based rank by weight.
    pub rank: usize,
    /// Position in the pool.
    pub index: usize,
    pub structure: String,
    pub description: String,
    pub weight: f64,
    /// `μ_i` on the grid (unweighted, target units without offset).
    pub mean: Vec<f64>,
    /// Diagonal of `Σ_i` on the grid (unweighted).
    pub variance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// Grid rows in the caller's input units.
    pub grid: Vec<Vec<f64>>,
    pub offset: f64,
    pub total_mean: Vec<f64>,
    pub components: Vec<Component>,
    /// `max_j |offset + Σ_i w_i μ_i(x_j) − total_mean(x_j)|`.
    pub sum_check_error: f64,
}

/// Decomposes `model` on `grid`. With a standardizer, `grid` is in original
/// input units and all outputs are mapped back to target units.
pub fn decompose(model: &MultiSvgp, grid: &DMatrix<f64>, st: Option<&Standardizer>) -> Result<Decomposition> {
    let xs = match st {
        Some(s) => s.transform_x(grid)?,
        None => grid.clone(),
    };
    let (scale, offset) = st.map_or((1.0, 0.0), |s| (s.y_std, s.y_mean));
    let weights = model.weights.summary();
    let (full_mean, _) = marginal_predictive_diag(model, &weights, &xs)?;
    let total_mean: Vec<f64> = full_mean.iter().map(|v| v * scale + offset).collect();
    let mut components = Vec::with_capacity(model.pool.len());
    let mut acc = vec![offset; xs.nrows()];
    for (i, ((g, k), w)) in model.groups.iter().zip(&model.pool.members).zip(&weights).enumerate() {
        let c = group_conditional_with(k, g, &xs, false)?;
        let mean: Vec<f64> = c.mean.iter().map(|v| v * scale).collect();
        for (a, m) in acc.iter_mut().zip(&mean) {
            *a += w * m;
        }
        components.push(Component {
            rank: 0,
            index: i,
            structure: k.name(),
            description: describe(k),
            weight: *w,
            mean,
            variance: c.marg_var.iter().map(|v| v * scale * scale).collect(),
        });
    }
    components.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.index.cmp(&b.index)));
    for (r, c) in components.iter_mut().enumerate() {
        c.rank = r + 1;
    }
    let sum_check_error = acc.iter().zip(&total_mean).map(|(a, t)| (a - t).abs()).fold(0.0, f64::max);
    let tol = SUM_CHECK_TOL * total_mean.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if !(sum_check_error <= tol) {
        return Err(Error::Assertion(format!("decomposition sum check failed: error {sum_check_error:e}")));
    }
    let grid = (0..grid.nrows()).map(|r| grid.row(r).iter().copied().collect()).collect();
    Ok(Decomposition { grid, offset, total_mean, components, sum_check_error })
}

impl Decomposition {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `rank,index,weight,structure,description`.
    pub fn write_components_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["rank", "index", "weight", "structure", "description"]).map_err(io_err)?;
        for c in &self.components {
            wr.write_record([
                c.rank.to_string(),
                c.index.to_string(),
                format!("{:?}", c.weight),
                c.structure.clone(),
                c.description.clone(),
            ])
            .map_err(io_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Long format: `rank,x0..,mean,variance` per component and grid point.
    pub fn write_curves_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.grid.first().map_or(0, Vec::len);
        let mut header = vec!["rank".to_string()];
        header.extend((0..d).map(|i| format!("x{i}")));
        header.extend(["mean".to_string(), "variance".to_string()]);
        wr.write_record(&header).map_err(io_err)?;
        for c in &self.components {
            for (j, row) in self.grid.iter().enumerate() {
                let mut rec = vec![c.rank.to_string()];
                rec.extend(row.iter().map(|v| format!("{v:?}")));
                rec.push(format!("{:?}", c.mean[j]));
                rec.push(format!("{:?}", c.variance[j]));
                wr.write_record(&rec).map_err(io_err)?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Writes `decomposition.json`, `components.csv` and `curves.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("decomposition.json"), self.to_json()?)?;
        self.write_components_csv(std::fs::File::create(dir.join("components.csv"))?)?;
        self.write_curves_csv(std::fs::File::create(dir.join("curves.csv"))?)?;
        Ok(())
    }
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Weight summaries in pool order: `index,structure,kernel_description,weight`.
pub fn write_weights_csv<W: Write>(model: &MultiSvgp, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["index", "structure", "kernel_description", "weight"]).map_err(io_err)?;
    for (i, (k, wt)) in model.pool.members.iter().zip(model.weights.summary()).enumerate() {
        wr.write_record([i.to_string(), k.name(), describe(k), format!("{wt:?}")]).map_err(io_err)?;
    }
    wr.flush()?;
    Ok(())
}
