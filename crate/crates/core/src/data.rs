//! Datasets: CSV ingestion, standardization, train/test splits, metrics and
//! the synthetic generator.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gp_exact::{sample_gp, WeightedKernel};
use crate::kernel::{BaseKernel, KernelExpr, KernelPool};
use crate::linalg::eigh_desc;
use crate::quadrature::gauss_hermite;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[default]
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub task: Task,
    pub input_columns: Vec<String>,
    pub target_column: String,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, task: Task, input_columns: Vec<String>, target_column: String) -> Result<Self> {
        let ds = Dataset { x, y, task, input_columns, target_column };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() != self.y.len() {
            return Err(Error::Dimension(format!("{} input rows and {} targets", self.x.nrows(), self.y.len())));
        }
        if self.input_columns.len() != self.x.ncols() {
            return Err(Error::Dimension("column names do not match input columns".into()));
        }
        if self.x.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset".into()));
        }
        if self.task == Task::Classification && self.y.iter().any(|t| *t != 0.0 && *t != 1.0) {
            return Err(Error::InvalidArgument("classification targets must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: DMatrix::from_fn(idx.len(), self.x.ncols(), |r, c| self.x[(idx[r], c)]),
            y: DVector::from_fn(idx.len(), |r, _| self.y[idx[r]]),
            task: self.task,
            input_columns: self.input_columns.clone(),
            target_column: self.target_column.clone(),
        }
    }

    /// Writes inputs then target, with a header row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = self.input_columns.clone();
        header.push(self.target_column.clone());
        wr.write_record(&header).map_err(csv_io)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{:?}", self.y[i]));
            wr.write_record(&rec).map_err(csv_io)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, message: format!("{other:?}") },
    }
}

/// Per-column affine transform to zero mean and unit variance. Targets are
/// only rescaled for regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std<'a>(v: impl Iterator<Item = &'a f64> + Clone) -> (f64, f64) {
    let n = v.clone().count().max(1) as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 0.0 && sd.is_finite() { sd } else { 1.0 })
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let (x_mean, x_std) = (0..ds.input_dim()).map(|c| mean_std(ds.x.column(c).iter())).unzip();
        let (y_mean, y_std) = match ds.task {
            Task::Regression => mean_std(ds.y.iter()),
            Task::Classification => (0.0, 1.0),
        };
        Standardizer { x_mean, x_std, y_mean, y_std }
    }

    pub fn identity(d: usize) -> Self {
        Standardizer { x_mean: vec![0.0; d], x_std: vec![1.0; d], y_mean: 0.0, y_std: 1.0 }
    }

    pub fn transform_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.x_mean.len() {
            return Err(Error::Dimension(format!("{} input columns, transform expects {}", x.ncols(), self.x_mean.len())));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - self.x_mean[c]) / self.x_std[c]))
    }

    pub fn inverse_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| x[(r, c)] * self.x_std[c] + self.x_mean[c])
    }

    pub fn transform_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.y_mean) / self.y_std)
    }

    pub fn inverse_mean(&self, m: &DVector<f64>) -> DVector<f64> {
        m.map(|v| v * self.y_std + self.y_mean)
    }

    pub fn inverse_var(&self, v: &DVector<f64>) -> DVector<f64> {
        v * (self.y_std * self.y_std)
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            x: self.transform_x(&ds.x)?,
            y: self.transform_y(&ds.y),
            ..ds.clone()
        })
    }
}

/// Parses a CSV with a header row. The target column is `target` if given,
/// else the last column. Errors carry 1-based line numbers.
pub fn load_csv_reader<R: Read>(reader: R, target: Option<&str>, task: Task) -> Result<Dataset> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rd.headers().map_err(csv_io)?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(Error::Parse { line: 1, message: "need at least one input column and a target column".into() });
    }
    if let Some(dup) = header.iter().enumerate().find_map(|(i, h)| header[..i].contains(h).then_some(h)) {
        return Err(Error::Parse { line: 1, message: format!("duplicate column name {dup:?}") });
    }
    let t = match target {
        Some(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse { line: 1, message: format!("no column named {name:?}") })?,
        None => header.len() - 1,
    };
    let mut rows: Vec<f64> = Vec::new();
    let mut ys = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_io)?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Parse { line, message: format!("{} fields, header has {}", rec.len(), header.len()) });
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse { line, message: format!("column {:?}: {field:?} is not a number", header[c]) })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, message: format!("column {:?}: non-finite value", header[c]) });
            }
            if task == Task::Classification && c == t && v != 0.0 && v != 1.0 {
                return Err(Error::Parse { line, message: format!("class label {v} is not 0 or 1") });
            }
            if c == t {
                ys.push(v);
            } else {
                rows.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(Error::Parse { line: 1, message: "no data rows".into() });
    }
    let d = header.len() - 1;
    let x = DMatrix::from_row_slice(ys.len(), d, &rows);
    let mut inputs = header.clone();
    let target_column = inputs.remove(t);
    Dataset::new(x, DVector::from_vec(ys), task, inputs, target_column)
}

/// Loads a CSV file and standardizes it; returns the standardized dataset
/// and the transform needed to map predictions back.
pub fn load_csv(path: &Path, target: Option<&str>, task: Task) -> Result<(Dataset, Standardizer)> {
    let raw = load_csv_reader(std::fs::File::open(path)?, target, task)?;
    let st = Standardizer::fit(&raw);
    Ok((st.apply(&raw)?, st))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode")]
pub enum SplitSpec {
    /// `fraction` of the rows go to the training set.
    Random { fraction: f64, seed: u64 },
    PcaExtrapolation,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Random { fraction: 0.9, seed: 0 }
    }
}

/// Minimum dataset size for the extrapolation split.
pub const PCA_MIN_ROWS: usize = 15;

/// Row order along the first principal component (stable in ties).
pub fn principal_order(x: &DMatrix<f64>) -> Vec<usize> {
    let n = x.nrows();
    let means: Vec<f64> = (0..x.ncols()).map(|c| x.column(c).mean()).collect();
    let centered = DMatrix::from_fn(n, x.ncols(), |r, c| x[(r, c)] - means[c]);
    let (_, vecs) = eigh_desc(&(centered.transpose() * &centered));
    let mut pc = vecs.column(0).into_owned();
    // Fix the sign so that the largest loading is positive.
    let imax = pc.iamax();
    if pc[imax] < 0.0 {
        pc = -pc;
    }
    let proj = &centered * pc;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]));
    order
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    match *spec {
        SplitSpec::Random { fraction, seed } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
            }
            let n_train = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
            if n < 2 {
                return Err(Error::InvalidArgument("need at least 2 rows to split".into()));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            Ok((ds.subset(&idx[..n_train]), ds.subset(&idx[n_train..])))
        }
        SplitSpec::PcaExtrapolation => {
            if n < PCA_MIN_ROWS {
                return Err(Error::InvalidArgument(format!("extrapolation split needs at least {PCA_MIN_ROWS} rows, got {n}")));
            }
            let k = n / 15;
            let order = principal_order(&ds.x);
            let mut test: Vec<usize> = order[..k].to_vec();
            test.extend_from_slice(&order[n - k..]);
            Ok((ds.subset(&order[k..n - k]), ds.subset(&test)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task: Task,
    pub n: usize,
    /// Regression only.
    pub rmse: Option<f64>,
    /// Classification only.
    pub error_rate: Option<f64>,
    pub mean_log_likelihood: f64,
    /// `−mean_log_likelihood`.
    pub nll: f64,
}

/// RMSE and mean Gaussian log predictive density; `var` must already
/// include the observation noise.
pub fn regression_metrics(y: &DVector<f64>, mean: &DVector<f64>, var: &DVector<f64>) -> Result<Metrics> {
    if y.len() != mean.len() || y.len() != var.len() || y.is_empty() {
        return Err(Error::Dimension("targets and predictions differ in length".into()));
    }
    let n = y.len() as f64;
    let rmse = ((y - mean).norm_squared() / n).sqrt();
    let mut ll = 0.0;
    for i in 0..y.len() {
        if !(var[i] > 0.0) {
            return Err(Error::InvalidArgument("predictive variance must be positive".into()));
        }
        ll += -0.5 * (2.0 * PI * var[i]).ln() - (y[i] - mean[i]).powi(2) / (2.0 * var[i]);
    }
    let mll = ll / n;
    Ok(Metrics { task: Task::Regression, n: y.len(), rmse: Some(rmse), error_rate: None, mean_log_likelihood: mll, nll: -mll })
}

/// `P(y = 1) = E[σ(f)]` for `f ~ N(μ, v)`.
pub fn class_probabilities(mean: &DVector<f64>, var: &DVector<f64>) -> DVector<f64> {
    let rule = gauss_hermite(crate::trainer::QUADRATURE_NODES);
    DVector::from_fn(mean.len(), |i, _| {
        crate::quadrature::normal_expectation(&rule, mean[i], var[i], |f| 1.0 / (1.0 + (-f).exp()))
    })
}

/// Error rate at threshold ½ and mean Bernoulli log-likelihood.
pub fn classification_metrics(y: &DVector<f64>, p: &DVector<f64>) -> Result<Metrics> {
    if y.len() != p.len() || y.is_empty() {
        return Err(Error::Dimension("targets and predictions differ in length".into()));
    }
    let n = y.len() as f64;
    let mut wrong = 0usize;
    let mut ll = 0.0;
    for i in 0..y.len() {
        let pi = p[i].clamp(1e-300, 1.0 - 1e-16);
        if (pi > 0.5) != (y[i] == 1.0) {
            wrong += 1;
        }
        ll += if y[i] == 1.0 { pi.ln() } else { (1.0 - pi).ln() };
    }
    let mll = ll / n;
    Ok(Metrics {
        task: Task::Classification,
        n: y.len(),
        rmse: None,
        error_rate: Some(wrong as f64 / n),
        mean_log_likelihood: mll,
        nll: -mll,
    })
}

/// Generator of a synthetic 1-D regression set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
    pub kernel: KernelPool,
    pub weights: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// `PER₁ + SE × PER₂` on 100 grid points in `[−5, 5]`.
    fn default() -> Self {
        SynthSpec {
            n: 100,
            lo: -5.0,
            hi: 5.0,
            kernel: KernelPool::new(vec![
                KernelExpr::single(BaseKernel::per(1.0, 1.0)),
                KernelExpr::product(BaseKernel::se(3.0), BaseKernel::per(1.0, 3.0)),
            ]),
            weights: vec![0.5, 1.0],
            noise: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub dataset: Dataset,
    /// The generator settings (ground truth for spike checks).
    pub truth: SynthSpec,
}

/// Samples `y ~ N(0, Σ w_i² k_i + σ²I)` on a uniform grid.
pub fn run_synth(spec: &SynthSpec) -> Result<SynthData> {
    if spec.n < 2 || !(spec.hi > spec.lo) {
        return Err(Error::Config("synthetic grid needs n ≥ 2 and hi > lo".into()));
    }
    let x = DMatrix::from_fn(spec.n, 1, |i, _| spec.lo + (spec.hi - spec.lo) * i as f64 / (spec.n - 1) as f64);
    let wk = WeightedKernel::new(spec.kernel.clone(), spec.weights.clone())?;
    let y = sample_gp(&wk, &x, spec.noise, spec.seed)?;
    let dataset = Dataset::new(x, y, Task::Regression, vec!["x".into()], "y".into())?;
    Ok(SynthData { dataset, truth: spec.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_line_csv() {
        let ds = load_csv_reader("x,y\n0,1\n1,2\n".as_bytes(), None, Task::Regression).unwrap();
        assert_eq!((ds.len(), ds.input_dim()), (2, 1));
        assert_eq!(ds.target_column, "y");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = load_csv_reader("a,b\n1,2\n3,oops\n".as_bytes(), None, Task::Regression).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e:?}");
        let e = load_csv_reader("a,b\n1,2\n3,NaN\n".as_bytes(), None, Task::Regression).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e:?}");
        let e = load_csv_reader("a,b\n1,2\n3\n".as_bytes(), None, Task::Regression).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
        assert!(load_csv_reader("a,b\n1,0.5\n".as_bytes(), None, Task::Classification).is_err());
        let e = load_csv_reader("1,1\n3,4\n".as_bytes(), None, Task::Regression).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e:?}");
    }

    #[test]
    fn target_by_name() {
        let ds = load_csv_reader("t,a,b\n1,2,3\n0,5,6\n".as_bytes(), Some("t"), Task::Classification).unwrap();
        assert_eq!(ds.input_columns, vec!["a", "b"]);
        assert_eq!(ds.y.as_slice(), &[1.0, 0.0]);
        assert_eq!(ds.x.row(1).iter().copied().collect::<Vec<_>>(), vec![5.0, 6.0]);
    }

    #[test]
    fn standardized_columns_have_zero_mean() {
        let raw = load_csv_reader("a,b,y\n1,10,3\n2,30,4\n4,20,8\n".as_bytes(), None, Task::Regression).unwrap();
        let st = Standardizer::fit(&raw);
        let ds = st.apply(&raw).unwrap();
        for c in 0..2 {
            assert!(ds.x.column(c).mean().abs() < 1e-10);
        }
        let back = st.inverse_x(&ds.x);
        assert!((back - &raw.x).amax() < 1e-12);
        assert!((st.inverse_mean(&ds.y) - &raw.y).amax() < 1e-12);
    }

    #[test]
    fn pca_split_sizes() {
        let x = DMatrix::from_fn(150, 1, |i, _| ((i * 37) % 150) as f64);
        let ds = Dataset::new(x.clone(), x.column(0).into_owned(), Task::Regression, vec!["x".into()], "y".into()).unwrap();
        let (train, test) = split(&ds, &SplitSpec::PcaExtrapolation).unwrap();
        assert_eq!((train.len(), test.len()), (130, 20));
        let mut t: Vec<f64> = test.x.iter().copied().collect();
        t.sort_by(f64::total_cmp);
        assert_eq!(t[..10], (0..10).map(|v| v as f64).collect::<Vec<_>>()[..]);
        assert_eq!(t[10..], (140..150).map(|v| v as f64).collect::<Vec<_>>()[..]);
        let small = ds.subset(&(0..14).collect::<Vec<_>>());
        assert!(split(&small, &SplitSpec::PcaExtrapolation).is_err());
    }

    #[test]
    fn random_split_is_seeded() {
        let x = DMatrix::from_fn(20, 2, |i, j| (i + j) as f64);
        let ds = Dataset::new(x, DVector::from_fn(20, |i, _| i as f64), Task::Regression, vec!["a".into(), "b".into()], "y".into()).unwrap();
        let spec = SplitSpec::Random { fraction: 0.9, seed: 5 };
        let (a, b) = split(&ds, &spec).unwrap();
        assert_eq!(split(&ds, &spec).unwrap(), (a.clone(), b.clone()));
        assert_eq!((a.len(), b.len()), (18, 2));
        assert!(split(&ds, &SplitSpec::Random { fraction: 1.0, seed: 0 }).is_err());
    }

    #[test]
    fn metric_definitions() {
        let y = DVector::from_vec(vec![1.0, 2.0, 6.0]);
        let m = regression_metrics(&y, &y, &DVector::from_element(3, 1e-12)).unwrap();
        assert_eq!(m.rmse, Some(0.0));
        let c = DVector::from_element(3, y.mean());
        let m = regression_metrics(&y, &c, &DVector::from_element(3, 1.0)).unwrap();
        let sd = (y.iter().map(|v| (v - y.mean()).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((m.rmse.unwrap() - sd).abs() < 1e-12);
        let labels = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let p = DVector::from_vec(vec![0.9, 0.2, 0.4, 0.1]);
        let m = classification_metrics(&labels, &p).unwrap();
        assert_eq!(m.error_rate, Some(0.25));
    }

    #[test]
    fn synth_defaults() {
        let a = run_synth(&SynthSpec::default()).unwrap();
        let b = run_synth(&SynthSpec::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset.len(), 100);
        assert_eq!(a.dataset.x[(0, 0)], -5.0);
        assert_eq!(a.dataset.x[(99, 0)], 5.0);
        let kinds: Vec<_> = a.truth.kernel.members.iter().map(|k| k.kinds()).collect();
        use crate::kernel::BaseKind::*;
        assert_eq!(kinds, vec![vec![PER], vec![SE, PER]]);
        let var = a.dataset.y.iter().map(|v| v * v).sum::<f64>() / 100.0;
        let prior: f64 = a.truth.weights.iter().map(|w| w * w).sum::<f64>() + a.truth.noise;
        assert!(var > 0.2 * prior && var < 5.0 * prior, "{var} vs {prior}");
    }

    #[test]
    fn csv_round_trip() {
        let a = run_synth(&SynthSpec { n: 7, ..Default::default() }).unwrap().dataset;
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let b = load_csv_reader(buf.as_slice(), None, Task::Regression).unwrap();
        assert_eq!(a, b);
    }
}
