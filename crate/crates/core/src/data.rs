//! Datasets: synthetic benchmark generators, CSV I/O, splitting, and input
//! standardization.
//!
//! CSV files carry a header row. Inputs are `x1..xd`, the target is `y`,
//! and the optional columns `group`, `noise_floor`, `clean` (noise-free
//! signal) and `t1..tp` (generator parameters) may follow. Values are
//! written with 17 significant digits so reading a file back is lossless.

use std::f64::consts::PI;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{DataSource, RollSampling};
use crate::error::{PpouError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N × d` inputs.
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    /// Repeated-measurement group of each sample.
    pub group: Option<Vec<i64>>,
    /// Per-sample background noise variance.
    pub noise_floor: Option<Vec<f64>>,
    /// Noise-free signal, when known.
    pub clean: Option<Vec<f64>>,
    /// Generator parameters of each sample (e.g. the curve parameter `t`).
    pub param: Option<Array2<f64>>,
    pub provenance: serde_json::Value,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Vec<f64>) -> Result<Self> {
        let ds = Self {
            x,
            y,
            group: None,
            noise_floor: None,
            clean: None,
            param: None,
            provenance: json!({ "source": "memory" }),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.x.nrows() != n {
            return Err(PpouError::invalid(format!(
                "dataset has {} input rows but {n} targets",
                self.x.nrows()
            )));
        }
        let lens = [
            self.group.as_ref().map(|v| v.len()),
            self.noise_floor.as_ref().map(|v| v.len()),
            self.clean.as_ref().map(|v| v.len()),
            self.param.as_ref().map(|p| p.nrows()),
        ];
        if lens.iter().flatten().any(|&l| l != n) {
            return Err(PpouError::invalid("dataset columns have inconsistent row counts"));
        }
        if self.x.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(PpouError::invalid("dataset contains non-finite values"));
        }
        if let Some(nf) = &self.noise_floor {
            if nf.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(PpouError::invalid("noise_floor must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Rows `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            x: self.x.select(Axis(0), idx),
            y: pick(&self.y),
            group: self.group.as_ref().map(|g| idx.iter().map(|&i| g[i]).collect()),
            noise_floor: self.noise_floor.as_ref().map(pick),
            clean: self.clean.as_ref().map(pick),
            param: self.param.as_ref().map(|p| p.select(Axis(0), idx)),
            provenance: self.provenance.clone(),
        }
    }
}

/// Affine per-coordinate map of the training inputs onto `[-1, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub center: Vec<f64>,
    pub half_range: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            half_range: vec![1.0; dim],
        }
    }

    /// Constant columns keep unit scale.
    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let d = x.ncols();
        let mut center = vec![0.0; d];
        let mut half_range = vec![1.0; d];
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if lo.is_finite() && hi.is_finite() {
                center[j] = 0.5 * (lo + hi);
                let h = 0.5 * (hi - lo);
                if h > 0.0 {
                    half_range[j] = h;
                }
            }
        }
        Self { center, half_range }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    #[inline]
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..x.len() {
            out[j] = (x[j] - self.center[j]) / self.half_range[j];
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        out
    }

    pub fn invert(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(j, v)| v * self.half_range[j] + self.center[j])
            .collect()
    }
}

/// `y = sin(2πx) + ε(x)`, `ε(x) ~ N(0, (αx)²)`, `x` evenly spaced on `[0, 1]`.
/// The noise-free signal is stored in `clean`.
pub fn gen_sine_noise(n: usize, alpha: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let denom = (n.max(2) - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / denom).collect();
    let clean: Vec<f64> = xs.iter().map(|x| (2.0 * PI * x).sin()).collect();
    let y = xs
        .iter()
        .zip(&clean)
        .map(|(x, s)| {
            let e: f64 = rng.sample(StandardNormal);
            s + alpha * x * e
        })
        .collect();
    Dataset {
        x: Array2::from_shape_vec((n, 1), xs).expect("shape"),
        y,
        group: None,
        noise_floor: None,
        clean: Some(clean),
        param: None,
        provenance: json!({ "generator": "sine", "n": n, "alpha": alpha, "seed": seed }),
    }
}

/// Open trefoil knot with `t` evenly spaced on `[0, 1.8π]`:
/// `x = (sin t + 2 sin 2t, cos t − 2 cos 2t, −sin 3t)`,
/// `y = πt − t² + (t² − πt) / (1 + exp(−100t))`.
pub fn gen_trefoil(n: usize) -> Dataset {
    let denom = (n.max(2) - 1) as f64;
    let ts: Vec<f64> = (0..n).map(|i| 1.8 * PI * i as f64 / denom).collect();
    let mut x = Array2::zeros((n, 3));
    let mut y = Vec::with_capacity(n);
    for (i, &t) in ts.iter().enumerate() {
        x[(i, 0)] = t.sin() + 2.0 * (2.0 * t).sin();
        x[(i, 1)] = t.cos() - 2.0 * (2.0 * t).cos();
        x[(i, 2)] = -(3.0 * t).sin();
        y.push(PI * t - t * t + (t * t - PI * t) / (1.0 + (-100.0 * t).exp()));
    }
    Dataset {
        x,
        y,
        group: None,
        noise_floor: None,
        clean: None,
        param: Some(Array2::from_shape_vec((n, 1), ts).expect("shape")),
        provenance: json!({ "generator": "trefoil", "n": n }),
    }
}

/// Swiss roll `x = (t₁ cos t₁, t₂, t₁ sin t₁)` with target
/// `y = √t̃₁ · sin(2π t̃₂)`, where `t̃` is `t` min-max normalized over the
/// sample. Samples lie on a `⌈√N⌉`-wide lattice over the parameter
/// rectangle, optionally jittered within each cell.
pub fn gen_swissroll(
    n: usize,
    t1_range: [f64; 2],
    t2_range: [f64; 2],
    sampling: RollSampling,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n1 = (n as f64).sqrt().ceil().max(1.0) as usize;
    let n2 = n.div_ceil(n1).max(1);
    let lattice = |i: usize, cells: usize, lo: f64, hi: f64, jitter: Option<f64>| -> f64 {
        match jitter {
            Some(u) => lo + (hi - lo) * (i as f64 + u) / cells as f64,
            None if cells > 1 => lo + (hi - lo) * i as f64 / (cells - 1) as f64,
            None => lo,
        }
    };
    let mut t = Array2::zeros((n, 2));
    for i in 0..n {
        let (a, b) = (i % n1, i / n1);
        let (j1, j2) = match sampling {
            RollSampling::Grid => (None, None),
            RollSampling::Jittered => (Some(rng.random::<f64>()), Some(rng.random::<f64>())),
        };
        t[(i, 0)] = lattice(a, n1, t1_range[0], t1_range[1], j1);
        t[(i, 1)] = lattice(b, n2, t2_range[0], t2_range[1], j2);
    }
    let lo = [t.column(0).fold(f64::INFINITY, |a, &b| a.min(b)), t.column(1).fold(f64::INFINITY, |a, &b| a.min(b))];
    let hi = [t.column(0).fold(f64::NEG_INFINITY, |a, &b| a.max(b)), t.column(1).fold(f64::NEG_INFINITY, |a, &b| a.max(b))];
    let unit = |v: f64, k: usize| if hi[k] > lo[k] { (v - lo[k]) / (hi[k] - lo[k]) } else { 0.0 };
    let mut x = Array2::zeros((n, 3));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (t1, t2) = (t[(i, 0)], t[(i, 1)]);
        x[(i, 0)] = t1 * t1.cos();
        x[(i, 1)] = t2;
        x[(i, 2)] = t1 * t1.sin();
        y.push(unit(t1, 0).sqrt() * (2.0 * PI * unit(t2, 1)).sin());
    }
    Dataset {
        x,
        y,
        group: None,
        noise_floor: None,
        clean: None,
        param: Some(t),
        provenance: json!({
            "generator": "swissroll", "n": n, "t1_range": t1_range, "t2_range": t2_range,
            "sampling": sampling, "seed": seed,
        }),
    }
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter_mut().for_each(|a| *a /= n);
}

fn remove_component(v: &mut [f64], u: &[f64]) {
    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
}

/// Orthonormal pair spanning a random plane in `ℝ^d` (Gram–Schmidt with one
/// re-orthogonalization pass).
pub fn random_plane(dim: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let mut u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    unit(&mut u);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    remove_component(&mut v, &u);
    remove_component(&mut v, &u);
    unit(&mut v);
    (u, v)
}

/// Ring embedding directions and phase shift, exposed for verification.
#[derive(Debug, Clone)]
pub struct RingGeometry {
    pub center: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub phase: f64,
}

/// `n_rings` circles of radius `radius` in random planes of `ℝ^d`, centered
/// at `r · spacing` on the `x₁` axis. On ring `r`, `y = sin(2πt + δ_r)` with
/// `t = i / m` for the ring's `m = N / n_rings` samples.
pub fn gen_rings(
    dim: usize,
    n_rings: usize,
    n: usize,
    radius: f64,
    spacing: f64,
    seed: u64,
) -> Result<(Dataset, Vec<RingGeometry>)> {
    if dim < 3 || n_rings == 0 || n == 0 || n % n_rings != 0 {
        return Err(PpouError::invalid(format!(
            "rings need dim >= 3 and N divisible by the ring count (dim={dim}, rings={n_rings}, N={n})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = n / n_rings;
    let mut x = Array2::zeros((n, dim));
    let mut y = Vec::with_capacity(n);
    let mut param = Array2::zeros((n, 2));
    let mut rings = Vec::with_capacity(n_rings);
    for r in 0..n_rings {
        let (u, v) = random_plane(dim, &mut rng);
        let phase = rng.random_range(0.0..2.0 * PI);
        let mut center = vec![0.0; dim];
        center[0] = r as f64 * spacing;
        for i in 0..m {
            let row = r * m + i;
            let t = i as f64 / m as f64;
            let (s, c) = (2.0 * PI * t).sin_cos();
            for k in 0..dim {
                x[(row, k)] = center[k] + radius * (c * u[k] + s * v[k]);
            }
            y.push((2.0 * PI * t + phase).sin());
            param[(row, 0)] = t;
            param[(row, 1)] = r as f64;
        }
        rings.push(RingGeometry { center, u, v, phase });
    }
    let ds = Dataset {
        x,
        y,
        group: None,
        noise_floor: None,
        clean: None,
        param: Some(param),
        provenance: json!({
            "generator": "rings", "dim": dim, "rings": n_rings, "n": n,
            "radius": radius, "spacing": spacing, "seed": seed,
        }),
    };
    Ok((ds, rings))
}

/// Builds the dataset described by `source`.
pub fn generate(source: &DataSource, seed: u64) -> Result<Dataset> {
    match source {
        DataSource::Sine { n, alpha } => {
            if *n < 2 || !(*alpha >= 0.0) {
                return Err(PpouError::invalid("sine needs n >= 2 and alpha >= 0"));
            }
            Ok(gen_sine_noise(*n, *alpha, seed))
        }
        DataSource::Trefoil { n } => {
            if *n < 2 {
                return Err(PpouError::invalid("trefoil needs n >= 2"));
            }
            Ok(gen_trefoil(*n))
        }
        DataSource::Swissroll {
            n,
            t1_range,
            t2_range,
            sampling,
        } => {
            if *n < 4 {
                return Err(PpouError::invalid("swiss roll needs n >= 4"));
            }
            Ok(gen_swissroll(*n, *t1_range, *t2_range, *sampling, seed))
        }
        DataSource::Rings {
            dim,
            rings,
            n,
            radius,
            spacing,
        } => gen_rings(*dim, *rings, *n, *radius, *spacing, seed).map(|(d, _)| d),
        DataSource::Csv {
            path,
            inputs,
            target,
            group,
            noise_floor,
            clean,
        } => load_csv(
            path,
            &CsvSchema {
                inputs: inputs.clone(),
                target: target.clone(),
                group: group.clone(),
                noise_floor: noise_floor.clone(),
                clean: clean.clone(),
            },
        ),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    /// Defaults to every `x<i>` column, ordered by `i`.
    pub inputs: Option<Vec<String>>,
    pub target: String,
    pub group: Option<String>,
    pub noise_floor: Option<String>,
    pub clean: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            inputs: None,
            target: "y".into(),
            group: None,
            noise_floor: None,
            clean: None,
        }
    }
}

fn default_input_columns(headers: &csv::StringRecord) -> Vec<String> {
    let mut cols: Vec<(usize, String)> = headers
        .iter()
        .filter_map(|h| {
            h.strip_prefix('x')
                .and_then(|s| s.parse::<usize>().ok())
                .map(|i| (i, h.to_string()))
        })
        .collect();
    cols.sort();
    cols.into_iter().map(|(_, h)| h).collect()
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| PpouError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn headers(reader: &mut csv::Reader<File>, path: &Path) -> Result<csv::StringRecord> {
    reader
        .headers()
        .cloned()
        .map_err(|e| PpouError::Format(format!("{}: bad header: {e}", path.display())))
}

/// Input column names of a CSV file under the default schema.
pub fn csv_input_columns(path: &Path) -> Result<Vec<String>> {
    let mut rdr = open_reader(path)?;
    let h = headers(&mut rdr, path)?;
    let cols = default_input_columns(&h);
    if cols.is_empty() {
        return Err(PpouError::Parse {
            row: 0,
            column: "x1".into(),
            reason: "no input columns named x1..xd".into(),
        });
    }
    Ok(cols)
}

struct ColumnTable {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

fn read_columns(path: &Path, wanted: &[String]) -> Result<ColumnTable> {
    let mut rdr = open_reader(path)?;
    let h = headers(&mut rdr, path)?;
    let idx: Vec<usize> = wanted
        .iter()
        .map(|name| {
            h.iter().position(|c| c == name).ok_or_else(|| PpouError::Parse {
                row: 0,
                column: name.clone(),
                reason: "column missing from header".into(),
            })
        })
        .collect::<Result<_>>()?;
    let mut columns = vec![Vec::new(); wanted.len()];
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| PpouError::Parse {
            row,
            column: "*".into(),
            reason: e.to_string(),
        })?;
        if rec.len() != h.len() {
            return Err(PpouError::Parse {
                row,
                column: "*".into(),
                reason: format!("expected {} fields, found {}", h.len(), rec.len()),
            });
        }
        for (c, &i) in idx.iter().enumerate() {
            let cell = rec[i].trim();
            let v: f64 = cell.parse().map_err(|_| PpouError::Parse {
                row,
                column: wanted[c].clone(),
                reason: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(PpouError::Parse {
                    row,
                    column: wanted[c].clone(),
                    reason: format!("non-finite value `{cell}`"),
                });
            }
            columns[c].push(v);
        }
    }
    Ok(ColumnTable {
        names: wanted.to_vec(),
        columns,
    })
}

fn to_matrix(cols: &[Vec<f64>]) -> Array2<f64> {
    let n = cols.first().map_or(0, |c| c.len());
    Array2::from_shape_fn((n, cols.len()), |(i, j)| cols[j][i])
}

/// Reads a dataset; rows are 1-based in error messages (header is row 0).
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let inputs = match &schema.inputs {
        Some(c) => c.clone(),
        None => csv_input_columns(path)?,
    };
    let mut wanted = inputs.clone();
    wanted.push(schema.target.clone());
    for extra in [&schema.group, &schema.noise_floor, &schema.clean].into_iter().flatten() {
        wanted.push(extra.clone());
    }
    let table = read_columns(path, &wanted)?;
    let d = inputs.len();
    let col = |name: &Option<String>| -> Option<Vec<f64>> {
        name.as_ref().map(|n| {
            let i = table.names.iter().position(|c| c == n).expect("requested column");
            table.columns[i].clone()
        })
    };
    let ds = Dataset {
        x: to_matrix(&table.columns[..d]),
        y: table.columns[d].clone(),
        group: col(&schema.group).map(|g| g.into_iter().map(|v| v as i64).collect()),
        noise_floor: col(&schema.noise_floor),
        clean: col(&schema.clean),
        param: None,
        provenance: json!({ "source": "csv", "path": path.display().to_string() }),
    };
    ds.validate()?;
    Ok(ds)
}

/// Reads only input columns, e.g. for prediction.
pub fn load_csv_inputs(path: &Path, inputs: Option<&[String]>) -> Result<Array2<f64>> {
    let cols = match inputs {
        Some(c) => c.to_vec(),
        None => csv_input_columns(path)?,
    };
    let table = read_columns(path, &cols)?;
    Ok(to_matrix(&table.columns))
}

/// Reads one named numeric column.
pub fn load_csv_column(path: &Path, name: &str) -> Result<Vec<f64>> {
    let mut table = read_columns(path, &[name.to_string()])?;
    Ok(table.columns.pop().expect("one column"))
}

/// Lossless decimal form of a double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn save_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = String::new();
    let d = ds.dim();
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    header.push("y".into());
    if ds.group.is_some() {
        header.push("group".into());
    }
    if ds.noise_floor.is_some() {
        header.push("noise_floor".into());
    }
    if ds.clean.is_some() {
        header.push("clean".into());
    }
    let np = ds.param.as_ref().map_or(0, |p| p.ncols());
    header.extend((1..=np).map(|i| format!("t{i}")));
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds.x.row(i).iter().map(|v| fmt_f64(*v)).collect();
        fields.push(fmt_f64(ds.y[i]));
        if let Some(g) = &ds.group {
            fields.push(g[i].to_string());
        }
        if let Some(nf) = &ds.noise_floor {
            fields.push(fmt_f64(nf[i]));
        }
        if let Some(c) = &ds.clean {
            fields.push(fmt_f64(c[i]));
        }
        if let Some(p) = &ds.param {
            fields.extend(p.row(i).iter().map(|v| fmt_f64(*v)));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| PpouError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| PpouError::io(path, e))
}

/// Seeded shuffle followed by a train/test partition with
/// `round(test_fraction · N)` test rows.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(PpouError::invalid("split fraction must lie in (0, 1)"));
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(PpouError::invalid(format!(
            "split of {n} rows with fraction {test_fraction} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(n - n_test);
    Ok((idx, test))
}

pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.len(), test_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}
