//! Space-time grids, scalar fields on them, and the labeled / unlabeled point
//! sets used for training.
//!
//! Samples are cell-centred in both dimensions: cell `i` sits at
//! `x_i = (i + 1/2) dx` and time sample `j` at `t_j = (j + 1/2) dt`, so evenly
//! placed boundary times with `N_b = nt` coincide with the grid times.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Uniform space-time lattice over `[0, L] x [0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub road_length: f64,
    pub horizon: f64,
    pub nx: usize,
    pub nt: usize,
}

impl Grid {
    pub fn new(road_length: f64, horizon: f64, nx: usize, nt: usize) -> Result<Self> {
        if !(road_length > 0.0 && road_length.is_finite()) {
            return Err(invalid(format!("road length must be positive, got {road_length}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if nx < 2 || nt < 2 {
            return Err(invalid(format!("grid needs nx >= 2 and nt >= 2, got {nx} x {nt}")));
        }
        Ok(Self { road_length, horizon, nx, nt })
    }

    pub fn dx(&self) -> f64 {
        self.road_length / self.nx as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    /// Centre of cell `i`.
    pub fn x_at(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx()
    }

    /// Time of sample `j`.
    pub fn t_at(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dt()
    }

    pub fn len(&self) -> usize {
        self.nx * self.nt
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the cell whose centre is nearest to `x` (clamped to the road).
    pub fn nearest_cell(&self, x: f64) -> usize {
        let i = (x / self.dx()).floor();
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(self.nx - 1)
        }
    }

    /// Index of the time sample nearest to `t` (clamped to the horizon).
    pub fn nearest_step(&self, t: f64) -> usize {
        let j = (t / self.dt()).floor();
        if j <= 0.0 {
            0
        } else {
            (j as usize).min(self.nt - 1)
        }
    }

    /// All grid nodes in row-major `(x outer, t inner)` order.
    pub fn points(&self) -> Vec<DomainPoint> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.nx {
            for j in 0..self.nt {
                out.push(DomainPoint::new(self.x_at(i), self.t_at(j)));
            }
        }
        out
    }

    pub fn contains(&self, p: DomainPoint) -> bool {
        (0.0..=self.road_length).contains(&p.x) && (0.0..=self.horizon).contains(&p.t)
    }
}

/// `make_grid(L, T, nx, nt)`.
pub fn make_grid(road_length: f64, horizon: f64, nx: usize, nt: usize) -> Result<Grid> {
    Grid::new(road_length, horizon, nx, nt)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPoint {
    pub x: f64,
    pub t: f64,
}

impl DomainPoint {
    pub fn new(x: f64, t: f64) -> Self {
        Self { x, t }
    }
}

/// Points as an `n x 2` matrix with columns `(x, t)`.
pub fn points_array(points: &[DomainPoint]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 2), |(i, j)| if j == 0 { points[i].x } else { points[i].t })
}

/// Scalar values on a [`Grid`], stored `nx x nt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Array2<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (grid.nx, grid.nt) {
            return Err(invalid(format!(
                "field shape {:?} does not match grid {} x {}",
                values.dim(),
                grid.nx,
                grid.nt
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("field contains non-finite value {v}")));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        let values = Array2::from_shape_fn((grid.nx, grid.nt), |(i, j)| f(grid.x_at(i), grid.t_at(j)));
        Self::new(grid, values)
    }

    pub fn constant(grid: Grid, value: f64) -> Result<Self> {
        Self::new(grid, Array2::from_elem((grid.nx, grid.nt), value))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    /// Density sanity check against a loose upper bound.
    pub fn check_density_bounds(&self, upper: f64) -> Result<()> {
        match self.values.iter().find(|&&v| v < 0.0 || v > upper) {
            Some(v) => Err(invalid(format!("density {v} outside [0, {upper}]"))),
            None => Ok(()),
        }
    }

    /// Bilinear interpolation between cell centres / time samples, clamped at
    /// the edges.
    pub fn sample(&self, x: f64, t: f64) -> f64 {
        let (i0, i1, wx) = bracket(x / self.grid.dx() - 0.5, self.grid.nx);
        let (j0, j1, wt) = bracket(t / self.grid.dt() - 0.5, self.grid.nt);
        let v = &self.values;
        (1.0 - wx) * ((1.0 - wt) * v[[i0, j0]] + wt * v[[i0, j1]]) + wx * ((1.0 - wt) * v[[i1, j0]] + wt * v[[i1, j1]])
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "t", "value"])?;
        for i in 0..self.grid.nx {
            for j in 0..self.grid.nt {
                w.write_record([
                    self.grid.x_at(i).to_string(),
                    self.grid.t_at(j).to_string(),
                    self.values[[i, j]].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads a field written by [`Field::write_csv`], recovering the grid from
    /// the coordinates.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        check_header(rdr.headers()?, &["x", "t", "value"])?;
        let mut rows: Vec<(f64, f64, f64)> = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            rows.push((parse_f64(&rec, 0, line)?, parse_f64(&rec, 1, line)?, parse_f64(&rec, 2, line)?));
        }
        let nt = rows.iter().take_while(|r| r.0 == rows[0].0).count();
        if nt < 2 || !rows.len().is_multiple_of(nt) {
            return Err(Error::Parse { line: 1, message: "rows do not form an x-major grid".into() });
        }
        let nx = rows.len() / nt;
        let dx = 2.0 * rows[0].0;
        let dt = 2.0 * rows[0].1;
        let grid = Grid::new(dx * nx as f64, dt * nt as f64, nx, nt)?;
        let mut values = Array2::zeros((nx, nt));
        for (k, &(x, t, v)) in rows.iter().enumerate() {
            let (i, j) = (k / nt, k % nt);
            let tol = 1e-9 * (grid.road_length + grid.horizon);
            if (x - grid.x_at(i)).abs() > tol || (t - grid.t_at(j)).abs() > tol {
                return Err(Error::Parse {
                    line: k + 2,
                    message: format!("coordinate ({x}, {t}) off the inferred grid"),
                });
            }
            values[[i, j]] = v;
        }
        Self::new(grid, values)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn bracket(s: f64, n: usize) -> (usize, usize, f64) {
    if s <= 0.0 {
        return (0, 0, 0.0);
    }
    let lo = s.floor() as usize;
    if lo >= n - 1 {
        return (n - 1, n - 1, 0.0);
    }
    (lo, lo + 1, s - lo as f64)
}

pub(crate) fn check_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}, got {}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

pub(crate) fn parse_f64(rec: &csv::StringRecord, col: usize, line: usize) -> Result<f64> {
    let raw = rec.get(col).ok_or_else(|| Error::Parse { line, message: format!("missing column {col}") })?;
    let v: f64 =
        raw.trim().parse().map_err(|_| Error::Parse { line, message: format!("cannot parse {raw:?} as a number") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("non-finite value {raw:?}") });
    }
    Ok(v)
}

/// Labeled training points (loop detectors, probe vehicles).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObservationSet {
    pub points: Vec<DomainPoint>,
    pub rho: Vec<f64>,
    pub u: Option<Vec<f64>>,
}

impl ObservationSet {
    pub fn new(points: Vec<DomainPoint>, rho: Vec<f64>, u: Option<Vec<f64>>) -> Result<Self> {
        if points.len() != rho.len() || u.as_ref().is_some_and(|u| u.len() != points.len()) {
            return Err(invalid("observation lists must have equal length"));
        }
        if rho.iter().chain(u.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(invalid("observations must be finite"));
        }
        Ok(Self { points, rho, u })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Concatenates two sets; speeds are kept only if both carry them.
    pub fn merged(&self, other: &ObservationSet) -> ObservationSet {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let mut rho = self.rho.clone();
        rho.extend_from_slice(&other.rho);
        let u = match (&self.u, &other.u) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        ObservationSet { points, rho, u }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        match &self.u {
            Some(_) => w.write_record(["x", "t", "rho", "u"])?,
            None => w.write_record(["x", "t", "rho"])?,
        }
        for k in 0..self.len() {
            let mut rec = vec![self.points[k].x.to_string(), self.points[k].t.to_string(), self.rho[k].to_string()];
            if let Some(u) = &self.u {
                rec.push(u[k].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let with_u = headers.len() == 4;
        if with_u {
            check_header(&headers, &["x", "t", "rho", "u"])?;
        } else {
            check_header(&headers, &["x", "t", "rho"])?;
        }
        let mut out = ObservationSet { u: with_u.then(Vec::new), ..Default::default() };
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            out.points.push(DomainPoint::new(parse_f64(&rec, 0, line)?, parse_f64(&rec, 1, line)?));
            out.rho.push(parse_f64(&rec, 2, line)?);
            if let Some(u) = out.u.as_mut() {
                u.push(parse_f64(&rec, 3, line)?);
            }
        }
        Ok(out)
    }
}

/// Unlabeled points where only the physics residual is penalised.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CollocationSet {
    pub points: Vec<DomainPoint>,
}

impl CollocationSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Times `t` at which the periodic pair `(0, t)`, `(L, t)` is compared.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundaryCollocationSet {
    pub times: Vec<f64>,
}

impl BoundaryCollocationSet {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollocationStrategy {
    UniformRandom,
    GridSubsample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPlacement {
    Even,
    Random,
}

/// Evenly spaced detector positions, both road ends included for `m >= 2`.
pub fn detector_positions(road_length: f64, m: usize) -> Result<Vec<f64>> {
    match m {
        0 => Err(invalid("at least one detector is required")),
        1 => Ok(vec![0.5 * road_length]),
        _ => Ok((0..m).map(|k| k as f64 * road_length / (m - 1) as f64).collect()),
    }
}

/// Cells that hold the `m` evenly spaced detectors.
pub fn detector_cells(grid: &Grid, m: usize) -> Result<Vec<usize>> {
    Ok(detector_positions(grid.road_length, m)?.into_iter().map(|x| grid.nearest_cell(x)).collect())
}

/// Loop detectors: every time step at each detector cell becomes one
/// observation, with additive Gaussian noise (densities clipped at zero).
pub fn sample_loop_detectors(
    rho: &Field,
    u: Option<&Field>,
    m: usize,
    noise_std: f64,
    seed: u64,
) -> Result<ObservationSet> {
    if let Some(u) = u {
        if u.grid() != rho.grid() {
            return Err(invalid("density and speed fields must share a grid"));
        }
    }
    if !(noise_std >= 0.0) {
        return Err(invalid("noise standard deviation must be non-negative"));
    }
    let grid = *rho.grid();
    let cells = detector_cells(&grid, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).map_err(|e| invalid(e.to_string()))?;
    let draw = |rng: &mut ChaCha8Rng| if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };

    let mut obs = ObservationSet { u: u.map(|_| Vec::new()), ..Default::default() };
    for &i in &cells {
        for j in 0..grid.nt {
            obs.points.push(DomainPoint::new(grid.x_at(i), grid.t_at(j)));
            obs.rho.push((rho.get(i, j) + draw(&mut rng)).max(0.0));
            if let (Some(uf), Some(us)) = (u, obs.u.as_mut()) {
                us.push(uf.get(i, j) + draw(&mut rng));
            }
        }
    }
    Ok(obs)
}

/// Number of collocation points for a collocation rate (points / grid nodes).
pub fn collocation_count(grid: &Grid, rate: f64) -> usize {
    (rate * grid.len() as f64).round() as usize
}

pub fn sample_collocation(grid: &Grid, n_c: usize, strategy: CollocationStrategy, seed: u64) -> Result<CollocationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = match strategy {
        CollocationStrategy::UniformRandom => (0..n_c)
            .map(|_| {
                let x = rng.random::<f64>() * grid.road_length;
                let t = rng.random::<f64>() * grid.horizon;
                DomainPoint::new(x, t)
            })
            .collect(),
        CollocationStrategy::GridSubsample => {
            if n_c > grid.len() {
                return Err(invalid(format!("cannot subsample {n_c} points from a grid of {} nodes", grid.len())));
            }
            let mut picked = index::sample(&mut rng, grid.len(), n_c).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|k| DomainPoint::new(grid.x_at(k / grid.nt), grid.t_at(k % grid.nt))).collect()
        }
    };
    Ok(CollocationSet { points })
}

pub fn sample_boundary(grid: &Grid, n_b: usize, placement: BoundaryPlacement, seed: u64) -> BoundaryCollocationSet {
    let times = match placement {
        BoundaryPlacement::Even => (0..n_b).map(|k| (k as f64 + 0.5) * grid.horizon / n_b as f64).collect(),
        BoundaryPlacement::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n_b).map(|_| rng.random::<f64>() * grid.horizon).collect()
        }
    };
    BoundaryCollocationSet { times }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn benchmark_grid() -> Grid {
        make_grid(1.0, 3.0, 240, 960).unwrap()
    }

    #[test]
    fn grid_spacing() {
        let g = benchmark_grid();
        assert!((g.dx() - 1.0 / 240.0).abs() < 1e-15);
        assert!((g.dt() - 1.0 / 320.0).abs() < 1e-15);
        let g = make_grid(1.0, 1.0, 2, 2).unwrap();
        assert_eq!((g.dx(), g.dt()), (0.5, 0.5));
        let g = make_grid(2.0, 4.0, 100, 200).unwrap();
        assert!((g.dx() - 0.02).abs() < 1e-15 && (g.dt() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn grid_rejects_bad_dimensions() {
        assert!(make_grid(0.0, 1.0, 10, 10).is_err());
        assert!(make_grid(1.0, -1.0, 10, 10).is_err());
        assert!(make_grid(1.0, 1.0, 1, 10).is_err());
        assert!(make_grid(1.0, 1.0, 10, 1).is_err());
    }

    #[test]
    fn detector_layout() {
        assert_eq!(detector_positions(1.0, 3).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(detector_positions(1.0, 1).unwrap(), vec![0.5]);
        assert!(detector_positions(1.0, 0).is_err());
    }

    #[test]
    fn noiseless_detectors_copy_field() {
        let g = make_grid(1.0, 1.0, 20, 10).unwrap();
        let rho = Field::from_fn(g, |x, t| x + 2.0 * t).unwrap();
        let u = Field::from_fn(g, |x, _| 1.0 - x).unwrap();
        let obs = sample_loop_detectors(&rho, Some(&u), 4, 0.0, 7).unwrap();
        assert_eq!(obs.len(), 4 * 10);
        for k in 0..obs.len() {
            let p = obs.points[k];
            let (i, j) = (g.nearest_cell(p.x), g.nearest_step(p.t));
            assert_eq!(obs.rho[k], rho.get(i, j));
            assert_eq!(obs.u.as_ref().unwrap()[k], u.get(i, j));
        }
    }

    #[test]
    fn noisy_detectors_clip_density() {
        let g = make_grid(1.0, 1.0, 10, 50).unwrap();
        let rho = Field::constant(g, 0.0).unwrap();
        let obs = sample_loop_detectors(&rho, None, 2, 0.5, 1).unwrap();
        assert!(obs.rho.iter().all(|&r| r >= 0.0));
        assert!(obs.rho.iter().any(|&r| r > 0.0));
    }

    #[test]
    fn collocation_counts() {
        let g = benchmark_grid();
        let c = sample_collocation(&g, 150_000, CollocationStrategy::UniformRandom, 3).unwrap();
        assert_eq!(c.len(), 150_000);
        assert!(c.points.iter().all(|&p| g.contains(p)));
        assert!(sample_collocation(&g, 0, CollocationStrategy::UniformRandom, 3).unwrap().is_empty());
        assert_eq!(collocation_count(&g, 0.01), 2_304);
        let sub = sample_collocation(&g, 2_304, CollocationStrategy::GridSubsample, 3).unwrap();
        assert_eq!(sub.len(), 2_304);
        let small = make_grid(1.0, 1.0, 3, 3).unwrap();
        assert!(sample_collocation(&small, 10, CollocationStrategy::GridSubsample, 0).is_err());
    }

    #[test]
    fn boundary_even_placement() {
        let g = make_grid(1.0, 3.0, 8, 16).unwrap();
        let b = sample_boundary(&g, g.nt, BoundaryPlacement::Even, 0);
        for (j, &t) in b.times.iter().enumerate() {
            assert!((t - g.t_at(j)).abs() < 1e-12);
        }
        assert!(sample_boundary(&g, 0, BoundaryPlacement::Even, 0).is_empty());
        assert_eq!(sample_boundary(&g, 1, BoundaryPlacement::Even, 0).times, vec![1.5]);
    }

    #[test]
    fn field_csv_round_trip() {
        let g = make_grid(1.0, 3.0, 5, 4).unwrap();
        let f = Field::from_fn(g, |x, t| (3.0 * x).sin() + t * t).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,t,value\n"));
        let back = Field::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.values(), f.values());
        assert!((back.grid().road_length - 1.0).abs() < 1e-12);
        assert!((back.grid().horizon - 3.0).abs() < 1e-12);
    }

    #[test]
    fn observation_csv_reports_bad_line() {
        let text = "x,t,rho\n0.1,0.2,0.3\n0.1,oops,0.3\n";
        match ObservationSet::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn interpolation_hits_nodes() {
        let g = make_grid(1.0, 1.0, 6, 5).unwrap();
        let f = Field::from_fn(g, |x, t| 2.0 * x - t).unwrap();
        assert!((f.sample(g.x_at(2), g.t_at(3)) - f.get(2, 3)).abs() < 1e-14);
        let mid = f.sample(0.5 * (g.x_at(2) + g.x_at(3)), g.t_at(1));
        assert!((mid - 0.5 * (f.get(2, 1) + f.get(3, 1))).abs() < 1e-14);
    }
}
