//! Vehicle trajectories: CSV ingestion, Edie aggregation, probe sampling and
//! synthetic trajectories driven through a simulated speed field.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{DomainPoint, Field, Grid, ObservationSet};
use crate::error::{invalid, Error, Result};

/// One trajectory sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub vehicle_id: u64,
    pub time: f64,
    pub position: f64,
    pub speed: f64,
    pub lane: i64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryDataset {
    pub records: Vec<TrajectoryRecord>,
    pub site: Option<String>,
    pub segment_length: f64,
}

pub const TRAJECTORY_HEADER: [&str; 5] = ["vehicle_id", "time", "position", "speed", "lane"];

impl TrajectoryDataset {
    /// Builds and validates a dataset. A non-positive `segment_length` is
    /// replaced by the largest position seen.
    pub fn new(records: Vec<TrajectoryRecord>, site: Option<String>, segment_length: f64) -> Result<Self> {
        let segment_length =
            if segment_length > 0.0 { segment_length } else { records.iter().map(|r| r.position).fold(0.0, f64::max) };
        let d = Self { records, site, segment_length };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let mut last: BTreeMap<u64, f64> = BTreeMap::new();
        for (k, r) in self.records.iter().enumerate() {
            if ![r.time, r.position, r.speed].iter().all(|v| v.is_finite()) {
                return Err(invalid(format!("record {k} has a non-finite value")));
            }
            if r.position < 0.0 || r.position > self.segment_length * (1.0 + 1e-12) {
                return Err(invalid(format!(
                    "record {k}: position {} outside [0, {}]",
                    r.position, self.segment_length
                )));
            }
            if let Some(&t) = last.get(&r.vehicle_id) {
                if r.time < t {
                    return Err(invalid(format!("vehicle {}: times decrease at record {k}", r.vehicle_id)));
                }
            }
            last.insert(r.vehicle_id, r.time);
        }
        Ok(())
    }

    /// Number of distinct vehicles.
    pub fn vehicle_count(&self) -> usize {
        self.records.iter().map(|r| r.vehicle_id).collect::<BTreeSet<_>>().len()
    }

    /// Records grouped by vehicle in file order.
    pub fn by_vehicle(&self) -> BTreeMap<u64, Vec<TrajectoryRecord>> {
        let mut m: BTreeMap<u64, Vec<TrajectoryRecord>> = BTreeMap::new();
        for r in &self.records {
            m.entry(r.vehicle_id).or_default().push(*r);
        }
        m
    }

    /// Sum over vehicles of the piecewise-linear path length.
    pub fn total_distance(&self) -> f64 {
        self.by_vehicle().values().flat_map(|v| v.windows(2).map(|w| (w[1].position - w[0].position).abs())).sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(TRAJECTORY_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.vehicle_id.to_string(),
                r.time.to_string(),
                r.position.to_string(),
                r.speed.to_string(),
                r.lane.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the canonical `vehicle_id,time,position,speed,lane` format.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        Self::read_mapped(reader, &ColumnMapping::default())
    }

    /// Reads any CSV whose columns are named by `mapping`.
    pub fn read_mapped<R: Read>(reader: R, mapping: &ColumnMapping) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Parse { line: 1, message: format!("missing column '{name}'") })
        };
        let idx = [
            col(&mapping.vehicle_id)?,
            col(&mapping.time)?,
            col(&mapping.position)?,
            col(&mapping.speed)?,
            col(&mapping.lane)?,
        ];
        let mut records = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            let cell = |c: usize| -> Result<&str> {
                rec.get(idx[c]).map(str::trim).ok_or_else(|| Error::Parse { line, message: "short row".into() })
            };
            let num = |c: usize| -> Result<f64> {
                let s = cell(c)?;
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("'{s}' in column {} is not a number", TRAJECTORY_HEADER[c]),
                })
            };
            let int = |c: usize| -> Result<i64> {
                let s = cell(c)?;
                s.parse::<i64>().or_else(|_| s.parse::<f64>().map(|v| v as i64).map_err(|_| ())).map_err(|_| {
                    Error::Parse {
                        line,
                        message: format!("'{s}' in column {} is not an integer", TRAJECTORY_HEADER[c]),
                    }
                })
            };
            let id = int(0)?;
            if id < 0 {
                return Err(Error::Parse { line, message: "negative vehicle id".into() });
            }
            records.push(TrajectoryRecord {
                vehicle_id: id as u64,
                time: num(1)? * mapping.time_scale,
                position: num(2)? * mapping.position_scale,
                speed: num(3)? * mapping.speed_scale,
                lane: int(4)?,
            });
        }
        if mapping.shift_time_origin {
            let t0 = records.iter().map(|r| r.time).fold(f64::INFINITY, f64::min);
            for r in &mut records {
                r.time -= t0;
            }
        }
        Self::new(records, None, mapping.segment_length.unwrap_or(0.0))
    }
}

/// `load_trajectories_csv(path)`.
pub fn load_trajectories_csv(path: impl AsRef<Path>) -> Result<TrajectoryDataset> {
    TrajectoryDataset::read_csv(std::fs::File::open(path)?)
}

/// Column names and unit factors for foreign trajectory files (for example
/// NGSIM exports: `Vehicle_ID`, `Global_Time` in ms, `Local_Y` in feet).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnMapping {
    pub vehicle_id: String,
    pub time: String,
    pub position: String,
    pub speed: String,
    pub lane: String,
    pub time_scale: f64,
    pub position_scale: f64,
    pub speed_scale: f64,
    /// Subtract the earliest time so the data starts at `t = 0`.
    pub shift_time_origin: bool,
    pub segment_length: Option<f64>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            vehicle_id: "vehicle_id".into(),
            time: "time".into(),
            position: "position".into(),
            speed: "speed".into(),
            lane: "lane".into(),
            time_scale: 1.0,
            position_scale: 1.0,
            speed_scale: 1.0,
            shift_time_origin: false,
            segment_length: None,
        }
    }
}

impl ColumnMapping {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Edie-aggregated cell values. Cells no vehicle entered are marked missing
/// in `present` and hold speed 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EdieFields {
    pub density: Field,
    pub flow: Field,
    pub speed: Field,
    pub present: Array2<bool>,
}

impl EdieFields {
    /// Cells with vehicles present as observations at their centres.
    pub fn to_observations(&self) -> ObservationSet {
        let g = *self.density.grid();
        let mut obs = ObservationSet { u: Some(Vec::new()), ..Default::default() };
        for i in 0..g.nx {
            for j in 0..g.nt {
                if !self.present[[i, j]] {
                    continue;
                }
                let v = self.speed.get(i, j);
                obs.points.push(DomainPoint::new(g.x_at(i), g.t_at(j)));
                obs.rho.push(self.density.get(i, j));
                obs.u.as_mut().expect("speed").push(v);
            }
        }
        obs
    }
}

/// Default Edie cell, metres and seconds.
pub const EDIE_CELL_DX: f64 = 20.0;
pub const EDIE_CELL_DT: f64 = 5.0;

/// `aggregate_edie(dataset, cell_dx, cell_dt)`: per cell, density is total
/// time spent over cell area, flow is total distance over cell area, speed is
/// flow over density. Paths are linear between records and all lanes are
/// pooled. The grid spans `[0, L] x [0, T]` rounded up to whole cells.
pub fn aggregate_edie(data: &TrajectoryDataset, cell_dx: f64, cell_dt: f64) -> Result<EdieFields> {
    if !(cell_dx > 0.0 && cell_dt > 0.0) {
        return Err(invalid("cell sizes must be positive"));
    }
    let t_end = data.records.iter().map(|r| r.time).fold(0.0, f64::max);
    let nx = ((data.segment_length / cell_dx).ceil() as usize).max(2);
    let nt = ((t_end / cell_dt).ceil() as usize).max(2);
    let grid = Grid::new(nx as f64 * cell_dx, nt as f64 * cell_dt, nx, nt)?;
    let mut time = Array2::<f64>::zeros((nx, nt));
    let mut dist = Array2::<f64>::zeros((nx, nt));

    for path in data.by_vehicle().values() {
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (dt, dxp) = (b.time - a.time, b.position - a.position);
            if dt <= 0.0 && dxp == 0.0 {
                continue;
            }
            // Breakpoints in the segment parameter where a cell edge is crossed.
            let mut cuts = vec![0.0, 1.0];
            let mut crossings = |v0: f64, dv: f64, h: f64| {
                if dv == 0.0 {
                    return;
                }
                let (lo, hi) = if dv > 0.0 { (v0, v0 + dv) } else { (v0 + dv, v0) };
                let mut k = (lo / h).floor() + 1.0;
                while k * h < hi {
                    cuts.push((k * h - v0) / dv);
                    k += 1.0;
                }
            };
            crossings(a.position, dxp, cell_dx);
            crossings(a.time, dt, cell_dt);
            cuts.sort_by(f64::total_cmp);
            for s in cuts.windows(2) {
                let ds = s[1] - s[0];
                if ds <= 0.0 {
                    continue;
                }
                let mid = 0.5 * (s[0] + s[1]);
                let i = (((a.position + mid * dxp) / cell_dx).floor() as usize).min(nx - 1);
                let j = (((a.time + mid * dt) / cell_dt).floor() as usize).min(nt - 1);
                time[[i, j]] += ds * dt;
                dist[[i, j]] += ds * dxp.abs();
            }
        }
    }
    let area = cell_dx * cell_dt;
    let density = time.mapv(|v| v / area);
    let flow = dist.mapv(|v| v / area);
    let present = time.mapv(|v| v > 0.0);
    let speed =
        Array2::from_shape_fn((nx, nt), |(i, j)| if present[[i, j]] { dist[[i, j]] / time[[i, j]] } else { 0.0 });
    Ok(EdieFields {
        density: Field::new(grid, density)?,
        flow: Field::new(grid, flow)?,
        speed: Field::new(grid, speed)?,
        present,
    })
}

/// Vehicles kept by independent Bernoulli draws with probability `ratio`, in
/// increasing id order.
pub fn select_probes(data: &TrajectoryDataset, ratio: f64, seed: u64) -> Result<BTreeSet<u64>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(invalid(format!("probe ratio must lie in [0, 1], got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: BTreeSet<u64> = data.records.iter().map(|r| r.vehicle_id).collect();
    Ok(ids.into_iter().filter(|_| rng.random::<f64>() < ratio).collect())
}

/// Probe observations: every record of a selected vehicle becomes a point
/// with the recorded speed and the density read from `rho` at that point.
pub fn probe_observations(data: &TrajectoryDataset, ratio: f64, seed: u64, rho: &Field) -> Result<ObservationSet> {
    let keep = select_probes(data, ratio, seed)?;
    let mut obs = ObservationSet { u: Some(Vec::new()), ..Default::default() };
    for r in data.records.iter().filter(|r| keep.contains(&r.vehicle_id)) {
        obs.points.push(DomainPoint::new(r.position, r.time));
        obs.rho.push(rho.sample(r.position, r.time));
        obs.u.as_mut().expect("speed").push(r.speed);
    }
    Ok(obs)
}

/// Vehicles placed at equal-mass quantiles of the initial density and moved
/// with `dx/dt = u(x, t)` (midpoint rule, `substeps` per output step),
/// recorded at every time step of the field's grid. A vehicle leaving the
/// segment re-enters at `x = 0` under a fresh id. Positions are scaled by
/// `length_scale` and times by `time_scale` in the records.
pub fn synthetic_trajectories(
    rho: &Field,
    u: &Field,
    n_vehicles: usize,
    substeps: usize,
    length_scale: f64,
    time_scale: f64,
) -> Result<TrajectoryDataset> {
    if rho.grid() != u.grid() {
        return Err(invalid("density and speed fields must share a grid"));
    }
    if n_vehicles == 0 || substeps == 0 || !(length_scale > 0.0 && time_scale > 0.0) {
        return Err(invalid("vehicle count, substeps and scales must be positive"));
    }
    let g = *rho.grid();
    let l = g.road_length;
    // Cumulative mass of the first output step.
    let cum: Vec<f64> = (0..g.nx)
        .scan(0.0, |s, i| {
            *s += rho.get(i, 0) * g.dx();
            Some(*s)
        })
        .collect();
    let total = *cum.last().expect("nx >= 2");
    if !(total > 0.0) {
        return Err(invalid("initial density carries no vehicles"));
    }
    let mut xs: Vec<f64> = (0..n_vehicles)
        .map(|k| {
            let target = (k as f64 + 0.5) / n_vehicles as f64 * total;
            let i = cum.partition_point(|&c| c < target);
            let before = if i == 0 { 0.0 } else { cum[i - 1] };
            let frac = (target - before) / (cum[i] - before).max(f64::MIN_POSITIVE);
            (i as f64 + frac) * g.dx()
        })
        .collect();
    let mut ids: Vec<u64> = (0..n_vehicles as u64).collect();
    let mut next_id = n_vehicles as u64;
    let speed = |x: f64, t: f64| u.sample(x.clamp(0.0, l), t).max(0.0);
    let h = g.dt() / substeps as f64;
    let mut records = Vec::new();
    let mut t = g.t_at(0);
    for j in 0..g.nt {
        if j > 0 {
            for _ in 0..substeps {
                for (x, id) in xs.iter_mut().zip(ids.iter_mut()) {
                    let half = *x + 0.5 * h * speed(*x, t);
                    *x += h * speed(half, t + 0.5 * h);
                    if *x >= l {
                        *x -= l;
                        *id = next_id;
                        next_id += 1;
                    }
                }
                t += h;
            }
        }
        for (x, id) in xs.iter().zip(&ids) {
            records.push(TrajectoryRecord {
                vehicle_id: *id,
                time: g.t_at(j) * time_scale,
                position: x * length_scale,
                speed: speed(*x, g.t_at(j)) * length_scale / time_scale,
                lane: 1,
            });
        }
    }
    TrajectoryDataset::new(records, Some("synthetic".into()), l * length_scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, time: f64, position: f64, speed: f64) -> TrajectoryRecord {
        TrajectoryRecord { vehicle_id: id, time, position, speed, lane: 1 }
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let d = TrajectoryDataset::read_csv("vehicle_id,time,position,speed,lane\n".as_bytes()).unwrap();
        assert!(d.records.is_empty());
        assert_eq!(d.vehicle_count(), 0);
    }

    #[test]
    fn one_vehicle_two_rows() {
        let d =
            TrajectoryDataset::read_csv("vehicle_id,time,position,speed,lane\n7,0,0,10,1\n7,1,10,10,2\n".as_bytes())
                .unwrap();
        assert_eq!(d.vehicle_count(), 1);
        assert_eq!(d.segment_length, 10.0);
    }

    #[test]
    fn malformed_row_reports_line() {
        let err =
            TrajectoryDataset::read_csv("vehicle_id,time,position,speed,lane\n1,0,0,1,1\n1,abc,1,1,1\n".as_bytes())
                .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
        let err = TrajectoryDataset::read_csv("vehicle_id,time\n1,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn decreasing_time_is_rejected() {
        assert!(TrajectoryDataset::new(vec![rec(1, 2.0, 0.0, 1.0), rec(1, 1.0, 1.0, 1.0)], None, 10.0).is_err());
        assert!(TrajectoryDataset::new(vec![rec(1, 0.0, 11.0, 1.0)], None, 10.0).is_err());
    }

    #[test]
    fn mapped_columns_and_units() {
        let text = "Lane_ID,Vehicle_ID,Global_Time,Local_Y,v_Vel\n2,5,1000,10,20\n2,5,2000,30,20\n";
        let m = ColumnMapping {
            vehicle_id: "Vehicle_ID".into(),
            time: "Global_Time".into(),
            position: "Local_Y".into(),
            speed: "v_Vel".into(),
            lane: "Lane_ID".into(),
            time_scale: 1e-3,
            position_scale: 0.3048,
            speed_scale: 0.3048,
            shift_time_origin: true,
            segment_length: Some(100.0),
        };
        let d = TrajectoryDataset::read_mapped(text.as_bytes(), &m).unwrap();
        assert_eq!(d.records[0].time, 0.0);
        assert!((d.records[1].time - 1.0).abs() < 1e-15);
        assert!((d.records[1].position - 9.144).abs() < 1e-12);
        assert_eq!(d.records[0].lane, 2);
        assert_eq!(d.segment_length, 100.0);
    }

    #[test]
    fn constant_speed_crossing_gives_that_speed() {
        let v = 4.0;
        let d = TrajectoryDataset::new(vec![rec(1, 0.0, 0.0, v), rec(1, 10.0, 40.0, v)], None, 40.0).unwrap();
        let e = aggregate_edie(&d, 20.0, 5.0).unwrap();
        for (i, j) in [(0, 0), (1, 1)] {
            assert!((e.speed.get(i, j) - v).abs() < 1e-12);
        }
        assert!(!e.present[[0, 1]]);
        assert_eq!(e.to_observations().len(), 2);
    }

    #[test]
    fn two_vehicles_give_harmonic_mean() {
        // Both spend 5 s in cell (0, 0): 2 m/s covers 10 m, 4 m/s covers 20 m.
        let d = TrajectoryDataset::new(
            vec![rec(1, 0.0, 0.0, 2.0), rec(1, 5.0, 10.0, 2.0), rec(2, 0.0, 0.0, 4.0), rec(2, 5.0, 20.0, 4.0)],
            None,
            40.0,
        )
        .unwrap();
        let e = aggregate_edie(&d, 20.0, 5.0).unwrap();
        // Equal time in the cell weights the speeds arithmetically.
        assert!((e.speed.get(0, 0) - 30.0 / 10.0).abs() < 1e-12);
        assert!((e.density.get(0, 0) - 10.0 / 100.0).abs() < 1e-12);
        assert!((e.flow.get(0, 0) - 30.0 / 100.0).abs() < 1e-12);
    }

    #[test]
    fn equal_distance_gives_harmonic_mean_speed() {
        // Both cover the 20 m cell: at 2 m/s in 10 s and at 4 m/s in 5 s.
        let d = TrajectoryDataset::new(
            vec![rec(1, 0.0, 0.0, 2.0), rec(1, 10.0, 20.0, 2.0), rec(2, 0.0, 0.0, 4.0), rec(2, 5.0, 20.0, 4.0)],
            None,
            20.0,
        )
        .unwrap();
        let e = aggregate_edie(&d, 20.0, 10.0).unwrap();
        let harmonic = 2.0 / (1.0 / 2.0 + 1.0 / 4.0);
        assert!((e.speed.get(0, 0) - harmonic).abs() < 1e-12);
    }

    fn ring_fields() -> (Field, Field) {
        let g = Grid::new(1.0, 1.0, 40, 60).unwrap();
        let rho = Field::from_fn(g, |x, _| 0.3 + 0.2 * (2.0 * std::f64::consts::PI * x).sin()).unwrap();
        let u =
            Field::from_fn(g, |x, t| 0.6 - 0.3 * (2.0 * std::f64::consts::PI * (x - 0.2 * t)).cos().powi(2)).unwrap();
        (rho, u)
    }

    #[test]
    fn synthetic_round_trip_and_conservation() {
        let (rho, u) = ring_fields();
        let d = synthetic_trajectories(&rho, &u, 25, 4, 1000.0, 60.0).unwrap();
        assert!(d.vehicle_count() > 25, "some vehicles should wrap");
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = TrajectoryDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.records, d.records);
        let e = aggregate_edie(&d, EDIE_CELL_DX, EDIE_CELL_DT).unwrap();
        let area = EDIE_CELL_DX * EDIE_CELL_DT;
        let moved = e.flow.values().sum() * area;
        let truth = d.total_distance();
        assert!((moved - truth).abs() <= 1e-9 * truth, "{moved} vs {truth}");
    }

    #[test]
    fn probe_selection_is_seeded() {
        let (rho, u) = ring_fields();
        let d = synthetic_trajectories(&rho, &u, 40, 2, 1.0, 1.0).unwrap();
        let a = select_probes(&d, 0.3, 4).unwrap();
        assert_eq!(a, select_probes(&d, 0.3, 4).unwrap());
        assert!(select_probes(&d, 0.0, 4).unwrap().is_empty());
        assert_eq!(select_probes(&d, 1.0, 4).unwrap().len(), d.vehicle_count());
        let o = probe_observations(&d, 0.3, 4, &rho).unwrap();
        let expected = d.records.iter().filter(|r| a.contains(&r.vehicle_id)).count();
        assert_eq!(o.len(), expected);
        assert!(select_probes(&d, 1.5, 0).is_err());
    }
}
