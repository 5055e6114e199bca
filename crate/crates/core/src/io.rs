//! File formats.
//!
//! | file | columns |
//! |---|---|
//! | observations | `time,instrument,footprint_id,value,var_factor` |
//! | footprints | `footprint_id,bau_index` |
//! | predictions | `time,bau_index,mean,stderr` |
//! | truth | `time,bau_index,y_true` |
//! | latent | `time,component,index,value` |
//! | trace | `iteration,neg2loglik` |
//! | parameters | `name,t,i,j,value` |
//! | metrics | `method,protocol,time,rmspe,crps,n_holdout,holdout` |
//! | holdouts | `time,footprint_id,kind` |
//! | basis | `center_x,center_y,radius` |
//! | mask | `bau_index` (active cells) |
//!
//! Floats are written in Rust's shortest round-trip form, so reading back
//! gives the same bits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BisquareBasis;
use crate::car::CarParams;
use crate::dynamics::{PredictionField, StatePosterior};
use crate::error::{Error, Result};
use crate::estimate::TraceRow;
use crate::eval::{Holdout, MetricRow};
use crate::grid::{BauGrid, Footprint, Observation, ObservationBatch};
use crate::model::DfgpParams;
use crate::synth::Truth;

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

fn reader(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    Ok(csv::Reader::from_reader(BufReader::new(File::open(path)?)))
}

#[derive(Debug, Serialize, Deserialize)]
struct ObsRecord {
    time: usize,
    instrument: usize,
    footprint_id: usize,
    value: f64,
    var_factor: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FootprintRecord {
    footprint_id: usize,
    bau_index: usize,
}

pub fn write_observations(obs_path: &Path, fp_path: &Path, batches: &[ObservationBatch]) -> Result<()> {
    let mut ow = writer(obs_path)?;
    let mut fw = writer(fp_path)?;
    for b in batches {
        for o in b.iter() {
            ow.serialize(ObsRecord {
                time: b.time,
                instrument: o.footprint.instrument(),
                footprint_id: o.id,
                value: o.value,
                var_factor: o.var_factor,
            })?;
            for &bau in o.footprint.baus() {
                fw.serialize(FootprintRecord { footprint_id: o.id, bau_index: bau })?;
            }
        }
    }
    ow.flush()?;
    fw.flush()?;
    Ok(())
}

/// Batches for `t = 1..t_len` (empty where no rows exist); each observation
/// is validated against the grid.
pub fn read_observations(
    obs_path: &Path,
    fp_path: &Path,
    grid: &BauGrid,
    t_len: usize,
    n_instruments: usize,
) -> Result<Vec<ObservationBatch>> {
    let mut cells: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for rec in reader(fp_path)?.deserialize() {
        let rec: FootprintRecord = rec?;
        cells.entry(rec.footprint_id).or_default().push(rec.bau_index);
    }
    let mut batches: Vec<ObservationBatch> = (1..=t_len).map(|t| ObservationBatch::new(t, n_instruments)).collect();
    for rec in reader(obs_path)?.deserialize() {
        let rec: ObsRecord = rec?;
        if rec.time == 0 || rec.time > t_len {
            return Err(Error::Parse(format!("observation {} at time {} outside 1..={t_len}", rec.footprint_id, rec.time)));
        }
        let baus = cells
            .get(&rec.footprint_id)
            .ok_or_else(|| Error::Parse(format!("footprint {} has no cells", rec.footprint_id)))?;
        let obs = Observation {
            id: rec.footprint_id,
            footprint: Footprint::new(baus.clone(), rec.instrument, rec.time)?,
            value: rec.value,
            var_factor: rec.var_factor,
        };
        batches[rec.time - 1].push(obs)?;
    }
    for b in &batches {
        b.validate(grid)?;
    }
    Ok(batches)
}

pub fn write_predictions(path: &Path, fields: &[PredictionField]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["time", "bau_index", "mean", "stderr"])?;
    for f in fields {
        for ((c, m), s) in f.cells.iter().zip(&f.mean).zip(&f.stderr) {
            w.serialize((f.time, c, m, s))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionField>> {
    let mut out: Vec<PredictionField> = Vec::new();
    for rec in reader(path)?.deserialize() {
        let (time, cell, mean, stderr): (usize, usize, f64, f64) = rec?;
        if out.last().is_none_or(|f| f.time != time) {
            out.push(PredictionField { time, cells: Vec::new(), mean: Vec::new(), stderr: Vec::new() });
        }
        let f = out.last_mut().unwrap();
        f.cells.push(cell);
        f.mean.push(mean);
        f.stderr.push(stderr);
    }
    Ok(out)
}

pub fn write_truth(path: &Path, truth: &Truth) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["time", "bau_index", "y_true"])?;
    for (t, y) in truth.y.iter().enumerate() {
        for (i, v) in y.iter().enumerate() {
            w.serialize((t + 1, truth.design.cell_index[i], v))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `η_t` for `t = 0..T` and `ξ_t` (by grid index) for `t = 1..T`.
pub fn write_latent(path: &Path, truth: &Truth) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["time", "component", "index", "value"])?;
    for (t, eta) in truth.latent.eta.iter().enumerate() {
        for (i, v) in eta.iter().enumerate() {
            w.serialize((t, "eta", i, v))?;
        }
    }
    for (t, xi) in truth.latent.xi.iter().enumerate() {
        for (i, v) in xi.iter().enumerate() {
            w.serialize((t + 1, "xi", truth.design.cell_index[i], v))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iteration", "neg2loglik"])?;
    for row in trace {
        w.serialize((row.iteration, row.neg2loglik))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    t: usize,
    i: usize,
    j: usize,
    value: f64,
}

/// One row per scalar. `t` is 1-based except for `k0` (0); vectors use
/// `j = 0`; `sigma2` uses `i` for the 0-based instrument.
pub fn write_params(path: &Path, p: &DfgpParams) -> Result<()> {
    let mut w = writer(path)?;
    let mut put = |name: &str, t: usize, i: usize, j: usize, value: f64| {
        w.serialize(ParamRecord { name: name.into(), t, i, j, value })
    };
    for (t, b) in p.beta.iter().enumerate() {
        for (i, v) in b.iter().enumerate() {
            put("beta", t + 1, i, 0, *v)?;
        }
    }
    for (name, mats) in [("h", &p.h), ("u", &p.u)] {
        for (t, m) in mats.iter().enumerate() {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    put(name, t + 1, i, j, m[(i, j)])?;
                }
            }
        }
    }
    for i in 0..p.k0.nrows() {
        for j in 0..p.k0.ncols() {
            put("k0", 0, i, j, p.k0[(i, j)])?;
        }
    }
    for (t, c) in p.car.iter().enumerate() {
        put("gamma", t + 1, 0, 0, c.gamma)?;
        put("tau2", t + 1, 0, 0, c.tau2)?;
    }
    for (t, s) in p.sigma2.iter().enumerate() {
        for (k, v) in s.iter().enumerate() {
            put("sigma2", t + 1, k, 0, *v)?;
        }
    }
    drop(put);
    w.flush()?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<DfgpParams> {
    let recs: Vec<ParamRecord> = reader(path)?.deserialize().collect::<std::result::Result<_, _>>()?;
    let max = |name: &str, f: fn(&ParamRecord) -> usize| {
        recs.iter().filter(|r| r.name == name).map(f).max().map(|m| m + 1)
    };
    let t_len = max("beta", |r| r.t).ok_or_else(|| Error::Parse("no beta rows".into()))? - 1;
    let p = max("beta", |r| r.i).unwrap();
    let r = max("k0", |r| r.i).ok_or_else(|| Error::Parse("no k0 rows".into()))?;
    let n_instr = max("sigma2", |r| r.i).ok_or_else(|| Error::Parse("no sigma2 rows".into()))?;
    let mut out = DfgpParams {
        beta: vec![DVector::zeros(p); t_len],
        h: vec![DMatrix::zeros(r, r); t_len],
        u: vec![DMatrix::zeros(r, r); t_len],
        k0: DMatrix::zeros(r, r),
        car: vec![CarParams::new(f64::NAN, f64::NAN); t_len],
        sigma2: vec![vec![f64::NAN; n_instr]; t_len],
    };
    for rec in &recs {
        let bad = || Error::Parse(format!("parameter row {} t={} i={} j={} out of range", rec.name, rec.t, rec.i, rec.j));
        let t = rec.t;
        if rec.name != "k0" && (t == 0 || t > t_len) {
            return Err(bad());
        }
        let (i, j) = (rec.i, rec.j);
        match rec.name.as_str() {
            "beta" if i < p && j == 0 => out.beta[t - 1][i] = rec.value,
            "h" if i < r && j < r => out.h[t - 1][(i, j)] = rec.value,
            "u" if i < r && j < r => out.u[t - 1][(i, j)] = rec.value,
            "k0" if t == 0 && i < r && j < r => out.k0[(i, j)] = rec.value,
            "gamma" => out.car[t - 1].gamma = rec.value,
            "tau2" => out.car[t - 1].tau2 = rec.value,
            "sigma2" if i < n_instr => out.sigma2[t - 1][i] = rec.value,
            _ => return Err(bad()),
        }
    }
    let complete = out.car.iter().all(|c| c.gamma.is_finite() && c.tau2.is_finite())
        && out.sigma2.iter().flatten().all(|v| v.is_finite());
    if !complete {
        return Err(Error::Parse("parameter file is missing CAR or nugget rows".into()));
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["method", "protocol", "time", "rmspe", "crps", "n_holdout", "holdout"])?;
    for r in rows {
        let time = r.time.map_or_else(|| "all".to_string(), |t| t.to_string());
        let kind = r.kind.map_or("all", |k| k.name());
        w.serialize((r.method.name(), r.protocol.name(), time, r.rmspe, r.crps, r.n_holdout, kind))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_holdouts(path: &Path, holdouts: &[Holdout]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["time", "footprint_id", "kind"])?;
    for h in holdouts {
        w.serialize((h.time, h.obs.id, h.kind.name()))?;
    }
    w.flush()?;
    Ok(())
}

/// Basis functions from explicit centers and radii, all in one resolution.
pub fn read_basis(path: &Path) -> Result<BisquareBasis> {
    let mut centers = Vec::new();
    let mut radii = Vec::new();
    for rec in reader(path)?.deserialize() {
        let (x, y, r): (f64, f64, f64) = rec?;
        centers.push([x, y]);
        radii.push(r);
    }
    let n = centers.len();
    BisquareBasis::new(centers, radii, vec![0; n])
}

pub fn read_mask(path: &Path, n_cells: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; n_cells];
    for rec in reader(path)?.deserialize() {
        let (i,): (usize,) = rec?;
        if i >= n_cells {
            return Err(Error::Parse(format!("mask cell {i} outside a grid of {n_cells}")));
        }
        mask[i] = true;
    }
    Ok(mask)
}

/// `key = value` lines in the given order.
pub fn write_report(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (k, v) in entries {
        writeln!(w, "{k} = {v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<(String, String)>> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once(" = ")
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Parse(format!("report line without ' = ': {l}")))
        })
        .collect()
}

/// Magic bytes of a state checkpoint.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DFGPSTAT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// State checkpoint, all integers `u32` and floats `f64`, little-endian:
///
/// ```text
/// magic[8]  version  r  count
/// count × { time  mean[r]  cov[r·r] (column-major) }
/// ```
pub fn write_checkpoint(path: &Path, states: &[StatePosterior]) -> Result<()> {
    let r = states.first().map_or(0, |s| s.mean.len());
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    let u32le = |v: usize| -> Result<[u8; 4]> {
        Ok(u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?.to_le_bytes())
    };
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&u32le(r)?)?;
    w.write_all(&u32le(states.len())?)?;
    for s in states {
        if s.mean.len() != r || s.cov.shape() != (r, r) {
            return Err(Error::Dimension("states of different sizes in one checkpoint".into()));
        }
        w.write_all(&u32le(s.time)?)?;
        for v in s.mean.iter().chain(s.cov.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Parse("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<StatePosterior>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a state checkpoint".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Parse(format!("checkpoint version {version} not supported")));
    }
    let r = c.u32()?;
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count.min(bytes.len()));
    for _ in 0..count {
        let time = c.u32()?;
        let raw = c.take(8 * (r + r * r))?;
        let vals: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        out.push(StatePosterior {
            time,
            mean: DVector::from_column_slice(&vals[..r]),
            cov: DMatrix::from_column_slice(r, r, &vals[r..]),
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Parse("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}
