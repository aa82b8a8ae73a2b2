//! Reading and writing traffic matrices, CDR aggregation and a synthetic
//! traffic generator.
//!
//! The wide CSV layout has one header row of channel ids and one row per time
//! step. A first column named `timestamp` is optional and ignored on load.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::processing::TrafficMatrix;

const TIMESTAMP: &str = "timestamp";

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        msg: msg.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => parse_err(path, line, format!("{kind:?}")),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path)?;
    Ok(csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

/// Loads a wide CSV file; rows of the file become columns of the matrix.
pub fn load_wide_csv(path: &Path, step_seconds: u64) -> Result<TrafficMatrix> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let skip = usize::from(header[0].eq_ignore_ascii_case(TIMESTAMP));
    let ids: Vec<String> = header.iter().skip(skip).map(str::to_string).collect();
    if ids.is_empty() {
        return Err(Error::Data(format!("{}: no channel columns", path.display())));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); ids.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        for (col, cell) in columns.iter_mut().zip(rec.iter().skip(skip)) {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite value {cell:?}")));
            }
            col.push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    TrafficMatrix::new(Matrix::from_rows(&columns)?, ids, step_seconds)
}

/// Writes `x` in the wide layout. With `start` set, a timestamp column is
/// added counting from `start` in steps of `x.step_seconds`.
pub fn save_wide_csv(x: &TrafficMatrix, path: &Path, start: Option<i64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = Vec::with_capacity(x.channels() + 1);
    if start.is_some() {
        header.push(TIMESTAMP.into());
    }
    header.extend(x.channel_ids.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for t in 0..x.len() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        if let Some(s) = start {
            row.push((s + t as i64 * x.step_seconds as i64).to_string());
        }
        // Shortest representation that parses back to the same bits.
        row.extend((0..x.channels()).map(|c| x.values.get(c, t).to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a long-format call detail record file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawCdrRecord {
    pub timestamp: i64,
    pub grid_id: i64,
    pub traffic: f64,
}

/// Reads a long-format CSV with `timestamp`, `grid_id` and the named traffic
/// column. Other columns are ignored.
pub fn read_long_cdr(path: &Path, traffic_column: &str) -> Result<Vec<RawCdrRecord>> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| parse_err(path, 1, format!("missing column {name:?}")))
    };
    let (ti, gi, vi) = (find(TIMESTAMP)?, find("grid_id")?, find(traffic_column)?);

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let field = |i: usize| &rec[i];
        let bad = |what: &str, cell: &str| parse_err(path, line, format!("bad {what}: {cell:?}"));
        let traffic: f64 = match field(vi) {
            // Missing activity in the raw exports means no traffic.
            "" => 0.0,
            s => s.parse().map_err(|_| bad(traffic_column, s))?,
        };
        out.push(RawCdrRecord {
            timestamp: field(ti).parse().map_err(|_| bad(TIMESTAMP, field(ti)))?,
            grid_id: field(gi).parse().map_err(|_| bad("grid_id", field(gi)))?,
            traffic,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    Ok(out)
}

/// Sums traffic per grid and interval bucket. The first bucket starts at the
/// earliest timestamp rounded down to a multiple of the interval; buckets
/// with no records are zero. Channels are ordered by grid id.
pub fn aggregate_long_cdr(records: &[RawCdrRecord], interval_seconds: u64) -> Result<TrafficMatrix> {
    if interval_seconds == 0 {
        return Err(Error::Parameter("interval must be positive".into()));
    }
    if records.is_empty() {
        return Err(Error::Data("no records to aggregate".into()));
    }
    if let Some(r) = records
        .iter()
        .find(|r| !(r.traffic >= 0.0) || !r.traffic.is_finite())
    {
        return Err(Error::Data(format!(
            "invalid traffic {} for grid {} at {}",
            r.traffic, r.grid_id, r.timestamp
        )));
    }
    let step = interval_seconds as i64;
    let t_min = records.iter().map(|r| r.timestamp).min().unwrap_or(0);
    let t_max = records.iter().map(|r| r.timestamp).max().unwrap_or(0);
    let t0 = t_min.div_euclid(step) * step;
    let buckets = ((t_max - t0) / step + 1) as usize;

    let mut grids: BTreeMap<i64, usize> = records.iter().map(|r| (r.grid_id, 0)).collect();
    for (k, slot) in grids.values_mut().enumerate() {
        *slot = k;
    }
    let mut values = Matrix::zeros(grids.len(), buckets);
    for r in records {
        let row = grids[&r.grid_id];
        let col = ((r.timestamp - t0) / step) as usize;
        values.set(row, col, values.get(row, col) + r.traffic);
    }
    let ids = grids.keys().map(i64::to_string).collect();
    TrafficMatrix::new(values, ids, interval_seconds)
}

/// Uniform sample of `count` channels without replacement, kept in their
/// original order.
pub fn sample_channels(x: &TrafficMatrix, count: usize, seed: u64) -> Result<TrafficMatrix> {
    if count == 0 || count > x.channels() {
        return Err(Error::Parameter(format!(
            "cannot sample {count} of {} channels",
            x.channels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, x.channels(), count).into_vec();
    picked.sort_unstable();
    let rows: Vec<&[f64]> = picked.iter().map(|&i| x.values.row(i)).collect();
    let ids = picked.iter().map(|&i| x.channel_ids[i].clone()).collect();
    TrafficMatrix::new(Matrix::from_rows(&rows)?, ids, x.step_seconds)
}

/// Parameters of the synthetic traffic generator.
///
/// Channel `c` at step `t` is
/// `s_c * w(t) * (baseline + daily_amplitude * sin(2 pi t / period))`
/// plus decaying bursts at Poisson-distributed times and Gaussian noise,
/// clipped at zero. `s_c` is drawn from `[1 - channel_spread, 1 + channel_spread]`
/// and `w(t)` is `weekly_multiplier` on the last two days of each week and 1
/// otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub steps: usize,
    pub period: usize,
    pub baseline: f64,
    pub daily_amplitude: f64,
    pub weekly_multiplier: f64,
    pub channel_spread: f64,
    /// Expected bursts per step and channel.
    pub burst_rate: f64,
    pub burst_magnitude: f64,
    /// Decay constant of a burst in steps.
    pub burst_decay: f64,
    pub noise_std: f64,
    pub step_seconds: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            channels: 8,
            steps: 20 * 144,
            period: 144,
            baseline: 10.0,
            daily_amplitude: 6.0,
            weekly_multiplier: 0.9,
            channel_spread: 0.5,
            burst_rate: 0.002,
            burst_magnitude: 8.0,
            burst_decay: 6.0,
            noise_std: 0.5,
            step_seconds: 600,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("baseline", self.baseline),
            ("daily_amplitude", self.daily_amplitude),
            ("weekly_multiplier", self.weekly_multiplier),
            ("burst_rate", self.burst_rate),
            ("burst_magnitude", self.burst_magnitude),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.channel_spread) {
            return Err(Error::Parameter("channel_spread must be in [0, 1)".into()));
        }
        if !(self.burst_decay > 0.0) {
            return Err(Error::Parameter("burst_decay must be positive".into()));
        }
        if self.period < 2 {
            return Err(Error::Parameter("period must be >= 2".into()));
        }
        if self.channels == 0 || self.steps == 0 {
            return Err(Error::Parameter("channels and steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Generates a traffic matrix from `spec`; identical specs give identical
/// matrices. Channel factors are drawn before anything else, so two specs
/// differing only in noise or bursts share them.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TrafficMatrix> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let factors: Vec<f64> = (0..spec.channels)
        .map(|_| 1.0 + spec.channel_spread * (2.0 * rng.random::<f64>() - 1.0))
        .collect();

    let day = spec.period;
    let clean: Vec<f64> = (0..spec.steps)
        .map(|t| {
            let weekday = (t / day) % 7;
            let w = if weekday >= 5 { spec.weekly_multiplier } else { 1.0 };
            let phase = 2.0 * std::f64::consts::PI * (t % day) as f64 / day as f64;
            w * (spec.baseline + spec.daily_amplitude * phase.sin())
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut values = Matrix::zeros(spec.channels, spec.steps);
    for (c, &s) in factors.iter().enumerate() {
        let row = values.row_mut(c);
        for (v, base) in row.iter_mut().zip(&clean) {
            *v = s * base;
        }
        if spec.burst_rate > 0.0 && spec.burst_magnitude > 0.0 {
            let gap = Exp::new(spec.burst_rate).map_err(|e| Error::Parameter(e.to_string()))?;
            let mut at = gap.sample(&mut rng);
            while at < spec.steps as f64 {
                let start = at.ceil() as usize;
                for (k, v) in row.iter_mut().enumerate().skip(start) {
                    let dt = (k - start) as f64 / spec.burst_decay;
                    if dt > 20.0 {
                        break;
                    }
                    *v += s * spec.burst_magnitude * (-dt).exp();
                }
                at += gap.sample(&mut rng);
            }
        }
        if spec.noise_std > 0.0 {
            for v in row.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        for v in row.iter_mut() {
            *v = v.max(0.0);
        }
    }
    let ids = (0..spec.channels).map(|c| format!("ch{c}")).collect();
    TrafficMatrix::new(values, ids, spec.step_seconds)
}

/// Writes long-format records; used to build conversion fixtures.
pub fn save_long_cdr(records: &[RawCdrRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    writeln!(f, "timestamp,grid_id,traffic")?;
    for r in records {
        writeln!(f, "{},{},{}", r.timestamp, r.grid_id, r.traffic)?;
    }
    f.flush()?;
    Ok(())
}
