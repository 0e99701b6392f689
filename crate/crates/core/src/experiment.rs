//! Matrix-multiply runs on the tile grid and the accuracy-versus-rate sweep.
//!
//! The performance metric is the collector's own cycle count between the
//! first and last element of each output row, averaged over rows. The
//! reference value comes from the single-process scheduler; distributed
//! runs pace every process to a common maximum rate.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::blocks::matmul::{mean_row_cycles, value_packet, Record};
use crate::blocks::{build_matmul_grid, GridOptions};
use crate::netgraph::{
    run_oracle, simulate, BuildOptions, LaunchOptions, Mode, NetError, NetworkGraph, OracleOptions,
};
use crate::packet::Packet;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("matrix: {0}")]
    Matrix(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("no output rows were observed")]
    NoRows,
}

/// Dense row-major integer matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<i64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<i64>>) -> Result<Self, ExperimentError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ExperimentError::Matrix("rows differ in length".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    /// Entries drawn uniformly from `-range..=range`.
    pub fn random(rows: usize, cols: usize, range: i64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-range..=range)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: i64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn to_rows(&self) -> Vec<Vec<i64>> {
        self.data.chunks(self.cols.max(1)).map(<[i64]>::to_vec).collect()
    }

    /// Reads a headerless CSV of integers.
    pub fn read_csv(r: impl Read) -> Result<Self, ExperimentError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(r);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| f.parse::<i64>().map_err(|e| ExperimentError::Matrix(format!("{f:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), ExperimentError> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for row in self.to_rows() {
            wtr.write_record(row.iter().map(i64::to_string))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// How to execute a grid.
#[derive(Debug, Clone)]
pub enum Execution {
    Oracle,
    Distributed {
        launch: LaunchOptions,
        build: BuildOptions,
        max_rate_hz: Option<f64>,
        timeout: Duration,
    },
}

#[derive(Debug, Clone)]
pub struct MatmulOutcome {
    pub y: Matrix,
    pub records: Vec<Record>,
    pub mean_row_cycles: f64,
    /// Per output row, last minus first collector arrival cycle.
    pub row_cycles: Vec<(u64, u64)>,
    pub wall: Duration,
    pub processes: usize,
}

fn stimulus(a: &Matrix) -> BTreeMap<String, Vec<Packet>> {
    (0..a.cols())
        .map(|i| {
            let packets = (0..a.rows()).map(|m| value_packet(a.get(m, i), m as u64)).collect();
            (format!("a{i}"), packets)
        })
        .collect()
}

fn row_spans(records: &[Record]) -> Vec<(u64, u64)> {
    let mut spans: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for r in records {
        let e = spans.entry(r.row).or_insert((r.cycle, r.cycle));
        e.0 = e.0.min(r.cycle);
        e.1 = e.1.max(r.cycle);
    }
    spans.into_iter().map(|(row, (lo, hi))| (row, hi - lo)).collect()
}

/// A cycle budget comfortably above what the grid needs.
fn horizon(a_rows: usize, rows: usize, cols: usize, k: u32) -> u64 {
    let per_hop = u64::from(k) + 4;
    4 * (a_rows + rows + cols) as u64 * per_hop + 10_000
}

/// Computes `Y = A * B` on a tile grid holding `B`.
pub fn run_matmul(a: &Matrix, b: &Matrix, grid: &GridOptions, exec: &Execution) -> Result<MatmulOutcome, ExperimentError> {
    if a.cols() != b.rows() || a.rows() == 0 {
        return Err(NetError::ShapeMismatch(format!(
            "A is {}x{}, B is {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ))
        .into());
    }
    let grid = GridOptions {
        a_rows: a.rows(),
        ..grid.clone()
    };
    let mode = match exec {
        Execution::Oracle => Mode::SingleNetlist,
        Execution::Distributed { .. } => Mode::Distributed,
    };
    let mut g = NetworkGraph::new(mode);
    let ports = build_matmul_grid(&mut g, &b.to_rows(), &grid)?;
    let expected = a.rows() * b.cols();
    let stim = stimulus(a);
    let t0 = Instant::now();
    let (packets, processes) = match exec {
        Execution::Oracle => {
            let opts = OracleOptions::new(horizon(a.rows(), b.rows(), b.cols(), grid.compute_cycles))
                .expect(ports.y_label.clone(), expected);
            let trace = run_oracle(&g, &stim, &opts)?;
            (trace.packets(&ports.y_label), 1)
        }
        Execution::Distributed {
            launch,
            build,
            max_rate_hz,
            timeout,
        } => {
            g.set_max_rate(*max_rate_hz);
            let plan = g.build(build)?;
            let mut run = simulate(&plan, launch)?;
            let expect: BTreeMap<_, _> = [(ports.y_label.clone(), expected)].into();
            let result = run.exchange(&stim, &expect, *timeout);
            run.shutdown();
            let mut got = result?;
            (got.remove(&ports.y_label).unwrap_or_default(), plan.workers.len())
        }
    };
    let wall = t0.elapsed();
    let records: Vec<Record> = packets.iter().map(Record::decode).collect();
    let mut y = Matrix::zeros(a.rows(), b.cols());
    for r in &records {
        let (row, col) = (r.row as usize, r.col as usize);
        if row >= y.rows() || col >= y.cols() {
            return Err(ExperimentError::Matrix(format!("output element ({row}, {col}) is outside Y")));
        }
        y.set(row, col, r.value);
    }
    let mean = mean_row_cycles(&records).ok_or(ExperimentError::NoRows)?;
    Ok(MatmulOutcome {
        y,
        row_cycles: row_spans(&records),
        records,
        mean_row_cycles: mean,
        wall,
        processes,
    })
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub rates_hz: Vec<f64>,
    pub repetitions: usize,
    pub grid: usize,
    pub sub_grid: usize,
    pub a_rows: usize,
    pub compute_cycles: u32,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            rates_hz: vec![100_000.0, 10_000.0, 1_000.0, 100.0],
            repetitions: 3,
            grid: 8,
            sub_grid: 4,
            a_rows: 8,
            compute_cycles: 32,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SweepRow {
    pub max_rate_hz: f64,
    /// Repetition index, or `mean` for the per-rate aggregate.
    pub repetition: String,
    pub measured_row_cycles: f64,
    pub oracle_row_cycles: f64,
    pub relative_error: f64,
}

/// Runs the oracle once, then the distributed grid at each rate.
pub fn sweep(
    spec: &SweepSpec,
    launch: &LaunchOptions,
    build_dir: &std::path::Path,
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>, ExperimentError> {
    if spec.repetitions == 0 || spec.rates_hz.is_empty() {
        return Err(ExperimentError::Matrix("sweep needs at least one rate and repetition".into()));
    }
    let a = Matrix::random(spec.a_rows, spec.grid, 9, spec.seed);
    let b = Matrix::random(spec.grid, spec.grid, 9, spec.seed.wrapping_add(1));
    let grid = GridOptions::new(spec.a_rows, spec.compute_cycles, 1).with_sub_grid(spec.sub_grid, spec.sub_grid);
    let oracle = run_matmul(&a, &b, &grid, &Execution::Oracle)?;
    crate::pacing::warn_if_short(oracle.mean_row_cycles);

    let mut rates = spec.rates_hz.clone();
    rates.sort_by(|x, y| y.total_cmp(x));
    let cycles = horizon(spec.a_rows, spec.grid, spec.grid, spec.compute_cycles) as f64;
    let mut rows = Vec::new();
    for &rate in &rates {
        let mut errs = Vec::new();
        let mut measured = Vec::new();
        for rep in 0..spec.repetitions {
            let exec = Execution::Distributed {
                launch: launch.clone(),
                build: BuildOptions::new(build_dir),
                max_rate_hz: Some(rate),
                timeout: Duration::from_secs_f64(cycles / rate * 2.0 + 30.0),
            };
            let out = run_matmul(&a, &b, &grid, &exec)?;
            if out.y != oracle.y {
                return Err(ExperimentError::Matrix(format!("distributed Y differs from oracle at {rate} Hz")));
            }
            let err = (out.mean_row_cycles - oracle.mean_row_cycles).abs() / oracle.mean_row_cycles;
            let row = SweepRow {
                max_rate_hz: rate,
                repetition: rep.to_string(),
                measured_row_cycles: out.mean_row_cycles,
                oracle_row_cycles: oracle.mean_row_cycles,
                relative_error: err,
            };
            progress(&row);
            rows.push(row);
            errs.push(err);
            measured.push(out.mean_row_cycles);
        }
        let n = spec.repetitions as f64;
        let agg = SweepRow {
            max_rate_hz: rate,
            repetition: "mean".into(),
            measured_row_cycles: measured.iter().sum::<f64>() / n,
            oracle_row_cycles: oracle.mean_row_cycles,
            relative_error: errs.iter().sum::<f64>() / n,
        };
        progress(&agg);
        rows.push(agg);
    }
    Ok(rows)
}

/// The per-rate aggregate rows of a sweep, highest rate first.
pub fn aggregates(rows: &[SweepRow]) -> Vec<&SweepRow> {
    rows.iter().filter(|r| r.repetition == "mean").collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], w: impl Write) -> Result<(), ExperimentError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
