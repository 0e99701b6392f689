//! Builds a systolic matrix-multiply grid into a network.
//!
//! Tile `(i, j)` holds `B[i][j]`. Column `i` of A enters grid row `i` from
//! the west through external `a{i}` and moves east; partial sums start as
//! zeros on the north edge and move south, so column `j` of Y leaves the
//! south edge into the collector's input `s{j}`. The collector's output is
//! external `y`.
//!
//! With more than one tile per process, the grid is cut into rectangular
//! sub-grids, each a single-netlist network instantiated as one block. A
//! sub-grid's ports are `w{i}`, `n{j}`, `e{i}` and `s{j}` in local
//! coordinates; sub-grids on the east edge have no `e` ports.

use super::BlockSpec;
use crate::netgraph::{BlockDef, InstanceId, Mode, NetError, NetworkGraph, PortRef};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridOptions {
    /// Rows of A, i.e. packets per west input.
    pub a_rows: usize,
    pub compute_cycles: u32,
    pub tiles_per_process: usize,
    /// Explicit sub-grid shape; overrides `tiles_per_process` and always
    /// produces composite instances.
    pub sub_grid: Option<(usize, usize)>,
}

impl GridOptions {
    pub fn new(a_rows: usize, compute_cycles: u32, tiles_per_process: usize) -> Self {
        GridOptions {
            a_rows,
            compute_cycles,
            tiles_per_process,
            sub_grid: None,
        }
    }

    pub fn with_sub_grid(mut self, h: usize, w: usize) -> Self {
        self.sub_grid = Some((h, w));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridPorts {
    pub a_labels: Vec<String>,
    pub y_label: String,
    /// Instances holding tiles: one per tile, or one per sub-grid.
    pub tile_instances: usize,
    pub sub_grid: (usize, usize),
}

fn shape(rows: usize, cols: usize, opts: &GridOptions) -> Result<(usize, usize), NetError> {
    if let Some((h, w)) = opts.sub_grid {
        if h == 0 || w == 0 || rows % h != 0 || cols % w != 0 {
            return Err(NetError::ShapeMismatch(format!(
                "{h}x{w} sub-grids do not tile a {rows}x{cols} grid"
            )));
        }
        return Ok((h, w));
    }
    let t = opts.tiles_per_process;
    if t == 0 {
        return Err(NetError::ShapeMismatch("tiles per process must be positive".into()));
    }
    // Most square factorization that divides the grid.
    let mut h = (t as f64).sqrt() as usize;
    while h > 0 {
        if t % h == 0 {
            for (a, b) in [(h, t / h), (t / h, h)] {
                if rows % a == 0 && cols % b == 0 {
                    return Ok((a, b));
                }
            }
        }
        h -= 1;
    }
    Err(NetError::ShapeMismatch(format!(
        "{t} tiles per process cannot tile a {rows}x{cols} grid"
    )))
}

fn tile_def(b: i64, k: u32, east: bool) -> Result<BlockDef, NetError> {
    BlockDef::new(
        format!("tile_b{b}_k{k}_{}", if east { "e" } else { "x" }),
        BlockSpec::MatmulTile {
            b,
            compute_cycles: k,
            east,
        },
    )
}

/// A place in the outer graph where tile `(i, j)`'s ports live.
struct Cells {
    ids: Vec<InstanceId>,
    h: usize,
    w: usize,
    block_cols: usize,
    composite: bool,
}

impl Cells {
    fn port(&self, g: &NetworkGraph, i: usize, j: usize, side: &str) -> Result<PortRef, NetError> {
        let id = self.ids[(i / self.h) * self.block_cols + j / self.w];
        if !self.composite {
            return g.port(id, side);
        }
        let name = match side {
            "west" => format!("w{}", i % self.h),
            "east" => format!("e{}", i % self.h),
            "north" => format!("n{}", j % self.w),
            "south" => format!("s{}", j % self.w),
            _ => unreachable!(),
        };
        g.port(id, &name)
    }
}

/// Adds the tiles, edge blocks, and externals for `B` to `g`.
pub fn build_matmul_grid(g: &mut NetworkGraph, b: &[Vec<i64>], opts: &GridOptions) -> Result<GridPorts, NetError> {
    let rows = b.len();
    let cols = b.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || b.iter().any(|r| r.len() != cols) {
        return Err(NetError::ShapeMismatch("B must be a nonempty rectangle".into()));
    }
    let (h, w) = shape(rows, cols, opts)?;
    // An explicit shape always nests, even 1x1.
    let composite = (h, w) != (1, 1) || opts.sub_grid.is_some();
    let block_rows = rows / h;
    let block_cols = cols / w;
    let k = opts.compute_cycles;

    let mut ids = Vec::with_capacity(block_rows * block_cols);
    for bi in 0..block_rows {
        for bj in 0..block_cols {
            let id = if composite {
                let inner = sub_grid(b, bi * h, bj * w, h, w, k, bj + 1 < block_cols)?;
                let def = BlockDef::new(
                    format!("sub{bi}_{bj}"),
                    BlockSpec::Network {
                        network: Box::new(inner.to_config()),
                    },
                )?;
                g.instantiate(format!("sub{bi}_{bj}"), &def)?
            } else {
                g.instantiate(format!("t{bi}_{bj}"), &tile_def(b[bi][bj], k, bj + 1 < cols)?)?
            };
            ids.push(id);
        }
    }
    let cells = Cells {
        ids,
        h,
        w,
        block_cols,
        composite,
    };

    for i in 0..rows {
        for j in 0..cols {
            if j + 1 < cols && (j + 1) % w == 0 {
                let from = cells.port(g, i, j, "east")?;
                let to = cells.port(g, i, j + 1, "west")?;
                g.connect(from, to)?;
            }
            if i + 1 < rows && (i + 1) % h == 0 {
                let from = cells.port(g, i, j, "south")?;
                let to = cells.port(g, i + 1, j, "north")?;
                g.connect(from, to)?;
            }
        }
    }

    let zeros = g.instantiate(
        "zeros",
        &BlockDef::new(
            format!("zeros{cols}x{}", opts.a_rows),
            BlockSpec::Zeros {
                outputs: cols,
                count: opts.a_rows as u64,
            },
        )?,
    )?;
    let collector = g.instantiate(
        "collector",
        &BlockDef::new(format!("collector{cols}"), BlockSpec::Collector { inputs: cols })?,
    )?;
    for j in 0..cols {
        g.connect(g.port(zeros, &format!("n{j}"))?, cells.port(g, 0, j, "north")?)?;
        g.connect(cells.port(g, rows - 1, j, "south")?, g.port(collector, &format!("s{j}"))?)?;
    }
    let mut a_labels = Vec::with_capacity(rows);
    for i in 0..rows {
        let label = format!("a{i}");
        g.external(cells.port(g, i, 0, "west")?, label.clone())?;
        a_labels.push(label);
    }
    g.external(g.port(collector, "y")?, "y")?;

    Ok(GridPorts {
        a_labels,
        y_label: "y".into(),
        tile_instances: cells.ids.len(),
        sub_grid: (h, w),
    })
}

fn sub_grid(
    b: &[Vec<i64>],
    i0: usize,
    j0: usize,
    h: usize,
    w: usize,
    k: u32,
    has_east: bool,
) -> Result<NetworkGraph, NetError> {
    let mut g = NetworkGraph::new(Mode::SingleNetlist);
    let mut ids = vec![vec![0; w]; h];
    for (li, row) in ids.iter_mut().enumerate() {
        for (lj, id) in row.iter_mut().enumerate() {
            let east = lj + 1 < w || has_east;
            *id = g.instantiate(format!("t{li}_{lj}"), &tile_def(b[i0 + li][j0 + lj], k, east)?)?;
        }
    }
    for li in 0..h {
        for lj in 0..w {
            let id = ids[li][lj];
            if lj + 1 < w {
                g.connect(g.port(id, "east")?, g.port(ids[li][lj + 1], "west")?)?;
            } else if has_east {
                g.external(g.port(id, "east")?, format!("e{li}"))?;
            }
            if li + 1 < h {
                g.connect(g.port(id, "south")?, g.port(ids[li + 1][lj], "north")?)?;
            } else {
                g.external(g.port(id, "south")?, format!("s{lj}"))?;
            }
            if lj == 0 {
                g.external(g.port(id, "west")?, format!("w{li}"))?;
            }
            if li == 0 {
                g.external(g.port(id, "north")?, format!("n{lj}"))?;
            }
        }
    }
    Ok(g)
}
