//! Index arithmetic for window-wise focal attention: window partitioning,
//! pooled-grid extents, per-level focal regions and the token/area budget
//! calculator.
//!
//! Coordinates are signed so that region cells falling off the map can be
//! reported (and flagged invalid) rather than clamped.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{FocalError, Result};

/// One granularity tier: sub-windows of `sub_window x sub_window` tokens are
/// pooled into one token, and a square of `region x region` such tokens is
/// attended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FocalLevel {
    pub sub_window: usize,
    pub region: usize,
}

impl FocalLevel {
    pub const fn new(sub_window: usize, region: usize) -> Self {
        FocalLevel { sub_window, region }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sub_window == 0 {
            return Err(FocalError::config("sub_window", "must be >= 1"));
        }
        if self.region == 0 {
            return Err(FocalError::config("region", "must be >= 1"));
        }
        Ok(())
    }

    pub fn keys(&self) -> usize {
        self.region * self.region
    }
}

/// Total gathered keys per window, `sum_l region_l^2`.
pub fn key_count(levels: &[FocalLevel]) -> usize {
    levels.iter().map(FocalLevel::keys).sum()
}

pub fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Extents of the pooled grid for one level on an `height x width` map.
pub fn pooled_extent(height: usize, width: usize, sub_window: usize) -> (usize, usize) {
    (ceil_div(height, sub_window), ceil_div(width, sub_window))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WindowGrid {
    /// Window partition size.
    pub window: usize,
    pub rows: usize,
    pub cols: usize,
    /// Real map extents.
    pub height: usize,
    pub width: usize,
    /// Extents after zero-padding to a multiple of `window`.
    pub padded_height: usize,
    pub padded_width: usize,
}

impl WindowGrid {
    pub fn num_windows(&self) -> usize {
        self.rows * self.cols
    }

    pub fn window_origin(&self, row: usize, col: usize) -> (usize, usize) {
        (row * self.window, col * self.window)
    }

    /// Real (unpadded) token positions inside a window, row-major.
    pub fn window_tokens(&self, row: usize, col: usize) -> Vec<(usize, usize)> {
        let (r0, c0) = self.window_origin(row, col);
        let mut out = Vec::with_capacity(self.window * self.window);
        for r in r0..(r0 + self.window).min(self.height) {
            for c in c0..(c0 + self.window).min(self.width) {
                out.push((r, c));
            }
        }
        out
    }

    fn check(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.rows || col >= self.cols {
            return Err(FocalError::Index {
                row,
                col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }
}

/// Tiles an `height x width` map with `window x window` windows, padding the
/// map up to the next multiple when it does not divide evenly.
pub fn partition_windows(height: usize, width: usize, window: usize) -> Result<WindowGrid> {
    if height == 0 || width == 0 || window == 0 {
        return Err(FocalError::config("partition", "extents and window size must be >= 1"));
    }
    let rows = ceil_div(height, window);
    let cols = ceil_div(width, window);
    Ok(WindowGrid {
        window,
        rows,
        cols,
        height,
        width,
        padded_height: rows * window,
        padded_width: cols * window,
    })
}

/// First region cell along one axis: the region is centered on the
/// footprint `[start, start + len)`, with the odd leftover cell placed after.
pub fn region_start(footprint_start: isize, footprint_len: isize, region: usize) -> isize {
    let extra = region as isize - footprint_len;
    footprint_start - extra.div_euclid(2)
}

/// Pooled cells occupied by the fine-grained span `[lo, hi)`.
fn footprint(lo: usize, hi: usize, sub_window: usize) -> (isize, isize) {
    let start = (lo / sub_window) as isize;
    let end = ceil_div(hi, sub_window) as isize;
    (start, end - start)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub row: isize,
    pub col: isize,
    pub valid: bool,
}

/// The `region x region` pooled cells a window gathers at one level, in
/// row-major order. Cells outside the level's pooled grid are flagged invalid.
pub fn focal_region_coords(
    grid: &WindowGrid,
    window: (usize, usize),
    level: FocalLevel,
) -> Result<Vec<Slot>> {
    grid.check(window.0, window.1)?;
    level.validate()?;
    let (r0, c0) = grid.window_origin(window.0, window.1);
    let (pr, pc) = pooled_extent(grid.height, grid.width, level.sub_window);
    let (fr, fr_len) = footprint(r0, r0 + grid.window, level.sub_window);
    let (fc, fc_len) = footprint(c0, c0 + grid.window, level.sub_window);
    let top = region_start(fr, fr_len, level.region);
    let left = region_start(fc, fc_len, level.region);
    let mut slots = Vec::with_capacity(level.keys());
    for dr in 0..level.region as isize {
        for dc in 0..level.region as isize {
            let (row, col) = (top + dr, left + dc);
            let valid = row >= 0 && col >= 0 && (row as usize) < pr && (col as usize) < pc;
            slots.push(Slot { row, col, valid });
        }
    }
    Ok(slots)
}

/// Where a gathered key comes from: level and flat index into that level's
/// pooled grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySource {
    pub level: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct WindowGather {
    pub row: usize,
    pub col: usize,
    /// `slots[l]` holds the `region_l^2` cells of level `l`.
    pub slots: Vec<Vec<Slot>>,
    /// Flattened level-major key list; `None` marks a masked slot.
    pub sources: Vec<Option<KeySource>>,
}

impl WindowGather {
    pub fn mask(&self) -> Vec<bool> {
        self.sources.iter().map(Option::is_some).collect()
    }
}

/// Precomputed key/value index map for every window of a layer.
#[derive(Debug, Clone)]
pub struct GatherPlan {
    pub grid: WindowGrid,
    pub levels: Vec<FocalLevel>,
    /// Pooled grid extents per level.
    pub pooled: Vec<(usize, usize)>,
    pub windows: Vec<WindowGather>,
    /// Keys per window, counting masked slots.
    pub keys: usize,
}

impl GatherPlan {
    pub fn build(height: usize, width: usize, window: usize, levels: &[FocalLevel]) -> Result<Self> {
        if levels.is_empty() {
            return Err(FocalError::config("levels", "at least one focal level is required"));
        }
        let grid = partition_windows(height, width, window)?;
        let pooled: Vec<_> = levels
            .iter()
            .map(|l| pooled_extent(height, width, l.sub_window))
            .collect();
        let mut windows = Vec::with_capacity(grid.num_windows());
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let mut slots = Vec::with_capacity(levels.len());
                let mut sources = Vec::with_capacity(key_count(levels));
                for (l, level) in levels.iter().enumerate() {
                    let cells = focal_region_coords(&grid, (row, col), *level)?;
                    let pw = pooled[l].1;
                    sources.extend(cells.iter().map(|s| {
                        s.valid.then(|| KeySource {
                            level: l,
                            index: s.row as usize * pw + s.col as usize,
                        })
                    }));
                    slots.push(cells);
                }
                windows.push(WindowGather { row, col, slots, sources });
            }
        }
        Ok(GatherPlan {
            grid,
            levels: levels.to_vec(),
            pooled,
            windows,
            keys: key_count(levels),
        })
    }

    pub fn window(&self, row: usize, col: usize) -> Result<&WindowGather> {
        self.grid.check(row, col)?;
        Ok(&self.windows[row * self.grid.cols + col])
    }

    /// `window_row,window_col,level,slot,pooled_row,pooled_col,valid` rows,
    /// optionally restricted to one window.
    pub fn to_csv(&self, only: Option<(usize, usize)>) -> Result<String> {
        if let Some((r, c)) = only {
            self.grid.check(r, c)?;
        }
        let mut out = String::from("window_row,window_col,level,slot,pooled_row,pooled_col,valid\n");
        for w in &self.windows {
            if only.is_some_and(|o| o != (w.row, w.col)) {
                continue;
            }
            for (l, cells) in w.slots.iter().enumerate() {
                for (k, s) in cells.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{}",
                        w.row, w.col, l, k, s.row, s.col, s.valid as u8
                    );
                }
            }
        }
        Ok(out)
    }
}

/// Receptive-field area (distinct fine tokens covered) and token budget for a
/// single query on an unbounded map.
pub fn receptive_field(levels: &[FocalLevel]) -> Result<(u64, u64)> {
    if levels.is_empty() {
        return Err(FocalError::config("levels", "at least one focal level is required"));
    }
    let mut spans = Vec::with_capacity(levels.len());
    for level in levels {
        level.validate()?;
        // query token sits at the origin; its cell at every level is cell 0
        let start = region_start(0, 1, level.region);
        let lo = start * level.sub_window as isize;
        let hi = (start + level.region as isize) * level.sub_window as isize;
        spans.push((lo, hi));
    }
    let min = spans.iter().map(|s| s.0).min().unwrap();
    let max = spans.iter().map(|s| s.1).max().unwrap();
    let extent = (max - min) as usize;
    let mut covered = vec![false; extent * extent];
    for &(lo, hi) in &spans {
        for r in lo..hi {
            let base = (r - min) as usize * extent;
            for c in lo..hi {
                covered[base + (c - min) as usize] = true;
            }
        }
    }
    let area = covered.iter().filter(|&&c| c).count() as u64;
    let tokens = key_count(levels) as u64;
    Ok((area, tokens))
}

/// Level schedule with granularity doubling per level up to `cap`, where the
/// attended extent in fine tokens doubles with each level.
pub fn doubling_schedule(base_region: usize, num_levels: usize, cap: usize) -> Vec<FocalLevel> {
    (0..num_levels)
        .map(|l| {
            let sub_window = (1usize << l).min(cap);
            let extent = base_region << l;
            FocalLevel::new(sub_window, extent / sub_window)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttentionCost {
    pub pool_macs: u64,
    pub attn_macs: u64,
}

/// Multiply-accumulate counts of one focal attention layer on an
/// `height x width x dim` map, excluding the linear projections.
pub fn attention_cost(
    height: usize,
    width: usize,
    dim: usize,
    window: usize,
    levels: &[FocalLevel],
) -> Result<AttentionCost> {
    if height == 0 || width == 0 || dim == 0 || window == 0 {
        return Err(FocalError::config("attention_cost", "all extents must be positive"));
    }
    let tokens = (height * width * dim) as u64;
    let pooled_levels = levels.iter().filter(|l| l.sub_window > 1).count() as u64;
    Ok(AttentionCost {
        pool_macs: pooled_levels * tokens,
        attn_macs: 2 * tokens * key_count(levels) as u64,
    })
}
