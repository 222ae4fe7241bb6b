//! Park grid, patrol tracks, observation logs and the per-window effort/label
//! matrices built from them.
//!
//! Cells are half-open squares `[x·s, (x+1)·s) × [y·s, (y+1)·s)` indexed
//! row-major (`id = y·width + x`). The far edges of the bounding box belong to
//! the last row/column so every point of the closed box maps to a cell.

use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParkGrid {
    width: usize,
    height: usize,
    cell_size_km: f64,
    features: Vec<Vec<f64>>,
    feature_names: Vec<String>,
    patrol_posts: Vec<usize>,
    mask: Vec<bool>,
}

impl ParkGrid {
    pub fn new(
        width: usize,
        height: usize,
        cell_size_km: f64,
        features: Vec<Vec<f64>>,
        feature_names: Vec<String>,
        patrol_posts: Vec<usize>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = width * height;
        if n == 0 {
            return Err(Error::InvalidGrid("grid must have at least one cell".into()));
        }
        if !(cell_size_km > 0.0 && cell_size_km.is_finite()) {
            return Err(Error::InvalidGrid(format!("cell size {cell_size_km} must be positive")));
        }
        if features.len() != n || mask.len() != n {
            return Err(Error::InvalidGrid(format!(
                "expected {n} feature rows and mask entries, got {} and {}",
                features.len(),
                mask.len()
            )));
        }
        let k = feature_names.len();
        for (id, f) in features.iter().enumerate() {
            if f.len() != k {
                return Err(Error::InvalidGrid(format!(
                    "cell {id} has {} features, expected {k}",
                    f.len()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidGrid(format!("cell {id} has a non-finite feature")));
            }
        }
        for &p in &patrol_posts {
            if p >= n || !mask[p] {
                return Err(Error::InvalidGrid(format!("patrol post {p} is outside the park mask")));
            }
        }
        Ok(Self {
            width,
            height,
            cell_size_km,
            features,
            feature_names,
            patrol_posts,
            mask,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size_km(&self) -> f64 {
        self.cell_size_km
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn features(&self, cell: usize) -> &[f64] {
        &self.features[cell]
    }

    pub fn patrol_posts(&self) -> &[usize] {
        &self.patrol_posts
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_masked(&self, cell: usize) -> bool {
        self.mask[cell]
    }

    /// Ids of cells inside the park, ascending.
    pub fn masked_cells(&self) -> Vec<usize> {
        (0..self.num_cells()).filter(|&c| self.mask[c]).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn cell_id(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn cell_xy(&self, cell: usize) -> (usize, usize) {
        (cell % self.width, cell / self.width)
    }

    /// Masked 4-neighbours of a cell in ascending id order.
    pub fn neighbors(&self, cell: usize) -> Vec<usize> {
        let (x, y) = self.cell_xy(cell);
        let mut out = Vec::with_capacity(4);
        if y > 0 {
            out.push(self.cell_id(x, y - 1));
        }
        if x > 0 {
            out.push(self.cell_id(x - 1, y));
        }
        if x + 1 < self.width {
            out.push(self.cell_id(x + 1, y));
        }
        if y + 1 < self.height {
            out.push(self.cell_id(x, y + 1));
        }
        out.retain(|&c| self.mask[c]);
        out
    }

    pub fn extent_km(&self) -> (f64, f64) {
        (
            self.width as f64 * self.cell_size_km,
            self.height as f64 * self.cell_size_km,
        )
    }

    pub fn contains_point(&self, x_km: f64, y_km: f64) -> bool {
        let (w, h) = self.extent_km();
        x_km.is_finite() && y_km.is_finite() && (0.0..=w).contains(&x_km) && (0.0..=h).contains(&y_km)
    }

    /// Cell containing a point, or `None` outside the bounding box.
    pub fn locate(&self, x_km: f64, y_km: f64) -> Option<usize> {
        if !self.contains_point(x_km, y_km) {
            return None;
        }
        let cx = ((x_km / self.cell_size_km).floor() as usize).min(self.width - 1);
        let cy = ((y_km / self.cell_size_km).floor() as usize).min(self.height - 1);
        Some(self.cell_id(cx, cy))
    }

    /// Centre of a cell in km.
    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (x, y) = self.cell_xy(cell);
        (
            (x as f64 + 0.5) * self.cell_size_km,
            (y as f64 + 0.5) * self.cell_size_km,
        )
    }
}

/// Half-open time window `[start, end)` in seconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
}

impl TimeWindow {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
}

/// `count` consecutive windows of equal length starting at `start`.
pub fn consecutive_windows(start: f64, length_secs: f64, count: usize) -> Vec<TimeWindow> {
    (0..count)
        .map(|i| {
            let s = start + i as f64 * length_secs;
            TimeWindow::new(s, s + length_secs)
        })
        .collect()
}

pub fn validate_windows(windows: &[TimeWindow]) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::InvalidInput("at least one time window is required".into()));
    }
    for (i, w) in windows.iter().enumerate() {
        if !(w.start.is_finite() && w.end.is_finite() && w.start < w.end) {
            return Err(Error::InvalidInput(format!("time window {i} is empty or non-finite")));
        }
        if i > 0 && windows[i - 1].end > w.start {
            return Err(Error::InvalidInput(format!(
                "time windows {} and {i} overlap or are out of order",
                i - 1
            )));
        }
    }
    Ok(())
}

/// Index of the window containing `t`. Windows must be ordered and disjoint.
pub fn find_window(windows: &[TimeWindow], t: f64) -> Option<usize> {
    let idx = windows.partition_point(|w| w.start <= t);
    if idx == 0 {
        return None;
    }
    windows[idx - 1].contains(t).then_some(idx - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x_km: f64,
    pub y_km: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaypointTrack {
    patrol_id: String,
    points: Vec<Waypoint>,
}

impl WaypointTrack {
    pub fn new(patrol_id: impl Into<String>, points: Vec<Waypoint>) -> Result<Self> {
        let patrol_id = patrol_id.into();
        if points.is_empty() {
            return Err(Error::InvalidInput(format!("track {patrol_id} has no waypoints")));
        }
        if points.windows(2).any(|w| !(w[0].timestamp < w[1].timestamp)) {
            return Err(Error::InvalidInput(format!(
                "track {patrol_id} timestamps are not strictly increasing"
            )));
        }
        Ok(Self { patrol_id, points })
    }

    pub fn patrol_id(&self) -> &str {
        &self.patrol_id
    }

    pub fn points(&self) -> &[Waypoint] {
        &self.points
    }

    /// Total polyline length in km.
    pub fn length_km(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].x_km - w[0].x_km).hypot(w[1].y_km - w[0].y_km))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationCategory {
    Poaching,
    NonPoaching,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x_km: f64,
    pub y_km: f64,
    pub timestamp: f64,
    pub category: ObservationCategory,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationLog {
    pub records: Vec<Observation>,
}

/// Dense `T × cells` matrix, time-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeCellMatrix<T> {
    num_timesteps: usize,
    num_cells: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> TimeCellMatrix<T> {
    pub fn zeros(num_timesteps: usize, num_cells: usize) -> Self {
        Self {
            num_timesteps,
            num_cells,
            data: vec![T::default(); num_timesteps * num_cells],
        }
    }

    pub fn from_vec(num_timesteps: usize, num_cells: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != num_timesteps * num_cells {
            return Err(Error::Shape(format!(
                "{} values for a {num_timesteps}×{num_cells} matrix",
                data.len()
            )));
        }
        Ok(Self {
            num_timesteps,
            num_cells,
            data,
        })
    }

    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn get(&self, t: usize, cell: usize) -> T {
        self.data[t * self.num_cells + cell]
    }

    pub fn set(&mut self, t: usize, cell: usize, v: T) {
        self.data[t * self.num_cells + cell] = v;
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.data[t * self.num_cells..(t + 1) * self.num_cells]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    fn select_rows(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            num_timesteps: range.len(),
            num_cells: self.num_cells,
            data: self.data[range.start * self.num_cells..range.end * self.num_cells].to_vec(),
        }
    }
}

impl TimeCellMatrix<f64> {
    pub fn add(&mut self, t: usize, cell: usize, v: f64) {
        self.data[t * self.num_cells + cell] += v;
    }
}

#[derive(Debug, Clone)]
pub struct EffortReconstruction {
    pub effort: TimeCellMatrix<f64>,
    /// Waypoints dropped because they fell outside the grid bounding box.
    pub skipped_waypoints: usize,
    /// Patrolled length whose interpolated time fell outside every window.
    pub unassigned_km: f64,
}

/// Rebuilds per-window per-cell patrol distance from waypoint tracks.
///
/// Each straight segment between consecutive waypoints is cut at every cell
/// boundary and every window boundary (time is interpolated linearly along
/// the segment). Each piece is credited to the cell and window of its
/// midpoint.
pub fn reconstruct_effort(
    grid: &ParkGrid,
    tracks: &[WaypointTrack],
    windows: &[TimeWindow],
) -> Result<EffortReconstruction> {
    if tracks.is_empty() {
        return Err(Error::InvalidInput("no patrol tracks given".into()));
    }
    validate_windows(windows)?;
    let mut effort = TimeCellMatrix::zeros(windows.len(), grid.num_cells());
    let mut skipped = 0;
    let mut unassigned = 0.0;
    for track in tracks {
        let kept: Vec<Waypoint> = track
            .points()
            .iter()
            .copied()
            .filter(|p| {
                let inside = grid.contains_point(p.x_km, p.y_km);
                if !inside {
                    skipped += 1;
                }
                inside
            })
            .collect();
        for pair in kept.windows(2) {
            unassigned += clip_segment(grid, windows, pair[0], pair[1], &mut effort);
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} waypoints outside the grid");
    }
    Ok(EffortReconstruction {
        effort,
        skipped_waypoints: skipped,
        unassigned_km: unassigned,
    })
}

/// Splits one segment and accumulates it; returns the length not assigned to
/// any window.
fn clip_segment(
    grid: &ParkGrid,
    windows: &[TimeWindow],
    a: Waypoint,
    b: Waypoint,
    effort: &mut TimeCellMatrix<f64>,
) -> f64 {
    let dx = b.x_km - a.x_km;
    let dy = b.y_km - a.y_km;
    let len = dx.hypot(dy);
    if len == 0.0 {
        return 0.0;
    }
    let size = grid.cell_size_km();
    let mut params = vec![0.0, 1.0];
    push_line_crossings(a.x_km, dx, size, &mut params);
    push_line_crossings(a.y_km, dy, size, &mut params);
    let dt = b.timestamp - a.timestamp;
    for w in windows {
        for edge in [w.start, w.end] {
            let s = (edge - a.timestamp) / dt;
            if s > 0.0 && s < 1.0 {
                params.push(s);
            }
        }
    }
    params.sort_by(|p, q| p.total_cmp(q));
    params.dedup_by(|q, p| (*q - *p).abs() < 1e-12);
    if *params.last().unwrap() < 1.0 {
        params.push(1.0);
    }

    let mut unassigned = 0.0;
    for pair in params.windows(2) {
        let (s0, s1) = (pair[0], pair[1]);
        let piece = (s1 - s0) * len;
        if piece <= 0.0 {
            continue;
        }
        let mid = 0.5 * (s0 + s1);
        let cell = grid
            .locate(a.x_km + mid * dx, a.y_km + mid * dy)
            .expect("segment endpoints inside a convex box");
        match find_window(windows, a.timestamp + mid * dt) {
            Some(t) => effort.add(t, cell, piece),
            None => unassigned += piece,
        }
    }
    unassigned
}

fn push_line_crossings(start: f64, delta: f64, size: f64, params: &mut Vec<f64>) {
    if delta == 0.0 {
        return;
    }
    let end = start + delta;
    let lo = (start.min(end) / size).floor() as i64;
    let hi = (start.max(end) / size).ceil() as i64;
    for i in lo..=hi {
        let s = (i as f64 * size - start) / delta;
        if s > 0.0 && s < 1.0 {
            params.push(s);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabelBuild {
    pub labels: TimeCellMatrix<u8>,
    /// Poaching records outside the grid or outside every window.
    pub skipped_records: usize,
}

/// Binary label per (window, cell): 1 iff at least one poaching record.
pub fn build_labels(
    grid: &ParkGrid,
    log: &ObservationLog,
    windows: &[TimeWindow],
) -> Result<LabelBuild> {
    validate_windows(windows)?;
    let mut labels = TimeCellMatrix::zeros(windows.len(), grid.num_cells());
    let mut skipped = 0;
    for rec in log
        .records
        .iter()
        .filter(|r| r.category == ObservationCategory::Poaching)
    {
        match (grid.locate(rec.x_km, rec.y_km), find_window(windows, rec.timestamp)) {
            (Some(cell), Some(t)) => labels.set(t, cell, 1),
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} poaching records outside the grid or time windows");
    }
    Ok(LabelBuild {
        labels,
        skipped_records: skipped,
    })
}

/// One (window, cell) observation of a masked cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetRow {
    pub t: usize,
    pub cell: usize,
    pub effort: f64,
    pub label: bool,
}

/// Effort, labels and the design matrix `static features ++ [previous-window effort]`.
#[derive(Debug, Clone)]
pub struct PatrolDataset {
    grid: Arc<ParkGrid>,
    effort: TimeCellMatrix<f64>,
    labels: TimeCellMatrix<u8>,
    prev_effort: TimeCellMatrix<f64>,
    coerced_labels: usize,
}

/// Builds a dataset; labels with zero effort are coerced to 0 and counted.
pub fn assemble_dataset(
    grid: Arc<ParkGrid>,
    effort: TimeCellMatrix<f64>,
    labels: TimeCellMatrix<u8>,
) -> Result<PatrolDataset> {
    let mut prev = TimeCellMatrix::zeros(effort.num_timesteps(), effort.num_cells());
    for t in 1..effort.num_timesteps() {
        for c in 0..effort.num_cells() {
            prev.set(t, c, effort.get(t - 1, c));
        }
    }
    PatrolDataset::from_parts(grid, effort, labels, prev)
}

impl PatrolDataset {
    /// Builds a dataset with an explicit previous-effort covariate.
    pub fn from_parts(
        grid: Arc<ParkGrid>,
        effort: TimeCellMatrix<f64>,
        mut labels: TimeCellMatrix<u8>,
        prev_effort: TimeCellMatrix<f64>,
    ) -> Result<Self> {
        let n = grid.num_cells();
        for (name, t, c) in [
            ("effort", effort.num_timesteps(), effort.num_cells()),
            ("labels", labels.num_timesteps(), labels.num_cells()),
            ("previous effort", prev_effort.num_timesteps(), prev_effort.num_cells()),
        ] {
            if c != n || t != effort.num_timesteps() {
                return Err(Error::Shape(format!(
                    "{name} is {t}×{c}, expected {}×{n}",
                    effort.num_timesteps()
                )));
            }
        }
        if effort.num_timesteps() == 0 {
            return Err(Error::Shape("dataset needs at least one time window".into()));
        }
        for (what, m) in [("effort", &effort), ("previous effort", &prev_effort)] {
            if m.as_slice().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidInput(format!("{what} must be finite and nonnegative")));
            }
        }
        if labels.as_slice().iter().any(|&l| l > 1) {
            return Err(Error::InvalidInput("labels must be 0 or 1".into()));
        }
        let mut coerced = 0;
        for t in 0..effort.num_timesteps() {
            for c in 0..n {
                if labels.get(t, c) == 1 && effort.get(t, c) <= 0.0 {
                    labels.set(t, c, 0);
                    coerced += 1;
                }
            }
        }
        if coerced > 0 {
            warn!("coerced {coerced} positive labels with zero patrol effort to 0");
        }
        Ok(Self {
            grid,
            effort,
            labels,
            prev_effort,
            coerced_labels: coerced,
        })
    }

    pub fn grid(&self) -> &ParkGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> Arc<ParkGrid> {
        Arc::clone(&self.grid)
    }

    pub fn num_timesteps(&self) -> usize {
        self.effort.num_timesteps()
    }

    pub fn effort(&self) -> &TimeCellMatrix<f64> {
        &self.effort
    }

    pub fn labels(&self) -> &TimeCellMatrix<u8> {
        &self.labels
    }

    pub fn prev_effort(&self) -> &TimeCellMatrix<f64> {
        &self.prev_effort
    }

    /// Number of labels forced to 0 because the cell was not patrolled.
    pub fn coerced_labels(&self) -> usize {
        self.coerced_labels
    }

    /// Width of the design matrix: `k + 1`.
    pub fn design_width(&self) -> usize {
        self.grid.num_features() + 1
    }

    pub fn design_row(&self, t: usize, cell: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.design_width());
        row.extend_from_slice(self.grid.features(cell));
        row.push(self.prev_effort.get(t, cell));
        row
    }

    /// All rows over masked cells, time-major.
    pub fn rows(&self) -> impl Iterator<Item = DatasetRow> + '_ {
        let cells = self.grid.masked_cells();
        (0..self.num_timesteps()).flat_map(move |t| {
            cells
                .clone()
                .into_iter()
                .map(move |cell| self.row(t, cell))
        })
    }

    pub fn row(&self, t: usize, cell: usize) -> DatasetRow {
        DatasetRow {
            t,
            cell,
            effort: self.effort.get(t, cell),
            label: self.labels.get(t, cell) == 1,
        }
    }

    pub fn num_rows(&self) -> usize {
        self.num_timesteps() * self.grid.num_masked()
    }

    /// Materialised `T·N × (k+1)` design matrix in [`rows`](Self::rows) order.
    pub fn design_matrix(&self) -> Vec<Vec<f64>> {
        self.rows().map(|r| self.design_row(r.t, r.cell)).collect()
    }

    /// Keeps a contiguous range of windows; the previous-effort covariate of
    /// the first kept window still refers to the window before it.
    pub fn select_windows(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > self.num_timesteps() {
            return Err(Error::Shape(format!(
                "window range {range:?} outside 0..{}",
                self.num_timesteps()
            )));
        }
        Ok(Self {
            grid: Arc::clone(&self.grid),
            effort: self.effort.select_rows(range.clone()),
            labels: self.labels.select_rows(range.clone()),
            prev_effort: self.prev_effort.select_rows(range),
            coerced_labels: 0,
        })
    }

    /// Total effort per cell over all windows.
    pub fn total_effort_per_cell(&self) -> Vec<f64> {
        let n = self.grid.num_cells();
        (0..n)
            .map(|c| (0..self.num_timesteps()).map(|t| self.effort.get(t, c)).sum())
            .collect()
    }

    pub fn positive_count(&self) -> usize {
        self.rows().filter(|r| r.label).count()
    }
}

/// Fraction of positive labels among rows patrolled at least `θ` km (rows
/// with positive effort when `θ = 0`). `None` marks an empty bucket.
pub fn positive_rate_by_effort(ds: &PatrolDataset, thresholds: &[f64]) -> Vec<(f64, Option<f64>)> {
    thresholds
        .iter()
        .map(|&theta| {
            let (mut pos, mut total) = (0usize, 0usize);
            for r in ds.rows() {
                let inside = if theta <= 0.0 { r.effort > 0.0 } else { r.effort >= theta };
                if inside {
                    total += 1;
                    pos += r.label as usize;
                }
            }
            (theta, (total > 0).then(|| pos as f64 / total as f64))
        })
        .collect()
}
