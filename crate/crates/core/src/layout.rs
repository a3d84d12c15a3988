//! Grid geometry, high-attention ("star") cells, row-band arrangements and
//! the placement of candidate images into reference slots.
//!
//! Each key element owns one row band of the grid. An arrangement is a
//! permutation assigning elements to bands; within a band the element's
//! candidates fill star cells first, then the remaining cells left to right.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bank::ImageId;
use crate::error::LayoutError;
use crate::similarity::{top_k, CandidateTable};

/// Largest element count whose arrangements are enumerated (5! = 120).
pub const MAX_PERMUTED_ELEMENTS: usize = 5;
pub const DEFAULT_CELL_PX: u32 = 512;
pub const DEFAULT_STAR_COUNT: usize = 2;

/// A grid position, serialized as `[row, col]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub row: u32,
    pub col: u32,
}

impl Cell {
    pub const fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.row, self.col)
    }
}

impl FromStr for Cell {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, c) = s
            .split_once(',')
            .ok_or_else(|| format!("cell {s:?} must look like ROW,COL"))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<u32>()
                .map_err(|e| format!("cell {s:?}: {e}"))
        };
        Ok(Cell::new(parse(r)?, parse(c)?))
    }
}

impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.row, self.col].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Cell {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [row, col] = <[u32; 2]>::deserialize(d)?;
        Ok(Cell { row, col })
    }
}

/// The masked rectangle, in cell units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasRect {
    pub row: u32,
    pub col: u32,
    pub rows: u32,
    pub cols: u32,
}

impl CanvasRect {
    pub fn contains(&self, c: Cell) -> bool {
        c.row >= self.row
            && c.row < self.row + self.rows
            && c.col >= self.col
            && c.col < self.col + self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridSpecRaw")]
pub struct GridSpec {
    rows: u32,
    cols: u32,
    cell_px: u32,
    canvas: CanvasRect,
}

#[derive(Deserialize)]
struct GridSpecRaw {
    rows: u32,
    cols: u32,
    cell_px: u32,
    canvas: CanvasRect,
}

impl TryFrom<GridSpecRaw> for GridSpec {
    type Error = LayoutError;

    fn try_from(r: GridSpecRaw) -> Result<Self, Self::Error> {
        GridSpec::new(r.rows, r.cols, r.cell_px, r.canvas)
    }
}

impl GridSpec {
    pub fn new(rows: u32, cols: u32, cell_px: u32, canvas: CanvasRect) -> Result<Self, LayoutError> {
        let bad = |m: String| Err(LayoutError::InvalidGrid(m));
        if rows == 0 || cols == 0 {
            return bad(format!("{rows}x{cols} grid has no cells"));
        }
        if cell_px == 0 {
            return bad("cell_px must be positive".into());
        }
        if canvas.rows == 0 || canvas.cols == 0 {
            return bad("canvas must cover at least one cell".into());
        }
        if canvas.row + canvas.rows > rows || canvas.col + canvas.cols > cols {
            return bad("canvas extends past the grid".into());
        }
        if canvas.rows * canvas.cols == rows * cols {
            return bad("grid needs at least one reference cell".into());
        }
        Ok(Self {
            rows,
            cols,
            cell_px,
            canvas,
        })
    }

    /// Validates that `cells` form one filled rectangle.
    pub fn from_canvas_cells(
        rows: u32,
        cols: u32,
        cell_px: u32,
        cells: &[Cell],
    ) -> Result<Self, LayoutError> {
        let set: BTreeSet<Cell> = cells.iter().copied().collect();
        let (Some(r0), Some(r1)) = (
            set.iter().map(|c| c.row).min(),
            set.iter().map(|c| c.row).max(),
        ) else {
            return Err(LayoutError::InvalidGrid("canvas has no cells".into()));
        };
        let c0 = set.iter().map(|c| c.col).min().unwrap();
        let c1 = set.iter().map(|c| c.col).max().unwrap();
        let canvas = CanvasRect {
            row: r0,
            col: c0,
            rows: r1 - r0 + 1,
            cols: c1 - c0 + 1,
        };
        if set.len() as u32 != canvas.rows * canvas.cols {
            return Err(LayoutError::InvalidGrid(
                "canvas cells must form a contiguous rectangle".into(),
            ));
        }
        Self::new(rows, cols, cell_px, canvas)
    }

    /// 3×3 with the centre cell as canvas: 8 reference slots.
    pub fn default_grid() -> Self {
        Self::default_grid_px(DEFAULT_CELL_PX)
    }

    pub fn default_grid_px(cell_px: u32) -> Self {
        Self::new(
            3,
            3,
            cell_px,
            CanvasRect {
                row: 1,
                col: 1,
                rows: 1,
                cols: 1,
            },
        )
        .expect("static geometry")
    }

    /// Layouts for the reference-count ablation.
    ///
    /// - 9: 2×5, canvas at the centre of the top row
    /// - 8: the default 3×3
    /// - 4: 2×3, canvas is the middle column
    /// - 2: 1×3, canvas in the middle
    /// - 1: 1×2, canvas on the right
    pub fn with_reference_count(refs: usize, cell_px: u32) -> Result<Self, LayoutError> {
        let rect = |row, col, rows, cols| CanvasRect {
            row,
            col,
            rows,
            cols,
        };
        match refs {
            9 => Self::new(2, 5, cell_px, rect(0, 2, 1, 1)),
            8 => Ok(Self::default_grid_px(cell_px)),
            4 => Self::new(2, 3, cell_px, rect(0, 1, 2, 1)),
            2 => Self::new(1, 3, cell_px, rect(0, 1, 1, 1)),
            1 => Self::new(1, 2, cell_px, rect(0, 1, 1, 1)),
            other => Err(LayoutError::InvalidGrid(format!(
                "no preset with {other} reference cells"
            ))),
        }
    }

    /// Parses `--grid RxC` together with `--canvas center|R,C|R,C:HxW`.
    pub fn parse(grid: &str, canvas: &str, cell_px: u32) -> Result<Self, LayoutError> {
        let bad = |m: String| LayoutError::InvalidGrid(m);
        let (r, c) = grid
            .split_once(['x', 'X'])
            .ok_or_else(|| bad(format!("grid {grid:?} must look like 3x3")))?;
        let rows: u32 = r.trim().parse().map_err(|_| bad(format!("bad rows in {grid:?}")))?;
        let cols: u32 = c.trim().parse().map_err(|_| bad(format!("bad cols in {grid:?}")))?;
        let rect = if canvas.eq_ignore_ascii_case("center") || canvas.eq_ignore_ascii_case("centre") {
            let span = |n: u32| if n % 2 == 1 { (n / 2, 1) } else { (n / 2 - 1, 2) };
            let (row, h) = span(rows.max(1));
            let (col, w) = span(cols.max(1));
            CanvasRect {
                row,
                col,
                rows: h.min(rows),
                cols: w.min(cols),
            }
        } else {
            let (at, size) = canvas.split_once(':').unwrap_or((canvas, "1x1"));
            let at: Cell = at.parse().map_err(bad)?;
            let (h, w) = size
                .split_once(['x', 'X'])
                .ok_or_else(|| bad(format!("canvas size {size:?} must look like 1x1")))?;
            CanvasRect {
                row: at.row,
                col: at.col,
                rows: h.trim().parse().map_err(|_| bad(format!("bad canvas size {size:?}")))?,
                cols: w.trim().parse().map_err(|_| bad(format!("bad canvas size {size:?}")))?,
            }
        };
        Self::new(rows, cols, cell_px, rect)
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn cell_px(&self) -> u32 {
        self.cell_px
    }

    pub fn canvas(&self) -> CanvasRect {
        self.canvas
    }

    pub fn with_cell_px(self, cell_px: u32) -> Result<Self, LayoutError> {
        Self::new(self.rows, self.cols, cell_px, self.canvas)
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.row < self.rows && c.col < self.cols
    }

    pub fn is_canvas(&self, c: Cell) -> bool {
        self.canvas.contains(c)
    }

    pub fn canvas_cells(&self) -> Vec<Cell> {
        self.cells().filter(|c| self.is_canvas(*c)).collect()
    }

    /// Every cell in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| Cell::new(r, c)))
    }

    /// Non-canvas cells in row-major order.
    pub fn reference_cells(&self) -> Vec<Cell> {
        self.cells().filter(|c| !self.is_canvas(*c)).collect()
    }

    pub fn reference_slot_count(&self) -> usize {
        (self.rows * self.cols - self.canvas.rows * self.canvas.cols) as usize
    }

    /// Composite size in pixels `(width, height)`.
    pub fn pixel_size(&self) -> (u32, u32) {
        (self.cols * self.cell_px, self.rows * self.cell_px)
    }

    /// Canvas rectangle in pixels `(x, y, w, h)`.
    pub fn canvas_px(&self) -> (u32, u32, u32, u32) {
        let p = self.cell_px;
        (
            self.canvas.col * p,
            self.canvas.row * p,
            self.canvas.cols * p,
            self.canvas.rows * p,
        )
    }

    /// Partition of the reference cells into `n` bands, one per element.
    ///
    /// With at least `n` rows, band `b` is the contiguous row range
    /// `[b·rows/n, (b+1)·rows/n)`. With fewer rows the row-major list of
    /// reference cells is split into `n` near-equal runs, earlier bands
    /// taking the remainder; trailing bands may then be empty.
    pub fn row_bands(&self, n: usize) -> Vec<Vec<Cell>> {
        let refs = self.reference_cells();
        if n == 0 {
            return Vec::new();
        }
        if self.rows as usize >= n {
            let rows = self.rows as usize;
            (0..n)
                .map(|b| {
                    let (lo, hi) = (b * rows / n, (b + 1) * rows / n);
                    refs.iter()
                        .filter(|c| (lo..hi).contains(&(c.row as usize)))
                        .copied()
                        .collect()
                })
                .collect()
        } else {
            let (base, extra) = (refs.len() / n, refs.len() % n);
            let mut it = refs.into_iter();
            (0..n)
                .map(|b| it.by_ref().take(base + usize::from(b < extra)).collect())
                .collect()
        }
    }

    /// Up to two cells immediately left and right of the canvas, on its
    /// top row.
    pub fn default_stars(&self) -> Vec<Cell> {
        let row = self.canvas.row;
        let mut out = Vec::with_capacity(DEFAULT_STAR_COUNT);
        if self.canvas.col > 0 {
            out.push(Cell::new(row, self.canvas.col - 1));
        }
        let right = self.canvas.col + self.canvas.cols;
        if right < self.cols {
            out.push(Cell::new(row, right));
        }
        out
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::default_grid()
    }
}

/// Per-cell attention intensities measured by external instrumentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PriorRepr", from = "PriorRepr")]
pub struct AttentionPrior {
    pub intensities: BTreeMap<Cell, f64>,
    pub source: String,
}

#[derive(Clone, Serialize, Deserialize)]
struct PriorRepr {
    intensities: Vec<(u32, u32, f64)>,
    #[serde(default)]
    source: String,
}

impl From<AttentionPrior> for PriorRepr {
    fn from(p: AttentionPrior) -> Self {
        PriorRepr {
            intensities: p.intensities.iter().map(|(c, v)| (c.row, c.col, *v)).collect(),
            source: p.source,
        }
    }
}

impl From<PriorRepr> for AttentionPrior {
    fn from(r: PriorRepr) -> Self {
        AttentionPrior {
            intensities: r
                .intensities
                .into_iter()
                .map(|(row, col, v)| (Cell::new(row, col), v))
                .collect(),
            source: r.source,
        }
    }
}

/// `attention.prior.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPriorFile {
    pub grid: GridShape,
    pub intensities: Vec<(u32, u32, f64)>,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: u32,
    pub cols: u32,
}

impl AttentionPrior {
    /// Checks the sidecar against `grid`: matching shape, finite
    /// non-negative values, and every reference cell exactly once. Values
    /// given for canvas cells are ignored.
    pub fn from_file(file: &AttentionPriorFile, grid: &GridSpec) -> Result<Self, LayoutError> {
        let bad = |m: String| Err(LayoutError::PriorMismatch(m));
        if file.grid.rows != grid.rows() || file.grid.cols != grid.cols() {
            return bad(format!(
                "prior is {}x{}, grid is {}x{}",
                file.grid.rows,
                file.grid.cols,
                grid.rows(),
                grid.cols()
            ));
        }
        let mut intensities = BTreeMap::new();
        for &(row, col, value) in &file.intensities {
            let cell = Cell::new(row, col);
            if !grid.in_bounds(cell) {
                return bad(format!("cell {cell} is outside the grid"));
            }
            if !value.is_finite() || value < 0.0 {
                return bad(format!("cell {cell} has invalid intensity {value}"));
            }
            if grid.is_canvas(cell) {
                continue;
            }
            if intensities.insert(cell, value).is_some() {
                return bad(format!("cell {cell} appears twice"));
            }
        }
        for cell in grid.reference_cells() {
            if !intensities.contains_key(&cell) {
                return bad(format!("cell {cell} has no intensity"));
            }
        }
        Ok(Self {
            intensities,
            source: file.source.clone(),
        })
    }

    pub fn from_json(bytes: &[u8], grid: &GridSpec) -> Result<Self, LayoutError> {
        let file: AttentionPriorFile = serde_json::from_slice(bytes)
            .map_err(|e| LayoutError::PriorMismatch(e.to_string()))?;
        Self::from_file(&file, grid)
    }

    pub fn to_file(&self, grid: &GridSpec) -> AttentionPriorFile {
        AttentionPriorFile {
            grid: GridShape {
                rows: grid.rows(),
                cols: grid.cols(),
            },
            intensities: self
                .intensities
                .iter()
                .map(|(c, v)| (c.row, c.col, *v))
                .collect(),
            source: self.source.clone(),
        }
    }
}

/// The `q` most attended cells, strongest first; ties in row-major order.
pub fn star_cells(prior: &AttentionPrior, q: usize) -> Result<Vec<Cell>, LayoutError> {
    let scores: Vec<(Cell, f64)> = prior.intensities.iter().map(|(c, v)| (*c, *v)).collect();
    top_k(&scores, q).map_err(|_| LayoutError::QTooLarge {
        q,
        available: scores.len(),
    })
}

/// How star cells are chosen for a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StarPolicy {
    /// Cells flanking the canvas.
    #[default]
    Auto,
    None,
    Explicit(Vec<Cell>),
    Prior { prior: AttentionPrior, q: usize },
}

impl StarPolicy {
    pub fn resolve(&self, grid: &GridSpec) -> Result<Vec<Cell>, LayoutError> {
        let stars = match self {
            StarPolicy::Auto => grid.default_stars(),
            StarPolicy::None => Vec::new(),
            StarPolicy::Explicit(cells) => cells.clone(),
            StarPolicy::Prior { prior, q } => star_cells(prior, *q)?,
        };
        for &c in &stars {
            if !grid.in_bounds(c) || grid.is_canvas(c) {
                return Err(LayoutError::StarNotReference(c.row, c.col));
            }
        }
        Ok(stars)
    }

    /// Parses `auto`, `none`, or `R,C;R,C`.
    pub fn parse(s: &str) -> Result<Self, String> {
        match s.trim() {
            "auto" => Ok(StarPolicy::Auto),
            "none" | "" => Ok(StarPolicy::None),
            list => list
                .split(';')
                .map(str::parse)
                .collect::<Result<Vec<Cell>, _>>()
                .map(StarPolicy::Explicit),
        }
    }
}

/// Element `i` goes to row band `row_assignment[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrangement {
    pub id: usize,
    pub row_assignment: Vec<usize>,
}

impl Arrangement {
    pub fn identity(n: usize) -> Self {
        Self {
            id: 0,
            row_assignment: (0..n).collect(),
        }
    }

    pub fn label(&self) -> String {
        self.row_assignment.iter().map(|b| b.to_string()).collect()
    }
}

/// All `n!` permutations of `0..n` in lexicographic order.
pub fn enumerate_arrangements(n: usize) -> Result<Vec<Arrangement>, LayoutError> {
    if n == 0 {
        return Err(LayoutError::InvalidGrid("at least one element is required".into()));
    }
    if n > MAX_PERMUTED_ELEMENTS {
        return Err(LayoutError::TooManyElements(n));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    loop {
        out.push(Arrangement {
            id: out.len(),
            row_assignment: perm.clone(),
        });
        if !next_permutation(&mut perm) {
            return Ok(out);
        }
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

pub type Pins = BTreeMap<Cell, ImageId>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pin {
    pub cell: Cell,
    pub image_id: ImageId,
}

/// Serde adapter writing [`Pins`] as a list of `{cell, image_id}`.
pub mod pin_list {
    use super::*;

    pub fn serialize<S: Serializer>(pins: &Pins, s: S) -> Result<S::Ok, S::Error> {
        let list: Vec<Pin> = pins
            .iter()
            .map(|(cell, image_id)| Pin {
                cell: *cell,
                image_id: *image_id,
            })
            .collect();
        list.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pins, D::Error> {
        let list = Vec::<Pin>::deserialize(d)?;
        let mut pins = Pins::new();
        for p in list {
            if pins.insert(p.cell, p.image_id).is_some() {
                return Err(serde::de::Error::custom(format!("cell {} pinned twice", p.cell)));
            }
        }
        Ok(pins)
    }
}

pub fn validate_pins(grid: &GridSpec, pins: &Pins) -> Result<(), LayoutError> {
    for &cell in pins.keys() {
        if !grid.in_bounds(cell) {
            return Err(LayoutError::PinOutOfBounds(cell.row, cell.col));
        }
        if grid.is_canvas(cell) {
            return Err(LayoutError::PinOnCanvas(cell.row, cell.col));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SlotSource {
    Pin,
    Candidate {
        element: usize,
        /// Position in the element's candidate row, 0 = best.
        rank: usize,
        score: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub cell: Cell,
    pub image_id: ImageId,
    pub star: bool,
    pub source: SlotSource,
}

/// Which image fills each reference cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotAssignment {
    /// One entry per reference cell, row-major.
    pub slots: Vec<Slot>,
    #[serde(with = "pin_list")]
    pub pins: Pins,
}

impl SlotAssignment {
    pub fn placements(&self) -> BTreeMap<Cell, ImageId> {
        self.slots.iter().map(|s| (s.cell, s.image_id)).collect()
    }

    pub fn image_at(&self, cell: Cell) -> Option<ImageId> {
        self.slots.iter().find(|s| s.cell == cell).map(|s| s.image_id)
    }

    pub fn image_ids(&self) -> BTreeSet<ImageId> {
        self.slots.iter().map(|s| s.image_id).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("assignment serializes")
    }
}

/// Places candidates into the grid for one arrangement.
///
/// 1. Pins are placed first, verbatim.
/// 2. Element `i` fills its band `arr.row_assignment[i]`, best candidate
///    first, skipping images already pinned.
/// 3. Star cells in the band take the best candidates (in star order);
///    the rest go left to right in row-major order.
/// 4. Candidates beyond the band's free cells are dropped. A band with
///    more free cells than candidates cycles through them again.
pub fn assign_slots(
    table: &CandidateTable,
    arr: &Arrangement,
    grid: &GridSpec,
    stars: &[Cell],
    pins: &Pins,
) -> Result<SlotAssignment, LayoutError> {
    validate_pins(grid, pins)?;
    for &s in stars {
        if !grid.in_bounds(s) || grid.is_canvas(s) {
            return Err(LayoutError::StarNotReference(s.row, s.col));
        }
    }
    let n = table.n();
    if arr.row_assignment.len() != n {
        return Err(LayoutError::ArrangementMismatch {
            arrangement: arr.row_assignment.len(),
            table: n,
        });
    }
    let slots_needed = grid.reference_slot_count();
    let available = n * table.k() + pins.len();
    if slots_needed > available {
        return Err(LayoutError::InsufficientCandidates {
            slots: slots_needed,
            available,
        });
    }

    let star_rank: BTreeMap<Cell, usize> =
        stars.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let pinned_images: BTreeSet<ImageId> = pins.values().copied().collect();
    let bands = grid.row_bands(n);
    let mut placed: BTreeMap<Cell, Slot> = BTreeMap::new();

    for (&cell, &image_id) in pins {
        placed.insert(
            cell,
            Slot {
                cell,
                image_id,
                star: star_rank.contains_key(&cell),
                source: SlotSource::Pin,
            },
        );
    }

    for (element, &band) in arr.row_assignment.iter().enumerate() {
        let mut free: Vec<Cell> = bands[band]
            .iter()
            .filter(|c| !pins.contains_key(c))
            .copied()
            .collect();
        if free.is_empty() {
            continue;
        }
        free.sort_by_key(|c| (star_rank.get(c).copied().unwrap_or(usize::MAX), *c));

        let row = table.row(element);
        let mut candidates: Vec<(usize, &crate::similarity::MatchScore)> = row
            .iter()
            .enumerate()
            .filter(|(_, m)| !pinned_images.contains(&m.image_id))
            .collect();
        if candidates.is_empty() {
            candidates = row.iter().enumerate().collect();
        }
        if candidates.is_empty() {
            return Err(LayoutError::InsufficientCandidates {
                slots: slots_needed,
                available,
            });
        }
        for (j, cell) in free.into_iter().enumerate() {
            let (rank, m) = candidates[j % candidates.len()];
            placed.insert(
                cell,
                Slot {
                    cell,
                    image_id: m.image_id,
                    star: star_rank.contains_key(&cell),
                    source: SlotSource::Candidate {
                        element,
                        rank,
                        score: m.score,
                    },
                },
            );
        }
    }

    let slots: Vec<Slot> = placed.into_values().collect();
    debug_assert_eq!(slots.len(), slots_needed);
    Ok(SlotAssignment {
        slots,
        pins: pins.clone(),
    })
}
