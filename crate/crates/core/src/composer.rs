//! Renders a slot assignment into the composite raster and its mask, and
//! cuts the generated canvas back out of a backend result.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::bank::ImageId;
use crate::error::ComposeError;
use crate::fsutil::write_atomic;
use crate::layout::{Cell, GridSpec, SlotAssignment};
use crate::raster::{Mask, RasterImage};

pub const COMPOSITE_FILE: &str = "prompt.composite.png";
pub const MASK_FILE: &str = "prompt.mask.png";
pub const CANVAS_GRAY: [u8; 3] = [128, 128, 128];
pub const BORDER_RGB: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ComposeOptions {
    /// Inset of each reference tile inside its cell; the gutter is white.
    pub border_px: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualPrompt {
    pub composite: RasterImage,
    pub mask: Mask,
    pub assignment: SlotAssignment,
    pub grid: GridSpec,
}

impl VisualPrompt {
    /// Writes `prompt.composite.png` and `prompt.mask.png` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(PathBuf, PathBuf), ComposeError> {
        let composite = dir.join(COMPOSITE_FILE);
        let mask = dir.join(MASK_FILE);
        write_atomic(&composite, &self.composite.encode_png()?).map_err(raster_io)?;
        write_atomic(&mask, &self.mask.encode_png()?).map_err(raster_io)?;
        Ok((composite, mask))
    }

    pub fn digest_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.composite.digest());
        h.update(self.mask.digest());
        hex::encode(h.finalize())
    }
}

fn raster_io(e: std::io::Error) -> ComposeError {
    ComposeError::Raster(e.into())
}

/// Pixel rectangle `(x, y, w, h)` of a grid cell.
pub fn cell_rect(grid: &GridSpec, cell: Cell) -> (u32, u32, u32, u32) {
    let p = grid.cell_px();
    (cell.col * p, cell.row * p, p, p)
}

pub fn compose(
    assignment: &SlotAssignment,
    images: &BTreeMap<ImageId, RasterImage>,
    grid: &GridSpec,
) -> Result<VisualPrompt, ComposeError> {
    compose_with(assignment, images, grid, ComposeOptions::default())
}

pub fn compose_with(
    assignment: &SlotAssignment,
    images: &BTreeMap<ImageId, RasterImage>,
    grid: &GridSpec,
    opts: ComposeOptions,
) -> Result<VisualPrompt, ComposeError> {
    let cell_px = grid.cell_px();
    let inner = cell_px
        .checked_sub(2 * opts.border_px)
        .filter(|&s| s > 0)
        .ok_or(ComposeError::ZeroSizeCell)?;
    let (w, h) = grid.pixel_size();
    let mut composite = RasterImage::filled(w, h, CANVAS_GRAY);
    let mut tiles: BTreeMap<ImageId, RasterImage> = BTreeMap::new();

    for slot in &assignment.slots {
        let tile = match tiles.get(&slot.image_id) {
            Some(t) => t,
            None => {
                let src = images
                    .get(&slot.image_id)
                    .ok_or(ComposeError::MissingImage(slot.image_id))?;
                let t = fit_square(src, inner).ok_or(ComposeError::ZeroSizeCell)?;
                tiles.entry(slot.image_id).or_insert(t)
            }
        };
        let (x, y, _, _) = cell_rect(grid, slot.cell);
        if opts.border_px > 0 {
            composite.blit(&RasterImage::filled(cell_px, cell_px, BORDER_RGB), x, y);
        }
        composite.blit(tile, x + opts.border_px, y + opts.border_px);
    }

    let mut mask = Mask::empty(w, h);
    let (cx, cy, cw, ch) = grid.canvas_px();
    mask.fill_rect(cx, cy, cw, ch, Mask::GENERATE);

    Ok(VisualPrompt {
        composite,
        mask,
        assignment: assignment.clone(),
        grid: *grid,
    })
}

/// Exact crop of the canvas rectangle.
pub fn crop_canvas(result: &RasterImage, grid: &GridSpec) -> Result<RasterImage, ComposeError> {
    let expected = grid.pixel_size();
    let actual = (result.width(), result.height());
    if actual != expected {
        return Err(ComposeError::DimensionMismatch { expected, actual });
    }
    let (x, y, w, h) = grid.canvas_px();
    Ok(result.crop(x, y, w, h)?)
}

/// Size after scaling `(w, h)` so the shorter side equals `side`, rounded
/// to the nearest pixel.
pub fn fitted_size(w: u32, h: u32, side: u32) -> (u32, u32) {
    let (w, h, s) = (w as u64, h as u64, side as u64);
    if w <= h {
        (side, ((h * s + w / 2) / w).max(s) as u32)
    } else {
        (((w * s + h / 2) / h).max(s) as u32, side)
    }
}

/// Aspect-preserving bilinear resize to the min-side fit, then a centre
/// crop to `side`×`side`. Only the cropped window is ever sampled.
pub fn fit_square(src: &RasterImage, side: u32) -> Option<RasterImage> {
    if side == 0 || src.width() == 0 || src.height() == 0 {
        return None;
    }
    let (nw, nh) = fitted_size(src.width(), src.height(), side);
    let (ox, oy) = ((nw - side) / 2, (nh - side) / 2);
    let xs: Vec<Tap> = (ox..ox + side).map(|x| Tap::new(x, nw, src.width())).collect();
    let ys: Vec<Tap> = (oy..oy + side).map(|y| Tap::new(y, nh, src.height())).collect();

    let sw = src.width() as usize;
    let px = src.pixels();
    let mut out = Vec::with_capacity(side as usize * side as usize * 3);
    for ty in &ys {
        let (r0, r1) = (ty.lo as usize * sw, ty.hi as usize * sw);
        for tx in &xs {
            let (c0, c1) = (tx.lo as usize, tx.hi as usize);
            for ch in 0..3 {
                let at = |r: usize, c: usize| px[(r + c) * 3 + ch] as f64;
                let top = at(r0, c0) + (at(r0, c1) - at(r0, c0)) * tx.frac;
                let bot = at(r1, c0) + (at(r1, c1) - at(r1, c0)) * tx.frac;
                let v = top + (bot - top) * ty.frac;
                out.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Some(RasterImage::new(side, side, out).expect("sized buffer"))
}

/// One axis of a bilinear sample with half-pixel centres.
struct Tap {
    lo: u32,
    hi: u32,
    frac: f64,
}

impl Tap {
    fn new(dst: u32, dst_len: u32, src_len: u32) -> Self {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let lo = s.floor() as u32;
        Tap {
            lo,
            hi: (lo + 1).min(src_len - 1),
            frac: s - lo as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Arrangement, CanvasRect, Pins};
    use crate::similarity::{CandidateTable, MatchScore};

    fn gradient(w: u32, h: u32) -> RasterImage {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                px.extend([(x % 256) as u8, (y % 256) as u8, ((x + 2 * y) % 256) as u8]);
            }
        }
        RasterImage::new(w, h, px).unwrap()
    }

    /// Straightforward resize of the whole image followed by a crop.
    fn oracle_fit(src: &RasterImage, side: u32) -> RasterImage {
        let (w, h) = (src.width() as f64, src.height() as f64);
        let scale = side as f64 / w.min(h);
        let nw = (w * scale).round() as u32;
        let nh = (h * scale).round() as u32;
        let mut full = RasterImage::filled(nw, nh, [0, 0, 0]);
        for y in 0..nh {
            for x in 0..nw {
                let sx = ((x as f64 + 0.5) * w / nw as f64 - 0.5).max(0.0).min(w - 1.0);
                let sy = ((y as f64 + 0.5) * h / nh as f64 - 0.5).max(0.0).min(h - 1.0);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (x1, y1) = ((x0 + 1.0).min(w - 1.0), (y0 + 1.0).min(h - 1.0));
                let (fx, fy) = (sx - x0, sy - y0);
                let mut rgb = [0u8; 3];
                for (c, v) in rgb.iter_mut().enumerate() {
                    let p = |xx: f64, yy: f64| src.pixel(xx as u32, yy as u32)[c] as f64;
                    let a = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                    let b = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                    *v = (a * (1.0 - fy) + b * fy).round() as u8;
                }
                full.put_pixel(x, y, rgb);
            }
        }
        full.crop((nw - side) / 2, (nh - side) / 2, side, side).unwrap()
    }

    fn max_diff(a: &RasterImage, b: &RasterImage) -> u8 {
        a.pixels()
            .iter()
            .zip(b.pixels())
            .map(|(x, y)| x.abs_diff(*y))
            .max()
            .unwrap()
    }

    #[test]
    fn wide_source_is_cropped_from_the_middle() {
        let src = gradient(512, 256);
        assert_eq!(fitted_size(512, 256, 256), (512, 256));
        let tile = fit_square(&src, 256).unwrap();
        assert_eq!(tile, src.crop(128, 0, 256, 256).unwrap());
    }

    #[test]
    fn matches_oracle_on_scaled_sources() {
        for (w, h, side) in [(300, 200, 64), (97, 131, 40), (40, 40, 96), (513, 257, 256), (7, 3, 5)] {
            let src = gradient(w, h);
            let fast = fit_square(&src, side).unwrap();
            let slow = oracle_fit(&src, side);
            assert!(max_diff(&fast, &slow) <= 1, "{w}x{h} -> {side}");
        }
    }

    fn two_image_setup(cell_px: u32) -> (SlotAssignment, BTreeMap<ImageId, RasterImage>, GridSpec) {
        let grid = GridSpec::default_grid_px(cell_px);
        let a = gradient(300, 200);
        let b = RasterImage::filled(10, 20, [10, 200, 30]);
        let (ia, ib) = (ImageId::of_raster(&a), ImageId::of_raster(&b));
        let rows = vec![
            vec![
                MatchScore { element_index: 0, image_id: ia, score: 0.9 },
                MatchScore { element_index: 0, image_id: ib, score: 0.5 },
            ],
            vec![
                MatchScore { element_index: 1, image_id: ib, score: 0.8 },
                MatchScore { element_index: 1, image_id: ia, score: 0.1 },
            ],
        ];
        let table = CandidateTable::new(2, rows).unwrap();
        let assignment = crate::layout::assign_slots(
            &table,
            &Arrangement::identity(2),
            &grid,
            &[],
            &Pins::from([
                (Cell::new(0, 2), ib),
                (Cell::new(1, 0), ia),
                (Cell::new(2, 1), ib),
                (Cell::new(2, 2), ia),
            ]),
        )
        .unwrap();
        let images = BTreeMap::from([(ia, a), (ib, b)]);
        (assignment, images, grid)
    }

    #[test]
    fn default_grid_geometry_and_mask() {
        let (assignment, images, grid) = two_image_setup(256);
        let vp = compose(&assignment, &images, &grid).unwrap();
        assert_eq!((vp.composite.width(), vp.composite.height()), (768, 768));
        assert_eq!(vp.mask.count_set(), 256 * 256);
        for y in (0..768).step_by(17) {
            for x in (0..768).step_by(13) {
                let inside = (256..512).contains(&x) && (256..512).contains(&y);
                assert_eq!(vp.mask.get(x, y), if inside { 255 } else { 0 }, "({x},{y})");
            }
        }
        assert_eq!(vp.mask.get(256, 256), 255);
        assert_eq!(vp.mask.get(511, 511), 255);
        assert_eq!(vp.mask.get(255, 256), 0);
        assert_eq!(vp.mask.get(512, 300), 0);
    }

    #[test]
    fn cells_are_local() {
        let (assignment, images, grid) = two_image_setup(32);
        let vp = compose(&assignment, &images, &grid).unwrap();
        for slot in &assignment.slots {
            let (x, y, w, h) = cell_rect(&grid, slot.cell);
            let expect = fit_square(&images[&slot.image_id], 32).unwrap();
            assert_eq!(vp.composite.crop(x, y, w, h).unwrap(), expect);
        }
    }

    #[test]
    fn canvas_round_trip_is_gray() {
        let (assignment, images, grid) = two_image_setup(16);
        let vp = compose(&assignment, &images, &grid).unwrap();
        let canvas = crop_canvas(&vp.composite, &grid).unwrap();
        assert_eq!(canvas, RasterImage::filled(16, 16, CANVAS_GRAY));
        let wrong = RasterImage::filled(10, 10, [0, 0, 0]);
        assert!(matches!(
            crop_canvas(&wrong, &grid),
            Err(ComposeError::DimensionMismatch { expected: (48, 48), actual: (10, 10) })
        ));
    }

    #[test]
    fn deterministic_and_png_stable() {
        let (assignment, images, grid) = two_image_setup(24);
        let a = compose(&assignment, &images, &grid).unwrap();
        let b = compose(&assignment, &images, &grid).unwrap();
        assert_eq!(a.digest_hex(), b.digest_hex());
        let png = a.composite.encode_png().unwrap();
        assert_eq!(png, b.composite.encode_png().unwrap());
        assert_eq!(RasterImage::decode_png(&png).unwrap(), a.composite);
        let m = Mask::decode_png(&a.mask.encode_png().unwrap()).unwrap();
        assert_eq!(m, a.mask);
    }

    #[test]
    fn two_cell_strip() {
        let grid = GridSpec::new(1, 2, 8, CanvasRect { row: 0, col: 1, rows: 1, cols: 1 }).unwrap();
        let img = RasterImage::filled(8, 8, [1, 2, 3]);
        let id = ImageId::of_raster(&img);
        let table = CandidateTable::new(
            1,
            vec![vec![MatchScore { element_index: 0, image_id: id, score: 1.0 }]],
        )
        .unwrap();
        let asg = crate::layout::assign_slots(&table, &Arrangement::identity(1), &grid, &[], &Pins::new())
            .unwrap();
        let vp = compose(&asg, &BTreeMap::from([(id, img.clone())]), &grid).unwrap();
        assert_eq!(vp.composite.crop(0, 0, 8, 8).unwrap(), img);
        assert_eq!(vp.composite.crop(8, 0, 8, 8).unwrap(), RasterImage::filled(8, 8, CANVAS_GRAY));
        assert_eq!(vp.mask.count_set(), 64);
        assert_eq!(vp.mask.get(7, 0), 0);
    }

    #[test]
    fn missing_image_and_borders() {
        let (assignment, mut images, grid) = two_image_setup(16);
        let opts = ComposeOptions { border_px: 2 };
        let vp = compose_with(&assignment, &images, &grid, opts).unwrap();
        assert_eq!(vp.composite.pixel(0, 0), BORDER_RGB);
        assert_eq!(vp.composite.pixel(2, 2), fit_square(&images[&assignment.slots[0].image_id], 12).unwrap().pixel(0, 0));
        assert!(matches!(
            compose_with(&assignment, &images, &grid, ComposeOptions { border_px: 8 }),
            Err(ComposeError::ZeroSizeCell)
        ));
        let first = *images.keys().next().unwrap();
        images.remove(&first);
        assert!(matches!(
            compose(&assignment, &images, &grid),
            Err(ComposeError::MissingImage(id)) if id == first
        ));
    }
}
