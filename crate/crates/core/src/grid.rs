//! Single-band rasters and the patch pipeline feeding the network: window
//! extraction with edge replication, corner-aligned bilinear resizing, and
//! intensity normalization.

use crate::error::{Error, Result};

/// A single-band raster image with intensities in [0, 255].
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::shape(
                "grid",
                format!("{}x{} grid needs {} values, got {}", width, height, width * height, data.len()),
            ));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("grid", "zero-sized grid"));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("grid", "values must be finite and non-negative"));
        }
        Ok(Grid { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Grid { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_size(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Square window cut from a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub values: Vec<f32>,
}

/// Extract the r x r window centered at (row, col). Windows reaching past the
/// border are completed by edge replication.
pub fn extract_patch(grid: &Grid, center: (usize, usize), r: usize) -> Result<Patch> {
    if r % 2 == 0 || r == 0 {
        return Err(Error::invalid("extract_patch", format!("window size {} must be odd", r)));
    }
    let (row, col) = center;
    if row >= grid.height() || col >= grid.width() {
        return Err(Error::invalid(
            "extract_patch",
            format!("center ({},{}) outside {}x{} grid", row, col, grid.height(), grid.width()),
        ));
    }
    let half = (r / 2) as isize;
    let mut values = Vec::with_capacity(r * r);
    for dr in -half..=half {
        let rr = (row as isize + dr).clamp(0, grid.height() as isize - 1) as usize;
        for dc in -half..=half {
            let cc = (col as isize + dc).clamp(0, grid.width() as isize - 1) as usize;
            values.push(grid.get(rr, cc));
        }
    }
    Ok(Patch { size: r, values })
}

/// Corner-aligned bilinear resize of a square window to `target` x `target`.
pub fn resize_bilinear(patch: &Patch, target: usize) -> Patch {
    let src = patch.size;
    if src == target {
        return patch.clone();
    }
    debug_assert!(src >= 2 && target >= 2);
    // lerp written as a + f*(b - a) so constant windows stay bit-exact
    let lerp = |a: f64, b: f64, f: f64| a + f * (b - a);
    let scale = (src - 1) as f64 / (target - 1) as f64;
    let mut values = Vec::with_capacity(target * target);
    for ty in 0..target {
        let y = ty as f64 * scale;
        let y0 = (y.floor() as usize).min(src - 1);
        let y1 = (y0 + 1).min(src - 1);
        let fy = y - y0 as f64;
        for tx in 0..target {
            let x = tx as f64 * scale;
            let x0 = (x.floor() as usize).min(src - 1);
            let x1 = (x0 + 1).min(src - 1);
            let fx = x - x0 as f64;
            let v00 = patch.values[y0 * src + x0] as f64;
            let v01 = patch.values[y0 * src + x1] as f64;
            let v10 = patch.values[y1 * src + x0] as f64;
            let v11 = patch.values[y1 * src + x1] as f64;
            let top = lerp(v00, v01, fx);
            let bot = lerp(v10, v11, fx);
            values.push(lerp(top, bot, fy) as f32);
        }
    }
    Patch { size: target, values }
}

/// Map 8-bit intensities into [0, 1].
pub fn normalize(patch: &Patch) -> Patch {
    Patch { size: patch.size, values: patch.values.iter().map(|v| v / 255.0).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_grid(w: usize, h: usize) -> Grid {
        Grid::new(w, h, (0..w * h).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn middle_patch_of_constant_grid_is_constant() {
        let g = Grid::filled(9, 9, 4.0);
        let p = extract_patch(&g, (4, 4), 3).unwrap();
        assert!(p.values.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn corner_patch_replicates_edges() {
        // 4x4 ramp: value = 4*row + col. Window centered at (0,0) with r=3
        // clamps row/col -1 back to 0.
        let g = ramp_grid(4, 4);
        let p = extract_patch(&g, (0, 0), 3).unwrap();
        assert_eq!(p.values, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 4.0, 4.0, 5.0]);
    }

    #[test]
    fn even_window_size_rejected() {
        let g = Grid::filled(8, 8, 1.0);
        assert!(extract_patch(&g, (4, 4), 4).is_err());
    }

    #[test]
    fn paper_patch_sizes_extract_cleanly() {
        let g = Grid::filled(64, 64, 10.0);
        for r in [9, 11, 13] {
            let p = extract_patch(&g, (32, 32), r).unwrap();
            assert_eq!(p.values.len(), r * r);
        }
    }

    #[test]
    fn resize_keeps_constants_exact() {
        let p = Patch { size: 13, values: vec![7.0; 169] };
        let out = resize_bilinear(&p, 28);
        assert!(out.values.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn resize_28_to_28_is_identity() {
        let vals: Vec<f32> = (0..784).map(|i| (i % 97) as f32).collect();
        let p = Patch { size: 28, values: vals.clone() };
        let out = resize_bilinear(&p, 28);
        assert_eq!(out.values, vals);
    }

    #[test]
    fn resize_2x2_interpolates_monotonically() {
        // columns 0 -> 1; each output row must run from 0 to 1 and match the
        // closed form x/(target-1).
        let p = Patch { size: 2, values: vec![0.0, 1.0, 0.0, 1.0] };
        let out = resize_bilinear(&p, 28);
        for row in out.values.chunks(28) {
            assert_eq!(row[0], 0.0);
            assert_eq!(row[27], 1.0);
            for (tx, &v) in row.iter().enumerate() {
                let want = tx as f32 / 27.0;
                assert!((v - want).abs() < 1e-6);
                if tx > 0 {
                    assert!(v >= row[tx - 1]);
                }
            }
        }
    }

    #[test]
    fn normalize_maps_endpoints() {
        let p = Patch { size: 1, values: vec![255.0] };
        assert_eq!(normalize(&p).values[0], 1.0);
        let p = Patch { size: 1, values: vec![0.0] };
        assert_eq!(normalize(&p).values[0], 0.0);
        let p = Patch { size: 1, values: vec![127.5] };
        assert_eq!(normalize(&p).values[0], 0.5);
    }
}
