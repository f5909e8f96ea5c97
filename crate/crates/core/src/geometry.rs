//! BEV grid geometry and axis-aligned boxes, shared by the scene generator,
//! the detection targets and the evaluator.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in world metres. `w` spans x, `l` spans y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAA {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
}

impl BoxAA {
    pub fn new(cx: f64, cy: f64, w: f64, l: f64) -> Self {
        Self { cx, cy, w, l }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.l
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.l
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Area of the intersection rectangle (0 when disjoint or touching).
    pub fn intersection(&self, other: &BoxAA) -> f64 {
        let ix = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let iy = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        ix * iy
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.l]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// Regular BEV grid: row `i` spans `y_min + i*cell .. y_min + (i+1)*cell`,
/// column `j` spans the analogous x interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub x_min: f64,
    pub y_min: f64,
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridGeometry {
    pub fn x_max(&self) -> f64 {
        self.x_min + self.cell_size * self.cols as f64
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.cell_size * self.rows as f64
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.cell_size,
            self.y_min + (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Cell containing `(x, y)`, if inside the grid.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.x_min) / self.cell_size).floor();
        let r = ((y - self.y_min) / self.cell_size).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Coarser grid after a total stride of `stride` (must divide both dims).
    pub fn downsample(&self, stride: usize) -> GridGeometry {
        GridGeometry {
            x_min: self.x_min,
            y_min: self.y_min,
            cell_size: self.cell_size * stride as f64,
            rows: self.rows / stride,
            cols: self.cols / stride,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locate_roundtrips_cell_center() {
        let g = GridGeometry { x_min: -4.0, y_min: -2.0, cell_size: 0.5, rows: 8, cols: 16 };
        for r in 0..g.rows {
            for c in 0..g.cols {
                let (x, y) = g.cell_center(r, c);
                assert_eq!(g.locate(x, y), Some((r, c)));
            }
        }
        assert_eq!(g.locate(g.x_max(), 0.0), None);
    }

    #[test]
    fn touching_boxes_do_not_intersect() {
        let a = BoxAA::new(0.0, 0.0, 2.0, 2.0);
        let b = BoxAA::new(2.0, 0.0, 2.0, 2.0);
        assert_eq!(a.intersection(&b), 0.0);
    }
}
