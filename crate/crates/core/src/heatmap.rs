//! Attention heatmaps on the instance coordinate grid.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Grid origin `[row, col]`, the minimum over all instances of the bag.
    pub origin: [i32; 2],
    pub rows: usize,
    pub cols: usize,
    /// `(row, col, attention)` for every attended instance, in input order.
    pub cells: Vec<([i32; 2], f64)>,
}

impl Heatmap {
    /// `coords` spans every instance of the bag; `selected[i]` is the bag
    /// index that received `weights[i]`.
    pub fn new(coords: &[[i32; 2]], selected: &[usize], weights: &[f64]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyBag);
        }
        if selected.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} selected instances but {} weights",
                selected.len(),
                weights.len()
            )));
        }
        if let Some(&i) = selected.iter().find(|&&i| i >= coords.len()) {
            return Err(Error::Shape(format!(
                "instance {i} outside a bag of {}",
                coords.len()
            )));
        }
        let min_r = coords.iter().map(|c| c[0]).min().unwrap();
        let max_r = coords.iter().map(|c| c[0]).max().unwrap();
        let min_c = coords.iter().map(|c| c[1]).min().unwrap();
        let max_c = coords.iter().map(|c| c[1]).max().unwrap();
        Ok(Self {
            origin: [min_r, min_c],
            rows: (max_r as i64 - min_r as i64 + 1) as usize,
            cols: (max_c as i64 - min_c as i64 + 1) as usize,
            cells: selected
                .iter()
                .zip(weights)
                .map(|(&i, &w)| (coords[i], w))
                .collect(),
        })
    }

    /// CSV `row,col,attention_weight` in bag coordinates.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,attention_weight\n");
        for (c, w) in &self.cells {
            out.push_str(&format!("{},{},{}\n", c[0], c[1], w));
        }
        out
    }

    /// Min–max scaled 8-bit intensities, row-major. Grid cells without an
    /// attended instance are 0. Equal weights all map to 255.
    pub fn pixels(&self) -> Vec<u8> {
        let mut px = vec![0u8; self.rows * self.cols];
        let lo = self.cells.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let hi = self
            .cells
            .iter()
            .map(|c| c.1)
            .fold(f64::NEG_INFINITY, f64::max);
        for (c, w) in &self.cells {
            let scaled = if hi > lo { (w - lo) / (hi - lo) } else { 1.0 };
            let r = (c[0] - self.origin[0]) as usize;
            let col = (c[1] - self.origin[1]) as usize;
            px[r * self.cols + col] = (scaled * 255.0).round() as u8;
        }
        px
    }

    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.pixels());
        out
    }
}
