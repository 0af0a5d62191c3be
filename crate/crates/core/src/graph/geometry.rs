//! Patch-grid geometry: contour alignment and spatial edge construction.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Default patch edge length in pixels.
pub const DEFAULT_STEP_SIZE: i64 = 224;

/// Largest squared grid distance that still counts as a neighbor (2√2 squared).
pub const NEIGHBOR_RADIUS_SQ: i64 = 8;

/// Axis-aligned tissue contour bounding box in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Contour {
    pub start_x: i64,
    pub start_y: i64,
    pub w: i64,
    pub h: i64,
}

impl Contour {
    pub fn new(start_x: i64, start_y: i64, w: i64, h: i64) -> Self {
        Self {
            start_x,
            start_y,
            w,
            h,
        }
    }

    /// Extends the box up-left so its origin sits on the `step_size` grid.
    ///
    /// The far edges stay put, so the covered pixel span only grows.
    pub fn align(self, step_size: i64) -> Result<Self> {
        if step_size <= 0 {
            return Err(Error::Argument(format!("step_size must be positive, got {step_size}")));
        }
        if self.start_x < 0 || self.start_y < 0 {
            return Err(Error::Argument(format!(
                "contour origin ({}, {}) is negative",
                self.start_x, self.start_y
            )));
        }
        if self.w <= 0 || self.h <= 0 {
            return Err(Error::Argument(format!("contour size {}x{} is not positive", self.w, self.h)));
        }
        let dx = self.start_x % step_size;
        let dy = self.start_y % step_size;
        Ok(Self {
            start_x: self.start_x - dx,
            start_y: self.start_y - dy,
            w: self.w + dx,
            h: self.h + dy,
        })
    }
}

/// Directed spatial edges `(source, target)` over patch grid coordinates.
///
/// `j → i` exists iff `0 < Δcol² + Δrow² ≤ 8`, i.e. the 5×5 block around `i`
/// without `i` itself. The relation is symmetric, so every edge appears in
/// both directions. Output is grouped by target in index order.
pub fn build_edges(coords: &[[i32; 2]]) -> Result<Vec<(usize, usize)>> {
    let mut at: HashMap<[i32; 2], usize> = HashMap::with_capacity(coords.len());
    for (i, &c) in coords.iter().enumerate() {
        if let Some(prev) = at.insert(c, i) {
            return Err(Error::Data(format!(
                "duplicate grid coordinate {c:?} at nodes {prev} and {i}"
            )));
        }
    }
    let mut edges = Vec::with_capacity(coords.len() * 24);
    for (i, &[x, y]) in coords.iter().enumerate() {
        for dy in -2..=2 {
            for dx in -2..=2 {
                let d2 = i64::from(dx * dx + dy * dy);
                if d2 == 0 || d2 > NEIGHBOR_RADIUS_SQ {
                    continue;
                }
                if let Some(&j) = at.get(&[x + dx, y + dy]) {
                    edges.push((j, i));
                }
            }
        }
    }
    Ok(edges)
}
