//! Procedural tile-grid height fields.
//!
//! The arena is a `rows x cols` grid of square tiles. Rows advance along +X
//! (the locomotion direction) and columns along +Z; Y is up. Every tile is a
//! solid column extending from its top surface downwards. A removed tile has
//! no column at all, and nothing exists outside the grid extent, so bodies
//! that leave the arena fall.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Height stored for a tile that has been removed (a gap).
pub const REMOVED_TILE_DEPTH: f64 = -1.0e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainVariant {
    Flat,
    Bumpy,
    BimodalBumps,
    Hurdles,
    Gaps,
    Stairs,
    Valley,
}

impl TerrainVariant {
    pub const ALL: [TerrainVariant; 7] = [
        TerrainVariant::Flat,
        TerrainVariant::Bumpy,
        TerrainVariant::BimodalBumps,
        TerrainVariant::Hurdles,
        TerrainVariant::Gaps,
        TerrainVariant::Stairs,
        TerrainVariant::Valley,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TerrainVariant::Flat => "flat",
            TerrainVariant::Bumpy => "bumpy",
            TerrainVariant::BimodalBumps => "bimodal_bumps",
            TerrainVariant::Hurdles => "hurdles",
            TerrainVariant::Gaps => "gaps",
            TerrainVariant::Stairs => "stairs",
            TerrainVariant::Valley => "valley",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TerrainError {
    #[error("invalid terrain parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },
}

/// Generation parameters. Only the fields relevant to `variant` are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainParams {
    pub variant: TerrainVariant,
    pub tile_size: f64,
    pub rows: usize,
    pub cols: usize,
    /// World X of the low edge of row 0.
    pub origin_x: f64,
    /// World Z of the low edge of column 0.
    pub origin_z: f64,
    pub bump_max: f64,
    pub bimodal_low_max: f64,
    pub bimodal_high_min: f64,
    pub bimodal_high_max: f64,
    pub bimodal_high_prob: f64,
    pub hurdle_height: f64,
    pub hurdle_period: usize,
    pub gap_period: usize,
    pub gap_width: usize,
    pub stair_step: f64,
    pub valley_wall_height: f64,
    pub valley_width: f64,
}

impl Default for TerrainParams {
    fn default() -> Self {
        TerrainParams {
            variant: TerrainVariant::Flat,
            tile_size: 0.5,
            rows: 60,
            cols: 24,
            origin_x: -5.0,
            origin_z: -6.0,
            bump_max: 0.15,
            bimodal_low_max: 0.1,
            bimodal_high_min: 0.3,
            bimodal_high_max: 0.45,
            bimodal_high_prob: 0.5,
            hurdle_height: 0.4,
            hurdle_period: 8,
            gap_period: 6,
            gap_width: 1,
            stair_step: 0.15,
            valley_wall_height: 3.0,
            valley_width: 5.0,
        }
    }
}

impl TerrainParams {
    pub fn with_variant(variant: TerrainVariant) -> Self {
        TerrainParams {
            variant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TerrainError> {
        fn bad(field: &'static str, reason: &str) -> Result<(), TerrainError> {
            Err(TerrainError::InvalidParam {
                field,
                reason: reason.to_string(),
            })
        }
        if !(self.tile_size > 0.0) || !self.tile_size.is_finite() {
            return bad("tile_size", "must be positive and finite");
        }
        if self.rows == 0 || self.cols == 0 {
            return bad("rows/cols", "extent must be non-empty");
        }
        if !self.origin_x.is_finite() || !self.origin_z.is_finite() {
            return bad("origin", "must be finite");
        }
        let heights = [
            ("bump_max", self.bump_max),
            ("bimodal_low_max", self.bimodal_low_max),
            ("bimodal_high_min", self.bimodal_high_min),
            ("bimodal_high_max", self.bimodal_high_max),
            ("hurdle_height", self.hurdle_height),
            ("stair_step", self.stair_step),
            ("valley_wall_height", self.valley_wall_height),
            ("valley_width", self.valley_width),
        ];
        for (field, v) in heights {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(field, "must be non-negative and finite");
            }
        }
        if self.bimodal_high_min > self.bimodal_high_max {
            return bad("bimodal_high_min", "exceeds bimodal_high_max");
        }
        if !(0.0..=1.0).contains(&self.bimodal_high_prob) {
            return bad("bimodal_high_prob", "must lie in [0, 1]");
        }
        if self.hurdle_period == 0 {
            return bad("hurdle_period", "must be at least 1");
        }
        if self.gap_period == 0 || self.gap_width >= self.gap_period {
            return bad("gap_period", "must exceed gap_width");
        }
        Ok(())
    }
}

/// A generated height field. Immutable after generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub variant: TerrainVariant,
    pub tile_size: f64,
    pub rows: usize,
    pub cols: usize,
    pub origin_x: f64,
    pub origin_z: f64,
    pub seed: u64,
    /// Row-major tile heights, `REMOVED_TILE_DEPTH` for removed tiles.
    heights: Vec<f64>,
}

/// Closest solid point of the terrain to a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub point: Vector3<f64>,
    /// Outward unit normal at `point`.
    pub normal: Vector3<f64>,
    /// Signed distance of the query point to the surface, negative inside.
    pub distance: f64,
}

pub fn generate(params: &TerrainParams, seed: u64) -> Result<TerrainSpec, TerrainError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (params.rows, params.cols);
    let mut heights = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let h = match params.variant {
                TerrainVariant::Flat => 0.0,
                TerrainVariant::Bumpy => rng.random::<f64>() * params.bump_max,
                TerrainVariant::BimodalBumps => {
                    if rng.random::<f64>() < params.bimodal_high_prob {
                        params.bimodal_high_min
                            + rng.random::<f64>() * (params.bimodal_high_max - params.bimodal_high_min)
                    } else {
                        rng.random::<f64>() * params.bimodal_low_max
                    }
                }
                TerrainVariant::Hurdles => {
                    if r % params.hurdle_period == params.hurdle_period - 1 {
                        params.hurdle_height
                    } else {
                        0.0
                    }
                }
                TerrainVariant::Gaps => {
                    if r % params.gap_period >= params.gap_period - params.gap_width {
                        REMOVED_TILE_DEPTH
                    } else {
                        0.0
                    }
                }
                TerrainVariant::Stairs => r as f64 * params.stair_step,
                TerrainVariant::Valley => {
                    let zc = params.origin_z + (c as f64 + 0.5) * params.tile_size;
                    if zc.abs() > 0.5 * params.valley_width {
                        params.valley_wall_height
                    } else {
                        0.0
                    }
                }
            };
            heights[r * cols + c] = h;
        }
    }
    Ok(TerrainSpec {
        variant: params.variant,
        tile_size: params.tile_size,
        rows,
        cols,
        origin_x: params.origin_x,
        origin_z: params.origin_z,
        seed,
        heights,
    })
}

impl TerrainSpec {
    pub fn flat_default() -> Self {
        generate(&TerrainParams::default(), 0).expect("default params are valid")
    }

    /// Raw stored height of tile `(row, col)`; `REMOVED_TILE_DEPTH` for gaps.
    pub fn tile_height(&self, row: usize, col: usize) -> f64 {
        self.heights[row * self.cols + col]
    }

    pub fn tile_present(&self, row: usize, col: usize) -> bool {
        self.tile_height(row, col) > REMOVED_TILE_DEPTH
    }

    pub fn x_extent(&self) -> (f64, f64) {
        (self.origin_x, self.origin_x + self.rows as f64 * self.tile_size)
    }

    pub fn z_extent(&self) -> (f64, f64) {
        (self.origin_z, self.origin_z + self.cols as f64 * self.tile_size)
    }

    /// Tile index along one axis; boundary points go to the lower index.
    fn axis_index(&self, v: f64, origin: f64, count: usize) -> Option<usize> {
        let rel = (v - origin) / self.tile_size;
        if !(rel >= 0.0) || rel > count as f64 {
            return None;
        }
        let idx = rel.ceil() as usize;
        Some(idx.saturating_sub(1))
    }

    pub fn tile_at(&self, x: f64, z: f64) -> Option<(usize, usize)> {
        let r = self.axis_index(x, self.origin_x, self.rows)?;
        let c = self.axis_index(z, self.origin_z, self.cols)?;
        Some((r, c))
    }

    /// Surface height at `(x, z)`, or `None` off the grid or over a gap.
    pub fn height_query(&self, x: f64, z: f64) -> Option<f64> {
        let (r, c) = self.tile_at(x, z)?;
        self.tile_present(r, c).then(|| self.tile_height(r, c))
    }

    fn tile_bounds(&self, r: usize, c: usize) -> (f64, f64, f64, f64) {
        let x0 = self.origin_x + r as f64 * self.tile_size;
        let z0 = self.origin_z + c as f64 * self.tile_size;
        (x0, x0 + self.tile_size, z0, z0 + self.tile_size)
    }

    fn height_or_void(&self, r: isize, c: isize) -> f64 {
        if r < 0 || c < 0 || r as usize >= self.rows || c as usize >= self.cols {
            return f64::NEG_INFINITY;
        }
        let h = self.tile_height(r as usize, c as usize);
        if h > REMOVED_TILE_DEPTH {
            h
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Nearest solid surface point to `p` among tile columns within
    /// `search_radius` horizontally. Points buried in a column are pushed out
    /// through the shortest free face.
    pub fn closest_surface(&self, p: Vector3<f64>, search_radius: f64) -> Option<SurfacePoint> {
        let t = self.tile_size;
        let r_lo = ((p.x - search_radius - self.origin_x) / t).floor() as isize;
        let r_hi = ((p.x + search_radius - self.origin_x) / t).floor() as isize;
        let c_lo = ((p.z - search_radius - self.origin_z) / t).floor() as isize;
        let c_hi = ((p.z + search_radius - self.origin_z) / t).floor() as isize;
        let mut best: Option<SurfacePoint> = None;
        for r in r_lo.max(0)..=r_hi.min(self.rows as isize - 1) {
            for c in c_lo.max(0)..=c_hi.min(self.cols as isize - 1) {
                let h = self.height_or_void(r, c);
                if h == f64::NEG_INFINITY {
                    continue;
                }
                let (x0, x1, z0, z1) = self.tile_bounds(r as usize, c as usize);
                let q = Vector3::new(p.x.clamp(x0, x1), p.y.min(h), p.z.clamp(z0, z1));
                let delta = p - q;
                let d = delta.norm();
                let cand = if d > 0.0 {
                    SurfacePoint {
                        point: q,
                        normal: delta / d,
                        distance: d,
                    }
                } else {
                    // Buried: exit through the top or a side facing lower ground.
                    let mut exit = (h - p.y, Vector3::y(), Vector3::new(p.x, h, p.z));
                    let sides = [
                        (p.x - x0, -Vector3::x(), Vector3::new(x0, p.y, p.z), (r - 1, c)),
                        (x1 - p.x, Vector3::x(), Vector3::new(x1, p.y, p.z), (r + 1, c)),
                        (p.z - z0, -Vector3::z(), Vector3::new(p.x, p.y, z0), (r, c - 1)),
                        (z1 - p.z, Vector3::z(), Vector3::new(p.x, p.y, z1), (r, c + 1)),
                    ];
                    for (dist, n, q, (nr, nc)) in sides {
                        if dist < exit.0 && self.height_or_void(nr, nc) < p.y {
                            exit = (dist, n, q);
                        }
                    }
                    SurfacePoint {
                        point: exit.2,
                        normal: exit.1,
                        distance: -exit.0,
                    }
                };
                if best.is_none_or(|b| cand.distance < b.distance) {
                    best = Some(cand);
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_is_zero_everywhere() {
        for seed in [0, 7, 99] {
            let t = generate(&TerrainParams::default(), seed).unwrap();
            for r in 0..t.rows {
                for c in 0..t.cols {
                    assert_eq!(t.tile_height(r, c), 0.0);
                }
            }
            assert_eq!(t.height_query(0.3, -1.2), Some(0.0));
        }
    }

    #[test]
    fn stairs_rise_by_exact_step() {
        let p = TerrainParams::with_variant(TerrainVariant::Stairs);
        let t = generate(&p, 3).unwrap();
        for r in 1..t.rows {
            assert!((t.tile_height(r, 5) - t.tile_height(r - 1, 5) - p.stair_step).abs() < 1e-12);
        }
    }

    #[test]
    fn bumpy_is_seed_deterministic() {
        let p = TerrainParams::with_variant(TerrainVariant::Bumpy);
        assert_eq!(generate(&p, 11).unwrap(), generate(&p, 11).unwrap());
        assert_ne!(generate(&p, 11).unwrap(), generate(&p, 12).unwrap());
        let t = generate(&p, 11).unwrap();
        assert!(t.heights.iter().all(|&h| (0.0..=p.bump_max).contains(&h)));
    }

    #[test]
    fn bimodal_heights_come_from_two_bands() {
        let p = TerrainParams::with_variant(TerrainVariant::BimodalBumps);
        let t = generate(&p, 5).unwrap();
        let (mut low, mut high) = (0, 0);
        for &h in &t.heights {
            if h <= p.bimodal_low_max {
                low += 1;
            } else {
                assert!(h >= p.bimodal_high_min && h <= p.bimodal_high_max);
                high += 1;
            }
        }
        assert!(low > 100 && high > 100);
    }

    #[test]
    fn gap_rows_are_absent() {
        let p = TerrainParams::with_variant(TerrainVariant::Gaps);
        let t = generate(&p, 0).unwrap();
        let gap_row = p.gap_period - 1;
        let x = t.origin_x + (gap_row as f64 + 0.5) * t.tile_size;
        assert_eq!(t.height_query(x, 0.0), None);
        let x = t.origin_x + 0.5 * t.tile_size;
        assert_eq!(t.height_query(x, 0.0), Some(0.0));
    }

    #[test]
    fn hurdles_and_valley_shapes() {
        let p = TerrainParams::with_variant(TerrainVariant::Hurdles);
        let t = generate(&p, 0).unwrap();
        assert_eq!(t.tile_height(p.hurdle_period - 1, 3), p.hurdle_height);
        assert_eq!(t.tile_height(0, 3), 0.0);

        let p = TerrainParams::with_variant(TerrainVariant::Valley);
        let t = generate(&p, 0).unwrap();
        assert_eq!(t.height_query(0.0, 0.0), Some(0.0));
        assert_eq!(t.height_query(0.0, 5.0), Some(p.valley_wall_height));
        assert_eq!(t.height_query(0.0, -5.0), Some(p.valley_wall_height));
    }

    #[test]
    fn outside_extent_is_absent() {
        let t = TerrainSpec::flat_default();
        let (x0, x1) = t.x_extent();
        assert_eq!(t.height_query(x0 - 1e-9, 0.0), None);
        assert_eq!(t.height_query(x1 + 1e-9, 0.0), None);
        assert_eq!(t.height_query(x1, 0.0), Some(0.0));
        assert_eq!(t.height_query(x0, 0.0), Some(0.0));
    }

    #[test]
    fn boundary_point_belongs_to_lower_tile() {
        let t = TerrainSpec::flat_default();
        let x = t.origin_x + 3.0 * t.tile_size;
        assert_eq!(t.tile_at(x, t.origin_z + 0.1).unwrap().0, 2);
        assert_eq!(t.tile_at(x + 1e-9, t.origin_z + 0.1).unwrap().0, 3);
        assert_eq!(t.tile_at(t.origin_x, t.origin_z).unwrap(), (0, 0));
    }

    #[test]
    fn invalid_params_are_rejected() {
        let p = TerrainParams {
            tile_size: 0.0,
            ..Default::default()
        };
        assert!(generate(&p, 0).is_err());
        let p = TerrainParams {
            bump_max: -0.1,
            ..TerrainParams::with_variant(TerrainVariant::Bumpy)
        };
        assert!(matches!(generate(&p, 0), Err(TerrainError::InvalidParam { field: "bump_max", .. })));
    }

    #[test]
    fn closest_surface_above_and_buried() {
        let p = TerrainParams::with_variant(TerrainVariant::Hurdles);
        let t = generate(&p, 0).unwrap();
        let above = t.closest_surface(Vector3::new(0.2, 0.5, 0.1), 0.2).unwrap();
        assert!((above.distance - 0.5).abs() < 1e-12);
        assert_eq!(above.normal, Vector3::y());

        // Inside the hurdle row, right next to its low-x face.
        let row = p.hurdle_period - 1;
        let x0 = t.origin_x + row as f64 * t.tile_size;
        let q = t.closest_surface(Vector3::new(x0 + 0.02, 0.2, 0.1), 0.2).unwrap();
        assert!(q.distance < 0.0);
        assert_eq!(q.normal, -Vector3::x());
        assert!((q.distance + 0.02).abs() < 1e-12);
    }
}
