//! Set-membership prediction of the vehicle's position at the end of the
//! horizon and its Chebyshev-center point estimate.
//!
//! The prediction set is the union of a circular sector (apex at the current
//! vehicle position, radius `v̄·N·ΔT`, bearings between the two extremal
//! trajectories) and the triangle spanned by the apex and the two extremal
//! endpoints. For spans up to π the triangle lies inside the sector; beyond π
//! the union is the circular segment cut off by the chord between the
//! endpoints. Both cases are convex.
//!
//! Bearings follow the compass convention of [`crate::evader`]: a bearing `θ`
//! points along `(sin θ, cos θ)`, and the sector sweeps clockwise (increasing
//! bearing) from `theta_lo` to `theta_hi`.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evader::{bearing, bearing_vector, VehicleState, VelocityBounds};
use crate::polytope::Polytope;

/// Minimum number of chords used to approximate the arc.
pub const MIN_ARC_CHORDS: usize = 64;
/// Largest allowed gap (m) between the arc and its chord approximation.
pub const MAX_SAGITTA: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extremal {
    /// Constant slip `δ̲`.
    Lower,
    /// Constant slip `δ̄`.
    Upper,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSector {
    pub center: Vector2<f64>,
    pub radius: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub point: Vector2<f64>,
    pub inradius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SectorShape {
    Point,
    /// Zero angular width: a radial segment.
    Segment,
    /// Span at most π.
    Sector,
    /// Span above π: the circular segment beyond the chord.
    CircularSegment,
    Disk,
}

/// Vehicle positions over the horizon under constant speed `v̄` and constant
/// slip, with the heading frozen at its measured value.
pub fn propagate_extremal(
    start: &VehicleState,
    bounds: &VelocityBounds,
    steps: usize,
    dt: f64,
    which: Extremal,
) -> Vec<Vector2<f64>> {
    let slip = match which {
        Extremal::Lower => bounds.delta_lo,
        Extremal::Upper => bounds.delta_hi,
    };
    let u = bounds.v_bar * bearing_vector(start.heading + slip);
    let mut out = Vec::with_capacity(steps + 1);
    let mut p = start.position();
    out.push(p);
    for _ in 0..steps {
        p += dt * u;
        out.push(p);
    }
    out
}

pub fn build_sector(
    start: &Vector2<f64>,
    lower_end: &Vector2<f64>,
    upper_end: &Vector2<f64>,
    bounds: &VelocityBounds,
    steps: usize,
    dt: f64,
) -> PredictionSector {
    let radius = bounds.v_bar * steps as f64 * dt;
    let lo_vec = lower_end - start;
    let hi_vec = upper_end - start;
    if radius <= 0.0 || lo_vec.norm() < 1e-12 * radius.max(1.0) {
        return PredictionSector { center: *start, radius: radius.max(0.0), theta_lo: 0.0, theta_hi: 0.0 };
    }
    let theta_lo = bearing(&lo_vec);
    let slip_span = bounds.delta_hi - bounds.delta_lo;
    let mut span = (bearing(&hi_vec) - theta_lo).rem_euclid(TAU);
    if slip_span >= TAU - 1e-9 {
        span = TAU;
    } else if TAU - span < 1e-9 && slip_span < PI {
        span = 0.0;
    }
    PredictionSector { center: *start, radius, theta_lo, theta_hi: theta_lo + span }
}

/// Extremal propagation and sector construction in one call.
pub fn predict_sector(start: &VehicleState, bounds: &VelocityBounds, steps: usize, dt: f64) -> PredictionSector {
    let lower = propagate_extremal(start, bounds, steps, dt, Extremal::Lower);
    let upper = propagate_extremal(start, bounds, steps, dt, Extremal::Upper);
    build_sector(&start.position(), &lower[steps], &upper[steps], bounds, steps, dt)
}

impl PredictionSector {
    pub fn span(&self) -> f64 {
        self.theta_hi - self.theta_lo
    }

    pub fn shape(&self) -> SectorShape {
        if self.radius <= 0.0 {
            SectorShape::Point
        } else if self.span() <= 0.0 {
            SectorShape::Segment
        } else if self.span() <= PI {
            SectorShape::Sector
        } else if self.span() < TAU {
            SectorShape::CircularSegment
        } else {
            SectorShape::Disk
        }
    }

    pub fn lower_end(&self) -> Vector2<f64> {
        self.center + self.radius * bearing_vector(self.theta_lo)
    }

    pub fn upper_end(&self) -> Vector2<f64> {
        self.center + self.radius * bearing_vector(self.theta_hi)
    }

    /// Exact membership in the sector-with-triangle union.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        let tol = 1e-9 * self.radius.max(1.0);
        let d = p - self.center;
        let dist = d.norm();
        if dist <= tol {
            return true;
        }
        if dist > self.radius + tol {
            return false;
        }
        // radius/bearing test
        let rel = (bearing(&d) - self.theta_lo).rem_euclid(TAU);
        let ang_tol = tol / dist;
        if rel <= self.span() + ang_tol || rel >= TAU - ang_tol {
            return true;
        }
        // triangle test
        in_triangle(p, &self.center, &self.lower_end(), &self.upper_end(), tol)
    }

    /// Half-planes `n·p ≤ c` of the polygon inscribed in the set, with at
    /// least [`MIN_ARC_CHORDS`] chords along the arc.
    pub fn inner_polygon(&self) -> Polytope {
        let span = self.span();
        let r = self.radius;
        let chords = if r > MAX_SAGITTA {
            let per_chord = 2.0 * (1.0 - MAX_SAGITTA / r).acos();
            ((span / per_chord).ceil() as usize).max(MIN_ARC_CHORDS)
        } else {
            MIN_ARC_CHORDS
        };
        let mut rows: Vec<(Vector2<f64>, f64)> = Vec::with_capacity(chords + 2);
        let step = span / chords as f64;
        for j in 0..chords {
            let a0 = self.theta_lo + j as f64 * step;
            let n = bearing_vector(a0 + 0.5 * step);
            let q = self.center + r * bearing_vector(a0);
            rows.push((n, n.dot(&q)));
        }
        if span <= PI {
            let n1 = bearing_vector(self.theta_lo - PI / 2.0);
            let n2 = bearing_vector(self.theta_hi + PI / 2.0);
            rows.push((n1, n1.dot(&self.center)));
            rows.push((n2, n2.dot(&self.center)));
        } else if span < TAU {
            let n = bearing_vector(self.theta_hi + 0.5 * (TAU - span));
            rows.push((n, n.dot(&self.lower_end())));
        }
        let a = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i].0[j]);
        let b = DVector::from_fn(rows.len(), |i, _| rows[i].1);
        Polytope { a, b }
    }
}

fn in_triangle(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>, tol: f64) -> bool {
    let cross = |o: &Vector2<f64>, u: &Vector2<f64>, v: &Vector2<f64>| (u - o).perp(&(v - o));
    let area = cross(a, b, c);
    if area.abs() <= tol * tol {
        return false;
    }
    let s = area.signum();
    let scale = (b - a).norm().max((c - a).norm());
    [cross(a, b, p), cross(b, c, p), cross(c, a, p)].iter().all(|v| s * v >= -tol * scale)
}

/// Center of the largest disk inside the prediction set.
///
/// The arc is replaced by an inscribed polygon, so the returned disk lies
/// inside the exact set; the inradius is conservative by at most
/// [`MAX_SAGITTA`].
pub fn chebyshev_center(sector: &PredictionSector) -> Result<PointEstimate> {
    match sector.shape() {
        SectorShape::Point => return Ok(PointEstimate { point: sector.center, inradius: 0.0 }),
        SectorShape::Segment => {
            return Ok(PointEstimate { point: 0.5 * (sector.center + sector.lower_end()), inradius: 0.0 })
        }
        _ => {}
    }
    // Solve in coordinates centered on the apex to keep the LP well scaled.
    let local = PredictionSector { center: Vector2::zeros(), ..*sector };
    let poly = local.inner_polygon();
    let Some((c, r)) = poly.chebyshev_ball(sector.radius)? else {
        // Cannot happen for a valid sector; fall back to the apex.
        return Ok(PointEstimate { point: sector.center, inradius: 0.0 });
    };
    let point = sector.center + Vector2::new(c[0], c[1]);
    debug_assert!(sector.contains(&point));
    Ok(PointEstimate { point, inradius: r })
}
