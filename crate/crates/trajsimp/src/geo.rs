//! Planar projection of lon/lat coordinates.
//!
//! All metric computations run in an equirectangular projection centred on
//! the database's mean latitude: one degree of latitude maps to a fixed
//! number of metres, one degree of longitude to that number scaled by
//! `cos(mean latitude)`. The projection is linear, so segment interpolation
//! commutes with it.

use crate::traj::{Point, TrajectoryDatabase};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Metres per degree along each axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    m_per_deg_x: f64,
    m_per_deg_y: f64,
}

impl Projection {
    /// Equirectangular projection about the given reference latitude.
    pub fn at_latitude(lat_deg: f64) -> Self {
        let m_per_deg = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Projection {
            m_per_deg_x: m_per_deg * lat_deg.to_radians().cos(),
            m_per_deg_y: m_per_deg,
        }
    }

    pub fn for_database(db: &TrajectoryDatabase) -> Self {
        Self::at_latitude(db.mean_latitude())
    }

    /// Treats coordinates as metres directly. Used by planar unit fixtures.
    pub fn identity() -> Self {
        Projection {
            m_per_deg_x: 1.0,
            m_per_deg_y: 1.0,
        }
    }

    /// Projects a point to planar metres.
    pub fn project(&self, p: &Point) -> [f64; 2] {
        [p.x * self.m_per_deg_x, p.y * self.m_per_deg_y]
    }

    pub fn deg_per_meter_x(&self) -> f64 {
        1.0 / self.m_per_deg_x
    }

    pub fn deg_per_meter_y(&self) -> f64 {
        1.0 / self.m_per_deg_y
    }

    /// Planar Euclidean distance in metres.
    pub fn distance_m(&self, a: &Point, b: &Point) -> f64 {
        let pa = self.project(a);
        let pb = self.project(b);
        (pa[0] - pb[0]).hypot(pa[1] - pb[1])
    }
}
