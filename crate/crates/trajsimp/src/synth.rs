//! Synthetic trajectory generators with known ground-truth structure,
//! used by the evaluation harness and the examples.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sampling::uniform_indices_without_replacement;
use crate::traj::{Point, TrajId, Trajectory, TrajectoryDatabase};

/// A corpus of noisy planar walks with a known set of sharp direction
/// changes per trajectory.
pub struct PlantedCorners {
    pub db: TrajectoryDatabase,
    /// Ground-truth corner vertex indices per trajectory, ascending.
    pub corners: BTreeMap<TrajId, Vec<usize>>,
}

/// Minimum index distance between two planted corners, and between a
/// corner and either endpoint.
const CORNER_MARGIN: usize = 3;

/// Heading jump magnitude at a planted corner, radians.
const CORNER_TURN: (f64, f64) = (1.2, 1.9);

/// Generates `num` unit-step random walks of `len` points each, with 3 to
/// 6 sharp corners planted at interior vertices (pairwise at least 3
/// indices apart) and independent Gaussian jitter of standard deviation
/// `jitter` on every stored coordinate. Coordinates are planar (use the
/// identity projection); timestamps advance by 15 s and never overlap
/// between trajectories.
pub fn planted_corner_corpus(
    num: usize,
    len: usize,
    jitter: f64,
    seed: u64,
) -> Result<PlantedCorners> {
    if num == 0 {
        return Err(Error::InvalidArgument("corpus needs at least one trajectory".into()));
    }
    // 6 corners, 3 apart, 3 from each end need indices up to 3 + 5*3.
    if len < 22 {
        return Err(Error::InvalidArgument(format!(
            "trajectory length {len} too short to plant separated corners"
        )));
    }
    if !(jitter >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "jitter {jitter} must be non-negative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajs = Vec::with_capacity(num);
    let mut corners = BTreeMap::new();
    for k in 0..num {
        let id = TrajId::new(format!("pc{k:04}"));
        let count = rng.gen_range(3..=6usize);
        let verts = separated_interior_indices(len, count, CORNER_MARGIN, &mut rng)?;
        let vert_set: BTreeSet<usize> = verts.iter().copied().collect();

        let mut x = rng.gen_range(0.0..1500.0);
        let mut y = rng.gen_range(0.0..1500.0);
        let mut heading = rng.gen_range(0.0..TAU);
        let t0 = (k * len) as i64 * 15;
        let mut points = Vec::with_capacity(len);
        for i in 0..len {
            if i > 0 {
                // A vertex at i-1 means the step leaving it already uses
                // the new heading, so the direction change sits exactly at
                // the planted index.
                if vert_set.contains(&(i - 1)) {
                    let turn = rng.gen_range(CORNER_TURN.0..CORNER_TURN.1);
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    heading += sign * turn;
                }
                x += heading.cos();
                y += heading.sin();
            }
            let jx: f64 = rng.sample(rand_distr::StandardNormal);
            let jy: f64 = rng.sample(rand_distr::StandardNormal);
            points.push(Point::new(
                x + jitter * jx,
                y + jitter * jy,
                t0 + i as i64 * 15,
            ));
        }
        trajs.push(Trajectory::new(id.clone(), points));
        corners.insert(id, verts);
    }
    Ok(PlantedCorners {
        db: TrajectoryDatabase::new(trajs)?,
        corners,
    })
}

/// `count` ascending indices from `margin ..= len - 1 - margin`, pairwise
/// at least `margin` apart.
fn separated_interior_indices(
    len: usize,
    count: usize,
    margin: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let lo = margin;
    let hi = len - 1 - margin;
    let gap = margin - 1;
    // Subtracting the mandatory gaps turns the separated draw into a
    // plain distinct draw.
    let slots = (hi - lo + 1).checked_sub((count - 1) * gap).ok_or_else(|| {
        Error::InvalidArgument(format!("cannot fit {count} separated corners in length {len}"))
    })?;
    let base = uniform_indices_without_replacement(slots, count, rng)?;
    Ok(base
        .into_iter()
        .enumerate()
        .map(|(j, q)| lo + q + j * gap)
        .collect())
}

/// Convex circular arc sampled at 30 to 60 points. On convex curves every
/// greedy split moves the chords strictly toward the curve, so top-down
/// simplification error is non-increasing in the budget.
pub fn convex_arc(id: impl Into<TrajId>, rng: &mut ChaCha8Rng) -> Trajectory {
    let n = rng.gen_range(30..60);
    let r = rng.gen_range(5.0..20.0f64);
    let span = rng.gen_range(1.0..3.0f64);
    Trajectory::new(
        id,
        (0..n)
            .map(|i| {
                let a = span * i as f64 / (n - 1) as f64;
                Point::new(r * a.cos(), r * a.sin(), i as i64)
            })
            .collect::<Vec<_>>(),
    )
}

/// Six collinear points with one dominant and one minor vertical bump at
/// distinct interior indices. The importance hierarchy is unambiguous, so
/// greedy bottom-up merging lands on the brute-force optimum.
pub fn two_scale_bump(id: impl Into<TrajId>, rng: &mut ChaCha8Rng) -> Trajectory {
    let mut ys = [0.0f64; 6];
    let big = rng.gen_range(1..5usize);
    let mut small = rng.gen_range(1..5usize);
    while small == big {
        small = rng.gen_range(1..5usize);
    }
    ys[big] = rng.gen_range(3.0..5.0);
    ys[small] = rng.gen_range(0.5..1.5);
    Trajectory::new(
        id,
        (0..6)
            .map(|i| Point::new(i as f64, ys[i], i as i64))
            .collect::<Vec<_>>(),
    )
}
