//! Classical error-driven simplifiers, expressed as budgeted greedy
//! procedures so they compare against the learned method at a fixed
//! compression rate.
//!
//! - Top-Down starts from the endpoints and repeatedly inserts the point
//!   deviating most from its current anchor segment; the whole-database
//!   variant shares one global priority across trajectories.
//! - Bottom-Up starts from all points and repeatedly removes the interior
//!   point whose merged segment would incur the smallest worst-case
//!   deviation.
//! - Uniform sampling draws the budget uniformly across all points.
//!
//! All methods hit the budget exactly and break ties toward the lowest
//! index, so results are deterministic.

use crate::dist::{dad, ped, sed, AnchorSegment, ErrorKind};
use crate::error::{Error, Result};
use crate::geo::Projection;
use crate::sampling::uniform_indices_without_replacement;
use crate::traj::{TrajId, Trajectory, TrajectoryDatabase};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BinaryHeap, HashSet};

/// Which simplifier to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMethod {
    /// Top-Down per trajectory, budgets allocated proportionally.
    TopDownEach,
    /// Top-Down with one database-wide priority queue.
    TopDownWhole,
    /// Bottom-Up per trajectory, budgets allocated proportionally.
    BottomUpEach,
    /// Uniform random sampling across all points.
    Uniform,
}

/// A baseline run: method, deviation measure, and target compression rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineSpec {
    pub method: BaselineMethod,
    pub kind: ErrorKind,
    pub compression_rate: f64,
    pub seed: u64,
}

/// Per-point deviation against an anchor segment, shared by both greedy
/// directions. DAD needs the whole trajectory for the successor heading.
fn deviation(
    traj: &Trajectory,
    index: usize,
    seg: &AnchorSegment,
    kind: ErrorKind,
    proj: &Projection,
) -> Result<f64> {
    match kind {
        ErrorKind::Ped => Ok(ped(&traj.points[index], seg, proj)),
        ErrorKind::Sed => sed(&traj.points[index], seg, proj),
        ErrorKind::Dad => dad(traj, index, seg, proj),
    }
}

fn segment(traj: &Trajectory, a: usize, b: usize) -> AnchorSegment {
    AnchorSegment {
        start: traj.points[a],
        end: traj.points[b],
        start_index: a,
        end_index: b,
    }
}

/// The worst interior deviation within (a, b) against the chord a-b, with
/// its index; `None` when the range has no interior points.
fn worst_interior(
    traj: &Trajectory,
    a: usize,
    b: usize,
    kind: ErrorKind,
    proj: &Projection,
) -> Result<Option<(f64, usize)>> {
    let seg = segment(traj, a, b);
    let mut best: Option<(f64, usize)> = None;
    for i in (a + 1)..b {
        let err = deviation(traj, i, &seg, kind, proj)?;
        // Strict comparison keeps the lowest index on ties.
        if best.map_or(true, |(e, _)| err > e) {
            best = Some((err, i));
        }
    }
    Ok(best)
}

/// Max-heap entry for top-down: worst candidate of one active chord.
/// Ordering prefers larger error, then lower point index, then lower
/// trajectory position, so ties are total.
#[derive(Debug, PartialEq)]
struct SplitCandidate {
    error: f64,
    traj_pos: usize,
    index: usize,
    chord: (usize, usize),
}

impl Eq for SplitCandidate {}

impl Ord for SplitCandidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error
            .total_cmp(&other.error)
            .then_with(|| other.traj_pos.cmp(&self.traj_pos))
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for SplitCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

struct TopDownState {
    kept: Vec<usize>,
    active: HashSet<(usize, usize)>,
}

fn top_down_init(
    traj: &Trajectory,
    traj_pos: usize,
    kind: ErrorKind,
    proj: &Projection,
    heap: &mut BinaryHeap<SplitCandidate>,
) -> Result<TopDownState> {
    let n = traj.len();
    let mut state = TopDownState {
        kept: Vec::new(),
        active: HashSet::new(),
    };
    match n {
        0 => {}
        1 => state.kept.push(0),
        _ => {
            state.kept = vec![0, n - 1];
            state.active.insert((0, n - 1));
            if let Some((error, index)) = worst_interior(traj, 0, n - 1, kind, proj)? {
                heap.push(SplitCandidate {
                    error,
                    traj_pos,
                    index,
                    chord: (0, n - 1),
                });
            }
        }
    }
    Ok(state)
}

fn top_down_split(
    traj: &Trajectory,
    traj_pos: usize,
    state: &mut TopDownState,
    cand: &SplitCandidate,
    kind: ErrorKind,
    proj: &Projection,
    heap: &mut BinaryHeap<SplitCandidate>,
) -> Result<()> {
    let (a, b) = cand.chord;
    state.active.remove(&(a, b));
    state.kept.push(cand.index);
    for chord in [(a, cand.index), (cand.index, b)] {
        state.active.insert(chord);
        if let Some((error, index)) = worst_interior(traj, chord.0, chord.1, kind, proj)? {
            heap.push(SplitCandidate {
                error,
                traj_pos,
                index,
                chord,
            });
        }
    }
    Ok(())
}

/// Top-Down simplification of one trajectory to exactly `budget` points
/// (the whole trajectory when the budget covers it). Returns the retained
/// indices, ascending.
pub fn top_down(
    traj: &Trajectory,
    budget: usize,
    kind: ErrorKind,
    proj: &Projection,
) -> Result<Vec<usize>> {
    if budget < 2 {
        return Err(Error::InvalidArgument(format!(
            "top-down needs a budget of at least 2, got {budget}"
        )));
    }
    if budget >= traj.len() {
        return Ok((0..traj.len()).collect());
    }
    let mut heap = BinaryHeap::new();
    let mut state = top_down_init(traj, 0, kind, proj, &mut heap)?;
    while state.kept.len() < budget {
        let cand = heap.pop().expect("interior points remain below budget");
        if !state.active.contains(&cand.chord) {
            continue; // stale entry for a chord that was split already
        }
        top_down_split(traj, 0, &mut state, &cand, kind, proj, &mut heap)?;
    }
    state.kept.sort_unstable();
    Ok(state.kept)
}

/// Top-Down over the whole database: every trajectory starts from its
/// endpoints and one global priority queue inserts the worst point anywhere
/// until the database budget is met.
pub fn top_down_whole(
    db: &TrajectoryDatabase,
    budget: usize,
    kind: ErrorKind,
    proj: &Projection,
) -> Result<BTreeMap<TrajId, Vec<usize>>> {
    let floor: usize = db.trajectories().iter().map(|t| t.len().min(2)).sum();
    if budget < floor {
        return Err(Error::InvalidArgument(format!(
            "whole-database top-down needs at least {floor} points (2 per trajectory), got {budget}"
        )));
    }
    let budget = budget.min(db.total_points());
    let mut heap = BinaryHeap::new();
    let mut states = Vec::with_capacity(db.len());
    let mut used = 0usize;
    for (pos, traj) in db.trajectories().iter().enumerate() {
        let state = top_down_init(traj, pos, kind, proj, &mut heap)?;
        used += state.kept.len();
        states.push(state);
    }
    while used < budget {
        let cand = heap.pop().expect("interior points remain below budget");
        let state = &mut states[cand.traj_pos];
        if !state.active.contains(&cand.chord) {
            continue;
        }
        let traj = &db.trajectories()[cand.traj_pos];
        top_down_split(traj, cand.traj_pos, state, &cand, kind, proj, &mut heap)?;
        used += 1;
    }
    let mut kept = BTreeMap::new();
    for (state, traj) in states.into_iter().zip(db.trajectories()) {
        let mut indices = state.kept;
        indices.sort_unstable();
        kept.insert(traj.id.clone(), indices);
    }
    Ok(kept)
}

/// Min-heap entry for bottom-up: cost of removing one interior point.
#[derive(Debug, PartialEq)]
struct MergeCandidate {
    cost: f64,
    index: usize,
    generation: u64,
}

impl Eq for MergeCandidate {}

impl Ord for MergeCandidate {
    // Reversed so the BinaryHeap pops the cheapest cost, lowest index first.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for MergeCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Bottom-Up simplification of one trajectory to exactly `budget` points.
/// The cost of removing an interior point is the worst deviation of the
/// merged chord spanning its two current neighbours; after each removal
/// only the two neighbours are re-costed. Returns retained indices,
/// ascending.
pub fn bottom_up(
    traj: &Trajectory,
    budget: usize,
    kind: ErrorKind,
    proj: &Projection,
) -> Result<Vec<usize>> {
    if budget < 2 {
        return Err(Error::InvalidArgument(format!(
            "bottom-up needs a budget of at least 2, got {budget}"
        )));
    }
    let n = traj.len();
    if budget >= n {
        return Ok((0..n).collect());
    }
    let mut prev: Vec<usize> = (0..n).map(|i| i.wrapping_sub(1)).collect();
    let mut next: Vec<usize> = (1..=n).collect();
    let mut alive = vec![true; n];
    let mut generation = vec![0u64; n];
    let mut heap = BinaryHeap::new();
    let cost_of = |i: usize, prev: &[usize], next: &[usize]| -> Result<f64> {
        let (a, b) = (prev[i], next[i]);
        let merged = worst_interior(traj, a, b, kind, proj)?;
        Ok(merged.map(|(e, _)| e).expect("i lies strictly inside (a, b)"))
    };
    for i in 1..(n - 1) {
        heap.push(MergeCandidate {
            cost: cost_of(i, &prev, &next)?,
            index: i,
            generation: 0,
        });
    }
    let mut remaining = n;
    while remaining > budget {
        let cand = heap.pop().expect("interior points remain above budget");
        if !alive[cand.index] || generation[cand.index] != cand.generation {
            continue;
        }
        let i = cand.index;
        alive[i] = false;
        remaining -= 1;
        let (a, b) = (prev[i], next[i]);
        next[a] = b;
        prev[b] = a;
        for j in [a, b] {
            if j == 0 || j == n - 1 {
                continue;
            }
            generation[j] += 1;
            heap.push(MergeCandidate {
                cost: cost_of(j, &prev, &next)?,
                index: j,
                generation: generation[j],
            });
        }
    }
    Ok((0..n).filter(|&i| alive[i]).collect())
}

/// Uniform random retention of exactly `budget` points across the whole
/// database, reproducible under the seed.
pub fn uniform_sample(
    db: &TrajectoryDatabase,
    budget: usize,
    seed: u64,
) -> Result<BTreeMap<TrajId, Vec<usize>>> {
    let total = db.total_points();
    if budget > total {
        return Err(Error::InvalidArgument(format!(
            "budget {budget} exceeds the {total} database points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = uniform_indices_without_replacement(total, budget, &mut rng)?;
    Ok(regroup(db, &chosen))
}

/// Splits ascending flat point indices into per-trajectory index lists.
pub fn regroup(db: &TrajectoryDatabase, flat: &[usize]) -> BTreeMap<TrajId, Vec<usize>> {
    let mut kept: BTreeMap<TrajId, Vec<usize>> = db
        .trajectories()
        .iter()
        .map(|t| (t.id.clone(), Vec::new()))
        .collect();
    let mut cursor = 0usize;
    let mut offset = 0usize;
    for traj in db.trajectories() {
        let end = offset + traj.len();
        let list = kept.get_mut(&traj.id).expect("inserted above");
        while cursor < flat.len() && flat[cursor] < end {
            list.push(flat[cursor] - offset);
            cursor += 1;
        }
        offset = end;
    }
    kept
}

/// Allocates a database budget across trajectories proportionally to their
/// lengths (largest-remainder rounding), clamped to [min(2, len), len] per
/// trajectory, with a deterministic repair pass so the total is exact.
pub fn allocate_per_trajectory_budgets(
    db: &TrajectoryDatabase,
    budget: usize,
) -> Result<Vec<usize>> {
    let total = db.total_points();
    let floor: usize = db.trajectories().iter().map(|t| t.len().min(2)).sum();
    if budget < floor {
        return Err(Error::InvalidArgument(format!(
            "per-trajectory allocation needs at least {floor} points (2 per trajectory), got {budget}"
        )));
    }
    if budget > total {
        return Err(Error::InvalidArgument(format!(
            "budget {budget} exceeds the {total} database points"
        )));
    }
    let lens: Vec<usize> = db.trajectories().iter().map(|t| t.len()).collect();
    let quotas: Vec<f64> = lens
        .iter()
        .map(|&l| budget as f64 * l as f64 / total as f64)
        .collect();
    let mut alloc: Vec<usize> = quotas
        .iter()
        .zip(&lens)
        .map(|(&q, &l)| (q.floor() as usize).clamp(l.min(2), l))
        .collect();
    let frac = |i: usize| quotas[i] - quotas[i].floor();
    loop {
        let assigned: usize = alloc.iter().sum();
        if assigned == budget {
            break;
        }
        if assigned < budget {
            // Grow where there is room, largest fractional part first.
            let mut order: Vec<usize> = (0..alloc.len()).filter(|&i| alloc[i] < lens[i]).collect();
            order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
            let mut need = budget - assigned;
            for i in order {
                alloc[i] += 1;
                need -= 1;
                if need == 0 {
                    break;
                }
            }
        } else {
            // Shrink where the floor allows, smallest fractional part first.
            let mut order: Vec<usize> = (0..alloc.len())
                .filter(|&i| alloc[i] > lens[i].min(2))
                .collect();
            order.sort_by(|&a, &b| frac(a).total_cmp(&frac(b)).then(a.cmp(&b)));
            let mut excess = assigned - budget;
            for i in order {
                alloc[i] -= 1;
                excess -= 1;
                if excess == 0 {
                    break;
                }
            }
        }
    }
    Ok(alloc)
}

/// Runs a baseline over the database at a global budget, returning retained
/// indices per trajectory.
pub fn run_baseline(
    db: &TrajectoryDatabase,
    spec: &BaselineSpec,
    budget: usize,
    proj: &Projection,
) -> Result<BTreeMap<TrajId, Vec<usize>>> {
    match spec.method {
        BaselineMethod::TopDownWhole => top_down_whole(db, budget, spec.kind, proj),
        BaselineMethod::Uniform => uniform_sample(db, budget, spec.seed),
        BaselineMethod::TopDownEach | BaselineMethod::BottomUpEach => {
            let alloc = allocate_per_trajectory_budgets(db, budget)?;
            let mut kept = BTreeMap::new();
            for (traj, &b) in db.trajectories().iter().zip(&alloc) {
                let indices = match spec.method {
                    BaselineMethod::TopDownEach => top_down(traj, b.max(2), spec.kind, proj)?,
                    _ => bottom_up(traj, b.max(2), spec.kind, proj)?,
                };
                kept.insert(traj.id.clone(), indices);
            }
            Ok(kept)
        }
    }
}
