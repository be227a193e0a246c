//! The 6×6 medium maze. Cells are 1-indexed `(row, col)`; the continuous
//! position `(x, y)` lies in cell `(round(x), round(y))`, so cell centers sit
//! at integer coordinates and each cell spans ±0.5 around its center.

use std::collections::VecDeque;

pub const SIZE: usize = 6;

/// Occupancy grid, `true` = wall. Row-major, row 1 first.
pub const WALLS: [[bool; SIZE]; SIZE] = {
    const O: bool = false;
    const X: bool = true;
    [
        [O, O, X, X, O, O],
        [O, O, X, O, O, O],
        [X, O, O, O, X, X],
        [O, O, X, O, O, O],
        [O, X, O, O, X, O],
        [O, O, O, X, O, O],
    ]
};

/// Goal cells of the 21 training tasks.
pub const TRAIN_GOALS: [(usize, usize); 21] = [
    (1, 1), (1, 5), (1, 6), (2, 1), (2, 2), (2, 5),
    (2, 6), (3, 2), (3, 4), (4, 2), (4, 4), (4, 5), (4, 6), (5, 1), (5, 3), (5, 4), (5, 6), (6, 1),
    (6, 2), (6, 3), (6, 5),
];

/// Goal cells of the 5 held-out tasks.
pub const TEST_GOALS: [(usize, usize); 5] = [(1, 2), (2, 4), (3, 3), (4, 1), (6, 6)];

const EDGE_EPS: f64 = 1e-6;

pub type Cell = (usize, usize);

pub fn is_free(cell: Cell) -> bool {
    let (r, c) = cell;
    (1..=SIZE).contains(&r) && (1..=SIZE).contains(&c) && !WALLS[r - 1][c - 1]
}

/// Empty cells in row-major order; the index in this list is the task id.
pub fn empty_cells() -> Vec<Cell> {
    (1..=SIZE)
        .flat_map(|r| (1..=SIZE).map(move |c| (r, c)))
        .filter(|&cell| is_free(cell))
        .collect()
}

/// Cell containing a continuous coordinate pair, `None` outside the grid.
pub fn cell_of(x: f64, y: f64) -> Option<Cell> {
    let r = (x + 0.5).floor();
    let c = (y + 0.5).floor();
    if r < 1.0 || c < 1.0 || r > SIZE as f64 || c > SIZE as f64 {
        None
    } else {
        Some((r as usize, c as usize))
    }
}

pub fn is_free_position(x: f64, y: f64) -> bool {
    cell_of(x, y).is_some_and(is_free)
}

/// Moves one axis, stopping just inside the current cell when the move
/// would enter a wall or leave the grid. Returns the new coordinate and
/// whether a collision occurred.
fn move_axis(pos: f64, delta: f64, free: impl Fn(f64) -> bool) -> (f64, bool) {
    let next = pos + delta;
    if free(next) {
        return (next, false);
    }
    let center = (pos + 0.5).floor();
    let bound = if delta > 0.0 { center + 0.5 - EDGE_EPS } else { center - 0.5 + EDGE_EPS };
    (bound, true)
}

/// Integrates one step with axis-wise wall clamping. The velocity component
/// along a blocked axis is zeroed.
pub fn integrate(pos: [f64; 2], vel: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let (x, hit_x) = move_axis(pos[0], vel[0], |nx| is_free_position(nx, pos[1]));
    let (y, hit_y) = move_axis(pos[1], vel[1], |ny| is_free_position(x, ny));
    let vel = [if hit_x { 0.0 } else { vel[0] }, if hit_y { 0.0 } else { vel[1] }];
    ([x, y], vel)
}

/// Breadth-first distances (in cells) from `goal` to every free cell.
pub fn distances_to(goal: Cell) -> [[Option<usize>; SIZE]; SIZE] {
    let mut dist = [[None; SIZE]; SIZE];
    if !is_free(goal) {
        return dist;
    }
    dist[goal.0 - 1][goal.1 - 1] = Some(0);
    let mut queue = VecDeque::from([goal]);
    while let Some(cell) = queue.pop_front() {
        let d = dist[cell.0 - 1][cell.1 - 1].expect("queued cells have distances");
        for n in neighbors(cell) {
            if dist[n.0 - 1][n.1 - 1].is_none() {
                dist[n.0 - 1][n.1 - 1] = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

fn neighbors(cell: Cell) -> impl Iterator<Item = Cell> {
    let (r, c) = (cell.0 as isize, cell.1 as isize);
    [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
        .into_iter()
        .filter(|&(a, b)| a >= 1 && b >= 1)
        .map(|(a, b)| (a as usize, b as usize))
        .filter(|&n| is_free(n))
}

/// Next cell on a shortest path from `from` to `goal`; `goal` itself once
/// there. `None` if unreachable.
pub fn next_waypoint(from: Cell, goal: Cell) -> Option<Cell> {
    if from == goal {
        return Some(goal);
    }
    let dist = distances_to(goal);
    let here = dist[from.0 - 1][from.1 - 1]?;
    neighbors(from).find(|n| dist[n.0 - 1][n.1 - 1] == Some(here - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_goal_lists() {
        let cells = empty_cells();
        assert_eq!(cells.len(), 26);
        let mut all: Vec<Cell> = TRAIN_GOALS.iter().chain(&TEST_GOALS).copied().collect();
        all.sort();
        assert_eq!(all, cells);
        // test task ids 1, 6, 10, 12, 25 in row-major order
        let ids: Vec<usize> = TEST_GOALS
            .iter()
            .map(|g| cells.iter().position(|c| c == g).unwrap())
            .collect();
        assert_eq!(ids, vec![1, 6, 10, 12, 25]);
    }

    #[test]
    fn every_cell_reaches_every_goal() {
        for goal in empty_cells() {
            let d = distances_to(goal);
            for c in empty_cells() {
                assert!(d[c.0 - 1][c.1 - 1].is_some(), "{c:?} cannot reach {goal:?}");
            }
        }
    }

    #[test]
    fn walls_stop_motion() {
        // (1,2) has a wall at (1,3) to its right (+y)
        let (p, v) = integrate([1.0, 2.3], [0.0, 0.25]);
        assert!(p[1] < 2.5 && p[1] > 2.49);
        assert_eq!(v[1], 0.0);
        assert!(is_free_position(p[0], p[1]));
        // outer boundary
        let (p, _) = integrate([1.0, 1.0], [-0.25, -0.25]);
        assert!(p[0] > 0.5 && p[1] > 0.5 && p[0] < 0.8 && p[1] < 0.8);
    }
}
