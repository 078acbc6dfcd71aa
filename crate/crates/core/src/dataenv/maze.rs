use std::collections::VecDeque;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};

/// Distance kept from a wall after a blocked move.
const WALL_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MazeParams {
    cols: usize,
    rows: usize,
    seed: u64,
    #[serde(default = "default_goal_radius")]
    goal_radius: f64,
}

fn default_goal_radius() -> f64 {
    0.5
}

/// Perfect maze on a `cols x rows` grid of unit cells, carved by a seeded
/// depth-first search. The goal is the top-right cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "MazeParams", into = "MazeParams")]
pub struct MazeLayout {
    pub cols: usize,
    pub rows: usize,
    pub seed: u64,
    pub goal_radius: f64,
    open_right: Vec<bool>,
    open_up: Vec<bool>,
    /// `next_hop[goal * n + c]`: neighbor of `c` on a shortest route to `goal`.
    next_hop: Vec<usize>,
    /// `dist[goal * n + c]`: cell moves from `c` to `goal`.
    dist: Vec<usize>,
}

impl From<MazeParams> for MazeLayout {
    fn from(p: MazeParams) -> Self {
        let mut m = MazeLayout::new(p.cols, p.rows, p.seed);
        m.goal_radius = p.goal_radius;
        m
    }
}

impl From<MazeLayout> for MazeParams {
    fn from(m: MazeLayout) -> Self {
        MazeParams {
            cols: m.cols,
            rows: m.rows,
            seed: m.seed,
            goal_radius: m.goal_radius,
        }
    }
}

impl MazeLayout {
    pub fn new(cols: usize, rows: usize, seed: u64) -> Self {
        let n = cols * rows;
        let mut open_right = vec![false; n];
        let mut open_up = vec![false; n];
        let mut r = rng::seeded(seed);
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(&c) = stack.last() {
            let (x, y) = (c % cols, c / cols);
            let mut nbrs = Vec::new();
            if x + 1 < cols && !seen[c + 1] {
                nbrs.push(c + 1);
            }
            if x > 0 && !seen[c - 1] {
                nbrs.push(c - 1);
            }
            if y + 1 < rows && !seen[c + cols] {
                nbrs.push(c + cols);
            }
            if y > 0 && !seen[c - cols] {
                nbrs.push(c - cols);
            }
            match nbrs.choose(&mut r) {
                None => {
                    stack.pop();
                }
                Some(&next) => {
                    let (lo, hi) = (c.min(next), c.max(next));
                    if hi == lo + 1 {
                        open_right[lo] = true;
                    } else {
                        open_up[lo] = true;
                    }
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
        let mut m = MazeLayout {
            cols,
            rows,
            seed,
            goal_radius: default_goal_radius(),
            open_right,
            open_up,
            next_hop: vec![0; n * n],
            dist: vec![usize::MAX; n * n],
        };
        for g in 0..n {
            m.route_to(g);
        }
        m
    }

    fn goal_cell(&self) -> usize {
        self.cols * self.rows - 1
    }

    pub fn goal_position(&self) -> [f64; 2] {
        self.center(self.goal_cell())
    }

    pub fn center(&self, c: usize) -> [f64; 2] {
        [(c % self.cols) as f64 + 0.5, (c / self.cols) as f64 + 0.5]
    }

    fn neighbors(&self, c: usize) -> Vec<usize> {
        let (x, y) = (c % self.cols, c / self.cols);
        let mut out = Vec::with_capacity(4);
        if x + 1 < self.cols && self.open_right[c] {
            out.push(c + 1);
        }
        if x > 0 && self.open_right[c - 1] {
            out.push(c - 1);
        }
        if y + 1 < self.rows && self.open_up[c] {
            out.push(c + self.cols);
        }
        if y > 0 && self.open_up[c - self.cols] {
            out.push(c - self.cols);
        }
        out
    }

    fn route_to(&mut self, goal: usize) {
        let n = self.n_cells();
        let base = goal * n;
        self.dist[base + goal] = 0;
        self.next_hop[base + goal] = goal;
        let mut q = VecDeque::from([goal]);
        while let Some(c) = q.pop_front() {
            for nb in self.neighbors(c) {
                if self.dist[base + nb] == usize::MAX {
                    self.dist[base + nb] = self.dist[base + c] + 1;
                    self.next_hop[base + nb] = c;
                    q.push_back(nb);
                }
            }
        }
    }

    pub fn n_cells(&self) -> usize {
        self.cols * self.rows
    }

    /// Cell moves between the cells containing `from` and `to`.
    pub fn cell_distance(&self, from: &[f64], to: &[f64]) -> usize {
        self.dist[self.cell_of(to) * self.n_cells() + self.cell_of(from)]
    }

    /// Longest shortest route between any two cells.
    pub fn diameter(&self) -> usize {
        *self.dist.iter().max().unwrap_or(&0)
    }

    fn cell_coords(&self, pos: &[f64]) -> (usize, usize) {
        let cx = (pos[0].floor().max(0.0) as usize).min(self.cols - 1);
        let cy = (pos[1].floor().max(0.0) as usize).min(self.rows - 1);
        (cx, cy)
    }

    pub fn cell_of(&self, pos: &[f64]) -> usize {
        let (x, y) = self.cell_coords(pos);
        y * self.cols + x
    }

    fn can_move_x(&self, cx: usize, cy: usize, right: bool) -> bool {
        let c = cy * self.cols + cx;
        if right {
            cx + 1 < self.cols && self.open_right[c]
        } else {
            cx > 0 && self.open_right[c - 1]
        }
    }

    fn can_move_y(&self, cx: usize, cy: usize, up: bool) -> bool {
        let c = cy * self.cols + cx;
        if up {
            cy + 1 < self.rows && self.open_up[c]
        } else {
            cy > 0 && self.open_up[c - self.cols]
        }
    }

    /// Applies walls to a proposed move, axis by axis. Moves are assumed
    /// shorter than one cell.
    pub fn resolve_motion(&self, from: &[f64], proposed: &[f64]) -> Vec<f64> {
        let (cx, cy) = self.cell_coords(from);
        let mut x = proposed[0];
        if x.floor() > cx as f64 && !self.can_move_x(cx, cy, true) {
            x = (cx + 1) as f64 - WALL_MARGIN;
        } else if x.floor() < cx as f64 && !self.can_move_x(cx, cy, false) {
            x = cx as f64 + WALL_MARGIN;
        }
        let (cx2, _) = self.cell_coords(&[x, from[1]]);
        let mut y = proposed[1];
        if y.floor() > cy as f64 && !self.can_move_y(cx2, cy, true) {
            y = (cy + 1) as f64 - WALL_MARGIN;
        } else if y.floor() < cy as f64 && !self.can_move_y(cx2, cy, false) {
            y = cy as f64 + WALL_MARGIN;
        }
        vec![x, y]
    }

    pub fn goal_reward(&self, pos: &[f64]) -> f64 {
        crate::reward::sparse_goal_reward(pos, &self.goal_position(), self.goal_radius)
    }

    /// Center of the next cell on a shortest route toward `target`, or
    /// `target` itself once inside its cell.
    pub fn next_waypoint(&self, pos: &[f64], target: &[f64]) -> [f64; 2] {
        let (c, g) = (self.cell_of(pos), self.cell_of(target));
        if c == g {
            [target[0], target[1]]
        } else {
            self.center(self.next_hop[g * self.n_cells() + c])
        }
    }

    /// Center of a uniformly drawn cell.
    pub fn random_cell_center(&self, rng: &mut Rng) -> [f64; 2] {
        self.center(rng.random_range(0..self.n_cells()))
    }

    /// Uniform non-goal cell, jittered around its center.
    pub fn random_start(&self, rng: &mut Rng) -> Vec<f64> {
        let c = rng.random_range(0..self.cols * self.rows - 1);
        let [x, y] = self.center(c);
        vec![
            x + rng.random_range(-0.2..0.2),
            y + rng.random_range(-0.2..0.2),
        ]
    }
}
