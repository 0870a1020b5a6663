//! Scripted episode generation.
//!
//! Each episode places 4-8 blocks at random, assigns every block a goal slot
//! for the task family and pushes them one at a time: the effector pursues a
//! waypoint behind the block, then drives it to its slot. Blocks in the way
//! are shoved aside. Each per-block push is one annotated segment.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{
    dist, Block, BoardState, Color, Shape, BLOCK_RADIUS, DELTA_MAX, EFFECTOR_RADIUS,
};
use crate::error::{CoreError, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    LineVertical,
    LineHorizontal,
    CornerGather,
    CenterGather,
    ShapeParallelogram,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 5] = [
        TaskFamily::LineVertical,
        TaskFamily::LineHorizontal,
        TaskFamily::CornerGather,
        TaskFamily::CenterGather,
        TaskFamily::ShapeParallelogram,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::LineVertical => "line_vertical",
            TaskFamily::LineHorizontal => "line_horizontal",
            TaskFamily::CornerGather => "corner_gather",
            TaskFamily::CenterGather => "center_gather",
            TaskFamily::ShapeParallelogram => "shape_parallelogram",
        }
    }

    pub fn high_level(self) -> &'static str {
        match self {
            TaskFamily::LineVertical => "put all the blocks in a vertical line",
            TaskFamily::LineHorizontal => "put all the blocks in a horizontal line",
            TaskFamily::CornerGather => "put all the blocks in the bottom left corner",
            TaskFamily::CenterGather => "put all the blocks in the center",
            TaskFamily::ShapeParallelogram => {
                "make a \"parallelogram\" shape out of all the blocks"
            }
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown task family `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub low_level: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub seed: u64,
    pub task_family: TaskFamily,
    pub high_level: String,
    /// `actions.len() + 1` board states; `frames[t]` precedes `actions[t]`.
    pub frames: Vec<BoardState>,
    pub actions: Vec<[f32; 2]>,
    pub segments: Vec<Segment>,
}

impl Episode {
    pub fn segment_at(&self, step: usize) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| s.start <= step && step < s.end)
    }
}

pub const RELATIONS: [&str; 6] = [
    "near to",
    "above",
    "below",
    "left of",
    "right of",
    "diagonal to",
];
pub const REGIONS: [&str; 9] = [
    "top",
    "bottom",
    "left",
    "right",
    "top left corner",
    "top right corner",
    "bottom left corner",
    "bottom right corner",
    "center",
];

pub const CORNER: [f32; 2] = [-1.0, -1.0];

const PURSUIT_GAIN: f32 = 0.6;
const SNAP_DISTANCE: f32 = 0.05;
const ARRIVE_TOL: f32 = 0.004;
const SLOT_TOL: f32 = 0.03;
const MAX_SEGMENT_STEPS: usize = 60;
const MAX_PASSES: usize = 3;
const SPAWN_LIMIT: f32 = 0.85;

fn clamp_step(v: [f32; 2]) -> [f32; 2] {
    [
        v[0].clamp(-DELTA_MAX, DELTA_MAX),
        v[1].clamp(-DELTA_MAX, DELTA_MAX),
    ]
}

fn sub(a: [f32; 2], b: [f32; 2]) -> [f32; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn add(a: [f32; 2], b: [f32; 2]) -> [f32; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

fn scale(a: [f32; 2], s: f32) -> [f32; 2] {
    [a[0] * s, a[1] * s]
}

fn norm(a: [f32; 2]) -> f32 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

/// Hexagonally packed slots nearest to `center`, restricted to `|x|,|y| <= limit`.
fn packed_slots(center: [f32; 2], n: usize, spacing: f32, limit: f32) -> Vec<[f32; 2]> {
    let mut pts = Vec::new();
    let row_h = spacing * 3f32.sqrt() / 2.0;
    let span = 12i32;
    for j in -span..=span {
        for i in -span..=span {
            let x = center[0]
                + i as f32 * spacing
                + if j.rem_euclid(2) == 1 {
                    spacing / 2.0
                } else {
                    0.0
                };
            let y = center[1] + j as f32 * row_h;
            if x.abs() <= limit && y.abs() <= limit {
                pts.push([x, y]);
            }
        }
    }
    pts.sort_by(|a, b| {
        dist(*a, center)
            .total_cmp(&dist(*b, center))
            .then(a[1].total_cmp(&b[1]))
            .then(a[0].total_cmp(&b[0]))
    });
    pts.truncate(n);
    pts
}

/// Goal slot for each block, in push order (block index, slot).
fn assign_slots(family: TaskFamily, blocks: &[Block]) -> Vec<(usize, [f32; 2])> {
    let n = blocks.len();
    let spacing = 2.0 * BLOCK_RADIUS + 0.016;
    match family {
        TaskFamily::LineVertical | TaskFamily::LineHorizontal => {
            let axis = if family == TaskFamily::LineVertical {
                1
            } else {
                0
            };
            let gap = 0.22;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| blocks[a].position[axis].total_cmp(&blocks[b].position[axis]));
            let offset = -(n as f32 - 1.0) * gap / 2.0;
            let mut out: Vec<(usize, [f32; 2])> = order
                .iter()
                .enumerate()
                .map(|(k, &bi)| {
                    let along = offset + k as f32 * gap;
                    let slot = if axis == 1 {
                        [0.0, along]
                    } else {
                        [along, 0.0]
                    };
                    (bi, slot)
                })
                .collect();
            // blocks already closest to the line go first
            out.sort_by(|a, b| {
                let da = dist(blocks[a.0].position, a.1);
                let db = dist(blocks[b.0].position, b.1);
                da.total_cmp(&db)
            });
            out
        }
        TaskFamily::CornerGather | TaskFamily::CenterGather => {
            let (center, limit) = if family == TaskFamily::CornerGather {
                (CORNER, 1.0 - 0.6 * BLOCK_RADIUS)
            } else {
                ([0.0, 0.0], 0.9)
            };
            // nearest-to-goal slots fill first with the nearest free block
            let slots = if family == TaskFamily::CornerGather {
                packed_slots(
                    [-1.0 + 0.6 * BLOCK_RADIUS, -1.0 + 0.6 * BLOCK_RADIUS],
                    n,
                    spacing,
                    limit,
                )
            } else {
                packed_slots(center, n, spacing, limit)
            };
            greedy_match(blocks, &slots)
        }
        TaskFamily::ShapeParallelogram => {
            let corners = [[-0.45f32, -0.3f32], [0.25, -0.3], [0.45, 0.3], [-0.25, 0.3]];
            let perimeter: Vec<[f32; 2]> = (0..n)
                .map(|k| {
                    let t = k as f32 / n as f32 * 4.0;
                    let e = t.floor() as usize % 4;
                    let f = t - t.floor();
                    let a = corners[e];
                    let b = corners[(e + 1) % 4];
                    [a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f]
                })
                .collect();
            greedy_match(blocks, &perimeter)
        }
    }
}

fn greedy_match(blocks: &[Block], slots: &[[f32; 2]]) -> Vec<(usize, [f32; 2])> {
    let mut free: Vec<usize> = (0..blocks.len()).collect();
    let mut out = Vec::with_capacity(slots.len());
    for &slot in slots {
        let (k, _) = free
            .iter()
            .enumerate()
            .min_by(|a, b| {
                dist(blocks[*a.1].position, slot).total_cmp(&dist(blocks[*b.1].position, slot))
            })
            .expect("as many blocks as slots");
        out.push((free.remove(k), slot));
    }
    out
}

fn region_of(p: [f32; 2]) -> &'static str {
    let (x, y) = (p[0], p[1]);
    if x.abs() > 0.4 && y.abs() > 0.4 {
        match (x > 0.0, y > 0.0) {
            (false, true) => "top left corner",
            (true, true) => "top right corner",
            (false, false) => "bottom left corner",
            (true, false) => "bottom right corner",
        }
    } else if x.abs() < 0.3 && y.abs() < 0.3 {
        "center"
    } else if y.abs() >= x.abs() {
        if y > 0.0 {
            "top"
        } else {
            "bottom"
        }
    } else if x > 0.0 {
        "right"
    } else {
        "left"
    }
}

/// Spatial relation of `target` relative to `anchor`.
fn relation_of(target: [f32; 2], anchor: [f32; 2]) -> &'static str {
    let v = sub(target, anchor);
    if norm(v) < 0.16 {
        return "near to";
    }
    let angle = v[1].atan2(v[0]).to_degrees().rem_euclid(90.0);
    if (angle - 45.0).abs() < 20.0 {
        return "diagonal to";
    }
    if v[1].abs() > v[0].abs() {
        if v[1] > 0.0 {
            "above"
        } else {
            "below"
        }
    } else if v[0] > 0.0 {
        "right of"
    } else {
        "left of"
    }
}

/// Caption for pushing `blocks[moved]` to `slot`, given the board at the
/// start of the segment.
fn caption(board: &BoardState, moved: usize, slot: [f32; 2]) -> String {
    let b = &board.blocks[moved];
    let anchor = board
        .blocks
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != moved)
        .map(|(_, o)| (o, dist(o.position, slot)))
        .filter(|(_, d)| *d < 0.32)
        .min_by(|a, c| a.1.total_cmp(&c.1));
    match anchor {
        Some((o, _)) => format!(
            "move the {} {} the {}",
            b.name(),
            relation_of(slot, o.position),
            o.name()
        ),
        None => format!("push the {} towards the {}", b.name(), region_of(slot)),
    }
}

/// Shoves blocks out of overlap, never moving `pinned`.
fn resolve_overlaps(board: &mut BoardState, pinned: usize) {
    let min_gap = 2.0 * BLOCK_RADIUS + 2e-3;
    for _ in 0..12 {
        let mut moved = false;
        for i in 0..board.blocks.len() {
            for j in 0..board.blocks.len() {
                if i == j || j == pinned {
                    continue;
                }
                let (pi, pj) = (board.blocks[i].position, board.blocks[j].position);
                let d = dist(pi, pj);
                if d < min_gap {
                    let dir = if d > 1e-6 {
                        scale(sub(pj, pi), 1.0 / d)
                    } else {
                        [1.0, 0.0]
                    };
                    let push = if i == pinned {
                        min_gap - d
                    } else {
                        (min_gap - d) / 2.0 + 1e-4
                    };
                    let np = add(pj, scale(dir, push));
                    board.blocks[j].position = [np[0].clamp(-1.0, 1.0), np[1].clamp(-1.0, 1.0)];
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
}

struct Recorder {
    frames: Vec<BoardState>,
    actions: Vec<[f32; 2]>,
}

impl Recorder {
    fn board(&self) -> &BoardState {
        self.frames.last().expect("initial frame")
    }

    /// Moves the effector toward `target` with proportional pursuit; when
    /// `carry` is set the block rides ahead of the effector along `dir`.
    fn pursue(&mut self, target: [f32; 2], carry: Option<(usize, [f32; 2])>) {
        for _ in 0..MAX_SEGMENT_STEPS {
            let mut board = self.board().clone();
            let err = sub(target, board.effector);
            if norm(err) < ARRIVE_TOL {
                break;
            }
            let raw = if norm(err) <= SNAP_DISTANCE {
                err
            } else {
                scale(err, PURSUIT_GAIN)
            };
            let mut step = clamp_step(raw);
            let next = add(board.effector, step);
            let next = [next[0].clamp(-1.0, 1.0), next[1].clamp(-1.0, 1.0)];
            step = sub(next, board.effector);
            board.effector = next;
            if let Some((bi, dir)) = carry {
                let contact = BLOCK_RADIUS + EFFECTOR_RADIUS;
                let p = add(next, scale(dir, contact));
                board.blocks[bi].position = [p[0].clamp(-1.0, 1.0), p[1].clamp(-1.0, 1.0)];
                resolve_overlaps(&mut board, bi);
            }
            self.actions.push(step);
            self.frames.push(board);
        }
    }
}

fn initial_board(rng: &mut ChaCha8Rng) -> BoardState {
    let n = rng.random_range(4..=8);
    let mut kinds: Vec<(Color, Shape)> = Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
        .collect();
    kinds.shuffle(rng);
    let mut blocks: Vec<Block> = Vec::with_capacity(n);
    for &(color, shape) in kinds.iter().take(n) {
        loop {
            let p = [
                rng.random_range(-SPAWN_LIMIT..SPAWN_LIMIT),
                rng.random_range(-SPAWN_LIMIT..SPAWN_LIMIT),
            ];
            if blocks
                .iter()
                .all(|b| dist(b.position, p) > 4.0 * BLOCK_RADIUS)
            {
                blocks.push(Block {
                    shape,
                    color,
                    position: p,
                    radius: BLOCK_RADIUS,
                });
                break;
            }
        }
    }
    let effector = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
    BoardState { blocks, effector }
}

/// Generates one episode. Identical `(seed, family)` gives an identical episode.
pub fn generate_episode(seed: u64, family: TaskFamily) -> Episode {
    let mut rng = rng::stream(seed, family.name());
    let board = initial_board(&mut rng);
    let mut rec = Recorder {
        frames: vec![board],
        actions: Vec::new(),
    };
    let mut segments = Vec::new();
    for _pass in 0..MAX_PASSES {
        let plan = assign_slots(family, &rec.board().blocks);
        let mut any = false;
        for (bi, slot) in plan {
            let pos = rec.board().blocks[bi].position;
            if dist(pos, slot) <= SLOT_TOL {
                continue;
            }
            any = true;
            let start = rec.actions.len();
            let text = caption(rec.board(), bi, slot);
            let dir = scale(sub(slot, pos), 1.0 / dist(slot, pos));
            let contact = BLOCK_RADIUS + EFFECTOR_RADIUS;
            let behind = sub(pos, scale(dir, contact + 0.02));
            let behind = [behind[0].clamp(-1.0, 1.0), behind[1].clamp(-1.0, 1.0)];
            rec.pursue(behind, None);
            // close the gap to contact, then push through to the slot
            let contact_pt = sub(rec.board().blocks[bi].position, scale(dir, contact));
            rec.pursue(contact_pt, None);
            rec.pursue(sub(slot, scale(dir, contact)), Some((bi, dir)));
            let end = rec.actions.len();
            if end > start {
                segments.push(Segment {
                    start,
                    end,
                    low_level: text,
                });
            }
        }
        if !any {
            break;
        }
    }
    Episode {
        id: seed,
        seed,
        task_family: family,
        high_level: family.high_level().to_string(),
        frames: rec.frames,
        actions: rec.actions,
        segments,
    }
}

/// Final-frame goal predicate used by tests and dataset sanity checks.
pub fn goal_reached(ep: &Episode, tol: f32) -> bool {
    let last = ep.frames.last().expect("frames");
    match ep.task_family {
        TaskFamily::CornerGather => last.blocks.iter().all(|b| dist(b.position, CORNER) <= tol),
        TaskFamily::CenterGather => last
            .blocks
            .iter()
            .all(|b| dist(b.position, [0.0, 0.0]) <= tol),
        TaskFamily::LineVertical => last.blocks.iter().all(|b| b.position[0].abs() <= tol),
        TaskFamily::LineHorizontal => last.blocks.iter().all(|b| b.position[1].abs() <= tol),
        TaskFamily::ShapeParallelogram => true,
    }
}
