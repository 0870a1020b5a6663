use serde::{Deserialize, Serialize};

/// Largest per-step effector displacement along either axis, board units.
pub const DELTA_MAX: f32 = 0.2;
pub const BLOCK_RADIUS: f32 = 0.045;
pub const EFFECTOR_RADIUS: f32 = 0.03;
pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const DEFAULT_HORIZON: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Star,
    Hexagon,
    Heart,
    Cube,
    Triangle,
    Square,
    Moon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Circle,
        Shape::Star,
        Shape::Hexagon,
        Shape::Heart,
        Shape::Cube,
        Shape::Triangle,
        Shape::Square,
        Shape::Moon,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Star => "star",
            Shape::Hexagon => "hexagon",
            Shape::Heart => "heart",
            Shape::Cube => "cube",
            Shape::Triangle => "triangle",
            Shape::Square => "square",
            Shape::Moon => "moon",
        }
    }

    /// Point-in-shape test in block-local coordinates scaled so the
    /// bounding circle has radius 1 (`y` up).
    pub fn contains(self, x: f32, y: f32) -> bool {
        let r = (x * x + y * y).sqrt();
        match self {
            Shape::Circle => r <= 1.0,
            Shape::Square => x.abs().max(y.abs()) <= 0.7,
            Shape::Cube => {
                // square with a notched top-right corner, reads as a shaded cube
                x.abs().max(y.abs()) <= 0.7 && !(x > 0.3 && y > 0.3)
            }
            Shape::Hexagon => {
                let (ax, ay) = (x.abs(), y.abs());
                ay <= 0.866 && ax * 0.866 + ay * 0.5 <= 0.866
            }
            Shape::Triangle => y >= -0.5 && y <= 1.0 - 1.732 * x.abs(),
            Shape::Star => {
                let theta = y.atan2(x) + std::f32::consts::FRAC_PI_2;
                let k = (theta * 5.0 / (2.0 * std::f32::consts::PI)).rem_euclid(1.0);
                let spike = (k - 0.5).abs() * 2.0; // 1 at spike tips, 0 between
                r <= 0.45 + 0.55 * spike
            }
            Shape::Heart => {
                let (hx, hy) = (x * 1.1, y * 1.1 + 0.15);
                let a = hx * hx + hy * hy - 0.6;
                a * a * a - hx * hx * hy * hy * hy <= 0.0
            }
            Shape::Moon => r <= 1.0 && ((x - 0.45).powi(2) + (y - 0.2).powi(2)).sqrt() > 0.8,
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.86, 0.12, 0.12],
            Color::Green => [0.15, 0.68, 0.22],
            Color::Blue => [0.14, 0.26, 0.88],
            Color::Yellow => [0.95, 0.84, 0.12],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub shape: Shape,
    pub color: Color,
    pub position: [f32; 2],
    pub radius: f32,
}

impl Block {
    pub fn name(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoardState {
    pub blocks: Vec<Block>,
    pub effector: [f32; 2],
}

impl BoardState {
    pub fn find(&self, color: Color, shape: Shape) -> Option<&Block> {
        self.blocks
            .iter()
            .find(|b| b.color == color && b.shape == shape)
    }

    /// Checks the board invariants: in-bounds positions, unique
    /// (shape, color) pairs and no overlapping blocks.
    pub fn validate(&self) -> Result<(), String> {
        let inb = |p: [f32; 2]| p.iter().all(|v| (-1.0..=1.0).contains(v));
        if !inb(self.effector) {
            return Err(format!("effector out of bounds: {:?}", self.effector));
        }
        for (i, a) in self.blocks.iter().enumerate() {
            if !inb(a.position) {
                return Err(format!("{} out of bounds: {:?}", a.name(), a.position));
            }
            for b in &self.blocks[i + 1..] {
                if a.shape == b.shape && a.color == b.color {
                    return Err(format!("duplicate block {}", a.name()));
                }
                if dist(a.position, b.position) <= a.radius + b.radius {
                    return Err(format!("{} overlaps {}", a.name(), b.name()));
                }
            }
        }
        Ok(())
    }
}

pub fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `H x W x 3` image, row-major, values in `[0, 1]`. Row 0 is the top edge
/// of the board (`y = +1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self {
            height,
            width,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub image: Image,
    pub effector_state: [f32; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub deltas: Vec<[f32; 2]>,
}

impl ActionChunk {
    pub fn zeros(horizon: usize) -> Self {
        Self {
            deltas: vec![[0.0; 2]; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.deltas.len()
    }

    pub fn flat(&self) -> Vec<f32> {
        self.deltas.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f32]) -> Self {
        Self {
            deltas: values.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        }
    }

    pub fn clamped(mut self) -> Self {
        for d in &mut self.deltas {
            for v in d.iter_mut() {
                *v = v.clamp(-DELTA_MAX, DELTA_MAX);
            }
        }
        self
    }
}

const BACKGROUND: [f32; 3] = [0.82, 0.80, 0.76];
const EFFECTOR_RGB: [f32; 3] = [0.08, 0.08, 0.08];
const SUPERSAMPLE: usize = 4;

fn board_to_pixel(p: f32, size: usize) -> f32 {
    (p + 1.0) * 0.5 * size as f32
}

/// Flat top-down raster of a board with anti-aliased (supersampled) blocks.
pub fn render(board: &BoardState, size: usize) -> Image {
    let mut img = Image::filled(size, size, BACKGROUND);
    let px_per_unit = size as f32 / 2.0;
    let mut paint =
        |center: [f32; 2], radius: f32, rgb: [f32; 3], inside: &dyn Fn(f32, f32) -> bool| {
            let cx = board_to_pixel(center[0], size);
            let cy = board_to_pixel(-center[1], size);
            let rp = radius * px_per_unit;
            let c0 = ((cx - rp).floor().max(0.0)) as usize;
            let c1 = ((cx + rp).ceil().min(size as f32)) as usize;
            let r0 = ((cy - rp).floor().max(0.0)) as usize;
            let r1 = ((cy + rp).ceil().min(size as f32)) as usize;
            for row in r0..r1 {
                for col in c0..c1 {
                    let mut hits = 0;
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let px = col as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                            let py = row as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                            let lx = (px - cx) / rp;
                            let ly = -(py - cy) / rp;
                            if inside(lx, ly) {
                                hits += 1;
                            }
                        }
                    }
                    if hits > 0 {
                        let a = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                        let i = (row * size + col) * 3;
                        for ch in 0..3 {
                            img.data[i + ch] = img.data[i + ch] * (1.0 - a) + rgb[ch] * a;
                        }
                    }
                }
            }
        };
    for b in &board.blocks {
        let shape = b.shape;
        paint(b.position, b.radius, b.color.rgb(), &move |x, y| {
            shape.contains(x, y)
        });
    }
    paint(board.effector, EFFECTOR_RADIUS, EFFECTOR_RGB, &|x, y| {
        let r2 = x * x + y * y;
        r2 <= 1.0
    });
    img
}

pub fn observe(board: &BoardState, size: usize) -> Observation {
    Observation {
        image: render(board, size),
        effector_state: board.effector,
    }
}
