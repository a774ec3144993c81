//! Synthetic captioned scenes: up to two flat shapes on a 3x3 grid.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

pub const GRID: usize = 3;
/// Half-extent of each size class as a fraction of the image side.
pub const SMALL_HALF: f64 = 0.09;
pub const LARGE_HALF: f64 = 0.14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
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

    /// Canonical RGB in `[-1, 1]`.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }
}

impl Size {
    pub fn half_extent(self) -> f64 {
        match self {
            Size::Small => SMALL_HALF,
            Size::Large => LARGE_HALF,
        }
    }
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Whether `a` stands in this relation to `b`, by cell.
    pub fn holds(self, a: Cell, b: Cell) -> bool {
        match self {
            Relation::LeftOf => a.row == b.row && a.col < b.col,
            Relation::RightOf => a.row == b.row && a.col > b.col,
            Relation::Above => a.col == b.col && a.row < b.row,
            Relation::Below => a.col == b.col && a.row > b.row,
        }
    }
}

/// Grid cell; row 0 is the top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    /// Centre in unit-square coordinates, `y` pointing down.
    pub fn center(self) -> (f64, f64) {
        (
            (self.col as f64 + 0.5) / GRID as f64,
            (self.row as f64 + 0.5) / GRID as f64,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub cell: Cell,
    pub size: Size,
}

/// Ground truth for one image. With two objects, `relation` states how
/// `objects[0]` sits relative to `objects[1]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub relation: Option<Relation>,
}

impl SceneSpec {
    /// Structural validity: 0..=2 objects in distinct cells, a relation iff
    /// there are two objects, and that relation true of the cells.
    pub fn is_valid(&self) -> bool {
        let in_grid = self.objects.iter().all(|o| o.cell.row < GRID && o.cell.col < GRID);
        in_grid
            && match (self.objects.as_slice(), self.relation) {
                ([], None) | ([_], None) => true,
                ([a, b], Some(r)) => a.cell != b.cell && r.holds(a.cell, b.cell),
                _ => false,
            }
    }

    /// Representation recoverable from pixels alone: two-object scenes are
    /// rewritten as `LeftOf` or `Above` with the left/top object first.
    pub fn canonical(&self) -> SceneSpec {
        match (self.objects.as_slice(), self.relation) {
            ([a, b], Some(Relation::RightOf)) => SceneSpec {
                objects: vec![*b, *a],
                relation: Some(Relation::LeftOf),
            },
            ([a, b], Some(Relation::Below)) => SceneSpec {
                objects: vec![*b, *a],
                relation: Some(Relation::Above),
            },
            _ => self.clone(),
        }
    }

    pub fn caption(&self) -> String {
        let np = |o: &SceneObject| format!("a {} {}", o.color.word(), o.shape.word());
        match (self.objects.as_slice(), self.relation) {
            ([], _) => String::new(),
            ([a], _) => np(a),
            ([a, b], Some(r)) => format!("{} {} {}", np(a), r.phrase(), np(b)),
            ([a, ..], _) => np(a),
        }
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.caption())
    }
}

/// What a caption commits to: attributes and relation, not cells or sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTarget {
    pub objects: Vec<(Color, Shape)>,
    pub relation: Option<Relation>,
}

/// Parses the caption grammar; `None` for anything outside it.
pub fn parse_caption(caption: &str) -> Option<PromptTarget> {
    let words: Vec<String> = caption.split_whitespace().map(str::to_lowercase).collect();
    let words: Vec<&str> = words.iter().map(String::as_str).collect();
    let np = |w: &[&str]| -> Option<(Color, Shape)> {
        match w {
            ["a", c, s] => Some((
                *Color::ALL.iter().find(|x| x.word() == *c)?,
                *Shape::ALL.iter().find(|x| x.word() == *s)?,
            )),
            _ => None,
        }
    };
    match words.len() {
        3 => Some(PromptTarget {
            objects: vec![np(&words)?],
            relation: None,
        }),
        7 | 8 => {
            let (rel, rest) = match &words[3..words.len() - 3] {
                ["left", "of"] => (Relation::LeftOf, 5),
                ["right", "of"] => (Relation::RightOf, 5),
                ["above"] => (Relation::Above, 4),
                ["below"] => (Relation::Below, 4),
                _ => return None,
            };
            Some(PromptTarget {
                objects: vec![np(&words[..3])?, np(&words[rest..])?],
                relation: Some(rel),
            })
        }
        _ => None,
    }
}

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

fn random_object(rng: &mut Rng, cell: Cell) -> SceneObject {
    SceneObject {
        shape: pick(rng, &Shape::ALL),
        color: pick(rng, &Color::ALL),
        cell,
        size: pick(rng, &[Size::Small, Size::Large]),
    }
}

/// A single-object scene.
pub fn generate_single(rng: &mut Rng) -> SceneSpec {
    let cell = Cell {
        row: rng.random_range(0..GRID),
        col: rng.random_range(0..GRID),
    };
    SceneSpec {
        objects: vec![random_object(rng, cell)],
        relation: None,
    }
}

/// A two-object scene with a uniformly drawn relation.
pub fn generate_pair(rng: &mut Rng) -> SceneSpec {
    let relation = pick(rng, &Relation::ALL);
    let line = rng.random_range(0..GRID);
    let i = rng.random_range(0..GRID);
    let mut j = rng.random_range(0..GRID - 1);
    if j >= i {
        j += 1;
    }
    // `lo` is the smaller index along the relation axis.
    let (lo, hi) = (i.min(j), i.max(j));
    let cell = |k: usize| match relation {
        Relation::LeftOf | Relation::RightOf => Cell { row: line, col: k },
        Relation::Above | Relation::Below => Cell { row: k, col: line },
    };
    let (first, second) = match relation {
        Relation::LeftOf | Relation::Above => (cell(lo), cell(hi)),
        Relation::RightOf | Relation::Below => (cell(hi), cell(lo)),
    };
    let a = random_object(rng, first);
    let b = random_object(rng, second);
    SceneSpec {
        objects: vec![a, b],
        relation: Some(relation),
    }
}

/// One or two objects with equal probability; returns the scene and its caption.
pub fn generate_scene(rng: &mut Rng) -> (SceneSpec, String) {
    let spec = if rng.random_bool(0.5) {
        generate_single(rng)
    } else {
        generate_pair(rng)
    };
    let caption = spec.caption();
    (spec, caption)
}

fn covers(o: &SceneObject, u: f64, v: f64) -> bool {
    let (cx, cy) = o.cell.center();
    let s = o.size.half_extent();
    let (dx, dy) = (u - cx, v - cy);
    match o.shape {
        Shape::Square => dx.abs() <= s && dy.abs() <= s,
        Shape::Circle => dx * dx + dy * dy <= s * s,
        // Apex up, base at dy = s.
        Shape::Triangle => dy.abs() <= s && dx.abs() <= (dy + s) / 2.0,
    }
}

/// Rasterises `spec` to a `3 x R x R` channel-major buffer in `[-1, 1]`.
/// Background is 0; each pixel is tested at its centre, no anti-aliasing.
pub fn render(spec: &SceneSpec, resolution: usize) -> Vec<f32> {
    let r = resolution;
    let mut img = vec![0f32; 3 * r * r];
    for y in 0..r {
        let v = (y as f64 + 0.5) / r as f64;
        for x in 0..r {
            let u = (x as f64 + 0.5) / r as f64;
            if let Some(o) = spec.objects.iter().find(|o| covers(o, u, v)) {
                let rgb = o.color.rgb();
                for c in 0..3 {
                    img[c * r * r + y * r + x] = rgb[c] as f32;
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::text::Vocabulary;

    #[test]
    fn golden_seed_zero() {
        let (spec, caption) = generate_scene(&mut rng::seeded(0));
        assert_eq!(caption, GOLDEN_CAPTION);
        assert!(spec.is_valid());
        let cell = |row, col| Cell { row, col };
        assert_eq!(spec.objects[0].cell, cell(1, 1));
        assert_eq!(spec.objects[0].size, Size::Small);
        assert_eq!(spec.objects[1].cell, cell(2, 1));
        assert_eq!(spec.objects[1].size, Size::Large);
    }

    const GOLDEN_CAPTION: &str = "a red square above a blue triangle";

    #[test]
    fn generated_scenes_are_valid_and_in_vocabulary() {
        let vocab = Vocabulary::builtin();
        let mut r = rng::seeded(7);
        for _ in 0..2000 {
            let (spec, caption) = generate_scene(&mut r);
            assert!(spec.is_valid(), "{spec:?}");
            for w in caption.split_whitespace() {
                assert!(vocab.contains(w), "{w}");
            }
            let target = parse_caption(&caption).unwrap();
            assert_eq!(target.objects.len(), spec.objects.len());
            assert_eq!(target.relation, spec.relation);
        }
    }

    #[test]
    fn objects_never_touch() {
        // Two large shapes in adjacent cells keep a gap.
        assert!(2.0 * LARGE_HALF < 1.0 / GRID as f64);
    }

    #[test]
    fn render_is_deterministic_and_empty_scene_is_gray() {
        let spec = generate_pair(&mut rng::seeded(3));
        assert_eq!(render(&spec, 32), render(&spec, 32));
        let empty = SceneSpec {
            objects: vec![],
            relation: None,
        };
        assert!(render(&empty, 32).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn canonical_is_idempotent_and_valid() {
        let mut r = rng::seeded(5);
        for _ in 0..500 {
            let s = generate_pair(&mut r);
            let c = s.canonical();
            assert!(c.is_valid());
            assert_eq!(c.canonical(), c);
            assert!(matches!(c.relation, Some(Relation::LeftOf | Relation::Above)));
        }
    }

    #[test]
    fn parse_rejects_outside_grammar() {
        assert!(parse_caption("a purple circle").is_none());
        assert!(parse_caption("red circle").is_none());
        assert!(parse_caption("a red circle near a blue square").is_none());
        assert_eq!(
            parse_caption("a red circle right of a blue square").unwrap(),
            PromptTarget {
                objects: vec![(Color::Red, Shape::Circle), (Color::Blue, Shape::Square)],
                relation: Some(Relation::RightOf),
            }
        );
    }
}
