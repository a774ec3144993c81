use std::collections::VecDeque;

use crate::train::scene::{Cell, Color, Relation, SceneObject, SceneSpec, Shape, Size, GRID};

/// A pixel is foreground when some channel deviates this far from gray.
pub const FOREGROUND_THRESHOLD: f32 = 0.5;
/// Bounding-box side, as a fraction of the image, separating small from large.
const SIZE_THRESHOLD: f64 = 0.22;
/// Fill ratio at or above which a blob is a square.
const SQUARE_FILL: f64 = 0.97;
/// Bottom-minus-top mass share at or above which a blob is a triangle.
const TRIANGLE_ASYMMETRY: f64 = 0.25;
/// Nearest colour must be this much closer than the runner-up.
const COLOR_MARGIN: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    NoObjects,
    TooManyObjects(usize),
    LowColorConfidence,
}

/// One segmented component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub object: SceneObject,
    /// Bounding-box centre in unit coordinates, `y` down.
    pub center: (f64, f64),
    pub pixels: usize,
    pub fill: f64,
    pub asymmetry: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classification {
    Scene {
        spec: SceneSpec,
        detections: Vec<Detection>,
    },
    Reject(RejectReason),
}

impl Classification {
    pub fn spec(&self) -> Option<&SceneSpec> {
        match self {
            Classification::Scene { spec, .. } => Some(spec),
            Classification::Reject(_) => None,
        }
    }
}

pub(crate) fn foreground(pixels: &[f32], res: usize) -> Vec<bool> {
    let plane = res * res;
    (0..plane)
        .map(|i| (0..3).any(|c| pixels[c * plane + i].abs() > FOREGROUND_THRESHOLD))
        .collect()
}

/// 4-connected components of `mask`, each as a list of pixel indices, in
/// raster order of their first pixel. Components below `min_size` are dropped.
pub(crate) fn components(mask: &[bool], res: usize, min_size: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (x, y) = (p % res, p / res);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < res {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - res);
            }
            if y + 1 < res {
                visit(p + res);
            }
        }
        if comp.len() >= min_size {
            out.push(comp);
        }
    }
    out
}

pub(crate) fn min_component(res: usize) -> usize {
    (res * res / 128).max(4)
}

fn nearest_color(rgb: [f64; 3]) -> Option<Color> {
    let mut d: Vec<(f64, Color)> = Color::ALL
        .iter()
        .map(|&c| {
            let t = c.rgb();
            let dist = (0..3).map(|i| (rgb[i] - t[i]).powi(2)).sum::<f64>().sqrt();
            (dist, c)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0));
    (d[0].0 < COLOR_MARGIN * d[1].0).then_some(d[0].1)
}

fn detect(pixels: &[f32], res: usize, comp: &[usize]) -> Option<Detection> {
    let plane = res * res;
    let mut rgb = [0.0f64; 3];
    let (mut x0, mut x1, mut y0, mut y1) = (res, 0, res, 0);
    for &p in comp {
        for (c, acc) in rgb.iter_mut().enumerate() {
            *acc += pixels[c * plane + p] as f64;
        }
        let (x, y) = (p % res, p / res);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let n = comp.len() as f64;
    let color = nearest_color(rgb.map(|v| v / n))?;

    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let fill = n / (w * h) as f64;
    // Mass share below the bbox midline minus mass share above it.
    let mid2 = y0 + y1;
    let (mut top, mut bottom) = (0usize, 0usize);
    for &p in comp {
        let y2 = 2 * (p / res);
        if y2 < mid2 {
            top += 1;
        } else if y2 > mid2 {
            bottom += 1;
        }
    }
    let asymmetry = (bottom as f64 - top as f64) / n;
    let shape = if asymmetry >= TRIANGLE_ASYMMETRY {
        Shape::Triangle
    } else if fill >= SQUARE_FILL {
        Shape::Square
    } else {
        Shape::Circle
    };
    let extent = w.max(h) as f64 / res as f64;
    let size = if extent > SIZE_THRESHOLD {
        Size::Large
    } else {
        Size::Small
    };
    let center = (
        (x0 + x1 + 1) as f64 / 2.0 / res as f64,
        (y0 + y1 + 1) as f64 / 2.0 / res as f64,
    );
    let to_cell = |u: f64| ((u * GRID as f64).floor() as usize).min(GRID - 1);
    Some(Detection {
        object: SceneObject {
            shape,
            color,
            cell: Cell {
                row: to_cell(center.1),
                col: to_cell(center.0),
            },
            size,
        },
        center,
        pixels: comp.len(),
        fill,
        asymmetry,
    })
}

/// Relation of `a` to `b` along the dominant axis of their centre offset.
pub fn relation_between(a: (f64, f64), b: (f64, f64)) -> Relation {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    if dx.abs() >= dy.abs() {
        if dx >= 0.0 {
            Relation::LeftOf
        } else {
            Relation::RightOf
        }
    } else if dy >= 0.0 {
        Relation::Above
    } else {
        Relation::Below
    }
}

/// Smallest resolution at which classification inverts rendering exactly.
pub const MIN_RESOLUTION: usize = 32;

/// Inverse renderer for `3 x R x R` images in `[-1, 1]`, `R >= 32`. The
/// returned spec is in canonical form (left/top object first).
pub fn classify_image(pixels: &[f32], resolution: usize) -> Classification {
    assert!(resolution >= MIN_RESOLUTION, "classification needs resolution >= {MIN_RESOLUTION}, got {resolution}");
    assert_eq!(pixels.len(), 3 * resolution * resolution, "image is not 3 x R x R");
    let mask = foreground(pixels, resolution);
    let comps = components(&mask, resolution, min_component(resolution));
    match comps.len() {
        0 => return Classification::Reject(RejectReason::NoObjects),
        1 | 2 => {}
        n => return Classification::Reject(RejectReason::TooManyObjects(n)),
    }
    let mut dets = Vec::with_capacity(2);
    for comp in &comps {
        match detect(pixels, resolution, comp) {
            Some(d) => dets.push(d),
            None => return Classification::Reject(RejectReason::LowColorConfidence),
        }
    }
    let relation = if dets.len() == 2 {
        let (dx, dy) = (
            dets[1].center.0 - dets[0].center.0,
            dets[1].center.1 - dets[0].center.1,
        );
        let horizontal = dx.abs() >= dy.abs();
        let key = |d: &Detection| if horizontal { d.center.0 } else { d.center.1 };
        if key(&dets[1]) < key(&dets[0]) {
            dets.swap(0, 1);
        }
        Some(if horizontal {
            Relation::LeftOf
        } else {
            Relation::Above
        })
    } else {
        None
    };
    Classification::Scene {
        spec: SceneSpec {
            objects: dets.iter().map(|d| d.object).collect(),
            relation,
        },
        detections: dets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::train::scene::{generate_pair, generate_scene, generate_single, render};

    #[test]
    fn every_single_object_configuration_round_trips() {
        for res in [32, 48, 64] {
            for shape in Shape::ALL {
                for color in Color::ALL {
                    for size in [Size::Small, Size::Large] {
                        for row in 0..GRID {
                            for col in 0..GRID {
                                let spec = SceneSpec {
                                    objects: vec![SceneObject {
                                        shape,
                                        color,
                                        cell: Cell { row, col },
                                        size,
                                    }],
                                    relation: None,
                                };
                                let got = classify_image(&render(&spec, res), res);
                                assert_eq!(got.spec(), Some(&spec), "res {res}: {spec:?} -> {got:?}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn random_scenes_round_trip_to_canonical() {
        let mut r = rng::seeded(11);
        for _ in 0..1000 {
            let (spec, _) = generate_scene(&mut r);
            let got = classify_image(&render(&spec, 32), 32);
            assert_eq!(got.spec(), Some(&spec.canonical()));
        }
    }

    #[test]
    fn gray_image_is_rejected() {
        let img = vec![0f32; 3 * 32 * 32];
        assert_eq!(
            classify_image(&img, 32),
            Classification::Reject(RejectReason::NoObjects)
        );
    }

    #[test]
    fn mid_gray_blob_has_low_color_confidence() {
        let mut img = vec![0f32; 3 * 32 * 32];
        for y in 10..20 {
            for x in 10..20 {
                for c in 0..3 {
                    img[c * 1024 + y * 32 + x] = 0.6;
                }
            }
        }
        assert_eq!(
            classify_image(&img, 32),
            Classification::Reject(RejectReason::LowColorConfidence)
        );
    }

    #[test]
    fn three_blobs_are_rejected() {
        let mut r = rng::seeded(2);
        let mut spec = generate_pair(&mut r);
        let taken: Vec<Cell> = spec.objects.iter().map(|o| o.cell).collect();
        let mut extra = generate_single(&mut r).objects[0];
        extra.cell = (0..GRID * GRID)
            .map(|k| Cell { row: k / GRID, col: k % GRID })
            .find(|c| !taken.contains(c))
            .unwrap();
        spec.objects.push(extra);
        assert_eq!(
            classify_image(&render(&spec, 32), 32),
            Classification::Reject(RejectReason::TooManyObjects(3))
        );
    }

    #[test]
    fn swapping_red_and_blue_channels_swaps_predictions() {
        let swap = |c: Color| match c {
            Color::Red => Color::Blue,
            Color::Blue => Color::Red,
            other => other,
        };
        let mut r = rng::seeded(8);
        let mut checked = 0;
        while checked < 200 {
            let (spec, _) = generate_scene(&mut r);
            // Yellow maps to cyan, which is not in the palette.
            if spec.objects.iter().any(|o| o.color == Color::Yellow) {
                continue;
            }
            let mut img = render(&spec, 32);
            let (red, blue) = img.split_at_mut(2 * 1024);
            red[..1024].swap_with_slice(&mut blue[..1024]);
            let got = classify_image(&img, 32);
            let want: Vec<Color> = spec.canonical().objects.iter().map(|o| swap(o.color)).collect();
            let have: Vec<Color> = got.spec().unwrap().objects.iter().map(|o| o.color).collect();
            assert_eq!(have, want);
            checked += 1;
        }
    }
}
