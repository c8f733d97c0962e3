//! Rasterization and post-hoc relation checks on the stored boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::{draw_order, solve_layout};
use super::{CategorySpec, Shape, SpatialRelation, SynthError};

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartBox {
    pub part: String,
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl PartBox {
    fn centroid(&self) -> (f64, f64) {
        (f64::from(self.x0 + self.x1) / 2.0, f64::from(self.y0 + self.y1) / 2.0)
    }

    /// Chebyshev gap between boxes; 0 when touching or overlapping.
    pub fn gap(&self, other: &PartBox) -> i32 {
        [other.x0 - self.x1, self.x0 - other.x1, other.y0 - self.y1, self.y0 - other.y1, 0]
            .into_iter()
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub resolution: usize,
    /// Interleaved RGB rows.
    pub pixels: Vec<u8>,
    /// One box per part, in spec order.
    pub parts: Vec<PartBox>,
    /// Part indices in the order they were drawn.
    pub draw_order: Vec<usize>,
}

impl Rendered {
    /// Union of all part boxes.
    pub fn object_box(&self) -> [i32; 4] {
        union_box(&self.parts)
    }
}

pub(crate) fn union_box(parts: &[PartBox]) -> [i32; 4] {
    parts.iter().fold([i32::MAX, i32::MAX, i32::MIN, i32::MIN], |b, p| {
        [b[0].min(p.x0), b[1].min(p.y0), b[2].max(p.x1), b[3].max(p.y1)]
    })
}

/// Checks every spatial relation of `spec` against stored boxes.
pub fn verify_relations(spec: &CategorySpec, parts: &[PartBox], order: &[usize]) -> Result<(), String> {
    let rels = spec.resolved().map_err(|e| e.to_string())?;
    if parts.len() != spec.parts.len() {
        return Err(format!("{} boxes for {} parts", parts.len(), spec.parts.len()));
    }
    let rank = |v: usize| order.iter().position(|&u| u == v);
    for r in rels {
        let (a, b) = (&parts[r.a], &parts[r.b]);
        let (ca, cb) = (a.centroid(), b.centroid());
        let ok = match r.kind {
            SpatialRelation::TopOf => ca.1 < cb.1,
            SpatialRelation::BelowOf => ca.1 > cb.1,
            SpatialRelation::LeftOf => ca.0 < cb.0,
            SpatialRelation::RightOf => ca.0 > cb.0,
            SpatialRelation::AdjacentTo => a.gap(b) <= 2,
            SpatialRelation::MiddleOf => {
                f64::from(b.x0) <= ca.0 && ca.0 < f64::from(b.x1) && f64::from(b.y0) <= ca.1 && ca.1 < f64::from(b.y1)
            }
            SpatialRelation::FrontOf => matches!((rank(r.a), rank(r.b)), (Some(x), Some(y)) if x > y),
        };
        if !ok {
            return Err(format!("{} {:?} {} violated: {a:?} vs {b:?}", a.part, r.kind, b.part));
        }
    }
    Ok(())
}

fn inside(shape: Shape, b: &PartBox, px: f64, py: f64) -> bool {
    let (x0, y0) = (f64::from(b.x0), f64::from(b.y0));
    let (w, h) = (f64::from(b.x1 - b.x0), f64::from(b.y1 - b.y0));
    let (u, v) = ((px - x0) / w, (py - y0) / h);
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return false;
    }
    match shape {
        Shape::Rect => true,
        Shape::Ellipse => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        Shape::TriangleUp => (u - 0.5).abs() <= v / 2.0,
        Shape::TriangleDown => (u - 0.5).abs() <= (1.0 - v) / 2.0,
        Shape::TriangleLeft => (v - 0.5).abs() <= u / 2.0,
        Shape::TriangleRight => (v - 0.5).abs() <= (1.0 - u) / 2.0,
    }
}

const ATTEMPTS: usize = 32;
const BACKGROUND: f64 = 0.16;

/// Renders one image of `spec`. Layouts whose rounded boxes break a
/// relation are redrawn from the same stream.
pub fn render<R: Rng>(spec: &CategorySpec, resolution: usize, noise: f64, jitter: f64, rng: &mut R) -> Result<Rendered, SynthError> {
    let rels = spec.resolved()?;
    let order = draw_order(spec, &rels)?;
    let res = resolution as i32;
    let mut last = String::new();
    for _ in 0..ATTEMPTS {
        let layout = solve_layout(spec, resolution, jitter, rng)?;
        let parts: Vec<PartBox> = spec
            .parts
            .iter()
            .zip(&layout)
            .map(|(p, l)| {
                let x0 = ((l.cx - l.w / 2.0).round() as i32).clamp(0, res - 1);
                let y0 = ((l.cy - l.h / 2.0).round() as i32).clamp(0, res - 1);
                PartBox {
                    part: p.name.clone(),
                    x0,
                    y0,
                    x1: ((l.cx + l.w / 2.0).round() as i32).clamp(x0 + 1, res),
                    y1: ((l.cy + l.h / 2.0).round() as i32).clamp(y0 + 1, res),
                }
            })
            .collect();
        if let Err(e) = verify_relations(spec, &parts, &order) {
            last = e;
            continue;
        }
        let mut img = vec![0f64; resolution * resolution * 3];
        for v in img.iter_mut() {
            *v = BACKGROUND + rng.gen_range(-1.0..=1.0) * noise;
        }
        for &i in &order {
            let (p, b) = (&spec.parts[i], &parts[i]);
            let shade = 1.0 + rng.gen_range(-0.12..=0.12) * jitter;
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    if !inside(p.shape, b, f64::from(x) + 0.5, f64::from(y) + 0.5) {
                        continue;
                    }
                    let at = (y as usize * resolution + x as usize) * 3;
                    for c in 0..3 {
                        let base = f64::from(p.color[c]) / 255.0 * shade;
                        img[at + c] = base + rng.gen_range(-1.0..=1.0) * noise * 0.5;
                    }
                }
            }
        }
        let pixels = img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        return Ok(Rendered {
            resolution,
            pixels,
            parts,
            draw_order: order,
        });
    }
    Err(SynthError::UnsatisfiableLayout {
        category: spec.name.clone(),
        reason: format!("no valid placement in {ATTEMPTS} draws; last violation: {last}"),
    })
}
