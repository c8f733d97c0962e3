//! Constraint layout. Ordering relations become per-axis precedence graphs
//! placed by longest path, so a part sits just past everything it must
//! follow. Parts unconstrained on an axis inherit the coordinate of a
//! related part, `is/middle/of` snaps centres, and the whole object is then
//! scaled and translated into the frame with seeded jitter.

use rand::Rng;

use super::{CategorySpec, Rel, SpatialRelation, SynthError};

/// Axis-aligned part box in image pixels, centre form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    X,
    Y,
}

/// `(before, after)` pairs along one axis.
fn precedence(rels: &[Rel], axis: Axis) -> Vec<(usize, usize)> {
    use SpatialRelation::*;
    rels.iter()
        .filter_map(|r| match (r.kind, axis) {
            (LeftOf, Axis::X) | (TopOf, Axis::Y) => Some((r.a, r.b)),
            (RightOf, Axis::X) | (BelowOf, Axis::Y) => Some((r.b, r.a)),
            _ => None,
        })
        .collect()
}

/// Kahn's algorithm, ties broken by part index. `None` on a cycle.
pub(crate) fn topo_order(n: usize, edges: &[(usize, usize)]) -> Option<Vec<usize>> {
    let mut indeg = vec![0usize; n];
    for &(_, b) in edges {
        indeg[b] += 1;
    }
    let mut order = Vec::with_capacity(n);
    let mut done = vec![false; n];
    while order.len() < n {
        let next = (0..n).find(|&v| !done[v] && indeg[v] == 0)?;
        done[next] = true;
        order.push(next);
        for &(a, b) in edges {
            if a == next {
                indeg[b] -= 1;
            }
        }
    }
    Some(order)
}

fn place_axis<R: Rng>(
    spec: &CategorySpec,
    rels: &[Rel],
    sizes: &[f64],
    axis: Axis,
    jitter: f64,
    rng: &mut R,
) -> Result<Vec<f64>, SynthError> {
    let n = sizes.len();
    let edges = precedence(rels, axis);
    let order = topo_order(n, &edges).ok_or_else(|| SynthError::UnsatisfiableLayout {
        category: spec.name.clone(),
        reason: format!("cyclic {} ordering", if axis == Axis::X { "horizontal" } else { "vertical" }),
    })?;
    let mut pos = vec![0.0; n];
    for &v in &order {
        for &(a, b) in edges.iter().filter(|e| e.1 == v) {
            let gap = rng.gen_range(-0.5..=0.8) * jitter;
            pos[v] = f64::max(pos[v], pos[a] + (sizes[a] + sizes[b]) / 2.0 + gap);
        }
    }

    let mut anchored: Vec<bool> = (0..n).map(|v| edges.iter().any(|&(a, b)| a == v || b == v)).collect();
    if !anchored.iter().any(|&x| x) {
        anchored[0] = true;
    }
    loop {
        let mut changed = false;
        for v in 0..n {
            if anchored[v] {
                continue;
            }
            let partner = rels.iter().find_map(|r| match (r.a == v, r.b == v) {
                (true, _) if anchored[r.b] => Some(r.b),
                (_, true) if anchored[r.a] => Some(r.a),
                _ => None,
            });
            if let Some(p) = partner {
                pos[v] = pos[p] + rng.gen_range(-1.0..=1.0) * jitter;
                anchored[v] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(pos)
}

/// Draw order from `is/front/of`: a part is drawn after everything it is in
/// front of.
pub(crate) fn draw_order(spec: &CategorySpec, rels: &[Rel]) -> Result<Vec<usize>, SynthError> {
    let edges: Vec<(usize, usize)> = rels
        .iter()
        .filter(|r| r.kind == SpatialRelation::FrontOf)
        .map(|r| (r.b, r.a))
        .collect();
    topo_order(spec.parts.len(), &edges).ok_or_else(|| SynthError::UnsatisfiableLayout {
        category: spec.name.clone(),
        reason: "cyclic front/back ordering".into(),
    })
}

/// Solves part positions for one image. `jitter` scales every random
/// perturbation; 0 gives the canonical centred layout.
pub fn solve_layout<R: Rng>(spec: &CategorySpec, resolution: usize, jitter: f64, rng: &mut R) -> Result<Vec<LayoutBox>, SynthError> {
    spec.validate()?;
    let rels = spec.resolved()?;
    draw_order(spec, &rels)?;
    let unit = resolution as f64 / 64.0;
    let global = 1.0 + rng.gen_range(-0.12..=0.12) * jitter;
    let (ws, hs): (Vec<f64>, Vec<f64>) = spec
        .parts
        .iter()
        .map(|p| {
            let s = global * (1.0 + rng.gen_range(-0.05..=0.05) * jitter) * unit;
            ((p.width * s).max(1.0), (p.height * s).max(1.0))
        })
        .unzip();
    let mut xs = place_axis(spec, &rels, &ws, Axis::X, jitter, rng)?;
    let mut ys = place_axis(spec, &rels, &hs, Axis::Y, jitter, rng)?;
    for r in rels.iter().filter(|r| r.kind == SpatialRelation::MiddleOf) {
        xs[r.a] = xs[r.b] + rng.gen_range(-1.0..=1.0) * jitter;
        ys[r.a] = ys[r.b] + rng.gen_range(-1.0..=1.0) * jitter;
    }

    let n = spec.parts.len();
    let min_x = (0..n).map(|i| xs[i] - ws[i] / 2.0).fold(f64::INFINITY, f64::min);
    let max_x = (0..n).map(|i| xs[i] + ws[i] / 2.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = (0..n).map(|i| ys[i] - hs[i] / 2.0).fold(f64::INFINITY, f64::min);
    let max_y = (0..n).map(|i| ys[i] + hs[i] / 2.0).fold(f64::NEG_INFINITY, f64::max);
    let frame = resolution as f64 - 2.0;
    let (width, height) = (max_x - min_x, max_y - min_y);
    if width > frame || height > frame {
        return Err(SynthError::UnsatisfiableLayout {
            category: spec.name.clone(),
            reason: format!("object {width:.1}×{height:.1} does not fit in {resolution}×{resolution}"),
        });
    }
    let max_shift = 8.0 * unit * jitter;
    let mut shift = |extent: f64| {
        let slack = ((frame - extent) / 2.0).min(max_shift);
        if slack > 0.0 {
            rng.gen_range(-slack..=slack)
        } else {
            0.0
        }
    };
    let centre = resolution as f64 / 2.0;
    let dx = centre + shift(width) - (min_x + max_x) / 2.0;
    let dy = centre + shift(height) - (min_y + max_y) / 2.0;
    Ok((0..n)
        .map(|i| LayoutBox {
            cx: xs[i] + dx,
            cy: ys[i] + dy,
            w: ws[i],
            h: hs[i],
        })
        .collect())
}
