//! Procedural stroke glyphs: a fixed polyline family per class, rendered with
//! per-example affine jitter and anti-aliased strokes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Point = (f64, f64);

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, segments: usize) -> Vec<Point> {
    (0..=segments)
        .map(|i| {
            let t = i as f64 / segments as f64 * std::f64::consts::TAU;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Polylines (in the unit square, y pointing down) that define class `class`.
pub(crate) fn strokes(class: usize) -> Vec<Vec<Point>> {
    match class {
        0 => vec![ellipse(0.5, 0.5, 0.24, 0.34, 16)],
        1 => vec![
            vec![(0.5, 0.15), (0.5, 0.85)],
            vec![(0.34, 0.3), (0.5, 0.15)],
            vec![(0.36, 0.85), (0.64, 0.85)],
        ],
        2 => vec![vec![
            (0.25, 0.3),
            (0.4, 0.15),
            (0.64, 0.15),
            (0.75, 0.3),
            (0.7, 0.46),
            (0.25, 0.85),
            (0.77, 0.85),
        ]],
        3 => vec![vec![
            (0.25, 0.15),
            (0.72, 0.15),
            (0.46, 0.45),
            (0.7, 0.58),
            (0.68, 0.8),
            (0.46, 0.88),
            (0.25, 0.8),
        ]],
        4 => vec![vec![(0.62, 0.86), (0.62, 0.14), (0.2, 0.62), (0.82, 0.62)]],
        5 => vec![vec![
            (0.75, 0.15),
            (0.3, 0.15),
            (0.28, 0.46),
            (0.6, 0.44),
            (0.73, 0.62),
            (0.65, 0.83),
            (0.28, 0.85),
        ]],
        6 => vec![vec![
            (0.66, 0.14),
            (0.36, 0.38),
            (0.27, 0.7),
            (0.44, 0.87),
            (0.69, 0.76),
            (0.66, 0.55),
            (0.3, 0.58),
        ]],
        7 => vec![vec![(0.24, 0.15), (0.76, 0.15), (0.42, 0.86)]],
        8 => vec![ellipse(0.5, 0.31, 0.18, 0.16, 12), ellipse(0.5, 0.67, 0.22, 0.19, 12)],
        9 => {
            let mut loop_ = ellipse(0.47, 0.34, 0.2, 0.19, 12);
            loop_.push((0.67, 0.34));
            vec![loop_, vec![(0.67, 0.34), (0.6, 0.86)]]
        }
        _ => {
            // Further classes: a deterministic random polyline keyed only by
            // the class index, independent of any dataset seed.
            let mut rng = crate::rng::stream(0x61_7970_68 + class as u64, 0);
            let n = rng.gen_range(3..=5);
            vec![(0..n)
                .map(|_| (rng.gen_range(0.18..0.82), rng.gen_range(0.15..0.85)))
                .collect()]
        }
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Renders one jittered glyph of `class` into an `h × w` intensity map in `[0, 1]`.
pub(crate) fn render(class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let lines = strokes(class);
    let scale = rng.gen_range(0.85..1.05);
    let angle: f64 = rng.gen_range(-0.25..0.25);
    let (tx, ty) = (rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08));
    let thickness = rng.gen_range(0.08..0.12);
    let ink = rng.gen_range(0.8..1.0);
    let (sin, cos) = angle.sin_cos();
    let res = h.min(w) as f64;

    let mut img = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            // pixel centre back into glyph coordinates
            let (px, py) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
            let (ux, uy) = ((px - 0.5 - tx) / scale, (py - 0.5 - ty) / scale);
            let q = (cos * ux + sin * uy + 0.5, -sin * ux + cos * uy + 0.5);
            let d = lines
                .iter()
                .flat_map(|l| l.windows(2).map(move |s| segment_distance(q, s[0], s[1])))
                .fold(f64::INFINITY, f64::min);
            let v = (0.5 + (thickness / 2.0 - d) * res).clamp(0.0, 1.0);
            img[i * w + j] = ink * v;
        }
    }
    img
}
