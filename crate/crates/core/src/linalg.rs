//! Small vector helpers with `f64` accumulation.

use num_traits::ToPrimitive;

pub fn dot<A: ToPrimitive + Copy, B: ToPrimitive + Copy>(a: &[A], b: &[B]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.to_f64().unwrap_or(f64::NAN) * y.to_f64().unwrap_or(f64::NAN))
        .sum()
}

pub fn norm<A: ToPrimitive + Copy>(a: &[A]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either side is the zero vector.
pub fn cosine<A: ToPrimitive + Copy, B: ToPrimitive + Copy>(a: &[A], b: &[B]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Unit-length copy; the zero vector stays zero.
pub fn normalized_f32<A: ToPrimitive + Copy>(a: &[A]) -> Vec<f32> {
    let n = norm(a);
    a.iter()
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            if n == 0.0 {
                0.0
            } else {
                (x / n) as f32
            }
        })
        .collect()
}
