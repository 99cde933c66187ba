//! Small dense-vector helpers shared by the embedding consumers.

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ‖v‖₂`, or `None` for a zero (or non-finite) vector.
pub fn normalized(v: &[f32]) -> Option<Vec<f32>> {
    let n = norm(v);
    if !n.is_finite() || n == 0.0 {
        return None;
    }
    Some(v.iter().map(|x| (*x as f64 / n) as f32).collect())
}

/// Normalized arithmetic mean of equal-length vectors.
pub fn mean_direction<'a, I>(vectors: I) -> Option<Vec<f32>>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for v in vectors {
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        if v.len() != acc.len() {
            return None;
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += *x as f64;
        }
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !n.is_finite() || n == 0.0 {
        return None;
    }
    Some(acc.iter().map(|x| (x / n) as f32).collect())
}

/// Cosine distance between unit vectors, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    (1.0 - dot(a, b)).clamp(0.0, 2.0)
}
