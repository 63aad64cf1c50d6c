use std::f64::consts::PI;

use crate::diff::Matrix;

/// Width of the encoding of a 3-vector with `bands` frequency bands.
pub const fn encoded_dim(bands: usize) -> usize {
    3 + 6 * bands
}

/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(F-1) pi x), cos(2^(F-1) pi x)]`,
/// each sin/cos block covering the three coordinates.
pub fn positional_encode(x: [f64; 3], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_dim(bands));
    encode_into(x, bands, &mut out);
    out
}

fn encode_into(x: [f64; 3], bands: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(&x);
    let mut freq = PI;
    for _ in 0..bands {
        out.extend(x.iter().map(|v| (freq * v).sin()));
        out.extend(x.iter().map(|v| (freq * v).cos()));
        freq *= 2.0;
    }
}

/// Encodes a batch of points into a `len x encoded_dim(bands)` matrix.
pub fn encode_batch(points: &[[f64; 3]], bands: usize) -> Matrix {
    let mut data = Vec::with_capacity(points.len() * encoded_dim(bands));
    for p in points {
        encode_into(*p, bands, &mut data);
    }
    Matrix::from_vec(points.len(), encoded_dim(bands), data)
}
