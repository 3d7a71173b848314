//! Continuous 6-number rotation representation: the first two columns of a
//! rotation matrix, recovered by Gram-Schmidt and a cross product.

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

/// First two columns of `r`, column-major: `[r00, r10, r20, r01, r11, r21]`.
pub fn rot6d_from_matrix(r: &Mat3) -> [f64; 6] {
    [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn rot6d_to_matrix(v: &[f64; 6]) -> Result<Mat3> {
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    let n1 = norm(a1);
    if n1 == 0.0 || !n1.is_finite() {
        return Err(Error::InvalidArgument("rot6d first column must be non-zero".into()));
    }
    let b1 = a1.map(|x| x / n1);
    let d = dot(b1, a2);
    let u2 = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = norm(u2);
    if n2 == 0.0 || !n2.is_finite() {
        return Err(Error::InvalidArgument("rot6d columns are parallel".into()));
    }
    let b2 = u2.map(|x| x / n2);
    let b3 = cross(b1, b2);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        r[i] = [b1[i], b2[i], b3[i]];
    }
    Ok(r)
}
