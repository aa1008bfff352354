//! Real spherical-harmonic colour evaluation up to degree 2.

use crate::geom::Vec3;

pub const MAX_SH_DEGREE: u32 = 2;

const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

pub fn coefficient_count(degree: u32) -> usize {
    ((degree + 1) * (degree + 1)) as usize
}

/// RGB colour seen along the unit direction `dir`.
///
/// The degree-0 coefficient is the base colour itself; higher bands add the
/// real SH basis evaluated at `dir`. The result is clamped to `[0, 1]`.
pub fn eval(coeffs: &[[f32; 3]], dir: &Vec3) -> [f64; 3] {
    let mut basis = [0.0f64; 9];
    basis[0] = 1.0;
    if coeffs.len() > 1 {
        let (x, y, z) = (dir.x, dir.y, dir.z);
        basis[1] = -C1 * y;
        basis[2] = C1 * z;
        basis[3] = -C1 * x;
        if coeffs.len() > 4 {
            basis[4] = C2[0] * x * y;
            basis[5] = C2[1] * y * z;
            basis[6] = C2[2] * (2.0 * z * z - x * x - y * y);
            basis[7] = C2[3] * x * z;
            basis[8] = C2[4] * (x * x - y * y);
        }
    }
    let mut rgb = [0.0; 3];
    for (c, b) in coeffs.iter().zip(basis.iter()) {
        for k in 0..3 {
            rgb[k] += b * c[k] as f64;
        }
    }
    rgb.map(|v| v.clamp(0.0, 1.0))
}
