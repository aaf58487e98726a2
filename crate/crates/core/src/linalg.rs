//! Small fixed-size and dense helpers shared by geometry and the network.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Inverse of a 3x3 matrix, `None` when (near) singular.
pub fn inverse(m: &Mat3) -> Option<Mat3> {
    let d = det(m);
    let scale_ref = m.iter().map(|r| norm(*r)).product::<f64>();
    if !d.is_finite() || d.abs() <= 1e-12 * scale_ref.max(f64::MIN_POSITIVE) {
        return None;
    }
    // Columns of the inverse are the reciprocal vectors.
    let c0 = cross(m[1], m[2]);
    let c1 = cross(m[2], m[0]);
    let c2 = cross(m[0], m[1]);
    let inv_d = 1.0 / d;
    Some([
        [c0[0] * inv_d, c1[0] * inv_d, c2[0] * inv_d],
        [c0[1] * inv_d, c1[1] * inv_d, c2[1] * inv_d],
        [c0[2] * inv_d, c1[2] * inv_d, c2[2] * inv_d],
    ])
}

/// Row vector times matrix: `v · m`.
#[inline]
pub fn vec_mat(v: Vec3, m: &Mat3) -> Vec3 {
    [
        v[0] * m[0][0] + v[1] * m[1][0] + v[2] * m[2][0],
        v[0] * m[0][1] + v[1] * m[1][1] + v[2] * m[2][1],
        v[0] * m[0][2] + v[1] * m[1][2] + v[2] * m[2][2],
    ]
}

/// `out = W x + b` with `W` stored row-major as `out.len() x x.len()`.
#[inline]
pub fn affine(w: &[f64], b: Option<&[f64]>, x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    debug_assert_eq!(w.len(), n_in * out.len());
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    if let Some(b) = b {
        for (o, bi) in out.iter_mut().zip(b) {
            *o += bi;
        }
    }
}

/// `out += Wᵀ g`.
#[inline]
pub fn affine_transpose_acc(w: &[f64], g: &[f64], out: &mut [f64]) {
    let n_in = out.len();
    for (gi, row) in g.iter().zip(w.chunks_exact(n_in)) {
        if *gi == 0.0 {
            continue;
        }
        for (o, wij) in out.iter_mut().zip(row) {
            *o += gi * wij;
        }
    }
}

/// `dw += g xᵀ`.
#[inline]
pub fn outer_acc(dw: &mut [f64], g: &[f64], x: &[f64]) {
    let n_in = x.len();
    for (gi, row) in g.iter().zip(dw.chunks_exact_mut(n_in)) {
        if *gi == 0.0 {
            continue;
        }
        for (d, xj) in row.iter_mut().zip(x) {
            *d += gi * xj;
        }
    }
}

#[inline]
pub fn acc(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Shifted softplus `ln(0.5 eˣ + 0.5)`, zero at the origin.
#[inline]
pub fn ssp(x: f64) -> f64 {
    let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
    softplus - std::f64::consts::LN_2
}

/// Derivative of [`ssp`], the logistic sigmoid.
#[inline]
pub fn ssp_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
