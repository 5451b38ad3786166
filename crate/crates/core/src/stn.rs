//! Spatial transformer: sampling-grid generation, bilinear sampling and the
//! conversion between warp parameters and axis-aligned boxes.
//!
//! Coordinates are normalized so an image spans `[-1, 1]²`, pixel centres of
//! the first and last row/column sitting exactly on `-1` and `1`. Pairs are
//! always ordered `(row, col)`, matching `(t_r, t_c)`. The continuous pixel
//! coordinate `u` of a normalized coordinate `x` on an axis of extent `n` is
//! `u = (x + 1)·(n − 1)/2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MIN_ABS_DET: f64 = 1e-12;

/// Parameters of the warp `T_θ` mapping target lattice points to source
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WarpParams {
    /// Isotropic scale about a translated centre: `x = s·x' + t`.
    Similarity { t_r: f64, t_c: f64, s: f64 },
    /// Row-major `2×3` matrix `[a11 a12 t_r; a21 a22 t_c]`.
    Affine { m: [f64; 6] },
}

impl WarpParams {
    pub const IDENTITY: WarpParams = WarpParams::Similarity {
        t_r: 0.0,
        t_c: 0.0,
        s: 1.0,
    };

    pub fn similarity(t_r: f64, t_c: f64, s: f64) -> Result<Self> {
        let p = WarpParams::Similarity { t_r, t_c, s };
        p.validate()?;
        Ok(p)
    }

    pub fn affine(m: [f64; 6]) -> Result<Self> {
        let p = WarpParams::Affine { m };
        p.validate()?;
        Ok(p)
    }

    /// Number of free parameters: 3 for similarity, 6 for affine.
    pub fn dof(&self) -> usize {
        match self {
            WarpParams::Similarity { .. } => 3,
            WarpParams::Affine { .. } => 6,
        }
    }

    pub fn matrix(&self) -> [f64; 6] {
        match *self {
            WarpParams::Similarity { t_r, t_c, s } => [s, 0.0, t_r, 0.0, s, t_c],
            WarpParams::Affine { m } => m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WarpParams::Similarity { t_r, t_c, s } => {
                if !(t_r.is_finite() && t_c.is_finite() && s.is_finite()) {
                    return Err(Error::Config("similarity parameters must be finite".into()));
                }
                if s <= 0.0 {
                    return Err(Error::DegenerateTransform { det: s * s });
                }
                Ok(())
            }
            WarpParams::Affine { m } => {
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("affine parameters must be finite".into()));
                }
                check_det(&m)
            }
        }
    }

    /// Builds warp parameters from a raw row of 3 or 6 regressed values.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        match values.len() {
            3 => WarpParams::similarity(values[0], values[1], values[2]),
            6 => WarpParams::affine(values.try_into().expect("six values")),
            n => Err(Error::dim(
                "warp_params",
                format!("expected 3 or 6 values, got {n}"),
            )),
        }
    }
}

pub(crate) fn check_det(m: &[f64]) -> Result<()> {
    let det = m[0] * m[4] - m[1] * m[3];
    if det.abs() < MIN_ABS_DET || !det.is_finite() {
        return Err(Error::DegenerateTransform { det });
    }
    Ok(())
}

/// Square box of half-extent `s` centred at `(t_r, t_c)`, normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBoxParams {
    pub t_r: f64,
    pub t_c: f64,
    pub s: f64,
}

impl BBoxParams {
    pub const FULL: BBoxParams = BBoxParams {
        t_r: 0.0,
        t_c: 0.0,
        s: 1.0,
    };

    pub fn new(t_r: f64, t_c: f64, s: f64) -> Self {
        BBoxParams { t_r, t_c, s }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.t_r, self.t_c, self.s]
    }

    /// `(row_min, row_max, col_min, col_max)`.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.t_r - self.s,
            self.t_r + self.s,
            self.t_c - self.s,
            self.t_c + self.s,
        )
    }

    /// Whether the box overlaps the image square `[-1, 1]²`.
    pub fn intersects_image(&self) -> bool {
        let (r0, r1, c0, c1) = self.extent();
        self.s > 0.0 && r0 < 1.0 && r1 > -1.0 && c0 < 1.0 && c1 > -1.0
    }

    pub fn inside_image(&self) -> bool {
        let (r0, r1, c0, c1) = self.extent();
        self.s > 0.0 && r0 >= -1.0 && r1 <= 1.0 && c0 >= -1.0 && c1 <= 1.0
    }

    /// The similarity warp that crops exactly this box.
    pub fn to_warp(&self) -> WarpParams {
        WarpParams::Similarity {
            t_r: self.t_r,
            t_c: self.t_c,
            s: self.s,
        }
    }
}

/// Source coordinates for every cell of a `height×width` target lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub height: usize,
    pub width: usize,
    /// `(row, col)` source coordinate per cell, row-major over the lattice.
    pub coords: Vec<[f64; 2]>,
}

/// Normalized coordinate of lattice index `i` on an axis with `n` points.
pub fn lattice_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Writes interleaved `(row, col)` source coordinates for `theta` into `out`.
pub(crate) fn affine_coords(theta: &[f64], height: usize, width: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), 2 * height * width);
    for i in 0..height {
        let rp = lattice_coord(i, height);
        for j in 0..width {
            let cp = lattice_coord(j, width);
            let k = 2 * (i * width + j);
            out[k] = theta[0] * rp + theta[1] * cp + theta[2];
            out[k + 1] = theta[3] * rp + theta[4] * cp + theta[5];
        }
    }
}

/// Adjoint of [`affine_coords`] with respect to `theta`.
pub(crate) fn affine_coords_backward(
    dcoords: &[f64],
    height: usize,
    width: usize,
    dtheta: &mut [f64],
) {
    for i in 0..height {
        let rp = lattice_coord(i, height);
        for j in 0..width {
            let cp = lattice_coord(j, width);
            let k = 2 * (i * width + j);
            let (dr, dc) = (dcoords[k], dcoords[k + 1]);
            dtheta[0] += dr * rp;
            dtheta[1] += dr * cp;
            dtheta[2] += dr;
            dtheta[3] += dc * rp;
            dtheta[4] += dc * cp;
            dtheta[5] += dc;
        }
    }
}

pub fn grid_generate(params: &WarpParams, height: usize, width: usize) -> Result<SamplingGrid> {
    if height < 2 || width < 2 {
        return Err(Error::Config(format!(
            "grid needs at least 2 points per axis, got {height}×{width}"
        )));
    }
    params.validate()?;
    let mut flat = vec![0.0; 2 * height * width];
    affine_coords(&params.matrix(), height, width, &mut flat);
    Ok(SamplingGrid {
        height,
        width,
        coords: flat.chunks_exact(2).map(|p| [p[0], p[1]]).collect(),
    })
}

struct Tap {
    r0: isize,
    c0: isize,
    fr: f64,
    fc: f64,
}

#[inline]
fn tap(r: f64, c: f64, h: usize, w: usize) -> Tap {
    let u = (r + 1.0) * 0.5 * (h - 1) as f64;
    let v = (c + 1.0) * 0.5 * (w - 1) as f64;
    let r0 = u.floor();
    let c0 = v.floor();
    Tap {
        r0: r0 as isize,
        c0: c0 as isize,
        fr: u - r0,
        fc: v - c0,
    }
}

#[inline]
fn pixel(plane: &[f64], h: usize, w: usize, r: isize, c: isize) -> f64 {
    if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
        0.0
    } else {
        plane[r as usize * w + c as usize]
    }
}

/// Bilinear sampling of a `C×H×W` image at interleaved coordinates, zero outside.
pub(crate) fn sample_forward(
    image: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    coords: &[f64],
    out: &mut [f64],
) {
    let cells = coords.len() / 2;
    for (k, rc) in coords.chunks_exact(2).enumerate() {
        let t = tap(rc[0], rc[1], h, w);
        if !(t.fr.is_finite() && t.fc.is_finite()) {
            for ch in 0..channels {
                out[ch * cells + k] = 0.0;
            }
            continue;
        }
        for ch in 0..channels {
            let plane = &image[ch * h * w..(ch + 1) * h * w];
            let v00 = pixel(plane, h, w, t.r0, t.c0);
            let v01 = pixel(plane, h, w, t.r0, t.c0 + 1);
            let v10 = pixel(plane, h, w, t.r0 + 1, t.c0);
            let v11 = pixel(plane, h, w, t.r0 + 1, t.c0 + 1);
            out[ch * cells + k] = (1.0 - t.fr) * ((1.0 - t.fc) * v00 + t.fc * v01)
                + t.fr * ((1.0 - t.fc) * v10 + t.fc * v11);
        }
    }
}

/// Adjoint of [`sample_forward`] for the image values and/or the coordinates.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_backward(
    image: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    coords: &[f64],
    dout: &[f64],
    mut dimage: Option<&mut [f64]>,
    mut dcoords: Option<&mut [f64]>,
) {
    let cells = coords.len() / 2;
    let du_dr = 0.5 * (h - 1) as f64;
    let dv_dc = 0.5 * (w - 1) as f64;
    for (k, rc) in coords.chunks_exact(2).enumerate() {
        let t = tap(rc[0], rc[1], h, w);
        if !(t.fr.is_finite() && t.fc.is_finite()) {
            continue;
        }
        let corners = [
            (t.r0, t.c0, (1.0 - t.fr) * (1.0 - t.fc)),
            (t.r0, t.c0 + 1, (1.0 - t.fr) * t.fc),
            (t.r0 + 1, t.c0, t.fr * (1.0 - t.fc)),
            (t.r0 + 1, t.c0 + 1, t.fr * t.fc),
        ];
        let mut gr = 0.0;
        let mut gc = 0.0;
        for ch in 0..channels {
            let g = dout[ch * cells + k];
            if g == 0.0 {
                continue;
            }
            let off = ch * h * w;
            if let Some(di) = dimage.as_deref_mut() {
                for &(r, c, wt) in &corners {
                    if r >= 0 && c >= 0 && r < h as isize && c < w as isize {
                        di[off + r as usize * w + c as usize] += g * wt;
                    }
                }
            }
            if dcoords.is_some() {
                let plane = &image[off..off + h * w];
                let v00 = pixel(plane, h, w, t.r0, t.c0);
                let v01 = pixel(plane, h, w, t.r0, t.c0 + 1);
                let v10 = pixel(plane, h, w, t.r0 + 1, t.c0);
                let v11 = pixel(plane, h, w, t.r0 + 1, t.c0 + 1);
                gr += g * ((1.0 - t.fc) * (v10 - v00) + t.fc * (v11 - v01));
                gc += g * ((1.0 - t.fr) * (v01 - v00) + t.fr * (v11 - v10));
            }
        }
        if let Some(dc) = dcoords.as_deref_mut() {
            dc[2 * k] += gr * du_dr;
            dc[2 * k + 1] += gc * dv_dc;
        }
    }
}

/// Samples a `C×H×W` image on `grid`, producing `C×grid.height×grid.width`.
pub fn bilinear_sample(image: &Tensor, grid: &SamplingGrid) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::dim(
            "bilinear_sample",
            format!("expected a C×H×W image, got {:?}", image.shape()),
        ));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h < 2 || w < 2 {
        return Err(Error::dim(
            "bilinear_sample",
            "image needs at least 2 pixels per axis",
        ));
    }
    let flat: Vec<f64> = grid.coords.iter().flat_map(|p| [p[0], p[1]]).collect();
    let mut out = vec![0.0; c * grid.height * grid.width];
    sample_forward(image.data(), c, h, w, &flat, &mut out);
    Tensor::new(vec![c, grid.height, grid.width], out)
}

/// Crops `box_` out of a `C×H×W` image at `out_h×out_w`.
pub fn crop(image: &Tensor, box_: &BBoxParams, out_h: usize, out_w: usize) -> Result<Tensor> {
    let grid = grid_generate(&box_.to_warp(), out_h, out_w)?;
    bilinear_sample(image, &grid)
}

/// Bilinear resize of a `C×H×W` image (corner-aligned).
pub fn resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    crop(image, &BBoxParams::FULL, out_h, out_w)
}

/// Axis-aligned square covering the warped canonical grid.
///
/// Similarity parameters are read off directly. For an affine warp the four
/// corners of `[-1, 1]²` are mapped, and the tight box around them is
/// squared to its larger side about the same centre.
pub fn params_to_bbox(params: &WarpParams) -> Result<BBoxParams> {
    params.validate()?;
    match *params {
        WarpParams::Similarity { t_r, t_c, s } => Ok(BBoxParams { t_r, t_c, s }),
        WarpParams::Affine { m } => {
            let mut rmin = f64::INFINITY;
            let mut rmax = f64::NEG_INFINITY;
            let mut cmin = f64::INFINITY;
            let mut cmax = f64::NEG_INFINITY;
            for (rp, cp) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                let r = m[0] * rp + m[1] * cp + m[2];
                let c = m[3] * rp + m[4] * cp + m[5];
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
            }
            Ok(BBoxParams {
                t_r: 0.5 * (rmin + rmax),
                t_c: 0.5 * (cmin + cmax),
                s: 0.5 * (rmax - rmin).max(cmax - cmin),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lattice(n: usize) -> Vec<f64> {
        (0..n).map(|i| lattice_coord(i, n)).collect()
    }

    #[test]
    fn identity_similarity_is_target_lattice() {
        let g = grid_generate(&WarpParams::IDENTITY, 4, 5).unwrap();
        let rows = lattice(4);
        let cols = lattice(5);
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                assert_eq!(g.coords[i * 5 + j], [r, c]);
            }
        }
    }

    #[test]
    fn half_scale_spans_central_square() {
        let g = grid_generate(&WarpParams::similarity(0.0, 0.0, 0.5).unwrap(), 3, 3).unwrap();
        assert_eq!(g.coords[0], [-0.5, -0.5]);
        assert_eq!(g.coords[8], [0.5, 0.5]);
        let max_abs = g
            .coords
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(max_abs, 0.5);
    }

    #[test]
    fn affine_path_reproduces_similarity() {
        let sim = WarpParams::similarity(0.2, -0.1, 0.5).unwrap();
        let aff = WarpParams::affine(sim.matrix()).unwrap();
        let a = grid_generate(&sim, 7, 6).unwrap();
        let b = grid_generate(&aff, 7, 6).unwrap();
        for (p, q) in a.coords.iter().zip(&b.coords) {
            assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_affine_rejected() {
        let err = grid_generate(
            &WarpParams::Affine {
                m: [1.0, 2.0, 0.0, 2.0, 4.0, 0.0],
            },
            3,
            3,
        );
        assert!(matches!(err, Err(Error::DegenerateTransform { .. })));
        assert!(grid_generate(&WarpParams::IDENTITY, 1, 3).is_err());
    }

    #[test]
    fn identity_sampling_reproduces_image() {
        let img = Tensor::from_fn(&[2, 5, 7], |i| ((i * 37) % 11) as f64 * 0.3 - 1.0);
        let g = grid_generate(&WarpParams::IDENTITY, 5, 7).unwrap();
        let out = bilinear_sample(&img, &g).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn far_translation_samples_zeros() {
        let img = Tensor::full(&[1, 4, 4], 3.0);
        let g = grid_generate(&WarpParams::similarity(0.0, 10.0, 1.0).unwrap(), 4, 4).unwrap();
        assert!(bilinear_sample(&img, &g)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn centre_of_two_by_two() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let grid = SamplingGrid {
            height: 1,
            width: 1,
            coords: vec![[0.0, 0.0]],
        };
        assert_eq!(bilinear_sample(&img, &grid).unwrap().data(), &[1.5]);
    }

    #[test]
    fn bbox_from_similarity_and_affine() {
        let b = params_to_bbox(&WarpParams::similarity(0.1, -0.2, 0.4).unwrap()).unwrap();
        assert_eq!(b, BBoxParams::new(0.1, -0.2, 0.4));
        let id =
            params_to_bbox(&WarpParams::affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(id, BBoxParams::new(0.0, 0.0, 1.0));
        let (sn, cs) = std::f64::consts::FRAC_PI_4.sin_cos();
        let rot =
            params_to_bbox(&WarpParams::affine([cs, -sn, 0.0, sn, cs, 0.0]).unwrap()).unwrap();
        assert!(rot.t_r.abs() < 1e-12 && rot.t_c.abs() < 1e-12);
        assert!((rot.s - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bbox_squares_to_larger_side() {
        let b =
            params_to_bbox(&WarpParams::affine([0.2, 0.0, 0.1, 0.0, 0.5, -0.3]).unwrap()).unwrap();
        assert!((b.s - 0.5).abs() < 1e-15);
        assert!((b.t_r - 0.1).abs() < 1e-15 && (b.t_c + 0.3).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn similarity_round_trip(t_r in -1.0f64..1.0, t_c in -1.0f64..1.0, s in 0.05f64..1.5) {
            let p = WarpParams::similarity(t_r, t_c, s).unwrap();
            let box_ = params_to_bbox(&p).unwrap();
            let grid = grid_generate(&box_.to_warp(), 5, 5).unwrap();
            // read the box back off the sampled lattice corners
            let first = grid.coords[0];
            let last = grid.coords[24];
            let back = BBoxParams::new(0.5 * (first[0] + last[0]), 0.5 * (first[1] + last[1]), 0.5 * (last[0] - first[0]));
            prop_assert!((back.t_r - t_r).abs() < 1e-10);
            prop_assert!((back.t_c - t_c).abs() < 1e-10);
            prop_assert!((back.s - s).abs() < 1e-10);
        }
    }
}
