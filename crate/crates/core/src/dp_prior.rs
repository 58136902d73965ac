//! Shape prior from a dynamic-programming contour search on polar-resampled
//! long-axis slices.
//!
//! Each slice at fixed `l` is a `(w, h)` long-axis section. After Gaussian
//! smoothing the slice is resampled on a polar grid around its bright-ring
//! centroid, and two closed contours are found: the endocardium on the
//! strongest rising edge and the epicardium on the strongest falling edge
//! outside it. Angles where the wall is too dim over a wide arc are treated
//! as the valve opening and bridged by a straight chord.

use serde::{Deserialize, Serialize};

use crate::volume::{index, Mask3D, ShapePrior, Structure, Volume3D};
use crate::{par, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpParams {
    pub n_angles: usize,
    pub n_radii: usize,
    pub radial_step: f64,
    pub sigma: f64,
    pub smooth_bound: usize,
    /// Wall level as a fraction of the slice maximum. Dark pixels enclosed by
    /// wall form the cavity; a ray that stays below it outside the
    /// endocardium marks a valve angle.
    pub valve_threshold: f64,
    pub valve_min_arc_deg: f64,
    /// In-slice direction of the base, degrees from `+w` towards `+h`; only
    /// a dim arc reaching within 45° of it is taken as the valve opening.
    pub valve_direction_deg: f64,
    /// Slices whose maximum is below this fraction of the volume maximum are empty.
    pub slice_min_fraction: f64,
}

impl Default for DpParams {
    fn default() -> Self {
        DpParams {
            n_angles: 64,
            n_radii: 16,
            radial_step: 1.0,
            sigma: 1.0,
            smooth_bound: 1,
            valve_threshold: 0.2,
            valve_min_arc_deg: 60.0,
            valve_direction_deg: 90.0,
            slice_min_fraction: 0.15,
        }
    }
}

/// A 2D scalar field, `col` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Slice2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}×{cols} slice with {} values", data.len())));
        }
        Ok(Slice2D { rows, cols, data })
    }

    fn at(&self, r: i64, c: i64) -> f64 {
        if r < 0 || c < 0 || r >= self.rows as i64 || c >= self.cols as i64 {
            0.0
        } else {
            self.data[r as usize * self.cols + c as usize]
        }
    }

    /// Bilinear read with zero outside.
    pub fn bilinear(&self, r: f64, c: f64) -> f64 {
        let (r0, c0) = (r.floor(), c.floor());
        let (fr, fc) = (r - r0, c - c0);
        let (r0, c0) = (r0 as i64, c0 as i64);
        (1.0 - fr) * (1.0 - fc) * self.at(r0, c0)
            + (1.0 - fr) * fc * self.at(r0, c0 + 1)
            + fr * (1.0 - fc) * self.at(r0 + 1, c0)
            + fr * fc * self.at(r0 + 1, c0 + 1)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::MIN, f64::max)
    }

    /// Intensity-weighted centroid of values at or above half the maximum.
    pub fn half_max_centroid(&self) -> Option<(f64, f64)> {
        let m = self.max();
        if !(m > 0.0) {
            return None;
        }
        let (mut sr, mut sc, mut mass) = (0.0, 0.0, 0.0);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = self.data[r * self.cols + c];
                if v >= 0.5 * m {
                    sr += v * r as f64;
                    sc += v * c as f64;
                    mass += v;
                }
            }
        }
        Some((sr / mass, sc / mass))
    }
}

/// Polar resampling: `samples[θ·n_radii + r]` is read at
/// `center + r·step·(cos θ, sin θ)` in `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarSlice {
    pub center: (f64, f64),
    pub n_angles: usize,
    pub n_radii: usize,
    pub step: f64,
    pub samples: Vec<f64>,
}

impl PolarSlice {
    pub fn get(&self, angle: usize, radius: usize) -> f64 {
        self.samples[angle * self.n_radii + radius]
    }

    pub fn angle(&self, i: usize) -> f64 {
        2.0 * std::f64::consts::PI * i as f64 / self.n_angles as f64
    }
}

pub fn cartesian_to_polar(
    slice: &Slice2D,
    center: (f64, f64),
    n_angles: usize,
    n_radii: usize,
    step: f64,
) -> Result<PolarSlice> {
    let (r0, c0) = center;
    if !(r0 >= 0.0 && c0 >= 0.0 && r0 <= (slice.rows - 1) as f64 && c0 <= (slice.cols - 1) as f64) {
        return Err(Error::InvalidArgument(format!("polar centre {center:?} outside the slice")));
    }
    if n_angles == 0 || n_radii == 0 || !(step > 0.0) {
        return Err(Error::InvalidArgument("polar grid needs angles, radii and a positive step".into()));
    }
    let mut samples = Vec::with_capacity(n_angles * n_radii);
    for a in 0..n_angles {
        let (s, c) = (2.0 * std::f64::consts::PI * a as f64 / n_angles as f64).sin_cos();
        for r in 0..n_radii {
            let rho = r as f64 * step;
            samples.push(slice.bilinear(r0 + rho * c, c0 + rho * s));
        }
    }
    Ok(PolarSlice { center, n_angles, n_radii, step, samples })
}

/// Minimum-cost closed path `r(θ)` over a cyclic angle axis with
/// `|r(θ+1) − r(θ)| ≤ smooth_bound`, including the wrap from the last angle
/// to the first. `cost` is `n_angles × n_radii`, row-major.
pub fn dp_boundary(cost: &[f64], n_angles: usize, n_radii: usize, smooth_bound: usize) -> Result<Vec<usize>> {
    if n_angles == 0 || n_radii == 0 || cost.len() != n_angles * n_radii {
        return Err(Error::Shape(format!("{} costs for {n_angles}×{n_radii}", cost.len())));
    }
    if let Some(i) = cost.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(closed_path(cost, n_angles, n_radii, smooth_bound).expect("unconstrained costs are always feasible").0)
}

/// Total cost of a path.
pub fn path_cost(cost: &[f64], n_radii: usize, path: &[usize]) -> f64 {
    path.iter().enumerate().map(|(a, &r)| cost[a * n_radii + r]).sum()
}

/// Cells with infinite cost are forbidden; `None` when no closed path exists.
fn closed_path(cost: &[f64], n_angles: usize, n_radii: usize, bound: usize) -> Option<(Vec<usize>, f64)> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut acc = vec![f64::INFINITY; n_radii];
    let mut next = vec![f64::INFINITY; n_radii];
    let mut back = vec![0usize; n_angles * n_radii];
    for start in 0..n_radii {
        if !cost[start].is_finite() {
            continue;
        }
        acc.fill(f64::INFINITY);
        acc[start] = cost[start];
        for a in 1..n_angles {
            for r in 0..n_radii {
                next[r] = f64::INFINITY;
                let c = cost[a * n_radii + r];
                if !c.is_finite() {
                    continue;
                }
                let lo = r.saturating_sub(bound);
                let hi = (r + bound).min(n_radii - 1);
                for p in lo..=hi {
                    if acc[p] + c < next[r] {
                        next[r] = acc[p] + c;
                        back[a * n_radii + r] = p;
                    }
                }
            }
            std::mem::swap(&mut acc, &mut next);
        }
        let lo = start.saturating_sub(bound);
        let hi = (start + bound).min(n_radii - 1);
        for end in lo..=hi {
            let total = acc[end];
            if total.is_finite() && best.as_ref().map_or(true, |b| total < b.1) {
                let mut path = vec![0; n_angles];
                path[n_angles - 1] = end;
                for a in (1..n_angles).rev() {
                    path[a - 1] = back[a * n_radii + path[a]];
                }
                if n_angles == 1 {
                    path[0] = start;
                }
                best = Some((path, total));
            }
        }
    }
    best
}

/// Endocardial and epicardial radii (in radius bins, boundary between bin
/// `r` and `r + 1`) plus the angles bridged as valve opening.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourPolar {
    pub center: (f64, f64),
    pub step: f64,
    pub radii_endo: Vec<f64>,
    pub radii_epi: Vec<f64>,
    pub valve_angles: Vec<usize>,
    /// False when the slice shows no cavity (a cap through the wall).
    pub has_cavity: bool,
}

/// Radial forward differences `I(r+1) − I(r)`, last bin repeated.
fn radial_gradient(p: &PolarSlice) -> Vec<f64> {
    let n = p.n_radii;
    let mut g = vec![0.0; p.samples.len()];
    for a in 0..p.n_angles {
        for r in 0..n {
            g[a * n + r] = if r + 1 < n { p.get(a, r + 1) - p.get(a, r) } else { 0.0 };
        }
    }
    g
}

/// Centre for the polar transform: the centroid of dark pixels enclosed by
/// bright wall, or the bright centroid when the slice shows no cavity.
/// The flag reports whether a cavity was found.
pub fn slice_center(slice: &Slice2D, params: &DpParams) -> Option<((f64, f64), bool)> {
    let bright = slice.half_max_centroid()?;
    let n_radii = params.n_radii;
    let thr = params.valve_threshold * slice.max();
    let dirs: Vec<(f64, f64)> = (0..16).map(|k| (k as f64 * std::f64::consts::PI / 8.0).sin_cos()).collect();
    // rays from outside the wall's bounding box (plus the bilinear margin)
    // can hit on at most 7 of 16 directions
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for (i, _) in slice.data.iter().enumerate().filter(|(_, &v)| v >= thr) {
        let (r, c) = (i / slice.cols, i % slice.cols);
        (r0, r1, c0, c1) = (r0.min(r), r1.max(r), c0.min(c), c1.max(c));
    }
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for r in r0.saturating_sub(1)..(r1 + 2).min(slice.rows) {
        for c in c0.saturating_sub(1)..(c1 + 2).min(slice.cols) {
            if slice.data[r * slice.cols + c] >= thr {
                continue;
            }
            let (mut hits, mut misses) = (0, 0);
            for (s, co) in &dirs {
                let hit = (1..=2 * n_radii).any(|k| {
                    let t = 0.5 * k as f64;
                    slice.bilinear(r as f64 + t * co, c as f64 + t * s) >= thr
                });
                if hit {
                    hits += 1;
                } else {
                    misses += 1;
                    if misses > dirs.len() - 12 {
                        break;
                    }
                }
            }
            if hits >= 12 {
                sr += r as f64;
                sc += c as f64;
                n += 1;
            }
        }
    }
    Some(if n > 0 { ((sr / n as f64, sc / n as f64), true) } else { (bright, false) })
}

/// Contours around `center`. Edges are located on `slice` (smoothed); wall
/// presence is judged on `raw`.
pub fn slice_contours(
    slice: &Slice2D,
    raw: &Slice2D,
    center: (f64, f64),
    has_cavity: bool,
    params: &DpParams,
) -> Result<Option<ContourPolar>> {
    let polar = cartesian_to_polar(slice, center, params.n_angles, params.n_radii, params.radial_step)?;
    let (na, nr) = (params.n_angles, params.n_radii);
    if nr < 3 {
        return Err(Error::InvalidArgument("need at least 3 radii".into()));
    }
    let smax = slice.max();
    let grad = radial_gradient(&polar);
    let raw_polar = cartesian_to_polar(raw, center, na, nr, params.radial_step)?;
    let wall = params.valve_threshold * raw.max();
    let is_wall: Vec<bool> = raw_polar.samples.iter().map(|&v| v >= wall).collect();
    let endo = if has_cavity {
        // the cavity side of the edge should hold no wall beyond the blur margin
        let mut cost: Vec<f64> = grad.iter().map(|g| -g).collect();
        for a in 0..na {
            let mut seen = false;
            for r in 1..nr {
                seen |= is_wall[a * nr + r - 1];
                if seen {
                    cost[a * nr + r] += smax;
                }
            }
            for r in nr - 2..nr {
                cost[a * nr + r] = f64::INFINITY;
            }
        }
        match closed_path(&cost, na, nr, params.smooth_bound) {
            Some((p, _)) => p,
            None => return Ok(None),
        }
    } else {
        vec![0; na]
    };
    // and neither should the outside of the epicardium
    let mut cost = grad.clone();
    for a in 0..na {
        let mut seen = false;
        for r in (0..nr).rev() {
            if r + 2 < nr {
                seen |= is_wall[a * nr + r + 2];
            }
            if seen {
                cost[a * nr + r] += smax;
            }
        }
        let lo = if has_cavity { endo[a] + 1 } else { 0 };
        for r in 0..lo.min(nr) {
            cost[a * nr + r] = f64::INFINITY;
        }
        cost[a * nr + nr - 1] = f64::INFINITY;
    }
    let Some((epi, _)) = closed_path(&cost, na, nr, params.smooth_bound) else {
        return Ok(None);
    };

    // valve: wide arcs where the wall between the contours is dim
    let dim: Vec<bool> = (0..na)
        .map(|a| {
            let lo = if has_cavity { endo[a] } else { 0 };
            (lo..nr).all(|r| !is_wall[a * nr + r])
        })
        .collect();
    let min_arc = (params.valve_min_arc_deg / 360.0 * na as f64).ceil() as usize;
    let basal = (params.valve_direction_deg / 360.0 * na as f64).round() as i64;
    let reach = (na as f64 / 8.0).round() as i64;
    let near_base = |a: usize| {
        let d = (a as i64 - basal).rem_euclid(na as i64);
        d.min(na as i64 - d) <= reach
    };
    let valve_angles = cyclic_runs(&dim, min_arc.max(1))
        .into_iter()
        .find(|run| run.iter().any(|&a| near_base(a)))
        .unwrap_or_default();
    if valve_angles.len() + 3 > na {
        return Ok(None);
    }
    // edge sits between bins r and r + 1, refined by a parabola through the
    // neighbouring gradient samples
    let refine = |a: usize, r: usize, sign: f64| {
        let g = |k: usize| sign * grad[a * nr + k];
        let mut x = r as f64 + 0.5;
        if r > 0 && r + 2 < nr {
            let (l, c, h) = (g(r - 1), g(r), g(r + 1));
            let den = l - 2.0 * c + h;
            if den < 0.0 {
                x += (0.5 * (l - h) / den).clamp(-0.5, 0.5);
            }
        }
        x
    };
    Ok(Some(ContourPolar {
        center,
        step: params.radial_step,
        radii_endo: (0..na).map(|a| if has_cavity { refine(a, endo[a], 1.0) } else { 0.0 }).collect(),
        radii_epi: (0..na).map(|a| refine(a, epi[a], -1.0)).collect(),
        valve_angles,
        has_cavity,
    }))
}

/// Cyclic runs of `true` of length at least `min_len`, each in angle order.
fn cyclic_runs(flags: &[bool], min_len: usize) -> Vec<Vec<usize>> {
    let n = flags.len();
    if flags.iter().all(|&f| f) {
        return vec![(0..n).collect()];
    }
    let start = flags.iter().position(|&f| !f).expect("some false");
    let mut out = Vec::new();
    let mut run = Vec::new();
    for k in 1..=n {
        let i = (start + k) % n;
        if flags[i] {
            run.push(i);
        } else {
            if run.len() >= min_len {
                out.push(std::mem::take(&mut run));
            }
            run.clear();
        }
    }
    out
}

fn point_at(c: &ContourPolar, n: usize, a: usize, radius: f64) -> (f64, f64) {
    let (s, co) = (2.0 * std::f64::consts::PI * a as f64 / n as f64).sin_cos();
    let rho = radius * c.step;
    (c.center.0 + rho * co, c.center.1 + rho * s)
}

/// Star polygon `(row, col)` of a contour; valve angles are pushed out to
/// `valve_radius` (or dropped when `None`).
fn polygon(radii: &[f64], c: &ContourPolar, valve_radius: Option<f64>) -> Vec<(f64, f64)> {
    let n = radii.len();
    (0..n)
        .filter_map(|a| {
            if c.valve_angles.contains(&a) {
                valve_radius.map(|r| point_at(c, n, a, r))
            } else {
                Some(point_at(c, n, a, radii[a]))
            }
        })
        .collect()
}

fn point_in_polygon(poly: &[(f64, f64)], p: (f64, f64)) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.1 > p.1) != (b.1 > p.1) {
            let x = a.0 + (p.1 - a.1) * (b.0 - a.0) / (b.1 - a.1);
            if p.0 < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// The valve chord on the epicardium, as a half-plane test that is true on
/// the centre's side.
fn chord_side(c: &ContourPolar) -> Option<impl Fn((f64, f64)) -> bool> {
    let n = c.radii_epi.len();
    let (first, last) = (*c.valve_angles.first()?, *c.valve_angles.last()?);
    let before = (first + n - 1) % n;
    let after = (last + 1) % n;
    let p = point_at(c, n, before, c.radii_epi[before]);
    let q = point_at(c, n, after, c.radii_epi[after]);
    let cross = move |x: (f64, f64)| (q.0 - p.0) * (x.1 - p.1) - (q.1 - p.1) * (x.0 - p.0);
    let sign = cross(c.center).signum();
    Some(move |x: (f64, f64)| cross(x) * sign >= 0.0)
}

/// Rasterize the endocardial and epicardial regions of one slice.
pub fn rasterize(c: &ContourPolar, rows: usize, cols: usize) -> (Vec<bool>, Vec<bool>) {
    let far = c.radii_epi.iter().copied().fold(0.0, f64::max) + 2.0;
    let epi_poly = polygon(&c.radii_epi, c, Some(far));
    let endo_poly = c.has_cavity.then(|| polygon(&c.radii_endo, c, Some(far)));
    let side = chord_side(c);
    let mut endo = vec![false; rows * cols];
    let mut epi = vec![false; rows * cols];
    for r in 0..rows {
        for col in 0..cols {
            let p = (r as f64, col as f64);
            if side.as_ref().is_some_and(|f| !f(p)) {
                continue;
            }
            let i = r * cols + col;
            epi[i] = point_in_polygon(&epi_poly, p);
            if let Some(poly) = &endo_poly {
                endo[i] = epi[i] && point_in_polygon(poly, p);
            }
        }
    }
    (endo, epi)
}

/// Separable Gaussian smoothing, weights renormalized at the borders.
pub fn gaussian_smooth(vol: &Volume3D, sigma: f64) -> Vec<f64> {
    let d = vol.dims();
    let mut data = vol.to_f64();
    if sigma <= 0.0 {
        return data;
    }
    let rad = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-rad..=rad).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let stride = [d[1] * d[2], d[2], 1];
    for axis in 0..3 {
        let src = data.clone();
        for (i, out) in data.iter_mut().enumerate() {
            let pos = [i / stride[0], (i / stride[1]) % d[1], i % d[2]][axis] as i64;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (k, &w) in kernel.iter().enumerate() {
                let q = pos + k as i64 - rad;
                if q >= 0 && q < d[axis] as i64 {
                    acc += w * src[(i as i64 + (q - pos) * stride[axis] as i64) as usize];
                    wsum += w;
                }
            }
            *out = acc / wsum;
        }
    }
    data
}

/// The three priors of one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    pub endo: ShapePrior,
    pub myo: ShapePrior,
    pub epi: ShapePrior,
}

impl Priors {
    pub fn get(&self, s: Structure) -> &ShapePrior {
        match s {
            Structure::Endocardium => &self.endo,
            Structure::Myocardium => &self.myo,
            Structure::Epicardium => &self.epi,
        }
    }
}

pub fn generate_prior(vol: &Volume3D) -> Result<Priors> {
    generate_prior_with(vol, &DpParams::default())
}

pub fn generate_prior_with(vol: &Volume3D, params: &DpParams) -> Result<Priors> {
    if !(vol.max() > 0.0) {
        return Err(Error::Degenerate("volume has no positive counts".into()));
    }
    let d = vol.dims();
    let smooth = gaussian_smooth(vol, params.sigma);
    let raw = vol.to_f64();
    let vmax = vol.max() as f64;
    let fallback = ((d[1] as f64 - 1.0) / 2.0, (d[2] as f64 - 1.0) / 2.0);
    let per_slice = par::map_range(d[0], |l| -> Result<Option<(Vec<bool>, Vec<bool>)>> {
        let slice = Slice2D::new(d[1], d[2], smooth[l * d[1] * d[2]..(l + 1) * d[1] * d[2]].to_vec())?;
        let plane = &raw[l * d[1] * d[2]..(l + 1) * d[1] * d[2]];
        if plane.iter().copied().fold(f64::MIN, f64::max) < params.slice_min_fraction * vmax {
            return Ok(None);
        }
        let raw_slice = Slice2D::new(d[1], d[2], plane.to_vec())?;
        let (center, cavity) = slice_center(&raw_slice, params).unwrap_or((fallback, false));
        Ok(slice_contours(&slice, &raw_slice, center, cavity, params)?.map(|c| rasterize(&c, d[1], d[2])))
    });
    let mut endo = Mask3D::empty(d, vol.voxel_mm(), Structure::Endocardium)?;
    let mut epi = Mask3D::empty(d, vol.voxel_mm(), Structure::Epicardium)?;
    for (l, res) in per_slice.into_iter().enumerate() {
        let Some((en, ep)) = res? else { continue };
        for w in 0..d[1] {
            for h in 0..d[2] {
                let i = w * d[2] + h;
                debug_assert_eq!(index(d, l, w, h), l * d[1] * d[2] + i);
                endo.set(l, w, h, en[i]);
                epi.set(l, w, h, ep[i]);
            }
        }
    }
    let myo = epi.minus(&endo)?.with_structure(Structure::Myocardium);
    Ok(Priors { endo: ShapePrior::new(endo), myo: ShapePrior::new(myo), epi: ShapePrior::new(epi) })
}
