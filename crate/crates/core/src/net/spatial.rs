//! Affine grid generator and trilinear sampler on probability maps.

use serde::{Deserialize, Serialize};

use crate::nn::warp;
use crate::volume::{check_dims, Mask3D};
use crate::{Error, Result};

/// Voxel-wise probabilities on a 3D grid, `h` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl ProbMap {
    pub fn new(dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        check_dims(dims, 1.0)?;
        let n: usize = dims.iter().product();
        if values.len() != n {
            return Err(Error::LengthMismatch { expected: n, found: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("probability {} at index {i} outside [0, 1]", values[i])));
        }
        Ok(ProbMap { dims, values })
    }

    pub fn from_mask(mask: &Mask3D) -> Self {
        ProbMap { dims: mask.dims(), values: mask.to_f64() }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// The 12 parameters of a 3×4 affine map, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub lambda: [f64; 12],
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { lambda: warp::IDENTITY_THETA };

    pub fn new(lambda: [f64; 12]) -> Result<Self> {
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("affine parameters must be finite".into()));
        }
        Ok(AffineParams { lambda })
    }

    /// Linear part `m` (row-major 3×3) and translation `t`, both in the
    /// normalized frame.
    pub fn from_parts(m: [[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut lambda = [0.0; 12];
        for r in 0..3 {
            lambda[r * 4..r * 4 + 3].copy_from_slice(&m[r]);
            lambda[r * 4 + 3] = t[r];
        }
        AffineParams { lambda }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [0, 1, 2].map(|r| [self.lambda[r * 4], self.lambda[r * 4 + 1], self.lambda[r * 4 + 2]])
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.lambda[3], self.lambda[7], self.lambda[11]]
    }

    /// Inverse map, or `None` when the linear part is singular.
    pub fn inverse(&self) -> Option<Self> {
        let m = self.matrix();
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det.abs() < 1e-12 {
            return None;
        }
        let mut inv = [[0.0; 3]; 3];
        for (r, row) in inv.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
                let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
                *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
            }
        }
        let t = self.translation();
        let ti = [0, 1, 2].map(|r| -(inv[r][0] * t[0] + inv[r][1] * t[1] + inv[r][2] * t[2]));
        Some(Self::from_parts(inv, ti))
    }
}

/// Source coordinate for every target voxel, both in the normalized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub dims: [usize; 3],
    pub target: Vec<[f64; 3]>,
    pub source: Vec<[f64; 3]>,
}

/// Map every target voxel through `params`.
pub fn grid_generate(params: &AffineParams, dims: [usize; 3]) -> SamplingGrid {
    let target = warp::target_coords(dims);
    let source = warp::affine_source(&params.lambda, &target);
    SamplingGrid { dims, target, source }
}

/// Trilinear read of `input` at the grid's source coordinates; zero outside.
pub fn sample(input: &ProbMap, grid: &SamplingGrid) -> Result<ProbMap> {
    if grid.dims != input.dims || grid.source.len() != input.values.len() {
        return Err(Error::Shape(format!("grid {:?} for map {:?}", grid.dims, input.dims)));
    }
    let u = warp::to_voxel(grid.dims, &grid.source);
    let mut out = vec![0.0; u.len()];
    warp::sample(&input.values, 1, input.dims, &u, &mut out);
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(ProbMap { dims: input.dims, values: out })
}

pub fn warp(y: &ProbMap, params: &AffineParams) -> ProbMap {
    sample(y, &grid_generate(params, y.dims)).expect("grid built for the same dims")
}
