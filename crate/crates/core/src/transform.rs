//! Displacement fields and the spatial operations built on them.
//!
//! A field `u` lives on the grid it maps *from* (the target grid) and encodes
//! `Phi(x) = x + u(x)` in voxel units. Warping is a pull-back:
//! `(I o Phi)(x) = I(x + u(x))`, sampled linearly with clamp-to-edge.

use std::path::Path;

use crate::autodiff::{kernels, Graph, GraphError, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{voxel_count, LabelVolume, Shape3, Volume};
use crate::io::nifti::{self, Datatype, NiftiImage};

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub shape: Shape3,
    /// Three component grids (x, y, z displacement), each x-fastest.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Linear,
    Nearest,
}

impl DisplacementField {
    pub fn new(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * voxel_count(shape) {
            return Err(Error::InvalidArgument(format!(
                "field data has {} values, shape {shape:?} needs {}",
                data.len(),
                3 * voxel_count(shape)
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement field".into()));
        }
        Ok(DisplacementField { shape, data })
    }

    /// The all-zero field.
    pub fn identity(shape: Shape3) -> Self {
        DisplacementField {
            shape,
            data: vec![0.0; 3 * voxel_count(shape)],
        }
    }

    /// Field with `f(x, y, z)` as the displacement at each voxel.
    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Self {
        let n = voxel_count(shape);
        let mut data = vec![0.0; 3 * n];
        let mut v = 0;
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    let d = f(x, y, z);
                    data[v] = d[0];
                    data[n + v] = d[1];
                    data[2 * n + v] = d[2];
                    v += 1;
                }
            }
        }
        DisplacementField { shape, data }
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.shape)
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[axis * n..(axis + 1) * n]
    }

    pub fn at(&self, index: usize) -> [f64; 3] {
        let n = self.voxels();
        [self.data[index], self.data[n + index], self.data[2 * n + index]]
    }

    pub fn scaled(&self, k: f64) -> Self {
        DisplacementField {
            shape: self.shape,
            data: self.data.iter().map(|v| k * v).collect(),
        }
    }

    /// Largest displacement vector length.
    pub fn max_norm(&self) -> f64 {
        (0..self.voxels())
            .map(|i| {
                let [a, b, c] = self.at(i);
                (a * a + b * b + c * c).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [3, self.shape[0], self.shape[1], self.shape[2]],
            self.data.clone(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape[0] != 3 {
            return Err(Error::InvalidArgument(format!(
                "a displacement tensor needs 3 channels, got shape {:?}",
                t.shape
            )));
        }
        DisplacementField::new(t.spatial(), t.data.clone())
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement field".into()));
        }
        Ok(())
    }
}

/// Per-voxel Jacobian matrices of `Phi`, row `i` holding `d Phi_i / d x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    pub shape: Shape3,
    pub data: Vec<[[f64; 3]; 3]>,
}

impl JacobianField {
    pub fn determinants(&self) -> Vec<f64> {
        self.data.iter().map(det3).collect()
    }
}

pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn identity_field(shape: Shape3) -> DisplacementField {
    DisplacementField::identity(shape)
}

/// Resamples `img` onto `field`'s grid at `x + u(x)`.
pub fn warp_image(img: &Volume, field: &DisplacementField, interp: Interp) -> Result<Volume> {
    if img.is_empty() {
        return Err(Error::InvalidArgument("cannot warp an empty volume".into()));
    }
    field.check_finite()?;
    let data = match interp {
        Interp::Linear => {
            let mut out = vec![0.0; field.voxels()];
            kernels::warp_linear(&img.data, img.shape, 1, &field.data, field.shape, &mut out);
            out
        }
        Interp::Nearest => kernels::nearest_indices(img.shape, &field.data, field.shape)
            .into_iter()
            .map(|i| img.data[i])
            .collect(),
    };
    Ok(Volume {
        shape: field.shape,
        spacing: img.spacing,
        data,
        modality: img.modality.clone(),
    })
}

/// Nearest-neighbour label resampling.
pub fn warp_labels(labels: &LabelVolume, field: &DisplacementField) -> Result<LabelVolume> {
    field.check_finite()?;
    let data = kernels::nearest_indices(labels.shape, &field.data, field.shape)
        .into_iter()
        .map(|i| labels.data[i])
        .collect();
    Ok(LabelVolume {
        shape: field.shape,
        data,
        n_classes: labels.n_classes,
    })
}

/// `Phi_A o Phi_B`: `u(x) = u_B(x) + u_A(x + u_B(x))`, with `u_A` sampled
/// linearly (clamp-to-edge).
pub fn compose(a: &DisplacementField, b: &DisplacementField) -> Result<DisplacementField> {
    if a.shape != b.shape {
        return Err(Error::shape(&a.shape, &b.shape));
    }
    let mut sampled = vec![0.0; a.data.len()];
    kernels::warp_linear(&a.data, a.shape, 3, &b.data, b.shape, &mut sampled);
    let data = b.data.iter().zip(&sampled).map(|(x, y)| x + y).collect();
    Ok(DisplacementField {
        shape: a.shape,
        data,
    })
}

/// `grad Phi = I + grad u` with central differences (one-sided at faces).
pub fn jacobian(field: &DisplacementField) -> JacobianField {
    let n = field.voxels();
    let mut partial = vec![vec![0.0; n]; 9];
    for i in 0..3 {
        for j in 0..3 {
            kernels::spatial_gradient(field.component(i), &mut partial[3 * i + j], field.shape, j);
        }
    }
    let data = (0..n)
        .map(|v| {
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] = partial[3 * i + j][v] + if i == j { 1.0 } else { 0.0 };
                }
            }
            m
        })
        .collect();
    JacobianField {
        shape: field.shape,
        data,
    }
}

/// Percentage of voxels where `det(grad Phi) < 0`.
pub fn neg_jacobian_fraction(field: &DisplacementField) -> f64 {
    let jac = jacobian(field);
    let neg = jac.data.iter().filter(|m| det3(m) < 0.0).count();
    100.0 * neg as f64 / jac.data.len() as f64
}

/// Scaling and squaring: `phi_0 = v / 2^steps`, `phi_{k+1} = phi_k o phi_k`.
pub fn integrate_svf(velocity: &DisplacementField, steps: u32) -> Result<DisplacementField> {
    if steps == 0 {
        return Err(Error::InvalidArgument("integrate_svf needs at least one step".into()));
    }
    velocity.check_finite()?;
    let mut phi = velocity.scaled(1.0 / f64::from(1u32 << steps.min(30)));
    for _ in 0..steps {
        phi = compose(&phi, &phi)?;
    }
    Ok(phi)
}

/// Graph form of [`compose`].
pub fn compose_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var, GraphError> {
    let sa = g.shape(a);
    let sb = g.shape(b);
    if sa != sb || sa[0] != 3 {
        return Err(GraphError::ShapeMismatch {
            op: "compose",
            left: sa,
            right: sb,
        });
    }
    let sampled = g.warp_linear(a, b)?;
    g.add(b, sampled)
}

/// Writes a field as 5D NIfTI float32 (`dim = [5, X, Y, Z, 1, 3]`).
pub fn save_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let [x, y, z] = field.shape;
    let image = NiftiImage {
        dims: vec![x, y, z, 1, 3],
        spacing: [1.0; 3],
        datatype: Datatype::Float32,
        intent_code: nifti::INTENT_VECTOR,
        descrip: "displacement (voxels)".into(),
        data: field.data.clone(),
    };
    nifti::write(&image, path.as_ref())
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let img = nifti::read(path)?;
    if img.dims.len() != 5 || img.dims[3] != 1 || img.dims[4] != 3 {
        return Err(Error::Header {
            path: path.to_path_buf(),
            field: "dim",
            reason: format!("expected [X, Y, Z, 1, 3], got {:?}", img.dims),
        });
    }
    DisplacementField::new([img.dims[0], img.dims[1], img.dims[2]], img.data)
}
