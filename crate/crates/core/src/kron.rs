//! Kronecker-separable 3D Gaussian convolution.
//!
//! A source's spatial operator Σ = Σᶻ ⊗ Σʸ ⊗ Σˣ is never materialized;
//! applying it to a (Dz, Dy, Dx) code is three mode-products costing
//! O(F·(Dz+Dy+Dx)) multiply-adds instead of O(F²).
//!
//! Each 1D factor row is a truncated Gaussian renormalized to sum 1
//! (discrete smoothing), so convolving a constant map returns that constant
//! and map amplitudes stay comparable across length-scales.  The price is
//! that edge rows lose exact symmetry; `apply_adjoint` therefore applies the
//! true transpose rather than assuming factor(i,j) == factor(j,i).

use crate::tensor::{matmul_into, Tensor};
use crate::{MgpaError, Result};

/// Per-source separable convolution operator.
#[derive(Debug, Clone)]
pub struct SeparableKernel {
    pub lambda: f64,
    pub spacing: f64,
    pub grid: (usize, usize, usize),
    /// Factor matrices for the z, y, x axes (row-major D×D each).
    pub factors: [Tensor; 3],
}

/// One row-normalized 1D Gaussian factor.
fn factor_1d(d: usize, lambda: f64, spacing: f64) -> Tensor {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        let mut row_sum = 0.0;
        for j in 0..d {
            let dist = (i as f64 - j as f64) * spacing;
            let v = (-dist * dist / (2.0 * lambda * lambda)).exp();
            m[i * d + j] = v;
            row_sum += v;
        }
        for j in 0..d {
            m[i * d + j] /= row_sum;
        }
    }
    Tensor::new(vec![d, d], m).unwrap()
}

pub fn build_kernel(
    grid: (usize, usize, usize),
    lambda: f64,
    spacing: f64,
) -> Result<SeparableKernel> {
    let (dz, dy, dx) = grid;
    if dz < 1 || dy < 1 || dx < 1 {
        return Err(MgpaError::contract(format!("bad grid {:?}", grid)));
    }
    if lambda <= 0.0 || spacing <= 0.0 {
        return Err(MgpaError::contract(format!(
            "lambda and spacing must be positive, got {} and {}",
            lambda, spacing
        )));
    }
    Ok(SeparableKernel {
        lambda,
        spacing,
        grid,
        factors: [
            factor_1d(dz, lambda, spacing),
            factor_1d(dy, lambda, spacing),
            factor_1d(dx, lambda, spacing),
        ],
    })
}

impl SeparableKernel {
    pub fn f(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    /// Σ·b  (maps a flattened (Dz,Dy,Dx) code to a map of the same length).
    pub fn apply(&self, code: &[f64]) -> Result<Vec<f64>> {
        self.apply_impl(code, false)
    }

    /// Σᵀ·v, the adjoint needed by gradients of anything downstream of a map.
    pub fn apply_adjoint(&self, vec: &[f64]) -> Result<Vec<f64>> {
        self.apply_impl(vec, true)
    }

    fn apply_impl(&self, code: &[f64], transpose: bool) -> Result<Vec<f64>> {
        let (dz, dy, dx) = self.grid;
        let f = self.f();
        if code.len() != f {
            return Err(MgpaError::shape(format!(
                "code length {} != grid product {}",
                code.len(),
                f
            )));
        }
        let fz = self.factors[0].data();
        let fy = self.factors[1].data();
        let fx = self.factors[2].data();
        // mode-z: (Dz×Dz) @ (Dz × Dy·Dx)
        let mut a = vec![0.0; f];
        matmul_into(dz, dz, dy * dx, fz, transpose, code, false, &mut a);
        // mode-y: per z-slice (Dy×Dy) @ (Dy×Dx)
        let mut b = vec![0.0; f];
        for z in 0..dz {
            let src = &a[z * dy * dx..(z + 1) * dy * dx];
            let dst = &mut b[z * dy * dx..(z + 1) * dy * dx];
            matmul_into(dy, dy, dx, fy, transpose, src, false, dst);
        }
        // mode-x: (Dz·Dy × Dx) @ Fxᵀ   (or @ Fx when adjoint)
        let mut out = vec![0.0; f];
        matmul_into(dz * dy, dx, dx, &b, false, fx, !transpose, &mut out);
        Ok(out)
    }

    /// Ridge least-squares encode solved per axis through Cholesky factors of
    /// (FᵀF + ridge·I) — the separable surrogate of a joint ridge, i.e. the
    /// regularizer is applied along each axis factor rather than once on Σ.
    /// Needed by the optimizer's structural moves (re-encoding a map under a
    /// different kernel).  Coarse kernels are near-singular (deconvolution),
    /// so callers pass a stronger ridge when encoding into a coarser scale.
    pub fn solve_ridge(&self, target: &[f64], ridge: f64) -> Result<Vec<f64>> {
        let (dz, dy, dx) = self.grid;
        if target.len() != self.f() {
            return Err(MgpaError::shape(format!(
                "target length {} != grid product {}",
                target.len(),
                self.f()
            )));
        }
        // y = Σᵀ target, then solve (per axis) the Gram systems in sequence.
        let mut y = self.apply_adjoint(target)?;
        for (axis, d) in [(0usize, dz), (1usize, dy), (2usize, dx)] {
            let fac = self.factors[axis].data();
            let mut gram = nalgebra::DMatrix::<f64>::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += fac[k * d + i] * fac[k * d + j];
                    }
                    gram[(i, j)] = s + if i == j { ridge } else { 0.0 };
                }
            }
            let chol = nalgebra::Cholesky::new(gram).ok_or_else(|| {
                MgpaError::contract(format!("gram matrix not SPD at ridge {}", ridge))
            })?;
            solve_along_axis(&mut y, self.grid, axis, |col| {
                let v = nalgebra::DVector::from_column_slice(col);
                let s = chol.solve(&v);
                col.copy_from_slice(s.as_slice());
            });
        }
        Ok(y)
    }

    /// Column sums of squares of the full operator, length F:
    /// wsq[f] = Σ_p Σ[p,f]².  Kronecker structure makes this the outer
    /// product of the per-axis factors' column sums of squares.  This is the
    /// exact variance mass Σ_f Var[A_f] = wsq·ρ² used by the collapsed data
    /// term, and (as its square root) the column norms for dictionary-
    /// normalized pursuit.
    pub fn column_squared_norms(&self) -> Vec<f64> {
        let (dz, dy, dx) = self.grid;
        let per_axis = |fac: &Tensor, d: usize| -> Vec<f64> {
            let m = fac.data();
            (0..d)
                .map(|c| (0..d).map(|r| m[r * d + c] * m[r * d + c]).sum())
                .collect()
        };
        let cz = per_axis(&self.factors[0], dz);
        let cy = per_axis(&self.factors[1], dy);
        let cx = per_axis(&self.factors[2], dx);
        let mut out = Vec::with_capacity(self.f());
        for z in &cz {
            for y in &cy {
                for x in &cx {
                    out.push(z * y * x);
                }
            }
        }
        out
    }
}

/// Apply `f` to every fiber of `data` along `axis` of a (Dz,Dy,Dx) volume.
fn solve_along_axis<F: FnMut(&mut [f64])>(
    data: &mut [f64],
    grid: (usize, usize, usize),
    axis: usize,
    mut f: F,
) {
    let (dz, dy, dx) = grid;
    let (d, stride, outer): (usize, usize, Vec<(usize, usize)>) = match axis {
        0 => (
            dz,
            dy * dx,
            (0..dy * dx).map(|i| (i, 1)).collect(),
        ),
        1 => (
            dy,
            dx,
            (0..dz)
                .flat_map(|z| (0..dx).map(move |x| (z * dy * dx + x, 1)))
                .collect(),
        ),
        _ => (
            dx,
            1,
            (0..dz * dy).map(|i| (i * dx, 1)).collect(),
        ),
    };
    let mut fiber = vec![0.0; d];
    for (base, _) in outer {
        for k in 0..d {
            fiber[k] = data[base + k * stride];
        }
        f(&mut fiber);
        for k in 0..d {
            data[base + k * stride] = fiber[k];
        }
    }
}

/// Dense Kronecker product Σᶻ ⊗ Σʸ ⊗ Σˣ as an F×F matrix.  Test oracle only;
/// cost O(F²) memory, keep grids tiny.
pub fn dense_operator(kernel: &SeparableKernel) -> Tensor {
    let (dz, dy, dx) = kernel.grid;
    let f = kernel.f();
    let mut m = Tensor::zeros(&[f, f]);
    let fz = kernel.factors[0].data();
    let fy = kernel.factors[1].data();
    let fx = kernel.factors[2].data();
    for iz in 0..dz {
        for iy in 0..dy {
            for ix in 0..dx {
                let row = (iz * dy + iy) * dx + ix;
                for jz in 0..dz {
                    for jy in 0..dy {
                        for jx in 0..dx {
                            let col = (jz * dy + jy) * dx + jx;
                            m.data_mut()[row * f + col] =
                                fz[iz * dz + jz] * fy[iy * dy + jy] * fx[ix * dx + jx];
                        }
                    }
                }
            }
        }
    }
    m
}

/// Batched convenience: one map per code row.
pub fn assemble(kernels: &[SeparableKernel], codes: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if kernels.len() != codes.len() {
        return Err(MgpaError::contract(format!(
            "{} kernels vs {} codes",
            kernels.len(),
            codes.len()
        )));
    }
    kernels
        .iter()
        .zip(codes)
        .map(|(k, c)| k.apply(c))
        .collect()
}
