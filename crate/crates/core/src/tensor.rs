//! Dense row-major f64 tensors, the seeded RNG, and the MGPT tensor file
//! format.  Everything upstream stores its state in these.
//!
//! Determinism contract: all randomness flows through [`SeededRng`]
//! (ChaCha8, a counter-based stream cipher RNG), and parallel code must
//! derive per-chunk substreams via [`SeededRng::substream`] instead of
//! sharing a generator, so results are bitwise reproducible for a given
//! seed regardless of thread count.

use crate::{MgpaError, Result};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(MgpaError::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// 1-D tensor from raw values.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(MgpaError::shape(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row/column count of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(MgpaError::shape(format!(
                "expected 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Standard matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(MgpaError::shape(format!(
                "matmul inner dims disagree: {}x{} vs {}x{}",
                m, k, k2, n
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(
            m,
            k,
            n,
            self.data(),
            false,
            other.data(),
            false,
            out.data_mut(),
        );
        Ok(out)
    }

    pub fn assert_finite(&self, ctx: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(MgpaError::NonFinite {
                    term: ctx.to_string(),
                    what: format!("element {} is {}", i, v),
                });
            }
        }
        Ok(())
    }

    // ---- MGPT binary format -------------------------------------------------
    // magic "MGPT", u32 version = 1, u32 ndim, ndim x u64 dims,
    // little-endian f64 payload, row-major.

    pub fn write_mgpt(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 8 * self.shape.len() + 8 * self.data.len());
        buf.extend_from_slice(b"MGPT");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_mgpt(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        Self::parse_mgpt(&raw)
    }

    /// Decode the MGPT byte layout; errors carry the offending byte offset.
    pub fn parse_mgpt(raw: &[u8]) -> Result<Self> {
        let take = |off: usize, len: usize| -> Result<&[u8]> {
            raw.get(off..off + len).ok_or(MgpaError::DataParse {
                offset: raw.len() as u64,
                what: format!("truncated: wanted {} bytes at offset {}", len, off),
            })
        };
        if take(0, 4)? != b"MGPT" {
            return Err(MgpaError::DataParse {
                offset: 0,
                what: "bad magic, expected \"MGPT\"".into(),
            });
        }
        let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
        if version != 1 {
            return Err(MgpaError::DataParse {
                offset: 4,
                what: format!("unsupported version {}", version),
            });
        }
        let ndim = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
        if ndim > 8 {
            return Err(MgpaError::DataParse {
                offset: 8,
                what: format!("implausible ndim {}", ndim),
            });
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut off = 12;
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(off, 8)?.try_into().unwrap()) as usize);
            off += 8;
        }
        let n: usize = shape.iter().product();
        let want = n.checked_mul(8).ok_or(MgpaError::DataParse {
            offset: 12,
            what: "dim product overflow".into(),
        })?;
        let payload = take(off, want)?;
        if raw.len() != off + want {
            return Err(MgpaError::DataParse {
                offset: (off + want) as u64,
                what: format!("{} trailing bytes", raw.len() - off - want),
            });
        }
        let mut data = Vec::with_capacity(n);
        for (i, chunk) in payload.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(MgpaError::DataParse {
                    offset: (off + 8 * i) as u64,
                    what: format!("non-finite value {}", v),
                });
            }
            data.push(v);
        }
        Tensor::new(shape, data)
    }
}

thread_local! {
    static FLOP_COUNT: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Multiply-add count of every gemm issued on this thread since the last
/// reset.  One counter bump per gemm call, so the bookkeeping itself is free;
/// used by the complexity tests to verify the separable convolution really
/// performs O(F·(Dz+Dy+Dx)) work.
pub fn flops_since_reset() -> u64 {
    FLOP_COUNT.with(|c| c.get())
}

pub fn reset_flop_count() {
    FLOP_COUNT.with(|c| c.set(0));
}

/// C = alpha·op(A)·op(B) accumulated into `out` (which must be zeroed by the
/// caller when a plain product is wanted).  Thin wrapper over the gemm kernel
/// so transposes never require materializing a copy.
#[allow(clippy::too_many_arguments)]
pub fn matmul_acc_into(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    FLOP_COUNT.with(|c| c.set(c.get() + (m * k * n) as u64));
    let (rsa, csa) = if a_trans {
        (1isize, m as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if b_trans {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C = op(A)·op(B), overwriting `out`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    out: &mut [f64],
) {
    out.fill(0.0);
    matmul_acc_into(m, k, n, 1.0, a, a_trans, b, b_trans, out);
}

/// Seeded, counter-based RNG (ChaCha8).  Identical seed means identical draw
/// sequence on every platform and thread count; independent substreams come
/// from ChaCha's 64-bit stream field, never from sharing the generator.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh generator on an independent stream of the same seed.  Used for
    /// per-step and per-chunk derivation (`stream` encodes the consumer).
    pub fn substream(&self, stream: u64) -> SeededRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        SeededRng {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Standard normal draw (ziggurat).
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }
}

/// mean + std ⊙ ε with ε ~ N(0, I): the reparameterization-trick sampler
/// every variational draw goes through.
pub fn gaussian_reparam_sample(mean: &Tensor, std: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
    if mean.shape() != std.shape() {
        return Err(MgpaError::shape(format!(
            "mean shape {:?} != std shape {:?}",
            mean.shape(),
            std.shape()
        )));
    }
    let mut out = Tensor::zeros(mean.shape());
    for ((o, &mu), &s) in out
        .data_mut()
        .iter_mut()
        .zip(mean.data())
        .zip(std.data())
    {
        if s < 0.0 {
            return Err(MgpaError::contract(format!("negative std {}", s)));
        }
        *o = mu + s * rng.normal();
    }
    Ok(out)
}
