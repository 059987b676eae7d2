//! Seeded Rademacher random projection.
//!
//! The projection matrix `R` (`output_dim × input_dim`) has entries
//! `±1/√output_dim` and is never materialized. The sign of `R[row][col]` is
//! bit `col % 64` of
//!
//! ```text
//! mix64(mix64(seed ^ row·0x9E3779B97F4A7C15) ^ (col / 64))
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer; a set bit means `-1`. This
//! generator is part of the on-disk contract: changing it changes every
//! projected pool.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::Matrix;
use crate::error::{Error, Result};
use crate::rng::mix64;

pub const DEFAULT_OUTPUT_DIM: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionFamily {
    Rademacher,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    pub family: ProjectionFamily,
}

impl ProjectionSpec {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            input_dim,
            output_dim,
            seed,
            family: ProjectionFamily::Rademacher,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("projection dimensions must be positive".into()));
        }
        if self.output_dim > self.input_dim {
            return Err(Error::InvalidConfig(format!(
                "projection output_dim {} exceeds input_dim {}",
                self.output_dim, self.input_dim
            )));
        }
        Ok(())
    }

    /// The 64 signs of `R[row][64·block .. 64·block + 64]` as a bit word.
    #[inline]
    pub fn sign_word(&self, row: usize, block: usize) -> u64 {
        let row_key = mix64(self.seed ^ (row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        mix64(row_key ^ block as u64)
    }

    /// A single entry of `R`, for inspection and tests.
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        let bit = (self.sign_word(row, col / 64) >> (col % 64)) & 1;
        let scale = 1.0 / (self.output_dim as f64).sqrt();
        if bit == 1 {
            -scale
        } else {
            scale
        }
    }
}

/// `R · vec`.
pub fn project(vec: &[f32], spec: &ProjectionSpec) -> Result<Vec<f32>> {
    spec.check()?;
    if vec.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            what: "projection input".into(),
            expected: spec.input_dim,
            got: vec.len(),
        });
    }
    if let Some(index) = vec.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "projection input".into(),
            index,
        });
    }
    let x: Vec<f64> = vec.iter().map(|&v| v as f64).collect();
    let scale = 1.0 / (spec.output_dim as f64).sqrt();
    let out = (0..spec.output_dim)
        .into_par_iter()
        .map(|row| {
            let mut acc = 0.0f64;
            for (block, chunk) in x.chunks(64).enumerate() {
                let word = spec.sign_word(row, block);
                for (bit, &v) in chunk.iter().enumerate() {
                    // flip the sign bit where R is negative
                    let flip = ((word >> bit) & 1) << 63;
                    acc += f64::from_bits(v.to_bits() ^ flip);
                }
            }
            (acc * scale) as f32
        })
        .collect();
    Ok(out)
}

/// Project every row of `vectors`.
pub fn project_rows(vectors: &Matrix, spec: &ProjectionSpec) -> Result<Matrix> {
    let mut data = Vec::with_capacity(vectors.rows() * spec.output_dim);
    for row in vectors.iter_rows() {
        data.extend(project(row, spec)?);
    }
    Matrix::new(vectors.rows(), spec.output_dim, data)
}
