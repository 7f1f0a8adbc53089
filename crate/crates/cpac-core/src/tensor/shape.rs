use serde::{Deserialize, Serialize};

use crate::error::{CpacError, Result};

/// Geometry of one convolution layer: input extents, channel counts, and
/// kernel size, with the derived output-pixel count always recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeDescriptor {
    /// Input width in pixels.
    pub x: usize,
    /// Input height in pixels.
    pub y: usize,
    /// Input channels.
    pub s: usize,
    /// Output channels.
    pub n: usize,
    /// Kernel size (square, stride one, no padding).
    pub d: usize,
}

impl ShapeDescriptor {
    pub fn new(x: usize, y: usize, s: usize, n: usize, d: usize) -> Result<Self> {
        let sd = ShapeDescriptor { x, y, s, n, d };
        sd.validate()?;
        Ok(sd)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.s < 1 || self.n < 1 {
            return Err(CpacError::shape(format!(
                "extents must be >= 1: d={}, s={}, n={}",
                self.d, self.s, self.n
            )));
        }
        if self.x < self.d || self.y < self.d {
            return Err(CpacError::shape(format!(
                "kernel {} exceeds input {}x{}",
                self.d, self.x, self.y
            )));
        }
        Ok(())
    }

    /// Output width `X - d + 1`.
    pub fn out_x(&self) -> usize {
        self.x - self.d + 1
    }

    /// Output height `Y - d + 1`.
    pub fn out_y(&self) -> usize {
        self.y - self.d + 1
    }

    /// Output-pixel count `P = (X - d + 1)(Y - d + 1)`, derived on demand.
    pub fn p(&self) -> usize {
        self.out_x() * self.out_y()
    }

    /// Dense kernel parameter count `d * d * S * N`.
    pub fn dense_params(&self) -> usize {
        self.d * self.d * self.s * self.n
    }

    /// Factorized parameter count `R * (d + d + S + N)`.
    pub fn factor_params(&self, rank: usize) -> usize {
        rank * (2 * self.d + self.s + self.n)
    }
}
