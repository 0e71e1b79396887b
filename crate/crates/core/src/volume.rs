//! Dense 3D grids: image volumes and zone masks.
//!
//! Storage is row-major over `(y, x, z)` with `z` fastest, matching the raw
//! file layout. Voxel `(y, x, z)` has its center at `(x sx, y sy, z sz)` mm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sidecar metadata for a raw grid file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct GridHeader {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    /// `(sx, sy, sz)` in mm.
    #[serde(rename = "spacing")]
    pub spacing: [f64; 3],
}

impl GridHeader {
    pub fn voxels(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.d == 0 {
            return Err(Error::InvalidShape(format!(
                "grid dimensions must be positive, got {}x{}x{}",
                self.h, self.w, self.d
            )));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    header: GridHeader,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(header: GridHeader, data: Vec<f64>) -> Result<Self> {
        header.validate()?;
        if data.len() != header.voxels() {
            return Err(Error::DimMismatch {
                context: "volume voxel count",
                expected: header.voxels(),
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite voxel value"));
        }
        Ok(Self { header, data })
    }

    pub fn zeros(h: usize, w: usize, d: usize, spacing: [f64; 3]) -> Result<Self> {
        let header = GridHeader { h, w, d, spacing };
        Self::new(header, vec![0.0; header.voxels()])
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        d: usize,
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w * d);
        for y in 0..h {
            for x in 0..w {
                for z in 0..d {
                    data.push(f(y, x, z));
                }
            }
        }
        Self::new(GridHeader { h, w, d, spacing }, data)
    }

    pub fn header(&self) -> &GridHeader {
        &self.header
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.header.h, self.header.w, self.header.d)
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.header.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn index(&self, y: usize, x: usize, z: usize) -> usize {
        (y * self.header.w + x) * self.header.d + z
    }

    pub fn get(&self, y: usize, x: usize, z: usize) -> f64 {
        self.data[self.index(y, x, z)]
    }

    pub fn set(&mut self, y: usize, x: usize, z: usize, v: f64) {
        let i = self.index(y, x, z);
        self.data[i] = v;
    }
}
