use crate::error::{Error, Result};

fn check_spacing(spacing_mm: [f64; 3]) -> Result<()> {
    if spacing_mm.iter().all(|&s| s.is_finite() && s > 0.0) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "voxel spacing must be positive, got {spacing_mm:?}"
        )))
    }
}

/// Time series of 3D intensity volumes, laid out `[T, Z, Y, X]` with X fastest.
/// Spacing is stored as `[x, y, z]` in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSeries {
    dims: [usize; 4],
    spacing_mm: [f64; 3],
    data: Vec<f32>,
}

impl VolumeSeries {
    pub fn new(dims: [usize; 4], spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero extent in series dims {dims:?}")));
        }
        check_spacing(spacing_mm)?;
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "series dims {dims:?} need {numel} voxels, got {}",
                data.len()
            )));
        }
        Ok(VolumeSeries {
            dims,
            spacing_mm,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn num_phases(&self) -> usize {
        self.dims[0]
    }

    /// `[Z, Y, X]`.
    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[1], self.dims[2], self.dims[3]]
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn volume_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn phase(&self, t: usize) -> &[f32] {
        let n = self.volume_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// One axial slice `[Y, X]` of phase `t`.
    pub fn slice(&self, t: usize, z: usize) -> &[f32] {
        let plane = self.dims[2] * self.dims[3];
        &self.phase(t)[z * plane..(z + 1) * plane]
    }
}

/// Binary voxel mask `[Z, Y, X]` with values in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask3D {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    data: Vec<u8>,
}

impl BinaryMask3D {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<u8>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero extent in mask dims {dims:?}")));
        }
        check_spacing(spacing_mm)?;
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "mask dims {dims:?} need {numel} voxels, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!(
                "mask values must be 0 or 1, found {bad}"
            )));
        }
        Ok(BinaryMask3D {
            dims,
            spacing_mm,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing_mm, vec![0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn with_spacing(mut self, spacing_mm: [f64; 3]) -> Result<Self> {
        check_spacing(spacing_mm)?;
        self.spacing_mm = spacing_mm;
        Ok(self)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.index(z, y, x)] == 1
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, value: bool) {
        let i = self.index(z, y, x);
        self.data[i] = value as u8;
    }

    /// Slice `[Y, X]` at depth `z`.
    pub fn slice(&self, z: usize) -> &[u8] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[z * plane..(z + 1) * plane]
    }
}

/// Per-voxel foreground probability `[Z, Y, X]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_spacing(spacing_mm)?;
        let numel: usize = dims.iter().product();
        if numel != data.len() || numel == 0 {
            return Err(Error::shape(format!(
                "probability dims {dims:?} need {numel} voxels, got {}",
                data.len()
            )));
        }
        Ok(ProbabilityMap {
            dims,
            spacing_mm,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

impl From<&BinaryMask3D> for ProbabilityMap {
    fn from(mask: &BinaryMask3D) -> Self {
        ProbabilityMap {
            dims: mask.dims,
            spacing_mm: mask.spacing_mm,
            data: mask.data.iter().map(|&v| v as f32).collect(),
        }
    }
}
