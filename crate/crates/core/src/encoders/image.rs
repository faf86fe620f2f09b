//! Image branch. Features arrive precomputed (one CNN vector per image) in the
//! `MMF1` binary format; the only learned piece is the affine projection into
//! the text space.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::{affine, DenseVector, Linear, SeededRng};

pub const FEATURE_MAGIC: &[u8; 4] = b"MMF1";

/// Default width of the precomputed CNN features.
pub const DEFAULT_IMAGE_DIM: usize = 2048;

/// A precomputed image feature vector `γ(i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeature(pub DenseVector);

impl ImageFeature {
    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn vector(&self) -> &DenseVector {
        &self.0
    }
}

/// `W̃` (m×n) and `b̃` (m), mapping image features into the text space.
pub type ProjectionParams = Linear;

/// Projection with weights from `U(-1/√n, 1/√n)` and zero bias.
pub fn init_projection(text_dim: usize, image_dim: usize, rng: &mut SeededRng) -> ProjectionParams {
    Linear::init_uniform(text_dim, image_dim, rng)
}

/// `γ̃(i) = W̃ γ(i) + b̃`.
pub fn project_image(feat: &ImageFeature, proj: &ProjectionParams) -> Result<DenseVector> {
    affine(&proj.weight, &feat.0, &proj.bias)
}

/// Rows of an `MMF1` file, widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    rows: Vec<DenseVector>,
}

impl FeatureStore {
    pub fn new(dim: usize, rows: Vec<DenseVector>) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| r.dim() != dim) {
            return Err(Error::shape("FeatureStore::new", dim, bad.dim()));
        }
        Ok(Self { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&DenseVector> {
        self.rows.get(index)
    }

    pub fn rows(&self) -> &[DenseVector] {
        &self.rows
    }

    /// Layout: magic `MMF1`, `u32` count, `u32` dim, then count×dim `f32`,
    /// all little-endian, row-major.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Format {
            path: path.to_owned(),
            message,
        };
        if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
            return Err(bad("missing MMF1 header".into()));
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(bad("feature dimension is zero".into()));
        }
        let expected = 12 + count * dim * 4;
        if bytes.len() != expected {
            return Err(bad(format!(
                "expected {expected} bytes for {count}x{dim} features, found {}",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let rows = values
            .chunks_exact(dim)
            .enumerate()
            .map(|(i, row)| {
                DenseVector::new(row.to_vec()).map_err(|e| bad(format!("record {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, rows })
    }

    /// Writes the store, narrowing values to `f32`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.rows.len() * self.dim * 4);
        buf.write_all(FEATURE_MAGIC).unwrap();
        buf.extend((self.rows.len() as u32).to_le_bytes());
        buf.extend((self.dim as u32).to_le_bytes());
        for row in &self.rows {
            for &v in row.iter() {
                buf.extend((v as f32).to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::DenseMatrix;

    fn v(values: &[f64]) -> DenseVector {
        DenseVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn identity_projection() {
        let feat = ImageFeature(v(&[1.5, -2.0, 0.25]));
        let proj = Linear::new(DenseMatrix::identity(3), DenseVector::zeros(3)).unwrap();
        assert_eq!(project_image(&feat, &proj).unwrap(), feat.0);
    }

    #[test]
    fn zero_projection_returns_bias() {
        let feat = ImageFeature(v(&[1.5, -2.0, 0.25]));
        let proj = Linear::new(DenseMatrix::zeros(2, 3), v(&[4.0, -4.0])).unwrap();
        assert_eq!(
            project_image(&feat, &proj).unwrap().as_slice(),
            &[4.0, -4.0]
        );
    }

    #[test]
    fn row_of_ones_over_two_coordinates() {
        let mut w = vec![0.0; 6];
        w[0] = 1.0;
        w[1] = 1.0;
        let proj = Linear::new(DenseMatrix::new(1, 6, w).unwrap(), v(&[1.0])).unwrap();
        let feat = ImageFeature(v(&[2.0, 3.0, 0.0, 0.0, 0.0, 0.0]));
        assert_eq!(project_image(&feat, &proj).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn projection_dimension_mismatch() {
        let proj = Linear::zeros(2, 3);
        assert!(matches!(
            project_image(&ImageFeature(v(&[1.0, 2.0])), &proj),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn feature_file_layout() {
        let store = FeatureStore::new(2, vec![v(&[1.0, -0.5]), v(&[0.25, 3.0])]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mmf");
        store.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MMF1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 16);
        assert_eq!(FeatureStore::read(&path).unwrap(), store);

        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            FeatureStore::read(&path),
            Err(Error::Format { .. })
        ));
    }
}
