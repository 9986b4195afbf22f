//! Volumes, cases and the preprocessing applied before they reach the
//! network.
//!
//! Volumes use NIfTI index order: `dims = [nx, ny, nz]` with `x` fastest in
//! memory. Viewed as a tensor the same buffer is `[nz, ny, nx]`, so a
//! 128×128×64 patch becomes a `[64, 128, 128]` grid.

mod manifest;
mod nifti;
mod patches;
mod phantom;

pub use manifest::{case_id_from_path, load_case, write_case, Manifest, ManifestEntry};
pub use nifti::{read_nifti, write_nifti, Orientation};
pub use patches::{
    extract_patch, extract_patches, make_patch_grid, stitch_patches, Patch, PatchGrid, Stitched,
    DEFAULT_PATCH_EXTENT, DEFAULT_PATCH_STRIDES,
};
pub use phantom::make_phantom;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Modalities in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Flair,
    T1,
    T1ce,
    T2,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T1ce, Modality::T2];

    pub fn suffix(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
        }
    }
}

/// Label codes in class-channel order: background, necrosis, edema,
/// enhancing.
pub const LABEL_CODES: [u8; 4] = [0, 1, 2, 4];

pub fn code_to_channel(code: u8) -> Result<usize> {
    LABEL_CODES
        .iter()
        .position(|&c| c == code)
        .ok_or(Error::UnknownLabelCode(code as i64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// `[nx, ny, nz]`.
    pub dims: [usize; 3],
    /// Voxel size in mm along x, y, z.
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
    pub orientation: Option<Orientation>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) || dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "volume dims {dims:?} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            orientation: None,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Self::new(dims, spacing, vec![0.0; dims.iter().product()]).expect("positive dims")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// `[nz, ny, nx]` view of the same buffer.
    pub fn to_tensor(&self) -> Tensor {
        let [nx, ny, nz] = self.dims;
        Tensor::new(&[nz, ny, nx], self.data.clone()).expect("volume data matches dims")
    }
}

/// Integer segmentation with codes in {0, 1, 2, 4}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub codes: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], codes: Vec<u8>) -> Result<Self> {
        if dims.contains(&0) || dims.iter().product::<usize>() != codes.len() {
            return Err(Error::shape(format!(
                "label dims {dims:?} with {} codes",
                codes.len()
            )));
        }
        if let Some(&bad) = codes.iter().find(|c| !LABEL_CODES.contains(c)) {
            return Err(Error::UnknownLabelCode(bad as i64));
        }
        Ok(Self {
            dims,
            spacing,
            codes,
        })
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        let codes = v
            .data
            .iter()
            .map(|&x| {
                let r = x.round();
                if r != x || !(0.0..=255.0).contains(&r) {
                    return Err(Error::UnknownLabelCode(r as i64));
                }
                Ok(r as u8)
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(v.dims, v.spacing, codes)
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new(
            self.dims,
            self.spacing,
            self.codes.iter().map(|&c| c as f64).collect(),
        )
        .expect("label dims are valid")
    }

    pub fn count(&self, code: u8) -> usize {
        self.codes.iter().filter(|&&c| c == code).count()
    }
}

/// Four co-registered modality volumes with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalCase {
    pub case_id: String,
    /// FLAIR, T1, T1-CE, T2.
    pub modalities: [Volume; 4],
    pub labels: Option<LabelVolume>,
}

impl MultiModalCase {
    pub fn new(case_id: impl Into<String>, modalities: [Volume; 4], labels: Option<LabelVolume>) -> Result<Self> {
        let dims = modalities[0].dims;
        let spacing = modalities[0].spacing;
        for v in &modalities {
            if v.dims != dims || v.spacing != spacing {
                return Err(Error::shape(format!(
                    "modality volumes disagree: {:?}/{:?} vs {dims:?}/{spacing:?}",
                    v.dims, v.spacing
                )));
            }
        }
        if let Some(l) = &labels {
            if l.dims != dims {
                return Err(Error::shape(format!(
                    "labels {:?} vs images {dims:?}",
                    l.dims
                )));
            }
        }
        Ok(Self {
            case_id: case_id.into(),
            modalities,
            labels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.modalities[0].dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.modalities[0].spacing
    }

    /// Z-scores each modality independently.
    pub fn normalized(&self) -> Self {
        Self {
            case_id: self.case_id.clone(),
            modalities: self.modalities.clone().map(|v| zscore_normalize(&v)),
            labels: self.labels.clone(),
        }
    }
}

/// `(x − mean) / std` over all voxels, with the population standard
/// deviation. Constant volumes map to zeros.
pub fn zscore_normalize(volume: &Volume) -> Volume {
    let n = volume.data.len() as f64;
    let mean = volume.data.iter().sum::<f64>() / n;
    let var = volume.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let data = if std > 0.0 && std.is_finite() {
        volume.data.iter().map(|v| (v - mean) / std).collect()
    } else {
        vec![0.0; volume.data.len()]
    };
    Volume {
        data,
        ..volume.clone()
    }
}

/// `[nz, ny, nx, 4]` one-hot encoding: code 0→channel 0, 1→1, 2→2, 4→3.
pub fn one_hot_encode(labels: &LabelVolume) -> Result<Tensor> {
    let mut data = vec![0.0; labels.codes.len() * 4];
    for (i, &code) in labels.codes.iter().enumerate() {
        data[i * 4 + code_to_channel(code)?] = 1.0;
    }
    let [nx, ny, nz] = labels.dims;
    Tensor::new(&[nz, ny, nx, 4], data)
}

/// Channel-wise argmax of a `[.., 4]` tensor mapped back to label codes.
pub fn one_hot_decode(t: &Tensor) -> Result<Vec<u8>> {
    if t.channels() != 4 {
        return Err(Error::shape(format!(
            "expected 4 class channels, got {}",
            t.channels()
        )));
    }
    Ok(t.data().chunks(4).map(|v| LABEL_CODES[argmax(v)]).collect())
}

/// Index of the first maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_small_example() {
        let v = Volume::new([3, 1, 1], [1.0; 3], vec![1.0, 2.0, 3.0]).unwrap();
        let z = zscore_normalize(&v);
        let expected = [-1.224_744_871, 0.0, 1.224_744_871];
        for (a, b) in z.data.iter().zip(expected) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn zscore_constant_and_idempotent() {
        let v = Volume::new([2, 2, 1], [1.0; 3], vec![5.0; 4]).unwrap();
        assert!(zscore_normalize(&v).data.iter().all(|&x| x == 0.0));
        let v = Volume::new([4, 1, 1], [1.0; 3], vec![0.3, -2.0, 7.5, 1.0]).unwrap();
        let once = zscore_normalize(&v);
        let twice = zscore_normalize(&once);
        for (a, b) in once.data.iter().zip(&twice.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn one_hot_examples() {
        let l = LabelVolume::new([3, 1, 1], [1.0; 3], vec![4, 0, 2]).unwrap();
        let t = one_hot_encode(&l).unwrap();
        assert_eq!(t.shape(), &[1, 1, 3, 4]);
        assert_eq!(&t.data()[..4], &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(&t.data()[4..8], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(one_hot_decode(&t).unwrap(), vec![4, 0, 2]);
    }

    #[test]
    fn unknown_codes_rejected() {
        assert!(matches!(
            LabelVolume::new([2, 1, 1], [1.0; 3], vec![0, 3]),
            Err(Error::UnknownLabelCode(3))
        ));
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 1.5]).unwrap();
        assert!(LabelVolume::from_volume(&v).is_err());
    }
}
