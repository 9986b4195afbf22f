use super::{argmax, one_hot_encode, LabelVolume, MultiModalCase, LABEL_CODES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[x, y, z]` patch extent.
pub const DEFAULT_PATCH_EXTENT: [usize; 3] = [128, 128, 64];
/// `[x, y, z]` strides; on a 240×240×155 volume they give 5×5×7 patches.
pub const DEFAULT_PATCH_STRIDES: [usize; 3] = [28, 28, 15];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    /// `[x, y, z]`.
    pub patch_extent: [usize; 3],
    /// `[x, y, z]` corners, sorted lexicographically.
    pub origins: Vec<[usize; 3]>,
    pub volume_extent: [usize; 3],
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Number of patches covering each voxel, in volume index order.
    pub fn coverage(&self) -> Vec<u32> {
        let [nx, ny, nz] = self.volume_extent;
        let [px, py, pz] = self.patch_extent;
        let mut counts = vec![0u32; nx * ny * nz];
        for o in &self.origins {
            for z in o[2]..o[2] + pz {
                for y in o[1]..o[1] + py {
                    let row = nx * (y + ny * z);
                    for c in &mut counts[row + o[0]..row + o[0] + px] {
                        *c += 1;
                    }
                }
            }
        }
        counts
    }
}

/// `floor((extent − patch) / stride) + 1` origins spaced by `stride`,
/// ending at `extent − patch`: the last origin moves there when its
/// predecessor's patch still reaches it, otherwise one origin is appended.
fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let n = last / stride + 1;
    let mut origins: Vec<usize> = (0..n).map(|k| k * stride).collect();
    if origins[n - 1] != last {
        if n >= 2 && origins[n - 2] + patch >= last {
            origins[n - 1] = last;
        } else {
            origins.push(last);
        }
    }
    origins
}

pub fn make_patch_grid(
    volume_extent: [usize; 3],
    patch_extent: [usize; 3],
    strides: [usize; 3],
) -> Result<PatchGrid> {
    if (0..3).any(|a| patch_extent[a] > volume_extent[a]) {
        return Err(Error::PatchTooLarge {
            patch: patch_extent,
            volume: volume_extent,
        });
    }
    if patch_extent.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "patch extent {patch_extent:?} must be positive"
        )));
    }
    if (0..3).any(|a| strides[a] == 0 || strides[a] > patch_extent[a]) {
        return Err(Error::InvalidConfig(format!(
            "strides {strides:?} must lie in 1..=patch extent {patch_extent:?}"
        )));
    }
    let axes: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_origins(volume_extent[a], patch_extent[a], strides[a]))
        .collect();
    let mut origins = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(PatchGrid {
        patch_extent,
        origins,
        volume_extent,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    /// `[1, pz, py, px, 4]` modality channels.
    pub input: Tensor,
    /// `[1, pz, py, px, 4]` one-hot classes.
    pub target: Option<Tensor>,
}

fn crop_channels(
    volumes: &[&[f64]],
    dims: [usize; 3],
    origin: [usize; 3],
    extent: [usize; 3],
) -> Tensor {
    let [nx, ny, _] = dims;
    let [px, py, pz] = extent;
    let c = volumes.len();
    let mut data = Vec::with_capacity(px * py * pz * c);
    for z in origin[2]..origin[2] + pz {
        for y in origin[1]..origin[1] + py {
            let row = nx * (y + ny * z);
            for x in origin[0]..origin[0] + px {
                data.extend(volumes.iter().map(|v| v[row + x]));
            }
        }
    }
    Tensor::new(&[1, pz, py, px, c], data).expect("crop size matches extent")
}

/// Crops one patch; the target is included when `with_target` is set.
pub fn extract_patch(
    case: &MultiModalCase,
    origin: [usize; 3],
    extent: [usize; 3],
    with_target: bool,
) -> Result<Patch> {
    let dims = case.dims();
    if (0..3).any(|a| origin[a] + extent[a] > dims[a]) {
        return Err(Error::PatchTooLarge {
            patch: extent,
            volume: dims,
        });
    }
    let views: Vec<&[f64]> = case.modalities.iter().map(|v| v.data.as_slice()).collect();
    let input = crop_channels(&views, dims, origin, extent);
    let target = if with_target {
        let labels = case
            .labels
            .as_ref()
            .ok_or_else(|| Error::MissingLabels(case.case_id.clone()))?;
        let hot = one_hot_encode(labels)?;
        let planes: Vec<Vec<f64>> = (0..4)
            .map(|k| hot.data().iter().skip(k).step_by(4).copied().collect())
            .collect();
        let views: Vec<&[f64]> = planes.iter().map(Vec::as_slice).collect();
        Some(crop_channels(&views, dims, origin, extent))
    } else {
        None
    };
    Ok(Patch {
        origin,
        input,
        target,
    })
}

/// Crops every patch of `grid` in origin order.
pub fn extract_patches(case: &MultiModalCase, grid: &PatchGrid, training: bool) -> Result<Vec<Patch>> {
    if case.dims() != grid.volume_extent {
        return Err(Error::GridMismatch(format!(
            "grid for {:?}, case {:?}",
            grid.volume_extent,
            case.dims()
        )));
    }
    if training && case.labels.is_none() {
        return Err(Error::MissingLabels(case.case_id.clone()));
    }
    grid.origins
        .iter()
        .map(|&o| extract_patch(case, o, grid.patch_extent, training))
        .collect()
}

/// Reassembled class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Stitched {
    /// `[nz, ny, nx, C]`, channel sums 1.
    pub probs: Tensor,
    /// Per-voxel argmax channel.
    pub argmax: Vec<u8>,
}

impl Stitched {
    /// Argmax channels mapped to label codes; requires four classes.
    pub fn to_labels(&self, spacing: [f64; 3]) -> Result<LabelVolume> {
        if self.probs.channels() != LABEL_CODES.len() {
            return Err(Error::shape(format!(
                "{} class channels cannot map to label codes",
                self.probs.channels()
            )));
        }
        let s = self.probs.shape();
        LabelVolume::new(
            [s[2], s[1], s[0]],
            spacing,
            self.argmax.iter().map(|&c| LABEL_CODES[c as usize]).collect(),
        )
    }
}

/// Averages overlapping patch probabilities per channel and renormalizes.
///
/// Each entry of `patch_probs` is `[1, pz, py, px, C]` or `[pz, py, px, C]`
/// and corresponds to the grid origin at the same index.
pub fn stitch_patches(grid: &PatchGrid, patch_probs: &[Tensor]) -> Result<Stitched> {
    if patch_probs.len() != grid.origins.len() || patch_probs.is_empty() {
        return Err(Error::GridMismatch(format!(
            "{} patches for {} origins",
            patch_probs.len(),
            grid.origins.len()
        )));
    }
    let [px, py, pz] = grid.patch_extent;
    let c = patch_probs[0].channels();
    for p in patch_probs {
        let spatial: &[usize] = match p.rank() {
            5 if p.shape()[0] == 1 => &p.shape()[1..4],
            4 => &p.shape()[..3],
            _ => &[],
        };
        if spatial != [pz, py, px] || p.channels() != c {
            return Err(Error::GridMismatch(format!(
                "patch shape {:?}, expected [1, {pz}, {py}, {px}, {c}]",
                p.shape()
            )));
        }
    }
    let [nx, ny, nz] = grid.volume_extent;
    let mut acc = vec![0.0; nx * ny * nz * c];
    let mut count = vec![0u32; nx * ny * nz];
    for (o, p) in grid.origins.iter().zip(patch_probs) {
        let src = p.data();
        let mut i = 0;
        for z in o[2]..o[2] + pz {
            for y in o[1]..o[1] + py {
                let row = nx * (y + ny * z);
                for x in o[0]..o[0] + px {
                    let v = row + x;
                    count[v] += 1;
                    for (a, s) in acc[v * c..(v + 1) * c].iter_mut().zip(&src[i..i + c]) {
                        *a += s;
                    }
                    i += c;
                }
            }
        }
    }
    let mut argmax_map = Vec::with_capacity(count.len());
    for (v, &n) in count.iter().enumerate() {
        if n == 0 {
            return Err(Error::GridMismatch(format!("voxel {v} not covered")));
        }
        let cell = &mut acc[v * c..(v + 1) * c];
        let total: f64 = cell.iter().sum();
        if total > 0.0 {
            cell.iter_mut().for_each(|x| *x /= total);
        } else {
            cell.iter_mut().for_each(|x| *x = 1.0 / c as f64);
        }
        argmax_map.push(argmax(cell) as u8);
    }
    Ok(Stitched {
        probs: Tensor::new(&[nz, ny, nx, c], acc)?,
        argmax: argmax_map,
    })
}
