//! Region existence probabilities.
//!
//! A voxel inside a lesion implies its region holds a lesion, so each voxel
//! probability is the region probability scaled by the conditional chance of
//! that voxel lying inside the lesion. When at least one voxel of a real
//! lesion is certain to be inside it, the region probability is the largest
//! voxel probability in the region. Only that max rule is implemented.

use crate::error::{Error, Result};
use crate::volume::ProbabilityVolume;

/// Returns `(max probability, argmax)` over `voxels`. Ties resolve to the
/// smallest linear index, independent of enumeration order.
pub fn existence_probability(vol: &ProbabilityVolume, voxels: &[usize]) -> Result<(f64, usize)> {
    let data = vol.data();
    let mut iter = voxels.iter().copied();
    let first = iter.next().ok_or(Error::EmptyRegion)?;
    let mut best = (data[first], first);
    for i in iter {
        let v = data[i];
        if v > best.0 || (v == best.0 && i < best.1) {
            best = (v, i);
        }
    }
    Ok(best)
}
