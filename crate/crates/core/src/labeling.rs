//! Candidate-region identification: binarize at `tau`, label connected
//! components, drop components below `min_size`.
//!
//! Labeling is two-pass over run-lengths. Pass one extracts the maximal
//! runs of super-threshold voxels along x for every (z, y) row and unions
//! each run with the overlapping runs of the already-visited neighbour rows.
//! Pass two resolves run roots and gathers voxels. Because unions always
//! keep the earliest run as root and rows are visited in linear order,
//! regions come out ordered by their smallest linear index.

use serde::{Deserialize, Serialize};

use crate::aggregate::existence_probability;
use crate::error::{Error, Result};
use crate::volume::{ProbabilityVolume, Shape};

/// Which voxels touch. In 2D, `FaceEdge` reduces to the 8-neighbourhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    /// 6 neighbours in 3D, 4 in 2D.
    Face,
    /// 18 neighbours in 3D.
    FaceEdge,
    /// 26 neighbours in 3D, 8 in 2D.
    Full,
}

impl Connectivity {
    /// Maximum number of axes along which two neighbours may differ.
    fn max_offset_axes(self) -> usize {
        match self {
            Connectivity::Face => 1,
            Connectivity::FaceEdge => 2,
            Connectivity::Full => 3,
        }
    }

    /// Parses the neighbour-count notation used on the command line.
    pub fn from_neighbours(n: u32) -> Result<Self> {
        match n {
            4 | 6 => Ok(Connectivity::Face),
            18 => Ok(Connectivity::FaceEdge),
            8 | 26 => Ok(Connectivity::Full),
            _ => Err(Error::InvalidConfig(format!(
                "connectivity {n}, expected one of 4, 6, 8, 18, 26"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelingConfig {
    pub tau: f64,
    pub connectivity: Connectivity,
    pub min_size: usize,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            tau: 0.1,
            connectivity: Connectivity::Full,
            min_size: 1,
        }
    }
}

impl LabelingConfig {
    pub fn with_tau(self, tau: f64) -> Self {
        LabelingConfig { tau, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if self.min_size == 0 {
            return Err(Error::InvalidConfig("min_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One disjoint cluster of super-threshold voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRegion {
    pub id: usize,
    /// Strictly increasing linear indices.
    pub voxels: Vec<usize>,
    pub argmax_index: usize,
    pub existence_prob: f64,
}

impl CandidateRegion {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }

    /// Inclusive bounding box as `(min, max)` per axis, in the volume's rank.
    pub fn bbox(&self, shape: &Shape) -> (Vec<usize>, Vec<usize>) {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for &v in &self.voxels {
            let c = shape.unravel(v);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let skip = 3 - shape.rank();
        (lo[skip..].to_vec(), hi[skip..].to_vec())
    }

    pub fn summary(&self, shape: &Shape) -> RegionSummary {
        let (lo, hi) = self.bbox(shape);
        RegionSummary {
            id: self.id,
            size: self.size(),
            argmax: shape.coords(self.argmax_index),
            existence_prob: self.existence_prob,
            bbox: [lo, hi],
        }
    }
}

/// JSON form of a region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub id: usize,
    pub size: usize,
    pub argmax: Vec<usize>,
    pub existence_prob: f64,
    pub bbox: [Vec<usize>; 2],
}

#[derive(Debug, Clone, Copy)]
struct Run {
    start: usize,
    end: usize,
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn with_capacity(n: usize) -> Self {
        DisjointSet {
            parent: Vec::with_capacity(n),
        }
    }

    fn push(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    /// The smaller root survives, so a root is always the earliest run of
    /// its component.
    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Labels the connected components of `{i : vol[i] > tau}`.
pub fn label(vol: &ProbabilityVolume, cfg: &LabelingConfig) -> Result<Vec<CandidateRegion>> {
    cfg.validate()?;
    let shape = vol.shape();
    let [nz, ny, nx] = shape.zyx();
    let data = vol.data();
    let tau = cfg.tau;
    let max_axes = cfg.connectivity.max_offset_axes();

    let n_rows = nz * ny;
    let mut runs: Vec<Run> = Vec::new();
    let mut row_start = Vec::with_capacity(n_rows + 1);
    let mut sets = DisjointSet::with_capacity(0);

    // Previously visited neighbour rows as (dz, dy); offsets use -1/0/+1.
    const NEIGHBOUR_ROWS: [(isize, isize); 4] = [(0, -1), (-1, -1), (-1, 0), (-1, 1)];

    for row in 0..n_rows {
        let (z, y) = (row / ny, row % ny);
        row_start.push(runs.len());
        let base = row * nx;
        let line = &data[base..base + nx];
        let mut x = 0;
        while x < nx {
            if line[x] > tau {
                let start = x;
                while x < nx && line[x] > tau {
                    x += 1;
                }
                runs.push(Run { start, end: x });
                sets.push();
            } else {
                x += 1;
            }
        }
        let current = row_start[row]..runs.len();
        if current.is_empty() {
            continue;
        }

        for &(dz, dy) in &NEIGHBOUR_ROWS {
            let axes = (dz != 0) as usize + (dy != 0) as usize;
            if axes > max_axes {
                continue;
            }
            let (pz, py) = (z as isize + dz, y as isize + dy);
            if pz < 0 || py < 0 || py >= ny as isize {
                continue;
            }
            let prow = pz as usize * ny + py as usize;
            // Diagonal x-offsets are allowed when one more differing axis
            // still fits the connectivity.
            let reach = usize::from(axes < max_axes);
            let prev = row_start[prow]..row_start[prow + 1];
            let mut j = prev.start;
            for a in current.clone() {
                let ra = runs[a];
                while j < prev.end && runs[j].end + reach <= ra.start {
                    j += 1;
                }
                let mut k = j;
                while k < prev.end && runs[k].start < ra.end + reach {
                    sets.union(a as u32, k as u32);
                    k += 1;
                }
            }
        }
    }
    row_start.push(runs.len());

    let mut slot_of_root: Vec<u32> = vec![u32::MAX; runs.len()];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for row in 0..n_rows {
        let base = row * nx;
        for r in row_start[row]..row_start[row + 1] {
            let root = sets.find(r as u32) as usize;
            if slot_of_root[root] == u32::MAX {
                slot_of_root[root] = groups.len() as u32;
                groups.push(Vec::new());
            }
            let run = runs[r];
            groups[slot_of_root[root] as usize].extend(base + run.start..base + run.end);
        }
    }

    let mut regions = Vec::with_capacity(groups.len());
    // Runs of one component arrive in row order, so voxels are sorted.
    for voxels in groups {
        if voxels.len() < cfg.min_size {
            continue;
        }
        let (existence_prob, argmax_index) = existence_probability(vol, &voxels)?;
        regions.push(CandidateRegion {
            id: regions.len(),
            voxels,
            argmax_index,
            existence_prob,
        });
    }
    Ok(regions)
}

/// The connected-component baseline: number of candidate regions.
pub fn cc_count(vol: &ProbabilityVolume, cfg: &LabelingConfig) -> Result<usize> {
    Ok(label(vol, cfg)?.len())
}


#[cfg(test)]
mod tests {
    use super::oracle::flood_fill_components;
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn cfg(tau: f64, connectivity: Connectivity) -> LabelingConfig {
        LabelingConfig {
            tau,
            connectivity,
            min_size: 1,
        }
    }

    fn diagonal_pair() -> ProbabilityVolume {
        let shape = Shape::new(&[3, 3, 3]).unwrap();
        let mut data = vec![0.0; 27];
        data[shape.linear_index(0, 0, 0)] = 0.9;
        data[shape.linear_index(1, 1, 1)] = 0.8;
        ProbabilityVolume::new(shape, data).unwrap()
    }

    #[test]
    fn all_zero_has_no_regions() {
        let vol = ProbabilityVolume::zeros(Shape::new(&[2, 2, 2]).unwrap());
        assert!(label(&vol, &cfg(0.1, Connectivity::Full))
            .unwrap()
            .is_empty());
        assert_eq!(cc_count(&vol, &LabelingConfig::default()).unwrap(), 0);
    }

    #[test]
    fn corner_touching_voxels() {
        let vol = diagonal_pair();
        let full = label(&vol, &cfg(0.5, Connectivity::Full)).unwrap();
        assert_eq!(full.len(), 1);
        assert_eq!(full[0].size(), 2);
        assert_eq!(full[0].existence_prob, 0.9);
        assert_eq!(full[0].argmax_index, 0);
        let face = label(&vol, &cfg(0.5, Connectivity::Face)).unwrap();
        assert_eq!(face.len(), 2);
        assert!(face.iter().all(|r| r.size() == 1));
        let edge = label(&vol, &cfg(0.5, Connectivity::FaceEdge)).unwrap();
        assert_eq!(edge.len(), 2);
    }

    #[test]
    fn edge_touching_voxels_need_face_edge() {
        let shape = Shape::new(&[2, 2, 1]).unwrap();
        let mut data = vec![0.0; 4];
        data[shape.linear_index(0, 0, 0)] = 0.9;
        data[shape.linear_index(1, 1, 0)] = 0.9;
        let vol = ProbabilityVolume::new(shape, data).unwrap();
        assert_eq!(cc_count(&vol, &cfg(0.5, Connectivity::Face)).unwrap(), 2);
        assert_eq!(
            cc_count(&vol, &cfg(0.5, Connectivity::FaceEdge)).unwrap(),
            1
        );
    }

    #[test]
    fn threshold_is_strict() {
        let vol = ProbabilityVolume::from_dims(&[1, 3], vec![0.5, 0.0, 0.6]).unwrap();
        assert_eq!(cc_count(&vol, &cfg(0.5, Connectivity::Full)).unwrap(), 1);
    }

    #[test]
    fn min_size_filters_and_renumbers() {
        let vol =
            ProbabilityVolume::from_dims(&[1, 6], vec![0.9, 0.0, 0.7, 0.8, 0.0, 0.6]).unwrap();
        let c = LabelingConfig {
            min_size: 2,
            ..cfg(0.5, Connectivity::Full)
        };
        let regions = label(&vol, &c).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].id, 0);
        assert_eq!(regions[0].voxels, vec![2, 3]);
        assert_eq!(regions[0].argmax_index, 3);
    }

    #[test]
    fn invalid_config_rejected() {
        let vol = ProbabilityVolume::zeros(Shape::new(&[2, 2]).unwrap());
        for tau in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(label(&vol, &cfg(tau, Connectivity::Full)).is_err());
        }
        let c = LabelingConfig {
            min_size: 0,
            ..Default::default()
        };
        assert!(label(&vol, &c).is_err());
    }

    #[test]
    fn two_dimensional_connectivity() {
        // Diagonal pixels: separate under 4-, joined under 8-connectivity.
        let vol = ProbabilityVolume::from_dims(&[2, 2], vec![0.9, 0.0, 0.0, 0.9]).unwrap();
        assert_eq!(cc_count(&vol, &cfg(0.5, Connectivity::Face)).unwrap(), 2);
        assert_eq!(cc_count(&vol, &cfg(0.5, Connectivity::Full)).unwrap(), 1);
        assert_eq!(
            cc_count(&vol, &cfg(0.5, Connectivity::FaceEdge)).unwrap(),
            1
        );
    }

    #[test]
    fn u_shape_merges_late() {
        // The two arms only meet on the last row, so the union must relabel
        // an already-started component.
        #[rustfmt::skip]
        let data = vec![
            0.9, 0.0, 0.9,
            0.9, 0.0, 0.9,
            0.9, 0.9, 0.9,
        ];
        let vol = ProbabilityVolume::from_dims(&[3, 3], data).unwrap();
        let regions = label(&vol, &cfg(0.5, Connectivity::Face)).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].voxels, vec![0, 2, 3, 5, 6, 7, 8]);
    }

    #[test]
    fn bbox_and_summary() {
        let vol = diagonal_pair();
        let r = &label(&vol, &cfg(0.5, Connectivity::Full)).unwrap()[0];
        let s = r.summary(&vol.shape());
        assert_eq!(s.argmax, vec![0, 0, 0]);
        assert_eq!(s.bbox, [vec![0, 0, 0], vec![1, 1, 1]]);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"bbox\":[[0,0,0],[1,1,1]]"));
    }

    #[test]
    fn connectivity_from_neighbours() {
        assert_eq!(
            Connectivity::from_neighbours(6).unwrap(),
            Connectivity::Face
        );
        assert_eq!(
            Connectivity::from_neighbours(4).unwrap(),
            Connectivity::Face
        );
        assert_eq!(
            Connectivity::from_neighbours(18).unwrap(),
            Connectivity::FaceEdge
        );
        assert_eq!(
            Connectivity::from_neighbours(8).unwrap(),
            Connectivity::Full
        );
        assert!(Connectivity::from_neighbours(10).is_err());
    }

    fn volume_strategy() -> impl Strategy<Value = ProbabilityVolume> {
        (1usize..=6, 1usize..=6, 1usize..=6).prop_flat_map(|(z, y, x)| {
            proptest::collection::vec(prop_oneof![3 => Just(0.0), 2 => 0.0f64..=1.0], z * y * x)
                .prop_map(move |d| ProbabilityVolume::from_dims(&[z, y, x], d).unwrap())
        })
    }

    fn conn_strategy() -> impl Strategy<Value = Connectivity> {
        prop_oneof![
            Just(Connectivity::Face),
            Just(Connectivity::FaceEdge),
            Just(Connectivity::Full)
        ]
    }

    proptest! {
        #[test]
        fn matches_flood_fill(vol in volume_strategy(), conn in conn_strategy(), tau in 0.05f64..0.95, min_size in 1usize..4) {
            let c = LabelingConfig { tau, connectivity: conn, min_size };
            let got: BTreeSet<Vec<usize>> = label(&vol, &c).unwrap().into_iter().map(|r| r.voxels).collect();
            let want: BTreeSet<Vec<usize>> = flood_fill_components(&vol, &c).into_iter().collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn regions_are_canonical(vol in volume_strategy(), conn in conn_strategy(), tau in 0.05f64..0.95) {
            let c = cfg(tau, conn);
            let regions = label(&vol, &c).unwrap();
            let mut seen = std::collections::HashSet::new();
            for (k, r) in regions.iter().enumerate() {
                prop_assert_eq!(r.id, k);
                prop_assert!(r.voxels.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(r.voxels.iter().all(|&v| vol.get(v) > tau));
                prop_assert!(r.voxels.binary_search(&r.argmax_index).is_ok());
                prop_assert_eq!(r.existence_prob, vol.get(r.argmax_index));
                for &v in &r.voxels {
                    prop_assert!(seen.insert(v));
                }
            }
            prop_assert!(regions.windows(2).all(|w| w[0].voxels[0] < w[1].voxels[0]));
            prop_assert_eq!(label(&vol, &c).unwrap(), regions);
        }

        #[test]
        fn higher_tau_nests(vol in volume_strategy(), conn in conn_strategy(), t1 in 0.05f64..0.9, dt in 0.0f64..0.5) {
            let t2 = (t1 + dt).min(0.95);
            let low = label(&vol, &cfg(t1, conn)).unwrap();
            for r in label(&vol, &cfg(t2, conn)).unwrap() {
                let parents = low.iter().filter(|l| r.voxels.iter().any(|v| l.voxels.binary_search(v).is_ok())).count();
                prop_assert_eq!(parents, 1);
                let parent = low.iter().find(|l| l.voxels.binary_search(&r.voxels[0]).is_ok()).unwrap();
                prop_assert!(r.voxels.iter().all(|v| parent.voxels.binary_search(v).is_ok()));
            }
        }

        #[test]
        fn face_refines_full(vol in volume_strategy(), tau in 0.05f64..0.95) {
            let coarse = label(&vol, &cfg(tau, Connectivity::Full)).unwrap();
            for r in label(&vol, &cfg(tau, Connectivity::Face)).unwrap() {
                let parent = coarse.iter().find(|l| l.voxels.binary_search(&r.voxels[0]).is_ok()).unwrap();
                prop_assert!(r.voxels.iter().all(|v| parent.voxels.binary_search(v).is_ok()));
            }
        }
    }
}
