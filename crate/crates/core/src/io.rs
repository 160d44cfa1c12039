//! Point-cloud and occupancy file formats.
//!
//! Point cloud (`CTPV`), little-endian:
//!
//! ```text
//! magic "CTPV" | version u32 (=1) | n u64 | field mask u32
//! payload: f32 positions (n×3) | f32 intensity (n) | u16 labels (n, if present)
//! ```
//!
//! Field mask bits: 1 positions, 2 intensity, 4 labels.
//!
//! Occupancy (`COCC`):
//!
//! ```text
//! magic "COCC" | dims 3×u32 | origin 3×f64 | voxel_size f64
//! payload: u16 per voxel, x slowest then y then z
//! ```

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::geometry::{CartPoint, GridSpec};

const CLOUD_MAGIC: [u8; 4] = *b"CTPV";
const CLOUD_VERSION: u32 = 1;
const OCC_MAGIC: [u8; 4] = *b"COCC";

pub const FIELD_POSITIONS: u32 = 1;
pub const FIELD_INTENSITY: u32 = 2;
pub const FIELD_LABELS: u32 = 4;

/// Class id reserved for empty voxels in occupancy grids.
pub const EMPTY_CLASS: u16 = 0;

/// Cursor over a byte slice that reports truncation as a [`FormatError`].
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn bytes(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> std::result::Result<(), FormatError> {
        let found: [u8; 4] = self.bytes(4)?.try_into().unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> std::result::Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> std::result::Result<(), FormatError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

/// LiDAR sweep: positions in meters, intensity in `[0, 1]`, optional 1-based
/// semantic labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<[f32; 3]>,
    pub intensity: Vec<f32>,
    pub labels: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f32; 3]>, intensity: Vec<f32>, labels: Option<Vec<u16>>) -> Result<Self> {
        let pc = Self {
            positions,
            intensity,
            labels,
        };
        pc.check_lengths()?;
        if let Some(i) = pc.positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data(format!("point {i} has a non-finite coordinate")));
        }
        Ok(pc)
    }

    fn check_lengths(&self) -> Result<()> {
        let n = self.positions.len();
        if self.intensity.len() != n || self.labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::Data(format!(
                "point cloud field lengths disagree: {} positions, {} intensities, {:?} labels",
                n,
                self.intensity.len(),
                self.labels.as_ref().map(Vec::len)
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn point(&self, i: usize) -> CartPoint {
        let [x, y, z] = self.positions[i];
        CartPoint::new(x as f64, y as f64, z as f64)
    }

    /// Checks labels against `num_classes` semantic classes (ids
    /// `1..=num_classes`; 0 means unlabeled).
    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(i) = labels.iter().position(|&l| l as usize > num_classes) {
                return Err(Error::Data(format!(
                    "point {i} has label {} but only {num_classes} classes exist",
                    labels[i]
                )));
            }
        }
        Ok(())
    }

    /// Reorders points by `perm` (`out[i] = self[perm[i]]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            intensity: perm.iter().map(|&i| self.intensity[i]).collect(),
            labels: self.labels.as_ref().map(|l| perm.iter().map(|&i| l[i]).collect()),
        }
    }
}

pub fn encode_point_cloud(pc: &PointCloud) -> Vec<u8> {
    let n = pc.len();
    let mask = FIELD_POSITIONS | FIELD_INTENSITY | if pc.labels.is_some() { FIELD_LABELS } else { 0 };
    let mut out = Vec::with_capacity(20 + n * 18);
    out.extend_from_slice(&CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&mask.to_le_bytes());
    for p in &pc.positions {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in &pc.intensity {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &pc.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

fn f32s(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()))
}

pub fn decode_point_cloud(bytes: &[u8]) -> std::result::Result<PointCloud, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CLOUD_MAGIC)?;
    let version = r.u32()?;
    if version != CLOUD_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let n = usize::try_from(r.u64()?).map_err(|_| FormatError::Header("point count overflows".into()))?;
    let mask = r.u32()?;
    if mask & !(FIELD_POSITIONS | FIELD_INTENSITY | FIELD_LABELS) != 0 {
        return Err(FormatError::Header(format!("unknown field bits in mask {mask:#x}")));
    }
    if mask & FIELD_POSITIONS == 0 {
        return Err(FormatError::Header("positions field missing".into()));
    }
    let available = r.remaining();
    let size = |per: usize| {
        n.checked_mul(per).ok_or(FormatError::Truncated {
            needed: usize::MAX,
            available,
        })
    };
    let mut positions = Vec::with_capacity(n.min(1 << 24));
    let raw = r.bytes(size(12)?)?;
    for (i, v) in f32s(raw).enumerate() {
        if !v.is_finite() {
            return Err(FormatError::NonFinite {
                field: "positions",
                index: i / 3,
            });
        }
    }
    positions.extend(raw.chunks_exact(12).map(|c| {
        let mut it = f32s(c);
        [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
    }));
    let intensity = if mask & FIELD_INTENSITY != 0 {
        let v: Vec<f32> = f32s(r.bytes(size(4)?)?).collect();
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(FormatError::NonFinite {
                field: "intensity",
                index: i,
            });
        }
        v
    } else {
        vec![0.0; n]
    };
    let labels = if mask & FIELD_LABELS != 0 {
        Some(
            r.bytes(size(2)?)?
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        )
    } else {
        None
    };
    r.finish()?;
    Ok(PointCloud {
        positions,
        intensity,
        labels,
    })
}

pub fn write_point_cloud(pc: &PointCloud, path: &Path) -> Result<()> {
    pc.check_lengths()?;
    std::fs::write(path, encode_point_cloud(pc)).map_err(|e| Error::io(path, e))
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_point_cloud(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Dense class-id grid; [`EMPTY_CLASS`] marks free space.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub values: Vec<u16>,
}

impl OccupancyGrid {
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            spec,
            values: vec![EMPTY_CLASS; spec.num_voxels()],
        }
    }

    pub fn get(&self, idx: [usize; 3]) -> u16 {
        self.values[self.spec.linear_index(idx)]
    }

    pub fn set(&mut self, idx: [usize; 3], v: u16) {
        let i = self.spec.linear_index(idx);
        self.values[i] = v;
    }

    pub fn occupied_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != EMPTY_CLASS).count()
    }
}

pub fn encode_occupancy(grid: &OccupancyGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 12 + 32 + grid.values.len() * 2);
    out.extend_from_slice(&OCC_MAGIC);
    for d in grid.spec.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for o in grid.spec.origin {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend_from_slice(&grid.spec.voxel_size.to_le_bytes());
    for v in &grid.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_occupancy(bytes: &[u8]) -> std::result::Result<OccupancyGrid, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(OCC_MAGIC)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let origin = [r.f64()?, r.f64()?, r.f64()?];
    let voxel_size = r.f64()?;
    if origin.iter().chain([&voxel_size]).any(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite {
            field: "grid header",
            index: 0,
        });
    }
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let payload = r.remaining();
    if n.and_then(|n| n.checked_mul(2)) != Some(payload) {
        return Err(FormatError::DimMismatch {
            dims: dims.to_vec(),
            payload,
        });
    }
    let values = r
        .bytes(payload)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(OccupancyGrid {
        spec: GridSpec {
            dims,
            origin,
            voxel_size,
        },
        values,
    })
}

pub fn write_occupancy(grid: &OccupancyGrid, path: &Path) -> Result<()> {
    if grid.values.len() != grid.spec.num_voxels() {
        return Err(Error::Data(format!(
            "occupancy grid has {} values for dims {:?}",
            grid.values.len(),
            grid.spec.dims
        )));
    }
    std::fs::write(path, encode_occupancy(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_occupancy(path: &Path) -> Result<OccupancyGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_occupancy(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud() -> PointCloud {
        PointCloud::new(
            vec![[1.0, -2.5, 0.25], [3.0e3, 0.0, -1.0]],
            vec![0.5, 1.0],
            Some(vec![1, 4]),
        )
        .unwrap()
    }

    #[test]
    fn empty_cloud_roundtrips() {
        let pc = PointCloud::default();
        let back = decode_point_cloud(&encode_point_cloud(&pc)).unwrap();
        assert_eq!(back, pc);
        assert!(back.is_empty());
    }

    #[test]
    fn header_layout() {
        let bytes = encode_point_cloud(&cloud());
        assert_eq!(&bytes[..4], b"CTPV");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 7);
        assert_eq!(bytes.len(), 20 + 2 * 12 + 2 * 4 + 2 * 2);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1.0);
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_point_cloud(&cloud());
        bytes[8..16].copy_from_slice(&5u64.to_le_bytes());
        assert!(matches!(decode_point_cloud(&bytes), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn magic_and_non_finite() {
        let mut bytes = encode_point_cloud(&cloud());
        bytes[3] = b'X';
        assert!(matches!(decode_point_cloud(&bytes), Err(FormatError::BadMagic { .. })));
        let mut bytes = encode_point_cloud(&cloud());
        bytes[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(
            decode_point_cloud(&bytes),
            Err(FormatError::NonFinite {
                field: "positions",
                index: 0
            })
        );
    }

    #[test]
    fn label_range_check() {
        assert!(cloud().validate_labels(4).is_ok());
        assert!(cloud().validate_labels(3).is_err());
    }

    #[test]
    fn occupancy_roundtrip_and_mismatch() {
        let spec = GridSpec {
            dims: [3, 2, 4],
            origin: [-1.0, 2.0, -0.5],
            voxel_size: 0.25,
        };
        let empty = OccupancyGrid::empty(spec);
        assert_eq!(decode_occupancy(&encode_occupancy(&empty)).unwrap(), empty);

        let mut g = OccupancyGrid::empty(spec);
        g.set([2, 1, 3], 5);
        g.set([0, 0, 1], 1);
        let bytes = encode_occupancy(&g);
        assert_eq!(bytes.len(), 4 + 12 + 32 + 24 * 2);
        assert_eq!(decode_occupancy(&bytes).unwrap(), g);
        // z is the fastest axis
        assert_eq!(u16::from_le_bytes(bytes[48 + 2..48 + 4].try_into().unwrap()), 1);

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(decode_occupancy(&bad), Err(FormatError::DimMismatch { .. })));
    }

    proptest! {
        #[test]
        fn cloud_roundtrip_is_bit_exact(
            pts in proptest::collection::vec((-1e4f32..1e4, -1e4f32..1e4, -50f32..50.0, 0f32..=1.0, 0u16..20), 0..64),
            with_labels in any::<bool>(),
        ) {
            let pc = PointCloud::new(
                pts.iter().map(|p| [p.0, p.1, p.2]).collect(),
                pts.iter().map(|p| p.3).collect(),
                with_labels.then(|| pts.iter().map(|p| p.4).collect()),
            ).unwrap();
            let back = decode_point_cloud(&encode_point_cloud(&pc)).unwrap();
            prop_assert_eq!(encode_point_cloud(&back), encode_point_cloud(&pc));
            prop_assert_eq!(back, pc);
        }
    }
}
